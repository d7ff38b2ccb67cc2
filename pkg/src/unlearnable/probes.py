"""Linear-separability probes and diagnostic images (class averages, weight maps)."""

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .models import fit_logistic_lbfgs
from .optim import LbfgsConfig

TARGETS = ("perturbations", "images")


class DegenerateProbeWarning(UserWarning):
    """Probe inputs carry no signal (every value identical)."""


@dataclass
class ProbeResult:
    target: str
    poison: str
    train_acc: float
    steps: int


def minmax_normalize(x):
    """Map the whole array to [0, 1] with one global min and max."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo)


def separability_probe(target, poisoned, clean=None, labels=None, lbfgs=LbfgsConfig()):
    """Training accuracy of multinomial logistic regression on flattened inputs.

    ``target="perturbations"`` fits on ``poisoned - clean`` after a global
    zero-one normalization; ``target="images"`` fits on the poisoned images as
    they are. ``labels`` overrides the dataset labels (e.g. a shuffled copy).
    High accuracy means the inputs are linearly separable.
    """
    if target not in TARGETS:
        raise ConfigError(f"probe target must be one of {TARGETS}, got {target!r}")
    y = poisoned.labels if labels is None else np.asarray(labels)
    if len(y) != len(poisoned):
        raise ConfigError(f"{len(y)} labels for {len(poisoned)} samples")
    k = poisoned.num_classes
    if target == "perturbations":
        if clean is None:
            raise ConfigError("perturbation probe needs the aligned clean dataset")
        if clean.images.shape != poisoned.images.shape:
            raise ConfigError(f"clean {clean.images.shape} and poisoned {poisoned.images.shape} differ")
        x = poisoned.flat().astype(np.float64) - clean.flat()
    else:
        x = poisoned.flat().astype(np.float64)
    if x.size == 0 or x.max() == x.min():
        warnings.warn("all probe inputs are identical; reporting chance accuracy", DegenerateProbeWarning)
        return 1.0 / k
    if target == "perturbations":
        x = minmax_normalize(x)
    model = fit_logistic_lbfgs(x, y, k, lbfgs)
    return float(np.mean(model.forward(x).argmax(axis=1) == y))


def write_probe_csv(results, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["target", "poison", "train_acc", "steps"])
        for r in results:
            out.writerow([r.target, r.poison, f"{r.train_acc:.6f}", r.steps])


def class_average_images(dataset):
    """K x C x H x W per-class pixel means (float64)."""
    counts = dataset.class_counts()
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise ConfigError(f"class {int(empty[0])} has no samples")
    sums = np.zeros((dataset.num_classes,) + tuple(dataset.shape))
    np.add.at(sums, dataset.labels, dataset.images.astype(np.float64))
    return sums / counts.reshape(-1, 1, 1, 1)


def to_uint8_minmax(column):
    """Min-max scale to 0..255; a constant input maps to mid-gray 128."""
    column = np.asarray(column, dtype=np.float64)
    lo, hi = column.min(), column.max()
    if hi == lo:
        return np.full(column.shape, 128, dtype=np.uint8)
    return np.rint((column - lo) / (hi - lo) * 255).astype(np.uint8)


def write_ppm(path, image_chw):
    """Binary PPM (P6) from a 3 x H x W uint8 array."""
    c, h, w = image_chw.shape
    if c != 3:
        raise ShapeError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image_chw.transpose(1, 2, 0)).tobytes())


def read_ppm(path):
    """Inverse of :func:`write_ppm` for files it produced. Returns 3 x H x W uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = data.split(maxsplit=4)
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path} is not an 8-bit P6 file")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[len(data) - 3 * w * h:], dtype=np.uint8)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1)


def export_weight_visualization(w, shape, directory, prefix="class"):
    """Write column k of ``w`` (d x K) as ``<prefix>_<k>.ppm``; returns the paths."""
    w = np.asarray(w)
    shape = tuple(int(s) for s in shape)
    if w.ndim != 2 or w.shape[0] != int(np.prod(shape)):
        raise ShapeError(f"weights {w.shape} do not match image shape {shape}")
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k in range(w.shape[1]):
        path = os.path.join(directory, f"{prefix}_{k}.ppm")
        write_ppm(path, to_uint8_minmax(w[:, k]).reshape(shape))
        paths.append(path)
    return paths
