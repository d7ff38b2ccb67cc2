"""Deep feature reweighting: retrain only the linear head on frozen features."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .models import cross_entropy, fit_logistic_lbfgs
from .optim import LbfgsConfig

STD_FLOOR = 1e-8
DFR_L2 = 1e-3
DFR_LBFGS = LbfgsConfig(steps=500, learning_rate=0.5)


def _embed(model, images, batch=500):
    out = [model.features(images[i:i + batch]).astype(np.float64) for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.feature_dim))


def extract_normalized_embeddings(model, fit_set, *apply_sets):
    """Features standardized with the fit set's per-dimension mean and std.

    Returns ``(fit_embeddings, [apply_embeddings...], (mean, std))``. Dimensions
    with std below the floor collapse to zero instead of blowing up.
    """
    fit = _embed(model, fit_set.images)
    mean = fit.mean(axis=0)
    std = np.maximum(fit.std(axis=0), STD_FLOOR)
    applied = [(_embed(model, ds.images) - mean) / std for ds in apply_sets]
    return (fit - mean) / std, applied, (mean, std)


def dfr_retrain(embeddings, labels, test_embeddings, test_labels, num_classes, l2=DFR_L2, lbfgs=DFR_LBFGS):
    """L2-regularized logistic head on embeddings; returns ``(head, test_acc, test_loss)``."""
    if embeddings.shape[1] != test_embeddings.shape[1]:
        raise ConfigError(f"embedding dims differ: {embeddings.shape[1]} vs {test_embeddings.shape[1]}")
    head = fit_logistic_lbfgs(embeddings, labels, num_classes, lbfgs, l2=l2)
    logits = head.forward(test_embeddings)
    loss, _ = cross_entropy(logits, test_labels)
    return head, float(np.mean(logits.argmax(axis=1) == test_labels)), loss


def dfr_evaluate(model, clean_subset, test_set, **kw):
    """DFR test accuracy and loss of one feature extractor."""
    fit, (test,), _ = extract_normalized_embeddings(model, clean_subset, test_set)
    _, acc, loss = dfr_retrain(fit, clean_subset.labels, test, test_set.labels, clean_subset.num_classes, **kw)
    return acc, loss


@dataclass
class DfrSweep:
    epochs: list
    accs: list
    losses: list

    @property
    def max_acc(self):
        return max(self.accs)

    @property
    def argmax_epoch(self):
        return self.epochs[int(np.argmax(self.accs))]

    @property
    def min_loss(self):
        return min(self.losses)


def dfr_sweep(checkpoints, template, clean_subset, test_set, **kw):
    """DFR on every checkpoint of a series, in epoch order."""
    if len(checkpoints) == 0:
        raise ConfigError("DFR sweep needs at least one checkpoint")
    if checkpoints.arch != template.arch():
        raise ConfigError(f"checkpoint architecture {checkpoints.arch!r} != model {template.arch()!r}")
    accs, losses = [], []
    for i in range(len(checkpoints)):
        acc, loss = dfr_evaluate(checkpoints.model_at(i, template), clean_subset, test_set, **kw)
        accs.append(acc)
        losses.append(loss)
    return DfrSweep(checkpoints.epochs(), accs, losses)


def write_dfr_csv(sweep, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "dfr_test_acc", "dfr_test_loss"])
        for e, a, l in zip(sweep.epochs, sweep.accs, sweep.losses):
            out.writerow([e, f"{a:.6f}", f"{l:.6f}"])
        out.writerow(["max_acc", "argmax_epoch", "min_loss"])
        out.writerow([f"{sweep.max_acc:.6f}", sweep.argmax_epoch, f"{sweep.min_loss:.6f}"])
