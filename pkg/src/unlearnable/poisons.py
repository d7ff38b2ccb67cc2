"""Perturbation sets (class-wise and sample-wise) and their application to datasets."""

import struct
from dataclasses import dataclass, replace

import numpy as np

from .data import ImageDataset
from .errors import ConfigError, FormatError

MODES = ("class-wise", "sample-wise")
CONSTRAINTS = ("unbounded", "linf", "l2")
CLASSWISE_VARIANTS = ("random-noise", "regions", "one-pixel")
L2_TOL = 1e-6


@dataclass(frozen=True)
class Constraint:
    kind: str = "linf"
    eps: float = 8 / 255

    def __post_init__(self):
        if self.kind not in CONSTRAINTS:
            raise ConfigError(f"constraint must be one of {CONSTRAINTS}")
        if self.kind != "unbounded" and not self.eps >= 0:
            raise ConfigError("constraint radius must be non-negative")

    def norms(self, deltas):
        flat = deltas.reshape(len(deltas), -1).astype(np.float64)
        if self.kind == "l2":
            return np.sqrt((flat**2).sum(axis=1))
        return np.abs(flat).max(axis=1, initial=0.0)

    def satisfied(self, deltas):
        if self.kind == "unbounded":
            return True
        if self.kind == "linf":
            # Deltas are stored in float32; compare against the float32 radius.
            return bool(np.all(np.abs(deltas) <= np.float32(self.eps)))
        return bool(np.all(self.norms(deltas) <= self.eps + L2_TOL))

    def __str__(self):
        return "unbounded" if self.kind == "unbounded" else f"{self.kind}({self.eps:.6g})"


@dataclass
class PerturbationSet:
    """K class deltas or N sample deltas, each C x H x W, under a norm constraint."""

    mode: str
    deltas: np.ndarray
    constraint: Constraint
    seed: int = 0
    provenance: str = ""

    def __post_init__(self):
        self.deltas = np.ascontiguousarray(self.deltas, dtype=np.float32)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.deltas.ndim != 4:
            raise ConfigError(f"deltas must be M x C x H x W, got {self.deltas.shape}")
        if not self.constraint.satisfied(self.deltas):
            raise ConfigError(f"deltas violate declared constraint {self.constraint}")

    def __len__(self):
        return len(self.deltas)

    @property
    def shape(self):
        return self.deltas.shape[1:]

    def has_duplicates(self):
        flat = self.deltas.reshape(len(self), -1)
        return len(np.unique(flat, axis=0)) < len(flat)


def _signs(rng, shape):
    """Fair Bernoulli draws mapped {0, 1} -> {-1, +1}."""
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2 - 1


def _classwise_once(variant, k, shape, eps, patches, rng):
    c, h, w = shape
    if variant == "random-noise":
        return _signs(rng, (k, c, h, w)) * eps
    if variant == "regions":
        side = int(round(np.sqrt(patches)))
        if side * side != patches or h % side or w % side:
            raise ConfigError(f"regions needs a square patch count dividing {h}x{w}, got {patches}")
        grid = _signs(rng, (k, c, side, side)) * eps
        return np.repeat(np.repeat(grid, h // side, axis=2), w // side, axis=3)
    if variant == "one-pixel":
        if k > h * w:
            raise ConfigError(f"one-pixel needs k <= H*W, got k={k} for {h}x{w}")
        loc = rng.choice(h * w, size=k, replace=False)
        deltas = np.zeros((k, c, h, w))
        # +-1 with clipping drives the chosen pixel to exactly 1 or 0 per channel.
        deltas[np.arange(k), :, loc // w, loc % w] = _signs(rng, (k, c))
        return deltas
    raise ConfigError(f"unknown class-wise variant {variant!r}; expected one of {CLASSWISE_VARIANTS}")


def gen_classwise(variant, k, shape, eps=8 / 255, patches=4, seed=0):
    """Class-wise deltas: ``random-noise``, ``regions`` (``patches`` constant-colour
    tiles on a square grid) or ``one-pixel`` (unbounded)."""
    if k < 2:
        raise ConfigError("need at least two classes")
    constraint = Constraint("unbounded", 0.0) if variant == "one-pixel" else Constraint("linf", eps)
    attempt = seed
    while True:
        rng = np.random.default_rng(attempt)
        deltas = _classwise_once(variant, k, tuple(shape), eps, patches, rng)
        name = f"regions-{patches}" if variant == "regions" else variant
        perts = PerturbationSet("class-wise", deltas, constraint, seed=attempt,
                                provenance=f"class-wise {name} eps={eps:.6g} seed={attempt}")
        if not perts.has_duplicates():
            return perts
        attempt += 1


def gen_samplewise_random(n, shape, constraint=Constraint(), seed=0):
    """Label-independent per-sample noise: +-eps signs (linf) or Gaussian scaled to norm eps (l2)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    full = (n,) + tuple(shape)
    if constraint.kind == "linf":
        deltas = _signs(rng, full) * constraint.eps
    elif constraint.kind == "l2":
        g = rng.standard_normal(full)
        norms = np.sqrt((g.reshape(n, -1) ** 2).sum(axis=1))
        deltas = g / norms.reshape(-1, 1, 1, 1) * constraint.eps
    else:
        raise ConfigError("sample-wise random noise needs a linf or l2 constraint")
    return PerturbationSet("sample-wise", deltas, constraint, seed=seed,
                           provenance=f"sample-wise random {constraint} seed={seed}")


def gen_adversarial_poison(surrogate, dataset, eps=8 / 255, steps=30, step_size=None, seed=0, batch=500):
    """Targeted PGD toward label ``(y + 1) mod K`` against a trained surrogate.

    Per sample: ``delta <- clip_eps(delta - step_size * sign(grad_delta L(f(x + delta), t)))``
    with ``x + delta`` kept inside [0, 1]. Deltas start at zero. Samples are
    independent, so they are processed in batches.
    """
    if tuple(dataset.shape) != tuple(getattr(surrogate, "input_shape", dataset.shape)):
        raise ConfigError(f"surrogate expects {surrogate.input_shape}, dataset has {dataset.shape}")
    if step_size is None:
        step_size = eps / 10
    e32 = np.float32(eps)
    a32 = np.float32(step_size)
    deltas = np.zeros_like(dataset.images)
    for lo in range(0, len(dataset), batch):
        x = dataset.images[lo:lo + batch]
        t = (dataset.labels[lo:lo + batch] + 1) % dataset.num_classes
        d = np.zeros_like(x)
        for _ in range(steps):
            _, g = surrogate.input_gradient(x + d, t)
            d = np.clip(d - a32 * np.sign(g).astype(np.float32), -e32, e32)
            d = np.clip(np.clip(x + d, 0, 1) - x, -e32, e32)
        deltas[lo:lo + batch] = d
    return PerturbationSet("sample-wise", deltas, Constraint("linf", eps), seed=seed,
                           provenance=f"adversarial-poison targeted-pgd eps={eps:.6g} steps={steps} "
                                      f"step_size={step_size:.6g}")


def apply_poison(dataset, perts):
    """Add deltas (by label for class-wise sets) and clip to [0, 1]. Labels are untouched."""
    if tuple(perts.shape) != tuple(dataset.shape):
        raise ConfigError(f"perturbation shape {perts.shape} != image shape {dataset.shape}")
    if perts.mode == "class-wise":
        if len(perts) != dataset.num_classes:
            raise ConfigError(f"{len(perts)} class deltas for a {dataset.num_classes}-class dataset")
        added = dataset.images + perts.deltas[dataset.labels]
    else:
        if len(perts) != len(dataset):
            raise ConfigError(f"{len(perts)} sample deltas for {len(dataset)} samples")
        added = dataset.images + perts.deltas
    return replace(dataset, images=np.clip(added, 0, 1), labels=dataset.labels.copy(),
                   provenance=f"{dataset.provenance} | poison: {perts.provenance}")


def recover_perturbations(poisoned, clean, constraint=Constraint("unbounded", 0.0)):
    """Sample-wise deltas ``poisoned - clean`` for aligned datasets."""
    if poisoned.images.shape != clean.images.shape:
        raise ConfigError(f"shape mismatch {poisoned.images.shape} vs {clean.images.shape}")
    if not np.array_equal(poisoned.labels, clean.labels):
        raise ConfigError("poisoned and clean datasets are not aligned (labels differ)")
    return PerturbationSet("sample-wise", poisoned.images - clean.images, constraint,
                           provenance="recovered from poisoned - clean")


# --- UNLN-PERT files ----------------------------------------------------------

PERT_MAGIC = b"UNLN-PERT"
PERT_VERSION = 1
_PHEADER = struct.Struct("<HBI3IBdQI")  # version, mode, count, C, H, W, constraint, eps, seed, provenance length


def perturbations_bytes(perts):
    c, h, w = perts.shape
    prov = perts.provenance.encode()
    head = PERT_MAGIC + _PHEADER.pack(
        PERT_VERSION, MODES.index(perts.mode), len(perts), c, h, w,
        CONSTRAINTS.index(perts.constraint.kind), float(perts.constraint.eps),
        perts.seed & (2**64 - 1), len(prov),
    )
    return head + prov + perts.deltas.astype("<f4").tobytes()


def perturbations_from_bytes(data):
    if data[:len(PERT_MAGIC)] != PERT_MAGIC:
        raise FormatError("bad perturbation magic", offset=0)
    pos = len(PERT_MAGIC)
    if len(data) < pos + _PHEADER.size:
        raise FormatError("truncated perturbation header", offset=len(data))
    version, mode, count, c, h, w, kind, eps, seed, plen = _PHEADER.unpack_from(data, pos)
    if version != PERT_VERSION:
        raise FormatError(f"unsupported perturbation version {version}", offset=pos)
    if mode >= len(MODES) or kind >= len(CONSTRAINTS):
        raise FormatError("bad mode or constraint tag", offset=pos + 2)
    pos += _PHEADER.size
    expected = pos + plen + count * c * h * w * 4
    if len(data) != expected:
        raise FormatError(f"file holds {len(data)} bytes, header implies {expected}",
                          offset=min(len(data), expected))
    prov = data[pos:pos + plen].decode()
    deltas = np.frombuffer(data, dtype="<f4", count=count * c * h * w, offset=pos + plen)
    try:
        return PerturbationSet(MODES[mode], deltas.reshape(count, c, h, w).astype(np.float32),
                               Constraint(CONSTRAINTS[kind], eps), seed=seed, provenance=prov)
    except ConfigError as exc:
        raise FormatError(f"invalid perturbation contents: {exc}", offset=pos + plen) from exc


def save_perturbations(perts, path):
    with open(path, "wb") as fh:
        fh.write(perturbations_bytes(perts))


def load_perturbations(path):
    with open(path, "rb") as fh:
        return perturbations_from_bytes(fh.read())
