"""Learning from unlearnable data: orthogonal projection, adversarial training,
and class-average subtraction."""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .linalg import column_basis, project_out
from .models import ConvNet, LinearClassifier, evaluate, train_classifier
from .optim import SgdConfig
from .probes import class_average_images

# Linear model of the projection attack: plain SGD, step decay at half and three quarters.
LINEAR_SGD = SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0, schedule="step",
                       milestones=(0.5, 0.75), epochs=20)
VICTIM_SGD = SgdConfig()
ADV_SGD = SgdConfig(schedule="step", milestones=(0.625, 0.75, 0.833), epochs=40)


@dataclass(frozen=True)
class PgdConfig:
    eps: float = 8 / 255
    steps: int = 3
    step_size: float = None

    def __post_init__(self):
        if self.eps < 0 or self.steps < 1:
            raise ConfigError("PGD needs eps >= 0 and steps >= 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2 * self.eps / self.steps)


@dataclass
class AttackResult:
    name: str
    model: object
    history: list
    recovered: object = None
    extras: dict = field(default_factory=dict)

    @property
    def test_acc(self):
        return self.history[-1].test_acc


def _victim(dataset, seed):
    return ConvNet(dataset.shape, dataset.num_classes, seed=seed)


def orthogonal_projection(poisoned, lin_cfg=LINEAR_SGD):
    """Fit a linear model on poisoned pixels and project its weight span out of every image.

    The linear model is trained in float64 from zero weights. Softmax regression
    then keeps the K weight columns summing to zero, so W has rank K - 1 and
    the QR step warns; the projection removes exactly the column space of W.

    Returns the projected dataset (float32, not clipped, flagged ``unclipped``),
    the linear model and the orthonormal basis that was projected out.
    """
    lin = LinearClassifier(poisoned.dim, poisoned.num_classes, dtype=np.float64)
    train_classifier(lin, poisoned, lin_cfg)
    basis = column_basis(lin.weights)
    flat = project_out(basis, poisoned.flat().astype(np.float64))
    recovered = replace(poisoned, images=flat.reshape(poisoned.images.shape).astype(np.float32),
                        labels=poisoned.labels.copy(), unclipped=True,
                        provenance=f"{poisoned.provenance} | orthogonal projection k={basis.shape[1]}")
    return recovered, lin, basis


def orthogonal_projection_attack(poisoned, test, lin_cfg=LINEAR_SGD, victim_cfg=VICTIM_SGD, seed=0):
    """Project out the linear model's weight span, then train a victim on the result."""
    recovered, lin, q = orthogonal_projection(poisoned, lin_cfg)
    lin_acc, _ = evaluate(lin, poisoned)
    model = _victim(poisoned, seed)
    _, _, history = train_classifier(model, recovered, victim_cfg, test=test)
    return AttackResult("ortho-proj", model, history, recovered,
                        {"linear": lin, "basis": q, "linear_train_acc": lin_acc})


def pgd_untargeted(model, x, y, pgd, rng):
    """Loss-maximizing PGD in the l-inf ball with a uniform random start; stays in [0, 1]."""
    eps = np.float32(pgd.eps)
    alpha = np.float32(pgd.step_size)
    delta = rng.uniform(-pgd.eps, pgd.eps, size=x.shape).astype(np.float32)
    for _ in range(pgd.steps):
        _, g = model.input_gradient(np.clip(x + delta, 0, 1), y)
        delta = np.clip(delta + alpha * np.sign(g).astype(np.float32), -eps, eps)
    return np.clip(x + delta, 0, 1).astype(np.float32)


def adversarial_training(poisoned, test, pgd=PgdConfig(), cfg=ADV_SGD, seed=0):
    """Train a victim on PGD adversarial examples of each batch."""
    model = _victim(poisoned, seed)

    def transform(m, xb, yb, rng):
        return pgd_untargeted(m, xb, yb, pgd, rng)

    _, _, history = train_classifier(model, poisoned, cfg, test=test, batch_transform=transform)
    return AttackResult("adv-train", model, history)


def subtract_class_average(dataset):
    """Each training image minus its class mean (labels are needed, so train-time only)."""
    means = class_average_images(dataset)
    images = dataset.images.astype(np.float64) - means[dataset.labels]
    return replace(dataset, images=images.astype(np.float32), labels=dataset.labels.copy(), unclipped=True,
                   provenance=f"{dataset.provenance} | class-average subtracted")


def class_average_subtraction(poisoned, test, cfg=VICTIM_SGD, seed=0):
    """Train on class-mean-subtracted images; the test set is left as is."""
    adjusted = subtract_class_average(poisoned)
    model = _victim(poisoned, seed)
    _, _, history = train_classifier(model, adjusted, cfg, test=test)
    return AttackResult("class-avg-sub", model, history, adjusted)


def standard_training(dataset, test, cfg=VICTIM_SGD, seed=0, save_checkpoints=False):
    model = _victim(dataset, seed)
    _, series, history = train_classifier(model, dataset, cfg, save_checkpoints=save_checkpoints, test=test)
    return AttackResult("none", model, history, extras={"checkpoints": series})


METRIC_FIELDS = ("attack", "poison", "epoch", "train_acc", "test_acc", "train_loss", "test_loss")


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_metrics_csv(rows, path):
    """``rows`` is an iterable of ``(attack, poison, MetricRecord)``."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(METRIC_FIELDS)
        for attack, poison, r in rows:
            out.writerow([attack, poison, r.epoch, _fmt(r.train_acc), _fmt(r.test_acc),
                          _fmt(r.train_loss), _fmt(r.test_loss)])
