"""Linear and small convolutional classifiers with hand-written backprop.

Both model classes expose the same surface used by the training loop:
``params`` (dict of arrays), ``forward``, ``loss_and_grads`` and
``input_gradient``. Images enter as N x C x H x W arrays.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, NumericalError, ShapeError
from .optim import LbfgsConfig, lbfgs_minimize, sgd_step

EVAL_BATCH = 500


def softmax_cross_entropy(logits, label):
    """Loss and logit gradient for a single sample."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    logsum = np.log(np.exp(z).sum())
    p = np.exp(z - logsum)
    grad = p.copy()
    grad[label] -= 1.0
    return float(logsum - z[label]), grad


def cross_entropy(logits, labels):
    """Mean loss over a batch and the gradient of that mean w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class LinearClassifier:
    """Multinomial logistic regression on flattened inputs: logits = x W + b."""

    kind = "linear"

    def __init__(self, input_dim, num_classes, dtype=np.float32, weights=None, bias=None):
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        w = np.zeros((self.input_dim, self.num_classes)) if weights is None else weights
        b = np.zeros(self.num_classes) if bias is None else bias
        self.params = {
            "weights": np.array(w, dtype=self.dtype),
            "bias": np.array(b, dtype=self.dtype),
        }
        self.buffers = {}
        if self.params["weights"].shape != (self.input_dim, self.num_classes):
            raise ShapeError(f"weights must be {(self.input_dim, self.num_classes)}")
        if self.params["bias"].shape != (self.num_classes,):
            raise ShapeError(f"bias must have length {self.num_classes}")

    @property
    def weights(self):
        return self.params["weights"]

    @property
    def bias(self):
        return self.params["bias"]

    def arch(self):
        return f"linear d={self.input_dim} k={self.num_classes} dtype={self.dtype.name}"

    def _flat(self, x):
        x = np.asarray(x, dtype=self.dtype).reshape(len(x), -1)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs of dimension {self.input_dim}, got {x.shape[1]}")
        return x

    def forward(self, x):
        return self._flat(x) @ self.params["weights"] + self.params["bias"]

    def loss_and_grads(self, x, y, return_logits=False):
        xf = self._flat(x)
        logits = xf @ self.params["weights"] + self.params["bias"]
        loss, dz = cross_entropy(logits, y)
        dz = dz.astype(self.dtype)
        grads = {"weights": xf.T @ dz, "bias": dz.sum(axis=0)}
        return (loss, grads, logits) if return_logits else (loss, grads)

    def input_gradient(self, x, y):
        shape = np.shape(x)
        loss, dz = cross_entropy(self.forward(x), y)
        return loss, (dz.astype(self.dtype) @ self.params["weights"].T).reshape(shape)


# --- convnet building blocks (NHWC internally) -------------------------------


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * wd, c * 9)
    wm = w.reshape(w.shape[0], -1)
    out = (cols @ wm.T + b).reshape(n, h, wd, w.shape[0])
    return out, cols


def _conv_backward(dout, cols, w, in_shape):
    n, h, wd, c = in_shape
    out_c = w.shape[0]
    d2 = dout.reshape(-1, out_c)
    wm = w.reshape(out_c, -1)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ wm).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    # argmax returns the first maximal element in (row, col) scan order.
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, in_shape):
    n, h, w, c = in_shape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(in_shape)


class ConvNet:
    """conv3x3(C->16) ReLU pool2 conv3x3(16->32) ReLU pool2 flatten, then an affine head."""

    kind = "convnet"
    widths = (16, 32)

    def __init__(self, input_shape=(3, 16, 16), num_classes=10, seed=0, dtype=np.float32):
        c, h, w = (int(v) for v in input_shape)
        if h % 4 or w % 4:
            raise ConfigError(f"convnet input height/width must be multiples of 4, got {h}x{w}")
        self.input_shape = (c, h, w)
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        self.feature_dim = self.widths[1] * (h // 4) * (w // 4)
        rng = np.random.default_rng(seed)
        c1, c2 = self.widths
        fan1, fan2, fan3 = c * 9, c1 * 9, self.feature_dim
        self.params = {
            "conv1.weight": _uniform(rng, 1 / np.sqrt(fan1), (c1, c, 3, 3), self.dtype),
            "conv1.bias": _uniform(rng, 1 / np.sqrt(fan1), (c1,), self.dtype),
            "conv2.weight": _uniform(rng, 1 / np.sqrt(fan2), (c2, c1, 3, 3), self.dtype),
            "conv2.bias": _uniform(rng, 1 / np.sqrt(fan2), (c2,), self.dtype),
            "head.weight": _uniform(rng, 1 / np.sqrt(fan3), (fan3, self.num_classes), self.dtype),
            "head.bias": _uniform(rng, 1 / np.sqrt(fan3), (self.num_classes,), self.dtype),
        }
        # Per-channel input standardization, not trained; see fit_input_stats.
        self.buffers = {
            "input.mean": np.full(c, 0.5, dtype=self.dtype),
            "input.std": np.full(c, 0.25, dtype=self.dtype),
        }

    def fit_input_stats(self, images):
        """Standardize inputs with the per-channel mean and std of ``images``."""
        x = np.asarray(images, dtype=np.float64)
        self.buffers["input.mean"] = x.mean(axis=(0, 2, 3)).astype(self.dtype)
        self.buffers["input.std"] = np.maximum(x.std(axis=(0, 2, 3)), 1e-6).astype(self.dtype)

    def arch(self):
        c, h, w = self.input_shape
        return f"convnet c={c} h={h} w={w} k={self.num_classes} dtype={self.dtype.name}"

    def _check(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected batch of shape (N, {self.input_shape}), got {x.shape}")
        return x

    def _features(self, x):
        p = self.params
        a0 = self._check(x).transpose(0, 2, 3, 1)
        a0 = (a0 - self.buffers["input.mean"]) / self.buffers["input.std"]
        z1, cols1 = _conv_forward(a0, p["conv1.weight"], p["conv1.bias"])
        r1 = np.maximum(z1, 0)
        m1, idx1 = _pool_forward(r1)
        z2, cols2 = _conv_forward(m1, p["conv2.weight"], p["conv2.bias"])
        r2 = np.maximum(z2, 0)
        m2, idx2 = _pool_forward(r2)
        feats = m2.transpose(0, 3, 1, 2).reshape(len(m2), -1)
        cache = (a0.shape, z1, cols1, idx1, m1.shape, z2, cols2, idx2, m2.shape)
        return feats, cache

    def features(self, x):
        """Penultimate activations, flattened in C, H, W order."""
        return self._features(x)[0]

    def head(self, feats):
        return feats @ self.params["head.weight"] + self.params["head.bias"]

    def forward(self, x):
        return self.head(self.features(x))

    def _backward(self, feats, cache, dz, want_input=False):
        p = self.params
        a0_shape, z1, cols1, idx1, m1_shape, z2, cols2, idx2, m2_shape = cache
        grads = {"head.weight": feats.T @ dz, "head.bias": dz.sum(axis=0)}
        dfeat = dz @ p["head.weight"].T
        n, h2, w2, c2 = m2_shape
        dm2 = dfeat.reshape(n, c2, h2, w2).transpose(0, 2, 3, 1)
        dz2 = _pool_backward(dm2, idx2, z2.shape) * (z2 > 0)
        dm1, grads["conv2.weight"], grads["conv2.bias"] = _conv_backward(dz2, cols2, p["conv2.weight"], m1_shape)
        dz1 = _pool_backward(dm1, idx1, z1.shape) * (z1 > 0)
        if not want_input:
            grads["conv1.weight"] = (dz1.reshape(-1, dz1.shape[-1]).T @ cols1).reshape(p["conv1.weight"].shape)
            grads["conv1.bias"] = dz1.reshape(-1, dz1.shape[-1]).sum(axis=0)
            return grads
        dx, _, _ = _conv_backward(dz1, cols1, p["conv1.weight"], a0_shape)
        return (dx / self.buffers["input.std"]).transpose(0, 3, 1, 2)

    def loss_and_grads(self, x, y, return_logits=False):
        feats, cache = self._features(x)
        logits = self.head(feats)
        loss, dz = cross_entropy(logits, y)
        grads = self._backward(feats, cache, dz.astype(self.dtype))
        return (loss, grads, logits) if return_logits else (loss, grads)

    def input_gradient(self, x, y):
        """Mean loss and its gradient with respect to the input batch."""
        feats, cache = self._features(x)
        loss, dz = cross_entropy(self.head(feats), y)
        return loss, self._backward(feats, cache, dz.astype(self.dtype), want_input=True)


def clone_model(model):
    other = object.__new__(type(model))
    other.__dict__.update(model.__dict__)
    other.params = {k: v.copy() for k, v in model.params.items()}
    other.buffers = {k: v.copy() for k, v in model.buffers.items()}
    return other


def fit_logistic_lbfgs(x, y, num_classes, config=LbfgsConfig(), l2=0.0):
    """Multinomial logistic regression (with bias) fit by L-BFGS in float64.

    Minimizes mean cross-entropy plus ``l2/2 * ||W||^2`` (bias unpenalized).
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y)
    n, d = x.shape
    k = int(num_classes)

    def objective(theta):
        w = theta[:d * k].reshape(d, k)
        b = theta[d * k:]
        loss, dz = cross_entropy(x @ w + b, y)
        gw = x.T @ dz
        if l2:
            loss += 0.5 * l2 * float(np.sum(w * w))
            gw += l2 * w
        return loss, np.concatenate([gw.ravel(), dz.sum(axis=0)])

    theta = lbfgs_minimize(objective, np.zeros(d * k + k), config)
    return LinearClassifier(d, k, dtype=np.float64, weights=theta[:d * k].reshape(d, k), bias=theta[d * k:])


# --- training and evaluation --------------------------------------------------


@dataclass
class MetricRecord:
    epoch: int
    train_acc: float
    train_loss: float
    test_acc: float = None
    test_loss: float = None
    lr: float = None


@dataclass
class CheckpointSeries:
    arch: str
    entries: list = field(default_factory=list)  # [(epoch, {name: array})]

    def append(self, epoch, model):
        if self.entries and epoch <= self.entries[-1][0]:
            raise ValueError("checkpoint epochs must be strictly increasing")
        if not self.entries and epoch != 0:
            raise ValueError("checkpoint series must start at epoch 0")
        self.entries.append((epoch, {k: v.copy() for k, v in model_state(model).items()}))

    def epochs(self):
        return [e for e, _ in self.entries]

    def model_at(self, index, template):
        model = clone_model(template)
        for k, v in self.entries[index][1].items():
            (model.buffers if k in model.buffers else model.params)[k] = v.copy()
        return model

    def __len__(self):
        return len(self.entries)


def predict_logits(model, images, batch=EVAL_BATCH):
    out = [model.forward(images[i:i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model, dataset):
    """Accuracy (argmax, lowest index wins ties) and mean cross-entropy."""
    if len(dataset.labels) == 0:
        return float("nan"), float("nan")
    logits = predict_logits(model, dataset.images).astype(np.float64)
    loss, _ = cross_entropy(logits, dataset.labels)
    acc = float(np.mean(logits.argmax(axis=1) == dataset.labels))
    return acc, loss


def train_classifier(model, dataset, config, save_checkpoints=False, test=None, batch_transform=None,
                     fit_stats=True):
    """Mini-batch momentum SGD on cross-entropy.

    ``batch_transform(model, xb, yb, rng)`` may replace each batch before the
    gradient step (adversarial training uses it). It gets its own random
    stream, so a transform that returns the batch untouched leaves the run
    bit-identical to plain training. Returns the trained model
    (mutated in place), a :class:`CheckpointSeries` (empty unless requested) and
    a list of per-epoch :class:`MetricRecord`. Models with input statistics
    fit them to the training images first unless ``fit_stats`` is false.
    """
    if len(dataset.labels) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if dataset.labels.max() >= model.num_classes:
        raise ConfigError("dataset labels exceed model class count")
    if fit_stats and hasattr(model, "fit_input_stats"):
        model.fit_input_stats(dataset.images)
    rng = np.random.default_rng(config.seed)
    transform_rng = np.random.default_rng([config.seed, 1])
    n = len(dataset.labels)
    series = CheckpointSeries(model.arch())
    history = []
    state = {}
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = dataset.images[idx], dataset.labels[idx]
            if batch_transform is not None:
                xb = batch_transform(model, xb, yb, transform_rng)
            loss, grads, logits = model.loss_and_grads(xb, yb, return_logits=True)
            if not np.isfinite(loss):
                err = NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                err.checkpoints = series
                raise err
            sgd_step(model.params, grads, state, config, epoch, batch_index=b)
            loss_sum += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == yb))
        rec = MetricRecord(epoch, correct / n, loss_sum / n, lr=config.lr_at(epoch))
        if test is not None:
            rec.test_acc, rec.test_loss = evaluate(model, test)
        history.append(rec)
        if save_checkpoints:
            series.append(epoch, model)
    return model, series, history


# --- checkpoint files ---------------------------------------------------------

CKPT_MAGIC = b"UNLN-CKPT"
CKPT_VERSION = 1


def parse_arch(arch):
    parts = arch.split()
    kv = dict(p.split("=", 1) for p in parts[1:])
    return parts[0], kv


def model_from_arch(arch):
    kind, kv = parse_arch(arch)
    dtype = np.dtype(kv.get("dtype", "float32"))
    if kind == "convnet":
        return ConvNet((int(kv["c"]), int(kv["h"]), int(kv["w"])), int(kv["k"]), dtype=dtype)
    if kind == "linear":
        return LinearClassifier(int(kv["d"]), int(kv["k"]), dtype=dtype)
    raise FormatError(f"unknown architecture {arch!r}")


def model_state(model):
    """Trained parameters followed by non-trained buffers, by name."""
    return {**model.params, **model.buffers}


def checkpoint_bytes(model):
    state = model_state(model)
    buf = io.BytesIO()
    arch = model.arch().encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(arch)))
    buf.write(arch)
    names = list(state)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = state[name]
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        buf.write(state[name].astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data, what):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what} file", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data):
    rd = _Reader(data, "checkpoint")
    if rd.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, arch_len = rd.unpack("<HI")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(CKPT_MAGIC))
    arch = rd.take(arch_len).decode()
    model = model_from_arch(arch)
    (count,) = rd.unpack("<I")
    table = []
    for _ in range(count):
        (nlen,) = rd.unpack("<I")
        name = rd.take(nlen).decode()
        (ndim,) = rd.unpack("<I")
        shape = rd.unpack(f"<{ndim}I")
        table.append((name, shape))
    state = model_state(model)
    if sorted(name for name, _ in table) != sorted(state):
        raise FormatError(f"tensor names do not match architecture {arch!r}", offset=rd.pos)
    for name, shape in table:
        if state[name].shape != tuple(shape):
            raise FormatError(f"tensor {name!r} {shape} does not match architecture {arch!r}", offset=rd.pos)
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(rd.take(size), dtype="<f8").reshape(shape).astype(model.dtype)
        (model.buffers if name in model.buffers else model.params)[name] = arr
    if rd.pos != len(data):
        raise FormatError("trailing bytes after checkpoint blob", offset=rd.pos)
    return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
