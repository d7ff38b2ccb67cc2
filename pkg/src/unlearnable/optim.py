"""SGD with momentum and schedules, fixed-step L-BFGS, and finite-difference gradient checks."""

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

SCHEDULES = ("step", "cosine", "constant")
# A pair (s, y) is kept only if s.y exceeds this fraction of |s||y|; the test is
# scale-free so progress near the optimum (tiny s and y) still updates the model.
CURVATURE_TOL = 1e-10


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    milestones: tuple = ()
    decay_factor: float = 10.0
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.schedule == "step":
            ms = self.milestones
            if not ms or any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
                raise ConfigError("milestones must be strictly increasing fractions in (0, 1)")
            if self.decay_factor <= 0:
                raise ConfigError("decay_factor must be positive")
            epochs = self.milestone_epochs()
            if len(set(epochs)) != len(epochs) or min(epochs) < 1 or max(epochs) >= self.epochs:
                raise ConfigError(f"milestones {ms} collapse to epochs {epochs} with {self.epochs} epochs")

    def milestone_epochs(self):
        return [int(round(m * self.epochs)) for m in self.milestones]

    def lr_at(self, epoch):
        if self.schedule == "constant":
            return self.learning_rate
        if self.schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        drops = sum(epoch >= m for m in self.milestone_epochs())
        return self.learning_rate / self.decay_factor**drops


@dataclass(frozen=True)
class LbfgsConfig:
    steps: int = 500
    learning_rate: float = 0.5
    memory: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.memory < 1:
            raise ConfigError("L-BFGS steps and memory must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("L-BFGS learning_rate must be positive")


def sgd_step(params, grads, state, config, epoch, batch_index=None):
    """One in-place momentum-SGD update over a dict of arrays.

    ``state`` maps parameter names to momentum buffers and is filled lazily.
    Buffer update is ``v = m*v + g + wd*p`` followed by ``p -= lr(epoch) * v``.
    """
    if epoch >= config.epochs:
        raise ConfigError(f"epoch {epoch} outside schedule of {config.epochs} epochs")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite gradient for {name!r} at epoch {epoch}, batch {batch_index}"
            )
    lr = config.lr_at(epoch)
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        step = g + config.weight_decay * p if config.weight_decay else g.copy()
        v = state.get(name)
        if v is None or config.momentum == 0:
            v = step
        else:
            v *= config.momentum
            v += step
        state[name] = v
        p -= np.asarray(lr, dtype=p.dtype) * v
    return params, state


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(objective, init, config=LbfgsConfig(), grad_tol=1e-10, max_halvings=20):
    """Minimize ``objective(x) -> (value, gradient)`` from ``init``.

    Each iteration moves ``learning_rate`` times the two-loop quasi-Newton
    direction; the very first step is additionally scaled by ``min(1, 1/|g|_1)``
    since there is no curvature history yet. Pairs failing the curvature
    condition (see ``CURVATURE_TOL``) are not stored. A non-finite objective halves the step
    for that iteration, at most ``max_halvings`` times.
    """
    x = np.array(init, dtype=np.float64).ravel()
    f, g = objective(x)
    g = np.asarray(g, dtype=np.float64).ravel()
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NumericalError("objective is not finite at the initial point")
    s_hist = deque(maxlen=config.memory)
    y_hist = deque(maxlen=config.memory)
    for it in range(config.steps):
        if np.abs(g).max(initial=0.0) <= grad_tol:
            break
        d = _two_loop(g, s_hist, y_hist)
        t = config.learning_rate
        if it == 0:
            t *= min(1.0, 1.0 / np.abs(g).sum())
        for _ in range(max_halvings + 1):
            x_new = x + t * d
            f_new, g_new = objective(x_new)
            g_new = np.asarray(g_new, dtype=np.float64).ravel()
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)):
                break
            t *= 0.5
        else:
            raise NumericalError(f"L-BFGS objective stayed non-finite at iteration {it}")
        s = x_new - x
        y = g_new - g
        if s @ y > CURVATURE_TOL * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
        x, f, g = x_new, f_new, g_new
    return x


def finite_difference_check(objective, params, h=1e-5, coords_per_tensor=50, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``objective(params) -> (value, grads)`` where ``params`` is a dict of arrays
    (a bare array is treated as ``{"x": array}``). Up to ``coords_per_tensor``
    coordinates are sampled per tensor; the error for each is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if isinstance(params, np.ndarray):
        arr = params

        def objective_dict(p, _f=objective):
            v, g = _f(p["x"])
            return v, {"x": g}

        params, objective = {"x": arr}, objective_dict
    rng = np.random.default_rng(seed)
    _, grads = objective(params)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        n = min(coords_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=n, replace=False)
        analytic = np.asarray(grads[name]).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus, _ = objective(params)
            flat[i] = orig - h
            f_minus, _ = objective(params)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(err))
    return worst
