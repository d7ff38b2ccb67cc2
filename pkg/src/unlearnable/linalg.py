"""Dense float64 matrix helpers: product, Householder thin QR, orthogonal projection.

Matrices are plain 2-D numpy arrays. Everything here works in float64 regardless
of the input dtype; image tensors are float32 elsewhere in the package.
"""

import warnings

import numpy as np

from .errors import ShapeError

RANK_TOL = 1e-12


class RankDeficiencyWarning(UserWarning):
    pass


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def max_abs(a):
    """Entry-wise infinity norm; 0 for empty arrays."""
    a = np.asarray(a)
    return float(np.abs(a).max()) if a.size else 0.0


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def qr_thin(w):
    """Thin QR of a tall d x K matrix via Householder reflections.

    Returns ``(q, r)`` with ``q`` d x K orthonormal and ``r`` K x K upper
    triangular with a non-negative diagonal. A column whose diagonal entry in
    ``r`` is negligible relative to ``max|w|`` triggers a
    :class:`RankDeficiencyWarning`; the corresponding ``q`` column is kept (it
    is still a unit vector orthogonal to the others).
    """
    w = as_matrix(w, "w")
    d, k = w.shape
    if d < k:
        raise ShapeError(f"qr_thin needs rows >= cols, got {w.shape}")

    scale = max_abs(w)
    # Factor w / max|w|; R is rescaled back at the end.
    r = w / scale if scale > 0 else w.copy()
    reflectors = []
    for j in range(k):
        x = r[j:, j]
        peak = np.abs(x).max()
        if peak == 0.0:
            reflectors.append(None)
            continue
        # The reflector depends only on the direction of x; working with
        # x / max|x| keeps every entry in normal floating-point range.
        v = x / peak
        # Sign choice avoids cancellation in v[0].
        v[0] += np.copysign(np.sqrt(v @ v), v[0]) if v[0] != 0 else np.sqrt(v @ v)
        v /= np.sqrt(v @ v)
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        r[j + 1:, j] = 0.0
        reflectors.append(v)

    q = np.eye(d, k)
    for j in range(k - 1, -1, -1):
        v = reflectors[j]
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])

    r = np.triu(r[:k, :])
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    r *= signs[:, None]
    q *= signs[None, :]

    weak = [i for i in range(k) if abs(r[i, i]) <= RANK_TOL]
    if scale > 0:
        r *= scale
    if weak:
        warnings.warn(
            f"rank-deficient input: negligible R diagonal at columns {weak}",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    return q, r


def column_basis(w):
    """Orthonormal basis of span(w): thin-QR columns whose R diagonal is not negligible.

    For full-rank ``w`` this is ``q`` itself. Columns flagged as rank-deficient by
    :func:`qr_thin` are dropped, so projecting with the result removes exactly
    the column space of ``w``.
    """
    w = as_matrix(w, "w")
    q, r = qr_thin(w)
    keep = np.abs(np.diag(r)) > RANK_TOL * max_abs(w)
    return q[:, keep]


def project_out(q, x):
    """Remove the span of q's columns from every row of x: ``x - (x q) q^T``."""
    q = as_matrix(q, "q")
    x = as_matrix(x, "x")
    if x.shape[1] != q.shape[0]:
        raise ShapeError(f"rows of x have length {x.shape[1]}, q has {q.shape[0]} rows")
    if q.shape[1] == 0:
        return x.copy()
    return x - (x @ q) @ q.T
