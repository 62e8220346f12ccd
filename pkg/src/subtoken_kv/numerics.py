"""Dense tensor math with explicit forward/backward pairs.

There is no autograd graph here: every operation that the model needs comes
as a forward function plus a matching backward function, and layers chain
them by hand.  Verification runs in float64; float32 is accepted for speed
runs.  Every hard selection breaks ties toward the lower index so results
are reproducible across platforms.
"""

from __future__ import annotations

import os
from typing import Callable

import numpy as np

from .errors import GradCheckError

DEFAULT_DTYPE = np.float64
_ALLOWED_DTYPES = (np.float32, np.float64)

# Relative error floor used by the finite-difference oracle.
REL_ERR_FLOOR = 1e-12

# Extra finiteness checks on every gradient accumulation.  Cheap at toy
# scale but off by default to keep training loops lean.
DEBUG_CHECKS = os.environ.get("SUBTOKEN_KV_DEBUG", "") == "1"


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")


class Tensor:
    """Dense n-d float array with an optional gradient slot of equal shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        _require_finite(arr, "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match data shape {self.data.shape}")
        if DEBUG_CHECKS:
            _require_finite(g, "gradient")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __array__(self, dtype=None, copy=None) -> np.ndarray:
        # numpy interop: lets np.asarray / comparisons consume a Tensor
        if dtype is not None and dtype != self.data.dtype:
            return self.data.astype(dtype)
        return self.data if not copy else self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n) -> (m, n); inner dimensions must agree."""
    ad, bd = _as_array(a), _as_array(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    return Tensor(ad @ bd, dtype=ad.dtype)


def matmul_backward(dy: np.ndarray, a, b) -> tuple[np.ndarray, np.ndarray]:
    """dL/da = dy @ b.T, dL/db = a.T @ dy."""
    ad, bd = _as_array(a), _as_array(b)
    dy = np.asarray(dy)
    return dy @ bd.T, ad.T @ dy


# ---------------------------------------------------------------------------
# softmax over the last axis, numerically stabilised


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row-stabilised softmax over the last axis."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bwd(dy: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """dx = p * (dy - sum(p * dy)) along the last axis."""
    inner = np.sum(probs * dy, axis=-1, keepdims=True)
    return probs * (dy - inner)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax applied independently to each row of a 2-d tensor."""
    xd = _as_array(x)
    if xd.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-d input, got shape {xd.shape}")
    return Tensor(softmax_fwd(xd), dtype=xd.dtype)


def softmax_rows_backward(dy: np.ndarray, probs) -> np.ndarray:
    return softmax_bwd(np.asarray(dy), _as_array(probs))


# ---------------------------------------------------------------------------
# GELU, tanh approximation with analytic derivative

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def gelu(x: Tensor) -> Tensor:
    xd = _as_array(x)
    return Tensor(gelu_fwd(xd), dtype=xd.dtype)


# ---------------------------------------------------------------------------
# top-k selection, deterministic under ties (lower index wins)


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the k largest entries of a 1-d score vector, ascending.

    Ties break toward the lower index.
    """
    s = _as_array(scores)
    if s.ndim != 1:
        raise ValueError(f"topk_indices expects a 1-d input, got shape {s.shape}")
    if not 1 <= k <= s.shape[0]:
        raise ValueError(f"k={k} out of range for {s.shape[0]} scores")
    order = np.argsort(-s, kind="stable")[:k]
    return np.sort(order)


def topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Per-row top-k indices of a 2-d score matrix, each row ascending."""
    s = np.asarray(scores)
    if s.ndim != 2:
        raise ValueError(f"topk_rows expects a 2-d input, got shape {s.shape}")
    if not 1 <= k <= s.shape[1]:
        raise ValueError(f"k={k} out of range for {s.shape[1]} columns")
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


# ---------------------------------------------------------------------------
# contiguous group L2 norms


def group_l2_norms(v, n_groups: int) -> np.ndarray:
    """L2 norm of each of n_groups equal-width contiguous slices of v.

    Accepts a 1-d vector (returns shape (n_groups,)) or a 2-d row batch
    (returns shape (rows, n_groups)).
    """
    vd = _as_array(v)
    d = vd.shape[-1]
    if n_groups < 1 or d % n_groups != 0:
        raise ValueError(f"group count {n_groups} must divide vector width {d}")
    width = d // n_groups
    parts = vd.reshape(*vd.shape[:-1], n_groups, width)
    return np.sqrt(np.sum(parts * parts, axis=-1))


# ---------------------------------------------------------------------------
# finite-difference gradient oracle


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|ga - gf| / max(floor, |ga| + |gf|), elementwise."""
    ga = np.asarray(analytic, dtype=np.float64)
    gf = np.asarray(numeric, dtype=np.float64)
    return np.abs(ga - gf) / np.maximum(REL_ERR_FLOOR, np.abs(ga) + np.abs(gf))


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a parameter array to ``(loss, dloss/dtheta)``.  The analytic
    gradient is taken from one call at ``theta``; each coordinate is then
    perturbed by +/- eps for the central difference.  ``f`` must be smooth in
    the probed neighbourhood (callers filter out points near selection ties).
    """
    base = np.array(_as_array(theta), dtype=np.float64, copy=True)
    value, analytic = f(base)
    if not np.isfinite(value):
        raise GradCheckError(f"non-finite loss {value!r} at the expansion point")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != base.shape:
        raise GradCheckError(f"analytic gradient shape {analytic.shape} != parameter shape {base.shape}")

    flat = base.reshape(-1)
    grad_flat = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up, _ = f(base)
        flat[i] = keep - eps
        down, _ = f(base)
        flat[i] = keep
        if not (np.isfinite(up) and np.isfinite(down)):
            raise GradCheckError(f"non-finite loss while perturbing coordinate {i}")
        numeric = (up - down) / (2.0 * eps)
        err = abs(grad_flat[i] - numeric) / max(REL_ERR_FLOOR, abs(grad_flat[i]) + abs(numeric))
        if err > worst:
            worst = err
    return float(worst)
