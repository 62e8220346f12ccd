"""Token-routed low-rank adaptation of a frozen linear projection.

A projection ``y = W x`` is augmented with ``S`` rank-``r`` update pairs
``(A_s, B_s)`` and a linear router.  Per token, the router picks the top-K
subspaces, softmax-normalises their scores (restricted to the selected
logits), and applies the weighted low-rank updates:

    y = W x + (alpha / r) * sum_{s in topK} w_s(x) * B_s (A_s x)

``B_s`` is zero-initialised, so an untrained adapter is an exact identity.
The hard selected set is treated as a constant in backward; gradients reach
the router only through the softmax weights of the active set.  Dropout, when
enabled, applies to the adapter input only (the router and the frozen path
see the clean ``x``).
"""

from __future__ import annotations

import numpy as np

from .numerics import softmax_bwd, softmax_fwd, topk_indices, topk_rows

INIT_STD = 0.02


class RoutedLora:
    """Adapter state for one projection: routing plus S low-rank updates.

    Arrays (``d_in`` -> ``d_out`` projection):
      a         (S, r, d_in)   down-projections, N(0, 0.02) init
      b         (S, d_out, r)  up-projections, zero init
      router_w  (S, d_in)
      router_b  (S,)
    """

    ARRAY_NAMES = ("a", "b", "router_w", "router_b")

    def __init__(
        self,
        d_in: int,
        d_out: int,
        subspaces: int,
        active: int,
        rank: int,
        alpha: float,
        dropout: float,
        rng: np.random.Generator,
    ) -> None:
        if not 1 <= active <= subspaces:
            raise ValueError(f"active={active} out of range for {subspaces} subspaces")
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.d_in = d_in
        self.d_out = d_out
        self.subspaces = subspaces
        self.active = active
        self.rank = rank
        self.alpha = float(alpha)
        self.scaling = float(alpha) / float(rank)
        self.dropout = float(dropout)
        self.a = rng.normal(0.0, INIT_STD, size=(subspaces, rank, d_in))
        self.b = np.zeros((subspaces, d_out, rank))
        self.router_w = rng.normal(0.0, INIT_STD, size=(subspaces, d_in))
        self.router_b = np.zeros(subspaces)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAY_NAMES}

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Router logits for a (N, d_in) batch -> (N, S)."""
        return x @ self.router_w.T + self.router_b

    def forward(
        self,
        x: np.ndarray,
        w_frozen: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, dict]:
        """x (N, d_in), w_frozen (d_out, d_in) -> y (N, d_out) plus cache."""
        n = x.shape[0]
        scores = self.scores(x)
        probs_full = softmax_fwd(scores)
        sel = topk_rows(scores, self.active)
        sel_scores = np.take_along_axis(scores, sel, axis=1)
        sel_weights = softmax_fwd(sel_scores)
        weights = np.zeros_like(scores)
        np.put_along_axis(weights, sel, sel_weights, axis=1)

        if train and self.dropout > 0.0:
            if rng is None:
                raise ValueError("dropout requires an rng in training mode")
            keep = (rng.random(x.shape) >= self.dropout) / (1.0 - self.dropout)
            x_drop = x * keep
        else:
            keep = None
            x_drop = x

        # zs[n, s] = A_s x_n, us[n, s] = B_s zs[n, s]
        zs = np.einsum("nd,srd->nsr", x_drop, self.a)
        us = np.einsum("nsr,sor->nso", zs, self.b)
        delta = self.scaling * np.einsum("ns,nso->no", weights, us)
        y = x @ w_frozen.T + delta
        cache = {
            "x": x,
            "x_drop": x_drop,
            "drop_keep": keep,
            "scores": scores,
            "probs_full": probs_full,
            "sel": sel,
            "sel_weights": sel_weights,
            "weights": weights,
            "zs": zs,
            "us": us,
            "w_frozen": w_frozen,
            "n": n,
        }
        return y, cache

    def backward(self, dy: np.ndarray, cache: dict, grads: dict, prefix: str) -> np.ndarray:
        """Accumulate adapter grads under ``prefix`` and return dL/dx.

        The frozen projection contributes dy @ W to dx but receives no
        parameter gradient.
        """
        x_drop = cache["x_drop"]
        weights, zs, us = cache["weights"], cache["zs"], cache["us"]
        sel, sel_weights = cache["sel"], cache["sel_weights"]

        dx = dy @ cache["w_frozen"]

        d_delta = self.scaling * dy
        d_weights = np.einsum("no,nso->ns", d_delta, us)
        dus = weights[:, :, None] * d_delta[:, None, :]
        _accum(grads, prefix + ".b", np.einsum("nso,nsr->sor", dus, zs))
        dzs = np.einsum("nso,sor->nsr", dus, self.b)
        _accum(grads, prefix + ".a", np.einsum("nsr,nd->srd", dzs, x_drop))
        dx_drop = np.einsum("nsr,srd->nd", dzs, self.a)
        if cache["drop_keep"] is not None:
            dx_drop = dx_drop * cache["drop_keep"]
        dx += dx_drop

        # Mixture weights are a softmax over the selected logits only; the
        # selected set itself is a constant of the backward pass.
        d_sel_weights = np.take_along_axis(d_weights, sel, axis=1)
        d_sel_scores = softmax_bwd(d_sel_weights, sel_weights)
        d_scores = np.zeros_like(cache["scores"])
        np.put_along_axis(d_scores, sel, d_sel_scores, axis=1)
        _accum(grads, prefix + ".router_w", d_scores.T @ cache["x"])
        _accum(grads, prefix + ".router_b", d_scores.sum(axis=0))
        dx += d_scores @ self.router_w
        return dx

    def selection_margin(self, x: np.ndarray) -> float:
        """Smallest gap between the K-th and (K+1)-th router score over rows.

        Infinite when K == S.  Used to filter finite-difference probe points
        away from selection ties.
        """
        if self.active == self.subspaces:
            return float("inf")
        scores = self.scores(np.atleast_2d(x))
        ordered = -np.sort(-scores, axis=1)
        return float(np.min(ordered[:, self.active - 1] - ordered[:, self.active]))


def _accum(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


# ---------------------------------------------------------------------------
# single-vector entry points used by tests and the gradient-check suite


def route_scores(x, lora: RoutedLora) -> np.ndarray:
    """Router logits for one token vector -> (S,)."""
    x = np.asarray(x, dtype=np.float64)
    return lora.scores(x[None, :])[0]


def sparse_topk_normalize(scores, k: int) -> np.ndarray:
    """Dense weight vector: softmax over the top-k logits, zeros elsewhere.

    Ties break toward the lower index; the result sums to one on the
    selected support.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError(f"sparse_topk_normalize expects a 1-d input, got {s.shape}")
    sel = topk_indices(s, k)
    out = np.zeros_like(s)
    out[sel] = softmax_fwd(s[sel])
    return out


def routed_projection(x, w_frozen, lora: RoutedLora) -> np.ndarray:
    """Adapted projection of one token vector (evaluation mode)."""
    x = np.asarray(x, dtype=np.float64)
    y, _ = lora.forward(x[None, :], np.asarray(w_frozen, dtype=np.float64))
    return y[0]
