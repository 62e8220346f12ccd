"""Value-group routing for the KV cache.

Each attention value vector is split into ``S`` contiguous equal-width
groups.  A per-layer linear router scores the groups from the token
representation and keeps the top-K; dropped groups are rebuilt by a small
two-layer GELU MLP that sees the zero-masked value plus a binary keep
indicator.  Keys are never compressed, so a value-group fraction ``rho``
combined with a token keep fraction gives a total KV retention of
``token_keep * (1 + rho) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import gelu_bwd, gelu_fwd, topk_indices

INIT_STD = 0.02

# Guard against float noise in budget products such as 0.7 * 10 * 4, which
# would otherwise floor one unit below the exact rational value.
_FLOOR_EPS = 1e-9


def floor_budget(x: float) -> int:
    return int(math.floor(x + _FLOOR_EPS))


def partition_value(v, n_groups: int) -> list[np.ndarray]:
    """Views of the S contiguous equal-width slices of the last axis of v."""
    arr = v if isinstance(v, np.ndarray) else np.asarray(v, dtype=np.float64)
    d = arr.shape[-1]
    if n_groups < 1 or d % n_groups != 0:
        raise ConfigError(f"group count {n_groups} must divide value width {d}")
    width = d // n_groups
    return [arr[..., g * width : (g + 1) * width] for g in range(n_groups)]


class GroupRouter:
    """Per-layer linear router over value groups: alpha = W x + b."""

    ARRAY_NAMES = ("router_w", "router_b")

    def __init__(self, d_model: int, n_groups: int, rng: np.random.Generator) -> None:
        self.d_model = d_model
        self.n_groups = n_groups
        self.router_w = rng.normal(0.0, INIT_STD, size=(n_groups, d_model))
        self.router_b = np.zeros(n_groups)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAY_NAMES}

    def scores(self, x: np.ndarray) -> np.ndarray:
        """x (..., d_model) -> logits (..., n_groups)."""
        return x @ self.router_w.T + self.router_b


class Reconstructor:
    """Two-layer GELU MLP rebuilding a full value vector from a masked one.

    Input is the zero-masked value concatenated with the binary keep
    indicator: (d_head + S) -> hidden -> d_head.
    """

    ARRAY_NAMES = ("rec_w1", "rec_b1", "rec_w2", "rec_b2")

    def __init__(self, d_head: int, n_groups: int, hidden: int, rng: np.random.Generator) -> None:
        self.d_head = d_head
        self.n_groups = n_groups
        self.hidden = hidden
        d_in = d_head + n_groups
        self.rec_w1 = rng.normal(0.0, INIT_STD, size=(hidden, d_in))
        self.rec_b1 = np.zeros(hidden)
        self.rec_w2 = rng.normal(0.0, INIT_STD, size=(d_head, hidden))
        self.rec_b2 = np.zeros(d_head)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAY_NAMES}

    def forward(self, v_masked: np.ndarray, indicator: np.ndarray) -> tuple[np.ndarray, dict]:
        """v_masked (N, d_head), indicator (N, S) -> v_hat (N, d_head)."""
        inp = np.concatenate([v_masked, indicator], axis=1)
        z1 = inp @ self.rec_w1.T + self.rec_b1
        a1 = gelu_fwd(z1)
        v_hat = a1 @ self.rec_w2.T + self.rec_b2
        return v_hat, {"inp": inp, "z1": z1, "a1": a1}

    def backward(
        self,
        d_vhat: np.ndarray,
        cache: dict,
        grads: dict | None = None,
        prefix: str = "",
    ) -> np.ndarray:
        """Return dL/dinput; accumulate parameter grads only when asked.

        The language-model objective never updates the reconstructor, so its
        backward is split: gradient always flows through the function to its
        input, parameter accumulation is opt-in.
        """
        da1 = d_vhat @ self.rec_w2
        dz1 = gelu_bwd(da1, cache["z1"])
        dinp = dz1 @ self.rec_w1
        if grads is not None:
            _accum(grads, prefix + ".rec_w2", d_vhat.T @ cache["a1"])
            _accum(grads, prefix + ".rec_b2", d_vhat.sum(axis=0))
            _accum(grads, prefix + ".rec_w1", dz1.T @ cache["inp"])
            _accum(grads, prefix + ".rec_b1", dz1.sum(axis=0))
        return dinp


def _accum(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


def select_keep_groups(x, router: GroupRouter, keep: int) -> np.ndarray:
    """Ascending indices of the top-``keep`` groups for one token vector."""
    x = np.asarray(x, dtype=np.float64)
    return topk_indices(router.scores(x[None, :])[0], keep)


def reconstruct_value(v, keep_idx, recon: Reconstructor) -> np.ndarray:
    """Routed value for one head: kept groups copied, dropped ones rebuilt.

    When every group is kept the reconstructor is bypassed and ``v`` comes
    back bit for bit.
    """
    v = np.asarray(v, dtype=np.float64)
    s = recon.n_groups
    keep_idx = np.asarray(keep_idx, dtype=np.int64)
    if keep_idx.size == s:
        return v.copy()
    indicator = np.zeros(s)
    indicator[keep_idx] = 1.0
    width = v.shape[0] // s
    dim_mask = np.repeat(indicator, width)
    v_masked = v * dim_mask
    v_hat, _ = recon.forward(v_masked[None, :], indicator[None, :])
    return v_masked + (1.0 - dim_mask) * v_hat[0]


# ---------------------------------------------------------------------------
# budgets and selection masks


@dataclass(frozen=True)
class BudgetSpec:
    """Compression budget: value-group fraction, token keep fraction, sizes."""

    rho: float
    groups: int
    token_keep: float
    n_context: int
    n_query: int

    def __post_init__(self) -> None:
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        if not 0.0 < self.token_keep <= 1.0:
            raise ConfigError(f"token_keep must be in (0, 1], got {self.token_keep}")
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if self.n_context < 1 or self.n_query < 0:
            raise ConfigError(
                f"need n_context >= 1 and n_query >= 0, got {self.n_context}, {self.n_query}"
            )

    @property
    def n_tokens(self) -> int:
        return self.n_context + self.n_query

    @property
    def pair_budget(self) -> int:
        """Global (token, group) budget M = floor(rho * |C| * S)."""
        return floor_budget(self.rho * self.n_context * self.groups)

    @property
    def token_budget(self) -> int:
        return floor_budget(self.token_keep * self.n_context)


def kv_retention_fraction(spec: BudgetSpec) -> float:
    """Total KV kept relative to a full cache: token_keep * (1 + rho) / 2.

    Keys are kept in full for surviving tokens while values keep a ``rho``
    fraction of their groups, and both caches weigh equally.
    """
    return spec.token_keep * (1.0 + spec.rho) / 2.0


class SelectionMask:
    """Per-(token, group) keep mask over a sequence, query region exempt.

    ``m`` has shape (n_context + n_query, S) with 0/1 entries; the trailing
    ``n_query`` rows are all ones.
    """

    def __init__(self, m: np.ndarray, n_context: int, n_query: int) -> None:
        m = np.asarray(m)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2-d, got shape {m.shape}")
        if m.shape[0] != n_context + n_query:
            raise ValueError(
                f"mask has {m.shape[0]} rows but regions cover {n_context + n_query}"
            )
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        if n_query and not np.all(m[n_context:] == 1):
            raise ValueError("query-region rows must be all ones")
        self.m = m.astype(np.uint8)
        self.n_context = n_context
        self.n_query = n_query

    @property
    def n_groups(self) -> int:
        return self.m.shape[1]

    @property
    def k_per_token(self) -> np.ndarray:
        """Kept-group count per token, shape (n_context + n_query,)."""
        return self.m.sum(axis=1).astype(np.int64)

    @property
    def kept_pairs(self) -> int:
        """Number of kept (token, group) pairs in the context region."""
        return int(self.m[: self.n_context].sum())

    def dim_mask(self, d_head: int) -> np.ndarray:
        """Expand to per-dimension 0/1 floats, shape (tokens, d_head)."""
        if d_head % self.n_groups != 0:
            raise ConfigError(f"groups {self.n_groups} must divide d_head {d_head}")
        return np.repeat(self.m.astype(np.float64), d_head // self.n_groups, axis=1)

    @classmethod
    def all_ones(cls, n_context: int, n_query: int, n_groups: int) -> "SelectionMask":
        return cls(np.ones((n_context + n_query, n_groups), dtype=np.uint8), n_context, n_query)


@dataclass(frozen=True)
class RetentionInfo:
    """Realised cache accounting for the compressed region of a forward pass."""

    tokens_kept: float
    rho: float
    total_kv: float
    total_kv_formula: float
    n_context: int
    n_query: int
    n_surviving: int
    pairs_kept: int
    n_compressed_layers: int

    @classmethod
    def uncompressed(cls, n_tokens: int) -> "RetentionInfo":
        return cls(1.0, 1.0, 1.0, 1.0, n_tokens, 0, n_tokens, 0, 0)
