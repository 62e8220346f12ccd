"""Query-aware selection of (token, value-group) pairs.

The diagnostic route scores context tokens by the attention mass they
receive from the query region at a probe layer, multiplies by per-group
value norms, and keeps the global top-M pairs under M = floor(rho * |C| * S).
The deployable route replaces the attention-derived quantities with two
small MLP predictors that read the hidden state at the split layer.  All
ranking ties break lexicographically by (token, group) so selections are
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import gelu_bwd, gelu_fwd, group_l2_norms
from .value_groups import BudgetSpec, SelectionMask, floor_budget

INIT_STD = 0.02
PREDICTOR_HIDDEN = 256

# Floor for stored target standard deviations so denormalisation never
# divides by, or multiplies into, zero.
_SIGMA_FLOOR = 1e-8


def diagnostic_alpha(attn: np.ndarray, query_idx, context_idx) -> np.ndarray:
    """Mean attention each context token receives from the query rows.

    ``attn`` is a (T, T) head-averaged attention matrix; rows are queries.
    Returns one score per context token.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 2 or attn.shape[0] != attn.shape[1]:
        raise ValueError(f"attention matrix must be square, got {attn.shape}")
    query_idx = np.asarray(query_idx, dtype=np.int64)
    context_idx = np.asarray(context_idx, dtype=np.int64)
    if query_idx.size == 0:
        raise ValueError("query region is empty")
    return attn[np.ix_(query_idx, context_idx)].mean(axis=0)


def pair_scores(alpha: np.ndarray, values: np.ndarray, n_groups: int) -> np.ndarray:
    """s[j, g] = alpha_j * ||v_j restricted to group g||_2, shape (|C|, S)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != alpha.shape[0]:
        raise ValueError(
            f"values shape {values.shape} does not match {alpha.shape[0]} alpha entries"
        )
    return alpha[:, None] * group_l2_norms(values, n_groups)


def group_major_values(values: np.ndarray, n_groups: int) -> np.ndarray:
    """Reorder (T, H, d_head) values so each group's dims are contiguous.

    Output is (T, H * d_head) with group g occupying columns
    [g * H * d_g, (g + 1) * H * d_g); its row-wise group norms therefore pool
    all heads of a layer.
    """
    t, h, d_head = values.shape
    if d_head % n_groups != 0:
        raise ConfigError(f"groups {n_groups} must divide d_head {d_head}")
    width = d_head // n_groups
    parts = values.reshape(t, h, n_groups, width)
    return np.ascontiguousarray(parts.transpose(0, 2, 1, 3)).reshape(t, h * d_head)


def global_topm_mask(scores: np.ndarray, spec: BudgetSpec) -> SelectionMask:
    """Keep the M highest-scoring context pairs; query rows stay full.

    Exactly ``spec.pair_budget`` ones land in the context rows.  Ties break
    toward the lower (token, group) pair in row-major order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (spec.n_context, spec.groups):
        raise ValueError(f"scores shape {scores.shape} != ({spec.n_context}, {spec.groups})")
    m = np.zeros((spec.n_tokens, spec.groups), dtype=np.uint8)
    budget = spec.pair_budget
    if budget:
        flat = scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:budget]
        ctx = np.zeros(flat.size, dtype=np.uint8)
        ctx[order] = 1
        m[: spec.n_context] = ctx.reshape(spec.n_context, spec.groups)
    m[spec.n_context :] = 1
    return SelectionMask(m, spec.n_context, spec.n_query)


def fixed_k_mask(scores: np.ndarray, keep: int, spec: BudgetSpec) -> SelectionMask:
    """Per-token top-``keep`` baseline at the same total budget as global top-M."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (spec.n_context, spec.groups):
        raise ValueError(f"scores shape {scores.shape} != ({spec.n_context}, {spec.groups})")
    if not 0 <= keep <= spec.groups:
        raise ValueError(f"keep={keep} out of range for {spec.groups} groups")
    m = np.zeros((spec.n_tokens, spec.groups), dtype=np.uint8)
    if keep:
        order = np.argsort(-scores, axis=1, kind="stable")[:, :keep]
        np.put_along_axis(m[: spec.n_context], order, 1, axis=1)
    m[spec.n_context :] = 1
    return SelectionMask(m, spec.n_context, spec.n_query)


def token_keep_set(alpha: np.ndarray, token_keep: float) -> np.ndarray:
    """Ascending indices of the floor(token_keep * |C|) highest-alpha tokens."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1:
        raise ValueError(f"alpha must be 1-d, got shape {alpha.shape}")
    if not 0.0 < token_keep <= 1.0:
        raise ValueError(f"token_keep must be in (0, 1], got {token_keep}")
    n_keep = floor_budget(token_keep * alpha.shape[0])
    if n_keep == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-alpha, kind="stable")[:n_keep]
    return np.sort(order)


@dataclass
class Selection:
    """Outcome of a selection pass over one sequence."""

    kept_tokens: np.ndarray  # ascending surviving context indices
    mask: SelectionMask
    alpha: np.ndarray | None = None  # per-context token score, if computed
    scores: np.ndarray | None = None  # per-(token, group) score, if computed


def combined_selection(alpha: np.ndarray, scores: np.ndarray, spec: BudgetSpec) -> Selection:
    """Token eviction first, then a global top-M over the survivors.

    Evicted tokens lose keys and values entirely (all-zero mask rows); the
    pair budget is recomputed over the surviving context,
    M = floor(rho * |surviving| * S).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (spec.n_context, spec.groups):
        raise ValueError(f"scores shape {scores.shape} != ({spec.n_context}, {spec.groups})")
    if alpha.shape[0] != spec.n_context:
        raise ValueError(f"alpha has {alpha.shape[0]} entries for {spec.n_context} tokens")
    kept = token_keep_set(alpha, spec.token_keep)
    m = np.zeros((spec.n_tokens, spec.groups), dtype=np.uint8)
    budget = floor_budget(spec.rho * kept.size * spec.groups)
    if budget:
        flat = scores[kept].reshape(-1)
        order = np.argsort(-flat, kind="stable")[:budget]
        sub = np.zeros(flat.size, dtype=np.uint8)
        sub[order] = 1
        m[kept] = sub.reshape(kept.size, spec.groups)
    m[spec.n_context :] = 1
    mask = SelectionMask(m, spec.n_context, spec.n_query)
    return Selection(kept_tokens=kept, mask=mask, alpha=alpha, scores=scores)


def mask_overlap(a: SelectionMask, b: SelectionMask) -> float:
    """Intersection size over mask size for two equal-budget context masks.

    A uniformly random pair of masks at value-group fraction rho overlaps at
    rho in expectation, which is the chance baseline for predictor quality.
    """
    if a.m.shape != b.m.shape or a.n_context != b.n_context:
        raise ValueError("masks cover different regions")
    am = a.m[: a.n_context].astype(bool)
    bm = b.m[: b.n_context].astype(bool)
    inter = int(np.sum(am & bm))
    return inter / max(1, int(am.sum()))


# ---------------------------------------------------------------------------
# predictors


class _Mlp2:
    """Shared forward/backward for the d_model -> hidden -> out predictors."""

    def __init__(self, d_in: int, d_out: int, hidden: int, rng: np.random.Generator) -> None:
        self.w1 = rng.normal(0.0, INIT_STD, size=(hidden, d_in))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, INIT_STD, size=(d_out, hidden))
        self.b2 = np.zeros(d_out)
        self.mu = np.zeros(d_out)
        self.sigma = np.ones(d_out)

    ARRAY_NAMES = ("w1", "b1", "w2", "b2", "mu", "sigma")
    TRAINABLE = ("w1", "b1", "w2", "b2")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAY_NAMES}

    def forward(self, h: np.ndarray) -> tuple[np.ndarray, dict]:
        """h (N, d_model) -> normalised-space predictions (N, d_out)."""
        z1 = h @ self.w1.T + self.b1
        a1 = gelu_fwd(z1)
        out = a1 @ self.w2.T + self.b2
        return out, {"h": h, "z1": z1, "a1": a1}

    def backward(self, dout: np.ndarray, cache: dict, grads: dict, prefix: str) -> None:
        _accum(grads, prefix + ".w2", dout.T @ cache["a1"])
        _accum(grads, prefix + ".b2", dout.sum(axis=0))
        da1 = dout @ self.w2
        dz1 = gelu_bwd(da1, cache["z1"])
        _accum(grads, prefix + ".w1", dz1.T @ cache["h"])
        _accum(grads, prefix + ".b1", dz1.sum(axis=0))

    def set_normalization(self, mu: np.ndarray, sigma: np.ndarray) -> None:
        self.mu = np.asarray(mu, dtype=np.float64).reshape(self.mu.shape)
        self.sigma = np.maximum(np.asarray(sigma, dtype=np.float64).reshape(self.sigma.shape), _SIGMA_FLOOR)

    def denormalize(self, out: np.ndarray) -> np.ndarray:
        """Map normalised-space predictions back to the raw target scale."""
        return out * self.sigma + self.mu


class ScorePredictor(_Mlp2):
    """Predicts the per-group relevance row for a context token."""

    def __init__(self, d_model: int, n_groups: int, rng: np.random.Generator) -> None:
        super().__init__(d_model, n_groups, PREDICTOR_HIDDEN, rng)
        self.n_groups = n_groups


class TokenPredictor(_Mlp2):
    """Predicts the scalar received-attention mass of a context token."""

    def __init__(self, d_model: int, rng: np.random.Generator) -> None:
        super().__init__(d_model, 1, PREDICTOR_HIDDEN, rng)


def predict_scores(h: np.ndarray, predictor: ScorePredictor) -> np.ndarray:
    """Normalised-space relevance predictions for (N, d_model) hidden states."""
    out, _ = predictor.forward(np.asarray(h, dtype=np.float64))
    return out


def _accum(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


# ---------------------------------------------------------------------------
# selection sources consumed by the model's compressed forward pass


@dataclass
class SelectionContext:
    """Everything available at the split point of a forward pass."""

    spec: BudgetSpec | None
    context_idx: np.ndarray
    query_idx: np.ndarray
    probe_attention: np.ndarray | None  # (T, T) head-averaged, probe layer
    split_hidden: np.ndarray | None  # (T, d_model) entering the first compressed layer
    split_values: np.ndarray | None  # (T, H, d_head) of the first compressed layer


class FixedSelection:
    """Replays a precomputed selection; the sequence content is ignored."""

    def __init__(self, selection: Selection) -> None:
        self.selection = selection

    def regions(self) -> tuple[int, int]:
        return self.selection.mask.n_context, self.selection.mask.n_query

    def select(self, ctx: SelectionContext) -> Selection:
        return self.selection


class DiagnosticSelector:
    """Oracle route: probe-layer attention mass times pooled value norms."""

    def select(self, ctx: SelectionContext) -> Selection:
        if ctx.spec is None:
            raise ConfigError("diagnostic selection needs a budget spec")
        if ctx.probe_attention is None:
            raise ConfigError("diagnostic selection needs probe-layer attention")
        if ctx.split_values is None:
            raise ConfigError("diagnostic selection needs split-layer values")
        alpha = diagnostic_alpha(ctx.probe_attention, ctx.query_idx, ctx.context_idx)
        flat = group_major_values(ctx.split_values[ctx.context_idx], ctx.spec.groups)
        scores = pair_scores(alpha, flat, ctx.spec.groups)
        return combined_selection(alpha, scores, ctx.spec)


class PredictorSelector:
    """Deployable route: MLP heads replace the attention-derived scores.

    Predictions are denormalised with the training-set statistics stored on
    each predictor so the resulting masks live on the same scale as the
    diagnostic oracle's.
    """

    def __init__(self, score_predictor: ScorePredictor, token_predictor: TokenPredictor) -> None:
        self.score_predictor = score_predictor
        self.token_predictor = token_predictor

    def select(self, ctx: SelectionContext) -> Selection:
        if ctx.spec is None:
            raise ConfigError("predictor selection needs a budget spec")
        if ctx.split_hidden is None:
            raise ConfigError("predictor selection needs split-layer hidden states")
        h_ctx = ctx.split_hidden[ctx.context_idx]
        scores = self.score_predictor.denormalize(predict_scores(h_ctx, self.score_predictor))
        alpha_out, _ = self.token_predictor.forward(h_ctx)
        alpha = self.token_predictor.denormalize(alpha_out)[:, 0]
        return combined_selection(alpha, scores, ctx.spec)
