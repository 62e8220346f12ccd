"""Central-difference verification of every hand-written backward path.

Hard top-k selections make the loss piecewise smooth: a finite-difference
probe is only valid away from selection ties.  The suite therefore builds a
probe configuration whose routing margins all exceed TIE_MARGIN (resampling
the seed if needed), which keeps the +/-eps perturbations on one side of
every selection boundary.
"""

from __future__ import annotations

import numpy as np

from .errors import GradCheckError
from .model import ModelConfig, TransformerModel
from .numerics import grad_check, softmax_bwd, softmax_fwd
from .qa_selector import ScorePredictor, TokenPredictor
from .training import loss_aux, loss_lm, loss_predictor

GRAD_TOL = 1e-4
TIE_MARGIN = 1e-3
_MAX_ATTEMPTS = 20

# Probe-model adapter weights are drawn at this scale instead of the usual
# init so the adapter path carries an O(1) share of the loss; near the
# zero-init the true gradients are small enough that finite-difference
# round-off noise dominates the comparison.
_PROBE_B_STD = 0.3

LM_FAMILIES = (
    "lora.0.wq.a",
    "lora.0.wq.b",
    "lora.0.wq.router_w",
    "lora.0.wq.router_b",
    "lora.1.wv.a",
    "lora.1.wv.b",
    "lora.1.wv.router_w",
    "lora.1.wv.router_b",
)
AUX_FAMILIES = (
    (0, "rec_w1"),
    (0, "rec_b1"),
    (0, "rec_w2"),
    (0, "rec_b2"),
    (0, "router_w"),
    (0, "router_b"),
    (1, "router_w"),
    (1, "rec_w2"),
)
PREDICTOR_FAMILIES = ("w1", "b1", "w2", "b2")


def _margin(scores: np.ndarray, k: int) -> float:
    """Smallest kth-vs-(k+1)th score gap over rows; inf when nothing is cut."""
    if k >= scores.shape[1]:
        return float("inf")
    srt = np.sort(scores, axis=1)[:, ::-1]
    return float(np.min(srt[:, k - 1] - srt[:, k]))


def _min_selection_margin(model: TransformerModel, cache: dict) -> float:
    worst = float("inf")
    for lc in cache["layers"]:
        for key, val in lc.items():
            if key.startswith("lora_"):
                worst = min(worst, _margin(val["scores"], val["sel"].shape[1]))
        gc = lc.get("group")
        if gc is not None and not gc["bypass"]:
            scores = gc["scores"].reshape(-1, model.value_groups)
            worst = min(worst, _margin(scores, model.value_keep))
    return worst


def build_check_model(seed: int = 0) -> tuple[TransformerModel, np.ndarray, np.ndarray]:
    """Small adapted model plus a token batch with tie-free routing.

    Adapter A and B matrices are re-randomised at _PROBE_B_STD: at the zero
    B init the adapter output is independent of A, which would turn the A
    check into a 0-vs-noise comparison instead of a real one.
    """
    for attempt in range(_MAX_ATTEMPTS):
        s = seed + attempt
        cfg = ModelConfig(
            vocab_size=37, d_model=16, n_layers=2, n_heads=2, d_head=8, max_seq=8, split_layer=2
        )
        model = TransformerModel(cfg, seed=s)
        model.attach_adapters(
            subspaces=4, active=2, rank=2, alpha=8.0, dropout=0.0, targets=("wq", "wv"), seed=s
        )
        model.attach_value_routing(groups=4, keep=2, seed=s)
        rng = np.random.default_rng([s, 9])
        for lora in model.adapters.values():
            lora.a[...] = rng.normal(0.0, _PROBE_B_STD, size=lora.a.shape)
            lora.b[...] = rng.normal(0.0, _PROBE_B_STD, size=lora.b.shape)
        tokens = rng.integers(0, cfg.vocab_size, size=(1, 6))
        targets = rng.integers(0, cfg.vocab_size, size=(1, 6))
        res = model.forward(tokens, "qi_routed", want_cache=True)
        if _min_selection_margin(model, res.cache) >= TIE_MARGIN:
            return model, tokens, targets
    raise GradCheckError(f"no tie-free probe configuration in {_MAX_ATTEMPTS} attempts")


def _lm_loss_fn(model: TransformerModel, tokens: np.ndarray, targets: np.ndarray, name: str):
    """Closure mapping one named parameter array to (LM loss, its gradient)."""
    target_arr = model.named_arrays()[name]

    def f(theta: np.ndarray) -> tuple[float, np.ndarray]:
        target_arr[...] = theta.reshape(target_arr.shape)
        res = model.forward(tokens, "qi_routed", want_cache=True)
        value, dlogits = loss_lm(res.logits, targets)
        grads: dict[str, np.ndarray] = {}
        model.backward(dlogits, res.cache, grads)
        g = grads.get(name)
        return value, (np.zeros_like(target_arr) if g is None else g.copy())

    return f, target_arr


def _aux_loss_fn(model: TransformerModel, tokens: np.ndarray, layer: int, short: str):
    """Surrogate reconstruction objective with pinned layer inputs.

    The training objective treats each layer's activations (true values,
    masked input, router features) as given data, so perturbing a parameter
    must not re-run the trunk: a fresh forward would leak the perturbation
    into later layers' activations, which the per-layer gradient rightly
    ignores.  The surrogate freezes one layer's inputs and differentiates
    the same computation the training step performs on them.
    """
    res = model.forward(tokens, "qi_routed", want_cache=True)
    lc = res.cache["layers"][layer]
    gc = lc["group"]
    x_flat = lc["x_flat"].copy()
    v_rows = gc["v_rows"].copy()
    rows = gc["rows"].copy()
    v_masked = (v_rows * gc["dim_mask"]).copy()
    recon = model.reconstructors[layer]
    router = model.group_routers[layer]
    h_heads = model.config.n_heads
    s_groups = model.value_groups
    target_arr = getattr(recon if short.startswith("rec_") else router, short)

    def f(theta: np.ndarray) -> tuple[float, np.ndarray]:
        target_arr[...] = theta.reshape(target_arr.shape)
        scores = router.scores(x_flat)
        probs = softmax_fwd(scores)
        probs_rows = np.repeat(probs, h_heads, axis=0)
        v_hat, rcache = recon.forward(v_masked, rows)
        value, d_vhat, d_probs_rows = loss_aux(v_hat, v_rows, probs_rows)
        grads: dict[str, np.ndarray] = {}
        recon.backward(d_vhat, rcache, grads=grads, prefix="kv")
        d_probs = d_probs_rows.reshape(-1, h_heads, s_groups).sum(axis=1)
        d_scores = softmax_bwd(d_probs, probs)
        grads["kv.router_w"] = d_scores.T @ x_flat
        grads["kv.router_b"] = d_scores.sum(axis=0)
        return value, grads[f"kv.{short}"].copy()

    return f, target_arr


def _predictor_loss_fn(pred, h: np.ndarray, targets: np.ndarray, name: str):
    target_arr = getattr(pred, name)

    def f(theta: np.ndarray) -> tuple[float, np.ndarray]:
        target_arr[...] = theta.reshape(target_arr.shape)
        out, cache = pred.forward(h)
        value, dout = loss_predictor(out, targets)
        grads: dict[str, np.ndarray] = {}
        pred.backward(dout, cache, grads, "p")
        return value, grads[f"p.{name}"].copy()

    return f, target_arr


def run_gradcheck_suite(seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    """Max relative gradient error per parameter family.

    Families cover the adapter path and its router through the LM loss, the
    reconstructor and group router through the reconstruction objective,
    and both relevance predictors through their regression loss.
    """
    model, tokens, targets = build_check_model(seed)
    results: dict[str, float] = {}
    for name in LM_FAMILIES:
        f, arr = _lm_loss_fn(model, tokens, targets, name)
        orig = arr.copy()
        results[f"lm/{name}"] = grad_check(f, arr, eps=eps)
        arr[...] = orig
    for layer, short in AUX_FAMILIES:
        f, arr = _aux_loss_fn(model, tokens, layer, short)
        orig = arr.copy()
        results[f"aux/kv.{layer}.{short}"] = grad_check(f, arr, eps=eps)
        arr[...] = orig

    rng = np.random.default_rng([seed, 11])
    d_model, n_groups, n_rows = 16, 4, 8
    score_pred = ScorePredictor(d_model, n_groups, rng)
    token_pred = TokenPredictor(d_model, rng)
    h = rng.normal(0.0, 1.0, size=(n_rows, d_model))
    score_targets = rng.normal(0.0, 1.0, size=(n_rows, n_groups))
    token_targets = rng.normal(0.0, 1.0, size=(n_rows, 1))
    for name in PREDICTOR_FAMILIES:
        f, arr = _predictor_loss_fn(score_pred, h, score_targets, name)
        orig = arr.copy()
        results[f"pred.score/{name}"] = grad_check(f, arr, eps=eps)
        arr[...] = orig
        f, arr = _predictor_loss_fn(token_pred, h, token_targets, name)
        orig = arr.copy()
        results[f"pred.token/{name}"] = grad_check(f, arr, eps=eps)
        arr[...] = orig
    return results
