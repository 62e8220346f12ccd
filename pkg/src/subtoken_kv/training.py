"""Objectives, optimiser, and training loops.

Three loops share the machinery:

  pretrain_base    language model loss on the full trunk
  train_qi         frozen trunk; adapters learn from the LM loss, value-group
                   routers and reconstructors learn from the auxiliary loss,
                   both router families share a load-balance term
  train_predictors supervised regression of the query-aware relevance scores

The objective split is strict: the auxiliary loss never touches adapter
parameters and the LM loss never touches reconstructor parameters, which a
gradient-inspection test pins down.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CorpusStream
from .errors import ConfigError, TrainingDiverged
from .model import TransformerModel
from .numerics import softmax_bwd
from .qa_selector import ScorePredictor, TokenPredictor, diagnostic_alpha, group_major_values, pair_scores

_SEED_TAG_DROPOUT = 4
_SEED_TAG_PRED = 5


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_steps: int = 100
    total_steps: int = 2000
    lambda_aux: float = 0.1
    lambda_lb: float = 0.01
    batch_size: int = 8
    seq_len: int = 128
    seed: int = 0
    eval_every: int = 200
    val_fraction: float = 0.1
    val_sequences: int = 32
    # predictor training
    pred_lr: float = 1e-3
    pred_weight_decay: float = 1e-4
    pred_epochs: int = 50
    pred_batch_tokens: int = 1024
    pred_sequences: int = 200

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 <= warmup ({self.warmup_steps}) < total steps ({self.total_steps})"
            )
        if self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("batch_size must be >= 1 and seq_len >= 2")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside 0..{cfg.total_steps}")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# losses


def loss_lm(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean token cross-entropy and its logit gradient.

    logits (..., V), integer targets broadcastable to the leading shape.
    """
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = np.asarray(targets).reshape(-1)
    n = flat.shape[0]
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(n), tgt]
    probs = np.exp(shifted - logz[:, None])
    dflat = probs
    dflat[np.arange(n), tgt] -= 1.0
    dflat /= n
    return float(nll.mean()), dflat.reshape(logits.shape)


def loss_aux(
    v_hat: np.ndarray, v: np.ndarray, router_probs: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Reconstruction objective plus the router-coupling term.

    v_hat, v: (N, d_head) rows; router_probs: (N, S) softmax rows for the
    token owning each row.  Returns (loss, d/dv_hat, d/drouter_probs).  The
    first term is the plain MSE of the full-value prediction; the second
    weighs each group's reconstruction error by the router's drop
    probability (one minus its softmax mass), so the router learns to drop
    the groups the reconstructor can rebuild.  True values are constants
    here: no gradient flows upstream of the reconstructor input.
    """
    v_hat = np.asarray(v_hat, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    probs = np.asarray(router_probs, dtype=np.float64)
    n, d_head = v_hat.shape
    s = probs.shape[1]
    if d_head % s != 0:
        raise ConfigError(f"router width {s} must divide d_head {d_head}")
    width = d_head // s
    err = v_hat - v
    term1 = float(np.mean(err * err))
    group_mse = np.mean((err * err).reshape(n, s, width), axis=2)  # (N, S)
    drop = 1.0 - probs
    term2 = float(np.mean(np.sum(drop * group_mse, axis=1)))
    d_vhat = 2.0 * err / err.size
    d_vhat += np.repeat(drop, width, axis=1) * (2.0 * err) / (n * width)
    d_probs = -group_mse / n
    return term1 + term2, d_vhat, d_probs


def loss_load_balance(
    router_probs: np.ndarray, keep_counts: np.ndarray
) -> tuple[float, np.ndarray]:
    """Switch-style balance: S * sum_s f_s * mean_probs_s.

    ``keep_counts[s]`` counts tokens whose hard selection includes option s;
    the fractions f are constants of the backward pass.  Uniform keeps and
    probs give K; full collapse gives S.
    """
    probs = np.asarray(router_probs, dtype=np.float64)
    n, s = probs.shape
    f = np.asarray(keep_counts, dtype=np.float64) / n
    value = float(s * np.sum(f * probs.mean(axis=0)))
    d_probs = np.broadcast_to(s * f / n, probs.shape).copy()
    return value, d_probs


def loss_predictor(pred: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Plain MSE over all prediction entries, with gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    err = pred - targets
    return float(np.mean(err * err)), 2.0 * err / err.size


# ---------------------------------------------------------------------------
# optimiser


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict."""

    def __init__(self, names, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.names = list(names)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, weight_decay: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in self.names:
            p = params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + weight_decay * p
            p -= lr * update


# ---------------------------------------------------------------------------
# metrics


class MetricsWriter:
    """Append-only JSON-lines sink with byte-stable formatting."""

    def __init__(self, path) -> None:
        self.path = Path(path)
        self.path.write_text("", encoding="utf-8")

    def write(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _check_finite(value: float, step: int, term: str) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(step, term, value)
    return value


# ---------------------------------------------------------------------------
# evaluation helpers shared by the loops


def evaluate_val_loss(
    model: TransformerModel,
    corpus: CorpusStream,
    mode: str,
    max_sequences: int,
    batch_size: int = 8,
) -> float:
    """Mean validation cross-entropy in the given forward mode."""
    inputs, targets = corpus.val_batch(max_sequences)
    total, count = 0.0, 0
    for start in range(0, len(inputs), batch_size):
        chunk = slice(start, start + batch_size)
        logits = model.forward(inputs[chunk], mode).logits
        value, _ = loss_lm(logits, targets[chunk])
        n_chunk = len(inputs[chunk])
        total += value * n_chunk
        count += n_chunk
    return total / count


# ---------------------------------------------------------------------------
# training loops


def pretrain_base(
    model: TransformerModel,
    corpus: CorpusStream,
    cfg: TrainConfig,
    metrics: MetricsWriter | None = None,
) -> dict:
    names = model.trainable_names("baseline")
    params = model.named_arrays()
    opt = AdamW(names, cfg.beta1, cfg.beta2)
    summary = _run_lm_loop(model, corpus, cfg, opt, params, metrics, mode="baseline")
    return summary


def _run_lm_loop(model, corpus, cfg, opt, params, metrics, mode: str) -> dict:
    step0_val = None
    last_val = None
    best_val = math.inf
    batches = corpus.train_batches(cfg.batch_size, cfg.total_steps)
    for step, (inputs, targets) in enumerate(batches):
        if step % cfg.eval_every == 0:
            last_val = evaluate_val_loss(model, corpus, mode, cfg.val_sequences)
            best_val = min(best_val, last_val)
            if step0_val is None:
                step0_val = last_val
        rng = np.random.default_rng([cfg.seed, _SEED_TAG_DROPOUT, step])
        result = model.forward(inputs, mode, train=True, rng=rng, want_cache=True)
        lm, dlogits = loss_lm(result.logits, targets)
        _check_finite(lm, step, "lm_loss")
        grads: dict[str, np.ndarray] = {}
        model.backward(dlogits, result.cache, grads, train_base=(mode == "baseline"))
        opt.step(params, grads, lr_at(step, cfg), cfg.weight_decay)
        if metrics is not None and step % cfg.eval_every == 0:
            metrics.write(
                {"step": step, "lm_loss": lm, "val_loss": last_val, "val_ppl": math.exp(last_val)}
            )
    final_val = evaluate_val_loss(model, corpus, mode, cfg.val_sequences)
    best_val = min(best_val, final_val)
    if metrics is not None:
        metrics.write(
            {
                "step": cfg.total_steps,
                "lm_loss": None,
                "val_loss": final_val,
                "val_ppl": math.exp(final_val),
            }
        )
    return {
        "step0_val_loss": step0_val,
        "final_val_loss": final_val,
        "best_val_loss": best_val,
        "steps": cfg.total_steps,
    }


def train_qi(
    model: TransformerModel,
    corpus: CorpusStream,
    cfg: TrainConfig,
    metrics: MetricsWriter | None = None,
) -> dict:
    """Compression-aware adaptation run on a frozen trunk."""
    if model.group_routers is None:
        raise ConfigError("train_qi needs attach_value_routing")
    checksum = model.base_checksum()
    names = model.trainable_names("qi_routed")
    params = model.named_arrays()
    opt = AdamW(names, cfg.beta1, cfg.beta2)
    s_groups = model.value_groups
    keep = model.value_keep
    rho = keep / s_groups
    total_kv = (1.0 + rho) / 2.0

    step0_val = None
    last_val = None
    best_val = math.inf
    for step, (inputs, targets) in enumerate(corpus.train_batches(cfg.batch_size, cfg.total_steps)):
        if step % cfg.eval_every == 0:
            last_val = evaluate_val_loss(model, corpus, "qi_routed", cfg.val_sequences)
            best_val = min(best_val, last_val)
            if step0_val is None:
                step0_val = last_val
        rng = np.random.default_rng([cfg.seed, _SEED_TAG_DROPOUT, step])
        result = model.forward(inputs, "qi_routed", train=True, rng=rng, want_cache=True)
        lm, dlogits = loss_lm(result.logits, targets)
        _check_finite(lm, step, "lm_loss")
        grads: dict[str, np.ndarray] = {}
        model.backward(dlogits, result.cache, grads, train_base=False)

        aux = aux_backward(model, result.cache, grads, cfg.lambda_aux)
        _check_finite(aux, step, "aux_loss")
        lb = load_balance_backward(model, result.cache, grads, cfg.lambda_lb)
        _check_finite(lb, step, "lb_loss")

        opt.step(params, grads, lr_at(step, cfg), cfg.weight_decay)
        if metrics is not None and step % cfg.eval_every == 0:
            metrics.write(
                {
                    "step": step,
                    "lm_loss": lm,
                    "aux_loss": aux,
                    "lb_loss": lb,
                    "val_loss": last_val,
                    "val_ppl": math.exp(last_val),
                    "tokens_kept": 1.0,
                    "rho": rho,
                    "total_kv": total_kv,
                }
            )
    final_val = evaluate_val_loss(model, corpus, "qi_routed", cfg.val_sequences)
    best_val = min(best_val, final_val)
    if metrics is not None:
        metrics.write(
            {
                "step": cfg.total_steps,
                "lm_loss": None,
                "aux_loss": None,
                "lb_loss": None,
                "val_loss": final_val,
                "val_ppl": math.exp(final_val),
                "tokens_kept": 1.0,
                "rho": rho,
                "total_kv": total_kv,
            }
        )
    if model.base_checksum() != checksum:
        raise RuntimeError("frozen base changed during train_qi")
    return {
        "step0_val_loss": step0_val,
        "final_val_loss": final_val,
        "best_val_loss": best_val,
        "steps": cfg.total_steps,
        "total_kv": total_kv,
        "base_checksum": checksum,
    }


def aux_backward(model: TransformerModel, cache: dict, grads: dict, lambda_aux: float) -> float:
    """Auxiliary reconstruction loss: value + gradients into kv.* only.

    Averaged over layers.  True values act as constants, so the adapters
    that produced them receive nothing from this objective.
    """
    if model.value_keep == model.value_groups:
        return 0.0
    layers = cache["layers"]
    n_layers = len(layers)
    h_heads = model.config.n_heads
    total = 0.0
    for i, lc in enumerate(layers):
        gc = lc["group"]
        probs_rows = np.repeat(gc["probs"].reshape(-1, model.value_groups), h_heads, axis=0)
        value, d_vhat, d_probs_rows = loss_aux(gc["v_hat"], gc["v_rows"], probs_rows)
        total += value
        w = lambda_aux / n_layers
        model.reconstructors[i].backward(w * d_vhat, gc["rcache"], grads=grads, prefix=f"kv.{i}")
        # fold the per-head rows back onto their token's router probabilities
        d_probs = d_probs_rows.reshape(-1, h_heads, model.value_groups).sum(axis=1)
        d_scores = softmax_bwd(w * d_probs, gc["probs"].reshape(-1, model.value_groups))
        x_flat = lc["x_flat"]
        _accum(grads, f"kv.{i}.router_w", d_scores.T @ x_flat)
        _accum(grads, f"kv.{i}.router_b", d_scores.sum(axis=0))
    return total / n_layers


def load_balance_backward(model: TransformerModel, cache: dict, grads: dict, lambda_lb: float) -> float:
    """Load-balance over every router instance (adapters and value groups)."""
    layers = cache["layers"]
    terms: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]] = []
    for i, lc in enumerate(layers):
        gc = lc.get("group")
        if gc is not None:
            probs = gc["probs"].reshape(-1, model.value_groups)
            if gc["bypass"]:
                counts = np.full(model.value_groups, probs.shape[0])
            else:
                counts = gc["keepmask"].sum(axis=0)
            terms.append((f"kv.{i}", probs, counts, lc["x_flat"]))
        for target in model.adapter_targets:
            lcache = lc.get(f"lora_{target}")
            if lcache is None:
                continue
            probs = lcache["probs_full"]
            counts = np.zeros(probs.shape[1])
            np.add.at(counts, lcache["sel"].reshape(-1), 1.0)
            terms.append((f"lora.{i}.{target}", probs, counts, lcache["x"]))
    if not terms:
        return 0.0
    total = 0.0
    w = lambda_lb / len(terms)
    for prefix, probs, counts, x_src in terms:
        value, d_probs = loss_load_balance(probs, counts)
        total += value
        d_scores = softmax_bwd(w * d_probs, probs)
        _accum(grads, f"{prefix}.router_w", d_scores.T @ x_src)
        _accum(grads, f"{prefix}.router_b", d_scores.sum(axis=0))
    return total / len(terms)


def _accum(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


# ---------------------------------------------------------------------------
# predictor training


@dataclass
class PredictorDataset:
    hidden: np.ndarray  # (N, d_model)
    score_targets: np.ndarray  # (N, S) normalised
    alpha_targets: np.ndarray  # (N, 1) normalised
    score_mu: np.ndarray
    score_sigma: np.ndarray
    alpha_mu: np.ndarray
    alpha_sigma: np.ndarray


def collect_predictor_targets(
    model: TransformerModel,
    sequences: np.ndarray,
    n_groups: int,
    query_region: int,
) -> PredictorDataset:
    """Diagnostic-oracle targets from uncompressed forward passes.

    For each sequence: hidden states entering the first compressed layer,
    received-attention alpha at the probe layer, and the (token, group)
    relevance matrix alpha * pooled group norm.  Targets are normalised per
    group (and the scalar alpha on its own) to zero mean, unit variance.
    """
    hs, scores, alphas = [], [], []
    for seq in np.asarray(sequences):
        t = len(seq)
        if t <= query_region:
            raise ConfigError(f"sequence length {t} leaves no context before the query region")
        n_ctx = t - query_region
        res = model.forward(seq[None], "baseline", want_probe=True, capture_split=True)
        ctx_idx = np.arange(n_ctx)
        qry_idx = np.arange(n_ctx, t)
        alpha = diagnostic_alpha(res.probe_attention, qry_idx, ctx_idx)
        flat = group_major_values(res.split_values[ctx_idx], n_groups)
        s = pair_scores(alpha, flat, n_groups)
        hs.append(res.split_hidden[ctx_idx])
        scores.append(s)
        alphas.append(alpha)
    hidden = np.concatenate(hs, axis=0)
    raw_scores = np.concatenate(scores, axis=0)
    raw_alpha = np.concatenate(alphas, axis=0)[:, None]
    s_mu = raw_scores.mean(axis=0)
    s_sigma = np.maximum(raw_scores.std(axis=0), 1e-8)
    a_mu = raw_alpha.mean(axis=0)
    a_sigma = np.maximum(raw_alpha.std(axis=0), 1e-8)
    return PredictorDataset(
        hidden=hidden,
        score_targets=(raw_scores - s_mu) / s_sigma,
        alpha_targets=(raw_alpha - a_mu) / a_sigma,
        score_mu=s_mu,
        score_sigma=s_sigma,
        alpha_mu=a_mu,
        alpha_sigma=a_sigma,
    )


def train_predictors(
    score_pred: ScorePredictor,
    token_pred: TokenPredictor,
    dataset: PredictorDataset,
    cfg: TrainConfig,
    metrics: MetricsWriter | None = None,
) -> dict:
    """MSE regression on normalised targets with AdamW."""
    score_params = {f"score.{n}": getattr(score_pred, n) for n in score_pred.TRAINABLE}
    token_params = {f"token.{n}": getattr(token_pred, n) for n in token_pred.TRAINABLE}
    params = {**score_params, **token_params}
    opt = AdamW(params, cfg.beta1, cfg.beta2)
    n = len(dataset.hidden)
    batch = min(cfg.pred_batch_tokens, n)
    score_loss = token_loss = float("nan")
    for epoch in range(cfg.pred_epochs):
        order = np.random.default_rng([cfg.seed, _SEED_TAG_PRED, epoch]).permutation(n)
        score_sum = token_sum = 0.0
        n_batches = 0
        for start in range(0, n - batch + 1, batch):
            rows = order[start : start + batch]
            grads: dict[str, np.ndarray] = {}
            out, cache = score_pred.forward(dataset.hidden[rows])
            s_loss, dout = loss_predictor(out, dataset.score_targets[rows])
            score_pred.backward(dout, cache, grads, "score")
            out_t, cache_t = token_pred.forward(dataset.hidden[rows])
            t_loss, dout_t = loss_predictor(out_t, dataset.alpha_targets[rows])
            token_pred.backward(dout_t, cache_t, grads, "token")
            _check_finite(s_loss, epoch, "score_loss")
            _check_finite(t_loss, epoch, "token_loss")
            opt.step(params, grads, cfg.pred_lr, cfg.pred_weight_decay)
            score_sum += s_loss
            token_sum += t_loss
            n_batches += 1
        score_loss = score_sum / n_batches
        token_loss = token_sum / n_batches
        if metrics is not None:
            metrics.write({"epoch": epoch, "score_loss": score_loss, "token_loss": token_loss})
    score_pred.set_normalization(dataset.score_mu, dataset.score_sigma)
    token_pred.set_normalization(dataset.alpha_mu, dataset.alpha_sigma)
    return {"score_loss": score_loss, "token_loss": token_loss, "rows": n}
