"""Small byte-level decoder-only transformer with routable value caches.

Pre-norm blocks, learned positional embeddings, causal attention.  The same
forward code serves three modes:

  baseline       frozen (or pretraining) transformer, full KV cache
  qi_routed      routed low-rank adapters on selected projections plus
                 query-independent value-group routing with reconstruction
                 on every layer
  qa_compressed  full values below the split layer; at and above it, values
                 masked per a query-aware SelectionMask and evicted tokens
                 removed from attention

Layers are indexed 1..n_layers when talking about the split: layers below
``split_layer`` run uncompressed, layers at or above it are compressed.  The
backward pass is explicit (no autograd) and supports the baseline and
qi_routed modes, which are the two that train.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .numerics import gelu_bwd, gelu_fwd, softmax_bwd, softmax_fwd
from .qa_selector import FixedSelection, Selection, SelectionContext
from .routed_lora import RoutedLora
from .value_groups import (
    BudgetSpec,
    GroupRouter,
    Reconstructor,
    RetentionInfo,
    SelectionMask,
    kv_retention_fraction,
)

MODES = ("baseline", "qi_routed", "qa_compressed")

# Fraction of depth that stays uncompressed under the proportional default.
SPLIT_FRACTION = 0.78

INIT_STD = 0.02
_LN_EPS = 1e-5
_NEG_BIG = -1e30

_SEED_TAG_BASE = 0
_SEED_TAG_LORA = 1
_SEED_TAG_KV = 2

ADAPTER_TARGETS = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_head: int = 16
    max_seq: int = 256
    split_layer: int | None = None  # 1-indexed; None -> proportional default

    def __post_init__(self) -> None:
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                f"n_heads * d_head = {self.n_heads * self.d_head} != d_model {self.d_model}"
            )
        if self.split_layer is not None and not 0 < self.split_layer <= self.n_layers:
            raise ConfigError(
                f"split_layer {self.split_layer} outside 1..{self.n_layers}"
            )
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq) < 1:
            raise ConfigError("all model dimensions must be positive")

    def effective_split(self) -> int:
        """1-indexed first compressed layer; deepest ~22% of layers by default."""
        if self.split_layer is not None:
            return self.split_layer
        return math.ceil(SPLIT_FRACTION * self.n_layers)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KVSnapshot:
    """Per-layer cached keys and (possibly routed or masked) values.

    Keys are never compressed: in every mode the stored K tensors are the
    raw per-layer projections.  ``retention`` accounts for the compressed
    region of the cache.
    """

    keys: list[np.ndarray]  # each (T, H, d_head)
    values: list[np.ndarray]
    retention: RetentionInfo


@dataclass
class ForwardResult:
    logits: np.ndarray  # (B, T, vocab)
    cache: dict | None = None
    snapshot: KVSnapshot | None = None
    probe_attention: np.ndarray | None = None  # (T, T), head-averaged
    selection: Selection | None = None
    split_hidden: np.ndarray | None = None  # (T, d_model)
    split_values: np.ndarray | None = None  # (T, H, d_head)


def _layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, dict]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, {"xhat": xhat, "inv": inv, "g": g}


def _layernorm_bwd(dy: np.ndarray, cache: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, g = cache["xhat"], cache["inv"], cache["g"]
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dg, db


def _accum(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


class TransformerModel:
    """Toy decoder-only language model with optional routing attachments."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        rng = np.random.default_rng([seed, _SEED_TAG_BASE])
        d, v = config.d_model, config.vocab_size
        p: dict[str, np.ndarray] = {}
        p["tok_emb"] = rng.normal(0.0, INIT_STD, size=(v, d))
        p["pos_emb"] = rng.normal(0.0, INIT_STD, size=(config.max_seq, d))
        for i in range(config.n_layers):
            pre = f"blocks.{i}."
            p[pre + "ln1.g"] = np.ones(d)
            p[pre + "ln1.b"] = np.zeros(d)
            for name in ADAPTER_TARGETS:
                p[pre + "attn." + name] = rng.normal(0.0, INIT_STD, size=(d, d))
            p[pre + "ln2.g"] = np.ones(d)
            p[pre + "ln2.b"] = np.zeros(d)
            p[pre + "mlp.fc1.w"] = rng.normal(0.0, INIT_STD, size=(4 * d, d))
            p[pre + "mlp.fc1.b"] = np.zeros(4 * d)
            p[pre + "mlp.fc2.w"] = rng.normal(0.0, INIT_STD, size=(d, 4 * d))
            p[pre + "mlp.fc2.b"] = np.zeros(d)
        p["ln_f.g"] = np.ones(d)
        p["ln_f.b"] = np.zeros(d)
        p["lm_head"] = rng.normal(0.0, INIT_STD, size=(v, d))
        self.params = p
        self.frozen = False
        self.adapters: dict[tuple[int, str], RoutedLora] = {}
        self.adapter_targets: tuple[str, ...] = ()
        self.group_routers: list[GroupRouter] | None = None
        self.reconstructors: list[Reconstructor] | None = None
        self.value_groups: int | None = None
        self.value_keep: int | None = None

    # -- attachments --------------------------------------------------

    def attach_adapters(
        self,
        subspaces: int,
        active: int,
        rank: int,
        alpha: float,
        dropout: float,
        targets: tuple[str, ...] = ("wq", "wv"),
        seed: int = 0,
    ) -> None:
        for t in targets:
            if t not in ADAPTER_TARGETS:
                raise ConfigError(f"unknown adapter target {t!r}; choose from {ADAPTER_TARGETS}")
        rng = np.random.default_rng([seed, _SEED_TAG_LORA])
        d = self.config.d_model
        self.adapters = {}
        self.adapter_targets = tuple(targets)
        for i in range(self.config.n_layers):
            for t in targets:
                self.adapters[(i, t)] = RoutedLora(
                    d, d, subspaces, active, rank, alpha, dropout, rng
                )
        self._adapter_meta = {
            "subspaces": subspaces,
            "active": active,
            "rank": rank,
            "alpha": alpha,
            "dropout": dropout,
            "targets": list(targets),
        }

    def attach_value_routing(self, groups: int, keep: int, hidden: int | None = None, seed: int = 0) -> None:
        if self.config.d_head % groups != 0:
            raise ConfigError(f"groups {groups} must divide d_head {self.config.d_head}")
        if not 1 <= keep <= groups:
            raise ConfigError(f"keep={keep} out of range for {groups} groups")
        hidden = 2 * self.config.d_head if hidden is None else hidden
        rng = np.random.default_rng([seed, _SEED_TAG_KV])
        self.group_routers = [
            GroupRouter(self.config.d_model, groups, rng) for _ in range(self.config.n_layers)
        ]
        self.reconstructors = [
            Reconstructor(self.config.d_head, groups, hidden, rng)
            for _ in range(self.config.n_layers)
        ]
        self.value_groups = groups
        self.value_keep = keep
        self._kv_meta = {"groups": groups, "keep": keep, "hidden": hidden}

    # -- parameter plumbing -------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter array, keyed by family-prefixed name."""
        out = {f"base.{name}": arr for name, arr in self.params.items()}
        for (i, t), lora in self.adapters.items():
            for name, arr in lora.arrays().items():
                out[f"lora.{i}.{t}.{name}"] = arr
        if self.group_routers is not None:
            for i, router in enumerate(self.group_routers):
                for name, arr in router.arrays().items():
                    out[f"kv.{i}.{name}"] = arr
            for i, recon in enumerate(self.reconstructors):
                for name, arr in recon.arrays().items():
                    out[f"kv.{i}.{name}"] = arr
        return out

    def trainable_names(self, mode: str) -> list[str]:
        if mode == "baseline":
            return [k for k in self.named_arrays() if k.startswith("base.")]
        if mode == "qi_routed":
            return [k for k in self.named_arrays() if not k.startswith("base.")]
        raise ConfigError(f"no training story for mode {mode!r}")

    def base_checksum(self) -> str:
        """SHA-256 over the exact bytes of the frozen trunk, order-stable."""
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].tobytes())
        return digest.hexdigest()

    def config_record(self) -> dict:
        record: dict = {"model": self.config.to_dict()}
        record["adapters"] = getattr(self, "_adapter_meta", None)
        record["value_routing"] = getattr(self, "_kv_meta", None)
        return record

    # -- forward -------------------------------------------------------

    def forward(
        self,
        tokens: np.ndarray,
        mode: str = "baseline",
        *,
        selector=None,
        budget: BudgetSpec | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        want_cache: bool = False,
        want_snapshot: bool = False,
        want_probe: bool = False,
        capture_split: bool = False,
        probe_layer: int | None = None,
    ) -> ForwardResult:
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (batch, time), got shape {tokens.shape}")
        b, t = tokens.shape
        if t > cfg.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq {cfg.max_seq}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
        qi = mode == "qi_routed"
        qa = mode == "qa_compressed"
        if qi and self.group_routers is None:
            raise ConfigError("qi_routed requires attach_value_routing")
        if qa and selector is None:
            raise ConfigError("qa_compressed requires a selection source")
        if (qa or want_probe or want_snapshot or capture_split) and b != 1:
            raise ValueError("per-sequence capture runs one sequence at a time")

        split = cfg.effective_split()  # 1-indexed first compressed layer
        first_comp = split - 1
        probe_idx = probe_layer if probe_layer is not None else split - 2
        need_probe = want_probe or qa or capture_split
        if need_probe and probe_layer is not None and not 0 <= probe_idx < cfg.n_layers:
            raise ConfigError(f"probe layer {probe_idx} outside 0..{cfg.n_layers - 1}")
        if qa and probe_idx >= first_comp and probe_layer is not None:
            raise ConfigError("probe layer must come before the first compressed layer")

        n_ctx = n_query = None
        if qa:
            if budget is not None:
                n_ctx, n_query = budget.n_context, budget.n_query
            elif isinstance(selector, FixedSelection):
                n_ctx, n_query = selector.regions()
            else:
                raise ConfigError("qa_compressed needs a budget spec")
            if n_ctx + n_query != t:
                raise ConfigError(
                    f"budget regions ({n_ctx} + {n_query}) do not cover sequence length {t}"
                )
            context_idx = np.arange(n_ctx)
            query_idx = np.arange(n_ctx, t)

        d, h_heads, dh = cfg.d_model, cfg.n_heads, cfg.d_head
        scale = 1.0 / math.sqrt(dh)
        causal = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, _NEG_BIG)

        hidden = self.params["tok_emb"][tokens] + self.params["pos_emb"][:t][None]
        caches: list[dict] = []
        probe_attention = None
        split_hidden = split_values = None
        selection: Selection | None = None
        qa_bias = None
        qa_dim_mask = None
        snap_keys: list[np.ndarray] = []
        snap_values: list[np.ndarray] = []

        for i in range(cfg.n_layers):
            p = self.params
            pre = f"blocks.{i}."
            x, ln1_cache = _layernorm_fwd(hidden, p[pre + "ln1.g"], p[pre + "ln1.b"])
            x_flat = x.reshape(b * t, d)

            layer_cache: dict = {"ln1": ln1_cache, "x_flat": x_flat} if want_cache else {}

            def project(name: str) -> np.ndarray:
                w = p[pre + "attn." + name]
                adapter = self.adapters.get((i, name)) if qi else None
                if adapter is None:
                    out = x_flat @ w.T
                else:
                    out, lcache = adapter.forward(x_flat, w, train=train, rng=rng)
                    if want_cache:
                        layer_cache["lora_" + name] = lcache
                return out.reshape(b, t, h_heads, dh)

            q = project("wq")
            k = project("wk")
            v = project("wv")

            if capture_split and i == first_comp:
                split_hidden = hidden[0].copy()
                split_values = v[0].copy()

            vt = v
            group_cache = None
            if qi:
                router = self.group_routers[i]
                recon = self.reconstructors[i]
                s_groups, keep = self.value_groups, self.value_keep
                g_scores = router.scores(x)  # (b, t, S)
                g_probs = softmax_fwd(g_scores)
                if keep < s_groups:
                    flat_scores = g_scores.reshape(b * t, s_groups)
                    order = np.argsort(-flat_scores, axis=1, kind="stable")[:, :keep]
                    keepmask = np.zeros((b * t, s_groups))
                    np.put_along_axis(keepmask, order, 1.0, axis=1)
                    rows = np.repeat(keepmask, h_heads, axis=0)  # (b*t*H, S), token-major
                    dim_mask = np.repeat(rows, dh // s_groups, axis=1)
                    v_rows = v.reshape(b * t * h_heads, dh)
                    v_masked = v_rows * dim_mask
                    v_hat, rcache = recon.forward(v_masked, rows)
                    vt_rows = v_masked + (1.0 - dim_mask) * v_hat
                    vt = vt_rows.reshape(b, t, h_heads, dh)
                    group_cache = {
                        "bypass": False,
                        "scores": g_scores,
                        "probs": g_probs,
                        "keepmask": keepmask,
                        "rows": rows,
                        "dim_mask": dim_mask,
                        "v_rows": v_rows,
                        "v_hat": v_hat,
                        "rcache": rcache,
                    }
                else:
                    group_cache = {"bypass": True, "scores": g_scores, "probs": g_probs}
                if want_cache:
                    layer_cache["group"] = group_cache

            bias = causal
            if qa and i >= first_comp:
                if i == first_comp:
                    ctx = SelectionContext(
                        spec=budget,
                        context_idx=context_idx,
                        query_idx=query_idx,
                        probe_attention=probe_attention,
                        split_hidden=hidden[0].copy(),
                        split_values=v[0].copy(),
                    )
                    selection = selector.select(ctx)
                    if selection.mask.n_context != n_ctx or selection.mask.n_query != n_query:
                        raise ConfigError("selection mask does not match the budget regions")
                    qa_dim_mask = selection.mask.dim_mask(dh)  # (t, dh)
                    evicted = np.setdiff1d(context_idx, selection.kept_tokens)
                    if evicted.size:
                        evict_bias = np.zeros((t, t))
                        evict_bias[:, evicted] = _NEG_BIG
                        np.fill_diagonal(evict_bias, 0.0)  # a token always sees itself
                        qa_bias = causal + evict_bias
                    else:
                        qa_bias = causal
                vt = v * qa_dim_mask[None, :, None, :]
                bias = qa_bias

            att_logits = np.einsum("bihd,bjhd->bhij", q, k) * scale + bias[None, None]
            att = softmax_fwd(att_logits)
            if i == probe_idx and need_probe and 0 <= probe_idx < cfg.n_layers:
                probe_attention = att[0].mean(axis=0)
            ctx_v = np.einsum("bhij,bjhd->bihd", att, vt)
            merged = ctx_v.reshape(b, t, d)
            merged_flat = merged.reshape(b * t, d)

            wo = p[pre + "attn.wo"]
            adapter_o = self.adapters.get((i, "wo")) if qi else None
            if adapter_o is None:
                attn_out = (merged_flat @ wo.T).reshape(b, t, d)
            else:
                out_flat, ocache = adapter_o.forward(merged_flat, wo, train=train, rng=rng)
                attn_out = out_flat.reshape(b, t, d)
                if want_cache:
                    layer_cache["lora_wo"] = ocache
            h_mid = hidden + attn_out

            y2, ln2_cache = _layernorm_fwd(h_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
            m1 = y2 @ p[pre + "mlp.fc1.w"].T + p[pre + "mlp.fc1.b"]
            a1 = gelu_fwd(m1)
            m2 = a1 @ p[pre + "mlp.fc2.w"].T + p[pre + "mlp.fc2.b"]
            hidden_next = h_mid + m2

            if want_snapshot:
                snap_keys.append(k[0].copy())
                snap_values.append(vt[0].copy())
            if want_cache:
                layer_cache.update(
                    {
                        "q": q,
                        "k": k,
                        "v": v,
                        "vt": vt,
                        "att": att,
                        "merged_flat": merged_flat,
                        "ln2": ln2_cache,
                        "y2": y2,
                        "m1": m1,
                        "a1": a1,
                    }
                )
                caches.append(layer_cache)
            hidden = hidden_next

        hf, lnf_cache = _layernorm_fwd(hidden, self.params["ln_f.g"], self.params["ln_f.b"])
        logits = hf @ self.params["lm_head"].T

        cache = None
        if want_cache:
            cache = {
                "tokens": tokens,
                "mode": mode,
                "layers": caches,
                "ln_f": lnf_cache,
                "hf": hf,
                "shape": (b, t),
            }
        snapshot = None
        if want_snapshot:
            retention = self._retention(mode, t, budget, selection)
            snapshot = KVSnapshot(keys=snap_keys, values=snap_values, retention=retention)
        return ForwardResult(
            logits=logits,
            cache=cache,
            snapshot=snapshot,
            probe_attention=probe_attention,
            selection=selection,
            split_hidden=split_hidden,
            split_values=split_values,
        )

    def _retention(
        self,
        mode: str,
        t: int,
        budget: BudgetSpec | None,
        selection: Selection | None,
    ) -> RetentionInfo:
        if mode == "baseline":
            return RetentionInfo.uncompressed(t)
        if mode == "qi_routed":
            rho = self.value_keep / self.value_groups
            total = (1.0 + rho) / 2.0
            return RetentionInfo(
                tokens_kept=1.0,
                rho=rho,
                total_kv=total,
                total_kv_formula=total,
                n_context=t,
                n_query=0,
                n_surviving=t,
                pairs_kept=t * self.value_keep,
                n_compressed_layers=self.config.n_layers,
            )
        mask = selection.mask
        n_ctx = mask.n_context
        surv = int(selection.kept_tokens.size)
        pairs = mask.kept_pairs
        s_groups = mask.n_groups
        realized_total = (surv + pairs / s_groups) / (2.0 * n_ctx)
        formula = kv_retention_fraction(budget) if budget is not None else realized_total
        return RetentionInfo(
            tokens_kept=surv / n_ctx,
            rho=pairs / (surv * s_groups) if surv else 0.0,
            total_kv=realized_total,
            total_kv_formula=formula,
            n_context=n_ctx,
            n_query=mask.n_query,
            n_surviving=surv,
            pairs_kept=pairs,
            n_compressed_layers=self.config.n_layers - (self.config.effective_split() - 1),
        )

    # -- backward ------------------------------------------------------

    def backward(
        self,
        dlogits: np.ndarray,
        cache: dict,
        grads: dict,
        train_base: bool = False,
    ) -> None:
        """Accumulate parameter gradients for a cached forward pass.

        Supports the two training modes.  Adapter and routing parameters
        accumulate whenever present; the frozen trunk accumulates only when
        ``train_base`` is set.  Reconstructor parameters never accumulate
        here: the language-model objective reaches them only as a function
        of their input (see training.loss_aux for their own updates).
        """
        mode = cache["mode"]
        if mode == "qa_compressed":
            raise ConfigError("qa_compressed is inference-only; nothing to train")
        b, t = cache["shape"]
        p = self.params
        d, h_heads, dh = self.config.d_model, self.config.n_heads, self.config.d_head
        scale = 1.0 / math.sqrt(dh)
        qi = mode == "qi_routed"

        dlogits = np.asarray(dlogits)
        flat_dlogits = dlogits.reshape(b * t, -1)
        hf_flat = cache["hf"].reshape(b * t, d)
        if train_base:
            _accum(grads, "base.lm_head", flat_dlogits.T @ hf_flat)
        dhf = (flat_dlogits @ p["lm_head"]).reshape(b, t, d)
        dhidden, dg, db = _layernorm_bwd(dhf, cache["ln_f"])
        if train_base:
            _accum(grads, "base.ln_f.g", dg)
            _accum(grads, "base.ln_f.b", db)

        for i in reversed(range(self.config.n_layers)):
            pre = f"blocks.{i}."
            lc = cache["layers"][i]

            # MLP block
            dm2 = dhidden
            dm2_flat = dm2.reshape(b * t, d)
            if train_base:
                _accum(grads, "base." + pre + "mlp.fc2.w", dm2_flat.T @ lc["a1"].reshape(b * t, -1))
                _accum(grads, "base." + pre + "mlp.fc2.b", dm2_flat.sum(axis=0))
            da1 = dm2 @ p[pre + "mlp.fc2.w"]
            dm1 = gelu_bwd(da1, lc["m1"])
            dm1_flat = dm1.reshape(b * t, -1)
            if train_base:
                _accum(grads, "base." + pre + "mlp.fc1.w", dm1_flat.T @ lc["y2"].reshape(b * t, d))
                _accum(grads, "base." + pre + "mlp.fc1.b", dm1_flat.sum(axis=0))
            dy2 = dm1 @ p[pre + "mlp.fc1.w"]
            dh_mid_ln, dg, db = _layernorm_bwd(dy2, lc["ln2"])
            if train_base:
                _accum(grads, "base." + pre + "ln2.g", dg)
                _accum(grads, "base." + pre + "ln2.b", db)
            dh_mid = dhidden + dh_mid_ln

            # output projection
            d_attn_out = dh_mid.reshape(b * t, d)
            wo = p[pre + "attn.wo"]
            adapter_o = self.adapters.get((i, "wo")) if qi else None
            if adapter_o is None:
                d_merged_flat = d_attn_out @ wo
                if train_base:
                    _accum(grads, "base." + pre + "attn.wo", d_attn_out.T @ lc["merged_flat"])
            else:
                d_merged_flat = adapter_o.backward(
                    d_attn_out, lc["lora_wo"], grads, f"lora.{i}.wo"
                )
            dctx_v = d_merged_flat.reshape(b, t, h_heads, dh)

            # attention core
            att, vt = lc["att"], lc["vt"]
            d_att = np.einsum("bihd,bjhd->bhij", dctx_v, vt)
            dvt = np.einsum("bhij,bihd->bjhd", att, dctx_v)
            d_att_logits = softmax_bwd(d_att, att)
            dq = np.einsum("bhij,bjhd->bihd", d_att_logits, lc["k"]) * scale
            dk = np.einsum("bhij,bihd->bjhd", d_att_logits, lc["q"]) * scale

            # value routing
            gc = lc.get("group")
            if gc is not None and not gc["bypass"]:
                dvt_rows = dvt.reshape(b * t * h_heads, dh)
                dim_mask = gc["dim_mask"]
                d_vhat = dvt_rows * (1.0 - dim_mask)
                dinp = self.reconstructors[i].backward(d_vhat, gc["rcache"], grads=None)
                dv_rows = dim_mask * (dvt_rows + dinp[:, :dh])
                dv = dv_rows.reshape(b, t, h_heads, dh)
            else:
                dv = dvt

            # input projections
            dx_flat = np.zeros((b * t, d))
            for name, dgrad in (("wq", dq), ("wk", dk), ("wv", dv)):
                dflat = dgrad.reshape(b * t, d)
                w = p[pre + "attn." + name]
                adapter = self.adapters.get((i, name)) if qi else None
                if adapter is None:
                    dx_flat += dflat @ w
                    if train_base:
                        _accum(grads, "base." + pre + "attn." + name, dflat.T @ lc["x_flat"])
                else:
                    dx_flat += adapter.backward(dflat, lc["lora_" + name], grads, f"lora.{i}.{name}")
            dx = dx_flat.reshape(b, t, d)
            dh_ln, dg, db = _layernorm_bwd(dx, lc["ln1"])
            if train_base:
                _accum(grads, "base." + pre + "ln1.g", dg)
                _accum(grads, "base." + pre + "ln1.b", db)
            dhidden = dh_mid + dh_ln

        if train_base:
            tokens = cache["tokens"]
            d_tok = np.zeros_like(p["tok_emb"])
            np.add.at(d_tok, tokens, dhidden)
            _accum(grads, "base.tok_emb", d_tok)
            d_pos = np.zeros_like(p["pos_emb"])
            d_pos[:t] = dhidden.sum(axis=0)
            _accum(grads, "base.pos_emb", d_pos)

    # -- public single-sequence entry points ---------------------------

    def forward_lm(
        self,
        tokens: np.ndarray,
        mode: str = "baseline",
        *,
        selector=None,
        budget: BudgetSpec | None = None,
    ) -> tuple[np.ndarray, KVSnapshot]:
        """Logits and KV snapshot for one token id sequence."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 1:
            raise ValueError(f"forward_lm expects a 1-d id sequence, got {tokens.shape}")
        res = self.forward(
            tokens[None],
            mode,
            selector=selector,
            budget=budget,
            want_snapshot=True,
        )
        return res.logits[0], res.snapshot

    def collect_attention_mass(self, tokens: np.ndarray, probe_layer: int) -> np.ndarray:
        """Head-averaged (T, T) attention matrix at a 0-indexed probe layer."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 1:
            raise ValueError("collect_attention_mass expects a 1-d id sequence")
        if not 0 <= probe_layer < self.config.n_layers:
            raise ConfigError(f"probe layer {probe_layer} outside 0..{self.config.n_layers - 1}")
        res = self.forward(tokens[None], "baseline", want_probe=True, probe_layer=probe_layer)
        return res.probe_attention

    def greedy_decode(self, prefix: np.ndarray, n_new: int) -> np.ndarray:
        """Greedy continuation used by smoke tests; recomputes each step."""
        seq = list(np.asarray(prefix).tolist())
        for _ in range(n_new):
            if len(seq) >= self.config.max_seq:
                break
            logits = self.forward(np.asarray(seq)[None], "baseline").logits[0]
            seq.append(int(np.argmax(logits[-1])))
        return np.asarray(seq, dtype=np.int64)
