"""Model-quality evaluations: agreement sweeps, mask overlap, diagnostics.

Everything here treats the model as read-only and runs one sequence at a
time, so results are independent of batching and iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError
from .model import TransformerModel
from .qa_selector import (
    DiagnosticSelector,
    PredictorSelector,
    SelectionContext,
    fixed_k_mask,
    mask_overlap,
)
from .value_groups import BudgetSpec


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """Row-wise KL(P || Q) between softmax distributions of two logit sets."""
    lp = _log_softmax(p_logits)
    lq = _log_softmax(q_logits)
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


@dataclass
class AgreementRecord:
    """Baseline-vs-compressed comparison for one sequence."""

    agreement: float  # greedy match rate over query positions
    mean_kl: float
    final_kl: float
    kept_score_total: float
    fixed_k_total: float | None  # None when rho*S is fractional
    total_kv: float


def qa_agreement(
    model: TransformerModel,
    tokens: np.ndarray,
    spec: BudgetSpec,
    selector=None,
) -> AgreementRecord:
    """Compare qa_compressed logits with the uncompressed baseline.

    Greedy agreement and KL are measured on the query region, where the
    two modes can differ (context rows see the same uncompressed prefix
    below the split in both modes but compressed values above it).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or len(tokens) != spec.n_tokens:
        raise ConfigError(
            f"sequence of shape {tokens.shape} does not match spec regions ({spec.n_tokens})"
        )
    selector = selector if selector is not None else DiagnosticSelector()
    base = model.forward(tokens[None], "baseline")
    comp = model.forward(
        tokens[None], "qa_compressed", selector=selector, budget=spec, want_snapshot=True
    )
    qrows = slice(spec.n_context, spec.n_tokens)
    base_logits = base.logits[0][qrows]
    comp_logits = comp.logits[0][qrows]
    agreement = float(
        np.mean(np.argmax(base_logits, axis=1) == np.argmax(comp_logits, axis=1))
    )
    kls = kl_divergence(base_logits, comp_logits)

    sel = comp.selection
    ctx_mask = sel.mask.m[: spec.n_context].astype(float)
    kept_total = float(np.sum(sel.scores * ctx_mask))
    fixed_total = None
    k_exact = spec.rho * spec.groups
    if abs(k_exact - round(k_exact)) < 1e-9 and 1 <= round(k_exact) <= spec.groups:
        fk = fixed_k_mask(sel.scores, int(round(k_exact)), spec)
        fixed_total = float(np.sum(sel.scores * fk.m[: spec.n_context]))
    return AgreementRecord(
        agreement=agreement,
        mean_kl=float(kls.mean()),
        final_kl=float(kls[-1]),
        kept_score_total=kept_total,
        fixed_k_total=fixed_total,
        total_kv=comp.snapshot.retention.total_kv_formula,
    )


def qa_budget_sweep(
    model: TransformerModel,
    sequence_sets: list[np.ndarray],
    rhos: tuple[float, ...],
    groups: int,
    token_keep: float = 1.0,
    query_region: int = 16,
    selector=None,
) -> dict:
    """Median-over-seeds agreement at each retention level.

    ``sequence_sets`` holds one (count, T) array per seed; the median over
    seeds of the per-seed mean agreement is reported per rho.
    """
    per_rho: dict[float, dict] = {}
    for rho in rhos:
        seed_means = []
        kl_means = []
        kept_totals: list[float] = []
        fixed_totals: list[float] = []
        total_kv = None
        for seqs in sequence_sets:
            records = []
            for seq in np.asarray(seqs):
                spec = BudgetSpec(
                    rho=rho,
                    groups=groups,
                    token_keep=token_keep,
                    n_context=len(seq) - query_region,
                    n_query=query_region,
                )
                records.append(qa_agreement(model, seq, spec, selector=selector))
            seed_means.append(float(np.mean([r.agreement for r in records])))
            kl_means.append(float(np.mean([r.mean_kl for r in records])))
            kept_totals.extend(r.kept_score_total for r in records)
            fixed_totals.extend(
                r.fixed_k_total for r in records if r.fixed_k_total is not None
            )
            total_kv = records[-1].total_kv
        per_rho[rho] = {
            "median_agreement": float(np.median(seed_means)),
            "per_seed_agreement": seed_means,
            "median_mean_kl": float(np.median(kl_means)),
            "mean_kept_score_total": float(np.mean(kept_totals)),
            "mean_fixed_k_total": float(np.mean(fixed_totals)) if fixed_totals else None,
            "total_kv": total_kv,
        }
    return per_rho


def predictor_mask_overlap(
    model: TransformerModel,
    score_pred,
    token_pred,
    sequences: np.ndarray,
    rho: float,
    groups: int,
    token_keep: float = 1.0,
    query_region: int = 16,
) -> dict:
    """Mean overlap between predictor and diagnostic-oracle pair masks.

    Overlap is |intersection| / M, whose expectation for an M-pair random
    mask is exactly rho (at token_keep=1), the chance baseline reported
    alongside.
    """
    oracle = DiagnosticSelector()
    learned = PredictorSelector(score_pred, token_pred)
    overlaps = []
    for seq in np.asarray(sequences):
        spec = BudgetSpec(
            rho=rho,
            groups=groups,
            token_keep=token_keep,
            n_context=len(seq) - query_region,
            n_query=query_region,
        )
        res = model.forward(
            seq[None],
            "baseline",
            want_probe=True,
            capture_split=True,
        )
        ctx = SelectionContext(
            spec=spec,
            context_idx=np.arange(spec.n_context),
            query_idx=np.arange(spec.n_context, spec.n_tokens),
            probe_attention=res.probe_attention,
            split_hidden=res.split_hidden,
            split_values=res.split_values,
        )
        sel_oracle = oracle.select(ctx)
        sel_learned = learned.select(ctx)
        overlaps.append(mask_overlap(sel_learned.mask, sel_oracle.mask))
    return {
        "mean_overlap": float(np.mean(overlaps)),
        "chance_overlap": rho * token_keep,
        "n_sequences": len(overlaps),
    }


@dataclass
class DiagnosticsResult:
    rows: list[dict]  # one per (sequence, context token)
    mean_k: float
    k_histogram: dict[int, int]
    spearman_alpha_k: float
    distinct_k: int
    degenerate: bool


def run_diagnostics(
    model: TransformerModel,
    sequences: np.ndarray,
    rho: float,
    groups: int,
    query_region: int = 16,
) -> DiagnosticsResult:
    """Per-token group-retention profile under the query-aware selector.

    For each context token: its received-attention relevance alpha and the
    number of value groups the global top-M selection kept for it.  The
    summary reports the K histogram and the alpha-K Spearman correlation.
    A degenerate score distribution (every pair score identical, so the
    selection is pure tie-breaking) is flagged rather than an error.
    """
    selector = DiagnosticSelector()
    rows: list[dict] = []
    alphas: list[np.ndarray] = []
    ks: list[np.ndarray] = []
    degenerate = False
    for seq_i, seq in enumerate(np.asarray(sequences)):
        spec = BudgetSpec(
            rho=rho,
            groups=groups,
            token_keep=1.0,
            n_context=len(seq) - query_region,
            n_query=query_region,
        )
        res = model.forward(
            seq[None], "qa_compressed", selector=selector, budget=spec
        )
        sel = res.selection
        k_j = sel.mask.k_per_token[: spec.n_context]
        if np.unique(sel.scores).size == 1:
            degenerate = True
        for j in range(spec.n_context):
            row = {
                "sequence": seq_i,
                "token_index": j,
                "alpha": float(sel.alpha[j]),
                "k_j": int(k_j[j]),
            }
            for g in range(groups):
                row[f"score_g{g}"] = float(sel.scores[j, g])
                row[f"mask_g{g}"] = int(sel.mask.m[j, g])
            rows.append(row)
        alphas.append(sel.alpha)
        ks.append(k_j)
    alpha_all = np.concatenate(alphas)
    k_all = np.concatenate(ks)
    hist = {int(k): int(n) for k, n in zip(*np.unique(k_all, return_counts=True))}
    if np.unique(k_all).size > 1 and np.unique(alpha_all).size > 1:
        corr = float(spearmanr(alpha_all, k_all).statistic)
    else:
        corr = 0.0
        degenerate = True
    return DiagnosticsResult(
        rows=rows,
        mean_k=float(k_all.mean()),
        k_histogram=hist,
        spearman_alpha_k=corr,
        distinct_k=int(np.unique(k_all).size),
        degenerate=degenerate,
    )


def collect_sequences(corpus, split: str, count: int, seed: int) -> np.ndarray:
    """Token id matrix (count, T) of next-token inputs from the corpus."""
    return corpus.sample_sequences(split, count, seed)
