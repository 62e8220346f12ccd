"""Acceptance suite: ten end-to-end checks, one test per criterion.

The expensive artifacts (toy corpus, 600-step pretrained base, the two
adapter runs, trained predictors) are built once as module fixtures and
shared across criteria.  Each test prints a single summary line with the
measured values next to its thresholds.
"""

import time

import numpy as np
import pytest

from subtoken_kv.checkpoint import load_model, save_model
from subtoken_kv.data import CorpusStream, write_synthetic_corpus
from subtoken_kv.evaluation import (
    collect_sequences,
    predictor_mask_overlap,
    qa_budget_sweep,
    run_diagnostics,
)
from subtoken_kv.gradcheck import run_gradcheck_suite
from subtoken_kv.model import ModelConfig, TransformerModel
from subtoken_kv.qa_selector import (
    DiagnosticSelector,
    ScorePredictor,
    TokenPredictor,
    combined_selection,
    fixed_k_mask,
    global_topm_mask,
    token_keep_set,
)
from subtoken_kv.training import (
    MetricsWriter,
    TrainConfig,
    collect_predictor_targets,
    pretrain_base,
    train_predictors,
    train_qi,
)
from subtoken_kv.value_groups import (
    BudgetSpec,
    GroupRouter,
    kv_retention_fraction,
    select_keep_groups,
)

# One toy-scale recipe serves every trained-model criterion.  The adapter
# pair differs only in how the same low-rank budget is laid out: one dense
# rank-16 update versus four routed rank-4 subspaces (equal parameter count,
# equal alpha/rank scaling), trained with identical schedules on the same
# frozen base.
CORPUS_BYTES = 262144
SEQ_LEN = 96
BASE_STEPS = 600
ADAPTER_STEPS = 600
ADAPTER_LR = 5e-3
GROUPS = 4
QUERY_REGION = 16


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def timings():
    return {}


@pytest.fixture(scope="module")
def corpus(workdir):
    path = workdir / "corpus.txt"
    write_synthetic_corpus(path, CORPUS_BYTES, seed=0)
    return CorpusStream(path, seq_len=SEQ_LEN, seed=0)


@pytest.fixture(scope="module")
def base_run(workdir, corpus, timings):
    t0 = time.monotonic()
    model = TransformerModel(ModelConfig(), seed=0)
    cfg = TrainConfig(
        total_steps=BASE_STEPS, warmup_steps=30, eval_every=200,
        batch_size=8, seq_len=SEQ_LEN, seed=0, val_sequences=16,
    )
    summary = pretrain_base(model, corpus, cfg)
    timings["base"] = time.monotonic() - t0
    ckpt = workdir / "base.ckpt"
    save_model(ckpt, model)
    return {"model": model, "summary": summary, "ckpt": ckpt}


def _adapter_run(base_ckpt, corpus, subspaces, active, rank, alpha, keep):
    model = load_model(base_ckpt)
    model.attach_adapters(
        subspaces=subspaces, active=active, rank=rank, alpha=alpha,
        dropout=0.05, targets=("wq", "wk", "wv", "wo"), seed=0,
    )
    model.attach_value_routing(groups=GROUPS, keep=keep, seed=0)
    cfg = TrainConfig(
        total_steps=ADAPTER_STEPS, warmup_steps=20, eval_every=200,
        batch_size=8, seq_len=SEQ_LEN, seed=0, val_sequences=16, lr=ADAPTER_LR,
    )
    summary = train_qi(model, corpus, cfg)
    return {"model": model, "summary": summary}


@pytest.fixture(scope="module")
def plain_run(base_run, corpus, timings):
    t0 = time.monotonic()
    run = _adapter_run(base_run["ckpt"], corpus, subspaces=1, active=1, rank=16, alpha=32.0, keep=GROUPS)
    timings["plain"] = time.monotonic() - t0
    return run


@pytest.fixture(scope="module")
def qi_run(base_run, corpus, timings):
    t0 = time.monotonic()
    run = _adapter_run(base_run["ckpt"], corpus, subspaces=4, active=2, rank=4, alpha=8.0, keep=2)
    timings["qi"] = time.monotonic() - t0
    return run


@pytest.fixture(scope="module")
def predictor_run(base_run, corpus):
    model = base_run["model"]
    train_seqs = collect_sequences(corpus, "train", 60, seed=11)
    dataset = collect_predictor_targets(model, train_seqs, n_groups=GROUPS, query_region=QUERY_REGION)
    rng = np.random.default_rng([0, 7])
    score_pred = ScorePredictor(model.config.d_model, GROUPS, rng)
    token_pred = TokenPredictor(model.config.d_model, rng)
    summary = train_predictors(score_pred, token_pred, dataset, TrainConfig(seed=0, pred_epochs=40))
    return {"score_pred": score_pred, "token_pred": token_pred, "summary": summary}


def test_criterion_01_retention_table() -> None:
    t0 = time.monotonic()
    table = {
        (1.0, 0.25): 0.625,
        (1.0, 0.5): 0.75,
        (0.75, 0.75): 0.656,
        (0.75, 0.5): 0.562,
        (0.5, 0.5): 0.375,
        (1.0, 1.0): 1.0,
    }
    got = {
        (tk, rho): round(
            kv_retention_fraction(
                BudgetSpec(rho=rho, groups=4, token_keep=tk, n_context=16, n_query=4)
            ),
            3,
        )
        for tk, rho in table
    }
    elapsed = time.monotonic() - t0
    assert got == table
    assert elapsed < 1.0
    print(f"criterion 1 PASS: all 6 retention values exact to 3 decimals in {elapsed:.3f}s")


def test_criterion_02_identity_at_full_budget() -> None:
    rng = np.random.default_rng(42)
    model_qa = TransformerModel(ModelConfig(), seed=1)
    model_qi = TransformerModel(ModelConfig(), seed=1)
    model_qi.attach_adapters(
        subspaces=4, active=2, rank=4, alpha=8.0, dropout=0.0,
        targets=("wq", "wk", "wv", "wo"), seed=1,
    )
    model_qi.attach_value_routing(groups=GROUPS, keep=GROUPS, seed=1)
    spec = BudgetSpec(rho=1.0, groups=GROUPS, token_keep=1.0, n_context=32, n_query=16)
    worst_qa = worst_qi = 0.0
    for _ in range(50):
        tokens = rng.integers(0, 258, size=(1, 48))
        base = model_qa.forward(tokens, "baseline").logits
        qa = model_qa.forward(tokens, "qa_compressed", selector=DiagnosticSelector(), budget=spec).logits
        qi = model_qi.forward(tokens, "qi_routed").logits
        worst_qa = max(worst_qa, float(np.max(np.abs(qa - base))))
        worst_qi = max(worst_qi, float(np.max(np.abs(qi - base))))
    assert worst_qa <= 1e-9
    assert worst_qi <= 1e-9
    print(f"criterion 2 PASS: 50 sequences, max |delta logits| qa {worst_qa:.2e}, qi {worst_qi:.2e} (<= 1e-9)")


def _oracle_pair_mask(scores: np.ndarray, budget: int) -> np.ndarray:
    c, s = scores.shape
    ranked = sorted(((-scores[j, g], j, g) for j in range(c) for g in range(s)))
    mask = np.zeros((c, s), dtype=np.uint8)
    for _, j, g in ranked[:budget]:
        mask[j, g] = 1
    return mask


def test_criterion_03_selection_oracles() -> None:
    rng = np.random.default_rng(7)
    s = 4
    for trial in range(1000):
        c = int(rng.integers(1, 33))
        scores = rng.normal(size=(c, s))
        if trial % 3 == 0:
            scores = np.round(scores, 1)  # force score ties
        alpha = np.round(rng.normal(size=c), 1 if trial % 2 else 8)
        rho = float(rng.uniform(0.05, 1.0))
        token_keep = float(rng.uniform(0.05, 1.0))

        spec = BudgetSpec(rho=rho, groups=s, token_keep=1.0, n_context=c, n_query=2)
        mask = global_topm_mask(scores, spec)
        assert np.array_equal(mask.m[:c], _oracle_pair_mask(scores, spec.pair_budget))
        assert int(mask.k_per_token[:c].sum()) == spec.pair_budget  # sum K_j = M

        router = GroupRouter(6, s, rng)
        x = rng.normal(size=6)
        keep = int(rng.integers(1, s + 1))
        want = sorted(sorted(range(s), key=lambda g: (-router.scores(x[None])[0][g], g))[:keep])
        assert list(select_keep_groups(x, router, keep)) == want

        kept = token_keep_set(alpha, token_keep)
        n_keep = int(np.floor(token_keep * c + 1e-9))
        want_kept = sorted(sorted(range(c), key=lambda j: (-alpha[j], j))[:n_keep])
        assert list(kept) == want_kept

        spec2 = BudgetSpec(rho=rho, groups=s, token_keep=token_keep, n_context=c, n_query=2)
        sel = combined_selection(alpha, scores, spec2)
        assert list(sel.kept_tokens) == want_kept
        survivors = np.array(want_kept, dtype=np.int64)
        budget2 = int(np.floor(rho * len(survivors) * s + 1e-9))
        oracle = np.zeros((c, s), dtype=np.uint8)
        if len(survivors):
            oracle[survivors] = _oracle_pair_mask(scores[survivors], budget2)
        assert np.array_equal(sel.mask.m[:c], oracle)
        assert int(sel.mask.k_per_token[:c].sum()) == budget2
    print("criterion 3 PASS: 1000 instances, all four selection ops match brute-force oracles, exact budgets")


def test_criterion_04_gradient_correctness() -> None:
    t0 = time.monotonic()
    results = run_gradcheck_suite(seed=0)
    elapsed = time.monotonic() - t0
    worst = max(results, key=results.get)
    assert results[worst] < 1e-4
    assert elapsed < 60.0
    print(
        f"criterion 4 PASS: {len(results)} families, max rel err {results[worst]:.2e} "
        f"({worst}) in {elapsed:.1f}s"
    )


def test_criterion_05_kept_score_dominance() -> None:
    rng = np.random.default_rng(11)
    strict = 0
    for _ in range(1000):
        c = int(rng.integers(2, 33))
        k = int(rng.integers(1, 4))
        scores = rng.normal(size=(c, 4))
        spec = BudgetSpec(rho=k / 4, groups=4, token_keep=1.0, n_context=c, n_query=2)
        glob = float(np.sum(scores * global_topm_mask(scores, spec).m[:c]))
        fixed = float(np.sum(scores * fixed_k_mask(scores, k, spec).m[:c]))
        assert glob >= fixed - 1e-12
        strict += glob > fixed + 1e-12
    assert strict > 500
    print(f"criterion 5 PASS: global top-M >= fixed-K on 1000/1000, strictly better on {strict}")


def test_criterion_06_diagnostics_trend(base_run, corpus) -> None:
    seqs = collect_sequences(corpus, "val", 8, seed=3)
    out = run_diagnostics(base_run["model"], seqs, rho=0.25, groups=GROUPS, query_region=QUERY_REGION)
    assert out.mean_k == 1.0  # floor(0.25 * 80 * 4) pairs over 80 tokens
    assert out.distinct_k >= 3
    assert out.spearman_alpha_k > 0.5
    assert not out.degenerate
    print(
        f"criterion 6 PASS: mean K {out.mean_k}, {out.distinct_k} distinct K values, "
        f"Spearman(alpha, K) {out.spearman_alpha_k:.3f} (> 0.5)"
    )


def test_criterion_07_predictor_utility(base_run, corpus, predictor_run) -> None:
    overlap = predictor_mask_overlap(
        base_run["model"],
        predictor_run["score_pred"],
        predictor_run["token_pred"],
        collect_sequences(corpus, "val", 12, seed=13),
        rho=0.5,
        groups=GROUPS,
        query_region=QUERY_REGION,
    )
    threshold = overlap["chance_overlap"] + 0.15
    assert overlap["mean_overlap"] >= threshold
    summary = predictor_run["summary"]
    assert summary["score_loss"] < 1.0  # zero predictor scores exactly 1 on unit-variance targets
    assert summary["token_loss"] < 1.0
    print(
        f"criterion 7 PASS: mask overlap {overlap['mean_overlap']:.3f} >= {threshold:.2f}, "
        f"losses score {summary['score_loss']:.3f} / token {summary['token_loss']:.3f} (< 1.0)"
    )


def test_criterion_08_training_trend(plain_run, qi_run, timings) -> None:
    plain, qi = plain_run["summary"], qi_run["summary"]
    plain_gain = 1.0 - plain["final_val_loss"] / plain["step0_val_loss"]
    qi_gain = 1.0 - qi["final_val_loss"] / qi["step0_val_loss"]
    rel_gap = qi["final_val_loss"] / plain["final_val_loss"] - 1.0
    wall = timings["base"] + timings["plain"] + timings["qi"]
    assert qi["total_kv"] == 0.75
    assert rel_gap <= 0.05
    assert plain_gain >= 0.10
    assert qi_gain >= 0.10
    assert wall <= 1800.0
    print(
        f"criterion 8 PASS: qi {qi['final_val_loss']:.4f} vs plain {plain['final_val_loss']:.4f} "
        f"(gap {100 * rel_gap:+.2f}% <= +5%), gains plain {100 * plain_gain:.1f}% / "
        f"qi {100 * qi_gain:.1f}% (>= 10%), {wall:.0f}s (<= 1800s)"
    )


def test_criterion_09_budget_monotonicity(base_run, corpus) -> None:
    sets = [collect_sequences(corpus, "val", 4, seed=100 + i) for i in range(5)]
    rhos = (0.25, 0.5, 0.75, 1.0)
    sweep = qa_budget_sweep(base_run["model"], sets, rhos, groups=GROUPS, query_region=QUERY_REGION)
    medians = [sweep[r]["median_agreement"] for r in rhos]
    assert all(b >= a for a, b in zip(medians, medians[1:]))
    assert medians[-1] == 1.0  # identity endpoint
    print(
        "criterion 9 PASS: median agreement "
        + " <= ".join(f"{m:.4f}" for m in medians)
        + " over rho " + str(list(rhos))
    )


def test_criterion_10_engineering_contracts(workdir, corpus, base_run, plain_run, qi_run) -> None:
    base_sum = base_run["model"].base_checksum()
    assert plain_run["model"].base_checksum() == base_sum
    assert qi_run["model"].base_checksum() == base_sum
    assert plain_run["summary"]["base_checksum"] == base_sum
    assert qi_run["summary"]["base_checksum"] == base_sum

    first = base_run["ckpt"].read_bytes()
    reload_path = workdir / "base_reload.ckpt"
    save_model(reload_path, load_model(base_run["ckpt"]))
    assert reload_path.read_bytes() == first
    qi_path = workdir / "qi.ckpt"
    save_model(qi_path, qi_run["model"])
    qi_reload = workdir / "qi_reload.ckpt"
    save_model(qi_reload, load_model(qi_path))
    assert qi_reload.read_bytes() == qi_path.read_bytes()

    metrics = []
    for tag in ("a", "b"):
        model = load_model(base_run["ckpt"])
        model.attach_adapters(
            subspaces=4, active=2, rank=4, alpha=8.0, dropout=0.05,
            targets=("wq", "wv"), seed=0,
        )
        model.attach_value_routing(groups=GROUPS, keep=2, seed=0)
        cfg = TrainConfig(
            total_steps=30, warmup_steps=5, eval_every=15, batch_size=8,
            seq_len=SEQ_LEN, seed=0, val_sequences=8, lr=ADAPTER_LR,
        )
        path = workdir / f"metrics_{tag}.jsonl"
        train_qi(model, corpus, cfg, metrics=MetricsWriter(path))
        metrics.append(path.read_bytes())
    assert metrics[0] == metrics[1]
    assert len(metrics[0]) > 0
    print(
        "criterion 10 PASS: frozen-base checksums equal, checkpoint rewrites byte-identical, "
        "seeded metrics.jsonl byte-identical"
    )
