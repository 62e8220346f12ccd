"""Command-line harness: training runs, evaluations, and diagnostics.

Every run command resolves its configuration (defaults < --config file <
--set overrides), echoes the result to ``<out>/config.resolved``, and
writes machine-readable artifacts (metrics.jsonl, CSV tables, checkpoints)
into the output directory.  Exit code 0 on success; any failure prints a
one-line reason on stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, load_predictors, save_model, save_predictors
from .config import load_config, model_config_from, train_config_from, write_resolved
from .data import CorpusStream, write_synthetic_corpus
from .errors import CheckpointError, ConfigError, GradCheckError, TrainingDiverged
from .evaluation import collect_sequences, qa_budget_sweep, run_diagnostics
from .gradcheck import GRAD_TOL, run_gradcheck_suite
from .model import TransformerModel
from .qa_selector import PredictorSelector, ScorePredictor, TokenPredictor
from .training import (
    MetricsWriter,
    collect_predictor_targets,
    evaluate_val_loss,
    pretrain_base,
    train_predictors,
    train_qi,
)
from .value_groups import BudgetSpec, kv_retention_fraction

# (token_keep, rho) rows shown by default in the budget table
DEFAULT_BUDGET_PAIRS = (
    (1.0, 0.25),
    (1.0, 0.5),
    (0.75, 0.75),
    (0.75, 0.5),
    (0.5, 0.5),
    (1.0, 1.0),
)

_SEED_TAG_PREDICTOR_INIT = 7


def _add_common(sub: argparse.ArgumentParser, needs_out: bool = True) -> None:
    sub.add_argument("--config", default=None, help="key=value config file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    sub.add_argument("--out", required=needs_out, default=None, help="output directory")
    sub.add_argument("--seed", type=int, default=0)


def _setup(args) -> tuple[dict, Path]:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    return cfg, out


def _corpus(cfg: dict, out: Path, seed: int) -> CorpusStream:
    path = cfg["data.corpus"]
    if not path:
        path = out / "corpus.txt"
        if not Path(path).exists():
            write_synthetic_corpus(path, cfg["data.synth_bytes"], seed)
    return CorpusStream(
        path,
        seq_len=cfg["train.seq_len"],
        seed=seed,
        val_fraction=cfg["train.val_fraction"],
    )


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _require_checkpoint(path_text: str, what: str) -> Path:
    if not path_text:
        raise ConfigError(f"{what} checkpoint path is required")
    path = Path(path_text)
    if not path.exists():
        raise CheckpointError(f"{what} checkpoint not found: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_pretrain_base(args) -> int:
    cfg, out = _setup(args)
    corpus = _corpus(cfg, out, args.seed)
    model = TransformerModel(model_config_from(cfg), seed=args.seed)
    tc = train_config_from(cfg, args.seed)
    metrics = MetricsWriter(out / "metrics.jsonl")
    summary = pretrain_base(model, corpus, tc, metrics)
    ckpt = out / "base.ckpt"
    save_model(ckpt, model)
    _write_json(out / "summary.json", summary)
    print(
        f"pretrain-base: {summary['steps']} steps, val loss "
        f"{summary['step0_val_loss']:.4f} -> {summary['final_val_loss']:.4f}, wrote {ckpt}"
    )
    return 0


def cmd_train_qi(args) -> int:
    cfg, out = _setup(args)
    base = _require_checkpoint(cfg["train.base_checkpoint"], "base")
    model = load_model(base)
    model.attach_adapters(
        subspaces=cfg["routing.subspaces"],
        active=cfg["routing.active"],
        rank=cfg["routing.rank"],
        alpha=cfg["routing.alpha"],
        dropout=cfg["routing.dropout"],
        targets=cfg["routing.targets"],
        seed=args.seed,
    )
    model.attach_value_routing(
        groups=cfg["routing.groups"],
        keep=cfg["routing.keep"],
        hidden=cfg["routing.rec_hidden"],
        seed=args.seed,
    )
    corpus = _corpus(cfg, out, args.seed)
    tc = train_config_from(cfg, args.seed)
    metrics = MetricsWriter(out / "metrics.jsonl")
    summary = train_qi(model, corpus, tc, metrics)
    ckpt = out / "qi.ckpt"
    save_model(ckpt, model)
    _write_json(out / "summary.json", summary)
    print(
        f"train-qi: {summary['steps']} steps at total KV {summary['total_kv']:.3f}, "
        f"val loss {summary['step0_val_loss']:.4f} -> {summary['final_val_loss']:.4f}, wrote {ckpt}"
    )
    return 0


def cmd_train_predictor(args) -> int:
    cfg, out = _setup(args)
    base = _require_checkpoint(cfg["train.base_checkpoint"], "base")
    model = load_model(base)
    corpus = _corpus(cfg, out, args.seed)
    seqs = corpus.sample_sequences("train", cfg["train.pred_sequences"], seed=args.seed)
    dataset = collect_predictor_targets(
        model, seqs, cfg["qa.groups"], cfg["qa.query_region"]
    )
    if len(dataset.hidden) == 0:
        raise ConfigError("no predictor training targets were collected")
    rng = np.random.default_rng([args.seed, _SEED_TAG_PREDICTOR_INIT])
    score_pred = ScorePredictor(model.config.d_model, cfg["qa.groups"], rng)
    token_pred = TokenPredictor(model.config.d_model, rng)
    tc = train_config_from(cfg, args.seed)
    metrics = MetricsWriter(out / "metrics.jsonl")
    summary = train_predictors(score_pred, token_pred, dataset, tc, metrics)
    ckpt = out / "predictor.ckpt"
    meta = {"d_model": model.config.d_model, "n_groups": cfg["qa.groups"]}
    save_predictors(ckpt, score_pred, token_pred, meta)
    _write_json(out / "summary.json", summary)
    print(
        f"train-predictor: {summary['rows']} target rows, final losses "
        f"score {summary['score_loss']:.4f} / token {summary['token_loss']:.4f}, wrote {ckpt}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg, out = _setup(args)
    ckpt = _require_checkpoint(args.checkpoint, "model")
    model = load_model(ckpt)
    corpus = _corpus(cfg, out, args.seed)
    metrics = MetricsWriter(out / "metrics.jsonl")

    if args.mode in ("baseline", "qi_routed"):
        val = evaluate_val_loss(model, corpus, args.mode, cfg["eval.sequences"])
        record = {"mode": args.mode, "val_loss": val, "val_ppl": float(np.exp(val))}
        metrics.write(record)
        print(f"eval[{args.mode}]: val loss {val:.4f} (ppl {record['val_ppl']:.2f})")
        return 0

    selector = None
    if cfg["qa.selector"] == "predictor":
        pred_path = _require_checkpoint(args.predictor, "predictor")
        score_pred, token_pred, _ = load_predictors(pred_path)
        selector = PredictorSelector(score_pred, token_pred)
    sequence_sets = [
        collect_sequences(corpus, "val", cfg["eval.sequences"], seed=args.seed + i)
        for i in range(cfg["eval.n_seeds"])
    ]
    sweep = qa_budget_sweep(
        model,
        sequence_sets,
        cfg["eval.rhos"],
        groups=cfg["qa.groups"],
        token_keep=cfg["qa.token_keep"],
        query_region=cfg["qa.query_region"],
        selector=selector,
    )
    for rho in cfg["eval.rhos"]:
        row = sweep[rho]
        metrics.write(
            {
                "mode": "qa_compressed",
                "rho": rho,
                "token_keep": cfg["qa.token_keep"],
                "total_kv": row["total_kv"],
                "median_agreement": row["median_agreement"],
                "median_mean_kl": row["median_mean_kl"],
                "mean_kept_score_total": row["mean_kept_score_total"],
                "mean_fixed_k_total": row["mean_fixed_k_total"],
            }
        )
        fixed = row["mean_fixed_k_total"]
        fixed_text = f", fixed-K kept score {fixed:.4f}" if fixed is not None else ""
        print(
            f"eval[qa] rho={rho:g}: agreement {row['median_agreement']:.3f}, "
            f"KL {row['median_mean_kl']:.3e}, kept score {row['mean_kept_score_total']:.4f}"
            f"{fixed_text}"
        )
    return 0


def cmd_diagnostics(args) -> int:
    cfg, out = _setup(args)
    ckpt = _require_checkpoint(args.checkpoint, "model")
    model = load_model(ckpt)
    corpus = _corpus(cfg, out, args.seed)
    seqs = collect_sequences(corpus, "val", cfg["eval.sequences"], seed=args.seed)
    diag = run_diagnostics(
        model, seqs, cfg["qa.rho"], cfg["qa.groups"], cfg["qa.query_region"]
    )
    groups = cfg["qa.groups"]
    fields = ["sequence", "token_index", "alpha", "k_j"]
    fields += [f"score_g{g}" for g in range(groups)]
    fields += [f"mask_g{g}" for g in range(groups)]
    csv_path = out / "diagnostics.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(diag.rows)
    _write_json(
        out / "diagnostics_summary.json",
        {
            "mean_k": diag.mean_k,
            "k_histogram": {str(k): v for k, v in diag.k_histogram.items()},
            "spearman_alpha_k": diag.spearman_alpha_k,
            "distinct_k": diag.distinct_k,
            "degenerate": diag.degenerate,
        },
    )
    print(
        f"diagnostics: mean K {diag.mean_k:.3f}, {diag.distinct_k} distinct K values, "
        f"spearman(alpha, K) {diag.spearman_alpha_k:.3f}, degenerate={diag.degenerate}, "
        f"wrote {csv_path}"
    )
    return 0


def cmd_budget_table(args) -> int:
    cfg, out = _setup(args)
    if args.pair:
        pairs = []
        for text in args.pair:
            parts = text.split(",")
            if len(parts) != 2:
                raise ConfigError(f"--pair wants 'token_keep,rho', got {text!r}")
            pairs.append((float(parts[0]), float(parts[1])))
    else:
        pairs = list(DEFAULT_BUDGET_PAIRS)
    csv_path = out / "budget.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tokens_kept", "rho", "total_kv"])
        for token_keep, rho in pairs:
            spec = BudgetSpec(
                rho=rho,
                groups=cfg["qa.groups"],
                token_keep=token_keep,
                n_context=64,
                n_query=16,
            )
            writer.writerow([token_keep, rho, repr(kv_retention_fraction(spec))])
    print(f"budget-table: {len(pairs)} rows, wrote {csv_path}")
    return 0


def cmd_grad_check(args) -> int:
    results = run_gradcheck_suite(seed=args.seed)
    for name in sorted(results):
        print(f"{name}: {results[name]:.3e}")
    worst = max(results.values())
    print(f"grad-check: max rel err {worst:.3e} (tolerance {GRAD_TOL:g})")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", {"results": results, "max_rel_err": worst})
    if worst >= GRAD_TOL:
        print(f"error: gradient check failed: {worst:.3e} >= {GRAD_TOL:g}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subtoken-kv",
        description="Sub-token KV cache compression: training, evaluation, diagnostics.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("pretrain-base", help="train and freeze the base model")
    _add_common(sub)
    sub.set_defaults(handler=cmd_pretrain_base)

    sub = subs.add_parser("train-qi", help="adapters + value routing on a frozen base")
    _add_common(sub)
    sub.set_defaults(handler=cmd_train_qi)

    sub = subs.add_parser("train-predictor", help="regress relevance scores")
    _add_common(sub)
    sub.set_defaults(handler=cmd_train_predictor)

    sub = subs.add_parser("eval", help="validation metrics or compression agreement sweep")
    _add_common(sub)
    sub.add_argument("--checkpoint", required=True, help="model checkpoint to evaluate")
    sub.add_argument(
        "--mode",
        choices=("baseline", "qi_routed", "qa_compressed"),
        default="qa_compressed",
    )
    sub.add_argument("--predictor", default="", help="predictor checkpoint (qa.selector=predictor)")
    sub.set_defaults(handler=cmd_eval)

    sub = subs.add_parser("diagnostics", help="per-token group retention profile")
    _add_common(sub)
    sub.add_argument("--checkpoint", required=True)
    sub.set_defaults(handler=cmd_diagnostics)

    sub = subs.add_parser("budget-table", help="retention arithmetic table")
    _add_common(sub)
    sub.add_argument("--pair", action="append", default=[], metavar="TOKEN_KEEP,RHO")
    sub.set_defaults(handler=cmd_budget_table)

    sub = subs.add_parser("grad-check", help="finite-difference gradient suite")
    _add_common(sub, needs_out=False)
    sub.set_defaults(handler=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, CheckpointError, GradCheckError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
