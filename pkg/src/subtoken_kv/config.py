"""Flat key=value run configuration with a strict key registry.

Files look like::

    # comment
    model.d_model = 64
    train.total_steps = 2000
    qa.rhos handled per-key; lists are comma-separated

Unknown keys are rejected so typos fail loudly, and the fully-resolved
mapping can be echoed back to disk and re-parsed to the identical result.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_int_or_auto(text: str) -> int | None:
    return None if text == "auto" else int(text)


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: object


REGISTRY: dict[str, Key] = {
    # model architecture
    "model.vocab_size": Key(_parse_int, 258),
    "model.d_model": Key(_parse_int, 64),
    "model.n_layers": Key(_parse_int, 4),
    "model.n_heads": Key(_parse_int, 4),
    "model.d_head": Key(_parse_int, 16),
    "model.max_seq": Key(_parse_int, 256),
    "model.split_layer": Key(_parse_int_or_auto, None),
    # adapters and value-group routing
    "routing.subspaces": Key(_parse_int, 4),
    "routing.active": Key(_parse_int, 2),
    "routing.rank": Key(_parse_int, 4),
    "routing.alpha": Key(_parse_float, 8.0),
    "routing.dropout": Key(_parse_float, 0.05),
    "routing.targets": Key(_parse_str_list, ("wq", "wv")),
    "routing.groups": Key(_parse_int, 4),
    "routing.keep": Key(_parse_int, 3),
    "routing.rec_hidden": Key(_parse_int_or_auto, None),
    # query-aware compression
    "qa.rho": Key(_parse_float, 0.5),
    "qa.groups": Key(_parse_int, 4),
    "qa.token_keep": Key(_parse_float, 1.0),
    "qa.query_region": Key(_parse_int, 16),
    "qa.selector": Key(_parse_str, "diagnostic"),
    # optimisation
    "train.lr": Key(_parse_float, 5e-4),
    "train.weight_decay": Key(_parse_float, 0.01),
    "train.beta1": Key(_parse_float, 0.9),
    "train.beta2": Key(_parse_float, 0.999),
    "train.warmup_steps": Key(_parse_int, 100),
    "train.total_steps": Key(_parse_int, 2000),
    "train.lambda_aux": Key(_parse_float, 0.1),
    "train.lambda_lb": Key(_parse_float, 0.01),
    "train.batch_size": Key(_parse_int, 8),
    "train.seq_len": Key(_parse_int, 96),
    "train.eval_every": Key(_parse_int, 200),
    "train.val_fraction": Key(_parse_float, 0.1),
    "train.val_sequences": Key(_parse_int, 32),
    "train.base_checkpoint": Key(_parse_str, ""),
    "train.pred_lr": Key(_parse_float, 1e-3),
    "train.pred_weight_decay": Key(_parse_float, 1e-4),
    "train.pred_epochs": Key(_parse_int, 50),
    "train.pred_batch_tokens": Key(_parse_int, 1024),
    "train.pred_sequences": Key(_parse_int, 200),
    # evaluation sweeps
    "eval.sequences": Key(_parse_int, 16),
    "eval.n_seeds": Key(_parse_int, 5),
    "eval.rhos": Key(_parse_float_list, (0.25, 0.5, 0.75, 1.0)),
    # data
    "data.corpus": Key(_parse_str, ""),
    "data.synth_bytes": Key(_parse_int, 262144),
}

_SELECTORS = ("diagnostic", "predictor")


def default_config() -> dict:
    return {name: key.default for name, key in REGISTRY.items()}


def _apply(cfg: dict, name: str, raw: str, origin: str) -> None:
    key = REGISTRY.get(name)
    if key is None:
        raise ConfigError(f"unknown config key {name!r} ({origin})")
    try:
        cfg[name] = key.parse(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r} ({origin}): {exc}") from exc


def parse_config_text(text: str, cfg: dict, origin: str) -> None:
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        name, raw = (part.strip() for part in body.split("=", 1))
        _apply(cfg, name, raw, f"{origin}:{lineno}")


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the config file, then --set overrides; later wins."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        parse_config_text(p.read_text(encoding="utf-8"), cfg, str(p))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        name, raw = (part.strip() for part in item.split("=", 1))
        _apply(cfg, name, raw, "--set")
    if cfg["qa.selector"] not in _SELECTORS:
        raise ConfigError(f"qa.selector must be one of {_SELECTORS}")
    return cfg


def format_config(cfg: dict) -> str:
    """Stable text form; load_config on the result reproduces cfg exactly."""
    lines = [f"{name} = {_format_value(cfg[name])}" for name in sorted(cfg)]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: dict, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "config.resolved"
    path.write_text(format_config(cfg), encoding="utf-8")
    return path


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(
        vocab_size=cfg["model.vocab_size"],
        d_model=cfg["model.d_model"],
        n_layers=cfg["model.n_layers"],
        n_heads=cfg["model.n_heads"],
        d_head=cfg["model.d_head"],
        max_seq=cfg["model.max_seq"],
        split_layer=cfg["model.split_layer"],
    )


def train_config_from(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        warmup_steps=cfg["train.warmup_steps"],
        total_steps=cfg["train.total_steps"],
        lambda_aux=cfg["train.lambda_aux"],
        lambda_lb=cfg["train.lambda_lb"],
        batch_size=cfg["train.batch_size"],
        seq_len=cfg["train.seq_len"],
        seed=seed,
        eval_every=cfg["train.eval_every"],
        val_fraction=cfg["train.val_fraction"],
        val_sequences=cfg["train.val_sequences"],
        pred_lr=cfg["train.pred_lr"],
        pred_weight_decay=cfg["train.pred_weight_decay"],
        pred_epochs=cfg["train.pred_epochs"],
        pred_batch_tokens=cfg["train.pred_batch_tokens"],
        pred_sequences=cfg["train.pred_sequences"],
    )
