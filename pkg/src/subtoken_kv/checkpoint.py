"""Binary checkpoint container.

Little-endian throughout.  Layout:

    magic   8 bytes  b"STKVCKPT"
    version u32      currently 1
    cfg_len u32      length of the JSON config record
    config  cfg_len bytes, UTF-8 JSON with sorted keys
    count   u32      number of arrays
    then per array, in ascending name order:
        name_len u32, name bytes (UTF-8)
        dtype    u8   0 = float64, 1 = float32, 2 = int64
        rank     u8
        dims     rank * u64
        data     raw C-order bytes

Writing the same state twice produces identical bytes, which the engineering
contracts lean on.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"STKVCKPT"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


def write_arrays(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        # asarray keeps 0-d inputs 0-d; ascontiguousarray would promote them.
        arr = np.asarray(arrays[name], order="C")
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        # numpy scalars little-endian on all supported platforms; be explicit
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path: Path) -> None:
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint {self.path}")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        tag, rank = struct.unpack("<BB", r.take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"array {name!r} has unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype.newbyteorder("<"))
        arrays[name] = data.astype(dtype).reshape(dims).copy()
    return config, arrays


# ---------------------------------------------------------------------------
# model- and predictor-level helpers


def save_model(path, model) -> None:
    write_arrays(path, model.config_record(), model.named_arrays())


def load_model(path):
    from .model import ModelConfig, TransformerModel

    record, arrays = read_arrays(path)
    try:
        config = ModelConfig(**record["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"bad model config record in {path}: {exc}") from exc
    model = TransformerModel(config, seed=0)
    if record.get("adapters"):
        meta = record["adapters"]
        model.attach_adapters(
            subspaces=meta["subspaces"],
            active=meta["active"],
            rank=meta["rank"],
            alpha=meta["alpha"],
            dropout=meta["dropout"],
            targets=tuple(meta["targets"]),
        )
    if record.get("value_routing"):
        meta = record["value_routing"]
        model.attach_value_routing(groups=meta["groups"], keep=meta["keep"], hidden=meta["hidden"])
    refs = model.named_arrays()
    if set(refs) != set(arrays):
        missing = sorted(set(refs) - set(arrays))
        extra = sorted(set(arrays) - set(refs))
        raise CheckpointError(f"array mismatch in {path}: missing {missing[:3]}, extra {extra[:3]}")
    for name, ref in refs.items():
        if ref.shape != arrays[name].shape:
            raise CheckpointError(
                f"array {name!r} has shape {arrays[name].shape}, expected {ref.shape}"
            )
        ref[...] = arrays[name]
    return model


def save_predictors(path, score_predictor, token_predictor, meta: dict) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, arr in score_predictor.arrays().items():
        arrays[f"pred.score.{name}"] = arr
    for name, arr in token_predictor.arrays().items():
        arrays[f"pred.token.{name}"] = arr
    write_arrays(path, {"predictor": meta}, arrays)


def load_predictors(path):
    from .qa_selector import ScorePredictor, TokenPredictor

    record, arrays = read_arrays(path)
    meta = record.get("predictor")
    if not meta:
        raise CheckpointError(f"{path} does not hold predictors")
    rng = np.random.default_rng(0)
    score = ScorePredictor(meta["d_model"], meta["n_groups"], rng)
    token = TokenPredictor(meta["d_model"], rng)
    for pred, prefix in ((score, "pred.score."), (token, "pred.token.")):
        for name in pred.ARRAY_NAMES:
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"missing array {key!r} in {path}")
            ref = getattr(pred, name)
            if ref.shape != arrays[key].shape:
                raise CheckpointError(f"array {key!r} has unexpected shape {arrays[key].shape}")
            ref[...] = arrays[key]
    return score, token, meta
