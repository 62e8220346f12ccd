"""Byte-level corpus handling.

Any UTF-8 text file works as a corpus: bytes are the vocabulary (ids 0..255)
plus BOS/EOS specials.  The file is cut into fixed-length non-overlapping
chunks, shuffled once with a fixed seed, and split into train/validation
parts, so every consumer sees the same deterministic order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


def encode_chunk(chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing pair for one chunk of raw bytes.

    Inputs are the bytes shifted right behind a BOS marker; targets are the
    bytes themselves, so both sides have the chunk's length.
    """
    chunk = np.asarray(chunk, dtype=np.int64)
    inputs = np.concatenate([[BOS_ID], chunk[:-1]])
    return inputs, chunk


class CorpusStream:
    """Deterministic chunked view of a byte corpus."""

    def __init__(self, path, seq_len: int, seed: int = 0, val_fraction: float = 0.1) -> None:
        data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
        n_chunks = len(data) // seq_len
        if n_chunks < 2:
            raise ValueError(
                f"corpus {path} has {len(data)} bytes; need at least {2 * seq_len}"
            )
        self.seq_len = seq_len
        self.chunks = data[: n_chunks * seq_len].reshape(n_chunks, seq_len).astype(np.int64)
        perm = np.random.default_rng([seed, 0]).permutation(n_chunks)
        n_val = max(1, int(round(val_fraction * n_chunks)))
        if n_val >= n_chunks:
            raise ValueError("validation split leaves no training chunks")
        self.val_idx = np.sort(perm[:n_val])
        self.train_idx = np.sort(perm[n_val:])
        self.seed = seed

    def _stack(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pairs = [encode_chunk(self.chunks[i]) for i in idx]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def train_batches(self, batch_size: int, steps: int):
        """Yield ``steps`` (inputs, targets) batches, reshuffling per epoch."""
        if batch_size > len(self.train_idx):
            raise ValueError(
                f"batch size {batch_size} exceeds {len(self.train_idx)} training chunks"
            )
        produced = 0
        epoch = 0
        while produced < steps:
            order = np.random.default_rng([self.seed, 1, epoch]).permutation(self.train_idx)
            for start in range(0, len(order) - batch_size + 1, batch_size):
                if produced == steps:
                    return
                yield self._stack(order[start : start + batch_size])
                produced += 1
            epoch += 1

    def val_batch(self, max_sequences: int) -> tuple[np.ndarray, np.ndarray]:
        """Fixed validation slab: the first ``max_sequences`` held-out chunks."""
        take = self.val_idx[: max(1, min(max_sequences, len(self.val_idx)))]
        return self._stack(take)

    def sample_sequences(self, split: str, count: int, seed: int) -> np.ndarray:
        """Input-id sequences drawn without replacement from one split."""
        pool = self.val_idx if split == "val" else self.train_idx
        if split not in ("val", "train"):
            raise ValueError(f"unknown split {split!r}")
        count = min(count, len(pool))
        pick = np.random.default_rng([self.seed, 2, seed]).choice(pool, size=count, replace=False)
        return self._stack(np.sort(pick))[0]


# ---------------------------------------------------------------------------
# sample corpus


_NOUNS = (
    "cache drum engine fox garden harbor kernel lattice meadow needle "
    "orchard pilot quarry river signal tunnel valley wagon anchor beacon"
).split()
_VERBS = (
    "holds turns feeds guards lifts maps joins splits routes keeps "
    "finds moves marks cools warms counts"
).split()
_ADJECTIVES = "small bright quiet heavy narrow sparse steady pale worn round".split()
_ADVERBS = "slowly gently twice often rarely again".split()


def write_synthetic_corpus(path, n_bytes: int, seed: int = 0) -> Path:
    """Deterministic English-like filler text with learnable structure.

    Sentences follow a small template grammar over a fixed vocabulary, and
    most sentences are written out twice in a row.  The immediate repeats
    give a byte-level model a strong long-range copying signal on top of
    the local word statistics, so trained attention stays informative even
    at toy scale.
    """
    rng = np.random.default_rng([seed, 3])
    out: list[str] = []
    total = 0
    while total < n_bytes:
        words = ["the"]
        if rng.random() < 0.4:
            words.append(str(rng.choice(_ADJECTIVES)))
        words.append(str(rng.choice(_NOUNS)))
        words.append(str(rng.choice(_VERBS)))
        words.append("the")
        if rng.random() < 0.25:
            words.append(str(rng.choice(_ADJECTIVES)))
        words.append(str(rng.choice(_NOUNS)))
        if rng.random() < 0.3:
            words.append(str(rng.choice(_ADVERBS)))
        sentence = " ".join(words) + ". "
        piece = sentence * (2 if rng.random() < 0.7 else 1)
        if rng.random() < 0.08:
            piece = piece.rstrip(" ") + "\n"
        out.append(piece)
        total += len(piece)
    text = "".join(out)[:n_bytes]
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path
