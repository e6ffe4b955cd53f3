"""Mean-pooling of token-level embedding sequences into sentence vectors.

The token-level binary format mirrors the embedding format but each sample
block is preceded by a u32 token count: magic ``TOK1``, u32 sample count,
u32 dimension, u8 labels-present flag, then per sample {u32 token count,
token_count x H little-endian float32}, then (flag=1 only) per sample a
u32-length-prefixed UTF-8 label and a u8 split code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import _CODE_SPLIT, EmbeddedDataset, _read_exact
from .errors import (
    DatasetFormatError,
    DimensionMismatchError,
    EmptyDatasetError,
    MalformedHeaderError,
    NonFiniteValueError,
    UnknownSplitTagError,
)

_MAGIC_TOK = b"TOK1"


@dataclass
class TokenSequence:
    """Token embedding matrix; the first row is the classification token."""

    tokens: np.ndarray  # (N+1, H)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError("token sequence needs at least one row")
        if not np.isfinite(self.tokens).all():
            raise ValueError("token sequence has non-finite values")


def mean_pool(seq: TokenSequence) -> np.ndarray:
    """Column-wise arithmetic mean over all rows, leading row included."""
    return seq.tokens.mean(axis=0)


def load_token_file(path) -> tuple[list[TokenSequence], list[str | None] | None, list[str]]:
    """Parse a token-level binary file into sequences plus label/split tags."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC_TOK:
            raise MalformedHeaderError(
                f"bad magic bytes {magic!r}, expected {_MAGIC_TOK!r}")
        count, dim = struct.unpack("<II", _read_exact(fh, 8, "header"))
        (flag,) = struct.unpack("<B", _read_exact(fh, 1, "labels flag"))
        if count == 0:
            raise EmptyDatasetError("token file declares zero samples")
        if dim == 0:
            raise DimensionMismatchError("token file declares zero dimension")
        sequences = []
        for i in range(count):
            (ntok,) = struct.unpack("<I", _read_exact(fh, 4, f"token count of row {i}"))
            if ntok == 0:
                raise DatasetFormatError("empty token sequence", row=i)
            raw = _read_exact(fh, ntok * dim * 4, f"token block of row {i}")
            tokens = np.frombuffer(raw, dtype="<f4").reshape(ntok, dim)
            if not np.isfinite(tokens).all():
                raise NonFiniteValueError("non-finite token value", row=i)
            sequences.append(TokenSequence(tokens.astype(np.float64)))
        labels: list[str | None] | None = None
        split = ["train"] * count
        if flag == 1:
            labels = []
            for i in range(count):
                (ln,) = struct.unpack("<I", _read_exact(fh, 4, f"label length of row {i}"))
                text = _read_exact(fh, ln, f"label of row {i}").decode("utf-8")
                (code,) = struct.unpack("<B", _read_exact(fh, 1, f"split code of row {i}"))
                if code not in _CODE_SPLIT:
                    raise UnknownSplitTagError(f"unknown split code {code}", row=i)
                labels.append(text if text else None)
                split[i] = _CODE_SPLIT[code]
            if all(l is None for l in labels):
                labels = None
    return sequences, labels, split


def pool_token_file(path) -> EmbeddedDataset:
    """Mean-pool every sequence of a token file into one embedding row."""
    sequences, labels, split = load_token_file(path)
    emb = np.stack([mean_pool(s) for s in sequences])
    ids = [str(i) for i in range(len(sequences))]
    return EmbeddedDataset(ids=ids, embeddings=emb, labels=labels, split=split)
