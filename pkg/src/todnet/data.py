"""Synthetic aspect embeddings, the "TDE1" embedding file format, and batch sampling.

TDE1 layout, little-endian::

    b"TDE1"  u16 version (= 1)  u32 d  u64 record count
    per record: u64 entity_id, u8 modality (0 image, 1 caption), u64 group_id,
                d x f32 vector
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from todnet.core_types import EmbeddingDataset, EmbeddingRecord, Modality, Split
from todnet.errors import (
    BadMagicError,
    InvalidRecordError,
    OddDimensionError,
    TrailingDataError,
    TruncatedFileError,
    UnsupportedVersionError,
    UsageError,
)

MAGIC = b"TDE1"
VERSION = 1
_HEADER = struct.Struct("<4sHIQ")


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic one-image/many-captions generator.

    Each caption sees the group's shared concept plus one aspect; the image
    sees the shared concept plus the average of all aspects. Aspect k of every
    group lives on the same random coordinate subset, and its value is one of
    `aspect_vocab` prototypes shared by all groups, so two groups can agree
    on an aspect while differing in everything else.
    """

    train_groups: int = 500
    val_groups: int = 100
    test_groups: int = 100
    d: int = 64
    n_aspects: int = 4
    captions_per_image: int = 5
    aspect_signal: float = 2.0
    shared_signal: float = 0.4
    noise: float = 0.6
    aspect_vocab: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.d < 2 or self.d % 2:
            raise UsageError(f"d must be even and >= 2, got {self.d}")
        if min(self.train_groups, self.val_groups, self.test_groups) < 1:
            raise UsageError("train_groups, val_groups and test_groups must all be >= 1")
        if self.n_aspects < 1 or self.n_aspects > self.d:
            raise UsageError(f"n_aspects must be in [1, d], got {self.n_aspects}")
        if self.captions_per_image < 1:
            raise UsageError("captions_per_image must be >= 1")
        if self.aspect_signal <= 0 or self.shared_signal <= 0:
            raise UsageError("aspect_signal and shared_signal must be > 0")
        if self.aspect_vocab < 1:
            raise UsageError("aspect_vocab must be >= 1")
        if self.noise < 0:
            raise UsageError("noise must be >= 0")


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    while True:
        x = rng.standard_normal(n)
        norm = np.linalg.norm(x)
        if norm > 0:
            return x / norm


def _generate_split(cfg: SyntheticConfig, prototypes, n_groups: int, split: Split, rng) -> EmbeddingDataset:
    d, a_count, c_count = cfg.d, cfg.n_aspects, cfg.captions_per_image
    noise_std = cfg.noise / np.sqrt(d)
    records = []
    entity = 0
    for group in range(n_groups):
        shared = cfg.shared_signal * _unit(rng, d)
        choice = rng.integers(cfg.aspect_vocab, size=a_count)
        aspects = prototypes[np.arange(a_count), choice]
        vectors = [shared + aspects.mean(axis=0)]
        vectors += [shared + aspects[j % a_count] for j in range(c_count)]
        for j, v in enumerate(vectors):
            if cfg.noise > 0:
                v = v + noise_std * rng.standard_normal(d)
            v = v / np.linalg.norm(v)
            # Stored precision is f32; keep the in-memory dataset identical to its file.
            v = v.astype(np.float32).astype(np.float64)
            records.append(EmbeddingRecord(entity, Modality.IMAGE if j == 0 else Modality.CAPTION, group, v))
            entity += 1
    return EmbeddingDataset(d, tuple(records), split)


def generate_synthetic(cfg: SyntheticConfig) -> dict[Split, EmbeddingDataset]:
    cfg.validate()
    seq = np.random.SeedSequence(cfg.seed)
    layout_seq, *split_seqs = seq.spawn(4)
    layout = np.random.default_rng(layout_seq)
    subsets = np.array_split(layout.permutation(cfg.d), cfg.n_aspects)
    # prototypes[k, v] is value v of aspect k, supported on subset k.
    prototypes = np.zeros((cfg.n_aspects, cfg.aspect_vocab, cfg.d))
    for k, idx in enumerate(subsets):
        for v in range(cfg.aspect_vocab):
            prototypes[k, v, idx] = cfg.aspect_signal * _unit(layout, len(idx))
    sizes = {Split.TRAIN: cfg.train_groups, Split.VAL: cfg.val_groups, Split.TEST: cfg.test_groups}
    return {
        split: _generate_split(cfg, prototypes, sizes[split], split, np.random.default_rng(s))
        for split, s in zip(sizes, split_seqs)
    }


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("entity_id", "<u8"), ("modality", "u1"), ("group_id", "<u8"), ("vector", "<f4", (d,))])


def embeddings_bytes(dataset: EmbeddingDataset) -> bytes:
    d = dataset.dimension
    arr = np.zeros(len(dataset.records), dtype=_record_dtype(d))
    for i, r in enumerate(dataset.records):
        arr[i] = (r.entity_id, int(r.modality), r.group_id, r.vector.astype(np.float32))
    return _HEADER.pack(MAGIC, VERSION, d, len(arr)) + arr.tobytes()


def write_embeddings(dataset: EmbeddingDataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(embeddings_bytes(dataset))


def parse_embeddings(data: bytes, split: Split = Split.TEST) -> EmbeddingDataset:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a TDE1 embedding file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("embedding file truncated inside the header")
    _, version, d, count = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported TDE1 version {version}")
    if d < 2 or d % 2:
        raise OddDimensionError(f"embedding dimension must be even and >= 2, got {d}")
    dtype = _record_dtype(d)
    payload = len(data) - _HEADER.size
    if payload < count * dtype.itemsize:
        raise TruncatedFileError(
            f"header declares {count} records ({count * dtype.itemsize} bytes) but only {payload} bytes follow"
        )
    if payload > count * dtype.itemsize:
        raise TrailingDataError(f"{payload - count * dtype.itemsize} unexpected bytes after {count} records")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER.size)
    if np.any(arr["modality"] > 1):
        bad = int(np.flatnonzero(arr["modality"] > 1)[0])
        raise InvalidRecordError(f"record {bad} has unknown modality byte {arr['modality'][bad]}")
    if not np.all(np.isfinite(arr["vector"])):
        raise InvalidRecordError("embedding file contains NaN or Inf values")
    vectors = arr["vector"].astype(np.float64)
    records = tuple(
        EmbeddingRecord(int(e), Modality(int(m)), int(g), vectors[i])
        for i, (e, m, g) in enumerate(zip(arr["entity_id"], arr["modality"], arr["group_id"]))
    )
    return EmbeddingDataset(d, records, split)


def read_embeddings(path: str | os.PathLike, split: Split = Split.TEST) -> EmbeddingDataset:
    with open(path, "rb") as fh:
        return parse_embeddings(fh.read(), split)


def batch_sampler(dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffle group indices with a (seed, epoch)-keyed generator and cut into batches.

    `dataset` is an EmbeddingDataset, a GroupedEmbeddings view, or a group
    count. A trailing batch is kept only if it holds at least two groups.
    """
    if isinstance(dataset, EmbeddingDataset):
        n_groups = dataset.grouped.n_groups
    elif isinstance(dataset, (int, np.integer)):
        n_groups = int(dataset)
    else:
        n_groups = dataset.n_groups
    if batch_size < 2:
        raise UsageError("batch_size must be >= 2 groups")
    order = np.random.default_rng([seed, epoch]).permutation(n_groups)
    batches = [order[k:k + batch_size] for k in range(0, n_groups, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches
