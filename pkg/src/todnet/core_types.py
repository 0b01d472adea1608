"""Embedding-space domain types and plain cosine similarity."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from todnet.errors import DegenerateInputError, GroupIntegrityError, OddDimensionError, UsageError


class Modality(enum.IntEnum):
    IMAGE = 0
    CAPTION = 1


class Condition(enum.Enum):
    """Which embedding feeds the deformer's condition input."""

    TARGET = "target"
    CAPTION = "caption"
    IMAGE = "image"
    QUERY = "query"
    NONE = "none"


class DeformerKind(enum.Enum):
    REAL_NVP = "realnvp"
    MLP = "mlp"


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


def as_vector(values) -> np.ndarray:
    """Return `values` as a finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise UsageError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise UsageError("embedding vector contains NaN or Inf")
    return v


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise UsageError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    # Normalizing before the dot keeps |cos| <= 1 up to a few ulps.
    return float(np.dot(a / na, b / nb))


def l2_normalize(a) -> np.ndarray:
    a = as_vector(a)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return a / n


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two (N, d) arrays.

    Every scoring path (baseline and deformed) goes through this kernel, so an
    identity deformation reproduces baseline scores bit for bit.
    """
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("zero-norm vector in cosine similarity")
    return (a * b).sum(axis=1) / (na * nb)


@dataclass(frozen=True)
class EmbeddingRecord:
    entity_id: int
    modality: Modality
    group_id: int
    vector: np.ndarray


@dataclass(frozen=True)
class GroupedEmbeddings:
    """Array view of a dataset: one image per group plus its captions.

    Groups are indexed 0..G-1 in dataset order; `caption_group[j]` is the
    group index of caption j.
    """

    group_ids: np.ndarray
    images: np.ndarray
    image_ids: np.ndarray
    captions: np.ndarray
    caption_ids: np.ndarray
    caption_group: np.ndarray

    @property
    def n_groups(self) -> int:
        return len(self.group_ids)

    def subset(self, groups: Sequence[int]) -> "GroupedEmbeddings":
        """Restrict to the given group indices, in the given order."""
        groups = np.asarray(groups, dtype=np.int64)
        remap = np.full(self.n_groups, -1, dtype=np.int64)
        remap[groups] = np.arange(len(groups))
        keep = np.flatnonzero(remap[self.caption_group] >= 0)
        # Captions ordered by their group's position in the subset.
        keep = keep[np.argsort(remap[self.caption_group[keep]], kind="stable")]
        return GroupedEmbeddings(
            group_ids=self.group_ids[groups],
            images=self.images[groups],
            image_ids=self.image_ids[groups],
            captions=self.captions[keep],
            caption_ids=self.caption_ids[keep],
            caption_group=remap[self.caption_group[keep]],
        )


@dataclass(frozen=True)
class EmbeddingDataset:
    dimension: int
    records: tuple[EmbeddingRecord, ...]
    split: Split = Split.TEST

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        validate_records(self.dimension, self.records)

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def grouped(self) -> GroupedEmbeddings:
        order: dict[int, int] = {}
        images: dict[int, EmbeddingRecord] = {}
        captions: list[EmbeddingRecord] = []
        for r in self.records:
            order.setdefault(r.group_id, len(order))
            if r.modality == Modality.IMAGE:
                images[r.group_id] = r
            else:
                captions.append(r)
        group_ids = np.array(list(order), dtype=np.uint64)
        img = [images[int(g)] for g in group_ids]
        d = self.dimension
        return GroupedEmbeddings(
            group_ids=group_ids,
            images=np.array([r.vector for r in img], dtype=np.float64).reshape(-1, d),
            image_ids=np.array([r.entity_id for r in img], dtype=np.uint64),
            captions=np.array([r.vector for r in captions], dtype=np.float64).reshape(-1, d),
            caption_ids=np.array([r.entity_id for r in captions], dtype=np.uint64),
            caption_group=np.array([order[r.group_id] for r in captions], dtype=np.int64),
        )

    def equals(self, other: "EmbeddingDataset") -> bool:
        if self.dimension != other.dimension or len(self) != len(other):
            return False
        for a, b in zip(self.records, other.records):
            if (a.entity_id, a.modality, a.group_id) != (b.entity_id, b.modality, b.group_id):
                return False
            if not np.array_equal(a.vector, b.vector):
                return False
        return True


def validate_records(dimension: int, records: Sequence[EmbeddingRecord]) -> None:
    if dimension < 2 or dimension % 2:
        raise OddDimensionError(f"embedding dimension must be even and >= 2, got {dimension}")
    seen: set[int] = set()
    n_images: dict[int, int] = {}
    n_captions: dict[int, int] = {}
    for r in records:
        if r.vector.shape != (dimension,):
            raise UsageError(f"record {r.entity_id} has shape {r.vector.shape}, expected ({dimension},)")
        if not np.all(np.isfinite(r.vector)):
            raise UsageError(f"record {r.entity_id} contains NaN or Inf")
        if r.entity_id in seen:
            raise GroupIntegrityError(f"duplicate entity_id {r.entity_id}")
        seen.add(r.entity_id)
        if r.modality == Modality.IMAGE:
            n_images[r.group_id] = n_images.get(r.group_id, 0) + 1
            n_captions.setdefault(r.group_id, 0)
        else:
            n_captions[r.group_id] = n_captions.get(r.group_id, 0) + 1
            n_images.setdefault(r.group_id, 0)
    for g, k in n_images.items():
        if k != 1:
            raise GroupIntegrityError(f"group {g} has {k} image records, expected exactly 1")
        if n_captions[g] < 1:
            raise GroupIntegrityError(f"group {g} has no caption records")
