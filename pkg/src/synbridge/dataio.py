"""Embedding banks on disk, base/novel splits, a synthetic cross-modal data
generator, and the N-way K-shot episode sampler.

Bank files (``.synb``) are little-endian::

    magic "SYNB" | version u32 = 1 | source u8 | num_categories u32 | dim u32
    | num_rows u32 | labels u32[num_rows] | payload f32[num_rows * dim]

Category names and definitions live in a sibling ``<stem>.json`` manifest.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ._fileutil import atomic_write
from .errors import (
    BadMagic,
    CorruptPayload,
    InsufficientCategories,
    InsufficientSamples,
    LabelOutOfRange,
    MissingBank,
    ShapeMismatch,
    VersionUnsupported,
)
from .numcore import normalize_rows

BANK_MAGIC = b"SYNB"
BANK_VERSION = 1
SOURCES = ("student_visual", "teacher_visual", "teacher_text")
_HEADER = struct.Struct("<4sIBIII")


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    definition: str = ""


@dataclass(frozen=True, eq=False)
class EmbeddingBank:
    """Labeled feature matrix for one modality.

    Rows are held at float32 precision (stored as float64) so that a
    save/load round trip is bitwise exact. Arrays are read-only.
    """

    source: str
    rows: np.ndarray
    labels: np.ndarray
    categories: tuple[Category, ...]

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown bank source {self.source!r}")
        rows = np.asarray(self.rows, dtype=np.float32).astype(np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] == 0:
            raise ShapeMismatch(f"bank rows must be a non-empty matrix, got {rows.shape}")
        if labels.shape != (rows.shape[0],):
            raise ShapeMismatch("one label per row required")
        if not np.all(np.isfinite(rows)):
            raise CorruptPayload("bank contains non-finite values")
        cats = tuple(self.categories)
        if [c.id for c in cats] != list(range(len(cats))):
            raise ValueError("category ids must be 0..n-1 in order")
        if labels.size and (labels.min() < 0 or labels.max() >= len(cats)):
            bad = int(labels.max() if labels.max() >= len(cats) else labels.min())
            raise LabelOutOfRange(f"label {bad} outside {len(cats)} declared categories")
        if self.source == "teacher_text" and sorted(labels.tolist()) != list(range(len(cats))):
            raise ValueError("teacher_text bank needs exactly one row per category")
        rows.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "categories", cats)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @cached_property
    def indices_by_label(self) -> dict:
        return {c.id: np.flatnonzero(self.labels == c.id) for c in self.categories}

    def row_for(self, category_id: int) -> np.ndarray:
        """The single row of a category (for one-row-per-category banks)."""
        idx = self.indices_by_label[category_id]
        if idx.size != 1:
            raise ValueError(f"category {category_id} has {idx.size} rows, expected 1")
        return self.rows[idx[0]]

    def rows_for(self, category_ids) -> np.ndarray:
        return np.stack([self.row_for(c) for c in category_ids])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.source.encode())
        h.update(self.rows.tobytes())
        h.update(self.labels.tobytes())
        for c in self.categories:
            h.update(f"{c.id}\x00{c.name}\x00{c.definition}\x01".encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, EmbeddingBank):
            return NotImplemented
        return (
            self.source == other.source
            and self.categories == other.categories
            and np.array_equal(self.labels, other.labels)
            and self.rows.tobytes() == other.rows.tobytes()
        )

    __hash__ = None


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_bank(bank: EmbeddingBank, path) -> None:
    path = Path(path)
    header = _HEADER.pack(
        BANK_MAGIC,
        BANK_VERSION,
        SOURCES.index(bank.source),
        bank.num_categories,
        bank.dim,
        bank.rows.shape[0],
    )
    payload = (
        header
        + bank.labels.astype("<u4").tobytes()
        + bank.rows.astype("<f4").tobytes()
    )
    atomic_write(path, payload)
    write_manifest(bank.categories, manifest_path(path))


def load_bank(path) -> EmbeddingBank:
    path = Path(path)
    if not path.exists():
        raise MissingBank(f"bank file {path} not found")
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != BANK_MAGIC:
        raise BadMagic(f"{path}: not a SYNB bank file")
    if len(data) < _HEADER.size:
        raise CorruptPayload(f"{path}: truncated header")
    _, version, source, num_categories, dim, num_rows = _HEADER.unpack_from(data)
    if version != BANK_VERSION:
        raise VersionUnsupported(f"{path}: bank version {version}")
    if source >= len(SOURCES):
        raise CorruptPayload(f"{path}: unknown source tag {source}")
    expected = _HEADER.size + 4 * num_rows + 4 * num_rows * dim
    if len(data) != expected:
        raise CorruptPayload(f"{path}: expected {expected} bytes, found {len(data)}")
    labels = np.frombuffer(data, dtype="<u4", count=num_rows, offset=_HEADER.size)
    rows = np.frombuffer(data, dtype="<f4", count=num_rows * dim, offset=_HEADER.size + 4 * num_rows)
    if num_rows and int(labels.max()) >= num_categories:
        raise LabelOutOfRange(
            f"{path}: label {int(labels.max())} with {num_categories} declared categories"
        )
    mpath = manifest_path(path)
    if mpath.exists():
        categories = read_manifest(mpath)
        if len(categories) != num_categories:
            raise CorruptPayload(f"{mpath}: {len(categories)} categories, header says {num_categories}")
    else:
        categories = tuple(Category(i, f"category_{i}") for i in range(num_categories))
    return EmbeddingBank(
        SOURCES[source], rows.reshape(num_rows, dim), labels.astype(np.int64), categories
    )


def write_manifest(categories, path) -> None:
    doc = {"categories": [{"id": c.id, "name": c.name, "definition": c.definition} for c in categories]}
    atomic_write(Path(path), (json.dumps(doc, indent=2) + "\n").encode())


def read_manifest(path) -> tuple[Category, ...]:
    doc = json.loads(Path(path).read_text())
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    return tuple(Category(int(c["id"]), str(c["name"]), str(c.get("definition", ""))) for c in cats)


@dataclass(frozen=True)
class DatasetSplit:
    base: tuple[int, ...]
    novel: tuple[int, ...]

    def __post_init__(self):
        base, novel = tuple(int(i) for i in self.base), tuple(int(i) for i in self.novel)
        if set(base) & set(novel):
            raise ValueError(f"base and novel overlap: {sorted(set(base) & set(novel))}")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "novel", novel)

    def pool(self, name: str) -> tuple[int, ...]:
        if name not in ("base", "novel"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def save(self, path) -> None:
        atomic_write(Path(path), (json.dumps({"base": list(self.base), "novel": list(self.novel)}) + "\n").encode())

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        doc = json.loads(Path(path).read_text())
        return cls(tuple(doc["base"]), tuple(doc["novel"]))


# -- synthetic generator ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic cross-modal generator.

    Each category gets a latent code ``z_c``; visual rows are
    ``normalize(normalize(A_v z_c) + visual_noise * eps)`` and so on for the
    other sources, so the noise scales are relative to unit-length signal.
    ``mixing="identity"`` uses identity maps (requires equal dims).
    """

    num_categories: int = 10
    latent_dim: int = 4
    visual_dim: int = 32
    semantic_dim: int = 16
    samples_per_category: int = 60
    visual_noise: float = 0.3
    semantic_noise: float = 0.05
    teacher_noise: float = 0.1
    num_base: int = 5
    mixing: str = "random"
    seed: int = 0

    def __post_init__(self):
        if min(self.latent_dim, self.visual_dim, self.semantic_dim) < 2:
            raise ValueError("all dimensions must be >= 2")
        if min(self.visual_noise, self.semantic_noise, self.teacher_noise) < 0:
            raise ValueError("noise scales must be >= 0")
        if self.num_categories < 2 or self.samples_per_category < 1:
            raise ValueError("need >= 2 categories and >= 1 sample per category")
        if not 0 < self.num_base < self.num_categories:
            raise ValueError("num_base must leave at least one novel category")
        if self.mixing not in ("random", "identity"):
            raise ValueError(f"unknown mixing {self.mixing!r}")
        if self.mixing == "identity" and len({self.latent_dim, self.visual_dim, self.semantic_dim}) != 1:
            raise ValueError("identity mixing needs latent_dim == visual_dim == semantic_dim")


@dataclass(frozen=True, eq=False)
class SyntheticData:
    student_visual: EmbeddingBank
    teacher_visual: EmbeddingBank
    teacher_text: EmbeddingBank
    latents: np.ndarray
    split: DatasetSplit
    visual_map: np.ndarray = field(repr=False)
    semantic_map: np.ndarray = field(repr=False)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng([spec.seed, 0x5EED])
    c, n = spec.num_categories, spec.samples_per_category
    if spec.mixing == "identity":
        a_v = np.eye(spec.visual_dim)
        a_s = np.eye(spec.semantic_dim)
    else:
        a_v = rng.standard_normal((spec.visual_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
        a_s = rng.standard_normal((spec.semantic_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    latents = rng.standard_normal((c, spec.latent_dim))
    visual_centers = normalize_rows(latents @ a_v.T)
    semantic_centers = normalize_rows(latents @ a_s.T)

    labels = np.repeat(np.arange(c), n)
    student = visual_centers[labels] + spec.visual_noise * rng.standard_normal((c * n, spec.visual_dim))
    teacher = semantic_centers[labels] + spec.teacher_noise * rng.standard_normal((c * n, spec.semantic_dim))
    text = semantic_centers + spec.semantic_noise * rng.standard_normal((c, spec.semantic_dim))

    categories = tuple(
        Category(i, f"category_{i:02d}", f"a synthetic category with latent code {i}") for i in range(c)
    )
    split = DatasetSplit(tuple(range(spec.num_base)), tuple(range(spec.num_base, c)))
    return SyntheticData(
        student_visual=EmbeddingBank("student_visual", normalize_rows(student), labels, categories),
        teacher_visual=EmbeddingBank("teacher_visual", normalize_rows(teacher), labels, categories),
        teacher_text=EmbeddingBank("teacher_text", normalize_rows(text), np.arange(c), categories),
        latents=latents,
        split=split,
        visual_map=a_v,
        semantic_map=a_s,
    )


# -- episodes -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Episode:
    """One N-way K-shot task. Labels are remapped to ``0..N-1`` in the order of
    ``categories``."""

    n_way: int
    k_shot: int
    n_query: int
    categories: tuple[int, ...]
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (run seed, episode index)."""
    return np.random.default_rng([int(seed), int(index)])


def sample_episode(
    split: DatasetSplit,
    bank: EmbeddingBank,
    n_way: int,
    k_shot: int,
    n_query: int,
    seed: int,
    index: int = 0,
    pool: str = "novel",
) -> Episode:
    if min(n_way, k_shot) < 1 or n_query < 0:
        raise ValueError("n_way and k_shot must be >= 1 and n_query >= 0")
    candidates = np.array(split.pool(pool))
    if n_way > candidates.size:
        raise InsufficientCategories(
            f"{n_way}-way episode requested from {candidates.size} {pool} categories"
        )
    need = k_shot + n_query
    for cat in candidates:
        have = bank.indices_by_label.get(int(cat), np.empty(0)).size
        if have < need:
            raise InsufficientSamples(f"category {int(cat)} has {have} samples, needs {need}")
    rng = episode_rng(seed, index)
    chosen = rng.choice(candidates, size=n_way, replace=False)
    support, query = [], []
    for cat in chosen:
        picks = rng.choice(bank.indices_by_label[int(cat)], size=need, replace=False)
        support.append(picks[:k_shot])
        query.append(picks[k_shot:])
    ways = np.arange(n_way)
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
        categories=tuple(int(c) for c in chosen),
        support=np.concatenate(support),
        support_labels=np.repeat(ways, k_shot),
        query=np.concatenate(query) if n_query else np.empty(0, dtype=np.int64),
        query_labels=np.repeat(ways, n_query),
    )
