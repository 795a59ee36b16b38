"""Embedding storage and exchange, dataset manifests, and stratified splits.

File contracts (shared with the external feature extractor):

* Manifest: UTF-8 lines ``path<TAB>label<TAB>split`` where split is one of
  ``train``, ``val``, ``test`` or ``-`` for unassigned.
* Embedding file, little-endian: magic ``EMB1``, u32 dim, u32 count, then per
  record u16 id-length, UTF-8 id bytes, dim float32 values. Records are
  written in sorted-id order so identical stores produce identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from ._rng import stream
from .errors import FormatError

__all__ = [
    "ManifestEntry",
    "DatasetManifest",
    "EmbeddingStore",
    "split_dataset",
    "write_embeddings",
    "read_embeddings",
    "join_embeddings",
]

SPLITS = ("train", "val", "test")

_MAGIC = b"EMB1"


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str | None = None


class DatasetManifest:
    """Ordered list of labelled image entries; paths are unique ids."""

    def __init__(self, entries: list[ManifestEntry]):
        seen = set()
        for e in entries:
            if e.path in seen:
                raise ValueError(f"duplicate manifest path: {e.path}")
            if e.split is not None and e.split not in SPLITS:
                raise ValueError(f"unknown split {e.split!r} for {e.path}")
            seen.add(e.path)
        self.entries = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self.entries == other.entries

    def labels(self) -> list[str]:
        """Declared label set in lexicographic order (fixes class indices)."""
        return sorted({e.label for e in self.entries})

    def subset(self, split: str | None) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
                p, label, split = parts
                entries.append(ManifestEntry(p, label, None if split == "-" else split))
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(f"{e.path}\t{e.label}\t{e.split or '-'}\n")


def _split_counts(m: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Per-class counts: floor for train, ceil for val, remainder for test.

    This is the rounding that reproduces the published per-class rows
    (809 -> 647/81/81, 822 -> 657/83/82, 1102 -> 881/111/110, 781 -> 624/79/78).
    """
    n_train = int(np.floor(ratios[0] * m))
    n_val = int(np.ceil(ratios[1] * m))
    if n_train + n_val > m:
        n_val = m - n_train
    return n_train, n_val, m - n_train - n_val


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def split_dataset(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetManifest:
    """Stratified per-class split via a deterministic per-class shuffle."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative, got {ratios}")
    by_class: dict[str, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        if not e.label:
            raise ValueError(f"unlabelled entry: {e.path}")
        by_class.setdefault(e.label, []).append(i)

    assignment: dict[int, str] = {}
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 3:
            raise ValueError(
                f"class {label!r} has {len(idx)} items; need >= 3 to populate three splits"
            )
        n_train, n_val, _ = _split_counts(len(idx), ratios)
        rng = stream(seed, "split", _label_key(label))
        order = rng.permutation(len(idx))
        for pos, j in enumerate(order):
            if pos < n_train:
                assignment[idx[j]] = "train"
            elif pos < n_train + n_val:
                assignment[idx[j]] = "val"
            else:
                assignment[idx[j]] = "test"

    return DatasetManifest(
        [replace(e, split=assignment[i]) for i, e in enumerate(manifest.entries)]
    )


class EmbeddingStore:
    """Fixed-dimension float32 vectors keyed by id; immutable after load."""

    def __init__(self, dim: int, vectors: dict[str, np.ndarray] | None = None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self._vectors: dict[str, np.ndarray] = {}
        if vectors:
            for key, v in vectors.items():
                self.add(key, v)

    def add(self, key: str, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=np.float32)
        if v.shape != (self.dim,):
            raise ValueError(f"vector {key!r} has shape {v.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"vector {key!r} contains non-finite values")
        self._vectors[key] = v

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def get(self, key: str) -> np.ndarray:
        return self._vectors[key]

    def ids(self) -> list[str]:
        return sorted(self._vectors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore) or self.dim != other.dim:
            return False
        if set(self._vectors) != set(other._vectors):
            return False
        return all(
            np.array_equal(v, other._vectors[k], equal_nan=True)
            for k, v in self._vectors.items()
        )


def write_embeddings(store: EmbeddingStore, path) -> None:
    if len(store) == 0:
        raise ValueError("refusing to write an empty embedding store")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", store.dim, len(store)))
        for key in store.ids():
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"id too long for format: {key[:40]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(store.get(key).astype("<f4").tobytes())


def read_embeddings(path, expected_dim: int | None = None) -> EmbeddingStore:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {_MAGIC!r}", 0)
    if len(data) < 12:
        raise FormatError("truncated header", len(data))
    dim, count = struct.unpack_from("<II", data, 4)
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"dim {dim} != expected {expected_dim}", 4)
    store = EmbeddingStore(dim)
    offset = 12
    vec_bytes = 4 * dim
    for _ in range(count):
        if offset + 2 > len(data):
            raise FormatError("truncated record header", offset)
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(data):
            raise FormatError("truncated record", offset)
        key = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        values = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        store.add(key, values)
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes", offset)
    return store


def join_embeddings(
    store: EmbeddingStore, manifest: DatasetManifest, split: str | None
) -> tuple[np.ndarray, np.ndarray]:
    """Stack the split's vectors in manifest order with integer class labels.

    Class indices follow the manifest's sorted label set. Raises listing
    every id that has no vector.
    """
    entries = manifest.subset(split) if split is not None else manifest.entries
    missing = [e.path for e in entries if e.path not in store]
    if missing:
        raise ValueError(f"missing embeddings for {len(missing)} ids: {missing[:10]}")
    label_index = {label: i for i, label in enumerate(manifest.labels())}
    x = np.zeros((len(entries), store.dim), dtype=np.float64)
    y = np.zeros(len(entries), dtype=np.int64)
    for row, e in enumerate(entries):
        x[row] = store.get(e.path)
        y[row] = label_index[e.label]
    return x, y
