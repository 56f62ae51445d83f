"""Binary feature banks: on-disk storage for precomputed embedding vectors.

A bank file holds a fixed-dimension matrix of unit-norm float32 vectors and is
paired with a JSON-lines sidecar mapping row numbers to string ids. Banks are
immutable after load and safe for concurrent readers.

File layout (little-endian):
    magic "ADFB" | version u32 | dim u32 | count u64 | count * dim float32 rows
Sidecar `<stem>.ids.jsonl`: one ``{"row": i, "id": ..., "modality": ...}``
object per record, rows contiguous from 0.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"ADFB"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIQ")
NORM_TOL = 1e-4

MODALITIES = ("image", "label_text", "scene_text", "brand_prompt", "region")


class BankError(Exception):
    """Base class for feature-bank failures."""


class BankFormatError(BankError):
    """Corrupt header, bad magic/version, or file size inconsistent with it."""


class DimensionMismatchError(BankError):
    """Vector dimensionality disagrees with the bank's declared dim."""


class DuplicateIdError(BankError):
    """Two records share an id."""


class NonFiniteVectorError(BankError):
    """A stored vector contains NaN or infinity."""


class UnnormalizedVectorError(BankError):
    """A stored vector's L2 norm deviates from 1 by more than the tolerance."""


class UnknownIdError(BankError, KeyError):
    """Lookup of an id the bank does not hold."""


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray


class FeatureBank:
    """Immutable id-indexed matrix of unit-norm embedding vectors.

    Vectors are kept exactly as stored (float32); the load path validates
    norms against ``NORM_TOL`` instead of rewriting them, which keeps
    ``load(save(bank))`` bit-exact. Lookup is O(1) via a dict index.
    """

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, modality: str | None):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise DimensionMismatchError(f"expected a 2-D vector matrix, got shape {vectors.shape}")
        if len(ids) != vectors.shape[0]:
            raise DimensionMismatchError(f"{len(ids)} ids for {vectors.shape[0]} rows")
        if vectors.shape[0] > 0 and vectors.shape[1] < 1:
            raise DimensionMismatchError("vector dimension must be positive")
        if modality is not None and modality not in MODALITIES:
            raise BankError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
        if modality is None and len(ids) > 0:
            raise BankError("non-empty bank requires a modality tag")
        if not np.isfinite(vectors).all():
            bad = int(np.argwhere(~np.isfinite(vectors).all(axis=1))[0, 0])
            raise NonFiniteVectorError(f"non-finite value in row {bad} ({ids[bad]!r})")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0) > NORM_TOL
        if off.any():
            bad = int(np.argmax(off))
            raise UnnormalizedVectorError(
                f"unnormalized vector in row {bad} ({ids[bad]!r}): norm {norms[bad]:.6g}"
            )
        index: dict[str, int] = {}
        for row, rid in enumerate(ids):
            if rid in index:
                raise DuplicateIdError(f"duplicate id {rid!r} (rows {index[rid]} and {row})")
            index[rid] = row
        vectors.setflags(write=False)
        self._ids = tuple(ids)
        self._vectors = vectors
        self._index = index
        self.modality = modality

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._index

    def row(self, record_id: str) -> int:
        try:
            return self._index[record_id]
        except KeyError:
            raise UnknownIdError(f"unknown id {record_id!r}") from None

    def get(self, record_id: str) -> np.ndarray:
        """Return the stored vector for ``record_id`` (read-only view)."""
        return self._vectors[self.row(record_id)]

    __getitem__ = get

    def get_many(self, record_ids: Sequence[str]) -> np.ndarray:
        rows = [self.row(r) for r in record_ids]
        return self._vectors[rows]

    def records(self) -> Iterator[EmbeddingRecord]:
        for rid, vec in zip(self._ids, self._vectors):
            yield EmbeddingRecord(rid, vec)


def get(bank: FeatureBank, record_id: str) -> np.ndarray:
    return bank.get(record_id)


def sidecar_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".ids.jsonl")


def save_bank(bank: FeatureBank, path: Path | str) -> None:
    """Write ``bank`` to ``path`` plus its id sidecar; deterministic bytes."""
    path = Path(path)
    dim = bank.dim if len(bank) else bank.vectors.shape[1]
    header = HEADER.pack(MAGIC, FORMAT_VERSION, dim, len(bank))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bank.vectors.astype("<f4", copy=False).tobytes())
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        for row, rid in enumerate(bank.ids):
            fh.write(
                json.dumps(
                    {"row": row, "id": rid, "modality": bank.modality},
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )


def _read_sidecar(path: Path, count: int) -> tuple[list[str], str | None]:
    side = sidecar_path(path)
    if not side.exists():
        raise BankFormatError(f"missing id sidecar {side}")
    ids: list[str] = []
    modalities: set[str] = set()
    with open(side, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                row, rid, modality = obj["row"], obj["id"], obj["modality"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise BankFormatError(f"{side}:{lineno + 1}: bad sidecar row: {exc}") from exc
            if row != len(ids):
                raise BankFormatError(f"{side}: rows not contiguous at line {lineno + 1} (got {row})")
            ids.append(str(rid))
            if modality is not None:
                modalities.add(str(modality))
    if len(ids) != count:
        raise BankFormatError(f"{side}: {len(ids)} sidecar rows for {count} bank records")
    if len(modalities) > 1:
        raise BankFormatError(f"{side}: mixed modalities {sorted(modalities)}")
    return ids, (modalities.pop() if modalities else None)


def load_bank(path: Path | str, mmap: bool = False) -> FeatureBank:
    """Load and validate a bank file; raises a distinct error per defect."""
    path = Path(path)
    size = path.stat().st_size
    if size < HEADER.size:
        raise BankFormatError(f"{path}: file shorter than header")
    with open(path, "rb") as fh:
        magic, version, dim, count = HEADER.unpack(fh.read(HEADER.size))
        if magic != MAGIC:
            raise BankFormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise BankFormatError(f"{path}: unsupported format version {version}")
        if count > 0 and dim < 1:
            raise BankFormatError(f"{path}: non-positive dim {dim}")
        expected = HEADER.size + count * dim * 4
        if size != expected:
            raise BankFormatError(f"{path}: size {size} != header-implied {expected}")
        if mmap:
            vectors = np.memmap(path, dtype="<f4", mode="r", offset=HEADER.size, shape=(count, dim))
            vectors = np.asarray(vectors)
        else:
            vectors = np.fromfile(fh, dtype="<f4", count=count * dim).reshape(count, dim)
    ids, modality = _read_sidecar(path, count)
    return FeatureBank(ids, vectors, modality)
