"""Chest-radiograph embedding tables and their alignment to hourly EHR rows."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cohort import CxrSource, CxrStudy, Encounter

CXRE_MAGIC = b"CXRE"
OTHER_DEPT_LOOKBACK_HOURS = 72.0


class EmbeddingFileError(ValueError):
    """Malformed embedding file; ``code`` is TRUNCATED, BAD_MAGIC, INVALID_DIM or DIM_MISMATCH."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class UnresolvedEmbedding(KeyError):
    pass


@dataclass
class CxrEmbeddingTable:
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    encoder: str = ""

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise EmbeddingFileError("INVALID_DIM", f"dimension {self.dim}")
        for key, vec in self.entries.items():
            self._check(key, vec)

    def _check(self, key: str, vec: np.ndarray) -> None:
        if vec.shape != (self.dim,):
            raise EmbeddingFileError("DIM_MISMATCH", f"{key!r} has shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"embedding {key!r} has non-finite values")

    def add(self, key: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float32)
        self._check(key, vec)
        self.entries[key] = vec

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self.entries[key]
        except KeyError:
            raise UnresolvedEmbedding(key) from None

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def save_embeddings(path: str | Path, table: CxrEmbeddingTable) -> None:
    """Write the CXRE binary file plus a ``.encoder`` text sidecar.

    Entries are written in sorted key order so identical tables produce
    identical bytes.
    """
    path = Path(path)
    parts = [CXRE_MAGIC, struct.pack("<II", len(table.entries), table.dim)]
    for key in sorted(table.entries):
        kb = key.encode("utf-8")
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(np.asarray(table.entries[key], dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))
    path.with_suffix(path.suffix + ".encoder").write_text(table.encoder + "\n")


def load_embeddings(path: str | Path) -> CxrEmbeddingTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise EmbeddingFileError("TRUNCATED", "file shorter than magic")
    if raw[:4] != CXRE_MAGIC:
        raise EmbeddingFileError("BAD_MAGIC", repr(raw[:4]))
    if len(raw) < 12:
        raise EmbeddingFileError("TRUNCATED", "header incomplete")
    count, dim = struct.unpack_from("<II", raw, 4)
    if dim == 0:
        raise EmbeddingFileError("INVALID_DIM", "dimension 0")
    off = 12
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        if off + 2 > len(raw):
            raise EmbeddingFileError("TRUNCATED", f"entry {i} id length")
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        end = off + klen + 4 * dim
        if end > len(raw):
            raise EmbeddingFileError("TRUNCATED", f"entry {i} payload")
        key = raw[off : off + klen].decode("utf-8")
        off += klen
        entries[key] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).astype(np.float32)
        off = end
    if off != len(raw):
        raise EmbeddingFileError("DIM_MISMATCH", f"{len(raw) - off} trailing bytes")
    sidecar = path.with_suffix(path.suffix + ".encoder")
    encoder = sidecar.read_text().rstrip("\n") if sidecar.exists() else ""
    return CxrEmbeddingTable(dim, entries, encoder)


@dataclass
class AlignedSample:
    encounter_id: str
    timestamp: float
    row: int
    study_id: str
    embedding_key: str
    embedding_age_hours: float


def match_study(
    studies: list[CxrStudy], t: float, lookback: float = OTHER_DEPT_LOOKBACK_HOURS
) -> Optional[CxrStudy]:
    """Most recent eligible study at time ``t``.

    ICU studies stay eligible for the rest of the encounter and take priority.
    Without one, a study from another department qualifies within
    ``lookback`` hours. Ties go to the smallest study_id.
    """

    def latest(candidates):
        best: Optional[CxrStudy] = None
        for s in candidates:
            if best is None or (s.acquired_at, best.study_id) > (best.acquired_at, s.study_id):
                best = s
        return best

    prior = [s for s in studies if s.acquired_at <= t]
    icu = latest(s for s in prior if s.source is CxrSource.ICU)
    if icu is not None:
        return icu
    return latest(s for s in prior if s.source is CxrSource.OTHER_DEPT and t - s.acquired_at <= lookback)


def align(
    e: Encounter,
    timestamps,
    table: Optional[CxrEmbeddingTable] = None,
    lookback: float = OTHER_DEPT_LOOKBACK_HOURS,
) -> list[AlignedSample]:
    """Pair each feature row with its most recent eligible radiograph; unmatched rows are dropped."""
    if table is not None:
        for s in e.cxr_studies:
            if s.embedding_key not in table:
                raise UnresolvedEmbedding(s.embedding_key)
    out = []
    for i, t in enumerate(np.asarray(timestamps, dtype=float)):
        s = match_study(e.cxr_studies, float(t), lookback)
        if s is None:
            continue
        out.append(
            AlignedSample(e.encounter_id, float(t), i, s.study_id, s.embedding_key, float(t) - s.acquired_at)
        )
    return out
