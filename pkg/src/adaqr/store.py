"""Data model and on-disk formats for queries, documents, embeddings and qrels.

Record files are UTF-8 JSON lines. An optional first line ``{"dim": N}`` pins the
embedding dimension; otherwise the first embedding seen sets it. Every record is
an object with ``id``, ``text`` and ``embedding`` (queries may also carry
``reasoned_text``, ``reasoned_embedding`` and ``dataset_tag``).

Embeddings are held as read-only 1-D float64 numpy arrays.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DataError,
    DimensionMismatchError,
    DuplicateIdError,
    MalformedRecordError,
    NegativeGradeError,
    NonFiniteError,
)

log = logging.getLogger(__name__)

Embedding = np.ndarray

SIDECAR_MAGIC = b"ADQR"
SIDECAR_VERSION = 1


def as_embedding(values, dim: int | None = None, what: str = "embedding") -> Embedding:
    """Validate ``values`` and return them as a frozen float64 vector."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError(f"{what} must be a non-empty 1-D sequence of numbers")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")
    if dim is not None and arr.size != dim:
        raise DimensionMismatchError(f"{what} has dim {arr.size}, expected {dim}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class QueryRecord:
    id: str
    text: str
    embedding: Embedding | None = None
    reasoned_text: str | None = None
    reasoned_embedding: Embedding | None = None
    dataset_tag: str = ""

    def __post_init__(self):
        if not self.id:
            raise DataError("query id must be non-empty")
        e, r = self.embedding, self.reasoned_embedding
        if e is not None and r is not None and e.shape != r.shape:
            raise DimensionMismatchError(
                f"query {self.id!r}: embedding dim {e.size} != reasoned dim {r.size}"
            )

    @property
    def dim(self) -> int | None:
        for v in (self.embedding, self.reasoned_embedding):
            if v is not None:
                return int(v.size)
        return None


@dataclass(frozen=True, eq=False)
class Document:
    id: str
    text: str
    embedding: Embedding

    def __post_init__(self):
        if not self.id:
            raise DataError("document id must be non-empty")

    @property
    def dim(self) -> int:
        return int(self.embedding.size)


class Corpus(Sequence):
    """Immutable document collection with a stacked embedding matrix."""

    def __init__(self, documents: Iterable[Document] = ()):
        docs = list(documents)
        seen = set()
        dim = None
        for d in docs:
            if d.id in seen:
                raise DuplicateIdError(f"duplicate document id {d.id!r}")
            seen.add(d.id)
            if dim is None:
                dim = d.dim
            elif d.dim != dim:
                raise DimensionMismatchError(
                    f"document {d.id!r} has dim {d.dim}, corpus dim is {dim}"
                )
        self._docs = tuple(docs)
        self.dim = dim
        self.ids = tuple(d.id for d in docs)
        if docs:
            m = np.vstack([d.embedding for d in docs])
        else:
            m = np.zeros((0, 0))
        m.flags.writeable = False
        self.matrix = m
        self._unit = None

    def __len__(self):
        return len(self._docs)

    def unit_matrix(self) -> np.ndarray:
        """Row-normalized embedding matrix, computed once."""
        if self._unit is None:
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.any(norms == 0):
                bad = self.ids[int(np.argmin(norms))]
                raise DataError(f"document {bad!r} has a zero-norm embedding")
            u = self.matrix / norms[:, None]
            u.flags.writeable = False
            self._unit = u
        return self._unit

    def __getitem__(self, i):
        return self._docs[i]

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __repr__(self):
        return f"Corpus(n={len(self)}, dim={self.dim})"


@dataclass(frozen=True)
class RelevanceJudgments:
    entries: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        for qid, docs in self.entries.items():
            if not docs:
                raise DataError(f"query {qid!r} has no judged documents")
            for did, g in docs.items():
                if g < 0:
                    raise DataError(f"negative grade for ({qid}, {did})")

    def __contains__(self, qid):
        return qid in self.entries

    def grades(self, qid: str) -> dict[str, int]:
        return self.entries[qid]

    @property
    def query_ids(self):
        return list(self.entries)


@dataclass(frozen=True, eq=False)
class EmbeddingPairSet:
    """Aligned (original, reasoned) embedding rows, shape (M, dim) each."""

    originals: np.ndarray
    reasoned: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        o, r = self.originals, self.reasoned
        if o.ndim != 2 or o.shape != r.shape:
            raise DimensionMismatchError(
                f"pair arrays must be 2-D with equal shapes, got {o.shape} and {r.shape}"
            )
        if o.shape[0] < 1 or o.shape[1] < 1:
            raise DataError("pair set must hold at least one pair of dim >= 1")
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(r))):
            raise NonFiniteError("pair set contains non-finite values")
        if self.ids is not None and len(self.ids) != o.shape[0]:
            raise DataError("ids length does not match pair count")

    @property
    def dim(self) -> int:
        return int(self.originals.shape[1])

    def __len__(self):
        return int(self.originals.shape[0])

    @classmethod
    def from_records(cls, records: Sequence[QueryRecord]) -> "EmbeddingPairSet":
        if not records:
            raise DataError("cannot build a pair set from zero records")
        for r in records:
            if r.embedding is None or r.reasoned_embedding is None:
                raise DataError(f"query {r.id!r} lacks an original or reasoned embedding")
        return cls(
            np.vstack([r.embedding for r in records]),
            np.vstack([r.reasoned_embedding for r in records]),
            tuple(r.id for r in records),
        )


# -- JSON-lines record files -------------------------------------------------


def _iter_json_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(path, line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedRecordError(path, line_no, "record is not an object")
            yield line_no, obj


def _is_header(obj) -> bool:
    return "id" not in obj and "dim" in obj


def _read_vector(obj, key, path, line_no, rid, dim):
    raw = obj.get(key)
    if raw is None:
        return None
    if not isinstance(raw, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
    ):
        raise MalformedRecordError(path, line_no, f"{key} must be an array of numbers")
    if not raw:
        raise MalformedRecordError(path, line_no, f"{key} is empty")
    if dim is not None and len(raw) != dim:
        raise DimensionMismatchError(
            f"{path}:{line_no}: record {rid!r} {key} has {len(raw)} values, expected dim {dim}"
        )
    if not all(math.isfinite(v) for v in raw):
        raise NonFiniteError(f"{path}:{line_no}: record {rid!r} {key} has non-finite values")
    return as_embedding(raw)


def _read_records(path, kind):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    dim = None
    seen = set()
    out = []
    first = True
    for line_no, obj in _iter_json_lines(path):
        if first and _is_header(obj):
            first = False
            dim = obj["dim"]
            if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
                raise MalformedRecordError(path, line_no, "header dim must be a positive integer")
            continue
        first = False
        rid = obj.get("id")
        if not isinstance(rid, str) or not rid:
            raise MalformedRecordError(path, line_no, "missing or empty id")
        text = obj.get("text", "")
        if not isinstance(text, str):
            raise MalformedRecordError(path, line_no, "text must be a string")
        if rid in seen:
            raise DuplicateIdError(f"{path}:{line_no}: duplicate id {rid!r}")
        seen.add(rid)
        emb = _read_vector(obj, "embedding", path, line_no, rid, dim)
        if emb is not None and dim is None:
            dim = emb.size
        if kind == "document":
            if emb is None:
                raise MalformedRecordError(path, line_no, f"document {rid!r} has no embedding")
            out.append(Document(rid, text, emb))
            continue
        remb = _read_vector(obj, "reasoned_embedding", path, line_no, rid, dim)
        if remb is not None and dim is None:
            dim = remb.size
        rtext = obj.get("reasoned_text")
        if rtext is not None and not isinstance(rtext, str):
            raise MalformedRecordError(path, line_no, "reasoned_text must be a string")
        tag = obj.get("dataset_tag", "")
        if not isinstance(tag, str):
            raise MalformedRecordError(path, line_no, "dataset_tag must be a string")
        out.append(QueryRecord(rid, text, emb, rtext, remb, tag))
    return out


def load_query_collection(path) -> list[QueryRecord]:
    return _read_records(path, "query")


def load_corpus(path) -> Corpus:
    return Corpus(_read_records(path, "document"))


def load_pairs(path) -> EmbeddingPairSet:
    """Read a query-record file whose records all carry both embeddings."""
    return EmbeddingPairSet.from_records(load_query_collection(path))


def _vec(v):
    return None if v is None else [float(x) for x in v]


def record_to_dict(rec) -> dict:
    d = {"id": rec.id, "text": rec.text}
    if rec.embedding is not None:
        d["embedding"] = _vec(rec.embedding)
    if isinstance(rec, QueryRecord):
        if rec.reasoned_text is not None:
            d["reasoned_text"] = rec.reasoned_text
        if rec.reasoned_embedding is not None:
            d["reasoned_embedding"] = _vec(rec.reasoned_embedding)
        d["dataset_tag"] = rec.dataset_tag
    return d


def save_embeddings(records: Iterable[QueryRecord | Document], path) -> None:
    """Write records as JSON lines; floats use shortest round-trip repr."""
    records = list(records)
    dim = next((r.dim for r in records if r.dim is not None), None)
    with open(path, "w", encoding="utf-8") as fh:
        if dim is not None:
            fh.write(json.dumps({"dim": dim, "count": len(records)}) + "\n")
        for r in records:
            fh.write(json.dumps(record_to_dict(r), ensure_ascii=False) + "\n")


# -- qrels -------------------------------------------------------------------


def load_qrels(path) -> RelevanceJudgments:
    path = Path(path)
    entries: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise MalformedRecordError(path, line_no, f"expected 4 columns, got {len(parts)}")
            qid, _, did, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise MalformedRecordError(path, line_no, f"grade {grade!r} is not an integer") from None
            if g < 0:
                raise NegativeGradeError(path, line_no, f"negative grade {g}")
            docs = entries.setdefault(qid, {})
            if did in docs:
                log.warning("%s:%d: duplicate judgment (%s, %s); keeping last", path, line_no, qid, did)
            docs[did] = g
    return RelevanceJudgments(entries)


def save_qrels(judgments: RelevanceJudgments, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, docs in judgments.entries.items():
            for did, g in docs.items():
                fh.write(f"{qid} 0 {did} {g}\n")


# -- binary sidecar ----------------------------------------------------------


def save_embeddings_binary(ids: Sequence[str], matrix, path) -> None:
    """Write ``ADQR`` f32 sidecar at ``path`` plus an id index at ``path + '.ids'``."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != len(ids):
        raise DataError("matrix must be 2-D with one row per id")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains non-finite values")
    count, dim = m.shape
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC + struct.pack("<III", SIDECAR_VERSION, dim, count))
        fh.write(m.astype("<f4").tobytes())
    with open(str(path) + ".ids", "w", encoding="utf-8") as fh:
        for i in ids:
            fh.write(i + "\n")


def load_embeddings_binary(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != SIDECAR_MAGIC:
        raise DataError(f"{path}: not an ADQR embedding file")
    version, dim, count = struct.unpack("<III", raw[4:16])
    if version != SIDECAR_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    body = raw[16:]
    if len(body) != 4 * dim * count:
        raise DimensionMismatchError(
            f"{path}: payload has {len(body)} bytes, header implies {4 * dim * count}"
        )
    m = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, dim)
    ids = Path(str(path) + ".ids").read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise DataError(f"{path}: id index has {len(ids)} entries, header count is {count}")
    if len(set(ids)) != len(ids):
        raise DuplicateIdError(f"{path}: duplicate ids in index")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{path}: non-finite values")
    return ids, m
