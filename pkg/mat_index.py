"""Half-precision vector store with exact search at any Matryoshka prefix.

Shard file layout (little-endian)::

    magic "MATIDX1" | u16 version | u32 d_max | u32 stored_dim | u32 n_dims
    | u32 x n_dims dims | u64 count | i64 created_at
    | i64 x count ids | f16 x count x stored_dim vectors
"""

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from model_zoo import validate_dims

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"MATIDX1"
INDEX_VERSION = 1
HALF_MAX = 65504.0
UNIT_NORM_TOLERANCE = 1e-3
TIMER_RESOLUTION_S = time.get_clock_info("perf_counter").resolution

_FIXED_HEADER = struct.Struct("<7sHIII")
_TAIL_HEADER = struct.Struct("<Qq")


class IndexFormatError(ValueError):
    """Raised for invalid shard contents or malformed shard files."""

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class SearchResult(NamedTuple):
    hits: List[Tuple[int, float]]
    dim: int
    latency_s: float

    @property
    def ids(self) -> List[int]:
        return [doc_id for doc_id, _ in self.hits]


class CostRow(NamedTuple):
    dim: int
    docs_per_s: float
    bytes: int
    median_s: float
    p95_s: float


@dataclass
class CostReport:
    rows: List[CostRow] = field(default_factory=list)

    def to_records(self) -> List[dict]:
        return [row._asdict() for row in self.rows]

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in self.to_records()), encoding="utf-8")
        return path


@dataclass(frozen=True, eq=False)
class IndexShard:
    d_max: int
    dims: Tuple[int, ...]
    ids: np.ndarray
    vectors: np.ndarray
    created_at: int
    build_seconds: float = field(default=0.0, compare=False)

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    @property
    def stored_dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def docs_per_s(self) -> float:
        # a build faster than the clock can resolve still reports a finite rate
        return self.count / max(self.build_seconds, TIMER_RESOLUTION_S)


def expected_size(count: int, stored_dim: int, n_dims: int) -> int:
    """Exact shard file size in bytes."""
    header = _FIXED_HEADER.size + 4 * n_dims + _TAIL_HEADER.size
    return header + 8 * count + 2 * count * stored_dim


def to_half(values: np.ndarray) -> Tuple[np.ndarray, List[str]]:
    """Round to IEEE binary16 (nearest-even), clamping to +/-65504."""
    values = np.asarray(values, dtype=np.float64)
    warnings: List[str] = []
    over = np.abs(values) > HALF_MAX
    if over.any():
        warnings.append(f"{int(over.sum())} value(s) exceed the half-precision range; clamped to +/-{HALF_MAX:g}")
        logger.warning(warnings[-1])
        values = np.clip(values, -HALF_MAX, HALF_MAX)
    return values.astype("<f2"), warnings


def half_bits(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype="<f2").view("<u2")


def build(docs: Iterable[Tuple[int, np.ndarray]], dims: Sequence[int], d_max: Optional[int] = None,
          created_at: Optional[int] = None, stored_dim: Optional[int] = None) -> IndexShard:
    """Quantize ``(id, vector)`` pairs into an immutable shard.

    ``stored_dim`` below ``d_max`` materializes only that many leading columns.
    """
    started = time.perf_counter()
    pairs = list(docs)
    if d_max is None:
        if not pairs:
            raise IndexFormatError("d_max is required to build an empty shard")
        d_max = int(np.asarray(pairs[0][1]).shape[-1])
    dims = validate_dims(dims, d_max)
    stored_dim = d_max if stored_dim is None else int(stored_dim)
    if not 0 < stored_dim <= d_max:
        raise IndexFormatError(f"stored_dim must be in 1..{d_max}, got {stored_dim}")

    ids = np.array([int(doc_id) for doc_id, _ in pairs], dtype="<i8")
    if np.unique(ids).shape[0] != ids.shape[0]:
        values, counts = np.unique(ids, return_counts=True)
        raise IndexFormatError(f"duplicate document id {int(values[counts > 1][0])}")
    rows = np.zeros((len(pairs), d_max))
    for i, (doc_id, vector) in enumerate(pairs):
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.shape[0] != d_max:
            raise IndexFormatError(f"document {doc_id} has width {vector.shape[0]}, expected {d_max}")
        rows[i] = vector
    if pairs:
        off_unit = np.abs(np.linalg.norm(rows, axis=1) - 1.0) > UNIT_NORM_TOLERANCE
        if off_unit.any():
            logger.warning(f"{int(off_unit.sum())} document vector(s) are not unit norm")

    half, _ = to_half(rows[:, :stored_dim])
    half.setflags(write=False)
    ids.setflags(write=False)
    stamp = int(time.time()) if created_at is None else int(created_at)
    elapsed = time.perf_counter() - started
    return IndexShard(d_max=d_max, dims=dims, ids=ids, vectors=half, created_at=stamp, build_seconds=elapsed)


def prefix_store(shard: IndexShard, dim: int) -> IndexShard:
    """A shard holding only the first ``dim`` columns."""
    if dim not in shard.dims:
        raise IndexFormatError(f"dimension {dim} is not configured for this shard {list(shard.dims)}")
    if dim > shard.stored_dim:
        raise IndexFormatError(f"shard stores {shard.stored_dim} columns, cannot materialize {dim}")
    vectors = np.ascontiguousarray(shard.vectors[:, :dim])
    vectors.setflags(write=False)
    return IndexShard(shard.d_max, shard.dims, shard.ids, vectors, shard.created_at)


def _normalized(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / np.where(norms == 0.0, 1.0, norms)


def search(shard: IndexShard, query: np.ndarray, dim: int, k: int) -> SearchResult:
    """Exhaustive scan at prefix ``dim``; ties go to the lower document id."""
    if dim not in shard.dims:
        raise IndexFormatError(f"dimension {dim} is not configured for this shard {list(shard.dims)}")
    if dim > shard.stored_dim:
        raise IndexFormatError(f"shard stores {shard.stored_dim} columns; cannot search at {dim}")
    if k < 1:
        raise IndexFormatError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] < dim:
        raise IndexFormatError(f"query has {query.shape[0]} values, needs at least {dim}")

    started = time.perf_counter()
    q = _normalized(query[:dim])
    docs = _normalized(shard.vectors[:, :dim].astype(np.float64))
    scores = docs @ q
    order = np.lexsort((shard.ids, -scores))[:k]
    hits = [(int(shard.ids[i]), float(scores[i])) for i in order]
    return SearchResult(hits=hits, dim=dim, latency_s=time.perf_counter() - started)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def shard_bytes(shard: IndexShard) -> bytes:
    header = _FIXED_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, shard.d_max, shard.stored_dim, len(shard.dims))
    header += struct.pack(f"<{len(shard.dims)}I", *shard.dims)
    header += _TAIL_HEADER.pack(shard.count, shard.created_at)
    return header + np.ascontiguousarray(shard.ids, dtype="<i8").tobytes() + np.ascontiguousarray(shard.vectors, dtype="<f2").tobytes()


def save(shard: IndexShard, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(shard_bytes(shard))
    logger.debug(f"Saved shard of {shard.count} docs ({shard.stored_dim} columns) to {path}")
    return path


def parse_shard(blob: bytes) -> IndexShard:
    if len(blob) < _FIXED_HEADER.size:
        raise IndexFormatError("file too short for shard header", len(blob))
    magic, version, d_max, stored_dim, n_dims = _FIXED_HEADER.unpack_from(blob, 0)
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}", 0)
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported shard version {version}", len(INDEX_MAGIC))
    offset = _FIXED_HEADER.size
    if len(blob) < offset + 4 * n_dims + _TAIL_HEADER.size:
        raise IndexFormatError("truncated header", len(blob))
    dims = struct.unpack_from(f"<{n_dims}I", blob, offset)
    offset += 4 * n_dims
    count, created_at = _TAIL_HEADER.unpack_from(blob, offset)
    offset += _TAIL_HEADER.size
    expected = expected_size(count, stored_dim, n_dims)
    if len(blob) != expected:
        raise IndexFormatError(f"file holds {len(blob)} bytes but header implies {expected}", min(len(blob), expected))
    try:
        validate_dims(dims, d_max)
    except ValueError as e:
        raise IndexFormatError(f"invalid dims in header: {e}", _FIXED_HEADER.size)
    ids = np.frombuffer(blob, dtype="<i8", count=count, offset=offset).copy()
    offset += 8 * count
    vectors = np.frombuffer(blob, dtype="<f2", count=count * stored_dim, offset=offset).reshape(count, stored_dim).copy()
    ids.setflags(write=False)
    vectors.setflags(write=False)
    return IndexShard(int(d_max), tuple(int(d) for d in dims), ids, vectors, int(created_at))


def load(path: Union[str, Path]) -> IndexShard:
    return parse_shard(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# cost benchmark
# ---------------------------------------------------------------------------

def bench(ids: Sequence[int], vectors: np.ndarray, dims: Sequence[int], queries: np.ndarray, k: int = 1,
          repetitions: int = 5, created_at: int = 0, workdir: Optional[Union[str, Path]] = None) -> CostReport:
    """Per-dimension indexing throughput, disk footprint and scan latency.

    Each dim gets a prefix-only store. Latency covers the index scan only, over
    every query times ``repetitions`` after one untimed warm-up query.
    """
    if repetitions < 3:
        raise IndexFormatError(f"repetitions must be >= 3, got {repetitions}")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[0] == 0 or queries.size == 0:
        raise IndexFormatError("bench needs at least one query")
    vectors = np.asarray(vectors, dtype=np.float64)
    d_max = vectors.shape[1]
    dims = validate_dims(dims, d_max)

    report = CostReport()
    for dim in dims:
        shard = build(zip(ids, vectors), dims, d_max=d_max, created_at=created_at, stored_dim=dim)
        blob = shard_bytes(shard)
        if workdir is not None:
            size = save(shard, Path(workdir) / f"prefix_{dim}.idx").stat().st_size
        else:
            size = len(blob)
        if size != expected_size(shard.count, dim, len(dims)):
            raise IndexFormatError(f"prefix store at dim {dim} has {size} bytes, format implies {expected_size(shard.count, dim, len(dims))}")

        search(shard, queries[0], dim, k)
        latencies = []
        for _ in range(repetitions):
            for query in queries:
                started = time.perf_counter()
                search(shard, query, dim, k)
                latencies.append(time.perf_counter() - started)
        row = CostRow(
            dim=dim,
            docs_per_s=shard.docs_per_s,
            bytes=size,
            median_s=float(np.percentile(latencies, 50)),
            p95_s=float(np.percentile(latencies, 95)),
        )
        logger.info(f"📊 dim {dim}: {row.docs_per_s:.0f} docs/s, {row.bytes} bytes, median {row.median_s * 1e6:.1f} us")
        report.rows.append(row)
    return report
