"""Dataset ingestion: manifests, embedding files, filters and stratified splits.

File formats
------------
Manifest: one JSON object per line with fields exactly ``song_id``,
``platform``, ``streams``, ``likes``, ``coherence``, ``musicality``,
``memorability``, ``clarity``, ``naturalness`` (the five nullable),
``released_at`` (ISO-8601, nullable) and ``embedding_ref``. Manifests
augmented by the ``score`` command additionally carry ``streams_score``
and ``likes_score``; those two are the only extra keys tolerated.

Embedding file (one per song): 8 ASCII magic bytes ``APEXEMB1``, then
little-endian u32 fields version=1, n_segments, n_layers=4, dim=768,
then n_segments*4*768 little-endian float32 values ordered segment-major,
then layer, then dimension.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, EmbeddingFormatError, ManifestError
from .ioutil import atomic_write_bytes, atomic_write_text
from .ranking import average_ranks

EMBEDDING_MAGIC = b"APEXEMB1"
EMBEDDING_VERSION = 1
N_LAYERS = 4
EMBED_DIM = 768

AESTHETIC_FIELDS = ("coherence", "musicality", "memorability", "clarity", "naturalness")
MANIFEST_FIELDS = (
    "song_id", "platform", "streams", "likes",
    *AESTHETIC_FIELDS, "released_at", "embedding_ref",
)
OPTIONAL_SCORE_FIELDS = ("streams_score", "likes_score")
PLATFORMS = ("udio", "suno", "other")


@dataclass(frozen=True)
class SongRecord:
    song_id: str
    platform: str
    streams: int
    likes: int
    aesthetic_labels: Optional[tuple[float, float, float, float, float]] = None
    released_at: Optional[datetime] = None
    embedding_ref: str = ""
    # populated programmatically, never read from manifests
    audio_hash: Optional[str] = None
    # present on manifests written by the `score` command
    streams_score: Optional[float] = None
    likes_score: Optional[float] = None

    def __post_init__(self):
        if self.streams < 0 or self.likes < 0:
            raise ValueError(f"{self.song_id}: counts must be non-negative")
        if self.platform not in PLATFORMS:
            raise ValueError(f"{self.song_id}: unknown platform {self.platform!r}")
        if self.aesthetic_labels is not None:
            if len(self.aesthetic_labels) != 5:
                raise ValueError(f"{self.song_id}: expected 5 aesthetic labels")
            for v in self.aesthetic_labels:
                if not (1.0 <= v <= 5.0):
                    raise ValueError(f"{self.song_id}: aesthetic label {v} outside [1, 5]")


@dataclass(frozen=True)
class SegmentEmbeddingSet:
    song_id: str
    values: np.ndarray  # (n_segments, 4, 768) float64

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1:] != (N_LAYERS, EMBED_DIM):
            raise DimensionError(
                f"{self.song_id}: embedding shape {self.values.shape} != (n, 4, 768)")
        if self.values.shape[0] < 1:
            raise DimensionError(f"{self.song_id}: need at least one segment")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.song_id}: embeddings contain non-finite values")

    @property
    def n_segments(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FilterRules:
    drop_zero_streams: bool = False
    dedup_key: Optional[str] = None  # "song_id" or "audio_hash"
    recency_cutoff: Optional[datetime] = None  # drop songs released after this

    def __post_init__(self):
        if self.dedup_key not in (None, "song_id", "audio_hash"):
            raise ValueError(f"unknown dedup key {self.dedup_key!r}")


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    val_ids: frozenset[str]
    fractions: tuple[float, float, float]

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {self.fractions}")
        if (self.train_ids & self.test_ids or self.train_ids & self.val_ids
                or self.test_ids & self.val_ids):
            raise ValueError("split sets must be pairwise disjoint")


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def parse_timestamp(text: str) -> datetime:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _record_from_obj(obj: dict, lineno: int) -> SongRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    unknown = set(obj) - set(MANIFEST_FIELDS) - set(OPTIONAL_SCORE_FIELDS)
    if unknown:
        raise ManifestError(f"line {lineno}: unknown field {sorted(unknown)[0]}")
    for name in MANIFEST_FIELDS:
        if name not in obj:
            raise ManifestError(f"line {lineno}: missing field {name}")

    aes_raw = [obj[f] for f in AESTHETIC_FIELDS]
    if all(v is None for v in aes_raw):
        aesthetics = None
    elif any(v is None for v in aes_raw):
        raise ManifestError(f"line {lineno}: aesthetic labels must all be set or all null")
    else:
        aesthetics = tuple(float(v) for v in aes_raw)

    released = obj["released_at"]
    try:
        record = SongRecord(
            song_id=str(obj["song_id"]),
            platform=str(obj["platform"]),
            streams=int(obj["streams"]),
            likes=int(obj["likes"]),
            aesthetic_labels=aesthetics,
            released_at=parse_timestamp(released) if released is not None else None,
            embedding_ref=str(obj["embedding_ref"]),
            streams_score=None if obj.get("streams_score") is None else float(obj["streams_score"]),
            likes_score=None if obj.get("likes_score") is None else float(obj["likes_score"]),
        )
    except (ValueError, TypeError) as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc
    return record


def load_manifest(path) -> list[SongRecord]:
    """Read a line-delimited manifest, rejecting malformed lines and duplicate ids."""
    records: list[SongRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            record = _record_from_obj(obj, lineno)
            if record.song_id in seen:
                raise ManifestError(f"duplicate song_id {record.song_id}")
            seen.add(record.song_id)
            records.append(record)
    return records


def record_to_obj(record: SongRecord) -> dict:
    obj = {
        "song_id": record.song_id,
        "platform": record.platform,
        "streams": record.streams,
        "likes": record.likes,
    }
    aes = record.aesthetic_labels
    for i, name in enumerate(AESTHETIC_FIELDS):
        obj[name] = None if aes is None else aes[i]
    obj["released_at"] = None if record.released_at is None else record.released_at.isoformat()
    obj["embedding_ref"] = record.embedding_ref
    if record.streams_score is not None:
        obj["streams_score"] = record.streams_score
    if record.likes_score is not None:
        obj["likes_score"] = record.likes_score
    return obj


def save_manifest(records: Iterable[SongRecord], path) -> None:
    lines = [json.dumps(record_to_obj(r)) for r in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# Embedding store I/O
# ---------------------------------------------------------------------------

def embedding_path(store, ref: str) -> Path:
    """Resolve an embedding_ref (or bare song_id) to a file in the store."""
    name = ref if ref.endswith(".emb") else f"{ref}.emb"
    return Path(store) / name


def save_embeddings(store, emb: SegmentEmbeddingSet) -> None:
    path = embedding_path(store, emb.song_id)
    payload = emb.values.astype("<f4").tobytes()
    header = EMBEDDING_MAGIC + struct.pack(
        "<4I", EMBEDDING_VERSION, emb.n_segments, N_LAYERS, EMBED_DIM)
    atomic_write_bytes(path, header + payload)


def load_embeddings(store, song_id: str) -> SegmentEmbeddingSet:
    """Read one song's embedding file; values widen from float32 to float64."""
    path = embedding_path(store, song_id)
    data = path.read_bytes()
    if len(data) < len(EMBEDDING_MAGIC) + 16:
        raise IOError(f"{path}: truncated header")
    if data[:8] != EMBEDDING_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {data[:8]!r}")
    version, n_segments, n_layers, dim = struct.unpack_from("<4I", data, 8)
    if version != EMBEDDING_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if n_segments < 1 or n_layers != N_LAYERS or dim != EMBED_DIM:
        raise DimensionError(
            f"{path}: declared dims ({n_segments}, {n_layers}, {dim}) invalid")
    expected = n_segments * n_layers * dim * 4
    payload = data[24:]
    if len(payload) != expected:
        raise IOError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    values = values.reshape(n_segments, n_layers, dim)
    return SegmentEmbeddingSet(song_id=song_id, values=values)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

def filter_songs(records: Sequence[SongRecord], rules: FilterRules) -> list[SongRecord]:
    """Apply the enabled rules; never fails, only drops. Order is preserved
    and deduplication keeps the first occurrence of a key."""
    out: list[SongRecord] = []
    seen_keys: set = set()
    for r in records:
        if rules.drop_zero_streams and r.streams == 0:
            continue
        if rules.recency_cutoff is not None and r.released_at is not None \
                and r.released_at > rules.recency_cutoff:
            continue
        if rules.dedup_key is not None:
            if rules.dedup_key == "song_id":
                key = r.song_id
            else:
                if r.audio_hash is None:
                    raise ValueError(f"{r.song_id}: audio_hash dedup requires audio_hash")
                key = r.audio_hash
            if key in seen_keys:
                continue
            seen_keys.add(key)
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# Stratification
# ---------------------------------------------------------------------------

def assign_strata(records: Sequence[SongRecord], n_strata: int) -> np.ndarray:
    """Quantile-bin index per record over the streams distribution.

    Bins are taken on average ranks of the raw streams counts; the power
    transform is monotone, so rank bins of counts and of streams scores
    coincide. Ties always land in the same stratum.
    """
    if n_strata < 1:
        raise ValueError("n_strata must be positive")
    n = len(records)
    if n < n_strata:
        raise ValueError(f"{n} records cannot fill {n_strata} strata")
    ranks = average_ranks([r.streams for r in records])
    bins = np.minimum((n_strata * (ranks - 1.0) / n).astype(int), n_strata - 1)
    return bins


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer allocation of `total` by the fractions; sums exactly to total.

    Seats left after flooring go to the largest fractional remainders,
    ties broken by lower index.
    """
    quotas = [total * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    remaining = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda j: (-(quotas[j] - counts[j]), j))
    for j in order[:remaining]:
        counts[j] += 1
    return counts


def _allocate_stratified(stratum_sizes: Sequence[int], fractions: Sequence[float],
                         totals: Sequence[int]) -> list[list[int]]:
    """Per-(stratum, split) counts matching both stratum sizes and split totals.

    Floors the exact quotas, then hands out the remaining seats by largest
    fractional remainder among (stratum, split) pairs that still have
    capacity on both margins. Repeats until all stratum seats are placed.
    """
    n_strata, n_splits = len(stratum_sizes), len(fractions)
    counts = [[int(np.floor(m * f)) for f in fractions] for m in stratum_sizes]
    stratum_left = [m - sum(row) for m, row in zip(stratum_sizes, counts)]
    split_left = [t - sum(counts[s][j] for s in range(n_strata)) for j, t in enumerate(totals)]
    candidates = sorted(
        ((s, j) for s in range(n_strata) for j in range(n_splits)),
        key=lambda sj: (-(stratum_sizes[sj[0]] * fractions[sj[1]]
                          - counts[sj[0]][sj[1]]), sj[0], sj[1]),
    )
    while sum(stratum_left) > 0:
        progressed = False
        for s, j in candidates:
            if stratum_left[s] > 0 and split_left[j] > 0:
                counts[s][j] += 1
                stratum_left[s] -= 1
                split_left[j] -= 1
                progressed = True
        if not progressed:
            raise RuntimeError("stratified allocation failed to converge")
    return counts


def stratified_split(records: Sequence[SongRecord],
                     fractions: tuple[float, float, float] = (0.85, 0.10, 0.05),
                     n_strata: int = 10, seed: int = 0) -> DatasetSplit:
    """Deterministic stratified train/test/val split over streams-score deciles."""
    if len(fractions) != 3:
        raise ValueError("expected 3 fractions (train, test, val)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    n = len(records)
    bins = assign_strata(records, n_strata)
    totals = largest_remainder(n, fractions)
    stratum_indices = [np.flatnonzero(bins == s) for s in range(n_strata)]
    counts = _allocate_stratified([len(ix) for ix in stratum_indices], fractions, totals)

    rng = np.random.default_rng(seed)
    parts: list[list[str]] = [[], [], []]
    for s, indices in enumerate(stratum_indices):
        shuffled = indices[rng.permutation(len(indices))]
        pos = 0
        for j in range(3):
            take = counts[s][j]
            parts[j].extend(records[i].song_id for i in shuffled[pos:pos + take])
            pos += take
    return DatasetSplit(
        train_ids=frozenset(parts[0]),
        test_ids=frozenset(parts[1]),
        val_ids=frozenset(parts[2]),
        fractions=tuple(fractions),
    )


def stratified_downsample(records: Sequence[SongRecord], target_size: int,
                          n_strata: int = 10, seed: int = 0) -> list[SongRecord]:
    """Select target_size records keeping per-stratum counts proportional."""
    n = len(records)
    if target_size > n:
        raise ValueError(f"target_size {target_size} exceeds population {n}")
    bins = assign_strata(records, n_strata)
    stratum_indices = [np.flatnonzero(bins == s) for s in range(n_strata)]
    sizes = [len(ix) for ix in stratum_indices]
    quota = largest_remainder(target_size, [m / n for m in sizes])

    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for indices, take in zip(stratum_indices, quota):
        shuffled = indices[rng.permutation(len(indices))]
        chosen.extend(int(i) for i in shuffled[:take])
    chosen.sort()  # preserve input order
    return [records[i] for i in chosen]
