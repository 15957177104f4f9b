"""Synthetic dataset generator for tests and demos.

Embeddings are standard-normal noise. Engagement counts are a strictly
monotone map of a planted function of the song-mean embedding (linear,
nonlinear, or pure noise for "none"), so downstream percentile scores
inherit the signal. Aesthetic labels come from a separate linear
functional plus small noise, clipped to [1, 5]. Everything is a pure
function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .datamodel import (EMBED_DIM, N_LAYERS, SegmentEmbeddingSet, SongRecord,
                        save_embeddings, save_manifest)

SIGNALS = ("linear", "nonlinear", "none")
_BASE_DATE = datetime(2025, 6, 1, tzinfo=timezone.utc)


@dataclass
class SynthDataset:
    records: list[SongRecord]
    segment_arrays: dict[str, np.ndarray]   # song_id -> (n_segments, 4, dim)
    # planted per-song signal values, before the monotone count mapping
    planted_streams: np.ndarray
    planted_likes: np.ndarray


def _standardize(t: np.ndarray) -> np.ndarray:
    std = t.std()
    return (t - t.mean()) / (std if std > 0 else 1.0)


def generate(n_songs: int, seed: int, signal: str = "linear",
             segments_range: tuple[int, int] = (1, 3),
             dim: int = EMBED_DIM) -> SynthDataset:
    if n_songs < 2:
        raise ValueError("need at least 2 songs")
    if signal not in SIGNALS:
        raise ValueError(f"unknown signal {signal!r}")
    lo, hi = segments_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad segments range {segments_range}")

    rng = np.random.default_rng(seed)
    u_streams = rng.standard_normal(dim)
    u_likes = rng.standard_normal(dim)
    v_aux = rng.standard_normal(dim)
    w_aes = rng.standard_normal(dim)
    aes_gains = rng.uniform(0.8, 1.2, size=5)

    n_segments = rng.integers(lo, hi + 1, size=n_songs)
    segment_arrays: dict[str, np.ndarray] = {}
    song_means = np.empty((n_songs, dim))
    for i in range(n_songs):
        song_id = f"synth-{seed}-{i:05d}"
        values = rng.standard_normal((int(n_segments[i]), N_LAYERS, dim))
        segment_arrays[song_id] = values
        song_means[i] = values.mean(axis=(0, 1))

    if signal == "linear":
        t_streams = song_means @ u_streams
        t_likes = song_means @ u_likes
    elif signal == "nonlinear":
        a = _standardize(song_means @ u_streams)
        b = _standardize(song_means @ v_aux)
        t_streams = a * b
        t_likes = _standardize(song_means @ u_likes) * b
    else:
        t_streams = rng.standard_normal(n_songs)
        t_likes = rng.standard_normal(n_songs)

    z_streams = _standardize(t_streams)
    z_likes = _standardize(t_likes)
    streams = np.round(500.0 * np.exp(0.8 * z_streams)).astype(int) + 1
    likes = np.round(50.0 * np.exp(0.8 * z_likes)).astype(int) + 1

    z_aes = _standardize(song_means @ w_aes)
    noise = rng.standard_normal((n_songs, 5))
    aes = np.clip(3.0 + 1.2 * np.outer(z_aes, aes_gains) + 0.1 * noise, 1.0, 5.0)

    records = [
        SongRecord(
            song_id=song_id,
            platform="udio" if i % 2 == 0 else "suno",
            streams=int(streams[i]),
            likes=int(likes[i]),
            aesthetic_labels=tuple(float(v) for v in aes[i]),
            released_at=_BASE_DATE + timedelta(hours=i),
            embedding_ref=f"{song_id}.emb",
        )
        for i, song_id in enumerate(segment_arrays)
    ]
    return SynthDataset(records=records, segment_arrays=segment_arrays,
                        planted_streams=t_streams, planted_likes=t_likes)


def write(dataset: SynthDataset, out_dir) -> tuple[Path, Path]:
    """Write manifest.jsonl and an embeddings/ store; returns both paths."""
    out = Path(out_dir)
    store = out / "embeddings"
    store.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    save_manifest(dataset.records, manifest)
    for song_id, values in dataset.segment_arrays.items():
        save_embeddings(store, SegmentEmbeddingSet(song_id=song_id, values=values))
    return manifest, store
