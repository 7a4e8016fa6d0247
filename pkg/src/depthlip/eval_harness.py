"""Unpaired evaluation protocol with a geometric lip-audio sync proxy.

Evaluation pairs take the video from one clip and the audio from a
different one, so no ground-truth synced output exists.  Synchronization is
scored by the lag-maximized Pearson correlation between the vertical mouth
aperture (from landmarks) and the audio energy envelope.  The proxy plays
the role of the usual learned sync metrics but its absolute values are not
comparable to them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_features import align_to_video, compute_logmel, energy_envelope, load_wav
from .dataset_pipeline import ClipManifest
from .depth_renderer import load_mouth_csv

DEFAULT_MAX_LAG = 5  # frames: 200 ms at 25 fps


@dataclass
class EvalPair:
    video_clip: str
    audio_clip: str
    video_offset: float
    audio_offset: float
    duration: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("pair duration must be positive")


@dataclass
class SyncReport:
    scores: np.ndarray
    lags: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.lags = np.asarray(self.lags, dtype=np.int64)

    @property
    def mean_score(self):
        return float(self.scores.mean())

    @property
    def median_score(self):
        return float(np.median(self.scores))

    def histogram(self, bins=20, value_range=(-1.0, 1.0)):
        """Score histogram (counts, edges); mass equals the pair count."""
        edges = np.linspace(value_range[0], value_range[1], bins + 1)
        counts, _ = np.histogram(np.clip(self.scores, edges[0], edges[-1]), bins=edges)
        return counts, edges


def build_unpaired_pairs(manifest: ClipManifest, n_pairs, duration_s, seed,
                         max_pairs_per_video=None):
    """Seeded cross-video pairs with uniform start offsets.

    Every pair draws its video and audio from clips of different videos;
    offsets are uniform over the feasible [0, clip_duration - duration_s]
    range of each side.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    eligible = [r for r in manifest.records if r.duration >= duration_s]
    if len({r.video_id for r in eligible}) < 2:
        raise ValueError(
            f"need clips of >= {duration_s}s from at least 2 distinct videos, "
            f"have {len(eligible)}")
    rng = np.random.default_rng(seed)
    used_as_video = {}
    pairs = []
    while len(pairs) < n_pairs:
        vid_rec = eligible[int(rng.integers(len(eligible)))]
        if max_pairs_per_video is not None:
            if used_as_video.get(vid_rec.video_id, 0) >= max_pairs_per_video:
                continue
        others = [r for r in eligible if r.video_id != vid_rec.video_id]
        aud_rec = others[int(rng.integers(len(others)))]
        v_off = float(rng.uniform(0.0, vid_rec.duration - duration_s))
        a_off = float(rng.uniform(0.0, aud_rec.duration - duration_s))
        pairs.append(EvalPair(video_clip=vid_rec.clip_id, audio_clip=aud_rec.clip_id,
                              video_offset=v_off, audio_offset=a_off,
                              duration=float(duration_s)))
        used_as_video[vid_rec.video_id] = used_as_video.get(vid_rec.video_id, 0) + 1
    return pairs


def mouth_opening_series(polygons, upper_indices=None, lower_indices=None):
    """Vertical mouth aperture per frame, normalized by mouth width.

    polygons: ordered sequence of MouthPolygon.  By default the first half
    of the point loop is treated as the upper lip and the second half as
    the lower lip.
    """
    if len(polygons) < 1:
        raise ValueError("need at least one frame of landmarks")
    series = np.empty(len(polygons), dtype=np.float64)
    for t, poly in enumerate(polygons):
        pts = poly.points
        n = pts.shape[0]
        up = upper_indices if upper_indices is not None else np.arange(n // 2)
        lo = lower_indices if lower_indices is not None else np.arange(n // 2, n)
        width = pts[:, 0].max() - pts[:, 0].min()
        if width <= 0:
            raise ValueError(f"frame {t}: degenerate zero-width mouth")
        series[t] = abs(pts[lo, 1].mean() - pts[up, 1].mean()) / width
    return series


def sync_proxy_score(mouth_series, audio_envelope, max_lag=DEFAULT_MAX_LAG):
    """Max Pearson correlation over integer lags in [-max_lag, max_lag].

    Lag L aligns mouth[t] with envelope[t + L]; ties resolve toward the
    smallest |lag|.  Returns (score, best_lag).
    """
    a = np.asarray(mouth_series, dtype=np.float64)
    b = np.asarray(audio_envelope, dtype=np.float64)
    if a.size < max_lag + 2 or b.size < max_lag + 2:
        raise ValueError(f"series too short for max_lag={max_lag}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("correlation undefined for a constant series")
    best_score, best_lag = None, None
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda l: (abs(l), l)):
        t_lo = max(0, -lag)
        t_hi = min(a.size, b.size - lag)
        if t_hi - t_lo < 2:
            continue
        seg_a = a[t_lo:t_hi]
        seg_b = b[t_lo + lag:t_hi + lag]
        da = seg_a - seg_a.mean()
        db = seg_b - seg_b.mean()
        denom = np.sqrt((da * da).sum() * (db * db).sum())
        if denom == 0:
            continue
        r = float((da * db).sum() / denom)
        if best_score is None or r > best_score:
            best_score, best_lag = r, lag
    if best_score is None:
        raise ValueError("no lag produced a defined correlation")
    return best_score, best_lag


def emit_distribution(scores_by_method, out_dir, bins=20, value_range=(-1.0, 1.0)):
    """Histogram and empirical CDF CSVs per method, for external plotting."""
    if not scores_by_method:
        raise ValueError("no score sets to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    written = []
    for method, scores in scores_by_method.items():
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size == 0:
            raise ValueError(f"method {method!r} has no scores")
        counts, _ = np.histogram(np.clip(scores, edges[0], edges[-1]), bins=edges)
        hist_path = out / f"hist_{method}.csv"
        with open(hist_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for i, c in enumerate(counts):
                writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
        cdf_path = out / f"cdf_{method}.csv"
        ordered = np.sort(scores)
        with open(cdf_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["value", "cdf"])
            for i, v in enumerate(ordered):
                writer.writerow([repr(float(v)), repr((i + 1) / ordered.size)])
        written.extend([hist_path, cdf_path])
    return written


def _window_frames(offset_s, duration_s, fps):
    start = int(round(offset_s * fps))
    return start, start + int(round(duration_s * fps))


def run_sync_evaluation(manifest: ClipManifest, n_pairs, duration_s, seed, out_dir,
                        max_lag=DEFAULT_MAX_LAG, mel_config=None, method="proxy",
                        max_pairs_per_video=None):
    """End-to-end unpaired evaluation: pairs, per-pair proxy scores, curves.

    Writes pairs.csv, scores.csv and hist_/cdf_ CSVs into out_dir and
    returns the SyncReport.
    """
    pairs = build_unpaired_pairs(manifest, n_pairs, duration_s, seed,
                                 max_pairs_per_video=max_pairs_per_video)
    by_clip = {r.clip_id: r for r in manifest.records}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    mouth_cache = {}
    env_cache = {}

    def mouth_series_for(record):
        if record.clip_id not in mouth_cache:
            polys = load_mouth_csv(record.landmarks_path)
            frames = [polys[i] for i in sorted(polys)]
            mouth_cache[record.clip_id] = mouth_opening_series(frames)
        return mouth_cache[record.clip_id]

    def envelope_for(record):
        if record.clip_id not in env_cache:
            clip = load_wav(record.audio_path)
            feats = align_to_video(compute_logmel(clip, mel_config), record.fps)
            env_cache[record.clip_id] = energy_envelope(feats)
        return env_cache[record.clip_id]

    scores = np.empty(len(pairs), dtype=np.float64)
    lags = np.empty(len(pairs), dtype=np.int64)
    for i, pair in enumerate(pairs):
        v_rec, a_rec = by_clip[pair.video_clip], by_clip[pair.audio_clip]
        v_lo, v_hi = _window_frames(pair.video_offset, pair.duration, v_rec.fps)
        a_lo, a_hi = _window_frames(pair.audio_offset, pair.duration, a_rec.fps)
        mouth = mouth_series_for(v_rec)[v_lo:v_hi]
        env = envelope_for(a_rec)[a_lo:a_hi]
        scores[i], lags[i] = sync_proxy_score(mouth, env, max_lag=max_lag)

    with open(out / "pairs.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair", "video_clip", "audio_clip", "video_offset",
                         "audio_offset", "duration_s"])
        for i, p in enumerate(pairs):
            writer.writerow([i, p.video_clip, p.audio_clip, repr(p.video_offset),
                             repr(p.audio_offset), repr(p.duration)])
    with open(out / "scores.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair", "score", "best_lag"])
        for i in range(len(pairs)):
            writer.writerow([i, repr(float(scores[i])), int(lags[i])])
    emit_distribution({method: scores}, out)
    return SyncReport(scores=scores, lags=lags)
