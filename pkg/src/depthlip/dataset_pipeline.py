"""Curation filters, clip segmentation, frame sampling, face cropping and
dataset statistics for the preprocessing stage.

Clips are maximal single-face runs of a per-frame face track; long clips are
capped by uniform frame sampling without replacement.  Videos enter the
dataset only if they pass the curation criteria (one video per account,
single visible face, audio matching the speaker, visible mouth, clean
audio).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ImageFrame
from .errors import FormatError

DEFAULT_MIN_CLIP_FRAMES = 25  # 1 s at 25 fps


@dataclass
class FaceTrack:
    """Per-frame face counts plus the box when exactly one face is present."""

    counts: np.ndarray
    boxes: list
    fps: float = 25.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1:
            raise ValueError("face counts must be a 1-D sequence")
        if (self.counts < 0).any():
            raise ValueError("face counts must be nonnegative")
        if len(self.boxes) != self.counts.size:
            raise ValueError(f"{self.counts.size} counts but {len(self.boxes)} box entries")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        for i, (count, box) in enumerate(zip(self.counts, self.boxes)):
            if (count == 1) != (box is not None):
                raise ValueError(f"frame {i}: box must be present iff count == 1")

    def __len__(self):
        return self.counts.size


@dataclass
class ClipRecord:
    video_id: str
    clip_id: str
    start_frame: int
    end_frame: int
    fps: float
    face_sizes: np.ndarray
    frames_path: str = ""
    landmarks_path: str = ""
    audio_path: str = ""

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise ValueError(f"clip {self.clip_id}: end {self.end_frame} <= start {self.start_frame}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        self.face_sizes = np.asarray(self.face_sizes, dtype=np.float64)

    @property
    def duration(self):
        return (self.end_frame - self.start_frame) / self.fps

    @property
    def face_size(self):
        """Per-record scalar for the size histogram: median of max(w, h)."""
        return float(np.median(self.face_sizes)) if self.face_sizes.size else 0.0


@dataclass
class ClipManifest:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


@dataclass
class StatsConfig:
    bins: int = 10
    duration_edges: np.ndarray | None = None
    fps_edges: np.ndarray | None = None
    size_edges: np.ndarray | None = None


@dataclass
class DatasetStats:
    duration_hist: tuple
    fps_hist: tuple
    face_size_hist: tuple
    video_count: int
    clip_count: int
    total_seconds: float

    @property
    def total_hours(self):
        return self.total_seconds / 3600.0


def segment_clips(track: FaceTrack, min_len=DEFAULT_MIN_CLIP_FRAMES):
    """Maximal runs with exactly one face, at least min_len frames long.

    Returns disjoint, sorted (start, end) pairs with end exclusive.
    """
    single = np.concatenate([[False], track.counts == 1, [False]])
    edges = np.flatnonzero(single[1:] != single[:-1])
    starts, ends = edges[0::2], edges[1::2]
    return [(int(s), int(e)) for s, e in zip(starts, ends) if e - s >= min_len]


def sample_frames(clip_length, cap, seed):
    """Sorted uniform sample without replacement; everything when under the cap."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if clip_length <= cap:
        return np.arange(clip_length, dtype=np.int64)
    rng = np.random.default_rng(seed)
    picked = rng.choice(clip_length, size=cap, replace=False)
    return np.sort(picked.astype(np.int64))


def _resize_bilinear(planes, out_h, out_w):
    c, h, w = planes.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = planes[:, y0][:, :, x0] * (1 - wx) + planes[:, y0][:, :, x1] * wx
    bot = planes[:, y1][:, :, x0] * (1 - wx) + planes[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def crop_face(frame: ImageFrame, box, out_size) -> ImageFrame:
    """Crop the (x, y, w, h) box, zero-padding outside the frame, and resize.

    out_size is (width, height) or a single square size.  The crop is exact
    identity when the box equals the frame and out_size matches.
    """
    x, y, w, h = (int(round(v)) for v in box)
    if w <= 0 or h <= 0:
        raise ValueError(f"box dims must be positive, got w={w} h={h}")
    fw, fh = frame.width, frame.height
    if x >= fw or y >= fh or x + w <= 0 or y + h <= 0:
        raise ValueError(f"box ({x},{y},{w},{h}) does not intersect {fw}x{fh} frame")
    if isinstance(out_size, (tuple, list)):
        out_w, out_h = (int(v) for v in out_size)
    else:
        out_w = out_h = int(out_size)
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    crop = np.zeros((3, h, w), dtype=np.float64)
    sx = slice(max(0, x), min(fw, x + w))
    sy = slice(max(0, y), min(fh, y + h))
    dx = slice(sx.start - x, sx.stop - x)
    dy = slice(sy.start - y, sy.stop - y)
    crop[:, dy, dx] = frame.values[:, sy, sx]
    if (out_h, out_w) == (h, w):
        return ImageFrame(crop)
    return ImageFrame(np.clip(_resize_bilinear(crop, out_h, out_w), 0.0, 1.0))


# ---------------------------------------------------------------------------
# curation
# ---------------------------------------------------------------------------

CURATION_CRITERIA = (
    ("single_face", "multiple-faces"),
    ("audio_speaker_match", "audio-speaker-mismatch"),
    ("mouth_visible", "mouth-not-visible"),
    ("clean_audio", "noisy-audio"),
)


@dataclass
class CurationRecord:
    video_id: str
    account_id: str
    single_face: bool
    audio_speaker_match: bool
    mouth_visible: bool
    clean_audio: bool


@dataclass
class CurationResult:
    accepted: bool
    reason: str = ""


class CurationFilter:
    """Stateful accept/reject filter; accounts are consumed only on accept."""

    def __init__(self):
        self.seen_accounts = set()

    def apply(self, record: CurationRecord) -> CurationResult:
        for name in ("video_id", "account_id", "single_face", "audio_speaker_match",
                     "mouth_visible", "clean_audio"):
            if getattr(record, name) is None:
                raise ValueError(f"curation record {record.video_id!r} missing field {name!r}")
        if record.account_id in self.seen_accounts:
            return CurationResult(False, "duplicate-account")
        for attr, reason in CURATION_CRITERIA:
            if not getattr(record, attr):
                return CurationResult(False, reason)
        self.seen_accounts.add(record.account_id)
        return CurationResult(True)


def apply_curation_filters(records):
    """Run the filter over records in order; returns a list of CurationResult."""
    filt = CurationFilter()
    return [filt.apply(r) for r in records]


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def _histogram(values, edges, bins):
    values = np.asarray(values, dtype=np.float64)
    if edges is None:
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)
    else:
        edges = np.asarray(edges, dtype=np.float64)
    clipped = np.clip(values, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return counts, edges


def compute_statistics(manifest: ClipManifest, config: StatsConfig | None = None) -> DatasetStats:
    """Duration, frame-rate and face-size histograms plus dataset totals.

    Every histogram receives exactly one value per record, so its mass
    always equals the record count.
    """
    if not manifest.records:
        raise ValueError("manifest is empty")
    config = config or StatsConfig()
    durations = [r.duration for r in manifest.records]
    fps = [r.fps for r in manifest.records]
    sizes = [r.face_size for r in manifest.records]
    return DatasetStats(
        duration_hist=_histogram(durations, config.duration_edges, config.bins),
        fps_hist=_histogram(fps, config.fps_edges, config.bins),
        face_size_hist=_histogram(sizes, config.size_edges, config.bins),
        video_count=len({r.video_id for r in manifest.records}),
        clip_count=len(manifest.records),
        total_seconds=float(sum(durations)),
    )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["video_id", "clip_id", "start_frame", "end_frame", "fps",
                   "duration_s", "face_sizes", "frames_path", "landmarks_path",
                   "audio_path"]


def write_manifest(path, manifest: ClipManifest):
    """Deterministic manifest CSV, sorted by (video_id, clip_id)."""
    rows = sorted(manifest.records, key=lambda r: (r.video_id, r.clip_id))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([
                r.video_id, r.clip_id, r.start_frame, r.end_frame, repr(float(r.fps)),
                repr(r.duration),
                ";".join(repr(float(s)) for s in r.face_sizes),
                r.frames_path, r.landmarks_path, r.audio_path,
            ])


def load_manifest(path) -> ClipManifest:
    """Read a manifest CSV; relative clip paths resolve against its directory."""
    base = Path(path).parent
    records = []
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        # a trailing human-labeled gender column is tolerated and ignored
        n_cols = len(MANIFEST_HEADER)
        if header == MANIFEST_HEADER + ["gender"]:
            n_cols += 1
        elif header != MANIFEST_HEADER:
            raise FormatError(f"{path}: unexpected manifest header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise FormatError(f"{path}:{lineno}: expected {n_cols} columns")
            def resolve(p):
                if not p:
                    return p
                return p if Path(p).is_absolute() else str(base / p)

            try:
                sizes = [float(s) for s in row[6].split(";") if s] if row[6] else []
                records.append(ClipRecord(
                    video_id=row[0], clip_id=row[1],
                    start_frame=int(row[2]), end_frame=int(row[3]),
                    fps=float(row[4]), face_sizes=np.array(sizes),
                    frames_path=resolve(row[7]), landmarks_path=resolve(row[8]),
                    audio_path=resolve(row[9]),
                ))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return ClipManifest(records)


def load_face_track_csv(path, fps=25.0):
    """Per-video face tracks from CSV rows 'video_id,frame_idx,count,x,y,w,h'.

    Box cells may be empty when count != 1.  Returns {video_id: FaceTrack}
    with frames ordered by index.
    """
    per_video = {}
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["video_id", "frame_idx", "count"]:
            raise FormatError(f"{path}: expected header video_id,frame_idx,count,x,y,w,h")
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            try:
                vid = row[0].strip()
                idx = int(row[1])
                count = int(row[2])
                box = None
                if count == 1:
                    box = tuple(float(v) for v in row[3:7])
            except (ValueError, IndexError):
                raise FormatError(f"{path}:{lineno}: malformed track row") from None
            per_video.setdefault(vid, {})[idx] = (count, box)
    tracks = {}
    for vid, entries in per_video.items():
        n = max(entries) + 1
        counts = np.zeros(n, dtype=np.int64)
        boxes = [None] * n
        for idx, (count, box) in entries.items():
            counts[idx] = count
            boxes[idx] = box
        tracks[vid] = FaceTrack(counts=counts, boxes=boxes, fps=fps)
    return tracks


def build_manifest(tracks, data_root="", min_len=DEFAULT_MIN_CLIP_FRAMES) -> ClipManifest:
    """Segment every track into clip records, with conventional per-video paths."""
    records = []
    root = Path(data_root) if data_root else None
    for vid in sorted(tracks):
        track = tracks[vid]
        for k, (start, end) in enumerate(segment_clips(track, min_len)):
            sizes = [max(track.boxes[i][2], track.boxes[i][3]) for i in range(start, end)]
            video_dir = root / vid if root else None
            records.append(ClipRecord(
                video_id=vid, clip_id=f"{vid}_c{k:03d}",
                start_frame=start, end_frame=end, fps=track.fps,
                face_sizes=np.array(sizes),
                frames_path=str(video_dir / "frames") if video_dir else "",
                landmarks_path=str(video_dir / "mouth.csv") if video_dir else "",
                audio_path=str(video_dir / "audio.wav") if video_dir else "",
            ))
    return ClipManifest(records)


def write_stats(out_dir, stats: DatasetStats):
    """Histogram CSVs plus a plain-text summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, (counts, edges) in (("duration", stats.duration_hist),
                                  ("fps", stats.fps_hist),
                                  ("face_size", stats.face_size_hist)):
        with open(out / f"hist_{name}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for i, c in enumerate(counts):
                writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
    with open(out / "summary.txt", "w") as f:
        f.write(f"videos: {stats.video_count}\n")
        f.write(f"clips: {stats.clip_count}\n")
        f.write(f"total_seconds: {stats.total_seconds:.3f}\n")
        f.write(f"total_hours: {stats.total_hours:.6f}\n")
