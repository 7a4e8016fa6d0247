"""Audio parsing and per-video-frame features.

The conditioning features are a deterministic log-mel frontend standing in
for a pretrained speech encoder: magnitude STFT (Hann window) -> power ->
triangular mel filterbank -> natural log with an additive energy floor.
With the default hop of ``sample_rate / 25`` the feature rows align natively
with 25 fps video.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

VIDEO_FPS = 25.0
DEFAULT_BANDS = 80
DEFAULT_FLOOR = 1e-10


@dataclass
class AudioClip:
    """Mono PCM samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise ValueError("audio clip is empty")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class AudioFeatures:
    """F x K log-mel feature rows at a fixed frame rate."""

    frames: np.ndarray
    frame_rate: float
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"feature frames must be 2-D, got shape {self.frames.shape}")
        if self.frame_rate <= 0:
            raise ValueError("feature frame_rate must be positive")
        if not np.isfinite(self.frames).all():
            raise ValueError("features contain non-finite values")

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def band_count(self):
        return self.frames.shape[1]


@dataclass
class MelConfig:
    """Log-mel frontend settings; hop=None selects sample_rate/25."""

    fft_size: int = 512
    hop: int | None = None
    band_count: int = DEFAULT_BANDS
    fmin: float = 0.0
    fmax: float | None = None
    floor: float = DEFAULT_FLOOR

    def resolve(self, sample_rate):
        """Validate against a concrete sample rate; returns (hop, fmax)."""
        if self.fft_size < 2 or self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        hop = self.hop
        if hop is None:
            if sample_rate % int(VIDEO_FPS) != 0:
                raise ValueError(
                    f"sample rate {sample_rate} is not divisible by {int(VIDEO_FPS)} fps; "
                    "pass an explicit hop")
            hop = sample_rate // int(VIDEO_FPS)
        if hop <= 0:
            raise ValueError(f"hop must be positive, got {hop}")
        fmax = sample_rate / 2 if self.fmax is None else self.fmax
        if not 0 <= self.fmin < fmax <= sample_rate / 2:
            raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got {self.fmin}/{fmax}")
        if self.band_count < 1:
            raise ValueError("band_count must be >= 1")
        if self.floor <= 0:
            raise ValueError("energy floor must be positive")
        return hop, fmax


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM16 mono only)
# ---------------------------------------------------------------------------


def load_wav(path) -> AudioClip:
    """Read a PCM16 mono WAV; samples are normalized by 32768."""
    with open(path, "rb") as f:
        riff = f.read(12)
        if len(riff) != 12 or riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
            raise FormatError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        data = None
        while True:
            head = f.read(8)
            if not head:
                break
            if len(head) != 8:
                raise FormatError(f"{path}: truncated chunk header")
            chunk_id, size = head[:4], struct.unpack("<I", head[4:])[0]
            payload = f.read(size)
            if len(payload) != size:
                raise FormatError(f"{path}: truncated {chunk_id!r} chunk")
            if size % 2:
                f.read(1)
            if chunk_id == b"fmt ":
                fmt = payload
            elif chunk_id == b"data":
                data = payload
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    if len(fmt) < 16:
        raise FormatError(f"{path}: fmt chunk too short")
    audio_format, channels, sample_rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format != 1 or bits != 16:
        raise FormatError(f"{path}: only PCM16 is supported (format={audio_format}, bits={bits})")
    if channels != 1:
        raise FormatError(f"{path}: only mono is supported, file has {channels} channels")
    samples = np.frombuffer(data[:len(data) - len(data) % 2], dtype="<i2")
    if samples.size == 0:
        raise FormatError(f"{path}: empty data chunk")
    return AudioClip(samples=samples.astype(np.float64) / 32768.0, sample_rate=sample_rate)


def write_wav(path, clip: AudioClip):
    """Write mono PCM16; samples are clamped to [-1, 1] and rounded."""
    scaled = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = scaled.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(payload)))
        f.write(b"WAVE")
        f.write(b"fmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, 1, clip.sample_rate,
                            clip.sample_rate * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)


# ---------------------------------------------------------------------------
# log-mel frontend
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: MelConfig, sample_rate):
    """Peak frequency (Hz) of each triangular band."""
    _, fmax = config.resolve(sample_rate)
    mel_pts = np.linspace(_hz_to_mel(config.fmin), _hz_to_mel(fmax), config.band_count + 2)
    return _mel_to_hz(mel_pts)[1:-1]


def _mel_filterbank(config: MelConfig, sample_rate, fmax):
    n_bins = config.fft_size // 2 + 1
    freqs = np.arange(n_bins, dtype=np.float64) * sample_rate / config.fft_size
    mel_pts = np.linspace(_hz_to_mel(config.fmin), _hz_to_mel(fmax), config.band_count + 2)
    hz_pts = _mel_to_hz(mel_pts)
    weights = np.zeros((config.band_count, n_bins), dtype=np.float64)
    for k in range(config.band_count):
        lo, center, hi = hz_pts[k], hz_pts[k + 1], hz_pts[k + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        weights[k] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return weights


def compute_logmel(clip: AudioClip, config: MelConfig | None = None) -> AudioFeatures:
    """Log-mel features at the STFT hop rate.

    Frame i windows ``samples[i*hop : i*hop + fft_size]`` (zero-padded past
    the end); the filterbank is applied to the power spectrum so feature
    energy scales quadratically with waveform amplitude.
    """
    config = config or MelConfig()
    hop, fmax = config.resolve(clip.sample_rate)
    n = clip.samples.size
    n_frames = n // hop
    if n_frames == 0:
        raise ValueError(f"clip of {n} samples is shorter than one hop ({hop})")
    fft = config.fft_size
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(fft) / fft)
    padded = np.concatenate([clip.samples, np.zeros(fft, dtype=np.float64)])
    starts = np.arange(n_frames) * hop
    segments = padded[starts[:, None] + np.arange(fft)[None, :]] * window
    power = np.abs(np.fft.rfft(segments, axis=1)) ** 2
    mel = power @ _mel_filterbank(config, clip.sample_rate, fmax).T
    return AudioFeatures(
        frames=np.log(mel + config.floor),
        frame_rate=clip.sample_rate / hop,
        floor=config.floor,
    )


def align_to_video(features: AudioFeatures, video_frame_rate) -> AudioFeatures:
    """One feature row per video frame via nearest-time selection."""
    if video_frame_rate <= 0:
        raise ValueError(f"video frame rate must be positive, got {video_frame_rate}")
    if features.frame_count == 0:
        raise ValueError("cannot align empty features")
    out_count = int(np.floor(features.frame_count * video_frame_rate / features.frame_rate))
    if out_count == 0:
        raise ValueError("audio is shorter than one video frame")
    times = np.arange(out_count) * features.frame_rate / video_frame_rate
    idx = np.clip(np.floor(times + 0.5).astype(int), 0, features.frame_count - 1)
    return AudioFeatures(frames=features.frames[idx].copy(),
                         frame_rate=float(video_frame_rate),
                         floor=features.floor)


def energy_envelope(features: AudioFeatures):
    """Per-frame mean mel energy with the log floor removed; >= 0."""
    if features.frame_count == 0:
        raise ValueError("cannot compute envelope of empty features")
    energy = np.exp(features.frames) - features.floor
    return np.maximum(energy.mean(axis=1), 0.0)
