"""Conditioning-tensor assembly for the single-step UNet.

Each training sample concatenates three latents along the channel axis, in
this order: the target frame with its mouth region occluded, a reference
frame of the same person a few frames away, and the masked lip depth map.
The pretrained image encoder is replaced by a deterministic linear stub:
8x8 average pooling followed by a fixed orthonormal channel lift to 4
channels, so every contract has a closed-form oracle.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .audio_features import AudioFeatures
from .depth_renderer import (DepthMap, MouthPolygon, draw_shift, dropout_depth,
                             mask_mouth_region, perturb_depth, polygon_cover_mask)
from .errors import FormatError

POOL = 8
LATENT_CHANNELS = 4
FULL_IMAGE_SIZE = 256

TENSOR_MAGIC = b"DLT1\n"
_SECTION_NAME = re.compile(r"^[a-z][a-z0-9_]*$")


@dataclass
class ImageFrame:
    """RGB frame, channel-first (3, H, W), values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != 3:
            raise ValueError(f"frame must be (3, H, W), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("frame contains non-finite values")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]


@dataclass
class LatentTensor:
    """Encoder output grid, channel-first (C, h, w)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"latent must be (C, h, w), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("latent contains non-finite values")

    @property
    def channels(self):
        return self.values.shape[0]


@dataclass
class ReferencePolicy:
    """How the reference frame index is chosen relative to the target."""

    mode: str = "uniform_range"
    offset: int = 5
    range: tuple = (5, 25)

    def __post_init__(self):
        if self.mode not in ("fixed_offset", "uniform_range"):
            raise ValueError(f"unknown reference mode {self.mode!r}")
        if self.mode == "fixed_offset" and self.offset < 1:
            raise ValueError("fixed offset must be >= 1")
        lo, hi = self.range
        if self.mode == "uniform_range" and not 1 <= lo <= hi:
            raise ValueError(f"need 1 <= T_min <= T_max, got {self.range}")

    @property
    def min_offset(self):
        return self.offset if self.mode == "fixed_offset" else self.range[0]


@dataclass
class Provenance:
    clip_id: str
    target_index: int
    reference_index: int
    depth_dropped: bool


@dataclass
class ConditioningBundle:
    """UNet input (3C channels), paired audio rows, and sample provenance."""

    unet_input: LatentTensor
    audio: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        if self.audio.ndim != 2:
            raise ValueError("bundle audio must be (rows, bands)")
        if self.unet_input.channels % 3 != 0:
            raise ValueError("unet input channel count must be a multiple of 3")

    def parts(self):
        """De-concatenate into (masked, ref, lip) latents."""
        return split_unet_input(self.unet_input)


@dataclass
class AugmentationConfig:
    """Training-time lip-depth augmentations; disable both for a pure function."""

    perturb: bool = True
    max_shift: int = 5
    dropout: bool = True
    dropout_p: float = 0.5
    occlusion: str = "lower_half"  # or "polygon" (experimental)


@dataclass
class BundleSeeds:
    reference: int = 0
    shift: int = 0
    dropout: int = 0


@dataclass
class ClipData:
    """Everything build_bundle needs for one clip, already frame-aligned."""

    clip_id: str
    frames: list
    depth_maps: list
    mouth: dict
    audio: AudioFeatures
    fps: float = 25.0

    def __post_init__(self):
        if len(self.frames) != len(self.depth_maps):
            raise ValueError(
                f"clip {self.clip_id}: {len(self.frames)} frames but "
                f"{len(self.depth_maps)} depth maps")

    def __len__(self):
        return len(self.frames)


def occlude_mouth(frame: ImageFrame) -> ImageFrame:
    """Zero the lower half of the frame (rows y >= height/2); idempotent."""
    out = frame.values.copy()
    out[:, (frame.height + 1) // 2:, :] = 0.0
    return ImageFrame(out)


def occlude_polygon(frame: ImageFrame, polygon: MouthPolygon) -> ImageFrame:
    """Experimental landmark-driven occlusion: zero pixels inside the polygon."""
    inside = polygon_cover_mask(polygon, frame.width, frame.height)
    out = frame.values.copy()
    out[:, inside] = 0.0
    return ImageFrame(out)


def _reflect(idx, length):
    while not 0 <= idx < length:
        if idx < 0:
            idx = -idx
        else:
            idx = 2 * (length - 1) - idx
    return idx


def select_reference(clip_length, target, policy: ReferencePolicy, rng_seed) -> int:
    """Seeded reference index |offset| frames from the target, reflected off bounds."""
    if clip_length < 2:
        raise ValueError(f"clip must have at least 2 frames, got {clip_length}")
    if not 0 <= target < clip_length:
        raise ValueError(f"target {target} out of range for clip of {clip_length}")
    rng = np.random.default_rng(rng_seed)
    if policy.mode == "fixed_offset":
        offset = policy.offset
    else:
        lo, hi = policy.range
        offset = int(rng.integers(lo, hi + 1))
    sign = 1 if rng.random() < 0.5 else -1
    for s in (sign, -sign):
        r = _reflect(target + s * offset, clip_length)
        if r != target:
            return r
    raise ValueError(
        f"no feasible reference for target {target} in clip of {clip_length} "
        f"with offset {offset}")


def _lift_matrix(in_channels):
    # First in_channels columns of the orthonormal 4x4 DCT-II matrix, so the
    # lift has exactly orthonormal columns for 1- and 3-channel inputs.
    k = np.arange(LATENT_CHANNELS)[:, None]
    n = np.arange(LATENT_CHANNELS)[None, :]
    q = np.cos(np.pi * (2 * n + 1) * k / (2 * LATENT_CHANNELS))
    q *= np.where(k == 0, np.sqrt(1.0 / LATENT_CHANNELS), np.sqrt(2.0 / LATENT_CHANNELS))
    return q[:, :in_channels]


def _as_planes(frame_or_depth):
    if isinstance(frame_or_depth, ImageFrame):
        return frame_or_depth.values
    if isinstance(frame_or_depth, DepthMap):
        if not np.isfinite(frame_or_depth.values).all():
            raise ValueError("depth map still carries no-hit sentinels; mask it first")
        return frame_or_depth.values[None]
    arr = np.asarray(frame_or_depth, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W) input, got shape {arr.shape}")
    return arr


def encode_latent(frame_or_depth) -> LatentTensor:
    """Linear encoder stub: 8x8 average pooling, then the fixed channel lift."""
    planes = _as_planes(frame_or_depth)
    c, h, w = planes.shape
    if h % POOL or w % POOL:
        raise ValueError(f"spatial dims must be divisible by {POOL}, got {h}x{w}")
    pooled = planes.reshape(c, h // POOL, POOL, w // POOL, POOL).mean(axis=(2, 4))
    return LatentTensor(np.tensordot(_lift_matrix(c), pooled, axes=1))


def decode_latent(latent: LatentTensor, out_channels=3):
    """Adjoint of encode_latent: channel un-mix, then transposed average pooling.

    Returns a (out_channels, 8h, 8w) pixel grid; note the adjoint carries the
    pooling weight 1/64, it is not an inverse.
    """
    mixed = np.tensordot(_lift_matrix(out_channels).T, latent.values, axes=1)
    return np.repeat(np.repeat(mixed, POOL, axis=1), POOL, axis=2) / (POOL * POOL)


def assemble_unet_input(masked: LatentTensor, ref: LatentTensor, lip: LatentTensor) -> LatentTensor:
    """Channel-concatenate [masked | ref | lip]; values copied verbatim."""
    shapes = {masked.values.shape, ref.values.shape, lip.values.shape}
    if len(shapes) != 1:
        raise ValueError(f"latent shapes differ: {sorted(shapes)}")
    return LatentTensor(np.concatenate([masked.values, ref.values, lip.values], axis=0))


def split_unet_input(unet_input: LatentTensor):
    """Inverse of assemble_unet_input."""
    c = unet_input.channels
    if c % 3:
        raise ValueError(f"cannot split {c} channels into three equal parts")
    v = unet_input.values
    k = c // 3
    return (LatentTensor(v[:k].copy()), LatentTensor(v[k:2 * k].copy()),
            LatentTensor(v[2 * k:].copy()))


def build_bundle(clip: ClipData, target, policy: ReferencePolicy,
                 aug: AugmentationConfig, seeds: BundleSeeds,
                 audio_window=1) -> ConditioningBundle:
    """Compose one training/inference sample from a clip.

    Occludes the target, picks a seeded reference, masks + perturbs +
    (possibly) drops the target's lip depth, encodes all three, and attaches
    the target's aligned audio rows.
    """
    if not 0 <= target < len(clip):
        raise ValueError(f"target {target} out of range for clip {clip.clip_id}")
    if target not in clip.mouth:
        raise ValueError(f"clip {clip.clip_id}: no mouth landmarks for frame {target}")
    if clip.audio.frame_count < len(clip):
        raise ValueError(f"clip {clip.clip_id}: audio features cover "
                         f"{clip.audio.frame_count} frames, clip has {len(clip)}")

    mouth = clip.mouth[target]
    if aug.occlusion == "polygon":
        masked_frame = occlude_polygon(clip.frames[target], mouth)
    else:
        masked_frame = occlude_mouth(clip.frames[target])
    ref_index = select_reference(len(clip), target, policy, seeds.reference)

    lip = mask_mouth_region(clip.depth_maps[target], mouth)
    if aug.perturb and aug.max_shift > 0:
        lip = perturb_depth(lip, draw_shift(seeds.shift, aug.max_shift), aug.max_shift)
    dropped = False
    if aug.dropout:
        lip, dropped = dropout_depth(lip, seeds.dropout, aug.dropout_p)

    unet_input = assemble_unet_input(
        encode_latent(masked_frame),
        encode_latent(clip.frames[ref_index]),
        encode_latent(lip),
    )
    start = max(0, min(target - (audio_window - 1) // 2, clip.audio.frame_count - audio_window))
    audio_rows = clip.audio.frames[start:start + audio_window].copy()
    return ConditioningBundle(
        unet_input=unet_input,
        audio=audio_rows,
        provenance=Provenance(clip.clip_id, target, ref_index, dropped),
    )


# ---------------------------------------------------------------------------
# binary tensor container: magic "DLT1", optional "# key=value" comment lines,
# then repeated sections (ASCII name line, "C H W" dims line, f32 payload).
# ---------------------------------------------------------------------------


def write_tensor_file(path, sections, meta=None):
    """Write named (C, H, W) float tensors; meta goes into comment lines."""
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        for key, value in (meta or {}).items():
            text = f"{key}={value}"
            if any(ch in text for ch in "\n\r") or " " in str(value):
                raise ValueError(f"meta entry {key!r} must be single-line without spaces")
            f.write(f"# {text}\n".encode("ascii"))
        for name, arr in sections.items():
            if not _SECTION_NAME.match(name):
                raise ValueError(f"bad section name {name!r}")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 3:
                raise ValueError(f"section {name!r} must be 3-D, got shape {arr.shape}")
            f.write(f"{name}\n".encode("ascii"))
            f.write(f"{arr.shape[0]} {arr.shape[1]} {arr.shape[2]}\n".encode("ascii"))
            f.write(arr.astype("<f4").tobytes())


def read_tensor_file(path):
    """Returns (sections {name: (C, H, W) array}, meta {key: str})."""
    sections = {}
    meta = {}
    with open(path, "rb") as f:
        if f.read(len(TENSOR_MAGIC)) != TENSOR_MAGIC:
            raise FormatError(f"{path}: bad tensor-container magic")
        while True:
            line = f.readline()
            if not line:
                break
            text = line.decode("ascii", errors="replace").strip()
            if not text:
                continue
            if text.startswith("#"):
                body = text[1:].strip()
                if "=" in body:
                    key, value = body.split("=", 1)
                    meta[key.strip()] = value.strip()
                continue
            name = text
            if not _SECTION_NAME.match(name):
                raise FormatError(f"{path}: bad section name {name!r}")
            dims = f.readline().split()
            if len(dims) != 3:
                raise FormatError(f"{path}: section {name!r} has a malformed dims line")
            c, h, w = (int(d) for d in dims)
            count = c * h * w
            payload = f.read(4 * count)
            if len(payload) != 4 * count:
                raise FormatError(f"{path}: section {name!r} payload truncated")
            sections[name] = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float64)
    return sections, meta


def save_bundle(path, bundle: ConditioningBundle, gt_latent=None, gt_image=None):
    """Serialize a bundle (and optional training targets) to a DLT1 file."""
    masked, ref, lip = bundle.parts()
    sections = {
        "masked": masked.values,
        "ref": ref.values,
        "lip": lip.values,
        "unet_input": bundle.unet_input.values,
        "audio": bundle.audio[None],
    }
    if gt_latent is not None:
        sections["gt_latent"] = np.asarray(gt_latent.values if isinstance(gt_latent, LatentTensor)
                                           else gt_latent, dtype=np.float64)
    if gt_image is not None:
        sections["gt_image"] = np.asarray(gt_image.values if isinstance(gt_image, ImageFrame)
                                          else gt_image, dtype=np.float64)
    p = bundle.provenance
    meta = {"clip": p.clip_id, "target": p.target_index, "ref": p.reference_index,
            "dropped": int(p.depth_dropped)}
    write_tensor_file(path, sections, meta)


def load_bundle(path):
    """Returns (ConditioningBundle, extras) where extras holds gt sections if present."""
    sections, meta = read_tensor_file(path)
    for required in ("unet_input", "audio"):
        if required not in sections:
            raise FormatError(f"{path}: bundle is missing the {required!r} section")
    provenance = Provenance(
        clip_id=meta.get("clip", "unknown"),
        target_index=int(meta.get("target", -1)),
        reference_index=int(meta.get("ref", -1)),
        depth_dropped=bool(int(meta.get("dropped", 0))),
    )
    bundle = ConditioningBundle(
        unet_input=LatentTensor(sections["unet_input"]),
        audio=sections["audio"][0],
        provenance=provenance,
    )
    extras = {k: v for k, v in sections.items()
              if k in ("gt_latent", "gt_image")}
    return bundle, extras


# ---------------------------------------------------------------------------
# image-file I/O for frames
# ---------------------------------------------------------------------------


def load_image(path) -> ImageFrame:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return ImageFrame(arr.transpose(2, 0, 1))


def save_image(path, frame: ImageFrame):
    arr = np.clip(np.round(frame.values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_clip(clip_dir, mel_config=None, fps=25.0, clip_id=None) -> ClipData:
    """Load a clip directory: frames/*.png, depth/*.pfm, mouth.csv, audio.wav."""
    from .audio_features import align_to_video, compute_logmel, load_wav
    from .depth_renderer import load_mouth_csv, read_pfm

    clip_dir = Path(clip_dir)
    frame_paths = sorted((clip_dir / "frames").glob("*.png"))
    depth_paths = sorted((clip_dir / "depth").glob("*.pfm"))
    if not frame_paths:
        raise FormatError(f"{clip_dir}: no frames/*.png found")
    if len(frame_paths) != len(depth_paths):
        raise FormatError(f"{clip_dir}: {len(frame_paths)} frames but {len(depth_paths)} depth maps")
    frames = [load_image(p) for p in frame_paths]
    depths = [read_pfm(p) for p in depth_paths]
    mouth = load_mouth_csv(clip_dir / "mouth.csv")
    clip_audio = load_wav(clip_dir / "audio.wav")
    features = align_to_video(compute_logmel(clip_audio, mel_config), fps)
    return ClipData(
        clip_id=clip_id or clip_dir.name,
        frames=frames,
        depth_maps=depths,
        mouth=mouth,
        audio=features,
        fps=fps,
    )
