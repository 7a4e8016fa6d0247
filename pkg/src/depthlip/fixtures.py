"""Deterministic toy fixtures: a dome-shaped face mesh with an openable
mouth region, matching frames/landmarks/audio, and synthetic datasets for
training and evaluation.  Everything is seeded so repeated generation is
byte-identical, which the CLI smoke tests rely on.

Run ``python -m depthlip.fixtures OUTDIR`` to materialize the full tree.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .audio_features import AudioClip, MelConfig, align_to_video, compute_logmel, write_wav
from .conditioning import (AugmentationConfig, BundleSeeds, ClipData, ImageFrame,
                           LatentTensor, ReferencePolicy, build_bundle, decode_latent,
                           encode_latent, save_bundle, save_image)
from .dataset_pipeline import ClipManifest, ClipRecord, write_manifest
from .depth_renderer import Camera, MouthPolygon, render_track, write_mouth_csv
from .morphable_model import (BasisSet, ExpressionCoeffs, ExpressionTrack, IdentityCoeffs,
                              write_basis, write_coeff_csv)
from .toy_unet import TrainingSample

FIXTURE_SR = 8000
FIXTURE_SIZE = 64
FIXTURE_FPS = 25.0


def toy_basis(grid=12, d_id=6, d_exp=5, seed=0) -> BasisSet:
    """Dome mesh over a grid; expression component 0 deepens the mouth area."""
    rng = np.random.default_rng(seed)
    lin = np.linspace(-1.0, 1.0, grid)
    xs, ys = np.meshgrid(lin, lin, indexing="xy")
    zs = 1.5 - 0.5 * (xs ** 2 + ys ** 2)
    mean = np.stack([xs, ys, zs], axis=-1).reshape(-1)

    n = grid * grid
    tris = []
    for r in range(grid - 1):
        for c in range(grid - 1):
            a = r * grid + c
            tris.append((a, a + 1, a + grid))
            tris.append((a + 1, a + grid + 1, a + grid))
    triangles = np.array(tris, dtype=np.int64)

    def smooth_field(scale):
        field = rng.normal(0.0, 1.0, size=(grid, grid))
        for _ in range(2):
            field = (field + np.roll(field, 1, 0) + np.roll(field, -1, 0)
                     + np.roll(field, 1, 1) + np.roll(field, -1, 1)) / 5.0
        return scale * field

    id_cols = []
    for _ in range(d_id):
        disp = np.stack([smooth_field(0.05), smooth_field(0.05), smooth_field(0.05)], axis=-1)
        id_cols.append(disp.reshape(-1))
    id_basis = np.stack(id_cols, axis=1)

    # mouth bump: raised-cosine window over the mouth rectangle
    mouth = ((np.abs(xs) <= 0.45) & (ys >= 0.2) & (ys <= 0.7)).astype(np.float64)
    wx = np.clip(1.0 - np.abs(xs) / 0.45, 0.0, 1.0)
    wy = np.clip(1.0 - np.abs(ys - 0.45) / 0.25, 0.0, 1.0)
    bump = mouth * wx * wy
    open_col = np.stack([np.zeros_like(bump), np.zeros_like(bump), -0.35 * bump],
                        axis=-1).reshape(-1)
    exp_cols = [open_col]
    for _ in range(d_exp - 1):
        disp = np.stack([smooth_field(0.02), smooth_field(0.02), smooth_field(0.02)], axis=-1)
        exp_cols.append(disp.reshape(-1))
    exp_basis = np.stack(exp_cols, axis=1)

    return BasisSet(mean_shape=mean, id_basis=id_basis, exp_basis=exp_basis,
                    triangles=triangles)


def toy_camera(size=FIXTURE_SIZE) -> Camera:
    return Camera(scale=size / 2.5, tx=size / 2.0, ty=size / 2.0, depth_offset=2.0)


def camera_flag(size=FIXTURE_SIZE):
    """The --camera flag string matching toy_camera."""
    cam = toy_camera(size)
    return f"{cam.scale},{cam.tx},{cam.ty},{cam.depth_offset}"


def openness_series(n_frames, fps=FIXTURE_FPS, freq=1.5, phase=0.0):
    t = np.arange(n_frames) / fps
    return 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * t + phase)


def mouth_polygon(size, openness, points=80) -> MouthPolygon:
    """80-point mouth loop: first half upper lip, second half lower lip."""
    cam = toy_camera(size)
    cx = cam.tx
    cy = cam.scale * 0.45 + cam.ty
    rx = 0.45 * cam.scale
    ry = 1.5 + 5.0 * openness
    half = points // 2
    t_up = np.linspace(-1.0, 1.0, half)
    upper = np.stack([cx + rx * t_up, cy - ry * np.sqrt(1.0 - t_up ** 2)], axis=1)
    t_lo = t_up[::-1]
    lower = np.stack([cx + rx * t_lo, cy + ry * np.sqrt(1.0 - t_lo ** 2)], axis=1)
    return MouthPolygon(np.concatenate([upper, lower], axis=0))


def synth_frame(size, openness, seed=0) -> ImageFrame:
    """Flat synthetic face image: gradient background, mouth patch tracking openness."""
    rng = np.random.default_rng(seed)
    gx = np.linspace(0.35, 0.65, size)
    base = np.tile(gx, (size, 1)) * np.linspace(0.9, 1.1, size)[:, None]
    frame = np.stack([base, base * 0.95, base * 0.9])
    cam = toy_camera(size)
    cy = int(cam.scale * 0.45 + cam.ty)
    ry = int(2 + 5 * openness)
    rx = int(0.45 * cam.scale)
    cx = size // 2
    frame[:, max(0, cy - ry):min(size, cy + ry), max(0, cx - rx):min(size, cx + rx)] = \
        0.15 + 0.1 * (1.0 - openness)
    frame += rng.normal(0.0, 0.004, size=frame.shape)
    return ImageFrame(np.clip(frame, 0.0, 1.0))


def synth_audio(openness, fps=FIXTURE_FPS, sr=FIXTURE_SR, tone_hz=440.0) -> AudioClip:
    """Tone whose amplitude follows the per-frame openness."""
    n_frames = len(openness)
    n_samples = int(n_frames * sr / fps)
    t = np.arange(n_samples) / sr
    frame_pos = np.minimum((t * fps).astype(int), n_frames - 1)
    amp = 0.15 + 0.7 * np.asarray(openness)[frame_pos]
    return AudioClip(samples=amp * np.sin(2.0 * np.pi * tone_hz * t), sample_rate=sr)


def fixture_mel_config(sr=FIXTURE_SR) -> MelConfig:
    return MelConfig(fft_size=256, hop=sr // int(FIXTURE_FPS), band_count=80,
                     fmin=0.0, fmax=sr / 2.0)


def make_clip_fixture(root, n_frames=16, size=FIXTURE_SIZE, seed=11):
    """Write basis/coeff/clip inputs for the CLI pipeline under root.

    Layout: basis.dlb, identity.csv, expr.csv, clip0/{frames,mouth.csv,audio.wav}.
    Depth maps are NOT written; the render-depth subcommand produces them.
    """
    root = Path(root)
    (root / "clip0" / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    basis = toy_basis(seed=seed)
    write_basis(root / "basis.dlb", basis)

    alpha = 0.3 * rng.normal(size=basis.id_dim)
    write_coeff_csv(root / "identity.csv", [alpha])

    openness = openness_series(n_frames)
    betas = np.zeros((n_frames, basis.exp_dim))
    betas[:, 0] = openness
    betas[:, 1:] = 0.03 * np.sin(np.arange(n_frames)[:, None] * (1.0 + np.arange(basis.exp_dim - 1)))
    write_coeff_csv(root / "expr.csv", betas)

    polys = {i: mouth_polygon(size, openness[i]) for i in range(n_frames)}
    write_mouth_csv(root / "clip0" / "mouth.csv", polys)

    for i in range(n_frames):
        save_image(root / "clip0" / "frames" / f"{i:04d}.png", synth_frame(size, openness[i], seed=seed + i))

    write_wav(root / "clip0" / "audio.wav", synth_audio(openness))
    return root


def clip_data_in_memory(n_frames=16, size=FIXTURE_SIZE, seed=11, clip_id="clip0") -> ClipData:
    """The same clip as make_clip_fixture, assembled without touching disk."""
    rng = np.random.default_rng(seed)
    basis = toy_basis(seed=seed)
    alpha = IdentityCoeffs(0.3 * rng.normal(size=basis.id_dim))
    openness = openness_series(n_frames)
    betas = np.zeros((n_frames, basis.exp_dim))
    betas[:, 0] = openness
    betas[:, 1:] = 0.03 * np.sin(np.arange(n_frames)[:, None] * (1.0 + np.arange(basis.exp_dim - 1)))
    track = ExpressionTrack(frames=[ExpressionCoeffs(b) for b in betas], frame_rate=FIXTURE_FPS)
    depths = render_track(basis, alpha, track, toy_camera(size), (size, size))
    frames = [synth_frame(size, openness[i], seed=seed + i) for i in range(n_frames)]
    mouth = {i: mouth_polygon(size, openness[i]) for i in range(n_frames)}
    features = align_to_video(compute_logmel(synth_audio(openness), fixture_mel_config()),
                              FIXTURE_FPS)
    return ClipData(clip_id=clip_id, frames=frames, depth_maps=depths, mouth=mouth,
                    audio=features, fps=FIXTURE_FPS)


def make_training_bundles(out_dir, n_bundles=8, seed=11):
    """Bundle files with embedded gt_latent/gt_image targets for train-toy.

    The pixel target is the decoded latent target, consistent with the stub
    decoder so a perfect latent prediction reaches zero total loss.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clip = clip_data_in_memory(n_frames=max(16, n_bundles + 2), seed=seed)
    policy = ReferencePolicy(mode="uniform_range", range=(5, 25))
    aug = AugmentationConfig(perturb=True, max_shift=3, dropout=True, dropout_p=0.5)
    paths = []
    for k in range(n_bundles):
        target = 1 + k
        seeds = BundleSeeds(reference=1000 + k, shift=2000 + k, dropout=3000 + k)
        bundle = build_bundle(clip, target, policy, aug, seeds)
        gt_latent = encode_latent(clip.frames[target])
        gt_image = decode_latent(gt_latent, out_channels=3)
        path = out / f"bundle_{k:02d}.dlt"
        save_bundle(path, bundle, gt_latent=gt_latent, gt_image=gt_image)
        paths.append(path)
    return paths


def make_eval_fixture(root, n_videos=6, seed=5, min_dur=12.0, max_dur=16.0,
                      size=FIXTURE_SIZE):
    """Per-video landmark/audio fixtures plus a manifest for eval-sync."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for v in range(n_videos):
        vid = f"v{v:02d}"
        vdir = root / vid
        vdir.mkdir(exist_ok=True)
        dur = float(rng.uniform(min_dur, max_dur))
        n_frames = int(dur * FIXTURE_FPS)
        openness = openness_series(n_frames, freq=float(rng.uniform(0.8, 2.5)),
                                   phase=float(rng.uniform(0, 2 * np.pi)))
        # low-amplitude jitter keeps the aperture series non-degenerate
        openness = np.clip(openness + 0.05 * rng.normal(size=n_frames), 0.0, 1.0)
        polys = {i: mouth_polygon(size, openness[i]) for i in range(n_frames)}
        write_mouth_csv(vdir / "mouth.csv", polys)
        write_wav(vdir / "audio.wav", synth_audio(openness))
        records.append(ClipRecord(
            video_id=vid, clip_id=f"{vid}_c000", start_frame=0, end_frame=n_frames,
            fps=FIXTURE_FPS, face_sizes=np.array([40.0]),
            frames_path="", landmarks_path=str(vdir / "mouth.csv"),
            audio_path=str(vdir / "audio.wav"),
        ))
    manifest = ClipManifest(records)
    write_manifest(root / "manifest.csv", manifest)
    return root / "manifest.csv"


def make_depth_task_dataset(n_samples=8, seed=0, latent_hw=8, ablate_lip=False):
    """Synthetic task where the lower-half target latent is a fixed linear
    function of the lip-depth latent; used to show the depth channel carries
    irreplaceable signal.

    With ``ablate_lip`` the lip slice of every input is zeroed while targets
    stay the same, so the best achievable loss is the target variance floor.
    """
    rng = np.random.default_rng(seed)
    size = latent_hw * 8
    mix = rng.normal(0.0, 0.5, size=(4, 4))
    base_frame = np.clip(0.4 + 0.1 * rng.normal(size=(3, size, size)), 0.0, 1.0)
    masked_lat = encode_latent(ImageFrame(base_frame)).values
    ref_lat = masked_lat.copy()
    audio = np.zeros((1, 80))
    samples = []
    for _ in range(n_samples):
        depth = np.zeros((size, size))
        box = rng.integers(low=size // 4, high=size // 2, size=2)
        depth[size // 2:size // 2 + box[0], size // 4:size // 4 + box[1]] = \
            1.0 + rng.uniform(0.0, 2.0)
        lip_lat = encode_latent(depth).values
        gt = np.full((4, latent_hw, latent_hw), 0.3)
        lower = slice(latent_hw // 2, latent_hw)
        gt[:, lower, :] = np.tensordot(mix, lip_lat[:, lower, :], axes=1)
        unet_input = np.concatenate(
            [masked_lat, ref_lat, np.zeros_like(lip_lat) if ablate_lip else lip_lat], axis=0)
        samples.append(TrainingSample(
            unet_input=unet_input, audio=audio, gt_latent=gt,
            gt_image=decode_latent(LatentTensor(gt), out_channels=3),
        ))
    return samples


def main(argv=None):
    parser = argparse.ArgumentParser(description="Generate deterministic toy fixtures.")
    parser.add_argument("out", help="output directory")
    parser.add_argument("--seed", type=int, default=11)
    args = parser.parse_args(argv)
    root = Path(args.out)
    make_clip_fixture(root, seed=args.seed)
    make_training_bundles(root / "bundles_pregen", seed=args.seed)
    make_eval_fixture(root / "eval", seed=args.seed)
    print(f"fixtures written to {root}")
    print(f"camera flag for render-depth: {camera_flag()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
