import numpy as np
import pytest

from depthlip.conditioning import LatentTensor, decode_latent
from depthlip.morphable_model import BasisSet
from depthlip.toy_unet import (LossConfig, TrainingSample, UNetConfig, backward,
                               compute_loss, forward, init_params, parameter_count)


def random_basis(rng, n=None, d_id=None, d_exp=None, f32=False):
    """Random toy basis; f32=True keeps values exactly representable on disk."""
    n = n or int(rng.integers(3, 20))
    d_id = d_id or int(rng.integers(1, 6))
    d_exp = d_exp or int(rng.integers(1, 6))
    mean = rng.normal(size=3 * n)
    id_b = rng.normal(size=(3 * n, d_id))
    exp_b = rng.normal(size=(3 * n, d_exp))
    if f32:
        mean = mean.astype(np.float32).astype(np.float64)
        id_b = id_b.astype(np.float32).astype(np.float64)
        exp_b = exp_b.astype(np.float32).astype(np.float64)
    n_tris = int(rng.integers(1, 2 * n))
    tris = rng.integers(0, n, size=(n_tris, 3))
    return BasisSet(mean_shape=mean, id_basis=id_b, exp_basis=exp_b, triangles=tris)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_unet_config(rng, max_params=5000):
    """Random tiny config kept under max_params for finite-difference sweeps."""
    while True:
        config = UNetConfig(
            in_channels=12,
            base_width=int(rng.integers(3, 6)),
            depth=int(rng.integers(1, 3)),
            audio_dim=int(rng.integers(4, 9)),
            heads=int(rng.choice([1, 2])),
            seed=int(rng.integers(0, 2 ** 31)),
        )
        if parameter_count(init_params(config)) <= max_params:
            return config


def write_tracks_fixture(path):
    """Synthetic face-track CSV: one clean video, one with a no-face gap."""
    rows = ["video_id,frame_idx,count,x,y,w,h"]
    for i in range(120):
        rows.append(f"vidA,{i},1,5,6,40,50")
    for i in range(80):
        if 30 <= i < 35:
            rows.append(f"vidB,{i},0,,,,")
        else:
            rows.append(f"vidB,{i},1,8,9,32,36")
    with open(path, "w") as f:
        f.write("\n".join(rows) + "\n")


PIPELINE_ARTIFACTS = ("clip0/depth", "bundles", "evalout", "stats")


def run_toy_pipeline(root, train_steps=30):
    """Drive every CLI subcommand end to end on generated fixtures.

    Returns {relative_path: bytes} for all produced artifacts so reruns can
    be compared byte for byte.
    """
    from pathlib import Path

    from depthlip import cli
    from depthlip.fixtures import camera_flag, make_clip_fixture, make_eval_fixture

    root = Path(root)
    make_clip_fixture(root)
    make_eval_fixture(root / "eval")
    write_tracks_fixture(root / "tracks.csv")

    def run(*args):
        code = cli.dispatch([str(a) for a in args])
        assert code == 0, f"command failed ({code}): {args}"

    run("render-depth", "--basis", root / "basis.dlb", "--identity", root / "identity.csv",
        "--expr", root / "expr.csv", "--camera", camera_flag(), "--size", "64x64",
        "--out", root / "clip0" / "depth", "--threads", 2)
    for k in range(8):
        run("assemble", "--clip", root / "clip0", "--target", 1 + k,
            "--policy", "uniform:5,25", "--seed", 100 + k, "--with-target",
            "--out", root / "bundles" / f"b{k:02d}.dlt")
    run("train-toy", "--data", root / "bundles", "--steps", train_steps, "--seed", 7,
        "--lr", "1e-3", "--out", root / "model.dlc", "--curve", root / "curve.csv")
    run("infer", "--ckpt", root / "model.dlc", "--bundle", root / "bundles" / "b00.dlt",
        "--out", root / "pred.dlt")
    run("preprocess", "--frames", root, "--tracks", root / "tracks.csv",
        "--out", root / "manifest.csv")
    run("stats", "--manifest", root / "manifest.csv", "--out", root / "stats")
    run("eval-sync", "--manifest", root / "eval" / "manifest.csv", "--pairs", 12,
        "--duration", 10, "--seed", 3, "--out", root / "evalout")

    artifacts = {}
    patterns = ["clip0/depth/*.pfm", "bundles/*.dlt", "model.dlc", "curve.csv",
                "pred.dlt", "manifest.csv", "stats/*", "evalout/*"]
    for pattern in patterns:
        for p in sorted(root.glob(pattern)):
            if p.is_file():
                artifacts[str(p.relative_to(root))] = p.read_bytes()
    return artifacts


def fd_gradient_check(config, rng, coords_per_tensor=3, h=1e-5, hw=8):
    """Compare hand-derived gradients with central finite differences.

    Coordinates whose +-h probes straddle an L1 kink (any latent or pixel
    difference changes sign) are excluded, matching the stated tolerance
    regime.  Returns (worst_relative_error, checked, excluded).
    """
    params = init_params(config)
    x = rng.normal(0.5, 0.5, size=(config.in_channels, hw, hw))
    audio = rng.normal(size=(3, config.audio_dim))
    gt_lat = rng.normal(size=(config.out_channels, hw, hw))
    gt_img = decode_latent(LatentTensor(rng.normal(size=(config.out_channels, hw, hw))), 3)
    sample = TrainingSample(x, audio, gt_lat, gt_img)
    cfg = LossConfig(2.0, 1.0)
    _, grads = backward(params, config, sample, cfg)
    worst, checked, excluded = 0.0, 0, 0
    for name, p in params.items():
        flat = p.ravel()
        idxs = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]

            def eval_at(v):
                flat[i] = v
                out = forward(params, config, x, audio).values
                total = compute_loss(out, gt_lat, gt_img, cfg).total
                return total, out

            tp, outp = eval_at(orig + h)
            tm, outm = eval_at(orig - h)
            flat[i] = orig
            pixp = decode_latent(LatentTensor(outp), 3) - gt_img
            pixm = decode_latent(LatentTensor(outm), 3) - gt_img
            if ((np.sign(outp - gt_lat) != np.sign(outm - gt_lat)).any()
                    or (np.sign(pixp) != np.sign(pixm)).any()):
                excluded += 1
                continue
            fd = (tp - tm) / (2.0 * h)
            an = grads[name].ravel()[i]
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
            checked += 1
    return worst, checked, excluded
