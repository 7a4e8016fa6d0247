"""Single executable for the whole pipeline.

Subcommands: render-depth, preprocess, stats, assemble, train-toy, infer,
eval-sync.  Exit codes: 0 success, 1 usage error, 2 data error.  All
diagnostics go to stderr; machine-readable output goes to files only.

Every subcommand accepts ``--config FILE`` holding ``key=value`` lines that
mirror its flags (dashes become underscores).  Precedence is built-in
defaults, then config values, then explicit command-line flags; unknown
config keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

from . import (audio_features, conditioning, dataset_pipeline, depth_renderer,
               eval_harness, morphable_model, toy_unet)
from .errors import PipelineError


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_size(text):
    parts = str(text).lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"size must be WxH, got {text!r}")
    w, h = int(parts[0]), int(parts[1])
    if w < 1 or h < 1:
        raise ValueError(f"size must be positive, got {text!r}")
    return w, h


def _parse_camera(text):
    parts = str(text).split(",")
    if len(parts) != 4:
        raise ValueError(f"camera must be scale,tx,ty,depth_offset, got {text!r}")
    sx, tx, ty, dz = (float(p) for p in parts)
    return depth_renderer.Camera(scale=sx, tx=tx, ty=ty, depth_offset=dz)


def _parse_policy(text):
    kind, _, rest = str(text).partition(":")
    if kind == "fixed":
        return conditioning.ReferencePolicy(mode="fixed_offset", offset=int(rest))
    if kind == "uniform":
        lo, _, hi = rest.partition(",")
        return conditioning.ReferencePolicy(mode="uniform_range", range=(int(lo), int(hi)))
    raise ValueError(f"policy must be fixed:T or uniform:lo,hi, got {text!r}")


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass
class Flag:
    name: str
    type: object = str
    default: object = None
    required: bool = False
    is_switch: bool = False
    help: str = ""

    @property
    def dest(self):
        return self.name.replace("-", "_")


def _build_parser(command, flags):
    parser = _Parser(prog=f"depthlip {command}", description=COMMANDS[command][2])
    for flag in flags:
        if flag.is_switch:
            parser.add_argument(f"--{flag.name}", action="store_true",
                                default=argparse.SUPPRESS, help=flag.help)
        else:
            parser.add_argument(f"--{flag.name}", default=argparse.SUPPRESS,
                                help=flag.help, metavar=flag.name.upper())
    parser.add_argument("--config", default=argparse.SUPPRESS, metavar="FILE",
                        help="key=value file mirroring these flags")
    return parser


def _load_run_config(path):
    values = {}
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            key, sep, value = text.partition("=")
            if not sep or not key.strip():
                raise ValueError(f"{path}:{lineno}: expected key=value, got {text!r}")
            values[key.strip()] = value.strip()
    return values


def _resolve(command, flags, namespace):
    """Merge defaults, config-file values and explicit flags; convert types."""
    by_dest = {f.dest: f for f in flags}
    values = {f.dest: f.default for f in flags}
    provided = vars(namespace)
    if "config" in provided:
        for key, raw in _load_run_config(provided["config"]).items():
            dest = key.replace("-", "_")
            if dest not in by_dest:
                raise _UsageError(f"unknown config key {key!r} for {command}")
            flag = by_dest[dest]
            try:
                values[dest] = _parse_bool(raw) if flag.is_switch else flag.type(raw)
            except ValueError as exc:
                raise _UsageError(f"config key {key!r}: {exc}") from None
    for dest, raw in provided.items():
        if dest == "config":
            continue
        flag = by_dest[dest]
        if flag.is_switch:
            values[dest] = True
        else:
            try:
                values[dest] = flag.type(raw)
            except ValueError as exc:
                raise _UsageError(f"--{flag.name}: {exc}") from None
    for flag in flags:
        if flag.required and values[flag.dest] is None:
            raise _UsageError(f"{command} requires --{flag.name}")
    return values


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _cmd_render_depth(v):
    basis = morphable_model.load_basis(v["basis"], full_scale=v["full_scale"])
    alpha = morphable_model.load_identity_csv(v["identity"], expected_dim=basis.id_dim)
    track = morphable_model.load_expression_track(v["expr"], frame_rate=v["fps"],
                                                  expected_dim=basis.exp_dim)
    width, height = v["size"]
    maps = depth_renderer.render_track(basis, alpha, track, v["camera"],
                                       (width, height), threads=v["threads"])
    if v["mouth"]:
        polys = depth_renderer.load_mouth_csv(v["mouth"])
        for i, dm in enumerate(maps):
            poly = polys[next(iter(polys))] if len(polys) == 1 else polys.get(i)
            if poly is None:
                raise PipelineError(f"no mouth polygon for frame {i}")
            maps[i] = depth_renderer.mask_mouth_region(dm, poly)
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i, dm in enumerate(maps):
        depth_renderer.write_pfm(out / f"{i:06d}.pfm", dm)
    print(f"wrote {len(maps)} depth maps to {out}", file=sys.stderr)
    return 0


def _cmd_preprocess(v):
    tracks = dataset_pipeline.load_face_track_csv(v["tracks"], fps=v["fps"])
    manifest = dataset_pipeline.build_manifest(tracks, data_root=v["frames"],
                                               min_len=v["min_len"])
    _ensure_parent(v["out"])
    dataset_pipeline.write_manifest(v["out"], manifest)
    print(f"wrote {len(manifest)} clip records to {v['out']}", file=sys.stderr)
    return 0


def _cmd_stats(v):
    manifest = dataset_pipeline.load_manifest(v["manifest"])
    stats = dataset_pipeline.compute_statistics(
        manifest, dataset_pipeline.StatsConfig(bins=v["bins"]))
    dataset_pipeline.write_stats(v["out"], stats)
    print(f"stats for {stats.clip_count} clips ({stats.total_hours:.4f} h) "
          f"written to {v['out']}", file=sys.stderr)
    return 0


def _cmd_assemble(v):
    mel = audio_features.MelConfig(fft_size=v["fft_size"], band_count=v["bands"])
    clip = conditioning.load_clip(v["clip"], mel_config=mel, fps=v["fps"])
    aug = conditioning.AugmentationConfig(
        perturb=not v["no_perturb"], max_shift=v["max_shift"],
        dropout=not v["no_dropout"], dropout_p=v["dropout_p"])
    seeds = conditioning.BundleSeeds(reference=v["seed"], shift=v["seed"] + 1,
                                     dropout=v["seed"] + 2)
    bundle = conditioning.build_bundle(clip, v["target"], v["policy"], aug, seeds,
                                       audio_window=v["audio_window"])
    gt_latent = gt_image = None
    if v["with_target"]:
        gt_latent = conditioning.encode_latent(clip.frames[v["target"]])
        gt_image = conditioning.decode_latent(gt_latent, out_channels=3)
    _ensure_parent(v["out"])
    conditioning.save_bundle(v["out"], bundle, gt_latent=gt_latent, gt_image=gt_image)
    print(f"bundle target={v['target']} ref={bundle.provenance.reference_index} "
          f"dropped={bundle.provenance.depth_dropped} -> {v['out']}", file=sys.stderr)
    return 0


def _cmd_train_toy(v):
    dataset = toy_unet.load_training_dir(v["data"])
    sample = dataset[0]
    config = toy_unet.UNetConfig(
        in_channels=sample.unet_input.shape[0], base_width=v["base_width"],
        depth=v["depth"], audio_dim=sample.audio.shape[1], heads=v["heads"],
        seed=v["seed"])
    loss_cfg = toy_unet.LossConfig(lambda1=v["lambda1"], lambda2=v["lambda2"])
    params, curve = toy_unet.train_loop(
        dataset, config, loss_cfg, optimizer=v["optimizer"], lr=v["lr"],
        steps=v["steps"], seed=v["seed"], threads=v["threads"])
    _ensure_parent(v["out"])
    toy_unet.save_checkpoint(v["out"], config, params)
    if v["curve"]:
        with open(v["curve"], "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "latent_l1", "pixel_l1", "total"])
            for i, r in enumerate(curve):
                writer.writerow([i, repr(r.latent_l1), repr(r.pixel_l1), repr(r.total)])
    print(f"trained {v['steps']} steps on {len(dataset)} bundles: "
          f"loss {curve[0].total:.6f} -> {curve[-1].total:.6f}", file=sys.stderr)
    return 0


def _cmd_infer(v):
    config, params = toy_unet.load_checkpoint(v["ckpt"])
    bundle, _ = conditioning.load_bundle(v["bundle"])
    pred = toy_unet.forward(params, config, bundle.unet_input, bundle.audio)
    p = bundle.provenance
    _ensure_parent(v["out"])
    conditioning.write_tensor_file(
        v["out"], {"pred": pred.values},
        meta={"clip": p.clip_id, "target": p.target_index})
    print(f"prediction {pred.values.shape} -> {v['out']}", file=sys.stderr)
    return 0


def _cmd_eval_sync(v):
    manifest = dataset_pipeline.load_manifest(v["manifest"])
    per_video = v["max_per_video"] if v["max_per_video"] > 0 else None
    report = eval_harness.run_sync_evaluation(
        manifest, v["pairs"], v["duration"], v["seed"], v["out"],
        max_lag=v["max_lag"], max_pairs_per_video=per_video)
    print(f"{report.scores.size} pairs scored: mean {report.mean_score:.4f}, "
          f"median {report.median_score:.4f} -> {v['out']}", file=sys.stderr)
    return 0


COMMANDS = {
    "render-depth": ([
        Flag("basis", str, required=True, help="basis file (DLB1)"),
        Flag("identity", str, required=True, help="identity coefficient CSV"),
        Flag("expr", str, required=True, help="expression track CSV"),
        Flag("camera", _parse_camera, required=True, help="scale,tx,ty,depth_offset"),
        Flag("size", _parse_size, required=True, help="WxH pixels"),
        Flag("mouth", str, default="", help="mouth keypoint CSV; mask when given"),
        Flag("out", str, required=True, help="output directory for PFM frames"),
        Flag("fps", float, default=25.0, help="track frame rate"),
        Flag("threads", int, default=1, help="row-band workers"),
        Flag("full-scale", is_switch=True, help="require 80/64 basis dims"),
    ], _cmd_render_depth, "Render a depth-map sequence from basis + coefficients."),
    "preprocess": ([
        Flag("frames", str, default="", help="data root recorded into clip paths"),
        Flag("tracks", str, required=True, help="face track CSV"),
        Flag("out", str, required=True, help="output manifest CSV"),
        Flag("fps", float, default=25.0),
        Flag("min-len", int, default=dataset_pipeline.DEFAULT_MIN_CLIP_FRAMES,
             help="minimum clip length in frames"),
    ], _cmd_preprocess, "Segment face tracks into a clip manifest."),
    "stats": ([
        Flag("manifest", str, required=True),
        Flag("out", str, required=True, help="output directory"),
        Flag("bins", int, default=10),
    ], _cmd_stats, "Dataset statistics: duration/fps/face-size histograms."),
    "assemble": ([
        Flag("clip", str, required=True, help="clip directory"),
        Flag("target", int, required=True, help="target frame index"),
        Flag("policy", _parse_policy, default=conditioning.ReferencePolicy(),
             help="fixed:T or uniform:lo,hi"),
        Flag("seed", int, required=True),
        Flag("out", str, required=True, help="output bundle file"),
        Flag("fps", float, default=25.0),
        Flag("fft-size", int, default=512),
        Flag("bands", int, default=audio_features.DEFAULT_BANDS),
        Flag("max-shift", int, default=5),
        Flag("dropout-p", float, default=0.5),
        Flag("audio-window", int, default=1),
        Flag("no-perturb", is_switch=True),
        Flag("no-dropout", is_switch=True),
        Flag("with-target", is_switch=True, help="embed gt_latent/gt_image sections"),
    ], _cmd_assemble, "Build one conditioning bundle from a clip directory."),
    "train-toy": ([
        Flag("data", str, required=True, help="directory of *.dlt bundles"),
        Flag("steps", int, required=True),
        Flag("seed", int, required=True),
        Flag("out", str, required=True, help="output checkpoint"),
        Flag("lr", float, default=toy_unet.DEFAULT_LEARNING_RATE),
        Flag("optimizer", str, default="adam"),
        Flag("lambda1", float, default=toy_unet.DEFAULT_LAMBDA1),
        Flag("lambda2", float, default=toy_unet.DEFAULT_LAMBDA2),
        Flag("base-width", int, default=16),
        Flag("depth", int, default=2),
        Flag("heads", int, default=1),
        Flag("threads", int, default=1),
        Flag("curve", str, default="", help="optional per-step loss CSV"),
    ], _cmd_train_toy, "Overfit the toy UNet on bundle files."),
    "infer": ([
        Flag("ckpt", str, required=True),
        Flag("bundle", str, required=True),
        Flag("out", str, required=True, help="output latent tensor file"),
    ], _cmd_infer, "One forward pass of a trained checkpoint on a bundle."),
    "eval-sync": ([
        Flag("manifest", str, required=True),
        Flag("pairs", int, required=True),
        Flag("duration", float, default=10.0),
        Flag("seed", int, required=True),
        Flag("out", str, required=True, help="output directory"),
        Flag("max-lag", int, default=eval_harness.DEFAULT_MAX_LAG),
        Flag("max-per-video", int, default=0,
             help="cap on pairs drawing video from one source; 0 = unlimited"),
    ], _cmd_eval_sync, "Unpaired sync-proxy evaluation with distribution curves."),
}

_USAGE = "usage: depthlip COMMAND [flags]\n\ncommands:\n" + "\n".join(
    f"  {name:<14} {desc}" for name, (_, _, desc) in COMMANDS.items())


def dispatch(argv) -> int:
    """Route argv to a subcommand; returns the process exit code."""
    argv = list(argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(_USAGE)
        return 0
    command = argv[0]
    if command not in COMMANDS:
        print(f"depthlip: unknown command {command!r}\n{_USAGE}", file=sys.stderr)
        return 1
    flags, func, _ = COMMANDS[command]
    parser = _build_parser(command, flags)
    try:
        namespace = parser.parse_args(argv[1:])
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        values = _resolve(command, flags, namespace)
    except (_UsageError, ValueError) as exc:
        print(f"depthlip {command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"depthlip {command}: {exc}", file=sys.stderr)
        return 2
    try:
        return func(values)
    except (PipelineError, ValueError, KeyError, OSError) as exc:
        print(f"depthlip {command}: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
