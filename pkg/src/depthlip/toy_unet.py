"""Desk-scale single-step UNet with audio cross-attention.

One forward pass maps the (3C, h, w) conditioning tensor to a C-channel
latent prediction: encoder convolutions with 2x downsampling, scaled
dot-product cross-attention against the audio feature rows at the
bottleneck, and a decoder with skip connections.  There is no iterative
refinement loop anywhere in the inference path.

Everything is float64 numpy with hand-derived reverse-mode gradients so the
whole network is checkable against central finite differences.  The L1
subgradient at 0 is taken as 0.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import LatentTensor, decode_latent, encode_latent, load_bundle
from .errors import FormatError, PipelineError, TrainingDivergence

CHECKPOINT_MAGIC = b"DLC1\n"

DEFAULT_LAMBDA1 = 2.0
DEFAULT_LAMBDA2 = 1.0
DEFAULT_LEARNING_RATE = 1e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class UNetConfig:
    in_channels: int = 12
    base_width: int = 16
    depth: int = 2
    audio_dim: int = 80
    heads: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("in_channels", "base_width", "depth", "audio_dim", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.in_channels % 3:
            raise ValueError("in_channels must be 3x the encoder channel count")
        if self.bottleneck_width % self.heads:
            raise ValueError(
                f"bottleneck width {self.bottleneck_width} not divisible by {self.heads} heads")

    @property
    def out_channels(self):
        return self.in_channels // 3

    @property
    def level_widths(self):
        return [self.base_width * (1 << l) for l in range(self.depth)]

    @property
    def bottleneck_width(self):
        return self.base_width * (1 << self.depth)

    def to_dict(self):
        return {"in_channels": self.in_channels, "base_width": self.base_width,
                "depth": self.depth, "audio_dim": self.audio_dim,
                "heads": self.heads, "seed": self.seed}


@dataclass
class LossConfig:
    lambda1: float = DEFAULT_LAMBDA1  # latent-space weight
    lambda2: float = DEFAULT_LAMBDA2  # pixel-space weight
    pixel_region: str = "full"      # or "lower_half": restrict L1 to generated rows

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.pixel_region not in ("full", "lower_half"):
            raise ValueError(f"unknown pixel_region {self.pixel_region!r}")


@dataclass
class LossReport:
    latent_l1: float
    pixel_l1: float
    total: float


@dataclass
class TrainingSample:
    """One supervised example: conditioning input plus latent/pixel targets."""

    unet_input: np.ndarray
    audio: np.ndarray
    gt_latent: np.ndarray
    gt_image: np.ndarray

    def __post_init__(self):
        self.unet_input = np.asarray(self.unet_input, dtype=np.float64)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.gt_latent = np.asarray(self.gt_latent, dtype=np.float64)
        self.gt_image = np.asarray(self.gt_image, dtype=np.float64)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def init_params(config: UNetConfig, seed=None):
    """Seeded parameter dict, variance-calibrated layer by layer.

    After He/Glorot draws, each conv is rescaled so its post-activation
    variance is 1.0 on a fixed synthetic probe; pooling and concatenation
    otherwise erode variance level by level.  Fully deterministic per seed.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params = {}

    def conv(name, c_out, c_in, k, gain):
        fan_in = c_in * k * k
        w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(c_out, c_in, k, k))
        params[f"{name}.w"] = w
        params[f"{name}.b"] = np.zeros(c_out)

    widths = config.level_widths
    c_in = config.in_channels
    for l, w_l in enumerate(widths):
        conv(f"enc{l}", w_l, c_in, 3, 2.0)
        c_in = w_l
    d = config.bottleneck_width
    conv("bot", d, c_in, 3, 2.0)
    k = config.audio_dim
    params["attn.wq"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    params["attn.wk"] = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, d))
    params["attn.wv"] = rng.normal(0.0, np.sqrt(0.5 / k), size=(k, d))
    c_up = d
    for l in reversed(range(config.depth)):
        conv(f"dec{l}", widths[l], c_up + widths[l], 3, 2.0)
        c_up = widths[l]
    params["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(c_up), size=(config.out_channels, c_up))
    params["head.b"] = np.zeros(config.out_channels)
    _calibrate_variances(params, config, seed)
    return params


def _calibrate_variances(params, config, seed):
    probe_rng = np.random.default_rng([seed, 0xCA11B])
    hw = 8 << config.depth
    x = probe_rng.normal(size=(config.in_channels, hw, hw))
    audio = probe_rng.normal(size=(4, config.audio_dim))
    order = [f"enc{l}" for l in range(config.depth)] + ["bot"] + \
        [f"dec{l}" for l in reversed(range(config.depth))]
    for name in order:
        _, cache = _forward_full(params, config, x, audio)
        act = np.maximum(cache[name][1], 0.0)
        var = act.var()
        if var > 0:
            params[f"{name}.w"] = params[f"{name}.w"] / np.sqrt(var)
    out, _ = _forward_full(params, config, x, audio)
    var = out.var()
    if var > 0:
        params["head.w"] = params["head.w"] / np.sqrt(var)


def parameter_count(params):
    return sum(int(p.size) for p in params.values())


# ---------------------------------------------------------------------------
# primitive layers (forward returns a cache for the matching backward)
# ---------------------------------------------------------------------------


def _im2col(x):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, h, w), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(c * 9, h * w)


def _col2im(dcols, shape):
    c, h, w = shape
    dxp = np.zeros((c, h + 2, w + 2), dtype=np.float64)
    d = dcols.reshape(c, 3, 3, h, w)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w] += d[:, i, j]
    return dxp[:, 1:h + 1, 1:w + 1]


def _conv3_forward(x, w, b):
    cols = _im2col(x)
    c_out = w.shape[0]
    y = (w.reshape(c_out, -1) @ cols + b[:, None]).reshape(c_out, x.shape[1], x.shape[2])
    return y, (cols, x.shape, w)


def _conv3_backward(dy, cache):
    cols, x_shape, w = cache
    c_out = dy.shape[0]
    dy_mat = dy.reshape(c_out, -1)
    dw = (dy_mat @ cols.T).reshape(w.shape)
    db = dy_mat.sum(axis=1)
    dx = _col2im(w.reshape(c_out, -1).T @ dy_mat, x_shape)
    return dx, dw, db


def _avgpool2(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _avgpool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) / 4.0


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_backward(dy):
    c, h, w = dy.shape
    return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def _softmax_rows(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _attention_forward(x_tokens, audio, wq, wk, wv, heads):
    """Scaled dot-product attention; queries from image tokens, keys/values
    from audio rows.  Returns the pre-residual output and a backward cache."""
    q = x_tokens @ wq
    k = audio @ wk
    v = audio @ wv
    d = wq.shape[1]
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    out = np.empty_like(q)
    probs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        p = _softmax_rows((q[:, sl] @ k[:, sl].T) * scale)
        probs.append(p)
        out[:, sl] = p @ v[:, sl]
    return out, (x_tokens, audio, q, k, v, probs, heads, scale)


def _attention_backward(dout, cache):
    x_tokens, audio, q, k, v, probs, heads, scale = cache
    d = q.shape[1]
    dh = d // heads
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        p = probs[h]
        do = dout[:, sl]
        dp = do @ v[:, sl].T
        dv[:, sl] = p.T @ do
        ds = (dp - (dp * p).sum(axis=1, keepdims=True)) * p * scale
        dq[:, sl] = ds @ k[:, sl]
        dk[:, sl] = ds.T @ q[:, sl]
    dwq = x_tokens.T @ dq
    dwk = audio.T @ dk
    dwv = audio.T @ dv
    return dwq, dwk, dwv, dq


def cross_attention(image_feats, audio_feats, params, heads=1):
    """Residual cross-attention: image tokens attend over audio rows.

    image_feats: (tokens, d); audio_feats: (tokens_a, K).  Uses the
    ``attn.wq/wk/wv`` entries of the parameter dict.
    """
    x = np.asarray(image_feats, dtype=np.float64)
    a = np.asarray(audio_feats, dtype=np.float64)
    wq, wk, wv = params["attn.wq"], params["attn.wk"], params["attn.wv"]
    if x.shape[1] != wq.shape[0]:
        raise ValueError(f"image feature dim {x.shape[1]} != query dim {wq.shape[0]}")
    if a.shape[1] != wk.shape[0]:
        raise ValueError(f"audio feature dim {a.shape[1]} != key dim {wk.shape[0]}")
    out, _ = _attention_forward(x, a, wq, wk, wv, heads)
    return x + out


def attention_weights(image_feats, audio_feats, params, heads=1):
    """Softmax attention rows (one matrix per head), for inspection/tests."""
    x = np.asarray(image_feats, dtype=np.float64)
    a = np.asarray(audio_feats, dtype=np.float64)
    _, cache = _attention_forward(x, a, params["attn.wq"], params["attn.wk"],
                                  params["attn.wv"], heads)
    return cache[5]


# ---------------------------------------------------------------------------
# full network forward/backward
# ---------------------------------------------------------------------------


def _check_input(config, x, audio):
    if x.ndim != 3 or x.shape[0] != config.in_channels:
        raise ValueError(f"unet input must be ({config.in_channels}, h, w), got {x.shape}")
    stride = 1 << config.depth
    if x.shape[1] % stride or x.shape[2] % stride:
        raise ValueError(f"spatial dims {x.shape[1:]} must be divisible by {stride}")
    if audio.ndim != 2 or audio.shape[1] != config.audio_dim:
        raise ValueError(f"audio rows must be (n, {config.audio_dim}), got {audio.shape}")


def _forward_full(params, config, x, audio):
    cache = {"skips": []}
    cur = x
    for l in range(config.depth):
        pre, c = _conv3_forward(cur, params[f"enc{l}.w"], params[f"enc{l}.b"])
        act = np.maximum(pre, 0.0)
        cache[f"enc{l}"] = (c, pre)
        cache["skips"].append(act)
        cur = _avgpool2(act)
    pre, c = _conv3_forward(cur, params["bot.w"], params["bot.b"])
    act = np.maximum(pre, 0.0)
    cache["bot"] = (c, pre)
    cb, hb, wb = act.shape
    tokens = act.reshape(cb, hb * wb).T
    att, att_cache = _attention_forward(tokens, audio, params["attn.wq"],
                                        params["attn.wk"], params["attn.wv"], config.heads)
    cache["attn"] = att_cache
    cur = (tokens + att).T.reshape(cb, hb, wb)
    for l in reversed(range(config.depth)):
        up = _upsample2(cur)
        cat = np.concatenate([up, cache["skips"][l]], axis=0)
        pre, c = _conv3_forward(cat, params[f"dec{l}.w"], params[f"dec{l}.b"])
        act = np.maximum(pre, 0.0)
        cache[f"dec{l}"] = (c, pre, up.shape[0])
        cur = act
    cache["head_in"] = cur
    c0 = cur.shape[0]
    out = (params["head.w"] @ cur.reshape(c0, -1) + params["head.b"][:, None])
    out = out.reshape(config.out_channels, x.shape[1], x.shape[2])
    return out, cache


def _backward_full(dout, params, config, cache):
    grads = {}
    head_in = cache["head_in"]
    c0 = head_in.shape[0]
    dy = dout.reshape(config.out_channels, -1)
    grads["head.w"] = dy @ head_in.reshape(c0, -1).T
    grads["head.b"] = dy.sum(axis=1)
    cur = (params["head.w"].T @ dy).reshape(head_in.shape)
    for l in range(config.depth):
        c, pre, split = cache[f"dec{l}"]
        cur = cur * (pre > 0.0)
        dcat, grads[f"dec{l}.w"], grads[f"dec{l}.b"] = _conv3_backward(cur, c)
        dup, dskip = dcat[:split], dcat[split:]
        cache[f"skipgrad{l}"] = dskip
        cur = _upsample2_backward(dup)
    cb, hb, wb = cur.shape
    dres = cur.reshape(cb, hb * wb).T
    att_cache = cache["attn"]
    dwq, dwk, dwv, dq = _attention_backward(dres, att_cache)
    grads["attn.wq"], grads["attn.wk"], grads["attn.wv"] = dwq, dwk, dwv
    # residual path plus the query path back into the bottleneck tokens
    dtokens = dres + dq @ params["attn.wq"].T
    cur = dtokens.T.reshape(cb, hb, wb)
    c, pre = cache["bot"]
    cur = cur * (pre > 0.0)
    cur, grads["bot.w"], grads["bot.b"] = _conv3_backward(cur, c)
    for l in reversed(range(config.depth)):
        cur = _avgpool2_backward(cur)
        cur = cur + cache[f"skipgrad{l}"]
        c, pre = cache[f"enc{l}"]
        cur = cur * (pre > 0.0)
        cur, grads[f"enc{l}.w"], grads[f"enc{l}.b"] = _conv3_backward(cur, c)
    return grads


def forward(params, config: UNetConfig, unet_input, audio) -> LatentTensor:
    """One deterministic prediction pass; raises on non-finite activations."""
    x = unet_input.values if isinstance(unet_input, LatentTensor) else \
        np.asarray(unet_input, dtype=np.float64)
    a = np.asarray(audio, dtype=np.float64)
    _check_input(config, x, a)
    out, _ = _forward_full(params, config, x, a)
    if not np.isfinite(out).all():
        raise PipelineError("forward pass produced non-finite activations")
    return LatentTensor(out)


def _pixel_row_start(cfg, height):
    return (height + 1) // 2 if cfg.pixel_region == "lower_half" else 0


def compute_loss(pred_latent, gt_latent, gt_image, cfg: LossConfig, decode=None) -> LossReport:
    """Mean L1 in latent space plus mean L1 in the decoded pixel space.

    With pixel_region="lower_half" the pixel term covers only the generated
    lower rows of the frame.
    """
    pred = pred_latent.values if isinstance(pred_latent, LatentTensor) else \
        np.asarray(pred_latent, dtype=np.float64)
    gt_lat = gt_latent.values if isinstance(gt_latent, LatentTensor) else \
        np.asarray(gt_latent, dtype=np.float64)
    gt_img = np.asarray(gt_image, dtype=np.float64)
    if pred.shape != gt_lat.shape:
        raise ValueError(f"latent shapes differ: {pred.shape} vs {gt_lat.shape}")
    if decode is None:
        decode = lambda lat: decode_latent(LatentTensor(lat), out_channels=gt_img.shape[0])
    decoded = decode(pred)
    if decoded.shape != gt_img.shape:
        raise ValueError(f"decoded shape {decoded.shape} != image shape {gt_img.shape}")
    row0 = _pixel_row_start(cfg, gt_img.shape[1])
    latent_l1 = float(np.abs(pred - gt_lat).mean())
    pixel_l1 = float(np.abs(decoded[:, row0:, :] - gt_img[:, row0:, :]).mean())
    return LossReport(latent_l1=latent_l1, pixel_l1=pixel_l1,
                      total=cfg.lambda1 * latent_l1 + cfg.lambda2 * pixel_l1)


def _loss_grad_wrt_pred(pred, gt_lat, gt_img, cfg):
    decoded = decode_latent(LatentTensor(pred), out_channels=gt_img.shape[0])
    g = cfg.lambda1 * np.sign(pred - gt_lat) / pred.size
    row0 = _pixel_row_start(cfg, gt_img.shape[1])
    region = decoded[:, row0:, :] - gt_img[:, row0:, :]
    pixel_sign = np.zeros_like(gt_img)
    pixel_sign[:, row0:, :] = cfg.lambda2 * np.sign(region) / region.size
    # adjoint of the decoder stub is exactly the encoder stub
    return g + encode_latent(pixel_sign).values


def backward(params, config: UNetConfig, sample: TrainingSample, cfg: LossConfig):
    """Loss and exact reverse-mode gradients of the total loss.

    Returns (LossReport, grads) with one gradient array per parameter;
    raises PipelineError naming the parameter if a gradient is non-finite.
    """
    x, a = sample.unet_input, sample.audio
    _check_input(config, x, a)
    out, cache = _forward_full(params, config, x, a)
    if not np.isfinite(out).all():
        raise PipelineError("forward pass produced non-finite activations")
    report = compute_loss(out, sample.gt_latent, sample.gt_image, cfg)
    dout = _loss_grad_wrt_pred(out, sample.gt_latent, sample.gt_image, cfg)
    grads = _backward_full(dout, params, config, cache)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise PipelineError(f"non-finite gradient for parameter {name!r}")
    return report, grads


def sample_from_bundle(bundle, extras) -> TrainingSample:
    """Turn a loaded bundle (with embedded targets) into a TrainingSample."""
    for key in ("gt_latent", "gt_image"):
        if key not in extras:
            raise FormatError(f"bundle for clip {bundle.provenance.clip_id!r} lacks a "
                              f"{key!r} section; assemble it with targets embedded")
    return TrainingSample(unet_input=bundle.unet_input.values, audio=bundle.audio,
                          gt_latent=extras["gt_latent"], gt_image=extras["gt_image"])


def load_training_dir(path):
    """All *.dlt bundles under path, sorted by filename."""
    files = sorted(Path(path).glob("*.dlt"))
    if not files:
        raise FormatError(f"{path}: no *.dlt bundle files found")
    return [sample_from_bundle(*load_bundle(p)) for p in files]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _tree_sum(grad_list):
    # fixed pairwise reduction topology: result independent of worker timing
    items = list(grad_list)
    while len(items) > 1:
        merged = []
        for i in range(0, len(items) - 1, 2):
            merged.append({k: items[i][k] + items[i + 1][k] for k in items[i]})
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


def train_loop(dataset, config: UNetConfig, loss_cfg: LossConfig | None = None,
               optimizer="adam", lr=DEFAULT_LEARNING_RATE, steps=100, seed=0,
               threads=1, params=None, betas=ADAM_BETAS, eps=ADAM_EPS,
               step_callback=None):
    """Full-batch training on a list of TrainingSample; deterministic per seed.

    Returns (params, curve) where curve holds one batch-mean LossReport per
    step.  Non-finite losses abort with TrainingDivergence.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    loss_cfg = loss_cfg or LossConfig()
    if params is None:
        params = init_params(config, seed)
    else:
        params = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = {k: np.zeros_like(v) for k, v in params.items()}
    curve = []
    n = len(dataset)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for step in range(steps):
            try:
                if pool is not None:
                    results = list(pool.map(lambda s: backward(params, config, s, loss_cfg),
                                            dataset))
                else:
                    results = [backward(params, config, s, loss_cfg) for s in dataset]
            except PipelineError as exc:
                raise TrainingDivergence(step, str(exc)) from exc
            reports = [r for r, _ in results]
            grads = {k: g / n for k, g in _tree_sum([g for _, g in results]).items()}
            mean_lat = sum(r.latent_l1 for r in reports) / n
            mean_pix = sum(r.pixel_l1 for r in reports) / n
            report = LossReport(latent_l1=mean_lat, pixel_l1=mean_pix,
                                total=loss_cfg.lambda1 * mean_lat + loss_cfg.lambda2 * mean_pix)
            if not np.isfinite(report.total):
                raise TrainingDivergence(step, f"loss became non-finite ({report!r})")
            curve.append(report)
            if step_callback is not None:
                step_callback(step, report)
            if optimizer == "sgd":
                for k in params:
                    params[k] = params[k] - lr * grads[k]
            else:
                t = step + 1
                b1, b2 = betas
                for k in params:
                    m[k] = b1 * m[k] + (1 - b1) * grads[k]
                    v_state[k] = b2 * v_state[k] + (1 - b2) * grads[k] ** 2
                    m_hat = m[k] / (1 - b1 ** t)
                    v_hat = v_state[k] / (1 - b2 ** t)
                    params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, curve


# ---------------------------------------------------------------------------
# checkpoint I/O: magic, config key=value block, then named f64 sections.
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: UNetConfig, params):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(b"config\n")
        for key, value in config.to_dict().items():
            f.write(f"{key}={value}\n".encode("ascii"))
        f.write(b"end\n")
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape) if arr.ndim else "0"
            f.write(f"{name}\n".encode("ascii"))
            f.write(f"{arr.ndim} {dims}\n".encode("ascii"))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        if f.readline().strip() != b"config":
            raise FormatError(f"{path}: missing config block")
        fields = {}
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: unterminated config block")
            text = line.decode("ascii").strip()
            if text == "end":
                break
            key, _, value = text.partition("=")
            fields[key] = int(value)
        try:
            config = UNetConfig(**fields)
        except TypeError:
            raise FormatError(f"{path}: unknown config fields {sorted(fields)}") from None
        params = {}
        while True:
            name_line = f.readline()
            if not name_line:
                break
            name = name_line.decode("ascii").strip()
            if not name:
                continue
            dims_line = f.readline().split()
            if not dims_line:
                raise FormatError(f"{path}: parameter {name!r} missing dims line")
            ndim = int(dims_line[0])
            shape = tuple(int(d) for d in dims_line[1:1 + ndim])
            count = int(np.prod(shape)) if shape else 1
            payload = f.read(8 * count)
            if len(payload) != 8 * count:
                raise FormatError(f"{path}: parameter {name!r} payload truncated")
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return config, params
