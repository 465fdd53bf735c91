"""Toy shared-encoder vision transformer for RGB-D segmentation.

Both modalities run through the same patch embedding and the same attention
and MLP weights. Fusion happens inside every attention block:

* ``key_swap``: softmax(Q_rgb K_d^T / sqrt(d_head)) V_rgb
* ``cross_d_to_rgb``: softmax(Q_rgb K_d^T / sqrt(d_head)) V_d
* ``rgb_only``: plain self-attention on the RGB stream; depth is ignored

The depth stream itself runs plain self-attention; it exists only to supply
keys (or values) to the next stage. Only the fused RGB stream reaches the
decoder, which concatenates every stage's output, applies a two-layer MLP
per token and upsamples the logits nearest-neighbour to pixel resolution.

Arrays are batched: images are B x H x W x C, tokens B x N x D.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import InvalidInputError, make_rng

FUSION_MODES = ("key_swap", "cross_d_to_rgb", "rgb_only")
LN_EPS = 1e-6
CHECKPOINT_MAGIC = b"MSFT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UsageError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    stage_dims: tuple = (16, 32)
    heads_per_stage: tuple = (2, 2)
    num_classes: int = 5
    fusion_mode: str = "key_swap"
    mlp_ratio: int = 2
    decoder_dim: int = 32
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(int(d) for d in self.stage_dims))
        object.__setattr__(self, "heads_per_stage", tuple(int(h) for h in self.heads_per_stage))
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if len(self.stage_dims) != len(self.heads_per_stage) or not self.stage_dims:
            raise ConfigError("stage_dims and heads_per_stage must be non-empty and equally long")
        for d, h in zip(self.stage_dims, self.heads_per_stage):
            if h < 1 or d % h:
                raise ConfigError(f"stage dim {d} not divisible by {h} heads")
        if self.patch_size < 1 or self.num_classes < 1:
            raise ConfigError("patch_size and num_classes must be positive")

    @property
    def num_stages(self):
        return len(self.stage_dims)

    def with_fusion(self, mode):
        return EncoderConfig(**{**asdict(self), "fusion_mode": mode})

    def to_dict(self):
        d = asdict(self)
        d["stage_dims"] = list(self.stage_dims)
        d["heads_per_stage"] = list(self.heads_per_stage)
        return d


@dataclass
class ModelParams:
    """Named parameter arrays in declaration order; one copy per projection."""

    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self):
        return sum(v.size for v in self.tensors.values())

    def flat(self):
        return np.concatenate([v.reshape(-1) for v in self.tensors.values()])

    def with_flat(self, vec):
        out, i = {}, 0
        for k, v in self.tensors.items():
            out[k] = np.asarray(vec[i:i + v.size], dtype=np.float64).reshape(v.shape).copy()
            i += v.size
        return ModelParams(self.config, out)


def _param_shapes(cfg):
    p = cfg.patch_size
    shapes = {
        "patch.W": (p * p * cfg.in_channels, cfg.stage_dims[0]),
        "patch.b": (cfg.stage_dims[0],),
    }
    prev = cfg.stage_dims[0]
    for s, d in enumerate(cfg.stage_dims):
        pre = f"stage{s}."
        if s > 0:
            shapes[pre + "in.W"] = (prev, d)
            shapes[pre + "in.b"] = (d,)
        shapes[pre + "ln1.g"] = (d,)
        shapes[pre + "ln1.b"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[pre + proj + ".W"] = (d, d)
            shapes[pre + proj + ".b"] = (d,)
        shapes[pre + "ln2.g"] = (d,)
        shapes[pre + "ln2.b"] = (d,)
        hidden = cfg.mlp_ratio * d
        shapes[pre + "mlp1.W"] = (d, hidden)
        shapes[pre + "mlp1.b"] = (hidden,)
        shapes[pre + "mlp2.W"] = (hidden, d)
        shapes[pre + "mlp2.b"] = (d,)
        prev = d
    shapes["dec1.W"] = (sum(cfg.stage_dims), cfg.decoder_dim)
    shapes["dec1.b"] = (cfg.decoder_dim,)
    shapes["dec2.W"] = (cfg.decoder_dim, cfg.num_classes)
    shapes["dec2.b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg, seed):
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = make_rng(seed)
    tensors = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# layer primitives: forward returns (out, cache), backward returns grads


def _linear(x, W, b):
    return x @ W + b


def _linear_back(dy, x, W):
    dx = dy @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dW, db


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, cache, g):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def _split_heads(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention(q, k, v, heads):
    """Scaled dot-product attention on already-projected q/k/v (B x N x D).

    Returns the merged head outputs and the attention weights B x h x N x N.
    """
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return _merge_heads(p @ vh), p


def _attention_back(dout, q, k, v, p, heads):
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    do = _split_heads(dout, heads)
    dp = do @ vh.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ kh
    dk = ds.transpose(0, 1, 3, 2) @ qh
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


# ---------------------------------------------------------------------------
# token grids


@dataclass(frozen=True)
class TokenGrid:
    rows: int
    cols: int
    values: np.ndarray  # (B x) rows*cols x dim

    @property
    def dim(self):
        return self.values.shape[-1]


def _check_image(x, cfg, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise InvalidInputError(f"{name} must be H x W x C or B x H x W x C, got {x.shape}")
    p = cfg.patch_size
    if x.shape[1] % p or x.shape[2] % p:
        raise ConfigError(f"patch size {p} does not divide {name} size {x.shape[1:3]}")
    return x


def _patchify(x, p):
    b, h, w, c = x.shape
    t = x.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(b, (h // p) * (w // p), p * p * c)


def _unpatchify(t, h, w, p, c):
    b = t.shape[0]
    x = t.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def patch_embed(image, params, cfg=None):
    cfg = cfg or params.config
    x = _check_image(image, cfg, "image")
    if x.shape[3] != cfg.in_channels:
        raise InvalidInputError(f"expected {cfg.in_channels} channels, got {x.shape[3]}")
    p = cfg.patch_size
    vals = _linear(_patchify(x, p), params["patch.W"], params["patch.b"])
    if np.ndim(image) == 3:
        vals = vals[0]
    return TokenGrid(x.shape[1] // p, x.shape[2] // p, vals)


def _as_tokens(t):
    v = t.values if isinstance(t, TokenGrid) else np.asarray(t, dtype=np.float64)
    return v[None] if v.ndim == 2 else v


def _stage_prefix(stage):
    return f"stage{stage}."


def mha_cross(q_tokens, kv_tokens, params, stage=0):
    """Cross-attention: queries from ``q_tokens``, keys and values from ``kv_tokens``."""
    return _mha(q_tokens, kv_tokens, kv_tokens, params, stage)


def mha_keyswap(rgb_tokens, d_tokens, params, stage=0):
    """Key-swap attention: queries and values from RGB, keys from depth."""
    return _mha(rgb_tokens, d_tokens, rgb_tokens, params, stage)


def _mha(q_src, k_src, v_src, params, stage):
    """Projection + attention + output projection, no normalization or residual."""
    a, b, c = _as_tokens(q_src), _as_tokens(k_src), _as_tokens(v_src)
    if not (a.shape == b.shape == c.shape):
        raise InvalidInputError(f"token shapes differ: {a.shape}, {b.shape}, {c.shape}")
    pre = _stage_prefix(stage)
    if a.shape[-1] != params[pre + "q.W"].shape[0]:
        raise InvalidInputError(f"token dim {a.shape[-1]} does not match stage {stage}")
    heads = params.config.heads_per_stage[stage]
    q = _linear(a, params[pre + "q.W"], params[pre + "q.b"])
    k = _linear(b, params[pre + "k.W"], params[pre + "k.b"])
    v = _linear(c, params[pre + "v.W"], params[pre + "v.b"])
    o, p = attention(q, k, v, heads)
    out = _linear(o, params[pre + "o.W"], params[pre + "o.b"])
    squeeze = np.ndim(q_src.values if isinstance(q_src, TokenGrid) else q_src) == 2
    if isinstance(q_src, TokenGrid):
        out_vals = out[0] if squeeze else out
        return TokenGrid(q_src.rows, q_src.cols, out_vals), (p[0] if squeeze else p)
    return (out[0] if squeeze else out), (p[0] if squeeze else p)


# ---------------------------------------------------------------------------
# full model


def _block_forward(x_q, x_kv, params, stage, mode_keys, mode_values, store):
    """Pre-norm transformer block on the stream ``x_q``.

    ``x_kv`` supplies keys/values according to the mode flags; when it is
    ``None`` the block is plain self-attention.
    """
    pre = _stage_prefix(stage)
    heads = params.config.heads_per_stage[stage]
    g1, b1 = params[pre + "ln1.g"], params[pre + "ln1.b"]
    a_q, ln_q = _layernorm(x_q, g1, b1)
    if x_kv is None:
        a_kv, ln_kv = a_q, None
    else:
        a_kv, ln_kv = _layernorm(x_kv, g1, b1)
    k_src = a_kv if mode_keys else a_q
    v_src = a_kv if mode_values else a_q
    q = _linear(a_q, params[pre + "q.W"], params[pre + "q.b"])
    k = _linear(k_src, params[pre + "k.W"], params[pre + "k.b"])
    v = _linear(v_src, params[pre + "v.W"], params[pre + "v.b"])
    o, p = attention(q, k, v, heads)
    h = x_q + _linear(o, params[pre + "o.W"], params[pre + "o.b"])
    m, ln2 = _layernorm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
    z = _linear(m, params[pre + "mlp1.W"], params[pre + "mlp1.b"])
    gz, t = _gelu(z)
    y = h + _linear(gz, params[pre + "mlp2.W"], params[pre + "mlp2.b"])
    cache = None
    if store:
        cache = dict(a_q=a_q, ln_q=ln_q, a_kv=a_kv, ln_kv=ln_kv, q=q, k=k, v=v, o=o, p=p,
                     m=m, ln2=ln2, z=z, t=t, gz=gz, keys=mode_keys, values=mode_values,
                     cross=x_kv is not None)
    return y, cache


def _block_backward(dy, c, params, stage, grads):
    """Returns (dx_q, dx_kv); dx_kv is None for self-attention blocks."""
    pre = _stage_prefix(stage)
    heads = params.config.heads_per_stage[stage]
    dh = dy.copy()
    dgz, dW, db = _linear_back(dy, c["gz"], params[pre + "mlp2.W"])
    grads[pre + "mlp2.W"] += dW
    grads[pre + "mlp2.b"] += db
    dz = _gelu_back(dgz, c["z"], c["t"])
    dm, dW, db = _linear_back(dz, c["m"], params[pre + "mlp1.W"])
    grads[pre + "mlp1.W"] += dW
    grads[pre + "mlp1.b"] += db
    dx, dg, db = _layernorm_back(dm, c["ln2"], params[pre + "ln2.g"])
    grads[pre + "ln2.g"] += dg
    grads[pre + "ln2.b"] += db
    dh += dx
    dx_q = dh.copy()
    do, dW, db = _linear_back(dh, c["o"], params[pre + "o.W"])
    grads[pre + "o.W"] += dW
    grads[pre + "o.b"] += db
    dq, dk, dv = _attention_back(do, c["q"], c["k"], c["v"], c["p"], heads)
    k_src = c["a_kv"] if c["keys"] else c["a_q"]
    v_src = c["a_kv"] if c["values"] else c["a_q"]
    da_q, dW, db = _linear_back(dq, c["a_q"], params[pre + "q.W"])
    grads[pre + "q.W"] += dW
    grads[pre + "q.b"] += db
    dk_src, dW, db = _linear_back(dk, k_src, params[pre + "k.W"])
    grads[pre + "k.W"] += dW
    grads[pre + "k.b"] += db
    dv_src, dW, db = _linear_back(dv, v_src, params[pre + "v.W"])
    grads[pre + "v.W"] += dW
    grads[pre + "v.b"] += db
    da_kv = None
    if c["cross"]:
        da_kv = np.zeros_like(da_q)
        for d_src, to_kv in ((dk_src, c["keys"]), (dv_src, c["values"])):
            if to_kv:
                da_kv += d_src
            else:
                da_q += d_src
    else:
        da_q += dk_src + dv_src
    g1 = params[pre + "ln1.g"]
    dxa, dg, db = _layernorm_back(da_q, c["ln_q"], g1)
    grads[pre + "ln1.g"] += dg
    grads[pre + "ln1.b"] += db
    dx_q += dxa
    dx_kv = None
    if da_kv is not None:
        dx_kv, dg, db = _layernorm_back(da_kv, c["ln_kv"], g1)
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
    return dx_q, dx_kv


@dataclass
class ForwardCache:
    shape: tuple
    patches_rgb: np.ndarray
    patches_d: np.ndarray
    stages: list
    dec_in: np.ndarray
    dec_z: np.ndarray
    dec_t: np.ndarray
    dec_h: np.ndarray
    depth_used: bool


def _check_finite(x, stage):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation in stage {stage}")


def replicate_depth(depth):
    """H x W (or B x H x W, or trailing 1-channel) disparity -> 3 identical channels."""
    d = np.asarray(depth, dtype=np.float64)
    if d.shape[-1] != 1:
        d = d[..., None]
    return np.repeat(d, 3, axis=-1)


def encoder_forward(rgb, depth, params, cfg=None, store=False):
    """Per-pixel class logits (B x H x W x C, or H x W x C for unbatched input).

    ``depth`` is a disparity map; it is replicated to three channels and shares
    the RGB patch embedding. With ``store=True`` returns ``(logits, cache)``.
    """
    cfg = cfg or params.config
    unbatched = np.ndim(rgb) == 3
    x_rgb = _check_image(rgb, cfg, "rgb")
    mode = cfg.fusion_mode
    use_depth = mode != "rgb_only"
    p = cfg.patch_size
    pr = _patchify(x_rgb, p)
    xr = _linear(pr, params["patch.W"], params["patch.b"])
    pd = None
    xd = None
    if use_depth:
        if depth is None:
            raise InvalidInputError(f"fusion mode {mode} needs a depth input")
        dd = np.asarray(depth, dtype=np.float64)
        if unbatched and dd.ndim in (2, 3) and dd.shape[:2] == x_rgb.shape[1:3]:
            dd = dd[None]
        x_d = _check_image(replicate_depth(dd) if dd.shape[-1] != 3 else dd, cfg, "depth")
        if x_d.shape[:3] != x_rgb.shape[:3]:
            raise InvalidInputError(f"rgb {x_rgb.shape[:3]} and depth {x_d.shape[:3]} sizes differ")
        pd = _patchify(x_d, p)
        xd = _linear(pd, params["patch.W"], params["patch.b"])
    keys = mode in ("key_swap", "cross_d_to_rgb")
    values = mode == "cross_d_to_rgb"
    stage_caches = []
    fused = []
    last = cfg.num_stages - 1
    for s in range(cfg.num_stages):
        pre = _stage_prefix(s)
        sc = {}
        if s > 0:
            sc["in_r"] = xr
            xr = _linear(xr, params[pre + "in.W"], params[pre + "in.b"])
            if use_depth:
                sc["in_d"] = xd
                xd = _linear(xd, params[pre + "in.W"], params[pre + "in.b"])
        yr, sc["rgb"] = _block_forward(xr, xd if use_depth else None, params, s, keys, values, store)
        if use_depth and s < last:
            # the depth stream only feeds the next stage's keys/values
            xd, sc["depth"] = _block_forward(xd, None, params, s, False, False, store)
            _check_finite(xd, s)
        _check_finite(yr, s)
        xr = yr
        fused.append(yr)
        stage_caches.append(sc)
    dec_in = np.concatenate(fused, axis=-1)
    z = _linear(dec_in, params["dec1.W"], params["dec1.b"])
    hdec, t = _gelu(z)
    tok_logits = _linear(hdec, params["dec2.W"], params["dec2.b"])
    _check_finite(tok_logits, cfg.num_stages)
    b, H, W, _ = x_rgb.shape
    logits = upsample_tokens(tok_logits, H // p, W // p, p)
    if unbatched:
        logits = logits[0]
    if not store:
        return logits
    cache = ForwardCache((b, H, W), pr, pd, stage_caches, dec_in, z, t, hdec, use_depth)
    return logits, cache


def upsample_tokens(tok, rows, cols, p):
    """B x (rows*cols) x C -> B x (rows*p) x (cols*p) x C, nearest neighbour."""
    b, _, c = tok.shape
    g = tok.reshape(b, rows, 1, cols, 1, c)
    g = np.broadcast_to(g, (b, rows, p, cols, p, c))
    return g.reshape(b, rows * p, cols * p, c)


def token_logits(logits, p):
    """Inverse view of :func:`upsample_tokens`: pick one pixel per patch."""
    return logits[:, ::p, ::p, :]


def encoder_backward(dlogits, cache, params, input_grads=False):
    """Analytic parameter gradients for upstream ``dlogits`` (same shape as logits).

    Returns a dict name -> gradient; with ``input_grads`` also returns
    ``(d_rgb, d_depth)`` where ``d_depth`` is per disparity pixel (B x H x W).
    """
    if cache is None:
        raise UsageError("encoder_backward needs the cache from encoder_forward(store=True)")
    cfg = params.config
    p = cfg.patch_size
    b, H, W = cache.shape
    dl = np.asarray(dlogits, dtype=np.float64)
    if dl.ndim == 3:
        dl = dl[None]
    if dl.shape[:3] != (b, H, W):
        raise InvalidInputError(f"upstream gradient shape {dl.shape} does not match forward {cache.shape}")
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    # nearest upsampling backward: sum each patch
    dtok = dl.reshape(b, H // p, p, W // p, p, -1).sum(axis=(2, 4)).reshape(b, (H // p) * (W // p), -1)
    dh, grads["dec2.W"], grads["dec2.b"] = _linear_back(dtok, cache.dec_h, params["dec2.W"])
    dz = _gelu_back(dh, cache.dec_z, cache.dec_t)
    ddec, grads["dec1.W"], grads["dec1.b"] = _linear_back(dz, cache.dec_in, params["dec1.W"])
    splits = np.cumsum(cfg.stage_dims)[:-1]
    dfused = np.split(ddec, splits, axis=-1)
    use_depth = cache.depth_used
    dxr = np.zeros_like(dfused[-1])
    dxd = None
    for s in reversed(range(cfg.num_stages)):
        pre = _stage_prefix(s)
        sc = cache.stages[s]
        dyr = dxr + dfused[s]
        dyd = dxd
        dxr, dkv = _block_backward(dyr, sc["rgb"], params, s, grads)
        dxd = None
        if use_depth:
            dxd = dkv if dkv is not None else np.zeros_like(dxr)
            if "depth" in sc and dyd is not None:
                dd_self, _ = _block_backward(dyd, sc["depth"], params, s, grads)
                dxd = dxd + dd_self
        if s > 0:
            dxr, dW, db = _linear_back(dxr, sc["in_r"], params[pre + "in.W"])
            grads[pre + "in.W"] += dW
            grads[pre + "in.b"] += db
            if use_depth:
                dxd, dW, db = _linear_back(dxd, sc["in_d"], params[pre + "in.W"])
                grads[pre + "in.W"] += dW
                grads[pre + "in.b"] += db
    dpr, dW, db = _linear_back(dxr, cache.patches_rgb, params["patch.W"])
    grads["patch.W"] += dW
    grads["patch.b"] += db
    dpd = None
    if use_depth:
        dpd, dW, db = _linear_back(dxd, cache.patches_d, params["patch.W"])
        grads["patch.W"] += dW
        grads["patch.b"] += db
    if not input_grads:
        return grads
    d_rgb = _unpatchify(dpr, H, W, p, cfg.in_channels)
    if dpd is None:
        d_depth = np.zeros((b, H, W))
    else:
        d_depth = _unpatchify(dpd, H, W, p, cfg.in_channels).sum(axis=-1)
    return grads, (d_rgb, d_depth)


# ---------------------------------------------------------------------------
# checkpoints: b"MSFT" | u32 version | u32 len | config json | u32 count |
# per tensor: u16 len | name | u8 ndim | u32 dims... | float64 LE data


def save_checkpoint(params, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params))


def checkpoint_bytes(params):
    cfg_blob = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg_blob)), cfg_blob,
             struct.pack("<I", len(params.tensors))]
    for name, arr in params.tensors.items():
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


def checkpoint_from_bytes(buf):
    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        return struct.unpack_from(fmt, buf, off), off + size

    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes at offset 0")
    (version, clen), off = take("<II", 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = EncoderConfig(**json.loads(buf[off:off + clen].decode()))
    off += clen
    (count,), off = take("<I", off)
    tensors = {}
    for _ in range(count):
        (nlen, ndim), off = take("<HB", off)
        name = buf[off:off + nlen].decode()
        off += nlen
        dims, off = take(f"<{ndim}I", off)
        n = int(np.prod(dims)) if ndim else 1
        if off + 8 * n > len(buf):
            raise CheckpointError(f"truncated tensor {name!r} at byte {off}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
        off += 8 * n
    expected = _param_shapes(cfg)
    if list(tensors) != list(expected) or any(tensors[k].shape != expected[k] for k in expected):
        raise CheckpointError("checkpoint tensors do not match the stored config")
    return ModelParams(cfg, tensors)
