"""Volumetric Swin-transformer super-resolution network.

The network is written functionally: parameters live in a flat, ordered
``dict[str, Tensor]`` keyed by stable dotted names, and every block is a
function of ``(x, params, prefix, ...)``.

Layout conventions: volumes are ``[C, H, W, D]``; token sequences are
``[N, C]`` with N enumerated in H-then-W-then-D raster order, the same
order used inside windows and by the relative position index.
"""

import math
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError, ShapeError

MASK_VALUE = -1e4
LEAKY_SLOPE = 0.2
INIT_STD = 0.02


# ----------------------------------------------------------------- geometry


@lru_cache(maxsize=None)
def relative_position_index(window):
    """``[M^3, M^3]`` map from token pairs to rows of the bias table."""
    m = window
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij"))
    coords = coords.reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    span = 2 * m - 1
    index = rel[0] * span * span + rel[1] * span + rel[2]
    index.setflags(write=False)
    return index


def shift_sizes(grid, window):
    """Per-axis cyclic shift for shifted layers; axes that fit in one window are not shifted."""
    return tuple(window // 2 if g > window else 0 for g in grid)


def _check_grid(grid, window):
    if any(g % window for g in grid):
        raise ShapeError(f"token grid {tuple(grid)} is not divisible by window {window}")


def window_partition(x, window):
    """``[h, w, d, C]`` -> ``[n_windows, M^3, C]`` (windows and tokens in raster order)."""
    h, w, d, c = x.shape
    _check_grid((h, w, d), window)
    m = window
    x = ad.reshape(x, (h // m, m, w // m, m, d // m, m, c))
    x = ad.permute(x, (0, 2, 4, 1, 3, 5, 6))
    return ad.reshape(x, (-1, m * m * m, c))


def window_reverse(windows, window, grid):
    """Inverse of :func:`window_partition`."""
    h, w, d = grid
    _check_grid(grid, window)
    m = window
    c = windows.shape[-1]
    x = ad.reshape(windows, (h // m, w // m, d // m, m, m, m, c))
    x = ad.permute(x, (0, 3, 1, 4, 2, 5, 6))
    return ad.reshape(x, (h, w, d, c))


def _partition_array(arr, window):
    h, w, d = arr.shape
    m = window
    arr = arr.reshape(h // m, m, w // m, m, d // m, m).transpose(0, 2, 4, 1, 3, 5)
    return arr.reshape(-1, m**3)


def build_shift_mask(grid, window, shift=None):
    """Additive attention mask ``[n_windows, M^3, M^3]`` for the rolled grid.

    After a cyclic shift by ``-shift`` each window may hold tokens from up
    to three slabs per axis that were not adjacent before the roll; pairs
    from different slabs get ``MASK_VALUE``.
    """
    grid = tuple(grid)
    _check_grid(grid, window)
    if shift is None:
        shift = shift_sizes(grid, window)
    elif isinstance(shift, int):
        shift = (shift,) * 3
    labels = np.zeros(grid, dtype=np.int64)
    per_axis = []
    for s in shift:
        if s == 0:
            per_axis.append([slice(None)])
        else:
            per_axis.append([slice(0, -window), slice(-window, -s), slice(-s, None)])
    count = 0
    for sh in per_axis[0]:
        for sw in per_axis[1]:
            for sd in per_axis[2]:
                labels[sh, sw, sd] = count
                count += 1
    win = _partition_array(labels, window)
    return np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)


@lru_cache(maxsize=64)
def _cached_mask(grid, window):
    mask = build_shift_mask(grid, window)
    mask.setflags(write=False)
    return mask


# ------------------------------------------------------------------- params


def branch_layout(cfg):
    """``[(embedding name, deep-extractor prefix), ...]`` for a variant."""
    if cfg.variant == "full":
        if cfg.share_branch_weights:
            return [("embed_feat", "deep"), ("embed_vol", "deep")]
        return [("embed_feat", "deep_feat"), ("embed_vol", "deep_vol")]
    if cfg.variant == "sr_features":
        return [("embed_feat", "deep_feat")]
    if cfg.variant == "sr_volume":
        return [("embed_vol", "deep_vol")]
    return [("embed_feat", "deep"), ("embed_vol", "deep")]  # sr_avg


def param_shapes(cfg):
    """Ordered ``name -> (shape, init kind)`` for every trainable tensor."""
    c, hid, m, p = cfg.c_emb, cfg.hidden, cfg.window, cfg.patch
    shapes = {
        "shallow.weight": ((c, 1, 3, 3, 3), "conv"),
        "shallow.bias": ((c,), "zeros"),
    }
    layout = branch_layout(cfg)
    in_ch = {"embed_feat": c, "embed_vol": 1}
    for embed in dict.fromkeys(e for e, _ in layout):
        shapes[f"{embed}.weight"] = ((c, in_ch[embed]) + p, "conv")
        shapes[f"{embed}.bias"] = ((c,), "zeros")
    for deep in dict.fromkeys(d for _, d in layout):
        for k in range(cfg.k_rstb):
            for l in range(cfg.l_stl):
                pre = f"{deep}.rstb{k}.stl{l}"
                shapes.update(
                    {
                        f"{pre}.norm1.weight": ((c,), "ones"),
                        f"{pre}.norm1.bias": ((c,), "zeros"),
                        f"{pre}.attn.qkv.weight": ((c, 3 * c), "trunc_normal"),
                        f"{pre}.attn.qkv.bias": ((3 * c,), "zeros"),
                        f"{pre}.attn.bias_table": (((2 * m - 1) ** 3, cfg.heads), "trunc_normal"),
                        f"{pre}.attn.proj.weight": ((c, c), "trunc_normal"),
                        f"{pre}.attn.proj.bias": ((c,), "zeros"),
                        f"{pre}.norm2.weight": ((c,), "ones"),
                        f"{pre}.norm2.bias": ((c,), "zeros"),
                        f"{pre}.mlp.fc1.weight": ((c, hid), "trunc_normal"),
                        f"{pre}.mlp.fc1.bias": ((hid,), "zeros"),
                        f"{pre}.mlp.fc2.weight": ((hid, c), "trunc_normal"),
                        f"{pre}.mlp.fc2.bias": ((c,), "zeros"),
                    }
                )
            shapes[f"{deep}.rstb{k}.conv.weight"] = ((c, c, 3, 3, 3), "conv")
            shapes[f"{deep}.rstb{k}.conv.bias"] = ((c,), "zeros")
        shapes[f"{deep}.conv.weight"] = ((c, c, 3, 3, 3), "conv")
        shapes[f"{deep}.conv.bias"] = ((c,), "zeros")
    shapes["recon.conv3.weight"] = ((c, c, 3, 3, 3), "conv")
    shapes["recon.conv3.bias"] = ((c,), "zeros")
    shapes["recon.conv1.weight"] = ((1, c, 1, 1, 1), "conv")
    shapes["recon.conv1.bias"] = ((1,), "zeros")
    return shapes


def param_count(cfg):
    return int(sum(math.prod(shape) for shape, _ in param_shapes(cfg).values()))


def _trunc_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg, seed=0, dtype=np.float32):
    """Deterministic initialisation.

    Linear projections and bias tables: normal(0, 0.02) truncated at two
    standard deviations. Convolutions: uniform(+-1/sqrt(fan_in)). Biases
    and norm offsets zero, norm scales one.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, kind) in param_shapes(cfg).items():
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "trunc_normal":
            arr = _trunc_normal(rng, shape, INIT_STD)
        else:
            bound = 1.0 / math.sqrt(math.prod(shape[1:]))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


# ------------------------------------------------------------------- blocks


def linear(x, params, prefix):
    return ad.add(ad.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def tokens_to_grid(tokens, grid):
    c = tokens.shape[-1]
    return ad.reshape(ad.permute(tokens, (1, 0)), (c,) + tuple(grid))


def grid_to_tokens(x):
    c = x.shape[0]
    return ad.permute(ad.reshape(x, (c, -1)), (1, 0))


def patch_embed(x, params, prefix, patch):
    """Non-overlapping patches of ``x[C,H,W,D]`` projected to tokens ``[N, c_emb]``."""
    if any(n % p for n, p in zip(x.shape[1:], patch)):
        raise ShapeError(f"input {x.shape[1:]} is not divisible by patch {tuple(patch)}")
    emb = ad.conv3d(x, params[prefix + ".weight"], params[prefix + ".bias"], stride=patch)
    return grid_to_tokens(emb), emb.shape[1:]


def wmsa(windows, params, prefix, heads, window, mask=None):
    """Multi-head self-attention inside each window with relative position bias.

    ``windows`` is ``[n_windows, M^3, C]``; ``mask`` an optional constant
    ``[n_windows, M^3, M^3]`` additive mask.
    """
    nw, t, c = windows.shape
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by {heads} heads")
    dh = c // heads
    qkv = linear(windows, params, prefix + ".qkv")
    qkv = ad.permute(ad.reshape(qkv, (nw, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q = ad.mul(qkv[0], dh**-0.5)
    k, v = qkv[1], qkv[2]
    logits = ad.matmul(q, ad.permute(k, (0, 1, 3, 2)))  # [nw, heads, t, t]
    index = relative_position_index(window)
    if index.shape[0] != t:
        raise ShapeError(f"window holds {t} tokens, bias index expects {index.shape[0]}")
    bias = ad.gather_rows(params[prefix + ".bias_table"], index)  # [t, t, heads]
    logits = ad.add(logits, ad.permute(bias, (2, 0, 1)))
    if mask is not None:
        full = np.broadcast_to(mask[:, None].astype(logits.dtype), logits.shape)
        logits = ad.add(logits, Tensor(full, dtype=logits.dtype))
    attn = ad.softmax(logits, axis=-1)
    out = ad.matmul(attn, v)  # [nw, heads, t, dh]
    out = ad.reshape(ad.permute(out, (0, 2, 1, 3)), (nw, t, c))
    return linear(out, params, prefix + ".proj")


def window_attention(h, params, prefix, cfg, shifted):
    """(S)W-MSA over a token grid ``[h, w, d, C]``; returns the same layout."""
    grid = h.shape[:3]
    m = cfg.window
    _check_grid(grid, m)
    shift = shift_sizes(grid, m) if shifted else (0, 0, 0)
    mask = None
    if any(shift):
        h = ad.roll3d(h, tuple(-s for s in shift))
        mask = _cached_mask(tuple(grid), m)
    win = wmsa(window_partition(h, m), params, prefix, cfg.heads, m, mask)
    h = window_reverse(win, m, grid)
    if any(shift):
        h = ad.roll3d(h, shift)
    return h


def stl_forward(x, grid, params, prefix, cfg, shifted):
    """One transformer layer on tokens ``[N, C]``: (S)W-MSA and MLP, pre-norm residuals."""
    grid = tuple(grid)
    c = x.shape[-1]
    h = ad.layer_norm(x, params[prefix + ".norm1.weight"], params[prefix + ".norm1.bias"])
    h = window_attention(ad.reshape(h, grid + (c,)), params, prefix + ".attn", cfg, shifted)
    x = ad.add(x, ad.reshape(h, (-1, c)))
    h = ad.layer_norm(x, params[prefix + ".norm2.weight"], params[prefix + ".norm2.bias"])
    h = linear(ad.gelu(linear(h, params, prefix + ".mlp.fc1")), params, prefix + ".mlp.fc2")
    return ad.add(x, h)


def conv_on_tokens(x, grid, params, prefix):
    y = ad.conv3d(tokens_to_grid(x, grid), params[prefix + ".weight"], params[prefix + ".bias"], padding=1)
    return grid_to_tokens(y)


def rstb_forward(x, grid, params, prefix, cfg):
    """Residual block: alternating unshifted/shifted layers, then a 3x3x3 conv."""
    y = x
    for l in range(cfg.l_stl):
        y = stl_forward(y, grid, params, f"{prefix}.stl{l}", cfg, shifted=bool(l % 2))
    return ad.add(x, conv_on_tokens(y, grid, params, prefix + ".conv"))


def deep_feature_extract(tokens, grid, params, prefix, cfg):
    """RSTB stack followed by a 3x3x3 conv; returns the grid ``[C, h, w, d]``."""
    x = tokens
    for k in range(cfg.k_rstb):
        x = rstb_forward(x, grid, params, f"{prefix}.rstb{k}", cfg)
    return ad.conv3d(
        tokens_to_grid(x, grid), params[prefix + ".conv.weight"], params[prefix + ".conv.bias"], padding=1
    )


def superformer_forward(lr, params, cfg):
    """Map a low-resolution volume ``[1, H, W, D]`` to its SR estimate, same shape."""
    if lr.ndim != 4 or lr.shape[0] != 1:
        raise ShapeError(f"expected a [1,H,W,D] volume, got {lr.shape}")
    dims = lr.shape[1:]
    cfg.check_input(dims)
    f0 = ad.conv3d(lr, params["shallow.weight"], params["shallow.bias"], padding=1)
    sources = {"embed_feat": f0, "embed_vol": lr}
    layout = branch_layout(cfg)
    embedded = [(patch_embed(sources[e], params, e, cfg.patch), deep) for e, deep in layout]
    if cfg.variant == "sr_avg":
        (ta, grid), deep = embedded[0]
        (tb, _), _ = embedded[1]
        fused = deep_feature_extract(ad.mul(ad.add(ta, tb), 0.5), grid, params, deep, cfg)
    else:
        feats = [deep_feature_extract(t, grid, params, deep, cfg) for (t, grid), deep in embedded]
        fused = feats[0] if len(feats) == 1 else ad.mul(ad.add(feats[0], feats[1]), 0.5)
    fused = ad.add(ad.upsample_trilinear(fused, dims), f0)
    y = ad.conv3d(fused, params["recon.conv3.weight"], params["recon.conv3.bias"], padding=1)
    y = ad.leaky_relu(y, LEAKY_SLOPE)
    return ad.conv3d(y, params["recon.conv1.weight"], params["recon.conv1.bias"])


def check_params(params, cfg):
    """Raise ConfigError unless ``params`` holds exactly the tensors ``cfg`` needs."""
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ConfigError(f"parameter set does not match config (missing {missing[:3]}, extra {extra[:3]})")
    for name, (shape, _) in shapes.items():
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, config needs {shape}")


__all__ = [
    "ModelConfig",
    "build_shift_mask",
    "deep_feature_extract",
    "init_params",
    "param_count",
    "param_shapes",
    "patch_embed",
    "relative_position_index",
    "rstb_forward",
    "stl_forward",
    "superformer_forward",
    "window_attention",
    "window_partition",
    "window_reverse",
    "wmsa",
]
