"""RGB-depth fusion: gated hierarchical fusion blocks behind zero-convs.

The module composes, per block, spatial self-attention over the RGB features
(CFE), channel-axis cross-attention with depth as the key (DAI), a pooled
sigmoid channel gate with a residual feed-forward refinement (ACG + D-FFN),
and finally a per-pixel sigmoid blend against the original RGB features
(ASG). The result is injected into a host block through 1x1 convolutions
whose weights start at exactly zero, so a freshly constructed fusion branch
cannot change the host's output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .params import ParamSet, conv_weight, dense_weight
from .tensor import Tensor, add, conv2d, gap, gelu, matmul, mhsa, mul, reshape, sigmoid, softmax, transpose


@dataclass
class FusionConfig:
    channels: int = 8
    depth_channels: int = 4
    heads: int = 2
    use_pre_zc: bool = True
    use_post_zc: bool = True
    asg_layers: int = 2
    hgdf_blocks: int = 1
    # Cross-attention axis for the depth interaction. "channel" contracts over
    # space into a CxC map; "spatial" is the HWxHW alternative reading of the
    # same projections. Both are kept because the two define different
    # information paths for depth (global recalibration vs per-pixel mixing).
    dai_mode: str = "channel"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        if self.hgdf_blocks < 1:
            raise ConfigError(f"hgdf_blocks must be >= 1, got {self.hgdf_blocks}")
        if self.asg_layers < 1:
            raise ConfigError(f"asg_layers must be >= 1, got {self.asg_layers}")
        if self.dai_mode not in ("channel", "spatial"):
            raise ConfigError(f"dai_mode must be 'channel' or 'spatial', got {self.dai_mode!r}")


def _asg_widths(cfg):
    widths = [cfg.channels]
    for i in range(cfg.asg_layers - 1):
        widths.append(max(widths[-1] // 2, 1))
    widths.append(1)
    return widths


def build_fusion_params(cfg, seed=0):
    """ParamSet for one fusion site. ZC weights and all biases start at zero."""
    rng = np.random.default_rng(seed)
    c = cfg.channels
    p = ParamSet()

    def conv(name, out_c, in_c, k):
        p.add(f"{name}.w", conv_weight(rng, out_c, in_c, k))
        p.add(f"{name}.b", np.zeros(out_c))

    if cfg.depth_channels != c:
        conv("depth_adapter", c, cfg.depth_channels, 1)

    for i in range(cfg.hgdf_blocks):
        blk = f"blocks.{i}"
        for proj in ("q", "k", "v"):
            p.add(f"{blk}.cfe.{proj}_w", dense_weight(rng, c, c))
            p.add(f"{blk}.cfe.{proj}_b", np.zeros(c))
        for proj in ("q", "k", "v"):
            conv(f"{blk}.dai.{proj}1", c, c, 1)
            conv(f"{blk}.dai.{proj}2", c, c, 3)
        hidden = max(c // 4, 1)
        conv(f"{blk}.acg.mlp1", hidden, c, 1)
        conv(f"{blk}.acg.mlp2", c, hidden, 1)
        conv(f"{blk}.dffn.w1", c, c, 1)
        conv(f"{blk}.dffn.w2", c, c, 1)

    widths = _asg_widths(cfg)
    for i, (cin, cout) in enumerate(zip(widths, widths[1:])):
        conv(f"asg.{i}", cout, cin, 3)

    if cfg.use_pre_zc:
        p.add("zc.pre.w", np.zeros((c, c, 1, 1)))
        p.add("zc.pre.b", np.zeros(c))
    if cfg.use_post_zc:
        p.add("zc.post.w", np.zeros((c, c, 1, 1)))
        p.add("zc.post.b", np.zeros(c))
    return p


def cfe(f_rgb, cfg, params, prefix="blocks.0."):
    """Self-attention over the RGB features' spatial positions."""
    return mhsa(f_rgb, cfg.heads, _view(params, prefix + "cfe."))


def dai(f_a, f_d, params, prefix="blocks.0.", mode="channel"):
    """Cross-attention with RGB as query/value and depth as key.

    Each projection is a 1x1 conv followed by a 3x3 conv. In "channel" mode
    Q, K, V are flattened to C x HW rows and the CxC attention map is
    softmax(Q K^T / sqrt(d)) with d = HW, the length of a channel row; depth
    then acts as a per-image recalibration of the value channels. In
    "spatial" mode the same projections are read as HW x C token lists, the
    map is HW x HW with d = C, and depth steers which locations feed each
    output pixel.
    """
    if f_a.shape[2:] != f_d.shape[2:]:
        raise DimensionError(
            f"dai: RGB {f_a.shape} and depth {f_d.shape} disagree on HxW"
        )
    v = _view(params, prefix + "dai.")
    q = conv2d(conv2d(f_a, v["q1.w"], v["q1.b"]), v["q2.w"], v["q2.b"])
    k = conv2d(conv2d(f_d, v["k1.w"], v["k1.b"]), v["k2.w"], v["k2.b"])
    val = conv2d(conv2d(f_a, v["v1.w"], v["v1.b"]), v["v2.w"], v["v2.b"])

    b, c, h, w = q.shape
    n = h * w
    qc = reshape(q, (b, c, n))
    kc = reshape(k, (b, c, n))
    vc = reshape(val, (b, c, n))
    if mode == "channel":
        logits = matmul(mul(qc, 1.0 / math.sqrt(n)), transpose(kc, (0, 2, 1)))
        attn = softmax(logits, axis=-1)  # b x c x c, rows sum to 1
        return reshape(matmul(attn, vc), (b, c, h, w))
    if mode == "spatial":
        qt = transpose(mul(qc, 1.0 / math.sqrt(c)), (0, 2, 1))  # b x n x c
        logits = matmul(qt, kc)  # b x n x n
        attn = softmax(logits, axis=-1)
        out = matmul(attn, transpose(vc, (0, 2, 1)))  # b x n x c
        return reshape(transpose(out, (0, 2, 1)), (b, c, h, w))
    raise ConfigError(f"unknown dai mode {mode!r}")


def acg_ffn(f_a, f_x, params, prefix="blocks.0.", return_gate=False):
    """Channel gate from pooled context, residual merge, then D-FFN."""
    if f_a.shape != f_x.shape:
        raise DimensionError(f"acg_ffn: shapes {f_a.shape} != {f_x.shape}")
    va = _view(params, prefix + "acg.")
    pooled = gap(f_x)
    g = sigmoid(
        conv2d(gelu(conv2d(pooled, va["mlp1.w"], va["mlp1.b"])), va["mlp2.w"], va["mlp2.b"])
    )
    x_hat = add(f_a, mul(g, f_x))
    vf = _view(params, prefix + "dffn.")
    ffn = conv2d(gelu(conv2d(x_hat, vf["w1.w"], vf["w1.b"])), vf["w2.w"], vf["w2.b"])
    out = add(ffn, x_hat)
    if return_gate:
        return out, g
    return out


def asg(f_hat, f_rgb, cfg, params, return_gate=False):
    """Per-pixel sigmoid mask convexly blending fused and original features."""
    if f_hat.shape != f_rgb.shape:
        raise DimensionError(f"asg: shapes {f_hat.shape} != {f_rgb.shape}")
    h = f_hat
    last = cfg.asg_layers - 1
    for i in range(cfg.asg_layers):
        v = _view(params, f"asg.{i}.")
        h = conv2d(h, v["w"], v["b"])
        if i != last:
            h = gelu(h)
    m = sigmoid(h)  # b x 1 x H x W
    one_minus = add(mul(m, -1.0), 1.0)
    out = add(mul(f_hat, m), mul(f_rgb, one_minus))
    if return_gate:
        return out, m
    return out


def fusion_module(f_rgb, f_d, cfg, params):
    """Full fusion stack producing the auxiliary feature map."""
    if f_d.shape[1] != cfg.depth_channels:
        raise DimensionError(
            f"depth features have {f_d.shape[1]} channels, config says {cfg.depth_channels}"
        )
    if cfg.depth_channels != cfg.channels:
        v = _view(params, "depth_adapter.")
        f_d = conv2d(f_d, v["w"], v["b"])
    x = f_rgb
    for i in range(cfg.hgdf_blocks):
        prefix = f"blocks.{i}."
        f_a = cfe(x, cfg, params, prefix)
        f_x = dai(f_a, f_d, params, prefix, mode=cfg.dai_mode)
        x = acg_ffn(f_a, f_x, params, prefix)
    return asg(x, f_rgb, cfg, params)


def zc_inject(f_rgb, f_aux, phi, params, cfg):
    """Host-block wrap: phi(F + pre(F_aux)) + post(F_aux).

    With a ZC flag off, the corresponding path degrades to a direct addition
    of the raw auxiliary features.
    """
    if f_rgb.shape != f_aux.shape:
        raise DimensionError(f"zc_inject: shapes {f_rgb.shape} != {f_aux.shape}")
    if cfg.use_pre_zc:
        v = _view(params, "zc.pre.")
        pre = conv2d(f_aux, v["w"], v["b"])
    else:
        pre = f_aux
    if cfg.use_post_zc:
        v = _view(params, "zc.post.")
        post = conv2d(f_aux, v["w"], v["b"])
    else:
        post = f_aux
    return add(phi(add(f_rgb, pre)), post)


def fuse_into_host(f_rgb, f_d, phi, cfg, params):
    """fusion_module then zc_inject, the complete per-site computation."""
    f_aux = fusion_module(f_rgb, f_d, cfg, params)
    return zc_inject(f_rgb, f_aux, phi, params, cfg)


def _view(params, prefix):
    if isinstance(params, ParamSet):
        return params.view(prefix)
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
