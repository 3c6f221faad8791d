"""Reference encoder-decoder dehazing backbone hosting the fusion site.

Stride-1 convs only: downsampling is 2x2 average pooling followed by a 1x1
channel-change conv, upsampling is nearest-neighbor followed by the mirror
1x1 conv. Residual blocks are x + conv3(gelu(conv3(x))), with additive skip
connections between matching encoder/decoder levels and an optional global
input residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .fusion import FusionConfig, build_fusion_params, fuse_into_host
from .params import ParamSet, conv_weight
from .tensor import Tensor, add, avg_pool2d, conv2d, gelu, upsample_nearest


@dataclass
class NetConfig:
    base_channels: int = 16
    levels: int = 3
    blocks_per_level: int = 2
    global_residual: bool = True
    fusion_attach: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if not 0 <= self.fusion_attach < self.levels:
            raise ConfigError(
                f"fusion_attach {self.fusion_attach} out of range for {self.levels} levels"
            )
        if self.base_channels < 1 or self.blocks_per_level < 1:
            raise ConfigError("base_channels and blocks_per_level must be >= 1")

    def width(self, level):
        return self.base_channels * (1 << level)

    def attach_channels(self):
        return self.width(self.fusion_attach)

    def attach_scale(self):
        return 1 << self.fusion_attach


@dataclass
class FusionState:
    """Everything the backbone needs to run its fusion site."""

    cfg: FusionConfig
    params: ParamSet
    depth: Tensor  # B x C_d x H' x W' at the attach resolution


def conv_layer_specs(cfg):
    """All convs as (cin, cout, k, scale); scale divides the input H and W."""
    layers = [(3, cfg.width(0), 3, 1)]
    for lvl in range(cfg.levels):
        c = cfg.width(lvl)
        s = 1 << lvl
        layers += [(c, c, 3, s)] * (2 * cfg.blocks_per_level)
        if lvl < cfg.levels - 1:
            layers.append((c, cfg.width(lvl + 1), 1, 1 << (lvl + 1)))
    for lvl in reversed(range(cfg.levels - 1)):
        c = cfg.width(lvl)
        s = 1 << lvl
        layers.append((cfg.width(lvl + 1), c, 1, s))
        layers += [(c, c, 3, s)] * (2 * cfg.blocks_per_level)
    layers.append((cfg.width(0), 3, 3, 1))
    return layers


def build_net_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    p = ParamSet()

    def conv(name, out_c, in_c, k):
        p.add(f"{name}.w", conv_weight(rng, out_c, in_c, k))
        p.add(f"{name}.b", np.zeros(out_c))

    conv("stem", cfg.width(0), 3, 3)
    for lvl in range(cfg.levels):
        c = cfg.width(lvl)
        for blk in range(cfg.blocks_per_level):
            conv(f"enc.{lvl}.block.{blk}.c1", c, c, 3)
            conv(f"enc.{lvl}.block.{blk}.c2", c, c, 3)
        if lvl < cfg.levels - 1:
            conv(f"down.{lvl}", cfg.width(lvl + 1), c, 1)
    for lvl in range(cfg.levels - 1):
        c = cfg.width(lvl)
        conv(f"up.{lvl}", c, cfg.width(lvl + 1), 1)
        for blk in range(cfg.blocks_per_level):
            conv(f"dec.{lvl}.block.{blk}.c1", c, c, 3)
            conv(f"dec.{lvl}.block.{blk}.c2", c, c, 3)
    conv("head", 3, cfg.width(0), 3)
    return p


def _block_stack(x, params, prefix, n_blocks):
    for blk in range(n_blocks):
        v = params.view(f"{prefix}block.{blk}.")
        y = conv2d(gelu(conv2d(x, v["c1.w"], v["c1.b"])), v["c2.w"], v["c2.b"])
        x = add(x, y)
    return x


def forward(hazy, params, cfg, fusion=None, return_attach=False):
    """Dehaze a B x 3 x H x W batch; optionally report the attach features.

    With `fusion` supplied, the attach-level encoder block stack is wrapped
    by the zero-conv injection of the fusion module's output.
    """
    if hazy.ndim != 4 or hazy.shape[1] != 3:
        raise DimensionError(f"expected Bx3xHxW input, got {hazy.shape}")
    div = 1 << (cfg.levels - 1)
    B, _, H, W = hazy.shape
    if H % div or W % div:
        raise ConfigError(
            f"H and W must be divisible by {div} for {cfg.levels} levels, got {H}x{W}"
        )

    v = params.view("stem.")
    x = conv2d(hazy, v["w"], v["b"])
    skips = []
    attach = None
    for lvl in range(cfg.levels):
        prefix = f"enc.{lvl}."

        def phi(inp, _p=prefix):
            return _block_stack(inp, params, _p, cfg.blocks_per_level)

        if lvl == cfg.fusion_attach and fusion is not None:
            x = fuse_into_host(x, fusion.depth, phi, fusion.cfg, fusion.params)
        else:
            x = phi(x)
        if lvl == cfg.fusion_attach:
            attach = x
        if lvl < cfg.levels - 1:
            skips.append(x)
            v = params.view(f"down.{lvl}.")
            x = conv2d(avg_pool2d(x, 2), v["w"], v["b"])

    for lvl in reversed(range(cfg.levels - 1)):
        v = params.view(f"up.{lvl}.")
        x = conv2d(upsample_nearest(x, 2), v["w"], v["b"])
        x = add(x, skips[lvl])
        x = _block_stack(x, params, f"dec.{lvl}.", cfg.blocks_per_level)

    v = params.view("head.")
    out = conv2d(x, v["w"], v["b"])
    if cfg.global_residual:
        out = add(out, hazy)
    return (out, attach) if return_attach else out


class PrefixParams:
    """Read-only view of a ParamSet under a fixed name prefix."""

    def __init__(self, params, prefix):
        self._params = params
        self._prefix = prefix

    def view(self, sub):
        return self._params.view(self._prefix + sub)

    def __getitem__(self, name):
        return self._params[self._prefix + name]

    def items(self):
        for name, t in self._params.items():
            if name.startswith(self._prefix):
                yield name[len(self._prefix) :], t


def forward_merged(hazy, params, cfg, fusion_cfg=None, depth=None, return_attach=False):
    """Forward through a merged ParamSet holding net.* (and fusion.*) entries."""
    state = None
    if fusion_cfg is not None:
        if depth is None:
            raise ConfigError("fusion_cfg given without depth features")
        state = FusionState(fusion_cfg, PrefixParams(params, "fusion."), depth)
    return forward(hazy, PrefixParams(params, "net."), cfg, fusion=state,
                   return_attach=return_attach)


# ---------------------------------------------------------------------------
# cost accounting (multiply-accumulates, x2 per MAC)


def count_params_for_layers(layers):
    return sum(cout * cin * k * k + cout for cin, cout, k, _ in layers)


def count_flops_for_layers(layers, H, W):
    total = 0
    for cin, cout, k, scale in layers:
        total += 2 * cin * cout * k * k * (H // scale) * (W // scale)
    return total


def count_params(cfg, fusion_cfg=None):
    n = count_params_for_layers(conv_layer_specs(cfg))
    if fusion_cfg is not None:
        n += build_fusion_params(fusion_cfg).size()
    return n


def fusion_flops(fusion_cfg, h, w):
    """Conv and attention MACs (x2) for one fusion forward at h x w."""
    c = fusion_cfg.channels
    n = h * w
    total = 0
    if fusion_cfg.depth_channels != c:
        total += 2 * fusion_cfg.depth_channels * c * n
    hidden = max(c // 4, 1)
    if fusion_cfg.dai_mode == "spatial":
        dai_attn = 2 * 2 * n * n * c
    else:
        dai_attn = 2 * 2 * c * c * n
    per_block = (
        3 * 2 * n * c * c  # cfe projections
        + 2 * 2 * n * n * c  # cfe QK^T and attn@V across all heads
        + 3 * (2 * c * c * n + 2 * c * c * 9 * n)  # dai projection conv pairs
        + dai_attn  # dai attention (QK^T, attn@V)
        + 2 * c * hidden + 2 * hidden * c  # acg MLP on pooled 1x1 map
        + 2 * 2 * c * c * n  # d-ffn
    )
    total += fusion_cfg.hgdf_blocks * per_block
    widths = [c] + [max(c >> (i + 1), 1) for i in range(fusion_cfg.asg_layers - 1)] + [1]
    for cin, cout in zip(widths, widths[1:]):
        total += 2 * cin * cout * 9 * n
    if fusion_cfg.use_pre_zc:
        total += 2 * c * c * n
    if fusion_cfg.use_post_zc:
        total += 2 * c * c * n
    return total


def count_flops(cfg, H, W, fusion_cfg=None):
    total = count_flops_for_layers(conv_layer_specs(cfg), H, W)
    if fusion_cfg is not None:
        s = cfg.attach_scale()
        total += fusion_flops(fusion_cfg, H // s, W // s)
    return total
