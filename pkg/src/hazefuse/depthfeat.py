"""Depth feature sources standing in for pretrained depth backbones.

The oracle provider embeds ground-truth depth deterministically, so its
output is identical at every haze level by construction; the degraded
provider corrupts the depth first (seeded noise + box blur) to model a weak
depth model. The HZT on-disk tensor format lets externally computed features
be injected instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .hazesim import normalize_depth
from .tensor import Tensor

# Fixed seed for the channel projection so oracle features are a pure
# function of the scene, independent of any run seed.
_PROJECTION_SEED = 0x485A54  # "HZT"

# Normalized-depth gradient above this marks a depth discontinuity.
_EDGE_THRESHOLD = 0.75 / 50.0

_MAGIC = b"HZT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {"f32": 0, "f64": 1}


@dataclass
class DepthFeatures:
    """B x C_d x H' x W' feature map plus where it came from."""

    features: Tensor
    provenance: str

    def __post_init__(self):
        if self.features.ndim != 4:
            raise DimensionError(
                f"depth features must be BxCxHxW, got {self.features.shape}"
            )


def _embed_depth(depth, depth_channels, pool):
    """[d_norm, |dd/dx|, |dd/dy|, edge] -> C_d channels -> pooled map."""
    dn = normalize_depth(depth)[0]  # HxW
    gy, gx = np.gradient(dn)
    edge = ((np.abs(gx) + np.abs(gy)) > _EDGE_THRESHOLD).astype(np.float64)
    base = np.stack([dn, np.abs(gx), np.abs(gy), edge])  # 4xHxW

    proj = np.random.default_rng(_PROJECTION_SEED).standard_normal(
        (depth_channels, 4)
    )
    feats = np.tensordot(proj, base, axes=([1], [0]))  # C_d x H x W

    if pool > 1:
        c, h, w = feats.shape
        if h % pool or w % pool:
            raise DimensionError(f"cannot pool {h}x{w} by factor {pool}")
        feats = feats.reshape(c, h // pool, pool, w // pool, pool).mean(axis=(2, 4))
    return Tensor(feats[None])  # 1 x C_d x H' x W'


def oracle_features(scene, cfg, pool=1):
    """Haze-invariant embedding of the scene's ground-truth depth."""
    feats = _embed_depth(scene.depth, cfg.depth_channels, pool)
    return DepthFeatures(feats, "oracle")


def degraded_depth(scene, sigma, blur_k, seed):
    """Ground-truth depth corrupted by seeded noise then box blur (meters)."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if blur_k < 1 or blur_k % 2 == 0:
        raise ConfigError(f"blur_k must be odd and >= 1, got {blur_k}")
    d = scene.depth.data.copy()
    if sigma > 0:
        d = d + sigma * np.random.default_rng(seed).standard_normal(d.shape)
    if blur_k > 1:
        pad = blur_k // 2
        padded = np.pad(d, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
        acc = np.zeros_like(d)
        for i in range(blur_k):
            for j in range(blur_k):
                acc += padded[:, i : i + d.shape[1], j : j + d.shape[2]]
        d = acc / (blur_k * blur_k)
    return Tensor(np.maximum(d, 0.0))


def degraded_features(scene, cfg, sigma, blur_k=1, seed=0, pool=1):
    """Oracle pipeline applied to corrupted depth.

    sigma=0 and blur_k=1 reduce bit-exactly to oracle_features.
    """
    corrupted = degraded_depth(scene, sigma, blur_k, seed)
    feats = _embed_depth(corrupted, cfg.depth_channels, pool)
    return DepthFeatures(feats, f"degraded(sigma={sigma},blur_k={blur_k},seed={seed})")


# ---------------------------------------------------------------------------
# HZT tensor files: magic "HZT1", dtype u8 (0=f32, 1=f64), ndim u8,
# dims u32 LE x ndim, payload row-major LE.


def save_tensor(path, t, dtype="f32"):
    if dtype not in _DTYPE_TAGS:
        raise ConfigError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim > 255:
        raise FormatError(f"ndim {arr.ndim} does not fit in u8")
    for dim in arr.shape:
        if dim >= 2**32:
            raise FormatError(f"dimension {dim} overflows u32")
    tag = _DTYPE_TAGS[dtype]
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BB", tag, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(payload.tobytes())


def load_tensor(path):
    """Parse an HZT file into a float64 Tensor (f32 payloads upcast)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 6:
        raise FormatError("file too short for HZT header", offset=len(blob))
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}", offset=0)
    tag, ndim = struct.unpack_from("<BB", blob, 4)
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}", offset=4)
    header_end = 6 + 4 * ndim
    if len(blob) < header_end:
        raise FormatError("truncated dims table", offset=len(blob))
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    count = 1
    for dim in dims:
        count *= dim
    itemsize = _DTYPES[tag].itemsize
    expected = header_end + count * itemsize
    if len(blob) != expected:
        raise FormatError(
            f"payload length {len(blob) - header_end} != expected {count * itemsize}",
            offset=min(len(blob), expected),
        )
    data = np.frombuffer(blob, dtype=_DTYPES[tag], offset=header_end).reshape(dims)
    return Tensor(data.astype(np.float64))


def load_features(path):
    """DepthFeatures from an HZT file; 3-D payloads gain a batch axis."""
    t = load_tensor(path)
    if t.ndim == 3:
        t = Tensor(t.data[None])
    if t.ndim != 4:
        raise FormatError(
            f"depth feature file must hold a 3-D or 4-D tensor, got ndim {t.ndim}"
        )
    return DepthFeatures(t, f"file({path})")
