"""Procedural scenes and haze synthesis via the atmospheric scattering model.

A hazy observation of a clear image J with metric depth d is
I = J * t + A * (1 - t) with transmission t = exp(-beta * d) for a
homogeneous medium of scattering coefficient beta (1/m). All operations here
are pure functions of their arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, SingularityError
from .tensor import Tensor

# Scene depths live in [DEPTH_NEAR, DEPTH_FAR] meters; DEPTH_FAR is also the
# global scale used whenever a depth map is normalized to [0, 1].
DEPTH_NEAR = 1.0
DEPTH_FAR = 50.0

# Transmission floor for the analytic inversion oracle: below this the
# division amplifies float error past the round-trip tolerance.
T_FLOOR = 1e-4

# Default sweep of scattering coefficients, endpoints 0.04 and 0.20 at six
# levels (interior values fixed here as the package-wide default).
DEFAULT_BETAS = (0.04, 0.0704, 0.1008, 0.1312, 0.1616, 0.20)

DEFAULT_A = 0.9


@dataclass
class HazeParams:
    """Scattering coefficient beta (1/m) and atmospheric light A in (0, 1]."""

    beta: float
    A: object = DEFAULT_A  # scalar or per-channel length-3 sequence

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        a = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        if a.shape not in ((1,), (3,)):
            raise ConfigError(f"A must be scalar or length-3, got shape {a.shape}")
        if not ((a > 0) & (a <= 1)).all():
            raise ConfigError(f"A must lie in (0, 1] per channel, got {self.A}")

    def a_column(self):
        """A broadcastable against a 3xHxW image."""
        a = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        if a.shape == (1,):
            a = np.repeat(a, 3)
        return a.reshape(3, 1, 1)


@dataclass
class Scene:
    """Clear image (3xHxW in [0,1]) with metric depth (1xHxW, meters)."""

    clear: Tensor
    depth: Tensor
    seed: int
    id: str

    def __post_init__(self):
        c, d = self.clear.data, self.depth.data
        if c.ndim != 3 or c.shape[0] != 3:
            raise DimensionError(f"clear must be 3xHxW, got {c.shape}")
        if d.ndim != 3 or d.shape[0] != 1:
            raise DimensionError(f"depth must be 1xHxW, got {d.shape}")
        if c.shape[1:] != d.shape[1:]:
            raise DimensionError(
                f"clear {c.shape} and depth {d.shape} disagree on HxW"
            )
        if c.min() < 0 or c.max() > 1:
            raise ConfigError("clear values must lie in [0, 1]")
        if d.min() < 0:
            raise ConfigError("depth values must be >= 0")

    @property
    def hw(self):
        return self.clear.data.shape[1:]


@dataclass
class HazyPair:
    """Synthesized hazy image plus the parameters that produced it."""

    hazy: Tensor
    scene_ref: str
    params: HazeParams


def normalize_depth(depth):
    """Depth in meters -> [0, 1] against the global DEPTH_FAR scale."""
    d = depth.data if isinstance(depth, Tensor) else np.asarray(depth, dtype=np.float64)
    return np.clip(d / DEPTH_FAR, 0.0, 1.0)


def generate_scene(seed, H, W, difficulty=1.0):
    """Deterministic scene: colored primitives over a row-graded ground plane.

    difficulty 0 degenerates to a single frontal plane at constant depth;
    otherwise 3-8 depth-ordered rectangles/disks (plus a gradient sky band)
    are composed far-to-near so that object boundaries carry depth
    discontinuities.
    """
    if H < 16 or W < 16 or H % 2 or W % 2:
        raise ConfigError(f"H and W must be even and >= 16, got {H}x{W}")
    if difficulty < 0:
        raise ConfigError(f"difficulty must be >= 0, got {difficulty}")
    rng = np.random.default_rng(seed)
    scene_id = f"scene-{seed:08x}-{H}x{W}"

    if difficulty == 0:
        color = rng.uniform(0.1, 0.9, size=3)
        clear = np.broadcast_to(color.reshape(3, 1, 1), (3, H, W)).copy()
        depth = np.full((1, H, W), 10.0)
        return Scene(Tensor(clear), Tensor(depth), seed, scene_id)

    rows = np.arange(H, dtype=np.float64).reshape(1, H, 1)
    # Ground plane: depth grows with the image row, near to far.
    span = (DEPTH_FAR - DEPTH_NEAR) * min(difficulty, 1.0)
    depth = np.broadcast_to(
        DEPTH_NEAR + span * rows / (H - 1), (1, H, W)
    ).copy()
    ground = rng.uniform(0.15, 0.6, size=3).reshape(3, 1, 1)
    shade = 1.0 - 0.25 * rows / (H - 1)
    clear = np.broadcast_to(ground * shade, (3, H, W)).copy()

    n_prims = int(rng.integers(3, 9))
    prims = []
    for _ in range(n_prims):
        kind = rng.choice(["rect", "disk", "sky"], p=[0.45, 0.45, 0.10])
        d = float(rng.uniform(DEPTH_NEAR, DEPTH_NEAR + span))
        color = rng.uniform(0.05, 0.95, size=3)
        if kind == "sky":
            d = DEPTH_NEAR + span
            band = int(rng.integers(H // 8, H // 3 + 1))
            prims.append((d, kind, (band,), color))
        elif kind == "rect":
            h = int(rng.integers(H // 8, H // 2))
            w = int(rng.integers(W // 8, W // 2))
            r0 = int(rng.integers(0, H - h))
            c0 = int(rng.integers(0, W - w))
            prims.append((d, kind, (r0, c0, h, w), color))
        else:
            r = int(rng.integers(min(H, W) // 10 + 1, min(H, W) // 4 + 1))
            cy = int(rng.integers(r, H - r))
            cx = int(rng.integers(r, W - r))
            prims.append((d, kind, (cy, cx, r), color))

    # Far-to-near so nearer primitives occlude.
    for d, kind, geo, color in sorted(prims, key=lambda p: -p[0]):
        if kind == "sky":
            (band,) = geo
            grad = np.linspace(1.0, 0.55, band).reshape(1, band, 1)
            clear[:, :band, :] = color.reshape(3, 1, 1) * grad
            depth[:, :band, :] = d
        elif kind == "rect":
            r0, c0, h, w = geo
            clear[:, r0 : r0 + h, c0 : c0 + w] = color.reshape(3, 1, 1)
            depth[:, r0 : r0 + h, c0 : c0 + w] = d
        else:
            cy, cx, r = geo
            yy, xx = np.ogrid[:H, :W]
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            clear[:, mask] = color.reshape(3, 1)
            depth[:, mask] = d

    np.clip(clear, 0.0, 1.0, out=clear)
    return Scene(Tensor(clear), Tensor(depth), seed, scene_id)


def transmission(depth, beta):
    """t = exp(-beta * d), elementwise."""
    d = depth.data if isinstance(depth, Tensor) else np.asarray(depth, dtype=np.float64)
    return np.exp(-beta * d)


def synthesize(scene, params):
    """Apply the scattering model: I = J*t + A*(1-t)."""
    t = transmission(scene.depth, params.beta)
    a = params.a_column()
    hazy = scene.clear.data * t + a * (1.0 - t)
    return HazyPair(Tensor(hazy), scene.id, params)


def invert(hazy, scene_depth, params):
    """Recover J = (I - A*(1-t)) / t; test oracle for synthesize.

    Raises SingularityError when any pixel's transmission falls below
    T_FLOOR, reporting how many pixels offend.
    """
    t = transmission(scene_depth, params.beta)
    bad = int((t < T_FLOOR).sum())
    if bad:
        raise SingularityError(
            f"transmission below {T_FLOOR} at {bad} pixel(s); inversion is ill-conditioned"
        )
    img = hazy.hazy.data if isinstance(hazy, HazyPair) else hazy.data
    a = params.a_column()
    return Tensor((img - a * (1.0 - t)) / t)


def beta_sweep(scene, betas=DEFAULT_BETAS, A=DEFAULT_A):
    """One HazyPair per beta; betas must be ascending."""
    betas = list(betas)
    if not betas:
        raise ConfigError("betas must be non-empty")
    if any(b1 >= b2 for b1, b2 in zip(betas, betas[1:])):
        raise ConfigError(f"betas must be strictly ascending, got {betas}")
    return [synthesize(scene, HazeParams(beta=b, A=A)) for b in betas]


def write_ppm(path, image):
    """8-bit binary PPM (P6) preview of a 3xHxW image in [0,1]."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"PPM preview needs 3xHxW, got {img.shape}")
    h, w = img.shape[1:]
    bytes8 = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes8.transpose(1, 2, 0).tobytes())
