"""Full-reference quality metrics plus the two consistency analyses.

PSNR/SSIM follow the standard conventions: inputs are clamped to [0, 1],
identical images report the 99 dB cap instead of infinity, PSNR-Y uses
BT.601 full-range luma, and SSIM uses an 11x11 Gaussian window with
sigma 1.5 and constants C1 = 0.01^2, C2 = 0.03^2, averaged over channels.

The consistency analyses mirror the motivating experiments: per-beta
distances between attach-point features of hazy and clear inputs, and the
fraction of windowed depth-histogram KL divergences exceeding a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dehazenet import forward_merged
from .errors import ConfigError, DimensionError
from .hazesim import HazeParams, normalize_depth, synthesize
from .tensor import Tensor

PSNR_CAP = 99.0

_BT601 = np.array([0.299, 0.587, 0.114])

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2

KL_WINDOW = 16
KL_BINS = 32


def _clamp01(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return np.clip(arr, 0.0, 1.0)


def _pair(x, y):
    a, b = _clamp01(x), _clamp01(y)
    if a.shape != b.shape:
        raise DimensionError(f"metric inputs differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, y, max_val=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99."""
    a, b = _pair(x, y)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_val * max_val / mse))


def psnr_y(x, y):
    """PSNR on the BT.601 luma channel of a (..., 3, H, W) RGB pair."""
    a, b = _pair(x, y)
    if a.shape[-3] != 3:
        raise DimensionError(f"psnr_y needs 3 channels, got shape {a.shape}")
    luma = _BT601.reshape(3, 1, 1)
    ya = (a * luma).sum(axis=-3)
    yb = (b * luma).sum(axis=-3)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


_SSIM_WINDOW = _gaussian_window()


def _filter_valid(img, window):
    """'valid'-mode 2-D correlation of an HxW image with the window."""
    k = window.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(win, window, axes=([2, 3], [0, 1]))


def ssim(x, y):
    """Mean SSIM over channels of a (3|1)xHxW or HxW pair in [0, 1]."""
    a, b = _pair(x, y)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise DimensionError(f"ssim expects CxHxW or HxW, got {a.shape}")
    h, w = a.shape[1:]
    k = _SSIM_WINDOW.shape[0]
    if h < k or w < k:
        raise DimensionError(f"image {h}x{w} smaller than the {k}x{k} SSIM window")
    vals = []
    for ch in range(a.shape[0]):
        xa, xb = a[ch], b[ch]
        mu_a = _filter_valid(xa, _SSIM_WINDOW)
        mu_b = _filter_valid(xb, _SSIM_WINDOW)
        mu_aa = _filter_valid(xa * xa, _SSIM_WINDOW)
        mu_bb = _filter_valid(xb * xb, _SSIM_WINDOW)
        mu_ab = _filter_valid(xa * xb, _SSIM_WINDOW)
        var_a = mu_aa - mu_a * mu_a
        var_b = mu_bb - mu_b * mu_b
        cov = mu_ab - mu_a * mu_b
        num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
        den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricReport:
    """Per-image metric rows plus their aggregate means."""

    rows: list = field(default_factory=list)  # (image_id, psnr, psnr_y, ssim)

    def add(self, image_id, p, py, s):
        self.rows.append((image_id, p, py, s))

    @property
    def psnr(self):
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def psnr_y(self):
        return float(np.mean([r[2] for r in self.rows]))

    @property
    def ssim(self):
        return float(np.mean([r[3] for r in self.rows]))


def evaluate_pairs(params, net_cfg, dataset, pair_indices, fusion_cfg=None,
                   depth_table=None, batch=16):
    """MetricReport of a model over the given dataset pair indices."""
    report = MetricReport()
    for start in range(0, len(pair_indices), batch):
        chunk = pair_indices[start : start + batch]
        hazy, clear = dataset.batch(chunk)
        depth = None
        if fusion_cfg is not None:
            depth = Tensor(depth_table[dataset.scene_indices_of(chunk)])
        out = forward_merged(hazy, params, net_cfg, fusion_cfg=fusion_cfg,
                             depth=depth).data
        for i, p in enumerate(chunk):
            sid = dataset.scenes[dataset.scene_of(p)].id
            beta = dataset.beta_of(p)
            image_id = f"{sid}@beta={beta:g}"
            report.add(image_id, psnr(out[i], clear.data[i]),
                       psnr_y(out[i], clear.data[i]), ssim(out[i], clear.data[i]))
    return report


# ---------------------------------------------------------------------------
# consistency analysis 1: attach-feature distances across haze levels


@dataclass
class DistanceProfile:
    betas: list
    distances: list  # per beta: list of per-image distances
    bin_edges: np.ndarray
    histogram: np.ndarray  # len(betas) x bins, rows normalized to sum 1

    def mean_per_beta(self):
        return [float(np.mean(d)) for d in self.distances]


def feature_distance(f_hazy, f_clear):
    """L2 distance normalized by sqrt(element count)."""
    a = f_hazy.data if isinstance(f_hazy, Tensor) else f_hazy
    b = f_clear.data if isinstance(f_clear, Tensor) else f_clear
    if a.shape != b.shape:
        raise DimensionError(f"feature shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b) / np.sqrt(a.size))


def feature_distance_profile(params, net_cfg, scenes, betas, A=0.9,
                             fusion_cfg=None, depth_table=None, bins=24):
    """Distances between attach features of hazy vs clear inputs, per beta.

    For the fused model the per-scene depth features are the same for the
    hazy and the clear forward, matching a haze-invariant depth source.
    """
    betas = list(betas)
    if any(b < 0 for b in betas):
        raise ConfigError(f"betas must be >= 0, got {betas}")
    per_beta = [[] for _ in betas]
    for si, scene in enumerate(scenes):
        clear = Tensor(scene.clear.data[None])
        depth = None
        if fusion_cfg is not None:
            depth = Tensor(depth_table[si][None])
        _, f_clear = forward_merged(clear, params, net_cfg, fusion_cfg=fusion_cfg,
                                    depth=depth, return_attach=True)
        for bi, beta in enumerate(betas):
            if beta == 0.0:
                f_hazy = f_clear
            else:
                hazy = synthesize(scene, HazeParams(beta=beta, A=A)).hazy
                _, f_hazy = forward_merged(Tensor(hazy.data[None]), params, net_cfg,
                                           fusion_cfg=fusion_cfg, depth=depth,
                                           return_attach=True)
            per_beta[bi].append(feature_distance(f_hazy, f_clear))

    flat = np.concatenate([np.asarray(d) for d in per_beta])
    hi = float(flat.max()) if flat.size and flat.max() > 0 else 1.0
    edges = np.linspace(0.0, hi, bins + 1)
    hist = np.zeros((len(betas), bins))
    for bi, dists in enumerate(per_beta):
        counts, _ = np.histogram(dists, bins=edges)
        total = counts.sum()
        hist[bi] = counts / total if total else counts
    return DistanceProfile(betas, per_beta, edges, hist)


# ---------------------------------------------------------------------------
# consistency analysis 2: windowed depth-histogram KL exceedance


@dataclass
class KLCurve:
    thresholds: list
    exceedance: list  # fraction of windows with KL > tau, non-increasing

    def __post_init__(self):
        if any(t1 >= t2 for t1, t2 in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError("thresholds must be strictly ascending")


def kl_divergence(p, q):
    """KL(p || q) in nats for two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if (p <= 0).any() or (q <= 0).any():
        raise ConfigError("distributions must be strictly positive after smoothing")
    return float(np.sum(p * np.log(p / q)))


def _window_histograms(depth_map):
    """Add-one-smoothed histograms of normalized depth over 16x16 tiles."""
    dn = normalize_depth(depth_map)
    if dn.ndim == 3:
        dn = dn[0]
    h, w = dn.shape
    if h < KL_WINDOW or w < KL_WINDOW:
        raise DimensionError(
            f"depth map {h}x{w} smaller than the {KL_WINDOW}x{KL_WINDOW} KL window"
        )
    hists = []
    for r in range(0, h - KL_WINDOW + 1, KL_WINDOW):
        for c in range(0, w - KL_WINDOW + 1, KL_WINDOW):
            tile = dn[r : r + KL_WINDOW, c : c + KL_WINDOW]
            counts, _ = np.histogram(tile, bins=KL_BINS, range=(0.0, 1.0))
            smoothed = counts.astype(np.float64) + 1.0
            hists.append(smoothed / smoothed.sum())
    return hists


def kl_exceedance(depth_a, depth_b, thresholds):
    """Fraction of 16x16 windows whose histogram KL(a || b) exceeds each tau."""
    ha = _window_histograms(depth_a)
    hb = _window_histograms(depth_b)
    if len(ha) != len(hb):
        raise DimensionError("depth maps produced different window counts")
    kls = np.array([kl_divergence(p, q) for p, q in zip(ha, hb)])
    thresholds = list(thresholds)
    frac = [float(np.mean(kls > tau)) for tau in thresholds]
    return KLCurve(thresholds, frac)
