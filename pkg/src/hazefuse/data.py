"""Deterministic desk-scale datasets: synthetic scenes crossed with a beta sweep."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depthfeat import degraded_features, oracle_features
from .errors import ConfigError
from .hazesim import DEFAULT_A, DEFAULT_BETAS, HazeParams, generate_scene, synthesize
from .tensor import Tensor


@dataclass
class HazyDataset:
    """All (scene, beta) pairs of a scene collection, fully materialized.

    Pair index p maps to scene p // len(betas) and beta p % len(betas).
    """

    scenes: list
    betas: tuple
    A: float
    clear: np.ndarray  # S x 3 x H x W
    depth: np.ndarray  # S x 1 x H x W
    hazy: np.ndarray  # S x len(betas) x 3 x H x W

    @property
    def n_scenes(self):
        return len(self.scenes)

    @property
    def n_pairs(self):
        return len(self.scenes) * len(self.betas)

    def scene_of(self, pair_idx):
        return pair_idx // len(self.betas)

    def beta_of(self, pair_idx):
        return self.betas[pair_idx % len(self.betas)]

    def batch(self, pair_indices):
        """(hazy, clear) Tensors for a list of pair indices."""
        s = np.fromiter((p // len(self.betas) for p in pair_indices), dtype=np.int64)
        b = np.fromiter((p % len(self.betas) for p in pair_indices), dtype=np.int64)
        return Tensor(self.hazy[s, b]), Tensor(self.clear[s])

    def scene_indices_of(self, pair_indices):
        return np.fromiter((p // len(self.betas) for p in pair_indices), dtype=np.int64)


def build_dataset(n_scenes, H, W, difficulty=1.0, scene_seed=1000,
                  betas=DEFAULT_BETAS, A=DEFAULT_A):
    if n_scenes < 1:
        raise ConfigError(f"n_scenes must be >= 1, got {n_scenes}")
    betas = tuple(betas)
    scenes = [generate_scene(scene_seed + i, H, W, difficulty) for i in range(n_scenes)]
    clear = np.stack([s.clear.data for s in scenes])
    depth = np.stack([s.depth.data for s in scenes])
    hazy = np.empty((n_scenes, len(betas), 3, H, W))
    for i, scene in enumerate(scenes):
        for j, beta in enumerate(betas):
            hazy[i, j] = synthesize(scene, HazeParams(beta=beta, A=A)).hazy.data
    return HazyDataset(scenes, betas, float(A), clear, depth, hazy)


def depth_feature_table(dataset, fusion_cfg, provider="oracle", pool=1,
                        sigma=0.5, blur_k=1, seed=0):
    """Per-scene depth features as one array S x C_d x H' x W'.

    Degraded features derive their per-scene noise seed from (seed, scene
    index) so the corruption is reproducible and scene-specific.
    """
    feats = []
    for i, scene in enumerate(dataset.scenes):
        if provider == "oracle":
            df = oracle_features(scene, fusion_cfg, pool=pool)
        elif provider == "degraded":
            df = degraded_features(scene, fusion_cfg, sigma=sigma, blur_k=blur_k,
                                   seed=seed * 1_000_003 + i, pool=pool)
        else:
            raise ConfigError(f"unknown depth provider {provider!r}")
        feats.append(df.features.data[0])
    return np.stack(feats)


def split_indices(dataset, val_scenes):
    """Deterministic split: the last `val_scenes` scenes form the val set."""
    if not 0 <= val_scenes < dataset.n_scenes:
        raise ConfigError(
            f"val_scenes {val_scenes} out of range for {dataset.n_scenes} scenes"
        )
    nb = len(dataset.betas)
    cut = (dataset.n_scenes - val_scenes) * nb
    return list(range(cut)), list(range(cut, dataset.n_pairs))
