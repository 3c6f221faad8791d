"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-10 share one experiment grid (3 seeds x 8 training arms on the
512-scene desk dataset) built once per session; everything else is
self-contained. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import json
import math
import time

import numpy as np
import pytest

from hazefuse.data import build_dataset, depth_feature_table, split_indices
from hazefuse.dehazenet import (
    FusionState,
    NetConfig,
    build_net_params,
    forward,
    forward_merged,
)
from hazefuse.depthfeat import degraded_depth
from hazefuse.fusion import FusionConfig, build_fusion_params
from hazefuse.hazesim import DEFAULT_BETAS, HazeParams, generate_scene, invert, synthesize
from hazefuse.metrics import (
    evaluate_pairs,
    feature_distance_profile,
    kl_divergence,
    kl_exceedance,
    psnr,
    ssim,
)
from hazefuse.tensor import Tensor
from hazefuse.trainer import (
    TrainConfig,
    continue_stage1,
    lr_at,
    params_for_checkpoint,
    train_stage1,
    train_stage2,
)
from helpers import fd_check

# Desk experiment configuration shared by criteria 6-10.
DESK_SCENES = 512
DESK_HW = 32
DESK_VAL = 32
NET = NetConfig(base_channels=8, levels=2, blocks_per_level=1)
FUS = FusionConfig(channels=8, depth_channels=4, heads=2)
SEEDS = (0, 1, 2)
STAGE1_STEPS = 300
STAGE2_STEPS = 200


def verdict(label, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[ACCEPTANCE] {label}: {status}" + (f"  ({detail})" if detail else ""))
    assert ok, f"{label}: {detail}"


def test_criterion_1_init_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(42)
    net_params = build_net_params(NET, seed=1)
    fusion_params = build_fusion_params(FUS, seed=2)
    ok = True
    for _ in range(50):
        x = Tensor(rng.random((1, 3, 16, 16)))
        depth = Tensor(rng.standard_normal((1, 4, 16, 16)))
        base = forward(x, net_params, NET)
        fused = forward(x, net_params, NET,
                        fusion=FusionState(FUS, fusion_params, depth))
        if not np.array_equal(base.data, fused.data):
            ok = False
            break
    elapsed = time.time() - t0
    verdict("criterion 1 (init-equivalence, 50 inputs, tolerance 0)",
            ok and elapsed < 10.0, f"{elapsed:.1f}s")


def test_criterion_2_gradient_correctness():
    t0 = time.time()
    net_cfg = NetConfig(base_channels=4, levels=2, blocks_per_level=1)
    fusion_cfg = FusionConfig(channels=4, depth_channels=4, heads=2)
    from hazefuse.trainer import merged_params

    params = merged_params(build_net_params(net_cfg, seed=3),
                           build_fusion_params(fusion_cfg, seed=4))
    # Nonzero ZC weights so the check exercises both injection paths.
    rng = np.random.default_rng(5)
    for name in ("fusion.zc.pre", "fusion.zc.post"):
        params[f"{name}.w"].data[:] = 0.1 * rng.standard_normal(params[f"{name}.w"].shape)
    x = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
    depth = Tensor(rng.standard_normal((1, 4, 16, 16)), requires_grad=True)
    tensors = [x, depth] + [t for _, t in params.items()]

    def loss():
        from hazefuse.tensor import square, tmean

        out = forward_merged(x, params, net_cfg, fusion_cfg=fusion_cfg, depth=depth)
        return tmean(square(out))

    worst = fd_check(loss, tensors, h=1e-5, max_coords=2, rng=rng)
    elapsed = time.time() - t0
    verdict("criterion 2 (finite-difference grad check, full fused path)",
            worst < 1e-4 and elapsed < 120.0,
            f"max rel err {worst:.2e}, {elapsed:.0f}s")


def test_criterion_3_haze_model():
    t0 = time.time()
    worst = 0.0
    for i in range(100):
        scene = generate_scene(3000 + i, 32, 32)
        # Keep beta*d <= 9 so transmission stays above the inversion floor.
        p = HazeParams(beta=0.04 + 0.0014 * i, A=0.85)
        rec = invert(synthesize(scene, p), scene.depth, p)
        worst = max(worst, float(np.abs(rec.data - scene.clear.data).max()))
    round_trip_ok = worst < 1e-10

    mono_ok = True
    for i in range(10):
        scene = generate_scene(4000 + i, 32, 32)
        a = 0.9
        j = scene.clear.data
        prev = j
        for beta in DEFAULT_BETAS:
            cur = synthesize(scene, HazeParams(beta=beta, A=a)).hazy.data
            towards = np.where(j < a, cur - prev, prev - cur)
            if not np.all(towards >= -1e-12):
                mono_ok = False
            prev = cur
    elapsed = time.time() - t0
    verdict("criterion 3 (haze round trip + beta monotonicity)",
            round_trip_ok and mono_ok and elapsed < 30.0,
            f"max round-trip err {worst:.2e}, {elapsed:.0f}s")


def test_criterion_4_scheduler():
    cfg = TrainConfig(stage=1, lr_max=4e-4, lr_min=1e-8, cycle_steps=100,
                      cycle_mult=2, total_steps=1, batch_size=1, seed=0)
    restart_ok = lr_at(0, cfg) == 4e-4 and lr_at(101, cfg) == 4e-4
    end_ok = lr_at(100, cfg) == 1e-8 and lr_at(101 + 200, cfg) == 1e-8
    mid = lr_at(50, cfg)
    closed = 1e-8 + 0.5 * (4e-4 - 1e-8) * (1 + math.cos(math.pi * 0.5))
    mid_ok = abs(mid - closed) < 1e-12
    verdict("criterion 4 (cosine restarts schedule exactness)",
            restart_ok and end_ok and mid_ok,
            f"restart {restart_ok}, floor {end_ok}, midpoint |err|={abs(mid - closed):.1e}")


def test_criterion_5_metric_oracles():
    x = np.zeros((3, 16, 16))
    psnr_ok = abs(psnr(x, np.full_like(x, 0.1)) - 20.0) < 1e-9

    y = np.random.default_rng(0).random((3, 16, 16))
    ssim_self_ok = abs(ssim(y, y) - 1.0) < 1e-9

    c1 = 0.01**2
    closed = (2 * 0.4 * 0.5 + c1) / (0.4**2 + 0.5**2 + c1)
    const_ok = abs(ssim(np.full((1, 16, 16), 0.4), np.full((1, 16, 16), 0.5))
                   - 0.97562) < 1e-4 and abs(closed - 0.97562) < 1e-4

    kl_ok = abs(kl_divergence([0.5, 0.5], [0.9, 0.1]) - 0.5108) < 1e-4
    verdict("criterion 5 (metric oracles: PSNR/SSIM/KL closed forms)",
            psnr_ok and ssim_self_ok and const_ok and kl_ok,
            f"psnr {psnr_ok}, ssim-self {ssim_self_ok}, ssim-const {const_ok}, kl {kl_ok}")


# ---------------------------------------------------------------------------
# criteria 6-10: shared experiment grid


@pytest.fixture(scope="session")
def grid():
    t0 = time.time()
    ds = build_dataset(DESK_SCENES, DESK_HW, DESK_HW, scene_seed=1000)
    train_idx, val_idx = split_indices(ds, DESK_VAL)
    oracle_table = depth_feature_table(ds, FUS, provider="oracle")
    degraded_table = depth_feature_table(ds, FUS, provider="degraded",
                                         sigma=0.5, blur_k=1, seed=7)
    zc_variants = {
        "both": FUS,
        "pre": FusionConfig(channels=8, depth_channels=4, heads=2,
                            use_pre_zc=True, use_post_zc=False),
        "post": FusionConfig(channels=8, depth_channels=4, heads=2,
                             use_pre_zc=False, use_post_zc=True),
        "none": FusionConfig(channels=8, depth_channels=4, heads=2,
                             use_pre_zc=False, use_post_zc=False),
    }

    results = {"psnr": {}, "profiles": {}, "betas": list(ds.betas)}
    val_scenes = ds.scenes[-DESK_VAL:]
    val_oracle = oracle_table[-DESK_VAL:]

    for seed in SEEDS:
        c1 = TrainConfig(stage=1, total_steps=STAGE1_STEPS, cycle_steps=150,
                         batch_size=8, seed=seed)
        c2 = TrainConfig(stage=2, total_steps=STAGE2_STEPS, cycle_steps=100,
                         batch_size=4, seed=seed)
        c2_frozen = TrainConfig(stage=2, total_steps=STAGE2_STEPS, cycle_steps=100,
                                batch_size=4, seed=seed,
                                freeze_backbone_in_stage2=True)
        s1 = train_stage1(ds, NET, c1, train_idx)

        cont = continue_stage1(s1.checkpoint, ds, NET, c2, train_idx)
        p_cont = params_for_checkpoint(cont.checkpoint, NET)
        results["psnr"][("baseline", seed)] = evaluate_pairs(
            p_cont, NET, ds, val_idx).psnr

        arm_params = {}
        for name, fc in zc_variants.items():
            arm = train_stage2(s1.checkpoint, oracle_table, ds, NET, fc, c2, train_idx)
            p = params_for_checkpoint(arm.checkpoint, NET, fc)
            arm_params[name] = (p, fc)
            results["psnr"][(f"zc_{name}", seed)] = evaluate_pairs(
                p, NET, ds, val_idx, fusion_cfg=fc, depth_table=oracle_table).psnr

        deg = train_stage2(s1.checkpoint, degraded_table, ds, NET, FUS, c2, train_idx)
        p_deg = params_for_checkpoint(deg.checkpoint, NET, FUS)
        results["psnr"][("degraded", seed)] = evaluate_pairs(
            p_deg, NET, ds, val_idx, fusion_cfg=FUS, depth_table=degraded_table).psnr

        frz = train_stage2(s1.checkpoint, oracle_table, ds, NET, FUS, c2_frozen,
                           train_idx)
        p_frz = params_for_checkpoint(frz.checkpoint, NET, FUS)
        results["psnr"][("frozen", seed)] = evaluate_pairs(
            p_frz, NET, ds, val_idx, fusion_cfg=FUS, depth_table=oracle_table).psnr

        p_both, fc_both = arm_params["both"]
        results["profiles"][("baseline", seed)] = feature_distance_profile(
            p_cont, NET, val_scenes, results["betas"], A=ds.A).mean_per_beta()
        results["profiles"][("fused", seed)] = feature_distance_profile(
            p_both, NET, val_scenes, results["betas"], A=ds.A,
            fusion_cfg=fc_both, depth_table=val_oracle).mean_per_beta()

    results["dataset"] = ds
    results["elapsed"] = time.time() - t0
    return results


def median_over_seeds(results, arm):
    return float(np.median([results["psnr"][(arm, s)] for s in SEEDS]))


def test_criterion_6_fusion_gain(grid):
    base = median_over_seeds(grid, "baseline")
    fused = median_over_seeds(grid, "zc_both")
    gain = fused - base
    budget_ok = grid["elapsed"] < 1800 * len(SEEDS)  # grid covers 6-10 jointly
    verdict("criterion 6 (fused beats equal-budget baseline by >= +0.2 dB)",
            gain >= 0.2 and budget_ok,
            f"baseline {base:.3f} dB, fused {fused:.3f} dB, gain {gain:+.3f} dB, "
            f"grid {grid['elapsed']:.0f}s")


def test_criterion_7_consistency_trend(grid):
    betas = grid["betas"]
    base = np.median([grid["profiles"][("baseline", s)] for s in SEEDS], axis=0)
    fused = np.median([grid["profiles"][("fused", s)] for s in SEEDS], axis=0)
    nondecreasing = bool(np.all(np.diff(base) >= -1e-12))
    dominated = bool(np.all(fused < base))
    verdict("criterion 7 (feature-distance: baseline grows with beta, fused smaller)",
            nondecreasing and dominated,
            f"baseline {np.round(base, 4).tolist()}, fused {np.round(fused, 4).tolist()}")


def test_criterion_8_depth_quality_ordering(grid):
    oracle = median_over_seeds(grid, "zc_both")
    degraded = median_over_seeds(grid, "degraded")
    psnr_ok = oracle >= degraded

    ds = grid["dataset"]
    taus = [0.02 * i for i in range(1, 26)]
    oracle_frac = np.zeros(len(taus))
    degraded_frac = np.zeros(len(taus))
    for i, scene in enumerate(ds.scenes[-DESK_VAL:]):
        scene_idx = ds.n_scenes - DESK_VAL + i
        oracle_frac += kl_exceedance(scene.depth, scene.depth, taus).exceedance
        dd = degraded_depth(scene, 0.5, 1, seed=7 * 1_000_003 + scene_idx)
        degraded_frac += kl_exceedance(dd, scene.depth, taus).exceedance
    oracle_frac /= DESK_VAL
    degraded_frac /= DESK_VAL
    kl_ok = bool(np.all(oracle_frac <= degraded_frac))
    verdict("criterion 8 (oracle depth >= degraded: PSNR and KL curves)",
            psnr_ok and kl_ok,
            f"PSNR oracle {oracle:.3f} vs degraded {degraded:.3f}; "
            f"KL curve dominated: {kl_ok}")


def test_criterion_9_zc_ablation_ordering(grid):
    tol = 0.05
    both = median_over_seeds(grid, "zc_both")
    pre = median_over_seeds(grid, "zc_pre")
    post = median_over_seeds(grid, "zc_post")
    none = median_over_seeds(grid, "zc_none")
    ok = (both >= pre - tol and both >= post - tol
          and pre >= none - tol and post >= none - tol)
    verdict("criterion 9 (ZC ablation: both >= single >= none, ties 0.05 dB)",
            ok, f"both {both:.3f}, pre {pre:.3f}, post {post:.3f}, none {none:.3f}")


def test_criterion_10_finetune_all_vs_frozen(grid):
    unfrozen = median_over_seeds(grid, "zc_both")
    frozen = median_over_seeds(grid, "frozen")
    verdict("criterion 10 (finetune-all >= frozen-backbone)",
            unfrozen >= frozen, f"unfrozen {unfrozen:.3f}, frozen {frozen:.3f}")


def test_criterion_11_reproducibility(tmp_path):
    from hazefuse.cli import main

    cfg = {
        "scenes": {"count": 6, "height": 16, "width": 16, "seed": 11, "val_count": 2},
        "haze": {"betas": [0.05, 0.15]},
        "net": {"base_channels": 4, "levels": 2, "blocks_per_level": 1},
        "fusion": {"depth_channels": 4, "heads": 2},
        "train": {"total_steps": 4, "batch_size": 2, "cycle_steps": 4},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "run"

    def pipeline(config):
        assert main(["synth", "--config", config, "--out", str(out)]) == 0
        assert main(["train", "--config", config, "--stage", "1",
                     "--out", str(out)]) == 0
        assert main(["train", "--config", config, "--stage", "2", "--out", str(out),
                     "--resume", str(out / "stage1.hzc")]) == 0
        assert main(["eval", "--config", config, "--out", str(out),
                     "--ckpt", str(out / "stage2.hzc"),
                     "--data", str(out / "dataset")]) == 0
        assert main(["analyze", "--config", config, "--out", str(out),
                     "--ckpt", str(out / "stage2.hzc"),
                     "--data", str(out / "dataset")]) == 0

    pipeline(str(cfg_path))
    tracked = sorted(p for p in out.rglob("*")
                     if p.is_file() and p.suffix in (".hzc", ".csv", ".json", ".hzt"))
    snapshot = {p: p.read_bytes() for p in tracked}
    pipeline(str(out / "resolved_config.json"))
    same = all(p.read_bytes() == blob for p, blob in snapshot.items())
    verdict("criterion 11 (pipeline reproducible from resolved-config echo)",
            same and len(tracked) > 10, f"{len(tracked)} artifacts compared")
