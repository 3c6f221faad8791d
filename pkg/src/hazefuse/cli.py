"""Command-line pipeline: synth, train, eval, analyze, ablate-zc.

Every command takes a JSON config (see runconfig.DEFAULTS for the schema)
plus --set key.path=value overrides, writes all artifacts under --out, and
drops a resolved_config.json echo from which the run can be reproduced
byte-for-byte. Failures exit nonzero with a single machine-parseable
`error-class: message` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import runconfig
from .data import HazyDataset, build_dataset, depth_feature_table, split_indices
from .dehazenet import NetConfig
from .depthfeat import degraded_depth, load_features, load_tensor, save_tensor
from .errors import ConfigError, HazefuseError
from .fusion import FusionConfig
from .hazesim import HazeParams, Scene, synthesize, write_ppm
from .metrics import evaluate_pairs, feature_distance_profile, kl_exceedance
from .tensor import Tensor
from .trainer import (
    Checkpoint,
    TrainConfig,
    continue_stage1,
    load_checkpoint,
    params_for_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
    write_loss_csv,
)

DEFAULT_KL_THRESHOLDS = [round(0.02 * i, 2) for i in range(26)]


def _net_cfg(cfg):
    n = cfg["net"]
    return NetConfig(base_channels=n["base_channels"], levels=n["levels"],
                     blocks_per_level=n["blocks_per_level"],
                     global_residual=n["global_residual"],
                     fusion_attach=n["fusion_attach"])


def _fusion_cfg(cfg, use_pre=None, use_post=None):
    f = cfg["fusion"]
    net = _net_cfg(cfg)
    return FusionConfig(
        channels=net.attach_channels(),
        depth_channels=f["depth_channels"],
        heads=f["heads"],
        use_pre_zc=f["use_pre_zc"] if use_pre is None else use_pre,
        use_post_zc=f["use_post_zc"] if use_post is None else use_post,
        asg_layers=f["asg_layers"],
        hgdf_blocks=f["hgdf_blocks"],
        dai_mode=f["dai_mode"],
    )


def _train_cfg(cfg, stage, **overrides):
    t = dict(cfg["train"])
    t.update(overrides)
    return TrainConfig(stage=stage, lr_max=t["lr_max"], lr_min=t["lr_min"],
                       cycle_steps=t["cycle_steps"], cycle_mult=t["cycle_mult"],
                       total_steps=t["total_steps"], batch_size=t["batch_size"],
                       seed=t["seed"],
                       freeze_backbone_in_stage2=t["freeze_backbone_in_stage2"],
                       loss=t["loss"], grad_accum=t["grad_accum"])


def _build_dataset(cfg):
    sc, hz = cfg["scenes"], cfg["haze"]
    return build_dataset(sc["count"], sc["height"], sc["width"],
                         difficulty=sc["difficulty"], scene_seed=sc["seed"],
                         betas=hz["betas"], A=hz["atmospheric_light"])


def _depth_table(cfg, dataset):
    dp = cfg["depth"]
    fusion_cfg = _fusion_cfg(cfg)
    pool = _net_cfg(cfg).attach_scale()
    if dp["provider"] == "file":
        if not dp["file"]:
            raise ConfigError("depth.provider is 'file' but depth.file is unset")
        feats = load_features(dp["file"]).features.data
        if feats.shape[0] != dataset.n_scenes:
            raise ConfigError(
                f"depth feature file holds {feats.shape[0]} maps for {dataset.n_scenes} scenes"
            )
        return feats
    return depth_feature_table(dataset, fusion_cfg, provider=dp["provider"],
                               pool=pool, sigma=dp["sigma"], blur_k=dp["blur_k"],
                               seed=dp["seed"])


def _prepare_out(cfg, out_override):
    if out_override:
        cfg["out"] = out_override
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    runconfig.dump(cfg, out / "resolved_config.json")
    return out


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_id(cfg):
    return hashlib.sha256(runconfig.config_bytes(cfg)).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, out):
    dataset = _build_dataset(cfg)
    data_dir = out / "dataset"
    scenes_dir = data_dir / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    betas = dataset.betas

    def emit(i):
        scene = dataset.scenes[i]
        sdir = scenes_dir / scene.id
        sdir.mkdir(exist_ok=True)
        save_tensor(sdir / "clear.hzt", scene.clear)
        save_tensor(sdir / "depth.hzt", scene.depth)
        write_ppm(sdir / "clear.ppm", scene.clear)
        for j, beta in enumerate(betas):
            hazy = dataset.hazy[i, j]
            save_tensor(sdir / f"hazy_{j}.hzt", Tensor(hazy))
            write_ppm(sdir / f"hazy_{j}.ppm", hazy)
        return scene

    workers = runconfig.worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(emit, range(dataset.n_scenes)))
    else:
        for i in range(dataset.n_scenes):
            emit(i)

    entries = []
    for i, scene in enumerate(dataset.scenes):
        sdir = scenes_dir / scene.id
        files = {"clear": f"scenes/{scene.id}/clear.hzt",
                 "depth": f"scenes/{scene.id}/depth.hzt"}
        hashes = {"clear": _sha256(sdir / "clear.hzt"),
                  "depth": _sha256(sdir / "depth.hzt")}
        for j, beta in enumerate(betas):
            files[f"hazy_{j}"] = f"scenes/{scene.id}/hazy_{j}.hzt"
            hashes[f"hazy_{j}"] = _sha256(sdir / f"hazy_{j}.hzt")
        entries.append({"id": scene.id, "seed": scene.seed,
                        "files": files, "sha256": hashes})
    manifest = {
        "schema": "hazefuse/manifest-v1",
        "height": cfg["scenes"]["height"],
        "width": cfg["scenes"]["width"],
        "betas": list(betas),
        "atmospheric_light": dataset.A,
        "scenes": entries,
    }
    with open(data_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"synth: wrote {dataset.n_scenes} scenes x {len(betas)} haze levels to {data_dir}")
    return 0


def load_dataset_dir(data_dir):
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json under {data_dir}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    betas = tuple(manifest["betas"])
    scenes, clears, depths, hazies = [], [], [], []
    for entry in manifest["scenes"]:
        clear = load_tensor(data_dir / entry["files"]["clear"])
        depth = load_tensor(data_dir / entry["files"]["depth"])
        clear = Tensor(np.clip(clear.data, 0.0, 1.0))  # f32 round-off guard
        scenes.append(Scene(clear, depth, entry["seed"], entry["id"]))
        clears.append(clear.data)
        depths.append(depth.data)
        hazies.append(np.stack([
            load_tensor(data_dir / entry["files"][f"hazy_{j}"]).data
            for j in range(len(betas))
        ]))
    return HazyDataset(scenes, betas, float(manifest["atmospheric_light"]),
                       np.stack(clears), np.stack(depths), np.stack(hazies))


def cmd_train(cfg, out, stage, resume):
    dataset = _build_dataset(cfg)
    train_idx, _ = split_indices(dataset, cfg["scenes"]["val_count"])
    net_cfg = _net_cfg(cfg)
    if stage == 1:
        if resume:
            ckpt = load_checkpoint(resume)
            result = continue_stage1(ckpt, dataset, net_cfg,
                                     _train_cfg(cfg, 1), train_idx)
        else:
            result = train_stage1(dataset, net_cfg, _train_cfg(cfg, 1), train_idx)
        name = "stage1"
    else:
        if not resume:
            raise ConfigError("stage 2 requires --resume with a stage-1 checkpoint")
        ckpt = load_checkpoint(resume)
        depth_table = _depth_table(cfg, dataset)
        result = train_stage2(ckpt, depth_table, dataset, net_cfg,
                              _fusion_cfg(cfg), _train_cfg(cfg, 2), train_idx)
        name = "stage2"
    save_checkpoint(out / f"{name}.hzc", result.checkpoint)
    write_loss_csv(out / f"{name}_loss.csv", result.loss_log)
    final = result.loss_log[-1][3]
    print(f"train: stage {stage} done, {len(result.loss_log)} steps, "
          f"final loss {final:.6f}, checkpoint {out / (name + '.hzc')}")
    return 0


def _eval_report(cfg, ckpt, dataset, pair_indices):
    net_cfg = _net_cfg(cfg)
    fused = any(k.startswith("fusion.") for k in ckpt.values)
    fusion_cfg = _fusion_cfg(cfg) if fused else None
    params = params_for_checkpoint(ckpt, net_cfg, fusion_cfg)
    depth_table = _depth_table(cfg, dataset) if fused else None
    return evaluate_pairs(params, net_cfg, dataset, pair_indices,
                          fusion_cfg=fusion_cfg, depth_table=depth_table)


def cmd_eval(cfg, out, ckpt_path, data_dir):
    ckpt = load_checkpoint(ckpt_path)
    dataset = load_dataset_dir(data_dir)
    report = _eval_report(cfg, ckpt, dataset, list(range(dataset.n_pairs)))
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "psnr", "psnr_y", "ssim"])
        for row in report.rows:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    summary = {
        "run_id": _run_id(cfg),
        "config": cfg,
        "n_images": len(report.rows),
        "psnr": report.psnr,
        "psnr_y": report.psnr_y,
        "ssim": report.ssim,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"eval: {len(report.rows)} images, mean PSNR {report.psnr:.4f} dB, "
          f"SSIM {report.ssim:.6f}")
    return 0


def cmd_analyze(cfg, out, ckpt_path, data_dir, betas):
    ckpt = load_checkpoint(ckpt_path)
    dataset = load_dataset_dir(data_dir)
    betas = betas if betas is not None else list(dataset.betas)
    net_cfg = _net_cfg(cfg)
    fused = any(k.startswith("fusion.") for k in ckpt.values)
    fusion_cfg = _fusion_cfg(cfg) if fused else None
    params = params_for_checkpoint(ckpt, net_cfg, fusion_cfg)
    depth_table = _depth_table(cfg, dataset) if fused else None

    profile = feature_distance_profile(params, net_cfg, dataset.scenes, betas,
                                       A=dataset.A, fusion_cfg=fusion_cfg,
                                       depth_table=depth_table)
    with open(out / "distance_heatmap.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["beta"] + [repr(e) for e in profile.bin_edges[1:]])
        for beta, row in zip(profile.betas, profile.histogram):
            writer.writerow([repr(beta)] + [repr(x) for x in row])
    with open(out / "distance_mean.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["beta", "mean_distance"])
        for beta, m in zip(profile.betas, profile.mean_per_beta()):
            writer.writerow([repr(beta), repr(m)])

    dp = cfg["depth"]
    thresholds = DEFAULT_KL_THRESHOLDS
    fracs = np.zeros(len(thresholds))
    for i, scene in enumerate(dataset.scenes):
        if dp["provider"] == "degraded":
            provider_depth = degraded_depth(scene, dp["sigma"], dp["blur_k"],
                                            seed=dp["seed"] * 1_000_003 + i)
        else:
            provider_depth = scene.depth  # oracle and file default to ground truth
        curve = kl_exceedance(provider_depth, scene.depth, thresholds)
        fracs += np.asarray(curve.exceedance)
    fracs /= dataset.n_scenes
    with open(out / "kl_exceedance.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fraction"])
        for tau, frac in zip(thresholds, fracs):
            writer.writerow([repr(tau), repr(float(frac))])
    print(f"analyze: wrote distance heatmap over {len(betas)} haze levels and "
          f"KL exceedance over {len(thresholds)} thresholds to {out}")
    return 0


def cmd_ablate_zc(cfg, out):
    dataset = _build_dataset(cfg)
    train_idx, val_idx = split_indices(dataset, cfg["scenes"]["val_count"])
    if not val_idx:
        raise ConfigError("ablate-zc needs scenes.val_count > 0 for held-out scoring")
    net_cfg = _net_cfg(cfg)
    s1 = train_stage1(dataset, net_cfg, _train_cfg(cfg, 1), train_idx)
    save_checkpoint(out / "stage1.hzc", s1.checkpoint)
    depth_table = _depth_table(cfg, dataset)

    arms = [("none", False, False), ("pre", True, False),
            ("post", False, True), ("both", True, True)]
    rows = []
    for name, pre, post in arms:
        fusion_cfg = _fusion_cfg(cfg, use_pre=pre, use_post=post)
        result = train_stage2(s1.checkpoint, depth_table, dataset, net_cfg,
                              fusion_cfg, _train_cfg(cfg, 2), train_idx)
        save_checkpoint(out / f"stage2_{name}.hzc", result.checkpoint)
        params = params_for_checkpoint(result.checkpoint, net_cfg, fusion_cfg)
        report = evaluate_pairs(params, net_cfg, dataset, val_idx,
                                fusion_cfg=fusion_cfg, depth_table=depth_table)
        rows.append((name, report.psnr, report.ssim, report.psnr_y))
        print(f"ablate-zc: {name:>4} -> PSNR {report.psnr:.4f} dB, SSIM {report.ssim:.6f}")
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["zc_config", "psnr", "ssim", "psnr_y"])
        for name, p, s, py in rows:
            writer.writerow([name, repr(p), repr(s), repr(py)])
    return 0


# ---------------------------------------------------------------------------


def _error_class(exc):
    name = type(exc).__name__
    out = []
    for ch in name:
        if ch.isupper() and out:
            out.append("-")
        out.append(ch.lower())
    return "".join(out)


def build_parser():
    parser = argparse.ArgumentParser(prog="hazefuse",
                                     description="depth-guided dehazing pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY.PATH=VALUE", help="override a config entry")
        p.add_argument("--out", help="output directory (overrides config 'out')")

    p = sub.add_parser("synth", help="generate scenes + hazy pairs + manifest")
    common(p)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--resume", help="checkpoint to continue from (required for stage 2)")

    p = sub.add_parser("eval", help="score a checkpoint against a dataset dir")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("analyze", help="feature-distance heatmap + KL exceedance")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--betas", help="JSON list of haze levels (default: dataset's)")

    p = sub.add_parser("ablate-zc", help="train/eval the four zero-conv configurations")
    common(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        raw = runconfig.load_config(args.config) if args.config else {}
        cfg = runconfig.resolve(raw, args.overrides)
        out = _prepare_out(cfg, args.out)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.stage, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.ckpt, args.data)
        if args.command == "analyze":
            betas = json.loads(args.betas) if args.betas else None
            return cmd_analyze(cfg, out, args.ckpt, args.data, betas)
        if args.command == "ablate-zc":
            return cmd_ablate_zc(cfg, out)
        raise ConfigError(f"unknown command {args.command!r}")
    except HazefuseError as exc:
        print(f"{_error_class(exc)}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io-error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
