import dataclasses
import math

import numpy as np
import pytest

from hazefuse.data import build_dataset, depth_feature_table, split_indices
from hazefuse.dehazenet import NetConfig, build_net_params
from hazefuse.errors import (
    ConfigError,
    CrcMismatchError,
    ParamMismatchError,
    TrainingDivergedError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from hazefuse.fusion import FusionConfig
from hazefuse.metrics import evaluate_pairs
from hazefuse.trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    lr_at,
    merged_params,
    params_for_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
    write_loss_csv,
)

NET = NetConfig(base_channels=4, levels=2, blocks_per_level=1)
FUS = FusionConfig(channels=4, depth_channels=4, heads=2)


@pytest.fixture(scope="module")
def dataset():
    return build_dataset(8, 16, 16, scene_seed=500, betas=(0.05, 0.15), A=0.9)


@pytest.fixture(scope="module")
def depth_table(dataset):
    return depth_feature_table(dataset, FUS, provider="oracle")


def tc(**kw):
    base = dict(stage=1, lr_max=1e-3, cycle_steps=50, total_steps=10,
                batch_size=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_restart_hits_lr_max(self):
        cfg = tc(lr_max=4e-4, cycle_steps=10)
        assert lr_at(0, cfg) == 4e-4
        assert lr_at(11, cfg) == 4e-4  # first step of the second cycle

    def test_cycle_end_hits_lr_min_exactly(self):
        cfg = tc(lr_max=4e-4, cycle_steps=10)
        assert lr_at(10, cfg) == 1e-8
        assert lr_at(21, cfg) == 1e-8

    def test_midpoint_closed_form(self):
        cfg = tc(lr_max=4e-4, cycle_steps=10)
        want = 1e-8 + 0.5 * (4e-4 - 1e-8) * (1 + math.cos(math.pi * 5 / 10))
        assert abs(lr_at(5, cfg) - want) < 1e-12
        assert abs(want - 2.000050e-4) < 1e-9

    def test_monotone_decrease_within_cycle(self):
        cfg = tc(cycle_steps=20)
        lrs = [lr_at(s, cfg) for s in range(21)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_continuity_within_cycle(self):
        cfg = tc(cycle_steps=1000)
        gaps = [abs(lr_at(s + 1, cfg) - lr_at(s, cfg)) for s in range(0, 1000, 97)]
        assert max(gaps) < (cfg.lr_max - cfg.lr_min) * math.pi / 1000

    def test_cycle_mult_stretches_cycles(self):
        cfg = tc(cycle_steps=4, cycle_mult=2)
        # cycle 0: steps 0..4 (L=4); cycle 1: steps 5..13 (L=8)
        assert lr_at(4, cfg) == cfg.lr_min
        assert lr_at(5, cfg) == cfg.lr_max
        assert lr_at(13, cfg) == cfg.lr_min
        assert lr_at(14, cfg) == cfg.lr_max

    def test_negative_step_rejected(self):
        from hazefuse.errors import ContractError

        with pytest.raises(ContractError):
            lr_at(-1, tc())


class TestTrainingLoop:
    def test_zero_lr_leaves_params_unchanged(self, dataset):
        cfg = dataclasses.replace(tc(total_steps=3), lr_max=1e-30, lr_min=1e-32)
        result = train_stage1(dataset, NET, cfg)
        fresh = merged_params(build_net_params(NET, seed=cfg.seed))
        for name, arr in result.checkpoint.values.items():
            np.testing.assert_allclose(arr, fresh[name].data.astype(np.float32),
                                       atol=1e-25)

    def test_trivial_sample_zero_loss_at_step_zero(self):
        ds = build_dataset(1, 16, 16, scene_seed=9, betas=(1e-12,), A=0.9)
        # beta ~ 0 makes hazy == clear to machine precision; zero head + global
        # residual makes output == input, so L1 loss starts at ~0.
        params = merged_params(build_net_params(NET, seed=0))
        params["net.head.w"].data[:] = 0.0
        params["net.head.b"].data[:] = 0.0
        ckpt = Checkpoint.from_params(params, 0, 1)
        from hazefuse.trainer import continue_stage1

        result = continue_stage1(ckpt, ds, NET, tc(total_steps=1))
        assert result.loss_log[0][3] < 1e-10

    def test_loss_decreases_median_of_three_seeds(self, dataset):
        drops = []
        for seed in range(3):
            result = train_stage1(dataset, NET, tc(total_steps=40, seed=seed))
            first = result.loss_log[0][3]
            last = np.mean([r[3] for r in result.loss_log[-5:]])
            drops.append(last < first)
        assert np.median(drops) == 1.0

    def test_determinism_identical_checkpoints(self, dataset, tmp_path):
        for run in range(2):
            result = train_stage1(dataset, NET, tc(total_steps=5, seed=3))
            save_checkpoint(tmp_path / f"run{run}.hzc", result.checkpoint)
        assert (tmp_path / "run0.hzc").read_bytes() == (tmp_path / "run1.hzc").read_bytes()

    def test_grad_accumulation_matches_full_batch(self, dataset):
        full = train_stage1(dataset, NET, tc(total_steps=3, grad_accum=1))
        accum = train_stage1(dataset, NET, tc(total_steps=3, grad_accum=2))
        for name in full.checkpoint.values:
            np.testing.assert_allclose(full.checkpoint.values[name],
                                       accum.checkpoint.values[name],
                                       atol=1e-6, rtol=1e-6)

    def test_divergence_aborts_with_batch_ids(self, dataset):
        from hazefuse.trainer import continue_stage1

        params = merged_params(build_net_params(NET, seed=0))
        for name, t in params.items():
            if name.endswith(".w"):
                t.data[:] = 1e35  # ten 1e35-gain convs overflow f64 mid-forward
        poisoned = Checkpoint.from_params(params, 0, 1)
        with np.errstate(over="ignore"), pytest.raises(TrainingDivergedError) as err:
            continue_stage1(poisoned, dataset, NET, tc(total_steps=1))
        assert "batch ids" in str(err.value) and "step 0" in str(err.value)

    def test_loss_csv_round_trip(self, dataset, tmp_path):
        result = train_stage1(dataset, NET, tc(total_steps=2))
        path = tmp_path / "loss.csv"
        write_loss_csv(path, result.loss_log)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,stage,lr,loss"
        assert len(lines) == 3


@pytest.fixture(scope="module")
def stage1(dataset):
    return train_stage1(dataset, NET, tc(total_steps=20))


class TestStage2:
    def test_step0_eval_equals_stage1_eval(self, dataset, depth_table, stage1):
        result = train_stage2(stage1.checkpoint, depth_table, dataset, NET, FUS,
                              tc(stage=2, total_steps=0))
        idx = list(range(dataset.n_pairs))
        base_params = params_for_checkpoint(stage1.checkpoint, NET)
        base = evaluate_pairs(base_params, NET, dataset, idx)
        fused_params = params_for_checkpoint(result.checkpoint, NET, FUS)
        fused = evaluate_pairs(fused_params, NET, dataset, idx,
                               fusion_cfg=FUS, depth_table=depth_table)
        assert base.psnr == fused.psnr
        assert base.psnr_y == fused.psnr_y
        assert base.ssim == fused.ssim

    def test_frozen_backbone_bit_identical(self, dataset, depth_table, stage1):
        cfg = tc(stage=2, total_steps=5, freeze_backbone_in_stage2=True)
        result = train_stage2(stage1.checkpoint, depth_table, dataset, NET, FUS, cfg)
        for name, arr in stage1.checkpoint.values.items():
            np.testing.assert_array_equal(result.checkpoint.values[name], arr)

    def test_unfrozen_backbone_changes(self, dataset, depth_table, stage1):
        cfg = tc(stage=2, total_steps=5)
        result = train_stage2(stage1.checkpoint, depth_table, dataset, NET, FUS, cfg)
        changed = any(
            not np.array_equal(result.checkpoint.values[name], arr)
            for name, arr in stage1.checkpoint.values.items()
        )
        assert changed

    def test_fusion_params_start_at_zero_zc(self, dataset, depth_table, stage1):
        result = train_stage2(stage1.checkpoint, depth_table, dataset, NET, FUS,
                              tc(stage=2, total_steps=0))
        assert np.all(result.checkpoint.values["fusion.zc.pre.w"] == 0.0)
        assert np.all(result.checkpoint.values["fusion.zc.post.w"] == 0.0)

    def test_checkpoint_name_mismatch_is_structured(self, dataset, depth_table):
        bogus = Checkpoint(step=0, stage=1,
                           values={"net.nonexistent": np.zeros(1, dtype=np.float32)})
        with pytest.raises(ParamMismatchError) as err:
            train_stage2(bogus, depth_table, dataset, NET, FUS, tc(stage=2, total_steps=0))
        assert err.value.unexpected == ["net.nonexistent"]
        assert "net.stem.w" in err.value.missing


class TestCheckpointFormat:
    def test_empty_checkpoint_is_25_bytes(self, tmp_path):
        path = tmp_path / "empty.hzc"
        save_checkpoint(path, Checkpoint(step=0, stage=1, values={}))
        assert path.stat().st_size == 4 + 4 + 8 + 1 + 4 + 4 == 25

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        ckpt = Checkpoint(step=7, stage=2, values={
            "a.w": rng.standard_normal((2, 3)).astype(np.float32),
            "b.b": rng.standard_normal(4).astype(np.float32),
        })
        p1, p2 = tmp_path / "a.hzc", tmp_path / "b.hzc"
        save_checkpoint(p1, ckpt)
        back = load_checkpoint(p1)
        assert back.step == 7 and back.stage == 2
        for name in ckpt.values:
            np.testing.assert_array_equal(back.values[name], ckpt.values[name])
        save_checkpoint(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_payload_byte_flip_fails_crc(self, tmp_path):
        path = tmp_path / "c.hzc"
        save_checkpoint(path, Checkpoint(step=0, stage=1, values={
            "w": np.ones(4, dtype=np.float32)}))
        blob = bytearray(path.read_bytes())
        blob[-10] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CrcMismatchError):
            load_checkpoint(path)

    def test_version_mismatch_distinct_error(self, tmp_path):
        import struct
        import zlib

        path = tmp_path / "v.hzc"
        body = b"HZC1" + struct.pack("<IQB", 99, 0, 1) + struct.pack("<I", 0)
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncation_distinct_error(self, tmp_path):
        path = tmp_path / "t.hzc"
        save_checkpoint(path, Checkpoint(step=0, stage=1, values={}))
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stage=3)
    with pytest.raises(ConfigError):
        TrainConfig(lr_max=1e-9)  # below lr_min
    with pytest.raises(ConfigError):
        TrainConfig(cycle_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss="huber")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=4, grad_accum=3)


def test_split_indices(dataset):
    train, val = split_indices(dataset, 2)
    assert len(train) == 6 * 2 and len(val) == 2 * 2
    assert set(train).isdisjoint(val)
    assert max(train) < min(val)
