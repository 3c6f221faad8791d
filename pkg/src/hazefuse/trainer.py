"""Two-stage training: baseline first, then fusion finetune from zero-convs.

Stage 1 optimizes the backbone alone. Stage 2 reloads a stage-1 checkpoint,
attaches a freshly built fusion branch (whose zero-convs guarantee the
step-0 forward equals the stage-1 model), and finetunes either everything or
just the fusion branch. Learning rate follows cosine annealing with warm
restarts down to the configured floor. Runs are bit-reproducible from
(seed, config, data).
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .dehazenet import build_net_params, forward_merged
from .errors import (
    ConfigError,
    ContractError,
    CrcMismatchError,
    FormatError,
    NonFiniteError,
    ParamMismatchError,
    TrainingDivergedError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .fusion import build_fusion_params
from .params import ParamSet
from .tensor import Tape, Tensor, absval, backward, square, tmean

_CKPT_MAGIC = b"HZC1"
_CKPT_VERSION = 1


@dataclass
class TrainConfig:
    stage: int = 1
    lr_max: float = 4e-4
    lr_min: float = 1e-8
    cycle_steps: int = 150
    cycle_mult: int = 1
    total_steps: int = 300
    batch_size: int = 8
    seed: int = 0
    freeze_backbone_in_stage2: bool = False
    loss: str = "l1"
    grad_accum: int = 1

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"need lr_min < lr_max, got {self.lr_min} >= {self.lr_max}")
        if self.cycle_steps < 1:
            raise ConfigError(f"cycle_steps must be >= 1, got {self.cycle_steps}")
        if self.cycle_mult < 1:
            raise ConfigError(f"cycle_mult must be >= 1, got {self.cycle_mult}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.loss not in ("l1", "l2"):
            raise ConfigError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if self.grad_accum < 1 or self.batch_size % self.grad_accum:
            raise ConfigError(
                f"grad_accum must divide batch_size, got {self.grad_accum} vs {self.batch_size}"
            )


def lr_at(step, cfg):
    """Cosine annealing with warm restarts.

    A cycle of length L covers in-cycle steps s = 0..L inclusive, reaching
    lr_max at s=0 and exactly lr_min at s=L; the restart is the following
    step, and the cycle length is multiplied by cycle_mult after each
    restart.
    """
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    L = cfg.cycle_steps
    s = step
    while s > L:
        s -= L + 1
        L *= cfg.cycle_mult
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * s / L))


class Adam:
    """Adam with bias correction; state ordered lexicographically by name."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}
        for name, tensor in params.items():
            if params.trainable(name):
                self.m[name] = np.zeros_like(tensor.data)
                self.v[name] = np.zeros_like(tensor.data)

    def step(self, params, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(self.m):
            tensor = params[name]
            g = tensor.grad
            if g is None:
                continue  # unreachable leaf this step: moments decay is skipped too
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor.data = tensor.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _loss_fn(out, target, kind):
    diff = out - target
    if kind == "l1":
        return tmean(absval(diff))
    return tmean(square(diff))


def _index_stream(n, rng):
    while True:
        for i in rng.permutation(n):
            yield int(i)


@dataclass
class TrainResult:
    checkpoint: "Checkpoint"
    loss_log: list  # rows of (step, stage, lr, loss)


def _run_loop(params, dataset, train_cfg, net_cfg, stage, fusion_cfg=None,
              depth_table=None, train_indices=None, start_step=0):
    opt = Adam(params)
    rng = np.random.default_rng(train_cfg.seed)
    indices = list(train_indices) if train_indices is not None else list(range(dataset.n_pairs))
    stream = _index_stream(len(indices), rng)
    micro = train_cfg.batch_size // train_cfg.grad_accum
    log = []

    for step in range(train_cfg.total_steps):
        lr = lr_at(step, train_cfg)
        batch = [indices[next(stream)] for _ in range(train_cfg.batch_size)]
        params.zero_grad()
        total_loss = 0.0
        try:
            for chunk_start in range(0, train_cfg.batch_size, micro):
                chunk = batch[chunk_start : chunk_start + micro]
                hazy, clear = dataset.batch(chunk)
                depth = None
                if fusion_cfg is not None:
                    depth = Tensor(depth_table[dataset.scene_indices_of(chunk)])
                with Tape():
                    out = forward_merged(hazy, params, net_cfg,
                                         fusion_cfg=fusion_cfg, depth=depth)
                    loss = _loss_fn(out, clear, train_cfg.loss)
                    scaled = loss * (1.0 / train_cfg.grad_accum) if train_cfg.grad_accum > 1 else loss
                    backward(scaled)
                total_loss += loss.item() / train_cfg.grad_accum
        except NonFiniteError as exc:
            raise TrainingDivergedError(
                f"non-finite loss at step {step}, stage {stage}, batch ids {batch}: {exc}"
            ) from exc
        opt.step(params, lr)
        log.append((start_step + step, stage, lr, total_loss))

    ckpt = Checkpoint.from_params(params, step=start_step + train_cfg.total_steps, stage=stage)
    return TrainResult(ckpt, log)


def merged_params(net_params, fusion_params=None):
    merged = ParamSet()
    merged.merge(net_params, "net.")
    if fusion_params is not None:
        merged.merge(fusion_params, "fusion.")
    return merged


def _load_net_entries(params, ckpt):
    """Assign a stage-1 checkpoint's net.* values into a merged ParamSet."""
    values = ckpt.to_float64()
    net_names = {n for n, _ in params.items() if n.startswith("net.")}
    missing = net_names - set(values)
    unexpected = set(values) - net_names
    if missing or unexpected:
        raise ParamMismatchError(missing, unexpected)
    for name, arr in values.items():
        params.assign(name, arr)


def train_stage1(dataset, net_cfg, train_cfg, train_indices=None):
    """Optimize the baseline backbone; fusion stays disabled."""
    params = merged_params(build_net_params(net_cfg, seed=train_cfg.seed))
    return _run_loop(params, dataset, train_cfg, net_cfg, stage=1,
                     train_indices=train_indices)


def continue_stage1(stage1_ckpt, dataset, net_cfg, train_cfg, train_indices=None):
    """Keep training the baseline from a checkpoint (equal-budget control)."""
    params = merged_params(build_net_params(net_cfg, seed=train_cfg.seed))
    _load_net_entries(params, stage1_ckpt)
    return _run_loop(params, dataset, train_cfg, net_cfg, stage=1,
                     train_indices=train_indices, start_step=stage1_ckpt.step)


def train_stage2(stage1_ckpt, depth_table, dataset, net_cfg, fusion_cfg,
                 train_cfg, train_indices=None):
    """Finetune with the fusion branch enabled from its zero-conv state.

    depth_table: per-scene depth features, array S x C_d x H' x W'. With
    freeze_backbone_in_stage2 only the fusion branch trains.
    """
    net_params = build_net_params(net_cfg, seed=train_cfg.seed)
    fusion_params = build_fusion_params(fusion_cfg, seed=train_cfg.seed)
    params = merged_params(net_params, fusion_params)
    _load_net_entries(params, stage1_ckpt)
    if train_cfg.freeze_backbone_in_stage2:
        params.set_trainable(False, prefix="net.")
    return _run_loop(params, dataset, train_cfg, net_cfg, stage=2,
                     fusion_cfg=fusion_cfg, depth_table=depth_table,
                     train_indices=train_indices, start_step=stage1_ckpt.step)


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "stage", "lr", "loss"])
        for step, stage, lr, loss in rows:
            writer.writerow([step, stage, repr(lr), repr(loss)])


# ---------------------------------------------------------------------------
# HZC checkpoints: magic, version u32, step u64, stage u8, f32 tensor table,
# trailing CRC32 of all preceding bytes.


@dataclass
class Checkpoint:
    step: int
    stage: int
    values: dict = field(default_factory=dict)  # name -> float32 ndarray

    @classmethod
    def from_params(cls, params, step, stage):
        values = {name: t.data.astype(np.float32) for name, t in params.items()}
        return cls(step=step, stage=stage, values=values)

    def to_float64(self):
        return {name: arr.astype(np.float64) for name, arr in self.values.items()}


def save_checkpoint(path, ckpt):
    body = bytearray()
    body += _CKPT_MAGIC
    body += struct.pack("<IQB", _CKPT_VERSION, ckpt.step, ckpt.stage)
    body += struct.pack("<I", len(ckpt.values))
    for name in sorted(ckpt.values):
        arr = np.ascontiguousarray(ckpt.values[name], dtype="<f4")
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<BB", 0, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as f:
        f.write(bytes(body))
        f.write(struct.pack("<I", crc))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 25:
        raise TruncatedCheckpointError(
            f"checkpoint is {len(blob)} bytes, below the 25-byte minimum"
        )
    body, crc_bytes = blob[:-4], blob[-4:]
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    if zlib.crc32(body) != struct.unpack("<I", crc_bytes)[0]:
        raise CrcMismatchError("checkpoint CRC32 mismatch")
    version, step, stage = struct.unpack_from("<IQB", body, 4)
    if version != _CKPT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, supported {_CKPT_VERSION}"
        )
    (count,) = struct.unpack_from("<I", body, 17)
    offset = 21
    values = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset : offset + name_len].decode("utf-8")
            offset += name_len
            dtype_tag, ndim = struct.unpack_from("<BB", body, offset)
            offset += 2
            if dtype_tag != 0:
                raise FormatError(f"checkpoint tensors must be f32, got tag {dtype_tag}",
                                  offset=offset - 2)
            dims = struct.unpack_from(f"<{ndim}I", body, offset)
            offset += 4 * ndim
            n_elems = 1
            for d in dims:
                n_elems *= d
            payload = body[offset : offset + 4 * n_elems]
            if len(payload) != 4 * n_elems:
                raise TruncatedCheckpointError(
                    f"tensor {name!r} payload truncated at byte {offset}"
                )
            offset += 4 * n_elems
            values[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
        except struct.error as exc:
            raise TruncatedCheckpointError(
                f"checkpoint table truncated at byte {offset}"
            ) from exc
    if offset != len(body):
        raise FormatError(f"{len(body) - offset} trailing bytes after tensor table",
                          offset=offset)
    return Checkpoint(step=step, stage=stage, values=values)


def load_into_params(params, ckpt):
    """Strict-name load; mismatches raise with missing/unexpected lists."""
    params.load_values(ckpt.to_float64())


def params_for_checkpoint(ckpt, net_cfg, fusion_cfg=None):
    """Rebuild the merged ParamSet a checkpoint was saved from."""
    fusion_params = build_fusion_params(fusion_cfg) if fusion_cfg is not None else None
    params = merged_params(build_net_params(net_cfg), fusion_params)
    load_into_params(params, ckpt)
    return params
