"""Composite loss, Adam, step-decay schedule, checkpoints and the training loop."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig, TrainConfig, dump_config, parse_config
from .data import PointCloud
from .metrics import ConfusionMatrix
from .model import BAAFNet, Geometry, build_geometry
from .nn import batch_norms
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BAAF"
CHECKPOINT_VERSION = 1
CONFIG_KEY = "__config__"


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ loss / optimizer


def total_loss(ce: Tensor, aug_losses: list[Tensor], weights) -> Tensor:
    """Cross-entropy plus the weighted per-level augmentation losses."""
    weights = tuple(weights)
    if len(weights) != len(aug_losses):
        raise ConfigError(f"{len(weights)} weights for {len(aug_losses)} augmentation losses")
    terms = [ce] + [T.scale(l, w) for l, w in zip(aug_losses, weights) if w != 0]
    return T.add_n(terms) if len(terms) > 1 else ce


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.decay ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update; a missing gradient counts as zero."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = lr * math.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    eps_hat = state.eps * math.sqrt(1 - b2 ** t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (step_size * m / (np.sqrt(v) + eps_hat)).astype(p.data.dtype)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, model: BAAFNet, train_cfg: TrainConfig | None = None) -> None:
    """Write all parameters and batch-norm statistics plus the config (as a byte tensor)."""
    state = dict(model.state_dict())
    cfg_bytes = dump_config(model.cfg, train_cfg).encode("utf-8")
    state[CONFIG_KEY] = np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float32)
    write_tensors(path, state)


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is incompatible with {CHECKPOINT_VERSION}")
    offset = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + nlen].decode("utf-8")
            offset += nlen
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return out


def load_checkpoint(path) -> tuple[BAAFNet, TrainConfig]:
    state = read_tensors(path)
    if CONFIG_KEY not in state:
        raise CheckpointError(f"{path}: checkpoint carries no config")
    text = state.pop(CONFIG_KEY).astype(np.uint8).tobytes().decode("utf-8")
    model_cfg, train_cfg = parse_config(text)
    model = BAAFNet(model_cfg)
    model.load_state_dict(state)
    return model, train_cfg


# ------------------------------------------------------------------ loop


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    oa: float

    def line(self) -> str:
        return f"{self.epoch}, {self.lr:.6g}, {self.loss:.6f}, {self.oa:.6f}"


@dataclass
class TrainResult:
    model: BAAFNet
    history: list[EpochLog] = field(default_factory=list)
    steps: int = 0


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: list[PointCloud],
               checkpoint: str | Path | None = None, log_path: str | Path | None = None,
               model: BAAFNet | None = None) -> TrainResult:
    """Train on a fixed list of crops, one crop per forward pass, ``batch_size`` crops per step."""
    if not dataset:
        raise ValueError("empty dataset")
    model = model if model is not None else BAAFNet(model_cfg)
    params = model.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(train_cfg.seed)
    geo_rng = np.random.default_rng(train_cfg.seed + 7)
    geometries: list[Geometry] = [build_geometry(c.positions, model_cfg, geo_rng) for c in dataset]
    weights = model_cfg.loss_weights
    result = TrainResult(model)
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            order = rng.permutation(len(dataset))
            cm = ConfusionMatrix(model_cfg.num_classes)
            losses = []
            for start in range(0, len(order), train_cfg.batch_size):
                batch = order[start:start + train_cfg.batch_size]
                model.zero_grad()
                for i in batch:
                    crop = dataset[i]
                    out = model.forward(crop.positions, crop.colors, training=True, geometry=geometries[i])
                    ce = T.cross_entropy(out.logits, crop.labels)
                    loss = total_loss(ce, out.aug_losses, weights)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingDiverged(_divergence_report(epoch, result.steps, ce, out.aug_losses))
                    if len(batch) > 1:
                        loss = T.scale(loss, 1.0 / len(batch))
                    T.backward(loss)
                    losses.append(value)
                    cm.accumulate(crop.labels, out.logits.data.argmax(axis=1))
                adam_step(params, [p.grad for p in params], state, lr)
                result.steps += 1
            entry = EpochLog(epoch, lr, float(np.mean(losses)), cm.scores().oa)
            result.history.append(entry)
            log.info("epoch %s", entry.line())
            if log_fh:
                log_fh.write(entry.line() + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if train_cfg.recalibrate_bn:
        recalibrate_batch_norm(model, dataset, geometries)
    if checkpoint:
        save_checkpoint(checkpoint, model, train_cfg)
    return result


def recalibrate_batch_norm(model: BAAFNet, dataset: list[PointCloud], geometries: list[Geometry]) -> None:
    """Replace EMA running statistics by the exact average of batch statistics over ``dataset``.

    With momentum 0.99 a few hundred steps leave the EMA far behind the
    weights; this pass makes eval mode reproduce training-mode normalization.
    """
    layers = list(batch_norms(model))
    for bn in layers:
        bn.running_mean = np.zeros_like(bn.running_mean)
        bn.running_var = np.zeros_like(bn.running_var)
        bn.cumulative_count = 0
    try:
        with T.no_grad():
            for crop, geo in zip(dataset, geometries):
                model.forward(crop.positions, crop.colors, training=True, geometry=geo)
    finally:
        for bn in layers:
            bn.cumulative_count = None


def _divergence_report(epoch, step, ce, aug_losses) -> str:
    aug = ", ".join(f"{l.item():.4g}" for l in aug_losses)
    return f"non-finite loss at epoch {epoch}, step {step}: ce={ce.item():.4g}, aug=[{aug}]"
