"""Rectified-flow training between problem and solution images.

The model learns ``v = x1 - x0`` at points ``x_t = (1 - t) x0 + t x1`` with
``t ~ U(0, 1)`` drawn independently per sample.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tacit import autodiff as ad
from tacit.analysis import l2_distance
from tacit.autodiff import AdamState, Tape, Tensor
from tacit.dataset import heldout_pairs, iter_epoch
from tacit.imageio import to_float
from tacit.maze import PairSample
from tacit.model import DiT, ModelConfig, pos_encoding_2d
from tacit.sampler import euler_sample

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(Exception):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """``(1 - t) x0 + t x1``; ``t`` is a scalar or one value per leading batch entry."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=x0.dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return (1 - t) * x0 + t * x1


def velocity_target(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    return x1 - x0


def batch_arrays(samples: Sequence[PairSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples as float32 ``(B, 3, R, R)`` problem and solution images."""
    x0 = to_float(np.stack([s.input for s in samples]))
    x1 = to_float(np.stack([s.target for s in samples]))
    return x0, x1


def flow_loss(model: DiT, params: dict[str, Tensor], x0, x1, t) -> Tensor:
    xt = interpolate(x0, x1, t)
    return ad.mse_loss(model.forward(xt, t, params), velocity_target(x0, x1))


def compute_grads(model: DiT, x0, x1, t) -> tuple[float, dict[str, np.ndarray]]:
    leaves = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    with Tape() as tape:
        loss = flow_loss(model, leaves, x0, x1, t)
    grads = tape.backward(loss)
    return float(loss.data), {k: grads[leaf] for k, leaf in leaves.items()}


def train_step(
    model: DiT, state: AdamState, x0: np.ndarray, x1: np.ndarray, rng: np.random.Generator, step: int | None = None
) -> float:
    """One Adam update on a minibatch; parameters and ``state`` change in place."""
    t = rng.random(x0.shape[0])
    loss, grads = compute_grads(model, x0, x1, t)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss} at step {step if step is not None else state.step}, t={t}")
    ad.adam_step(model.params, grads, state)
    return loss


@dataclass
class TrainConfig:
    data_dir: str
    out_dir: str
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 100
    checkpoint_interval: int = 5
    seed: int = 0
    heldout_count: int = 256
    heldout_sizes: tuple[int, ...] = (11, 15, 21, 25, 31)
    eval_steps: int = 10
    workers: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["heldout_sizes"] = list(self.heldout_sizes)
        return d


# --- loss log --------------------------------------------------------------------


@dataclass
class LossLog:
    rows: list[tuple[int, float, float | None]] = field(default_factory=list)

    def append(self, epoch: int, loss: float, heldout_l2: float | None = None) -> None:
        if self.rows and epoch <= self.rows[-1][0]:
            raise ValueError(f"epoch {epoch} not after {self.rows[-1][0]}")
        self.rows.append((epoch, loss, heldout_l2))

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    @property
    def heldout(self) -> list[tuple[int, float]]:
        return [(r[0], r[2]) for r in self.rows if r[2] is not None]

    def truncate(self, epoch: int) -> None:
        self.rows = [r for r in self.rows if r[0] <= epoch]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "heldout_l2"])
            for e, loss, l2 in self.rows:
                w.writerow([e, repr(loss), "" if l2 is None else repr(l2)])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "LossLog":
        out = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                l2 = row["heldout_l2"]
                out.append(int(row["epoch"]), float(row["loss"]), float(l2) if l2 else None)
        return out


# --- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"TCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    epoch: int = 0
    running_loss: float = 0.0


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)) + raw)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, n).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = math.prod(shape)
    arr = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    return name, arr


def save_checkpoint(
    path: str | os.PathLike,
    config: ModelConfig,
    params: dict[str, np.ndarray],
    adam: AdamState | None = None,
    epoch: int = 0,
    running_loss: float = 0.0,
) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(cfg)) + cfg)
    buf.write(struct.pack("<Id", epoch, running_loss))
    names = sorted(params)
    buf.write(struct.pack("<I", len(names) + 1))
    for name in names:
        _write_tensor(buf, name, params[name])
    _write_tensor(buf, "pos_embed", pos_encoding_2d(config.grid, config.hidden))
    if adam is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01" + struct.pack("<Qdddd", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        for name in names:
            zero = np.zeros_like(params[name])
            _write_tensor(buf, name, adam.m.get(name, zero))
            _write_tensor(buf, name, adam.v.get(name, zero))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; raises :class:`ConfigMismatchError` if ``config`` is given and differs."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a TCKP checkpoint")
        version, n = struct.unpack("<HI", _read_exact(f, 6))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        stored = ModelConfig.from_dict(json.loads(_read_exact(f, n)))
        if config is not None and stored != config:
            raise ConfigMismatchError(f"{path}: checkpoint config {stored} != requested {config}")
        epoch, running = struct.unpack("<Id", _read_exact(f, 12))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_tensor(f)
            if name in params:
                raise CheckpointError(f"{path}: duplicate tensor {name}")
            params[name] = arr
        pos = params.pop("pos_embed", None)
        if pos is None or not np.array_equal(pos, pos_encoding_2d(stored.grid, stored.hidden)):
            raise CheckpointError(f"{path}: positional table missing or inconsistent with config")
        adam = None
        if _read_exact(f, 1) == b"\x01":
            step, lr, b1, b2, eps = struct.unpack("<Qdddd", _read_exact(f, 40))
            adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
            for _ in range(len(params)):
                name, m = _read_tensor(f)
                _, v = _read_tensor(f)
                adam.m[name], adam.v[name] = m, v
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    try:
        DiT(stored, params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return Checkpoint(stored, params, adam, epoch, running)


def load_model(path: str | os.PathLike, config: ModelConfig | None = None) -> DiT:
    ck = load_checkpoint(path, config)
    return DiT(ck.config, ck.params)


# --- evaluation / loop -------------------------------------------------------------


def heldout_l2(model: DiT, samples: Sequence[PairSample], steps: int = 10, chunk: int = 64) -> float:
    """Mean over samples of the MSE between the sampled solution and the ground truth."""
    total = 0.0
    for i in range(0, len(samples), chunk):
        x0, x1 = batch_arrays(samples[i : i + chunk])
        pred, _ = euler_sample(x0, model, steps)
        total += sum(l2_distance(p, g) for p, g in zip(pred, x1))
    return total / len(samples)


def train(
    config: TrainConfig, resume: str | os.PathLike | None = None, heldout: Sequence[PairSample] | None = None
) -> LossLog:
    """Epoch loop with periodic checkpoints and held-out evaluation.

    Writes ``ckpt_epoch_%03d.tckp``, ``latest.tckp`` and ``loss_log.csv`` to
    ``config.out_dir``. With ``resume`` the loop continues after the epoch
    stored in that checkpoint, and the existing log is kept up to that epoch.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"
    if resume is not None:
        ck = load_checkpoint(resume, config.model)
        model = DiT(ck.config, ck.params)
        state = ck.adam or AdamState(lr=config.lr)
        start = ck.epoch
        losslog = LossLog.read_csv(log_path) if log_path.exists() else LossLog()
        losslog.truncate(start)
    else:
        model = DiT(config.model, seed=config.seed)
        state = AdamState(lr=config.lr)
        start = 0
        losslog = LossLog()
    if heldout is None:
        heldout = heldout_pairs(config.heldout_count, config.heldout_sizes, config.model.resolution)

    for epoch in range(start + 1, config.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        total, seen = 0.0, 0
        for batch in iter_epoch(config.data_dir, config.batch_size, epoch, config.seed, config.workers):
            x0, x1 = batch_arrays(batch)
            loss = train_step(model, state, x0, x1, rng)
            total += loss * len(batch)
            seen += len(batch)
        epoch_loss = total / max(seen, 1)
        l2 = None
        if epoch % config.checkpoint_interval == 0 or epoch == config.epochs:
            l2 = heldout_l2(model, heldout, config.eval_steps)
            save_checkpoint(out / f"ckpt_epoch_{epoch:03d}.tckp", model.config, model.params, state, epoch, epoch_loss)
            save_checkpoint(out / "latest.tckp", model.config, model.params, state, epoch, epoch_loss)
        losslog.append(epoch, epoch_loss, l2)
        losslog.write_csv(log_path)
        log.info(
            "epoch %d loss %.3e%s (%.1fs)",
            epoch,
            epoch_loss,
            "" if l2 is None else f" heldout_l2 {l2:.4f}",
            time.perf_counter() - t0,
        )
    return losslog
