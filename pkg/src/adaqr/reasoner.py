"""Embedding-space query reasoner: a d -> d -> d tanh MLP trained with MSE.

The mapper computes ``w2 @ tanh(w1 @ e + b1) + b2``. Training runs over
shuffled mini-batches with Adam (default) or plain SGD; pretraining and
fine-tuning are the same routine with different configs.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionMismatchError, TrainingDivergedError
from .store import EmbeddingPairSet

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ADQM"
CHECKPOINT_VERSION = 1

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass(eq=False)
class MapperParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    output_tanh: bool = False
    # inputs are L2-normalized inside forward when set
    normalize_inputs: bool = False

    def __post_init__(self):
        d = self.b1.shape[0] if self.b1.ndim == 1 else -1
        shapes = {"w1": (d, d), "b1": (d,), "w2": (d, d), "b2": (d,)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionMismatchError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.b1.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "MapperParams":
        return MapperParams(*(a.copy() for a in self.arrays().values()), self.output_tanh, self.normalize_inputs)

    def max_abs_diff(self, other: "MapperParams") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.arrays().values(), other.arrays().values()))


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    stage: str = "pretrain"
    optimizer: str = "adam"
    normalize_inputs: bool = False
    normalize_targets: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def pretrain(cls, **kw) -> "TrainConfig":
        return cls(**{"learning_rate": 5e-4, "epochs": 50, "stage": "pretrain", **kw})

    @classmethod
    def finetune(cls, **kw) -> "TrainConfig":
        return cls(**{"learning_rate": 1e-5, "epochs": 3, "stage": "finetune", **kw})


@dataclass
class TrainReport:
    stage: str
    epoch_losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    elapsed_seconds: float = 0.0
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(dim: int, seed: int = 0, output_tanh: bool = False) -> MapperParams:
    """Uniform weights in +-sqrt(6 / 2d), zero biases."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    limit = math.sqrt(6.0 / (2 * dim))
    w1 = rng.uniform(-limit, limit, size=(dim, dim))
    w2 = rng.uniform(-limit, limit, size=(dim, dim))
    return MapperParams(w1, np.zeros(dim), w2, np.zeros(dim), output_tanh)


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _forward(params: MapperParams, x: np.ndarray):
    if params.normalize_inputs:
        x = _l2_normalize(x)
    h = np.tanh(x @ params.w1.T + params.b1)
    y = h @ params.w2.T + params.b2
    if params.output_tanh:
        y = np.tanh(y)
    return h, y


def forward(params: MapperParams, e) -> np.ndarray:
    """Map one embedding (1-D) or a batch of rows (2-D)."""
    x = np.asarray(e, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise DimensionMismatchError(f"input dim {x.shape[-1]} != mapper dim {params.dim}")
    return _forward(params, x)[1]


def mse_loss(predicted, targets) -> float:
    """Mean over pairs of the squared L2 distance."""
    p = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if p.size == 0 or t.size == 0:
        raise DataError("mse_loss needs at least one pair")
    if p.shape != t.shape:
        raise DimensionMismatchError(f"shape {p.shape} != {t.shape}")
    return float(np.sum((p - t) ** 2) / p.shape[0])


def _loss_and_grad(params: MapperParams, x: np.ndarray, t: np.ndarray):
    h, y = _forward(params, x)
    m = x.shape[0]
    diff = y - t
    loss = float(np.sum(diff**2) / m)
    dy = (2.0 / m) * diff
    if params.output_tanh:
        dy = dy * (1.0 - y**2)
    dw2 = dy.T @ h
    db2 = dy.sum(axis=0)
    dz1 = (dy @ params.w2) * (1.0 - h**2)
    if params.normalize_inputs:
        x = _l2_normalize(x)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return loss, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def gradient(params: MapperParams, batch: EmbeddingPairSet) -> dict[str, np.ndarray]:
    """Analytic gradient of ``mse_loss`` with respect to every parameter."""
    if batch.dim != params.dim:
        raise DimensionMismatchError(f"batch dim {batch.dim} != mapper dim {params.dim}")
    return _loss_and_grad(params, batch.originals, batch.reasoned)[1]


class _Adam:
    def __init__(self, params: MapperParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {n: np.zeros_like(a) for n, a in params.arrays().items()}
        self.v = {n: np.zeros_like(a) for n, a in params.arrays().items()}
        self.t = 0

    def step(self, params: MapperParams, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for n in PARAM_NAMES:
            g = grads[n]
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * g * g
            mhat = self.m[n] / bc1
            vhat = self.v[n] / bc2
            getattr(params, n)[...] -= c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


class _SGD:
    def __init__(self, params, cfg):
        self.cfg = cfg

    def step(self, params, grads):
        for n in PARAM_NAMES:
            getattr(params, n)[...] -= self.cfg.learning_rate * grads[n]


def train_stage(
    params: MapperParams, pairs: EmbeddingPairSet, config: TrainConfig
) -> tuple[MapperParams, TrainReport]:
    """Run one training stage; the input params are left untouched."""
    if len(pairs) == 0:
        raise DataError("no training pairs")
    if pairs.dim != params.dim:
        raise DimensionMismatchError(f"pair dim {pairs.dim} != mapper dim {params.dim}")
    x, t = pairs.originals, pairs.reasoned
    if config.normalize_targets:
        t = _l2_normalize(t)
    p = params.copy()
    p.normalize_inputs = config.normalize_inputs
    opt = _Adam(p, config) if config.optimizer == "adam" else _SGD(p, config)
    rng = np.random.default_rng(config.seed)
    n = len(pairs)
    report = TrainReport(config.stage)
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            # overflow surfaces as a non-finite loss below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = _loss_and_grad(p, x[idx], t[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"{config.stage}: non-finite loss at epoch {epoch + 1}, step {report.steps + 1}"
                )
            total += loss * idx.size
            opt.step(p, grads)
            report.steps += 1
        epoch_loss = total / n
        report.epoch_losses.append(epoch_loss)
        log.info("%s epoch %d/%d loss %.6f", config.stage, epoch + 1, config.epochs, epoch_loss)
    if not all(np.all(np.isfinite(a)) for a in p.arrays().values()):
        raise TrainingDivergedError(f"{config.stage}: parameters became non-finite")
    report.final_loss = report.epoch_losses[-1]
    report.elapsed_seconds = time.perf_counter() - start
    return p, report


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: MapperParams, path, metadata: dict | None = None) -> None:
    """Write the ``ADQM`` f32 checkpoint and a JSON metadata sidecar."""
    d = params.dim
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, d))
        for n in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(params, n), dtype="<f4").tobytes())
    meta = {"dim": d, "output_tanh": params.output_tanh, **(metadata or {}),
            "normalize_inputs": params.normalize_inputs}
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> MapperParams:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not an ADQM checkpoint")
    version, d = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    expected = 4 * (2 * d * d + 2 * d)
    if len(raw) - 12 != expected:
        raise DimensionMismatchError(f"{path}: payload size does not match dim {d}")
    flat = np.frombuffer(raw[12:], dtype="<f4").astype(np.float64)
    sizes = [d * d, d, d * d, d]
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    meta = {}
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return MapperParams(
        parts[0].reshape(d, d).copy(),
        parts[1].copy(),
        parts[2].reshape(d, d).copy(),
        parts[3].copy(),
        bool(meta.get("output_tanh", False)),
        bool(meta.get("normalize_inputs", False)),
    )


def load_checkpoint_metadata(path) -> dict:
    return json.loads(Path(str(path) + ".meta.json").read_text(encoding="utf-8"))
