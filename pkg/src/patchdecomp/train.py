"""MAE training with Adam, early stopping and JSON checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import PatchLayout, WindowBatch, WindowSample, stack_windows
from .model import ModelConfig, ModelParams, init_params, predict_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "patchdecomp-checkpoint"
CHECKPOINT_VERSION = 1

__all__ = [
    "Adam",
    "CheckpointError",
    "LayoutMismatchError",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "evaluate_mae",
    "load_checkpoint",
    "mae_loss",
    "save_checkpoint",
    "train",
]


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class LayoutMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 1
    windows_batch_size: int = 64
    seed: int = 0
    grad_clip: float | None = None
    eval_batch_size: int = 1024

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 1 or self.max_epochs < 1 or self.windows_batch_size < 1:
            raise ValueError("patience, max_epochs and windows_batch_size must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")


@dataclass
class TrainReport:
    train_mae: list[float] = field(default_factory=list)
    valid_mae: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_mae: float = math.inf
    stopped_early: bool = False
    wall_clock_seconds: float = 0.0

    def metrics(self) -> dict:
        """Everything except wall-clock time, for reproducibility checks."""
        d = asdict(self)
        d.pop("wall_clock_seconds")
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def mae_loss(y_hat, y):
    """Mean absolute error; differentiable when ``y_hat`` is a Tensor."""
    if isinstance(y_hat, nx.Tensor):
        if y_hat.shape != np.shape(y):
            raise nx.DimensionError(f"mae_loss shapes differ: {y_hat.shape} vs {np.shape(y)}")
        return nx.abs_(y_hat - y).mean()
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"mae_loss shapes differ: {y_hat.shape} vs {y.shape}")
    return float(np.mean(np.abs(y_hat - y)))


class Adam:
    def __init__(self, params: Sequence[nx.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params: Sequence[nx.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def _batch(windows) -> WindowBatch:
    return windows if isinstance(windows, WindowBatch) else stack_windows(list(windows))


def predict_batched(params: ModelParams, batch: WindowBatch, layout: PatchLayout | None = None, chunk: int = 1024) -> np.ndarray:
    """Eval-mode predictions ``(B, H)``, computed in chunks."""
    layout = layout or params.layout
    out = []
    with nx.no_grad():
        for lo in range(0, len(batch), chunk):
            y, _, _ = predict_tensor(batch.select(slice(lo, lo + chunk)), layout, params)
            out.append(y.data)
    return np.concatenate(out, axis=0)


def evaluate_mae(params: ModelParams, windows, layout: PatchLayout | None = None, chunk: int = 1024) -> float:
    batch = _batch(windows)
    return mae_loss(predict_batched(params, batch, layout, chunk), batch.y_future)


def train(
    params: ModelParams | ModelConfig,
    train_windows: Sequence[WindowSample] | WindowBatch,
    valid_windows: Sequence[WindowSample] | WindowBatch,
    config: TrainConfig = TrainConfig(),
    layout: PatchLayout | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Fit with Adam on shuffled window mini-batches, early-stopping on valid MAE.

    Returns a copy of the parameters from the best validation epoch.
    """
    start = time.perf_counter()
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    if isinstance(params, ModelConfig):
        params = init_params(params, np.random.default_rng(seeds[0]))
    layout = layout or params.layout
    train_b, valid_b = _batch(train_windows), _batch(valid_windows)
    if len(train_b) == 0 or len(valid_b) == 0:
        raise ValueError("train and valid windows must be non-empty")
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    tensors = list(params)
    opt = Adam(tensors, lr=config.lr)
    report = TrainReport()
    best_state = params.state()
    since_best = 0
    bs = config.windows_batch_size

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(train_b))
        total, count = 0.0, 0
        for lo in range(0, len(order), bs):
            mb = train_b.select(order[lo:lo + bs])
            opt.zero_grad()
            try:
                y_hat, _, _ = predict_tensor(mb, layout, params, True, dropout_rng)
                loss = mae_loss(y_hat, mb.y_future)
            except nx.NumericsError as exc:
                raise TrainingDivergedError(f"non-finite forward pass at epoch {epoch}, batch {lo // bs}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"loss became {loss.item()} at epoch {epoch}, batch {lo // bs}")
            nx.backward(loss)
            if config.grad_clip is not None:
                clip_grad_norm(tensors, config.grad_clip)
            opt.step()
            total += loss.item() * len(mb)
            count += len(mb)
        try:
            valid = evaluate_mae(params, valid_b, layout, config.eval_batch_size)
        except nx.NumericsError as exc:
            raise TrainingDivergedError(f"non-finite validation pass at epoch {epoch}: {exc}") from exc
        report.train_mae.append(total / count)
        report.valid_mae.append(valid)
        logger.info("epoch %d train %.5f valid %.5f", epoch, total / count, valid)
        if valid < report.best_valid_mae:
            report.best_valid_mae = valid
            report.best_epoch = epoch
            best_state = params.state()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = True
                break

    best = params.copy()
    best.load_state(best_state)
    report.wall_clock_seconds = time.perf_counter() - start
    return best, report


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str | Path, train_config: TrainConfig | None = None, extra: dict | None = None) -> None:
    """JSON container; float ``repr`` round-trips every tensor bit-exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layout": params.layout.dims(),
        "model_config": params.config.to_dict(),
        "train_config": asdict(train_config) if train_config is not None else None,
        "extra": extra or {},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for name, t in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")))


def load_checkpoint(
    path: str | Path, layout: PatchLayout | None = None
) -> tuple[ModelParams, TrainConfig | None, dict]:
    """Read a checkpoint; with ``layout`` given, its dimensions must match."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from None
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a patchdecomp checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    try:
        mc = dict(payload["model_config"])
        if mc.get("variable_names") is not None:
            mc["variable_names"] = tuple(mc["variable_names"])
        config = ModelConfig(**mc)
        tc = payload.get("train_config")
        train_config = TrainConfig(**tc) if tc is not None else None
        raw = payload["params"]
        tensors = OrderedDict(
            (name, nx.Tensor(np.array(v["data"], dtype=np.float64).reshape(v["shape"]), requires_grad=True))
            for name, v in raw.items()
        )
        params = ModelParams(config, tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if params.layout.dims() != payload.get("layout"):
        raise CheckpointError(f"{path}: stored layout {payload.get('layout')} disagrees with its config")
    if layout is not None and layout.dims() != params.layout.dims():
        raise LayoutMismatchError(f"checkpoint layout {params.layout.dims()} != requested {layout.dims()}")
    return params, train_config, payload.get("extra", {})
