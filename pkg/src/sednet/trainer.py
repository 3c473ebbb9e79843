"""Adam, reduce-on-plateau, patient-level splitting and the training loops."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dataio import load_weights, save_weights
from .metrics import dsc, threshold
from .model import HEAD, Model, ModelConfig, build, freeze_for_transfer, trainable_count
from .objectives import LossConfig, combined_loss

logger = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    initial_lr: float = 3e-4
    plateau_factor: float = 0.3
    plateau_patience: int = 2
    plateau_tolerance: float = 1e-8
    min_lr: float = 1e-7
    epochs: int = 50
    batch_slices: int = 23
    batching: str = "sample"  # one batch per sample, or "fixed" chunks of batch_slices
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    threshold: float = 0.5
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.split_ratios = tuple(self.split_ratios)
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ValueError(f"split ratios must be nonnegative and sum to 1, got {self.split_ratios}")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.batching not in ("sample", "fixed"):
            raise ValueError(f"batching must be 'sample' or 'fixed', got {self.batching!r}")
        if self.epochs < 0 or self.batch_slices < 1:
            raise ValueError("epochs must be >= 0 and batch_slices >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["split_ratios"] = list(self.split_ratios)
        return d


class Adam:
    """Adam with bias correction. Frozen parameters are never touched."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, T.Parameter], lr: float) -> None:
        for name, p in params.items():
            if p.trainable and not np.all(np.isfinite(p.grad)):
                raise NumericalAbort(f"non-finite gradient in parameter {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if not p.trainable:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params: dict[str, T.Parameter], state: Adam, lr: float) -> Adam:
    state.step(params, lr)
    return state


class Plateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.3, patience: int = 2,
                 tolerance: float = 1e-8, min_lr: float = 1e-7):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.tolerance = tolerance
        self.min_lr = min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.tolerance:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


def plateau_update(history: Sequence[float], state: Plateau) -> float:
    """Feed the latest validation loss in ``history`` to ``state``."""
    if not history:
        raise ValueError("need at least one completed epoch")
    return state.step(history[-1])


def split(samples: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle whole samples and cut into train/val/test.

    Validation and test get ``floor(n * ratio)`` samples; the remainder goes to
    training.
    """
    n = len(samples)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    n_val = int(math.floor(n * ratios[1]))
    n_test = int(math.floor(n * ratios[2]))
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_val]),
            pick(order[n_train + n_val:]))


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    dice: tuple[float, float, float]
    lr: float


REPORT_FIELDS = ["epoch", "train_loss", "val_loss", "dice_ntc", "dice_ed", "dice_et", "lr"]


def reports_to_csv(reports: Sequence[EpochReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), *(repr(d) for d in r.dice), repr(r.lr)])
    return buf.getvalue()


@dataclass
class TrainResult:
    model: Model
    reports: list[EpochReport]
    step_losses: list[float]
    best_val_loss: float
    best_epoch: int
    best_path: Path | None = None
    best_state: dict[str, np.ndarray] | None = None


Sample = tuple[np.ndarray, np.ndarray]


def _batches(samples: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator | None):
    if cfg.batching == "sample":
        order = rng.permutation(len(samples)) if rng is not None else range(len(samples))
        for i in order:
            yield samples[i]
        return
    x = np.concatenate([s[0] for s in samples])
    y = np.concatenate([s[1] for s in samples])
    order = rng.permutation(len(x)) if rng is not None else np.arange(len(x))
    for i in range(0, len(x), cfg.batch_slices):
        idx = order[i:i + cfg.batch_slices]
        yield x[idx], y[idx]


def _loss(model: Model, x, y, loss_cfg: LossConfig) -> T.Tensor:
    pred = model(np.asarray(x, dtype=model.dtype))
    return combined_loss(pred, np.asarray(y, dtype=model.dtype), loss_cfg)


def validate(model: Model, samples: Sequence[Sample], cfg: TrainConfig) -> tuple[float, tuple]:
    """Slice-weighted mean loss and per-class mean slice DSC over ``samples``."""
    total, count = 0.0, 0
    dices = []
    with T.no_grad():
        for x, y in _batches(samples, cfg, None):
            pred = model(np.asarray(x, dtype=model.dtype))
            loss = combined_loss(pred, np.asarray(y, dtype=model.dtype), cfg.loss)
            total += float(loss.data) * len(x)
            count += len(x)
            hard = threshold(pred.data, cfg.threshold)
            for i in range(len(x)):
                dices.append([dsc(hard[i, ..., c], y[i, ..., c]) for c in range(y.shape[-1])])
    d = np.mean(np.asarray(dices), axis=0)
    return total / count, tuple(float(v) for v in d)


def _blas_guard(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def train(model: Model, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          cfg: TrainConfig | None = None, out_dir=None,
          on_epoch: Callable[[EpochReport], None] | None = None) -> TrainResult:
    """Optimize ``model`` in place. Writes ``best.sedw`` under ``out_dir`` when given."""
    cfg = cfg or TrainConfig()
    if not train_samples or not val_samples:
        raise ValueError("training and validation sets must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = Plateau(cfg.initial_lr, cfg.plateau_factor, cfg.plateau_patience,
                    cfg.plateau_tolerance, cfg.min_lr)
    params = model.params
    reports: list[EpochReport] = []
    step_losses: list[float] = []
    best, best_epoch, best_state = math.inf, -1, None
    best_path = Path(out_dir) / "best.sedw" if out_dir is not None else None

    with _blas_guard(cfg.deterministic):
        for epoch in range(1, cfg.epochs + 1):
            lr = sched.lr
            epoch_losses = []
            for x, y in _batches(train_samples, cfg, rng):
                T.zero_grad(params.values())
                with T.Tape() as tape:
                    loss = _loss(model, x, y, cfg.loss)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericalAbort(f"non-finite loss at epoch {epoch}, step {len(step_losses) + 1}")
                T.backward(loss, tape)
                adam.step(params, lr)
                step_losses.append(value)
                epoch_losses.append(value)
            val_loss, dice = validate(model, val_samples, cfg)
            if not math.isfinite(val_loss):
                raise NumericalAbort(f"non-finite validation loss at epoch {epoch}")
            report = EpochReport(epoch, float(np.mean(epoch_losses)), val_loss, dice, lr)
            reports.append(report)
            logger.info("epoch %d train %.5f val %.5f dice %s lr %.3g", epoch,
                        report.train_loss, val_loss, ", ".join(f"{d:.4f}" for d in dice), lr)
            if on_epoch is not None:
                on_epoch(report)
            if val_loss < best:
                best, best_epoch = val_loss, epoch
                best_state = {k: p.data.copy() for k, p in params.items()}
                if best_path is not None:
                    save_weights(best_path, model, extra={"epoch": epoch, "val_loss": val_loss})
            sched.step(val_loss)
    return TrainResult(model, reports, step_losses, best, best_epoch, best_path, best_state)


def frozen_checksum(model: Model) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        if not name.startswith(HEAD + "."):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class TransferResult(TrainResult):
    checksum_before: str = ""
    checksum_after: str = ""
    trainable: int = 0


def transfer_train(archive, train_samples, val_samples, cfg: TrainConfig | None = None,
                   model_config: ModelConfig | None = None, out_dir=None,
                   on_epoch=None) -> TransferResult:
    """Load pretrained weights, freeze all but the output head and retrain it."""
    from .dataio import read_weights

    cfg = cfg or TrainConfig(epochs=30)
    if model_config is None:
        header, _ = read_weights(archive)
        model_config = ModelConfig.from_dict(header["config"])
    model = load_weights(archive, build(model_config))
    freeze_for_transfer(model)
    before = frozen_checksum(model)
    n_train = trainable_count(model)
    res = train(model, train_samples, val_samples, cfg, out_dir=out_dir, on_epoch=on_epoch)
    after = frozen_checksum(model)
    if after != before:  # pragma: no cover - guarded by Adam skipping frozen params
        raise RuntimeError("frozen parameters changed during transfer training")
    return TransferResult(**vars(res), checksum_before=before, checksum_after=after,
                          trainable=n_train)
