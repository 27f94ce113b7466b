"""Adam with L2, the epoch loop, evaluation and two-fold cross-validation."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor, backward
from .losses import LossTerms, Metrics, aggregate, hard_metrics, model_loss
from .models import NetworkConfig, build_model
from .phantom import LabeledSample, denoise_background

log = logging.getLogger(__name__)

# Probability CompNets see denoised inputs, both in training and at inference.
PROB_DENOISE_THRESHOLD = 0.1


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2_lambda: float = 2e-4
    epochs: int = 10
    batch_size: int = 8
    deep_supervision: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    recalibrate_bn: bool = False

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.l2_lambda < 0:
            raise ValueError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("invalid Adam hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decays(name: str) -> bool:
    """L2 applies to convolution weights only, not biases or BN affine parameters."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("bias", "gamma", "beta")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
              config: TrainConfig) -> OptimState:
    """One in-place Adam update; L2 enters as ``g + 2*lambda*theta`` before the moments."""
    missing = [n for n in params if n not in grads]
    if missing:
        raise ValueError(f"missing gradients for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if config.l2_lambda and decays(name):
            g = g + (2.0 * config.l2_lambda) * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (config.learning_rate / c1) * m / (np.sqrt(v / c2) + config.adam_eps)
        p.data -= step.astype(p.data.dtype, copy=False)
    return state


# --------------------------------------------------------------------- batches

def prepare_images(images: np.ndarray, variant: str) -> np.ndarray:
    """[N,H,W] images to the [N,1,H,W] network input for ``variant``."""
    images = np.asarray(images)
    if variant == "prob-compnet":
        images = denoise_background(images, PROB_DENOISE_THRESHOLD)
    return images[:, None]


def _stack(samples: Sequence[LabeledSample], attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples]).astype(np.float32)[:, None]


def batch_loss(model, samples: Sequence[LabeledSample], config: TrainConfig, rng, mode: str = "train"):
    variant = model.config.variant
    images = np.stack([s.image for s in samples])
    x = prepare_images(images, variant)
    outputs = model(x, mode=mode, rng=rng)
    skull = _stack(samples, "skull_mask") if variant == "prob-compnet" else None
    terms = model_loss(outputs, _stack(samples, "brain_mask"), images[:, None].astype(np.float32),
                       config.deep_supervision, skull_mask=skull)
    return terms, outputs


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    dice_term: float
    comp_term: float
    recon_term: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    state: OptimState


def train(model, samples: Sequence[LabeledSample], config: TrainConfig, state: OptimState | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None) -> TrainResult:
    """Train ``model`` in place with seeded per-epoch shuffling.

    With ``config.recalibrate_bn`` the running BN statistics are re-estimated
    on ``samples`` after the last epoch (see :func:`recalibrate_batchnorm`).
    """
    config.validate()
    if not samples:
        raise ValueError("train needs at least one sample")
    state = state or OptimState()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    params = model.params
    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(samples))
        sums = np.zeros(4)
        batches = 0
        for b, start in enumerate(range(0, len(order), config.batch_size), 1):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            terms: LossTerms = batch_loss(model, batch, config, dropout_rng)[0]
            loss = terms.total.item()
            if not np.isfinite(loss):
                raise NumericalError(f"loss diverged (value {loss}) at epoch {epoch}, batch {b}")
            for p in params.values():
                p.grad = None
            backward(terms.total)
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
            try:
                adam_step(params, grads, state, config)
            except NumericalError as exc:
                raise NumericalError(f"{exc} (epoch {epoch}, batch {b})") from exc
            for p in params.values():
                p.grad = None
            sums += (loss, terms.dice_term, terms.comp_term, terms.recon_term)
            batches += 1
        stats = EpochStats(epoch, *(float(v) for v in sums / batches))
        history.append(stats)
        log.info("epoch %d loss %.5f dice %.5f", epoch, stats.mean_loss, stats.dice_term)
        if on_epoch is not None:
            on_epoch(stats)
    if config.recalibrate_bn:
        recalibrate_batchnorm(model, samples)
    return TrainResult(history, state)


def recalibrate_batchnorm(model, samples: Sequence[LabeledSample], batch_size: int = 20) -> None:
    """Replace running BN statistics with their average over ``samples`` at fixed weights.

    Running averages collected during training lag behind the weights and,
    with small mini-batches, underestimate the population variance.  This
    pass re-estimates them with dropout off (``calibrate`` mode), consuming
    the samples in order so the result is deterministic.
    """
    from .nn import BatchNorm2d

    if not samples:
        raise ValueError("recalibrate_batchnorm needs at least one sample")
    norms = [m for m in model.modules() if isinstance(m, BatchNorm2d)]
    for bn in norms:
        bn.running_mean[...] = 0
        bn.running_var[...] = 0
    images = np.stack([s.image for s in samples])
    try:
        for k, start in enumerate(range(0, len(images), batch_size), 1):
            for bn in norms:
                bn.momentum = 1.0 / k  # cumulative mean over batches
            model(prepare_images(images[start:start + batch_size], model.config.variant), mode="calibrate")
    finally:
        for bn in norms:
            bn.momentum = F.BN_MOMENTUM


LOSS_COLUMNS = ("epoch", "mean_loss", "dice_term", "comp_term", "recon_term")


def write_loss_csv(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for s in history:
            writer.writerow([s.epoch, repr(s.mean_loss), repr(s.dice_term), repr(s.comp_term), repr(s.recon_term)])


def read_loss_csv(path) -> list[EpochStats]:
    with open(path, newline="") as fh:
        return [EpochStats(int(r["epoch"]), float(r["mean_loss"]), float(r["dice_term"]),
                           float(r["comp_term"]), float(r["recon_term"])) for r in csv.DictReader(fh)]


# ------------------------------------------------------------------ inference

@dataclass
class Prediction:
    seg: np.ndarray                 # [N,H,W]
    comp: np.ndarray | None = None
    recon: np.ndarray | None = None


def _to_numpy(t: Tensor | None):
    return None if t is None else t.data[:, 0]


def predict(model, images: np.ndarray, batch_size: int = 8) -> Prediction:
    """Eval-mode forward over [N,H,W] images in batches."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError(f"predict expects [N,H,W] images, got shape {images.shape}")
    parts: list[Prediction] = []
    for start in range(0, len(images), batch_size):
        x = prepare_images(images[start:start + batch_size], model.config.variant)
        out = model(x, mode="eval")
        parts.append(Prediction(_to_numpy(out.seg_final), _to_numpy(out.comp_final), _to_numpy(out.recon)))
    join = lambda k: None if getattr(parts[0], k) is None else np.concatenate([getattr(p, k) for p in parts])  # noqa: E731
    return Prediction(join("seg"), join("comp"), join("recon"))


@dataclass
class EvalResult:
    ids: list[str]
    metrics: list[Metrics]
    summary: dict[str, tuple[float, float]]

    @property
    def rows(self) -> list[tuple[str, Metrics]]:
        return list(zip(self.ids, self.metrics))


def evaluate(model, samples: Sequence[LabeledSample], mode: str = "per_volume", ids: Sequence | None = None,
             batch_size: int = 8) -> EvalResult:
    """Hard metrics per sample.

    ``per_slice`` scores each 2D sample (volumes are scored slice by slice);
    ``per_volume`` pools the confusion counts of every slice of a sample.
    """
    if mode not in ("per_slice", "per_volume"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    ids = [str(i) for i in (ids if ids is not None else range(len(samples)))]
    out_ids, metrics = [], []
    for sid, s in zip(ids, samples):
        images = s.image if s.image.ndim == 3 else s.image[None]
        masks = s.brain_mask if s.brain_mask.ndim == 3 else s.brain_mask[None]
        seg = predict(model, images, batch_size).seg
        per = [hard_metrics(p, m) for p, m in zip(seg, masks)]
        if mode == "per_volume" or len(per) == 1:
            total = per[0]
            for m in per[1:]:
                total = total + m
            out_ids.append(sid)
            metrics.append(total)
        else:
            out_ids += [f"{sid}:{k}" for k in range(len(per))]
            metrics += per
    return EvalResult(out_ids, metrics, aggregate(metrics))


# ------------------------------------------------------------ cross-validation

@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test ids overlap")


def two_fold_splits(ids: Sequence[int]) -> list[FoldSplit]:
    """First half vs second half; the halves differ in size by at most one."""
    ids = tuple(ids)
    if len(ids) < 2:
        raise ValueError("two-fold cross-validation needs at least two samples")
    half = (len(ids) + 1) // 2
    a, b = ids[:half], ids[half:]
    return [FoldSplit(0, b, a), FoldSplit(1, a, b)]


@dataclass
class FoldResult:
    split: FoldSplit
    evaluation: EvalResult
    history: list[EpochStats]


@dataclass
class CVResult:
    folds: list[FoldResult]

    @property
    def pooled(self) -> dict[str, tuple[float, float]]:
        return aggregate([m for f in self.folds for m in f.evaluation.metrics])

    @property
    def tested_ids(self) -> list[int]:
        return [i for f in self.folds for i in f.split.test_ids]


def cross_validate(samples: Sequence[LabeledSample], net_config: NetworkConfig, train_config: TrainConfig,
                   splits: Sequence[FoldSplit] | None = None, mode: str = "per_volume",
                   model_factory: Callable[[NetworkConfig], object] = build_model) -> CVResult:
    """Train a fresh model on each fold's training half and evaluate on its test half."""
    splits = list(splits) if splits is not None else two_fold_splits(range(len(samples)))
    folds = []
    for split in splits:
        if not split.train_ids or not split.test_ids:
            raise ValueError(f"fold {split.fold} is empty")
        model = model_factory(net_config)
        result = train(model, [samples[i] for i in split.train_ids], train_config)
        ev = evaluate(model, [samples[i] for i in split.test_ids], mode, ids=split.test_ids)
        folds.append(FoldResult(split, ev, result.history))
    return CVResult(folds)
