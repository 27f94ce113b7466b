"""Composite CompNet loss, Dice, and confusion-count metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import functional as F
from .autograd import ShapeError, Tensor

DICE_SMOOTH = 1.0
THRESHOLD = 0.5


def soft_dice(pred, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """(2 sum(p t) + s) / (sum p + sum t + s) over every element."""
    pred = F.as_tensor(pred, dtype=np.float64)
    target = F.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"soft_dice: shapes {pred.shape} and {target.shape} differ")
    inter = F.sum(F.mul(pred, target))
    denom = F.add(F.sum(pred), F.sum(target))
    return F.div(F.add(F.mul(inter, 2.0), smooth), F.add(denom, smooth))


def batch_soft_dice(pred: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """Per-sample soft Dice over [N,1,H,W] maps, averaged over the batch."""
    target = F.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"soft_dice: shapes {pred.shape} and {target.shape} differ")
    axes = tuple(range(1, pred.ndim))
    inter = F.sum(F.mul(pred, target), axis=axes)
    denom = F.add(F.sum(pred, axis=axes), F.sum(target, axis=axes))
    return F.mean(F.div(F.add(F.mul(inter, 2.0), smooth), F.add(denom, smooth)))


@dataclass
class LossTerms:
    total: Tensor
    dice_term: float
    comp_term: float
    recon_term: float


def _mean(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = F.add(acc, t)
    return F.mul(acc, 1.0 / len(terms)) if len(terms) > 1 else acc


def composite_loss(
    brain_mask,
    seg_outputs: Sequence[Tensor],
    comp_outputs: Sequence[Tensor] = (),
    image=None,
    recon_outputs: Sequence[Tensor] = (),
    skull_mask=None,
) -> LossTerms:
    """-Dice(Y_S, seg) + Dice(Y_S, comp) + MSE(X, recon), each averaged over the given maps.

    Passing several maps per branch (intermediates plus final) is deep
    supervision.  With ``skull_mask`` the complementary term instead rewards
    overlap with the skull (probability CompNet training).
    """
    dice = _mean([batch_soft_dice(p, brain_mask) for p in seg_outputs])
    total = F.mul(dice, -1.0)
    comp_value = recon_value = 0.0
    if comp_outputs:
        if skull_mask is None:
            comp = _mean([batch_soft_dice(p, brain_mask) for p in comp_outputs])
            total = F.add(total, comp)
        else:
            comp = _mean([batch_soft_dice(p, skull_mask) for p in comp_outputs])
            total = F.sub(total, comp)
        comp_value = comp.item()
    if recon_outputs:
        if image is None:
            raise ValueError("reconstruction terms need the input image")
        image = F.as_tensor(image, dtype=recon_outputs[0].dtype)
        recon = _mean([F.mse(r, image) for r in recon_outputs])
        total = F.add(total, recon)
        recon_value = recon.item()
    return LossTerms(total, dice.item(), comp_value, recon_value)


def loss_eq1(y_s, y_hat_s: Tensor, y_hat_c: Tensor | None = None, x=None, x_hat_r: Tensor | None = None) -> Tensor:
    """Single-map form of the composite loss; absent predictions drop their term."""
    shapes = {t.shape for t in (F.as_tensor(y_s), y_hat_s, y_hat_c, x_hat_r) if t is not None}
    if x is not None:
        shapes.add(F.as_tensor(x).shape)
    if len(shapes) != 1:
        raise ShapeError(f"loss_eq1: maps differ in shape {sorted(shapes)}")
    return composite_loss(
        y_s, [y_hat_s],
        [y_hat_c] if y_hat_c is not None else (),
        x,
        [x_hat_r] if x_hat_r is not None else (),
    ).total


def model_loss(outputs, brain_mask, image, deep_supervision: bool = True, skull_mask=None) -> LossTerms:
    """Composite loss over a ``ModelOutputs`` bundle."""
    if deep_supervision:
        seg, comp, recon = outputs.seg_outputs, outputs.comp_outputs, outputs.recon_outputs
    else:
        seg = [outputs.seg_final]
        comp = [outputs.comp_final] if outputs.comp_final is not None else []
        recon = [outputs.recon] if outputs.recon is not None else []
    return composite_loss(brain_mask, seg, comp, image, recon, skull_mask)


# -------------------------------------------------------------------- metrics

@dataclass
class Metrics:
    dice: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> Metrics:
        # Empty-vs-empty agreement counts as perfect.
        dice = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        sens = 1.0 if tp + fn == 0 else tp / (tp + fn)
        spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
        return cls(dice, sens, spec, int(tp), int(fp), int(tn), int(fn))

    def __add__(self, other: Metrics) -> Metrics:
        """Pool confusion counts (e.g. slices into a volume)."""
        return Metrics.from_counts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


METRIC_FIELDS = ("dice", "sensitivity", "specificity")


def confusion(pred_binary, target_binary) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) of two boolean maps."""
    p = np.asarray(pred_binary).astype(bool)
    t = np.asarray(target_binary).astype(bool)
    if p.shape != t.shape:
        raise ShapeError(f"confusion: shapes {p.shape} and {t.shape} differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, p.size - tp - fp - fn, fn


def hard_metrics(pred, target, threshold: float = THRESHOLD) -> Metrics:
    """Binarize ``pred`` at ``threshold`` (>=) and score it against a binary ``target``."""
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    tp, fp, tn, fn = confusion(pred >= threshold, target > 0.5)
    return Metrics.from_counts(tp, fp, tn, fn)


def aggregate(metrics: Sequence[Metrics]) -> dict[str, tuple[float, float]]:
    """Per-field mean and sample (n-1) standard deviation."""
    if not metrics:
        raise ValueError("aggregate needs at least one Metrics entry")
    out = {}
    for name in METRIC_FIELDS:
        vals = np.array([getattr(m, name) for m in metrics], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[name] = (float(vals.mean()), std)
    return out


def pooled_mean(groups: Sequence[Sequence[Metrics]], name: str = "dice") -> float:
    """Mean over the union of groups (equals the size-weighted mean of group means)."""
    vals = [getattr(m, name) for g in groups for m in g]
    return float(np.mean(vals))


CSV_COLUMNS = ("id", "dice", "sensitivity", "specificity", "TP", "FP", "TN", "FN")


def write_metrics_csv(path, rows: Iterable[tuple[str, Metrics]]) -> None:
    """One row per sample, then ``mean`` and ``std`` rows over the per-sample values.

    The aggregate rows carry pooled confusion counts (sums).
    """
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for sid, m in rows:
            writer.writerow([sid, repr(m.dice), repr(m.sensitivity), repr(m.specificity), m.tp, m.fp, m.tn, m.fn])
        if rows:
            agg = aggregate([m for _, m in rows])
            counts = [sum(getattr(m, f) for _, m in rows) for f in ("tp", "fp", "tn", "fn")]
            writer.writerow(["mean", *(repr(agg[f][0]) for f in METRIC_FIELDS), *counts])
            writer.writerow(["std", *(repr(agg[f][1]) for f in METRIC_FIELDS), "", "", "", ""])


def read_metrics_csv(path) -> list[tuple[str, Metrics]]:
    """Per-sample rows of a metrics CSV (aggregate rows are skipped)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["id"] in ("mean", "std"):
                continue
            out.append((row["id"], Metrics(float(row["dice"]), float(row["sensitivity"]), float(row["specificity"]),
                                           int(row["TP"]), int(row["FP"]), int(row["TN"]), int(row["FN"]))))
    return out
