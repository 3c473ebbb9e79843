"""Dice similarity and symmetric Hausdorff distance on binary masks."""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import dataclass, field

import numpy as np

CLASSES = ("NTC", "ED", "ET")


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(prediction, truth, eps: float = 1e-6) -> float:
    """Dice similarity coefficient ``(2|P&G| + eps) / (|P| + |G| + eps)``."""
    p, g = _pair(prediction, truth)
    inter = np.count_nonzero(p & g)
    return (2.0 * inter + eps) / (np.count_nonzero(p) + np.count_nonzero(g) + eps)


def _points(mask: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(v) for v in ix) for ix in np.argwhere(mask)]


def _directed_sq(src, dst, cmax: int) -> int:
    # early-break scan: a source point stops as soon as some target point is
    # closer than the running maximum, since it can no longer raise it
    for a in src:
        cmin = None
        for b in dst:
            d = 0
            for u, v in zip(a, b):
                d += (u - v) * (u - v)
            if d < cmax:
                cmin = None
                break
            if cmin is None or d < cmin:
                cmin = d
        if cmin is not None and cmin > cmax:
            cmax = cmin
    return cmax


def hausdorff(a, b, spacing: float = 1.0, seed: int | None = 0) -> float:
    """Symmetric Hausdorff distance between two nonempty masks.

    Points are visited in a shuffled order (seeded, so results are
    reproducible) to make the early break effective. Distances are compared as
    exact integer squares, so the result equals the naive double loop.
    Returns ``nan`` when either mask is empty.
    """
    a, b = _pair(a, b)
    pa, pb = _points(a), _points(b)
    if not pa or not pb:
        return math.nan
    rng = random.Random(seed)
    rng.shuffle(pa)
    rng.shuffle(pb)
    cmax = _directed_sq(pa, pb, 0)
    cmax = _directed_sq(pb, pa, cmax)
    return math.sqrt(cmax) * spacing


def hausdorff_bruteforce(a, b, spacing: float = 1.0) -> float:
    a, b = _pair(a, b)
    pa, pb = np.argwhere(a), np.argwhere(b)
    if len(pa) == 0 or len(pb) == 0:
        return math.nan
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    return math.sqrt(max(d2.min(axis=1).max(), d2.min(axis=0).max())) * spacing


def threshold(probabilities, tau: float = 0.5) -> np.ndarray:
    """Binarize probabilities: foreground iff ``p >= tau``."""
    if not 0 < tau < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    return np.asarray(probabilities) >= tau


@dataclass
class ClassMetrics:
    name: str
    dice: float
    hausdorff: float
    n_slices: int
    n_hd_undefined: int


@dataclass
class MetricsReport:
    split: str
    classes: list[ClassMetrics] = field(default_factory=list)
    spacing: float = 1.0

    @property
    def dice(self) -> tuple[float, ...]:
        return tuple(c.dice for c in self.classes)

    @property
    def hd(self) -> tuple[float, ...]:
        return tuple(c.hausdorff for c in self.classes)

    def rows(self) -> list[dict]:
        return [
            {"split": self.split, "class": c.name, "dice": c.dice, "hausdorff": c.hausdorff,
             "n_slices": c.n_slices, "n_hd_undefined": c.n_hd_undefined}
            for c in self.classes
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["split", "class", "dice", "hausdorff",
                                            "n_slices", "n_hd_undefined"], lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
                for r in self.rows()]
        return json.dumps({"split": self.split, "spacing_mm": self.spacing, "classes": rows}, indent=2)


def score_slices(prob, truth, split: str = "test", tau: float = 0.5, spacing: float = 1.0,
                 eps: float = 1e-6, class_names=CLASSES) -> MetricsReport:
    """Per-class mean DSC and mean HD over slices of ``[N, H, W, C]`` arrays.

    HD is averaged only over slices where both masks are nonempty; the rest
    are counted in ``n_hd_undefined``.
    """
    pred = threshold(prob, tau)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    n = pred.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    report = MetricsReport(split=split, spacing=spacing)
    for c in range(pred.shape[-1]):
        dices, hds, undefined = [], [], 0
        for i in range(n):
            dices.append(dsc(pred[i, ..., c], truth[i, ..., c], eps))
            h = hausdorff(pred[i, ..., c], truth[i, ..., c], spacing)
            if math.isnan(h):
                undefined += 1
            else:
                hds.append(h)
        name = class_names[c] if c < len(class_names) else str(c)
        report.classes.append(ClassMetrics(
            name, float(np.mean(dices)), float(np.mean(hds)) if hds else math.nan, n, undefined))
    return report


def evaluate(model, images, labels, split: str = "test", tau: float = 0.5,
             spacing: float = 1.0) -> MetricsReport:
    """Run ``model`` on ``images`` ``[N, H, W, 1]`` and score against one-hot ``labels``."""
    from .model import predict

    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    prob = predict(model, images)
    return score_slices(prob, labels, split=split, tau=tau, spacing=spacing)
