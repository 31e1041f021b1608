"""Generalized Dice Loss and the overlap metrics used for reporting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, make_result

GDL_EPS = 1e-6
THRESHOLD_JA = 0.65


def gdl(p: Tensor, r) -> Tensor:
    """``1 - (2*sum(r*p) + eps) / (sum(r) + sum(p) + eps)`` over every pixel of the batch.

    ``r`` is a constant binary reference (array or tensor); only ``p`` is
    differentiated.
    """
    rd = r.data if isinstance(r, Tensor) else np.asarray(r)
    if rd.shape != p.shape:
        raise ShapeError(f"gdl: prediction {p.shape} vs reference {rd.shape}")
    pd = p.data
    rd = rd.astype(pd.dtype, copy=False)
    inter = np.sum(rd * pd, dtype=np.float64)
    num = 2.0 * inter + GDL_EPS
    den = np.sum(rd, dtype=np.float64) + np.sum(pd, dtype=np.float64) + GDL_EPS
    loss = np.asarray(1.0 - num / den, dtype=pd.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        # d/dp_n [-(num/den)] = -(2 r_n den - num) / den^2
        scale = g.reshape(-1)[0]
        grad = -(2.0 * rd * den - num) / (den * den)
        return ((scale * grad).astype(pd.dtype),)

    return make_result(loss, (p,), backward, "gdl")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_binary(m, what: str) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ContractError(f"{what} must be binary (values 0/1)")
    return a.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "reference")
    if p.shape != g.shape:
        raise ShapeError(f"confusion: prediction {p.shape} vs reference {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def _ratio(num: int, den: int) -> float:
    # empty denominator: both masks agree on "nothing here"
    return 1.0 if den == 0 else num / den


def jaccard(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def thresholded_jaccard(ja: float, t: float = THRESHOLD_JA) -> float:
    return ja if ja >= t else 0.0


METRIC_NAMES = ("ja", "dc", "sn", "sp", "thresholded_ja")


@dataclass
class MetricsRecord:
    ja: float
    dc: float
    sn: float
    sp: float
    thresholded_ja: float
    id: Optional[str] = None
    per_image: list["MetricsRecord"] = field(default_factory=list, repr=False)

    @classmethod
    def from_counts(cls, c: ConfusionCounts, id: Optional[str] = None) -> "MetricsRecord":
        ja = jaccard(c)
        return cls(ja=ja, dc=dice(c), sn=sensitivity(c), sp=specificity(c), thresholded_ja=thresholded_jaccard(ja), id=id)

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_json(self) -> dict:
        out = {"mean": self.values()}
        out["per_image"] = [{"id": r.id, **r.values()} for r in self.per_image]
        return out


def image_metrics(pred, gt, id: Optional[str] = None) -> MetricsRecord:
    return MetricsRecord.from_counts(confusion(pred, gt), id=id)


def aggregate(per_image: Sequence[MetricsRecord]) -> MetricsRecord:
    """Arithmetic mean of every metric; thresholding happens per image first."""
    if not per_image:
        raise ContractError("aggregate needs at least one record")
    means = {k: float(np.mean([getattr(r, k) for r in per_image])) for k in METRIC_NAMES}
    return MetricsRecord(**means, per_image=list(per_image))

