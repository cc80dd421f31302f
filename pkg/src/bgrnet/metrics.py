"""Panoptic quality (PQ = SQ * RQ) between two panoptic maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .fusion import PanopticMap

IOU_THRESH = 0.5


@dataclass
class ClassStat:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def __add__(self, other: "ClassStat") -> "ClassStat":
        return ClassStat(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.iou_sum + other.iou_sum)

    @property
    def counted(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    @property
    def pq(self) -> float:
        return self.sq * self.rq


@dataclass
class PQResult:
    per_class: dict[int, ClassStat]
    is_thing: dict[int, bool] = field(default_factory=dict)

    def __add__(self, other: "PQResult") -> "PQResult":
        merged = dict(self.per_class)
        for cid, st in other.per_class.items():
            merged[cid] = merged.get(cid, ClassStat()) + st
        return PQResult(merged, {**self.is_thing, **other.is_thing})

    def _mean(self, attr: str, which: bool | None = None) -> float:
        vals = [
            getattr(st, attr)
            for cid, st in sorted(self.per_class.items())
            if st.counted and (which is None or self.is_thing.get(cid) == which)
        ]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def PQ(self) -> float:
        return self._mean("pq")

    @property
    def SQ(self) -> float:
        return self._mean("sq")

    @property
    def RQ(self) -> float:
        return self._mean("rq")

    @property
    def PQ_th(self) -> float:
        return self._mean("pq", True)

    @property
    def PQ_st(self) -> float:
        return self._mean("pq", False)

    def to_json(self) -> dict:
        per_class = {}
        for cid, st in sorted(self.per_class.items()):
            if not st.counted:
                continue
            per_class[str(cid)] = {
                "is_thing": bool(self.is_thing.get(cid, False)),
                "tp": st.tp,
                "fp": st.fp,
                "fn": st.fn,
                "iou_sum": st.iou_sum,
                "PQ": st.pq,
                "SQ": st.sq,
                "RQ": st.rq,
            }
        return {
            "per_class": per_class,
            "PQ": self.PQ,
            "PQ_th": self.PQ_th,
            "PQ_st": self.PQ_st,
            "SQ": self.SQ,
            "RQ": self.RQ,
        }


def _rounded(obj, ndigits: int = 4):
    if isinstance(obj, float):
        return round(obj, ndigits)
    if isinstance(obj, dict):
        return {k: _rounded(v, ndigits) for k, v in obj.items()}
    return obj


def display_json(result: PQResult) -> dict:
    """The report with floats rounded to 4 decimals, for terminal output."""
    return _rounded(result.to_json())


def panoptic_quality(pred: PanopticMap, gt: PanopticMap, class_table: Mapping[int, bool]) -> PQResult:
    """Per-class TP/FP/FN/IoU-sum between ``pred`` and ``gt``.

    ``class_table`` maps class id -> is_thing. Segments match when they share a
    class and IoU > 0.5; gt-void pixels (id 0) are removed from unions, and a
    prediction lying mostly (> 0.5) on gt-void is not counted as FP.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction raster {pred.shape} != ground truth raster {gt.shape}")
    for seg in (*pred.segments, *gt.segments):
        if seg.class_id not in class_table:
            raise KeyError(f"class id {seg.class_id} not in class table")

    pred_cls = {s.id: s.class_id for s in pred.segments}
    gt_cls = {s.id: s.class_id for s in gt.segments}
    p_ids = pred.ids.astype(np.uint64).ravel()
    g_ids = gt.ids.astype(np.uint64).ravel()
    base = np.uint64(int(p_ids.max(initial=0)) + 1)
    pairs, counts = np.unique(g_ids * base + p_ids, return_counts=True)
    inter: dict[tuple[int, int], int] = {}
    for key, c in zip(pairs.tolist(), counts.tolist()):
        inter[(key // int(base), key % int(base))] = c

    p_area = {s.id: int(np.count_nonzero(pred.ids == s.id)) for s in pred.segments}
    g_area = {s.id: int(np.count_nonzero(gt.ids == s.id)) for s in gt.segments}

    stats = {int(c): ClassStat() for c in class_table}
    matched_p: set[int] = set()
    matched_g: set[int] = set()
    for (g, p), n in sorted(inter.items()):
        if g == 0 or p == 0 or gt_cls[g] != pred_cls[p]:
            continue
        union = p_area[p] + g_area[g] - n - inter.get((0, p), 0)
        iou = n / union
        if iou > IOU_THRESH:
            # IoU > 0.5 makes a match unique on both sides.
            assert g not in matched_g and p not in matched_p, "non-unique panoptic match"
            matched_g.add(g)
            matched_p.add(p)
            st = stats[gt_cls[g]]
            st.tp += 1
            st.iou_sum += iou

    for g in gt_cls:
        if g not in matched_g:
            stats[gt_cls[g]].fn += 1
    for p in pred_cls:
        if p in matched_p:
            continue
        if p_area[p] and inter.get((0, p), 0) / p_area[p] > IOU_THRESH:
            continue
        stats[pred_cls[p]].fp += 1

    return PQResult(stats, {int(c): bool(t) for c, t in class_table.items()})


def accumulate(results: Iterable[PQResult]) -> PQResult:
    """Sum per-image counts; ratios are derived afterwards."""
    total = PQResult({})
    for r in results:
        total = total + r
    return total
