"""Segmentation metrics, reference baselines, and evaluation reports.

The headline numbers are mIoU over full masks (all instances) and mIoU over
occluded regions, the latter computed only on partially occluded instances:
at least one ground-truth-visible pixel and at least one occluded pixel.
The occluded region of an instance is delimited by the ground-truth visible
mask: both prediction and target are restricted to M \\ V before the IoU.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import UsageError


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; two empty masks count as a perfect match."""
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def is_partially_occluded(full: np.ndarray, visible: np.ndarray) -> bool:
    full = full.astype(bool)
    visible = visible.astype(bool)
    return bool(visible.any() and (full & ~visible).any())


def occluded_region_iou(pred_full: np.ndarray, gt_full: np.ndarray,
                        gt_visible: np.ndarray) -> float:
    """IoU restricted to the ground-truth occluded region M \\ V."""
    keep = ~gt_visible.astype(bool)
    return iou(pred_full.astype(bool) & keep, gt_full.astype(bool) & keep)


# ---------------------------------------------------------------------------
# baselines

def vm_baseline(visible: np.ndarray) -> np.ndarray:
    """The visible mask itself, used directly as the amodal prediction."""
    return visible.astype(bool)


def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_points(points: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Monotone-chain hull of integer points, counter-clockwise, no
    duplicates; collinear input returns the two extreme points. Exact
    (integer arithmetic throughout)."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def rasterize_convex_polygon(vertices: list[tuple[int, int]], shape) -> np.ndarray:
    """Pixels whose integer centers lie inside or on the polygon (vertices
    in (x, y) = (col, row) order, counter-clockwise, integer coordinates)."""
    H, W = shape
    out = np.zeros((H, W), dtype=bool)
    if not vertices:
        return out
    if len(vertices) == 1:
        x, y = vertices[0]
        out[y, x] = True
        return out
    xs = np.arange(W, dtype=np.int64)
    ys = np.arange(H, dtype=np.int64)
    px, py = np.meshgrid(xs, ys)
    inside = np.ones((H, W), dtype=bool)
    n = len(vertices)
    if len(vertices) == 2:
        (x0, y0), (x1, y1) = vertices
        c = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        on_line = c == 0
        within = ((px - x0) * (px - x1) + (py - y0) * (py - y1)) <= 0
        return on_line & within
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        c = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= c >= 0
    return inside


def convex_baseline(visible: np.ndarray) -> np.ndarray:
    """Filled convex hull of the visible mask's pixel centers."""
    visible = visible.astype(bool)
    rr, cc = np.nonzero(visible)
    if rr.size == 0:
        return np.zeros_like(visible)
    pts = list(zip(cc.tolist(), rr.tolist()))  # (x, y)
    hull = convex_hull_points(pts)
    return rasterize_convex_polygon(hull, visible.shape)


def convex_hull_mask_oracle(visible: np.ndarray) -> np.ndarray:
    """O(n^3) half-plane oracle: a pixel is in the hull iff no directed edge
    through two set pixels has it strictly outside while all set pixels are
    inside. Exact integer arithmetic; for comparison with convex_baseline."""
    visible = visible.astype(bool)
    H, W = visible.shape
    rr, cc = np.nonzero(visible)
    n = rr.size
    if n == 0:
        return np.zeros_like(visible)
    pts = list(zip(cc.tolist(), rr.tolist()))
    if n == 1:
        out = np.zeros_like(visible)
        out[rr[0], cc[0]] = True
        return out
    px, py = np.meshgrid(np.arange(W, dtype=np.int64), np.arange(H, dtype=np.int64))
    inside = np.ones((H, W), dtype=bool)
    collinear = True
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = pts[i], pts[j]
            sides = [_cross(a, b, p) for p in pts]
            if all(s <= 0 for s in sides):
                c = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
                inside &= c <= 0
            if any(s != 0 for s in sides):
                collinear = False
    if collinear:
        # all pixels on one line: the hull is the extreme segment
        return rasterize_convex_polygon(convex_hull_points(pts), visible.shape)
    return inside


def post_process(pred_full: np.ndarray, visible: np.ndarray,
                 intersection: bool = False) -> np.ndarray:
    """Merge a predicted full mask with a visible mask. Union by default;
    the intersection variant erases occluded-region predictions and exists
    for fidelity experiments only."""
    pred_full = pred_full.astype(bool)
    visible = visible.astype(bool)
    return pred_full & visible if intersection else pred_full | visible


# ---------------------------------------------------------------------------
# reports

@dataclass
class InstanceRecord:
    sequence: str
    object_id: int
    frame: int
    method: str
    iou_full: float
    occluded: bool
    iou_occ: Optional[float]   # None when the instance does not qualify


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, rec: InstanceRecord) -> None:
        self.records.append(rec)

    def methods(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.method)
        return list(seen)

    def summary(self) -> dict:
        out = {"config": self.config, "methods": {}}
        for method in self.methods():
            rows = [r for r in self.records if r.method == method]
            occ = [r.iou_occ for r in rows if r.iou_occ is not None]
            out["methods"][method] = {
                "miou_full": float(np.mean([r.iou_full for r in rows])) if rows else None,
                "miou_occ": float(np.mean(occ)) if occ else "n/a",
                "instances": len(rows),
                "occluded_instances": len(occ),
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "object", "frame", "method", "iou_full",
                    "occluded", "iou_occ"])
        for r in self.records:
            w.writerow([r.sequence, r.object_id, r.frame, r.method,
                        f"{r.iou_full:.6f}", int(r.occluded),
                        "" if r.iou_occ is None else f"{r.iou_occ:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def score_instance(report: EvalReport, sequence: str, k: int, t: int, method: str,
                   pred_full: np.ndarray, gt_full: np.ndarray,
                   gt_visible: np.ndarray) -> None:
    qualifies = is_partially_occluded(gt_full, gt_visible)
    report.add(InstanceRecord(
        sequence, k, t, method,
        iou_full=iou(pred_full, gt_full),
        occluded=qualifies,
        iou_occ=occluded_region_iou(pred_full, gt_full, gt_visible) if qualifies else None,
    ))


def miou_occ(preds: list[np.ndarray], gt_full: list[np.ndarray],
             gt_visible: list[np.ndarray]):
    """Mean occluded-region IoU over qualifying instances; 'n/a' when no
    instance qualifies."""
    if not (len(preds) == len(gt_full) == len(gt_visible)):
        raise UsageError("miou_occ: aligned instance lists required")
    vals = [occluded_region_iou(p, f, v)
            for p, f, v in zip(preds, gt_full, gt_visible)
            if is_partially_occluded(f, v)]
    return float(np.mean(vals)) if vals else "n/a"
