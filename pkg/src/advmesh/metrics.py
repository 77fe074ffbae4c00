"""Rotated-box IoU, average precision with KITTI difficulty buckets, and
clean-vs-attacked delta reporting.

BEV IoU intersects the two footprint rectangles by Sutherland-Hodgman polygon
clipping; areas come from the shoelace formula. AP uses greedy
score-descending matching with N-point interpolated precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D

CLIP_EPS = 1e-9

# KITTI difficulty gates: min 2D box height (px), max occlusion, max truncation
DIFFICULTY_GATES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}
DIFFICULTIES = ("easy", "moderate", "hard")


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a 2D polygon (positive for counter-clockwise order)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex `clipper` (both CCW)."""
    output = [p for p in np.asarray(subject, dtype=np.float64)]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a
        inputs, output = output, []

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        for j, cur in enumerate(inputs):
            prev = inputs[j - 1]
            s_cur, s_prev = side(cur), side(prev)
            if s_cur >= -CLIP_EPS:
                if s_prev < -CLIP_EPS:
                    output.append(_intersect(prev, cur, a, b))
                output.append(cur)
            elif s_prev >= -CLIP_EPS:
                output.append(_intersect(prev, cur, a, b))
    return np.array(output).reshape(-1, 2)


def _intersect(p1, p2, a, b):
    d1 = p2 - p1
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < CLIP_EPS:
        return p2.copy()
    t = ((a[0] - p1[0]) * d2[1] - (a[1] - p1[1]) * d2[0]) / denom
    return p1 + t * d1


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two oriented boxes (rotated-rectangle overlap)."""
    pa = a.bev_corners()
    pb = b.bev_corners()
    inter = abs(polygon_area(clip_polygon(pa, pb)))
    area_a = abs(polygon_area(pa))
    area_b = abs(polygon_area(pb))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, inter / union))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection area times the vertical overlap."""
    pa = a.bev_corners()
    pb = b.bev_corners()
    inter_area = abs(polygon_area(clip_polygon(pa, pb)))
    za0, za1 = a.z_range()
    zb0, zb1 = b.z_range()
    overlap = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_area * overlap
    vol_a = abs(polygon_area(pa)) * a.height
    vol_b = abs(polygon_area(pb)) * b.height
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, inter / union))


@dataclass
class Detection:
    box: Box3D
    score: float


@dataclass
class GtBox:
    """Ground-truth box with KITTI-style difficulty attributes."""

    box: Box3D
    truncation: float = 0.0
    occlusion: int = 0
    height_px: float = 100.0

    def in_bucket(self, difficulty: str) -> bool:
        min_h, max_occ, max_trunc = DIFFICULTY_GATES[difficulty]
        return (
            self.height_px >= min_h
            and self.occlusion <= max_occ
            and self.truncation <= max_trunc
        )


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    view: str = "bev"  # "bev" | "3d"
    n_recall_points: int = 40
    difficulties: tuple = DIFFICULTIES

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError("IoU threshold must be in (0, 1]")
        if self.view not in ("bev", "3d"):
            raise ValueError(f"unknown view {self.view!r}")

    def iou(self, a: Box3D, b: Box3D) -> float:
        return iou_bev(a, b) if self.view == "bev" else iou_3d(a, b)


@dataclass
class APReport:
    config: EvalConfig
    ap: dict[str, float]
    n_gts: dict[str, int]
    n_detections: int
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _pr_curve(dets_by_scene, gts_by_scene, cfg: EvalConfig, difficulty: str):
    """Greedy matching -> cumulative (recall, precision) arrays and gt count."""
    valid = [[g.in_bucket(difficulty) for g in gts] for gts in gts_by_scene]
    n_valid = sum(sum(v) for v in valid)

    order = []
    for si, dets in enumerate(dets_by_scene):
        order += [(d.score, si, di) for di, d in enumerate(dets)]
    order.sort(key=lambda x: (-x[0], x[1], x[2]))

    matched = [np.zeros(len(gts), dtype=bool) for gts in gts_by_scene]
    tp, fp = 0, 0
    recalls, precisions = [], []
    for score, si, di in order:
        det = dets_by_scene[si][di]
        gts = gts_by_scene[si]
        ious = [
            0.0 if matched[si][j] else cfg.iou(det.box, g.box) for j, g in enumerate(gts)
        ]
        # prefer in-bucket ground truths; ignore-region matches drop the det
        best_valid = max(
            (iou for j, iou in enumerate(ious) if valid[si][j]), default=0.0
        )
        best_ignored = max(
            (iou for j, iou in enumerate(ious) if not valid[si][j]), default=0.0
        )
        if best_valid >= cfg.iou_threshold:
            j = max(
                (j for j in range(len(gts)) if valid[si][j]), key=lambda j: ious[j]
            )
            matched[si][j] = True
            tp += 1
        elif best_ignored >= cfg.iou_threshold:
            j = max(
                (j for j in range(len(gts)) if not valid[si][j]), key=lambda j: ious[j]
            )
            matched[si][j] = True
            continue  # matched an ignore-region gt: neither TP nor FP
        else:
            fp += 1
        recalls.append(tp / n_valid if n_valid else 0.0)
        precisions.append(tp / (tp + fp))
    return np.array(recalls), np.array(precisions), n_valid


def _interpolated_ap(recalls: np.ndarray, precisions: np.ndarray, n_points: int) -> float:
    """Mean of max-precision-at-recall>=r over r in {i/N : i = 1..N}."""
    if len(recalls) == 0:
        return 0.0
    samples = np.arange(1, n_points + 1) / n_points
    ap = 0.0
    for r in samples:
        mask = recalls >= r - 1e-12
        ap += float(precisions[mask].max()) if mask.any() else 0.0
    return ap / n_points


def average_precision(dets_by_scene, gts_by_scene, cfg: EvalConfig) -> APReport:
    """Per-difficulty interpolated AP over per-scene detection/gt lists.

    Ground truths outside a difficulty bucket act as ignore regions there:
    detections matched to them are dropped from the PR curve entirely.
    """
    if len(dets_by_scene) != len(gts_by_scene):
        raise ValueError("detections and ground truths must cover the same scenes")
    ap: dict[str, float] = {}
    n_gts: dict[str, int] = {}
    curves = {}
    for difficulty in cfg.difficulties:
        recalls, precisions, n_valid = _pr_curve(dets_by_scene, gts_by_scene, cfg, difficulty)
        ap[difficulty] = _interpolated_ap(recalls, precisions, cfg.n_recall_points)
        n_gts[difficulty] = n_valid
        curves[difficulty] = (recalls, precisions)
    n_det = sum(len(d) for d in dets_by_scene)
    return APReport(config=cfg, ap=ap, n_gts=n_gts, n_detections=n_det, curves=curves)


@dataclass
class DeltaReport:
    difficulties: tuple
    clean_ap: dict[str, float]
    attacked_ap: dict[str, float]
    absolute_drop: dict[str, float]
    relative_drop: dict[str, float]  # fraction of clean AP lost


def attack_delta(clean: APReport, attacked: APReport) -> DeltaReport:
    """Absolute and relative AP drops per difficulty bucket."""
    if (
        clean.config.iou_threshold != attacked.config.iou_threshold
        or clean.config.view != attacked.config.view
        or clean.config.n_recall_points != attacked.config.n_recall_points
        or tuple(clean.config.difficulties) != tuple(attacked.config.difficulties)
    ):
        raise ValueError("AP reports were produced under different eval configs")
    absolute, relative = {}, {}
    for d in clean.config.difficulties:
        absolute[d] = clean.ap[d] - attacked.ap[d]
        relative[d] = absolute[d] / clean.ap[d] if clean.ap[d] > 0 else 0.0
    return DeltaReport(
        difficulties=tuple(clean.config.difficulties),
        clean_ap=dict(clean.ap),
        attacked_ap=dict(attacked.ap),
        absolute_drop=absolute,
        relative_drop=relative,
    )


def format_ap_table(rows: dict[str, APReport], percent: bool = True) -> str:
    """Aligned text table: one row per attack variant, one column per difficulty."""
    if not rows:
        return ""
    difficulties = tuple(next(iter(rows.values())).config.difficulties)
    headers = ["Attack Type"] + [d.capitalize() for d in difficulties]
    scale = 100.0 if percent else 1.0
    body = [
        [label] + [f"{report.ap[d] * scale:.2f}" for d in difficulties]
        for label, report in rows.items()
    ]
    widths = [max(len(r[c]) for r in [headers] + body) for c in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def ap_table_csv(rows: dict[str, APReport]) -> str:
    """CSV twin of format_ap_table (fractions, not percentages)."""
    if not rows:
        return ""
    difficulties = tuple(next(iter(rows.values())).config.difficulties)
    lines = ["attack," + ",".join(difficulties)]
    for label, report in rows.items():
        lines.append(label + "," + ",".join(repr(report.ap[d]) for d in difficulties))
    return "\n".join(lines) + "\n"


def bev_nms(detections: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy score-descending suppression of overlapping BEV boxes."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    keep: list[int] = []
    for i in order:
        if all(iou_bev(detections[i].box, detections[j].box) < iou_threshold for j in keep):
            keep.append(i)
    return [detections[i] for i in sorted(keep)]
