"""Desk-scale cascaded detector: a sliding-window 2D objectness stage gates
frustum extraction, a per-point segmentation network labels frustum points,
and a deterministic geometric fit produces the 3D box.

The stand-in keeps the cascade structure of camera-first 3D detectors (no 3D
detection without a 2D proposal) while staying small enough to train from
scratch on the synthetic dataset. All layers are plain numpy with explicit
backward functions, so the attack can differentiate through the image scores
and the per-point logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box2D, Box3D
from .dataio import Calibration, Scene
from .diffcore import AdamState, ParamBlock, adam_step, load_checkpoint, save_checkpoint
from .metrics import Detection, EvalConfig, GtBox, average_precision, bev_nms

LRELU_SLOPE = 0.01


class InvalidStateError(RuntimeError):
    """Operation requires a trained model."""


class TrainingError(RuntimeError):
    """Victim training diverged or failed."""


def _lrelu(x):
    return np.where(x > 0.0, x, LRELU_SLOPE * x)


def _lrelu_grad(pre):
    return np.where(pre > 0.0, 1.0, LRELU_SLOPE)


def softmax2(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax for (n, 2) logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def max_car_probability(logits: np.ndarray) -> float | None:
    """Highest softmax car probability among points whose argmax class is car.

    Class order is (not-car, car); the argmax tie at probability 0.5 counts as
    car. Returns None when no point is classified as car.
    """
    if len(logits) == 0:
        return None
    probs = softmax2(np.asarray(logits, dtype=np.float64))
    car = probs[:, 1] >= 0.5
    if not car.any():
        return None
    return float(probs[car, 1].max())


# --- frustum extraction -----------------------------------------------------

@dataclass
class Frustum:
    """Points whose projections fall inside one 2D box, centroid-centered."""

    box: Box2D
    indices: np.ndarray  # (k,) indices into the source cloud
    points: np.ndarray  # (k, 3) sensor-frame points minus centroid
    centroid: np.ndarray  # (3,)

    def __len__(self) -> int:
        return len(self.indices)


def extract_frustum(cloud: np.ndarray, box: Box2D, calib: Calibration) -> Frustum:
    """Exactly the positive-depth points projecting inside the box."""
    pts = np.asarray(cloud, dtype=np.float64)[:, :3]
    if len(pts) == 0:
        return Frustum(box, np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(3))
    pix, depth = calib.project_velo(pts)
    inside = (
        (depth > 0.0)
        & (pix[:, 0] >= box.left) & (pix[:, 0] <= box.right)
        & (pix[:, 1] >= box.top) & (pix[:, 1] <= box.bottom)
    )
    idx = np.nonzero(inside)[0]
    member = pts[idx]
    centroid = member.mean(axis=0) if len(idx) else np.zeros(3)
    return Frustum(box, idx.astype(np.int64), member - centroid, centroid)


# --- per-point segmentation network ------------------------------------------

@dataclass
class SegNet:
    """Per-point encoder (3 -> h -> h), max-pooled global feature, and a
    classifier on [point feature, global feature] -> 2 logits."""

    w1: np.ndarray  # (h, 3)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, h)
    b2: np.ndarray  # (h,)
    w3: np.ndarray  # (h, 2h)
    b3: np.ndarray  # (h,)
    w4: np.ndarray  # (2, h)
    b4: np.ndarray  # (2,)

    @property
    def hidden(self) -> int:
        return len(self.b1)

    @classmethod
    def create(cls, hidden: int = 64, seed: int = 0) -> "SegNet":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))

        def he(shape):
            fan_in = shape[1]
            return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)

        return cls(
            w1=he((hidden, 3)), b1=np.zeros(hidden),
            w2=he((hidden, hidden)), b2=np.zeros(hidden),
            w3=he((hidden, 2 * hidden)), b3=np.zeros(hidden),
            w4=he((2, hidden)), b4=np.zeros(2),
        )

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
            "w3": self.w3, "b3": self.b3, "w4": self.w4, "b4": self.b4,
        }


@dataclass
class SegCache:
    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    pool_rows: np.ndarray  # argmax row per global feature
    feats: np.ndarray
    a3: np.ndarray
    h3: np.ndarray


def seg_forward(net: SegNet, points: np.ndarray) -> tuple[np.ndarray, SegCache]:
    """Per-point logits (n, 2) plus the cache needed for backward."""
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a1 = x @ net.w1.T + net.b1
    h1 = _lrelu(a1)
    a2 = h1 @ net.w2.T + net.b2
    h2 = _lrelu(a2)
    pool_rows = np.argmax(h2, axis=0) if len(x) else np.zeros(net.hidden, dtype=np.int64)
    g = h2[pool_rows, np.arange(net.hidden)] if len(x) else np.zeros(net.hidden)
    feats = np.concatenate([h2, np.broadcast_to(g, h2.shape)], axis=1)
    a3 = feats @ net.w3.T + net.b3
    h3 = _lrelu(a3)
    logits = h3 @ net.w4.T + net.b4
    return logits, SegCache(x, a1, h1, a2, h2, pool_rows, feats, a3, h3)


def seg_backward(
    net: SegNet, cache: SegCache, dlogits: np.ndarray, want_weight_grads: bool = False
) -> tuple[np.ndarray, dict[str, np.ndarray] | None]:
    """Gradients w.r.t. input points and (optionally) the weights.

    The max-pool routes the global-feature gradient to the argmax point of
    each feature channel, as frozen at the forward pass.
    """
    n, h = cache.h2.shape
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(n, 2)
    dh3 = dlogits @ net.w4
    da3 = dh3 * _lrelu_grad(cache.a3)
    dfeats = da3 @ net.w3
    dh2 = dfeats[:, :h].copy()
    dg = dfeats[:, h:].sum(axis=0)
    dh2[cache.pool_rows, np.arange(h)] += dg
    da2 = dh2 * _lrelu_grad(cache.a2)
    dh1 = da2 @ net.w2
    da1 = dh1 * _lrelu_grad(cache.a1)
    dx = da1 @ net.w1

    grads = None
    if want_weight_grads:
        grads = {
            "w4": dlogits.T @ cache.h3, "b4": dlogits.sum(axis=0),
            "w3": da3.T @ cache.feats, "b3": da3.sum(axis=0),
            "w2": da2.T @ cache.h1, "b2": da2.sum(axis=0),
            "w1": da1.T @ cache.x, "b1": da1.sum(axis=0),
        }
    return dx, grads


def segment(net: SegNet, frustum: Frustum) -> np.ndarray:
    """Per-point (n, 2) logits; empty frustum gives empty logits."""
    if len(frustum) == 0:
        return np.zeros((0, 2))
    logits, _ = seg_forward(net, frustum.points)
    return logits


# --- 2D objectness stage -----------------------------------------------------

@dataclass
class Scorer2D:
    """Sliding-window objectness over a coarse anchor grid.

    Each window is average-pooled, flattened, and scored by a one-hidden-layer
    logistic MLP; the pooling keeps score gradients w.r.t. pixels cheap and
    exact. A single anchor scale is matched to the synthetic sprite size.
    """

    win_h: int
    win_w: int
    stride: int
    pool: int
    w1: np.ndarray  # (hidden, features)
    b1: np.ndarray
    w2: np.ndarray  # (hidden,)
    b2: float
    trained: bool = False

    @classmethod
    def create(
        cls, win_h: int = 44, win_w: int = 68, stride: int = 16,
        pool: int = 4, hidden: int = 64, seed: int = 0,
    ) -> "Scorer2D":
        if win_h % pool or win_w % pool:
            raise ValueError("window size must be divisible by the pool factor")
        rng = np.random.default_rng(np.random.SeedSequence((seed, 202)))
        feat = (win_h // pool) * (win_w // pool) * 3
        return cls(
            win_h=win_h, win_w=win_w, stride=stride, pool=pool,
            w1=rng.normal(0.0, math.sqrt(2.0 / feat), (hidden, feat)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, math.sqrt(2.0 / hidden), hidden),
            b2=0.0,
        )

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def anchor_grid(self, height: int, width: int) -> list[tuple[int, int]]:
        """Top-left (row, col) of every anchor window inside the image."""
        rows = range(0, height - self.win_h + 1, self.stride)
        cols = range(0, width - self.win_w + 1, self.stride)
        return [(r, c) for r in rows for c in cols]

    def anchor_boxes(self, height: int, width: int) -> list[Box2D]:
        return [
            Box2D(c, r, c + self.win_w, r + self.win_h)
            for r, c in self.anchor_grid(height, width)
        ]


def pool_window(scorer: Scorer2D, window: np.ndarray) -> np.ndarray:
    """Average-pool one (win_h, win_w, 3) window and flatten, centered at 0."""
    p = scorer.pool
    pooled = window.reshape(
        scorer.win_h // p, p, scorer.win_w // p, p, 3
    ).mean(axis=(1, 3))
    return pooled.reshape(-1) - 0.5


def pooled_features(scorer: Scorer2D, image: np.ndarray) -> np.ndarray:
    """Pooled feature vectors for every anchor window, (n_anchors, features)."""
    image = np.asarray(image, dtype=np.float64)
    grid = scorer.anchor_grid(image.shape[0], image.shape[1])
    return np.stack(
        [
            pool_window(scorer, image[r : r + scorer.win_h, c : c + scorer.win_w])
            for r, c in grid
        ]
    ) if grid else np.zeros((0, scorer.w1.shape[1]))


def scorer_forward(scorer: Scorer2D, feats: np.ndarray):
    """Objectness in (0, 1) per feature row, plus the backward cache."""
    a1 = feats @ scorer.w1.T + scorer.b1
    h1 = _lrelu(a1)
    logit = h1 @ scorer.w2 + scorer.b2
    score = 1.0 / (1.0 + np.exp(-logit))
    return score, (feats, a1, h1, logit, score)


def scorer_backward_features(scorer: Scorer2D, cache, dscore: np.ndarray) -> np.ndarray:
    """d(loss)/d(pooled features) given d(loss)/d(score)."""
    feats, a1, h1, logit, score = cache
    dlogit = dscore * score * (1.0 - score)
    dh1 = dlogit[:, None] * scorer.w2[None, :]
    da1 = dh1 * _lrelu_grad(a1)
    return da1 @ scorer.w1


def scorer_backward_weights(scorer: Scorer2D, cache, dlogit: np.ndarray) -> dict[str, np.ndarray]:
    feats, a1, h1, _, _ = cache
    dh1 = dlogit[:, None] * scorer.w2[None, :]
    da1 = dh1 * _lrelu_grad(a1)
    return {
        "w1": da1.T @ feats, "b1": da1.sum(axis=0),
        "w2": h1.T @ dlogit, "b2": float(dlogit.sum()),
    }


def unpool_to_window(scorer: Scorer2D, dfeat: np.ndarray) -> np.ndarray:
    """Adjoint of pool_window: spread pooled-cell gradients over their pixels."""
    p = scorer.pool
    grid = dfeat.reshape(scorer.win_h // p, scorer.win_w // p, 3) / (p * p)
    return np.repeat(np.repeat(grid, p, axis=0), p, axis=1)


def nms_2d(boxes: list[Box2D], iou_threshold: float = 0.5) -> list[Box2D]:
    """Greedy score-descending suppression; survivors have pairwise IoU < threshold."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    keep: list[int] = []
    for i in order:
        if all(boxes[i].iou(boxes[j]) < iou_threshold for j in keep):
            keep.append(i)
    return [boxes[i] for i in sorted(keep)]


def propose_2d(
    image: np.ndarray, scorer: Scorer2D,
    threshold: float = 0.5, nms_iou: float = 0.5,
) -> list[Box2D]:
    """Objectness over the anchor grid, thresholded and NMS-suppressed."""
    if not scorer.trained:
        raise InvalidStateError("2D scorer has not been trained")
    image = np.asarray(image, dtype=np.float64)
    grid = scorer.anchor_grid(image.shape[0], image.shape[1])
    if not grid:
        return []
    scores, _ = scorer_forward(scorer, pooled_features(scorer, image))
    boxes = [
        Box2D(c, r, c + scorer.win_w, r + scorer.win_h, score=float(s))
        for (r, c), s in zip(grid, scores)
        if s >= threshold
    ]
    return nms_2d(boxes, nms_iou)


# --- box estimation and the cascade ------------------------------------------

MIN_BOX_POINTS = 8


def estimate_box(frustum: Frustum, car_mask: np.ndarray) -> Box3D | None:
    """Deterministic geometric fit of the masked points; None below 8 points.

    Yaw comes from the principal ground-plane axis, extents from min/max
    projections onto the yaw frame, and the center from extent midpoints.
    """
    car_mask = np.asarray(car_mask, dtype=bool)
    if car_mask.shape != (len(frustum),):
        raise ValueError("mask length must match frustum size")
    if car_mask.sum() < MIN_BOX_POINTS:
        return None
    pts = frustum.points[car_mask] + frustum.centroid
    xy = pts[:, :2]
    mean_xy = xy.mean(axis=0)
    cov = np.cov((xy - mean_xy).T)
    _, vecs = np.linalg.eigh(cov)
    principal = vecs[:, -1]
    yaw = math.atan2(principal[1], principal[0])
    c, s = math.cos(yaw), math.sin(yaw)
    u = xy[:, 0] * c + xy[:, 1] * s
    v = -xy[:, 0] * s + xy[:, 1] * c
    z = pts[:, 2]
    length = max(float(u.max() - u.min()), 0.05)
    width = max(float(v.max() - v.min()), 0.05)
    height = max(float(z.max() - z.min()), 0.05)
    mu = (u.max() + u.min()) / 2.0
    mv = (v.max() + v.min()) / 2.0
    center = np.array(
        [mu * c - mv * s, mu * s + mv * c, (z.max() + z.min()) / 2.0]
    )
    return Box3D(center=center, height=height, width=width, length=length, yaw=yaw)


def refine_mask(
    frustum: Frustum,
    car_mask: np.ndarray,
    ground_band: float = 0.12,
    radius: float = 2.8,
) -> np.ndarray:
    """Clean a segmentation mask before the min/max box fit.

    Two deterministic passes: drop masked points within `ground_band` of the
    frustum's ground height (a low z-quantile; stray positives on the ground
    plane otherwise inflate the extents), then drop points farther than
    `radius` from the masked median in the ground plane.
    """
    car_mask = np.asarray(car_mask, dtype=bool)
    if not car_mask.any():
        return car_mask
    z = frustum.points[:, 2] + frustum.centroid[2]
    ground = np.quantile(z, 0.03)
    keep = car_mask & (z > ground + ground_band)
    if not keep.any():
        return keep
    pts = frustum.points[:, :2]
    med = np.median(pts[keep], axis=0)
    return keep & (np.linalg.norm(pts - med, axis=1) <= radius)


@dataclass
class TrainedVictim:
    scorer: Scorer2D
    segnet: SegNet
    gates: dict[str, float] = field(default_factory=dict)
    proposal_threshold: float = 0.5
    clearance_hint: float = 0.0  # echoed mesh half-height used in training clutter

    def meets_gates(self, seg_floor: float = 0.90, ap_floor: float = 0.80) -> bool:
        return (
            self.gates.get("seg_accuracy", 0.0) >= seg_floor
            and self.gates.get("clean_bev_ap", 0.0) >= ap_floor
        )


def detect_scene(
    victim: TrainedVictim,
    scene: Scene,
    frustum_source: str = "detector",
    nms_bev_iou: float = 0.5,
) -> list[Detection]:
    """Full cascade on one scene: proposals -> frustums -> segmentation -> fit.

    `frustum_source` of "gt" uses ground-truth 2D boxes and scores detections
    by the max car probability; "detector" uses 2D proposals and their
    objectness scores. A final BEV NMS removes duplicate boxes produced by
    overlapping proposals.
    """
    if frustum_source == "detector":
        proposals = propose_2d(scene.image, victim.scorer, victim.proposal_threshold)
    elif frustum_source == "gt":
        proposals = [obj.box2d for obj in scene.objects]
    else:
        raise ValueError(f"unknown frustum source {frustum_source!r}")

    detections: list[Detection] = []
    for box in proposals:
        frustum = extract_frustum(scene.cloud, box, scene.calib)
        if len(frustum) == 0:
            continue
        logits = segment(victim.segnet, frustum)
        probs = softmax2(logits)
        mask = probs[:, 1] >= 0.5
        fitted = estimate_box(frustum, refine_mask(frustum, mask))
        if fitted is None:
            continue
        if frustum_source == "gt":
            p = max_car_probability(logits)
            score = p if p is not None else 0.0
        else:
            score = box.score
        detections.append(Detection(box=fitted, score=score))
    return bev_nms(detections, nms_bev_iou)


# --- training ----------------------------------------------------------------

@dataclass
class VictimTrainConfig:
    seg_hidden: int = 64
    seg_steps: int = 900
    seg_batch_frustums: int = 6
    seg_lr: float = 0.004
    scorer_steps: int = 700
    scorer_batch: int = 64
    scorer_lr: float = 0.003
    box_jitter_scale: float = 0.1  # proposal-augmentation: relative size jitter
    box_jitter_shift: float = 8.0  # pixels
    clutter_fraction: float = 0.5  # cars given a benign roof box during training
    clutter_size: tuple[float, float] = (0.5, 0.9)  # edge length range, meters
    label_margin: float = 0.08  # box-membership margin for seg labels, meters
    not_car_weight: float = 2.0  # loss weight discouraging car false positives
    seed: int = 0


def _jitter_box(rng, box: Box2D, cfg: VictimTrainConfig, width: int, height: int) -> Box2D:
    sx = 1.0 + rng.uniform(-cfg.box_jitter_scale, cfg.box_jitter_scale)
    sy = 1.0 + rng.uniform(-cfg.box_jitter_scale, cfg.box_jitter_scale)
    dx = rng.uniform(-cfg.box_jitter_shift, cfg.box_jitter_shift)
    dy = rng.uniform(-cfg.box_jitter_shift, cfg.box_jitter_shift)
    cx = (box.left + box.right) / 2.0 + dx
    cy = (box.top + box.bottom) / 2.0 + dy
    hw = box.width * sx / 2.0
    hh = box.height * sy / 2.0
    left = min(max(0.0, cx - hw), width - 2.0)
    top = min(max(0.0, cy - hh), height - 2.0)
    right = max(min(float(width), cx + hw), left + 1.0)
    bottom = max(min(float(height), cy + hh), top + 1.0)
    return Box2D(left, top, right, bottom)


def _clutter_scene(rng, scene: Scene, cfg: VictimTrainConfig) -> tuple[Scene, list[Box3D]]:
    """Copy of a scene with benign roof boxes on a subset of cars.

    Hardens the victim against the mere presence of roof objects so the
    attack has to work through the optimization, not novelty.
    """
    from .dataio import box_shell_points, car_sprite_mesh
    from .raster import rasterize

    clutter_boxes: list[Box3D] = []
    extra_points = []
    sprites = []
    for obj in scene.objects:
        if rng.random() >= cfg.clutter_fraction:
            continue
        edge = rng.uniform(*cfg.clutter_size)
        center = obj.box3d.center + np.array(
            [0.0, 0.0, obj.box3d.height / 2.0 + edge / 2.0]
        )
        box = Box3D(center=center, height=edge, width=edge, length=edge, yaw=obj.box3d.yaw)
        clutter_boxes.append(box)
        extra_points.append(box_shell_points(rng, box, 45.0, 0.012))
        gray = np.full(3, rng.uniform(0.35, 0.65))
        sprites.append(car_sprite_mesh(box, scene.calib, gray))

    if not clutter_boxes:
        return scene, []
    cloud = np.vstack(
        [scene.cloud]
        + [np.column_stack([p, np.full(len(p), 0.5)]) for p in extra_points]
    )
    image = scene.image
    for sprite in sprites:
        image, _ = rasterize(sprite, scene.calib.camera, image)
    out = Scene(scene.scene_id, cloud, image, scene.calib, scene.objects)
    return out, clutter_boxes


def _seg_labels(target: Box3D, frustum: Frustum, margin: float) -> np.ndarray:
    """Per-point labels for one frustum: 1 iff inside the target car's box.

    Only the frustum's own car counts (single object per frustum); points of
    other cars leaking into an overlapping frustum are negatives, which
    teaches the network to suppress off-center objects.
    """
    pts = frustum.points + frustum.centroid
    labels = np.zeros(len(frustum), dtype=np.int64)
    labels[target.contains(pts, margin=margin)] = 1
    return labels


def _adam_blocks(arrays: dict[str, np.ndarray], lr: float):
    """ParamBlocks aliasing the live weight arrays, plus their ADAM states."""
    blocks, states = {}, {}
    for name, arr in arrays.items():
        values = np.atleast_1d(np.asarray(arr, dtype=np.float64))
        blocks[name] = ParamBlock(name, values)
        states[name] = AdamState(lr=lr)
    return blocks, states


def train_victim(
    scenes: list[Scene],
    val_scenes: list[Scene],
    cfg: VictimTrainConfig | None = None,
    eval_cfg: EvalConfig | None = None,
) -> tuple[TrainedVictim, dict[str, float]]:
    """Train the 2D scorer and the segmentation network on synthetic scenes.

    Returns the trained victim and a report with held-out segmentation
    accuracy and clean BEV AP. Raises TrainingError on non-finite losses.
    """
    cfg = cfg or VictimTrainConfig()
    eval_cfg = eval_cfg or EvalConfig(iou_threshold=0.5, view="bev")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7)))

    # benign roof clutter on a training copy
    train_scenes = []
    for scene in scenes:
        augmented, _ = _clutter_scene(rng, scene, cfg)
        train_scenes.append(augmented)

    scorer = _train_scorer(train_scenes, cfg, rng)
    segnet = _train_segnet(train_scenes, cfg, rng)

    victim = TrainedVictim(scorer=scorer, segnet=segnet)
    report = evaluate_victim(victim, val_scenes, cfg, eval_cfg)
    victim.gates = dict(report)
    return victim, report


def _train_scorer(scenes: list[Scene], cfg: VictimTrainConfig, rng) -> Scorer2D:
    scorer = Scorer2D.create(seed=cfg.seed)
    feats_list, labels_list = [], []
    for scene in scenes:
        boxes = scorer.anchor_boxes(scene.calib.image_height, scene.calib.image_width)
        feats = pooled_features(scorer, scene.image)
        ious = np.zeros(len(boxes))
        best_anchor = {}
        for gi, obj in enumerate(scene.objects):
            per = np.array([b.iou(obj.box2d) for b in boxes])
            ious = np.maximum(ious, per)
            best_anchor[gi] = int(per.argmax())
        labels = np.full(len(boxes), -1, dtype=np.int64)  # -1 = don't train
        labels[ious < 0.25] = 0
        labels[ious >= 0.5] = 1
        for gi, ai in best_anchor.items():
            labels[ai] = 1
        keep = labels >= 0
        feats_list.append(feats[keep])
        labels_list.append(labels[keep])
    feats = np.vstack(feats_list)
    labels = np.concatenate(labels_list)
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    if len(pos) == 0 or len(neg) == 0:
        raise TrainingError("scorer training needs both positive and negative anchors")

    blocks, states = _adam_blocks(scorer.param_arrays(), cfg.scorer_lr)
    scorer.w1 = blocks["w1"].values
    scorer.b1 = blocks["b1"].values
    scorer.w2 = blocks["w2"].values
    half = cfg.scorer_batch // 2
    for step in range(cfg.scorer_steps):
        take = np.concatenate(
            [rng.choice(pos, half), rng.choice(neg, cfg.scorer_batch - half)]
        )
        fb = feats[take]
        yb = labels[take].astype(np.float64)
        score, cache = scorer_forward(scorer, fb)
        loss = -np.mean(yb * np.log(score + 1e-12) + (1 - yb) * np.log(1 - score + 1e-12))
        if not np.isfinite(loss):
            raise TrainingError(f"scorer loss diverged at step {step}")
        dlogit = (score - yb) / len(yb)
        grads = scorer_backward_weights(scorer, cache, dlogit)
        for name in ("w1", "b1", "w2"):
            blocks[name].zero_grad()
            blocks[name].add_grad(grads[name])
            adam_step(blocks[name], states[name])
        blocks["b2"].zero_grad()
        blocks["b2"].add_grad(np.array([grads["b2"]]))
        adam_step(blocks["b2"], states["b2"])
        scorer.b2 = float(blocks["b2"].values[0])
    scorer.trained = True
    return scorer


def _train_segnet(scenes: list[Scene], cfg: VictimTrainConfig, rng) -> SegNet:
    net = SegNet.create(hidden=cfg.seg_hidden, seed=cfg.seed)
    samples: list[tuple[np.ndarray, np.ndarray]] = []
    for scene in scenes:
        w, h = scene.calib.image_width, scene.calib.image_height
        for obj in scene.objects:
            for jitter in (False, True):
                box = _jitter_box(rng, obj.box2d, cfg, w, h) if jitter else obj.box2d
                frustum = extract_frustum(scene.cloud, box, scene.calib)
                if len(frustum) < MIN_BOX_POINTS:
                    continue
                samples.append((frustum.points, _seg_labels(obj.box3d, frustum, cfg.label_margin)))
    if not samples:
        raise TrainingError("no frustum samples for segmentation training")

    blocks, states = _adam_blocks(net.param_arrays(), cfg.seg_lr)
    for name, block in blocks.items():
        setattr(net, name, block.values)
    for step in range(cfg.seg_steps):
        take = rng.choice(len(samples), cfg.seg_batch_frustums)
        for block in blocks.values():
            block.zero_grad()
        total = 0.0
        for k in take:
            pts, labels = samples[k]
            logits, cache = seg_forward(net, pts)
            probs = softmax2(logits)
            n = len(labels)
            weights = np.where(labels == 0, cfg.not_car_weight, 1.0)
            weights = weights / weights.sum()
            total += -float(np.sum(weights * np.log(probs[np.arange(n), labels] + 1e-12)))
            dlogits = probs.copy()
            dlogits[np.arange(n), labels] -= 1.0
            dlogits *= weights[:, None] / cfg.seg_batch_frustums
            _, grads = seg_backward(net, cache, dlogits, want_weight_grads=True)
            for name, g in grads.items():
                blocks[name].add_grad(g)
        if not np.isfinite(total):
            raise TrainingError(f"segmentation loss diverged at step {step}")
        for name, block in blocks.items():
            adam_step(block, states[name])
    return net


def evaluate_victim(
    victim: TrainedVictim,
    val_scenes: list[Scene],
    cfg: VictimTrainConfig,
    eval_cfg: EvalConfig,
) -> dict[str, float]:
    """Held-out per-point segmentation accuracy and clean BEV AP."""
    correct = 0
    total = 0
    for scene in val_scenes:
        for obj in scene.objects:
            frustum = extract_frustum(scene.cloud, obj.box2d, scene.calib)
            if len(frustum) == 0:
                continue
            logits = segment(victim.segnet, frustum)
            pred = np.argmax(logits, axis=1)
            labels = _seg_labels(obj.box3d, frustum, cfg.label_margin)
            correct += int((pred == labels).sum())
            total += len(labels)
    seg_accuracy = correct / total if total else 0.0

    dets = [detect_scene(victim, s, frustum_source="detector") for s in val_scenes]
    gts = [
        [
            GtBox(obj.box3d, obj.truncation, obj.occlusion, obj.height_px)
            for obj in s.objects
        ]
        for s in val_scenes
    ]
    report = average_precision(dets, gts, eval_cfg)
    return {
        "seg_accuracy": float(seg_accuracy),
        "clean_bev_ap": float(report.ap["moderate"]),
    }


# --- checkpointing -----------------------------------------------------------

def save_victim(path, victim: TrainedVictim) -> None:
    blocks = []
    for prefix, arrays in (
        ("scorer", victim.scorer.param_arrays()),
        ("segnet", victim.segnet.param_arrays()),
    ):
        for name, arr in arrays.items():
            blocks.append(ParamBlock(f"{prefix}.{name}", np.atleast_1d(np.asarray(arr))))
    meta = {
        "gates": victim.gates,
        "proposal_threshold": victim.proposal_threshold,
        "scorer": {
            "win_h": victim.scorer.win_h, "win_w": victim.scorer.win_w,
            "stride": victim.scorer.stride, "pool": victim.scorer.pool,
        },
        "seg_hidden": victim.segnet.hidden,
    }
    save_checkpoint(path, blocks, meta=meta)


def load_victim(path) -> TrainedVictim:
    blocks, meta, _ = load_checkpoint(path)
    by_name = {b.name: b.values for b in blocks}
    sc = meta["scorer"]
    scorer = Scorer2D(
        win_h=sc["win_h"], win_w=sc["win_w"], stride=sc["stride"], pool=sc["pool"],
        w1=by_name["scorer.w1"], b1=by_name["scorer.b1"],
        w2=by_name["scorer.w2"], b2=float(by_name["scorer.b2"][0]),
        trained=True,
    )
    segnet = SegNet(
        w1=by_name["segnet.w1"], b1=by_name["segnet.b1"],
        w2=by_name["segnet.w2"], b2=by_name["segnet.b2"],
        w3=by_name["segnet.w3"], b3=by_name["segnet.b3"],
        w4=by_name["segnet.w4"], b4=by_name["segnet.b4"],
    )
    victim = TrainedVictim(
        scorer=scorer, segnet=segnet,
        gates={k: float(v) for k, v in meta["gates"].items()},
        proposal_threshold=float(meta["proposal_threshold"]),
    )
    return victim
