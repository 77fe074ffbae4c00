"""Adversarial objectives and the two-phase universal optimization loop.

Phase one (shape) deforms the mesh to suppress the point-cloud segmentation
stage; phase two (texture) freezes the geometry and learns vertex colors that
suppress 2D objectness. One displacement block and one color block are shared
across every scene and placement, which is what makes the attack universal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import AdamState, ParamBlock, adam_step
from .geometry import (
    TriMesh,
    apply_deformation,
    deformation_backward,
    extent_bounds,
    laplacian_loss,
    laplacian_loss_grad,
)
from .dataio import Scene, place_meshes
from .lidar import LidarConfig, lidar_backward, merge_into_scene, render_lidar
from .metrics import iou_bev
from .raster import color_backward, rasterize
from .victim import (
    InvalidStateError,
    TrainedVictim,
    estimate_box,
    extract_frustum,
    max_car_probability,
    pool_window,
    propose_2d,
    refine_mask,
    scorer_backward_features,
    scorer_forward,
    seg_backward,
    seg_forward,
    softmax2,
    unpool_to_window,
)

P_CLAMP = 1.0 - 1e-7


class InvariantViolation(RuntimeError):
    """A per-step attack invariant (bounds, decomposition) was broken."""


def car_prob(logits: np.ndarray) -> float | None:
    """Highest car probability among car-classified points; None when the
    cloud has no car-classified point (the attack already succeeded there)."""
    return max_car_probability(logits)


def l_mesh(batch: list[tuple[float | None, float]]) -> float:
    """Sum of -log(1 - p) * iou_weight over clouds with a present car prob."""
    total = 0.0
    for p, iou in batch:
        if p is None:
            continue
        total += -math.log(1.0 - min(p, P_CLAMP)) * iou
    return total


@dataclass
class AttackConfig:
    phase: str = "shape"  # "shape" | "texture"
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    lambda_lap: float = 0.1
    extent_limits: tuple[float, float, float] = (0.8, 0.8, 0.8)
    lr_shape: float = 0.01
    lr_texture: float = 0.05
    frustum_source: str = "gt"  # "gt" | "detector"
    clearance: float | None = None  # None: the base mesh's half height
    texture_iou_gate: float = 0.3

    def __post_init__(self):
        if self.phase not in ("shape", "texture"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.lambda_lap < 0:
            raise ValueError("laplacian weight must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.frustum_source not in ("gt", "detector"):
            raise ValueError(f"unknown frustum source {self.frustum_source!r}")


@dataclass
class AttackParams:
    """The universal adversarial object: one displacement block, one color block."""

    base_mesh: TriMesh
    displacement: ParamBlock
    colors: ParamBlock

    @classmethod
    def create(cls, base_mesh: TriMesh, extent_limits) -> "AttackParams":
        lo, hi = extent_bounds(base_mesh, np.asarray(extent_limits, dtype=np.float64))
        displacement = ParamBlock(
            "displacement", np.zeros_like(base_mesh.vertices), lower=lo, upper=hi
        )
        colors = ParamBlock("colors", base_mesh.colors.copy(), lower=0.0, upper=1.0)
        return cls(base_mesh=base_mesh, displacement=displacement, colors=colors)

    def local_mesh(self) -> TriMesh:
        """Deformed mesh in its local frame with the learned colors."""
        return TriMesh(
            self.base_mesh.vertices + self.displacement.values,
            self.base_mesh.faces.copy(),
            self.colors.values.copy(),
        )

    def default_clearance(self) -> float:
        lo, hi = self.base_mesh.bounding_box()
        return float(hi[2] - lo[2]) / 2.0


def _render_seed(seed: int, epoch: int, scene_idx: int, placement: int) -> int:
    return ((seed * 1000003 + epoch) * 1000003 + scene_idx) * 1000003 + placement


@dataclass
class LossReport:
    epoch: int
    batch: int
    l_mesh: float
    l_lap: float
    total: float
    image_loss: float
    scene_terms: list[tuple[float | None, float]] = field(default_factory=list)


def _colored_base(params: AttackParams) -> TriMesh:
    return TriMesh(
        params.base_mesh.vertices.copy(),
        params.base_mesh.faces.copy(),
        params.colors.values.copy(),
    )


def _concat_meshes(meshes: list[TriMesh]) -> TriMesh:
    offsets = np.cumsum([0] + [m.n_vertices for m in meshes[:-1]])
    return TriMesh(
        np.vstack([m.vertices for m in meshes]),
        np.vstack([m.faces + off for m, off in zip(meshes, offsets)]),
        np.vstack([m.colors for m in meshes]),
    )


def scene_pc_attack(
    params: AttackParams,
    scene: Scene,
    victim: TrainedVictim,
    lidar_cfg: LidarConfig,
    clearance: float,
    render_seed: int,
    accumulate_grad: bool = True,
) -> list[tuple[float | None, float]]:
    """Loss terms (p_k, iou_k) for one scene, accumulating displacement grads.

    The chain runs logits -> frustum points -> rendered hit points -> placed
    vertices -> displacement, with ray-face assignment, frustum membership,
    and the argmax point all frozen at the forward pass. IoU weights carry no
    gradient (the box fit is non-differentiable by design).
    """
    base = _colored_base(params)
    placements = place_meshes(scene, base, params.displacement.values, clearance)
    rendered, hit_lists = [], []
    for pi, (transform, placed) in enumerate(placements):
        pts, hits = render_lidar(placed, lidar_cfg.with_seed(_render_seed(render_seed, 0, 0, pi)))
        rendered.append(pts)
        hit_lists.append(hits)
    n_scene = len(scene.cloud)
    merged = scene.cloud
    if rendered:
        merged = merge_into_scene(scene.cloud, np.vstack(rendered) if any(len(r) for r in rendered) else np.zeros((0, 3)))
    offsets = np.cumsum([0] + [len(r) for r in rendered])

    point_grads = [np.zeros((len(h), 3)) for h in hit_lists]
    terms: list[tuple[float | None, float]] = []
    for obj in scene.objects:
        frustum = extract_frustum(merged, obj.box2d, scene.calib)
        if len(frustum) == 0:
            terms.append((None, 0.0))
            continue
        logits, cache = seg_forward(victim.segnet, frustum.points)
        probs = softmax2(logits)
        p = max_car_probability(logits)
        if p is None:
            terms.append((None, 0.0))
            continue
        mask = probs[:, 1] >= 0.5
        fitted = estimate_box(frustum, refine_mask(frustum, mask))
        iou = iou_bev(obj.box3d, fitted) if fitted is not None else 0.0
        terms.append((p, iou))
        if not accumulate_grad or iou == 0.0 or p >= P_CLAMP:
            continue
        # d/dp of -log(1-p) * iou
        dp = iou / (1.0 - p)
        car_rows = np.nonzero(mask)[0]
        star = car_rows[np.argmax(probs[car_rows, 1])]
        # two-class softmax: dp/dlogits at the argmax point
        dlogits = np.zeros_like(logits)
        dlogits[star] = dp * p * (1.0 - p) * np.array([-1.0, 1.0])
        dpoints, _ = seg_backward(victim.segnet, cache, dlogits)
        # frustum centering: q_i = x_i - mean(x)
        g_abs = dpoints - dpoints.mean(axis=0)
        for local, cloud_idx in enumerate(frustum.indices):
            if cloud_idx < n_scene:
                continue
            r = cloud_idx - n_scene
            pi = int(np.searchsorted(offsets, r, side="right") - 1)
            point_grads[pi][r - offsets[pi]] += g_abs[local]

    if accumulate_grad:
        for (transform, placed), hits, pg in zip(placements, hit_lists, point_grads):
            if len(hits) == 0:
                continue
            vertex_grads = lidar_backward(hits, pg, placed)
            params.displacement.add_grad(deformation_backward(transform, vertex_grads))
    return terms


def pc_loss(
    params: AttackParams,
    scenes: list[Scene],
    victim: TrainedVictim,
    lidar_cfg: LidarConfig,
    cfg: AttackConfig,
    epoch: int = 0,
    scene_indices: list[int] | None = None,
    accumulate_grad: bool = True,
) -> tuple[float, float, float, list[tuple[float | None, float]]]:
    """Batch point-cloud objective: l_mesh + lambda * laplacian smoothness.

    Returns (l_mesh, l_lap, total, per-cloud terms) and, when requested,
    accumulates the full-chain gradient into the displacement block.
    """
    clearance = cfg.clearance if cfg.clearance is not None else params.default_clearance()
    all_terms: list[tuple[float | None, float]] = []
    if scene_indices is None:
        scene_indices = list(range(len(scenes)))
    for si, scene in zip(scene_indices, scenes):
        seed = _render_seed(cfg.seed, epoch, si, 0)
        all_terms += scene_pc_attack(
            params, scene, victim, lidar_cfg, clearance, seed, accumulate_grad
        )
    mesh_term = l_mesh(all_terms)
    local = TriMesh(
        params.base_mesh.vertices + params.displacement.values,
        params.base_mesh.faces,
        params.base_mesh.colors,
    )
    lap = laplacian_loss(local)
    if accumulate_grad and cfg.lambda_lap > 0.0:
        params.displacement.add_grad(cfg.lambda_lap * laplacian_loss_grad(local))
    total = mesh_term + cfg.lambda_lap * lap
    return mesh_term, lap, total, all_terms


def scene_image_attack(
    params: AttackParams,
    scene: Scene,
    victim: TrainedVictim,
    clearance: float,
    iou_gate: float = 0.3,
    accumulate_grad: bool = True,
) -> tuple[float, int]:
    """Objectness sum over detections covering mesh-bearing cars, with color grads.

    The mesh (frozen geometry, learnable colors) is rasterized onto the scene
    image; detections from the 2D stage that overlap a ground-truth car at
    IoU >= iou_gate contribute their scores. Backward runs through the scorer
    to pixels and then through the coverage map to the shared vertex colors.
    """
    base = _colored_base(params)
    placements = place_meshes(scene, base, params.displacement.values, clearance)
    if not placements:
        return 0.0, 0
    cam_meshes = []
    for transform, placed in placements:
        cam_meshes.append(
            TriMesh(scene.calib.velo_to_rect(placed.vertices), placed.faces, placed.colors)
        )
    combined = _concat_meshes(cam_meshes)
    image, coverage = rasterize(combined, scene.calib.camera, scene.image)

    detections = propose_2d(image, victim.scorer, victim.proposal_threshold)
    kept = [
        det
        for det in detections
        if any(det.iou(obj.box2d) >= iou_gate for obj in scene.objects)
    ]
    loss = float(sum(det.score for det in kept))
    if not accumulate_grad or not kept:
        return loss, len(kept)

    image_grad = np.zeros_like(image)
    scorer = victim.scorer
    for det in kept:
        r, c = int(det.top), int(det.left)
        window = image[r : r + scorer.win_h, c : c + scorer.win_w]
        feats = pool_window(scorer, window)[None, :]
        _, cache = scorer_forward(scorer, feats)
        dfeat = scorer_backward_features(scorer, cache, np.array([1.0]))
        image_grad[r : r + scorer.win_h, c : c + scorer.win_w] += unpool_to_window(
            scorer, dfeat[0]
        )
    color_grads = color_backward(coverage, image_grad)
    v = params.base_mesh.n_vertices
    params.colors.add_grad(color_grads.reshape(-1, v, 3).sum(axis=0))
    return loss, len(kept)


def image_loss(
    params: AttackParams,
    scenes: list[Scene],
    victim: TrainedVictim,
    cfg: AttackConfig,
    accumulate_grad: bool = True,
) -> float:
    """Batch image objective: summed gated objectness across scenes."""
    clearance = cfg.clearance if cfg.clearance is not None else params.default_clearance()
    total = 0.0
    for scene in scenes:
        loss, _ = scene_image_attack(
            params, scene, victim, clearance, cfg.texture_iou_gate, accumulate_grad
        )
        total += loss
    return total


def _check_invariants(params: AttackParams) -> None:
    if not params.displacement.in_bounds():
        raise InvariantViolation("mesh extents exceed the configured limits")
    if not params.colors.in_bounds():
        raise InvariantViolation("vertex colors left [0, 1]")


def run_attack(
    cfg: AttackConfig,
    scenes: list[Scene],
    victim: TrainedVictim,
    base_mesh: TriMesh,
    lidar_cfg: LidarConfig | None = None,
    params: AttackParams | None = None,
) -> tuple[AttackParams, list[LossReport]]:
    """Universal attack training for one phase over all scenes.

    Shape phase: displacement updates only, colors bit-unchanged. Texture
    phase: color updates only, displacements bit-unchanged. Every optimizer
    step enforces the extent and color bounds and the exact objective
    decomposition.
    """
    if not victim.meets_gates():
        raise InvalidStateError(
            f"victim accuracy gates unmet ({victim.gates}); retrain before attacking"
        )
    if cfg.phase == "shape" and lidar_cfg is None:
        raise ValueError("shape phase needs a LidarConfig")
    if params is None:
        params = AttackParams.create(base_mesh, cfg.extent_limits)

    lr = cfg.lr_shape if cfg.phase == "shape" else cfg.lr_texture
    state = AdamState(lr=lr)
    block = params.displacement if cfg.phase == "shape" else params.colors
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 33)))
    reports: list[LossReport] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        for batch_no, start in enumerate(range(0, len(scenes), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = [scenes[i] for i in idx]
            block.zero_grad()
            if cfg.phase == "shape":
                mesh_term, lap, total, terms = pc_loss(
                    params, batch, victim, lidar_cfg, cfg,
                    epoch=epoch, scene_indices=[int(i) for i in idx],
                )
                img_term = 0.0
            else:
                img_term = image_loss(params, batch, victim, cfg)
                mesh_term, lap, total, terms = 0.0, 0.0, 0.0, []
            adam_step(block, state)
            _check_invariants(params)
            if abs(total - (mesh_term + cfg.lambda_lap * lap)) > 1e-12:
                raise InvariantViolation("objective decomposition drifted")
            reports.append(
                LossReport(
                    epoch=epoch, batch=batch_no,
                    l_mesh=mesh_term, l_lap=lap, total=total,
                    image_loss=img_term, scene_terms=terms,
                )
            )
    return params, reports


def loss_csv(reports: list[LossReport]) -> str:
    lines = ["epoch,batch,L_mesh,L_lap,total,image_loss"]
    for r in reports:
        lines.append(
            f"{r.epoch},{r.batch},{r.l_mesh!r},{r.l_lap!r},{r.total!r},{r.image_loss!r}"
        )
    return "\n".join(lines) + "\n"


def save_attack_params(path, params: AttackParams, phase: str = "") -> None:
    """Self-contained checkpoint: parameter blocks plus the base mesh."""
    from .diffcore import save_checkpoint

    blocks = [
        params.displacement,
        params.colors,
        ParamBlock("base_vertices", params.base_mesh.vertices),
        ParamBlock("base_faces", params.base_mesh.faces.astype(np.float64)),
        ParamBlock("base_colors", params.base_mesh.colors),
    ]
    save_checkpoint(path, blocks, meta={"phase": phase})


def load_attack_params(path) -> AttackParams:
    from .diffcore import load_checkpoint

    blocks, _, _ = load_checkpoint(path)
    by_name = {b.name: b for b in blocks}
    base = TriMesh(
        by_name["base_vertices"].values,
        by_name["base_faces"].values.astype(np.int64),
        by_name["base_colors"].values,
    )
    params = AttackParams(
        base_mesh=base,
        displacement=by_name["displacement"],
        colors=by_name["colors"],
    )
    return params


# --- scene assembly for evaluation and rendering ------------------------------

def apply_mesh_to_scene(
    scene: Scene,
    params: AttackParams,
    lidar_cfg: LidarConfig,
    clearance: float | None = None,
    seed: int = 0,
    modalities: tuple[str, ...] = ("pc", "img"),
) -> Scene:
    """Scene copy with the adversarial object rendered into the chosen modalities."""
    clearance = clearance if clearance is not None else params.default_clearance()
    base = _colored_base(params)
    placements = place_meshes(scene, base, params.displacement.values, clearance)
    cloud = scene.cloud
    image = scene.image
    if "pc" in modalities and placements:
        rendered = []
        for pi, (transform, placed) in enumerate(placements):
            pts, _ = render_lidar(placed, lidar_cfg.with_seed(_render_seed(seed, 1, 0, pi)))
            rendered.append(pts)
        stacked = np.vstack([r for r in rendered if len(r)]) if any(len(r) for r in rendered) else np.zeros((0, 3))
        cloud = merge_into_scene(scene.cloud, stacked)
    if "img" in modalities and placements:
        cam_meshes = [
            TriMesh(scene.calib.velo_to_rect(placed.vertices), placed.faces, placed.colors)
            for _, placed in placements
        ]
        image, _ = rasterize(_concat_meshes(cam_meshes), scene.calib.camera, scene.image)
    return Scene(scene.scene_id, cloud, image, scene.calib, scene.objects)
