"""Simulated LiDAR: beam-pattern rays, ray/triangle intersection, and the
closed-form adjoint that routes point-cloud gradients back to mesh vertices.

The sensor fires one ray per (elevation, azimuth) lattice point. Rendering
keeps the nearest hit per ray, adds seeded Gaussian range noise along the ray,
and records the noiseless hit geometry so gradients can be computed with the
ray-to-face assignment frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import TriMesh

T_MIN = 1e-6  # smallest accepted ray parameter, meters
DET_EPS = 1e-12  # below this the ray is treated as parallel to the triangle


@dataclass
class LidarConfig:
    """Beam table and noise model for the simulated sensor."""

    elevations: np.ndarray  # radians, strictly increasing
    azimuth_step: float  # radians
    azimuth_start: float = -math.pi
    azimuth_end: float = math.pi
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise_std: float = 0.02
    max_range: float = 120.0
    seed: int = 0

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.azimuth_step <= 0:
            raise ValueError("azimuth step must be positive")
        if self.max_range <= 0:
            raise ValueError("max range must be positive")
        if len(self.elevations) and np.any(np.diff(self.elevations) <= 0):
            raise ValueError("elevations must be strictly increasing")

    @property
    def n_azimuths(self) -> int:
        return int(math.ceil((self.azimuth_end - self.azimuth_start) / self.azimuth_step))

    @property
    def n_rays(self) -> int:
        return len(self.elevations) * self.n_azimuths

    def with_seed(self, seed: int) -> "LidarConfig":
        return LidarConfig(
            self.elevations.copy(), self.azimuth_step, self.azimuth_start,
            self.azimuth_end, self.origin.copy(), self.noise_std, self.max_range, int(seed),
        )


def kitti_lidar_config(**overrides) -> LidarConfig:
    """64-beam pattern approximating the KITTI sensor (config-driven default)."""
    cfg = dict(
        elevations=np.linspace(math.radians(-24.8), math.radians(2.0), 64),
        azimuth_step=math.radians(0.17),
    )
    cfg.update(overrides)
    return LidarConfig(**cfg)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit vector

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"ray direction must be unit length, got {n}")


@dataclass
class Rays:
    """Vectorized ray bundle in firing order (elevation-major)."""

    origins: np.ndarray  # (n, 3)
    directions: np.ndarray  # (n, 3), unit rows

    def __len__(self) -> int:
        return len(self.directions)

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i])


@dataclass
class HitRecord:
    """Noiseless nearest-hit geometry for one ray (gradient bookkeeping).

    Barycentric convention: u weights vertex 1, v weights vertex 2, and
    1 - u - v weights vertex 0 of the face.
    """

    ray_id: int
    face_id: int
    t: float
    u: float
    v: float
    point: np.ndarray  # (3,) noiseless hit position
    origin: np.ndarray  # (3,) ray origin
    direction: np.ndarray  # (3,) unit ray direction


def spherical_direction(elevation, azimuth) -> np.ndarray:
    """Unit direction for elevation above the xy-plane and azimuth from +x toward +y."""
    ce = np.cos(elevation)
    return np.stack(
        [ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation) * np.ones_like(ce * azimuth)],
        axis=-1,
    )


def generate_rays(cfg: LidarConfig) -> Rays:
    """One ray per (elevation, azimuth) lattice point, elevation-major order."""
    azimuths = cfg.azimuth_start + cfg.azimuth_step * np.arange(cfg.n_azimuths)
    elev = np.repeat(cfg.elevations, cfg.n_azimuths)
    azim = np.tile(azimuths, len(cfg.elevations))
    dirs = spherical_direction(elev, azim)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cfg.origin, dirs.shape).copy()
    return Rays(origins, dirs)


def moller_trumbore(ray: Ray, v0, v1, v2, t_min: float = T_MIN):
    """Ray/triangle intersection; returns (t, u, v) or None on a miss.

    Hits on the triangle boundary count; rays within DET_EPS of parallel miss.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(ray.direction, e2)
    det = float(e1 @ pvec)
    if abs(det) < DET_EPS:
        return None
    inv_det = 1.0 / det
    tvec = ray.origin - v0
    u = float(tvec @ pvec) * inv_det
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = float(ray.direction @ qvec) * inv_det
    if v < 0.0 or u + v > 1.0:
        return None
    t = float(e2 @ qvec) * inv_det
    if t <= t_min:
        return None
    return t, u, v


def intersect_batch(origins: np.ndarray, directions: np.ndarray, tri: np.ndarray, t_min: float = T_MIN):
    """Vectorized Moller-Trumbore: all rays against all triangles.

    origins/directions are (n, 3), tri is (m, 3, 3). Returns (t, u, v) arrays
    of shape (n, m) with infinite t marking misses.
    """
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    pvec = np.cross(directions[:, None, :], e2[None, :, :])  # (n, m, 3)
    det = np.einsum("mk,nmk->nm", e1, pvec)
    ok = np.abs(det) >= DET_EPS
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins[:, None, :] - v0[None, :, :]
    u = np.einsum("nmk,nmk->nm", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("nk,nmk->nm", directions, qvec) * inv_det
    t = np.einsum("mk,nmk->nm", e2, qvec) * inv_det
    hit = ok & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > t_min)
    return np.where(hit, t, np.inf), u, v


def _candidate_ray_mask(rays: Rays, mesh: TriMesh) -> np.ndarray:
    """Rays whose direction cone can touch the mesh's bounding sphere.

    Exact for rays sharing one origin: a ray from o hits the sphere (c, r)
    only if the angle to c stays below asin(r / |c - o|). Falls back to all
    rays when the origin is inside the sphere or origins differ.
    """
    n = len(rays)
    if n == 0 or mesh.n_faces == 0:
        return np.ones(n, dtype=bool)
    if not np.allclose(rays.origins, rays.origins[0]):
        return np.ones(n, dtype=bool)
    lo, hi = mesh.bounding_box()
    center = (lo + hi) / 2.0
    radius = float(np.linalg.norm(hi - center))
    rel = center - rays.origins[0]
    dist = float(np.linalg.norm(rel))
    if dist <= radius + 1e-9:
        return np.ones(n, dtype=bool)
    cos_margin = math.cos(math.asin(min(1.0, radius / dist)) + 1e-9)
    return rays.directions @ (rel / dist) >= cos_margin


def render_lidar(
    mesh: TriMesh, cfg: LidarConfig, cull: bool = True
) -> tuple[np.ndarray, list[HitRecord]]:
    """Cast the beam pattern at a mesh; nearest hit per ray within max range.

    Returns the noisy point cloud (k, 3) ordered by ray id and the matching
    noiseless HitRecords (row i of the cloud corresponds to hits[i]). Noise
    draws are indexed by ray id (counter-based) so culling and scheduling do
    not change them.
    """
    rays = generate_rays(cfg)
    hits: list[HitRecord] = []
    if mesh.n_faces == 0 or len(rays) == 0:
        return np.zeros((0, 3)), hits

    mask = _candidate_ray_mask(rays, mesh) if cull else np.ones(len(rays), dtype=bool)
    ray_ids = np.nonzero(mask)[0]
    tri = mesh.face_vertices()

    # noise is drawn for every ray id regardless of culling
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    noise = rng.normal(0.0, cfg.noise_std, len(rays)) if cfg.noise_std > 0 else np.zeros(len(rays))

    points = []
    chunk = max(1, int(2_000_000 // max(1, mesh.n_faces)))
    for start in range(0, len(ray_ids), chunk):
        ids = ray_ids[start : start + chunk]
        o = rays.origins[ids]
        d = rays.directions[ids]
        t, u, v = intersect_batch(o, d, tri)
        best = np.argmin(t, axis=1)
        rows = np.arange(len(ids))
        t_best = t[rows, best]
        good = np.isfinite(t_best) & (t_best <= cfg.max_range)
        for r in np.nonzero(good)[0]:
            rid = int(ids[r])
            fid = int(best[r])
            tt = float(t_best[r])
            point = o[r] + tt * d[r]
            hits.append(
                HitRecord(
                    ray_id=rid, face_id=fid, t=tt,
                    u=float(u[r, best[r]]), v=float(v[r, best[r]]),
                    point=point, origin=o[r].copy(), direction=d[r].copy(),
                )
            )
            points.append(point + noise[rid] * d[r])

    cloud = np.array(points).reshape(-1, 3)
    return cloud, hits


def lidar_backward(hits: list[HitRecord], point_grads: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Accumulate d(hit point)/d(vertex) adjoints into per-vertex gradients.

    The ray-to-face assignment is held fixed; each hit point is o + t d with
    t = S / D from Moller-Trumbore, so the gradient of t w.r.t. the three
    face vertices follows from the triple-product derivatives of S and D.
    """
    point_grads = np.asarray(point_grads, dtype=np.float64)
    if point_grads.shape != (len(hits), 3):
        raise ValueError(f"point_grads must be ({len(hits)}, 3)")
    grad = np.zeros_like(mesh.vertices)
    for hit, g in zip(hits, point_grads):
        if not (0 <= hit.face_id < mesh.n_faces):
            raise ValueError(f"stale hit record: face {hit.face_id} out of range")
        i0, i1, i2 = mesh.faces[hit.face_id]
        v0, v1, v2 = mesh.vertices[i0], mesh.vertices[i1], mesh.vertices[i2]
        d = hit.direction
        e1 = v1 - v0
        e2 = v2 - v0
        tvec = hit.origin - v0
        pvec = np.cross(d, e2)
        qvec = np.cross(tvec, e1)
        det = float(e1 @ pvec)
        if abs(det) < DET_EPS:
            continue
        inv_det = 1.0 / det
        t = float(e2 @ qvec) * inv_det
        # S = e2 . (tvec x e1), D = e1 . (d x e2); t = S / D
        dS_de1 = np.cross(e2, tvec)
        dS_de2 = qvec
        dS_dtvec = np.cross(e1, e2)
        dD_de1 = pvec
        dD_de2 = np.cross(e1, d)
        dt_de1 = (dS_de1 - t * dD_de1) * inv_det
        dt_de2 = (dS_de2 - t * dD_de2) * inv_det
        dt_dtvec = dS_dtvec * inv_det
        # chain: point = o + t d, so d(point)/dt projects g onto the ray
        gt = float(g @ d)
        grad[i1] += gt * dt_de1
        grad[i2] += gt * dt_de2
        grad[i0] += gt * (-dt_de1 - dt_de2 - dt_dtvec)
    return grad


def merge_into_scene(scene_pc: np.ndarray, rendered: np.ndarray, reflectance: float = 0.5) -> np.ndarray:
    """Concatenate rendered points onto a scene cloud (original points kept).

    If the scene stores reflectance as a fourth column, rendered points get a
    constant reflectance value.
    """
    scene_pc = np.asarray(scene_pc, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64).reshape(-1, 3)
    if scene_pc.ndim != 2:
        scene_pc = scene_pc.reshape(0, 4)
    if scene_pc.shape[1] == 4:
        extra = np.column_stack([rendered, np.full(len(rendered), reflectance)])
    else:
        extra = rendered
    return np.vstack([scene_pc, extra])
