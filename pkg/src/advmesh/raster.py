"""Pinhole projection and z-buffered triangle rasterization over a background.

Covered pixels get the perspective-correct barycentric blend of the face's
vertex colors; the coverage map stores the blend weights so color gradients
are an exact linear adjoint. Hard rasterization, pixel-center sampling, no
shading, no anti-aliasing; back-face culling is disabled and the depth test
alone resolves visibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TriMesh

AREA_EPS = 1e-12


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


@dataclass
class CameraModel:
    """3x4 pixel projection matrix plus image size."""

    projection: np.ndarray  # (3, 4)
    width: int
    height: int

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.shape != (3, 4):
            raise ValueError("projection must be 3x4")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


def project(cam: CameraModel, point) -> tuple[float, float, float]:
    """Project one camera-frame point; returns (px, py, depth)."""
    p = np.asarray(point, dtype=np.float64)
    h = cam.projection @ np.append(p, 1.0)
    if h[2] <= 0.0:
        raise BehindCameraError(f"point {point} has depth {h[2]:.6g}")
    return float(h[0] / h[2]), float(h[1] / h[2]), float(h[2])


def project_points(cam: CameraModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection: (n, 2) pixel coords and (n,) depths (may be <= 0)."""
    pts = np.asarray(points, dtype=np.float64)
    h = pts @ cam.projection[:, :3].T + cam.projection[:, 3]
    depth = h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.where(depth != 0.0, h[:, 0] / depth, np.inf)
        py = np.where(depth != 0.0, h[:, 1] / depth, np.inf)
    return np.column_stack([px, py]), depth


@dataclass
class CoverageMap:
    """Per covered pixel: owning face, blend weights, and depth.

    Weights follow the face's vertex order and sum to one. `clamped` marks
    color channels where the [0, 1] clamp was active (their gradient is zero).
    """

    pixels: np.ndarray  # (k, 2) int, (row, col)
    face_ids: np.ndarray  # (k,)
    weights: np.ndarray  # (k, 3)
    depths: np.ndarray  # (k,)
    clamped: np.ndarray  # (k, 3) bool
    faces: np.ndarray  # (F, 3) vertex indices of the rasterized mesh
    n_vertices: int

    def __len__(self) -> int:
        return len(self.face_ids)


def rasterize(mesh: TriMesh, cam: CameraModel, background: np.ndarray) -> tuple[np.ndarray, CoverageMap]:
    """Render a camera-frame mesh over a background image.

    Returns the composited float image in [0, 1] and the coverage map. Faces
    with any vertex at non-positive depth are skipped (no near-plane clipping).
    """
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (cam.height, cam.width, 3):
        raise ValueError(f"background must be ({cam.height}, {cam.width}, 3)")
    image = background.copy()

    zbuf = np.full((cam.height, cam.width), np.inf)
    face_buf = np.full((cam.height, cam.width), -1, dtype=np.int64)
    w_buf = np.zeros((cam.height, cam.width, 3))

    if mesh.n_faces:
        pix, depth = project_points(cam, mesh.vertices)
        for fid, (i0, i1, i2) in enumerate(mesh.faces):
            z = depth[[i0, i1, i2]]
            if np.any(z <= 0.0):
                continue
            p2d = pix[[i0, i1, i2]]
            area = np.cross(p2d[1] - p2d[0], p2d[2] - p2d[0])
            if abs(area) < AREA_EPS:
                continue
            x0 = max(0, int(np.floor(p2d[:, 0].min() - 0.5)))
            x1 = min(cam.width - 1, int(np.ceil(p2d[:, 0].max() - 0.5)))
            y0 = max(0, int(np.floor(p2d[:, 1].min() - 0.5)))
            y1 = min(cam.height - 1, int(np.ceil(p2d[:, 1].max() - 0.5)))
            if x1 < x0 or y1 < y0:
                continue
            xs = np.arange(x0, x1 + 1) + 0.5
            ys = np.arange(y0, y1 + 1) + 0.5
            px, py = np.meshgrid(xs, ys)
            # screen-space barycentric via edge functions
            l0 = (p2d[1, 0] - px) * (p2d[2, 1] - py) - (p2d[2, 0] - px) * (p2d[1, 1] - py)
            l1 = (p2d[2, 0] - px) * (p2d[0, 1] - py) - (p2d[0, 0] - px) * (p2d[2, 1] - py)
            l2 = (p2d[0, 0] - px) * (p2d[1, 1] - py) - (p2d[1, 0] - px) * (p2d[0, 1] - py)
            lam = np.stack([l0, l1, l2], axis=-1) / area
            inside = np.all(lam >= 0.0, axis=-1)
            if not inside.any():
                continue
            # perspective-correct weights and depth
            lam_z = lam / z
            denom = lam_z.sum(axis=-1)
            w = lam_z / denom[..., None]
            pdepth = 1.0 / denom
            rows, cols = np.nonzero(inside)
            gy = rows + y0
            gx = cols + x0
            closer = pdepth[rows, cols] < zbuf[gy, gx]
            gy, gx = gy[closer], gx[closer]
            rows, cols = rows[closer], cols[closer]
            zbuf[gy, gx] = pdepth[rows, cols]
            face_buf[gy, gx] = fid
            w_buf[gy, gx] = w[rows, cols]

    ys, xs = np.nonzero(face_buf >= 0)
    fids = face_buf[ys, xs]
    weights = w_buf[ys, xs]
    depths = zbuf[ys, xs]
    clamped = np.zeros((len(ys), 3), dtype=bool)
    if len(ys):
        colors = np.einsum("kj,kjc->kc", weights, mesh.colors[mesh.faces[fids]])
        clamped = (colors < 0.0) | (colors > 1.0)
        image[ys, xs] = np.clip(colors, 0.0, 1.0)

    coverage = CoverageMap(
        pixels=np.column_stack([ys, xs]).astype(np.int64),
        face_ids=fids.astype(np.int64),
        weights=weights,
        depths=depths,
        clamped=clamped,
        faces=mesh.faces.copy(),
        n_vertices=mesh.n_vertices,
    )
    return image, coverage


def color_backward(coverage: CoverageMap, image_grad: np.ndarray) -> np.ndarray:
    """Adjoint of the barycentric color blend: per-vertex color gradients.

    Each covered pixel scatters weight * pixel_grad to its face's vertices;
    channels where the output clamp was active contribute nothing.
    """
    image_grad = np.asarray(image_grad, dtype=np.float64)
    grad = np.zeros((coverage.n_vertices, 3))
    if not len(coverage):
        return grad
    g = image_grad[coverage.pixels[:, 0], coverage.pixels[:, 1]].copy()  # (k, 3)
    g[coverage.clamped] = 0.0
    verts = coverage.faces[coverage.face_ids]  # (k, 3)
    for j in range(3):
        np.add.at(grad, verts[:, j], coverage.weights[:, j : j + 1] * g)
    return grad
