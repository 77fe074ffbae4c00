"""Triangle meshes, icosphere construction, vertex deformation and placement.

A mesh carries per-vertex positions and RGB colors. The adversarial object is
parameterized by a per-vertex displacement field added to a fixed base mesh
before a rigid placement transform (rotation about the vertical axis plus a
translation), so a single learnable displacement block serves every placement.
All functions here are pure; the displacement field is a plain (V, 3) float
array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D


class MeshError(ValueError):
    """Invalid mesh topology or arguments."""


@dataclass
class TriMesh:
    """Triangle mesh with per-vertex positions (meters) and RGB colors in [0, 1]."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    colors: np.ndarray  # (V, 3) float64

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.colors is None:
            self.colors = np.full_like(self.vertices, 0.5)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be (F, 3)")
        if self.colors.shape != self.vertices.shape:
            raise MeshError("colors must match vertices in shape")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            a, b, c = self.faces.T
            if np.any((a == b) | (b == c) | (a == c)):
                raise MeshError("degenerate face (repeated vertex index)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2) with sorted vertex indices."""
        pairs = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def vertex_neighbors(self) -> list[np.ndarray]:
        """Per-vertex arrays of edge-adjacent vertex indices (duplicates removed)."""
        nbrs: list[np.ndarray] = []
        adj: list[set[int]] = [set() for _ in range(self.n_vertices)]
        for i, j in self.edges():
            adj[i].add(int(j))
            adj[j].add(int(i))
        for s in adj:
            nbrs.append(np.array(sorted(s), dtype=np.int64))
        return nbrs

    def face_vertices(self) -> np.ndarray:
        """Vertex positions per face, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(), self.colors.copy())


@dataclass
class RigidTransform:
    """4x4 homogeneous transform: rotation about +z composed with a translation."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (4, 4):
            raise ValueError("transform must be 4x4")
        r = self.matrix[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation block is not orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-9):
            raise ValueError("rotation block must have determinant +1")
        if not np.allclose(self.matrix[3], [0.0, 0.0, 0.0, 1.0], atol=0.0):
            raise ValueError("last row must be (0, 0, 0, 1)")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_yaw_translation(cls, yaw: float, translation) -> "RigidTransform":
        c, s = math.cos(yaw), math.sin(yaw)
        m = np.eye(4)
        m[:3, :3] = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        m[:3, 3] = np.asarray(translation, dtype=np.float64)
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


# icosahedron with vertices at cyclic permutations of (0, ±1, ±phi)
_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)

MAX_ICOSPHERE_SUBDIVISIONS = 6


def make_icosphere(subdivisions: int, radius: float, color: float = 0.5) -> TriMesh:
    """Regular icosahedron subdivided `subdivisions` times, projected to a sphere.

    Midpoint subdivision caches edge midpoints keyed by the sorted vertex-index
    pair, so vertex ordering is deterministic. Subdivision 2 yields the
    162-vertex / 320-face sphere used as the default adversarial base mesh.
    """
    if not (0 <= subdivisions <= MAX_ICOSPHERE_SUBDIVISIONS):
        raise MeshError(
            f"subdivisions must be in [0, {MAX_ICOSPHERE_SUBDIVISIONS}], got {subdivisions}"
        )
    if radius <= 0:
        raise MeshError("radius must be positive")

    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]

    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            idx = midpoint_cache.get(key)
            if idx is None:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                verts.append(m)
                idx = len(verts) - 1
                midpoint_cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    vertices = np.array(verts) * radius
    colors = np.full((len(vertices), 3), float(color))
    return TriMesh(vertices, np.array(faces, dtype=np.int64), colors)


def apply_deformation(base: TriMesh, displacement: np.ndarray, transform: RigidTransform) -> TriMesh:
    """Deform and place a mesh: out_i = T . (v_i + d_i); faces and colors unchanged."""
    d = np.asarray(displacement, dtype=np.float64)
    if d.shape != base.vertices.shape:
        raise MeshError(f"displacement shape {d.shape} != vertices {base.vertices.shape}")
    moved = transform.apply(base.vertices + d)
    return TriMesh(moved, base.faces.copy(), base.colors.copy())


def deformation_backward(transform: RigidTransform, vertex_grads: np.ndarray) -> np.ndarray:
    """Pull gradients on placed vertices back onto the displacement field.

    Placement is linear in the displacement, so the adjoint is just the
    transpose of the rotation block applied per vertex.
    """
    return np.asarray(vertex_grads, dtype=np.float64) @ transform.rotation


def laplacian_deltas(mesh: TriMesh) -> np.ndarray:
    """Per-vertex offset from the centroid of its edge neighbors, (V, 3).

    Vertices with no neighbors get a zero delta.
    """
    deltas = np.zeros_like(mesh.vertices)
    for i, nbr in enumerate(mesh.vertex_neighbors()):
        if len(nbr):
            deltas[i] = mesh.vertices[i] - mesh.vertices[nbr].mean(axis=0)
    return deltas


def laplacian_loss(mesh: TriMesh) -> float:
    """Smoothness penalty: sum of squared neighbor-centroid offsets."""
    d = laplacian_deltas(mesh)
    return float(np.sum(d * d))


def laplacian_loss_grad(mesh: TriMesh) -> np.ndarray:
    """Gradient of laplacian_loss w.r.t. vertex positions, (V, 3).

    With delta_i = v_i - mean_{j in N(i)} v_j and the edge relation symmetric,
    dL/dv_k = 2 delta_k - 2 sum_{i in N(k)} delta_i / |N(i)|.
    """
    nbrs = mesh.vertex_neighbors()
    deltas = laplacian_deltas(mesh)
    grad = 2.0 * deltas
    inv_deg = np.array([1.0 / len(n) if len(n) else 0.0 for n in nbrs])
    weighted = deltas * inv_deg[:, None]
    for k, nbr in enumerate(nbrs):
        if len(nbr):
            grad[k] -= 2.0 * weighted[nbr].sum(axis=0)
    return grad


def extent_bounds(base: TriMesh, limits) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex displacement bounds keeping base+d inside the limit box.

    The limit box is axis-aligned with edge lengths `limits`, centered on the
    base mesh's bounding-box center. Returns (lo, hi) arrays shaped (V, 3).
    """
    limits = np.asarray(limits, dtype=np.float64)
    if limits.shape != (3,) or np.any(limits <= 0):
        raise MeshError("limits must be three positive extents")
    lo_box, hi_box = base.bounding_box()
    center = (lo_box + hi_box) / 2.0
    lo = center - limits / 2.0 - base.vertices
    hi = center + limits / 2.0 - base.vertices
    return lo, hi


def clamp_extents(displacement: np.ndarray, base: TriMesh, limits) -> np.ndarray:
    """Project a displacement so the deformed mesh stays inside the limit box.

    Componentwise clamp of base+d to the box; idempotent, and a no-op for
    displacements already inside.
    """
    d = np.asarray(displacement, dtype=np.float64)
    if d.shape != base.vertices.shape:
        raise MeshError("displacement shape mismatch")
    lo, hi = extent_bounds(base, limits)
    return np.clip(d, lo, hi)


def roof_pose(car: Box3D, clearance: float) -> RigidTransform:
    """Placement transform putting the mesh's local origin above a car's roof.

    Rotation matches the car's yaw; the translation is the car center lifted by
    half the car height plus `clearance` (the mesh's half-height for a mesh
    whose local origin is its center, so the mesh bottom sits on the roof).
    """
    t = car.center + np.array([0.0, 0.0, car.height / 2.0 + clearance])
    return RigidTransform.from_yaw_translation(car.yaw, t)
