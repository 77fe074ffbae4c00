"""Scene ingestion and generation: KITTI-format files, synthetic desk-scale
scenes, and mesh placement bookkeeping.

Frames: the point cloud lives in the z-up sensor frame (x forward, y left);
the camera follows KITTI (z forward, y down) and all conversion happens here
through the calibration chain. Scenes are persisted in KITTI formats
(velodyne .bin, calib/label .txt, PNG) so synthetic and real data flow
through identical paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import Box2D, Box3D, wrap_angle
from .geometry import RigidTransform, TriMesh, apply_deformation, roof_pose
from .raster import CameraModel, rasterize

KITTI_CLASSES = {
    "Car", "Van", "Truck", "Pedestrian", "Person_sitting",
    "Cyclist", "Tram", "Misc", "DontCare",
}


class ParseError(ValueError):
    """Malformed dataset file; message names the file and line."""


@dataclass
class Calibration:
    """KITTI calibration chain: P2 projection, rectification, velo-to-cam."""

    projection: np.ndarray  # P2, (3, 4)
    r0_rect: np.ndarray  # (3, 3)
    velo_to_cam: np.ndarray  # (3, 4)
    image_width: int = 0
    image_height: int = 0

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.r0_rect = np.asarray(self.r0_rect, dtype=np.float64)
        self.velo_to_cam = np.asarray(self.velo_to_cam, dtype=np.float64)
        if self.projection.shape != (3, 4):
            raise ParseError("P2 must be 3x4")
        if self.r0_rect.shape != (3, 3):
            raise ParseError("R0_rect must be 3x3")
        if self.velo_to_cam.shape != (3, 4):
            raise ParseError("Tr_velo_to_cam must be 3x4")

    @property
    def camera(self) -> CameraModel:
        return CameraModel(self.projection, self.image_width, self.image_height)

    def velo_to_rect_matrix(self) -> np.ndarray:
        """4x4 transform from the sensor frame to the rectified camera frame."""
        tr = np.eye(4)
        tr[:3, :4] = self.velo_to_cam
        r0 = np.eye(4)
        r0[:3, :3] = self.r0_rect
        return r0 @ tr

    def rect_to_velo_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.velo_to_rect_matrix())

    def velo_to_rect(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)[:, :3]
        m = self.velo_to_rect_matrix()
        return pts @ m[:3, :3].T + m[:3, 3]

    def project_velo(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project sensor-frame points: (n, 2) pixel coords and (n,) depths."""
        rect = self.velo_to_rect(points)
        h = rect @ self.projection[:, :3].T + self.projection[:, 3]
        depth = h[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = h[:, :2] / np.where(depth == 0.0, np.nan, depth)[:, None]
        return pix, depth


@dataclass
class SceneObject:
    """Ground-truth car: sensor-frame 3D box, image box, difficulty attributes."""

    box3d: Box3D
    box2d: Box2D
    truncation: float = 0.0
    occlusion: int = 0

    @property
    def height_px(self) -> float:
        return self.box2d.height


@dataclass
class Scene:
    scene_id: str
    cloud: np.ndarray  # (n, 4): x, y, z, reflectance in the sensor frame
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    calib: Calibration
    objects: list[SceneObject] = field(default_factory=list)

    def copy_shallow(self) -> "Scene":
        return Scene(self.scene_id, self.cloud, self.image, self.calib, self.objects)


# --- KITTI file formats -----------------------------------------------------

def read_velodyne(path) -> np.ndarray:
    """KITTI velodyne binary: little-endian float32 quadruples (x, y, z, r)."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise ParseError(f"{path}: size {len(raw)} is not a multiple of 16")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise ParseError(f"{path}: non-finite point values")
    return pts.astype(np.float64)

def write_velodyne(path, cloud: np.ndarray) -> None:
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError("cloud must be (n, 3) or (n, 4)")
    if pts.shape[1] == 3:
        pts = np.column_stack([pts, np.full(len(pts), 0.5)])
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def read_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0

def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _parse_floats(tokens, path, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError as e:
        raise ParseError(f"{path}:{lineno}: {e}") from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(f"{path}:{lineno}: non-finite value")
    return vals


def read_calib(path) -> dict[str, np.ndarray]:
    """Parse `key: v1 v2 ...` calibration lines into named float arrays."""
    entries: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise ParseError(f"{path}:{lineno}: expected `key: values` line")
        key, rest = line.split(":", 1)
        entries[key.strip()] = np.array(_parse_floats(rest.split(), path, lineno))
    return entries


def calibration_from_file(path, image_width: int = 0, image_height: int = 0) -> Calibration:
    entries = read_calib(path)
    for key, n in (("P2", 12), ("R0_rect", 9), ("Tr_velo_to_cam", 12)):
        if key not in entries:
            raise ParseError(f"{path}: missing calibration key {key}")
        if entries[key].size != n:
            raise ParseError(f"{path}: {key} has {entries[key].size} values, expected {n}")
    return Calibration(
        projection=entries["P2"].reshape(3, 4),
        r0_rect=entries["R0_rect"].reshape(3, 3),
        velo_to_cam=entries["Tr_velo_to_cam"].reshape(3, 4),
        image_width=image_width,
        image_height=image_height,
    )


def write_calib(path, calib: Calibration) -> None:
    def fmt(name, arr):
        return name + ": " + " ".join(f"{v:.12e}" for v in np.asarray(arr).ravel())

    zeros34 = np.zeros((3, 4))
    lines = [
        fmt("P0", calib.projection), fmt("P1", calib.projection),
        fmt("P2", calib.projection), fmt("P3", calib.projection),
        fmt("R0_rect", calib.r0_rect),
        fmt("Tr_velo_to_cam", calib.velo_to_cam),
        fmt("Tr_imu_to_velo", zeros34),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def box3d_from_label(loc_rect, dims, rotation_y, calib: Calibration) -> Box3D:
    """Camera-frame label (bottom-center location, h/w/l, ry) to a sensor-frame box."""
    h, w, l = dims
    inv = calib.rect_to_velo_matrix()
    bottom = inv[:3, :3] @ np.asarray(loc_rect) + inv[:3, 3]
    center = bottom + np.array([0.0, 0.0, h / 2.0])
    # the object's forward axis in the camera frame is (cos ry, 0, -sin ry)
    dir_cam = np.array([math.cos(rotation_y), 0.0, -math.sin(rotation_y)])
    dir_velo = inv[:3, :3] @ dir_cam
    yaw = math.atan2(dir_velo[1], dir_velo[0])
    return Box3D(center=center, height=h, width=w, length=l, yaw=yaw)


def box3d_to_label(box: Box3D, calib: Calibration) -> tuple[np.ndarray, float]:
    """Sensor-frame box to camera-frame (bottom-center location, rotation_y)."""
    m = calib.velo_to_rect_matrix()
    bottom = box.center - np.array([0.0, 0.0, box.height / 2.0])
    loc = m[:3, :3] @ bottom + m[:3, 3]
    dir_velo = np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    dir_cam = m[:3, :3] @ dir_velo
    ry = math.atan2(-dir_cam[2], dir_cam[0])
    return loc, ry


def project_box_to_image(box: Box3D, calib: Calibration) -> Box2D | None:
    """Bounding rectangle of the projected 3D corners, clipped to the image."""
    pix, depth = calib.project_velo(box.corners())
    if np.any(depth <= 0.0):
        return None
    left, top = pix.min(axis=0)
    right, bottom = pix.max(axis=0)
    left = max(0.0, left)
    top = max(0.0, top)
    right = min(float(calib.image_width), right)
    bottom = min(float(calib.image_height), bottom)
    if right - left < 1.0 or bottom - top < 1.0:
        return None
    return Box2D(left, top, right, bottom)


def read_labels(path, calib: Calibration) -> list[SceneObject]:
    """KITTI 15-field label lines; returns Car objects in the sensor frame."""
    objects = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (15, 16):
            raise ParseError(f"{path}:{lineno}: expected 15 or 16 fields, got {len(parts)}")
        cls = parts[0]
        if cls not in KITTI_CLASSES:
            raise ParseError(f"{path}:{lineno}: unknown class name {cls!r}")
        vals = _parse_floats(parts[1:], path, lineno)
        if cls != "Car":
            continue
        truncation, occlusion = vals[0], int(vals[1])
        bbox = vals[3:7]
        dims = vals[7:10]  # h, w, l
        loc = vals[10:13]
        ry = vals[13]
        box3d = box3d_from_label(loc, dims, ry, calib)
        box2d = Box2D(bbox[0], bbox[1], bbox[2], bbox[3])
        objects.append(SceneObject(box3d, box2d, truncation, occlusion))
    return objects


def write_labels(path, objects: list[SceneObject], calib: Calibration) -> None:
    lines = []
    for obj in objects:
        loc, ry = box3d_to_label(obj.box3d, calib)
        alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
        b = obj.box2d
        fields = [
            "Car", f"{obj.truncation:.2f}", str(obj.occlusion), f"{alpha:.6f}",
            f"{b.left:.6f}", f"{b.top:.6f}", f"{b.right:.6f}", f"{b.bottom:.6f}",
            f"{obj.box3d.height:.6f}", f"{obj.box3d.width:.6f}", f"{obj.box3d.length:.6f}",
            f"{loc[0]:.6f}", f"{loc[1]:.6f}", f"{loc[2]:.6f}", f"{ry:.6f}",
        ]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_kitti_scene(velodyne_path, image_path, calib_path, label_path) -> Scene:
    """Assemble one scene from its four KITTI files."""
    image = read_png(image_path)
    h, w = image.shape[:2]
    calib = calibration_from_file(calib_path, image_width=w, image_height=h)
    cloud = read_velodyne(velodyne_path)
    objects = read_labels(label_path, calib)
    return Scene(
        scene_id=Path(velodyne_path).stem,
        cloud=cloud,
        image=image,
        calib=calib,
        objects=objects,
    )


def write_kitti_scene(root, scene: Scene) -> None:
    root = Path(root)
    for sub in ("velodyne", "image_2", "calib", "label_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_velodyne(root / "velodyne" / f"{scene.scene_id}.bin", scene.cloud)
    write_png(root / "image_2" / f"{scene.scene_id}.png", scene.image)
    write_calib(root / "calib" / f"{scene.scene_id}.txt", scene.calib)
    write_labels(root / "label_2" / f"{scene.scene_id}.txt", scene.objects, scene.calib)


def load_dataset(root) -> list[Scene]:
    root = Path(root)
    ids = sorted(p.stem for p in (root / "velodyne").glob("*.bin"))
    if not ids:
        raise FileNotFoundError(f"no velodyne files under {root}")
    return [
        read_kitti_scene(
            root / "velodyne" / f"{i}.bin",
            root / "image_2" / f"{i}.png",
            root / "calib" / f"{i}.txt",
            root / "label_2" / f"{i}.txt",
        )
        for i in ids
    ]


def split_scene_ids(ids) -> tuple[list[str], list[str]]:
    """Deterministic hash split into (train, validation) halves."""
    import hashlib

    train, val = [], []
    for i in ids:
        digest = hashlib.md5(str(i).encode("utf-8")).hexdigest()
        (train if int(digest, 16) % 2 == 0 else val).append(i)
    return train, val


# --- synthetic scenes -------------------------------------------------------

@dataclass
class SynthConfig:
    """Desk-scale synthetic world: flat ground, box-shell cars, flat-shaded sprites."""

    n_scenes: int = 200
    cars_min: int = 1
    cars_max: int = 3
    ground_x: tuple[float, float] = (3.0, 22.0)
    ground_y: tuple[float, float] = (-6.0, 6.0)
    ground_density: float = 14.0  # points per square meter
    ground_jitter: float = 0.02  # std of height noise, meters
    car_density: float = 55.0  # shell points per square meter
    car_jitter: float = 0.012
    car_depth: tuple[float, float] = (8.5, 15.0)
    car_bearing: float = 0.14  # |azimuth| bound, radians
    car_yaw_spread: float = 0.21  # std around 0 or pi, radians
    sensor_height: float = 1.73
    image_width: int = 320
    image_height: int = 240
    focal: float = 340.0
    image_noise: float = 0.015
    sprite_brightness: tuple[float, float] = (0.12, 0.5)
    seed: int = 0

    def __post_init__(self):
        if self.ground_density <= 0 or self.car_density <= 0:
            raise ValueError("densities must be positive")
        if self.cars_min < 0 or self.cars_max < self.cars_min:
            raise ValueError("invalid cars-per-scene range")


def default_calibration(cfg: SynthConfig) -> Calibration:
    """KITTI-style chain: camera slightly below and ahead of the sensor."""
    p2 = np.array(
        [
            [cfg.focal, 0.0, cfg.image_width / 2.0, 0.0],
            [0.0, cfg.focal, cfg.image_height / 2.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )
    tr = np.array(
        [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, -0.08],
            [1.0, 0.0, 0.0, -0.27],
        ]
    )
    return Calibration(
        projection=p2, r0_rect=np.eye(3), velo_to_cam=tr,
        image_width=cfg.image_width, image_height=cfg.image_height,
    )


def _sample_car_box(rng, cfg: SynthConfig) -> Box3D:
    depth = rng.uniform(*cfg.car_depth)
    bearing = rng.uniform(-cfg.car_bearing, cfg.car_bearing)
    h = rng.uniform(1.4, 1.6)
    w = rng.uniform(1.6, 1.8)
    l = rng.uniform(3.8, 4.4)
    # traffic-like orientations: roughly along or against the viewing axis
    yaw = rng.choice([0.0, math.pi]) + rng.normal(0.0, cfg.car_yaw_spread)
    center = np.array(
        [depth, depth * math.tan(bearing), -cfg.sensor_height + h / 2.0]
    )
    return Box3D(center=center, height=h, width=w, length=l, yaw=yaw)


def box_shell_points(rng, box: Box3D, density: float, jitter: float) -> np.ndarray:
    """Points on the four sides and roof of a box, with normal-direction jitter."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    hx, hy, hz = box.length / 2.0, box.width / 2.0, box.height / 2.0
    faces = [
        # (fixed axis, sign, u axis, u half, v axis, v half), local frame
        (0, +1, 1, hy, 2, hz), (0, -1, 1, hy, 2, hz),
        (1, +1, 0, hx, 2, hz), (1, -1, 0, hx, 2, hz),
        (2, +1, 0, hx, 1, hy),
    ]
    pts = []
    for axis, sign, ua, uh, va, vh in faces:
        area = (2 * uh) * (2 * vh)
        n = rng.poisson(area * density)
        if n == 0:
            continue
        local = np.zeros((n, 3))
        local[:, axis] = sign * ([hx, hy, hz][axis] + rng.normal(0.0, jitter, n))
        local[:, ua] = rng.uniform(-uh, uh, n)
        local[:, va] = rng.uniform(-vh, vh, n)
        pts.append(local)
    local = np.vstack(pts) if pts else np.zeros((0, 3))
    world = np.empty_like(local)
    world[:, :2] = local[:, :2] @ rot.T + box.center[:2]
    world[:, 2] = local[:, 2] + box.center[2]
    return world


def car_sprite_mesh(box: Box3D, calib: Calibration, body: np.ndarray) -> TriMesh:
    """Flat-shaded camera-frame box mesh: duplicated vertices per face."""
    corners = box.corners()  # bottom 0..3, top 4..7 (same bev order)
    quads = [
        ([0, 1, 5, 4], 0.85), ([1, 2, 6, 5], 0.75),
        ([2, 3, 7, 6], 0.85), ([3, 0, 4, 7], 0.75),
        ([4, 5, 6, 7], 1.1),
    ]
    verts, faces, colors = [], [], []
    cam = calib.velo_to_rect(corners)
    for quad, shade in quads:
        base = len(verts)
        verts += [cam[i] for i in quad]
        colors += [np.clip(body * shade, 0.0, 1.0)] * 4
        faces += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
    return TriMesh(np.array(verts), np.array(faces), np.array(colors))


def _background(rng, cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.image_height, cfg.image_width
    img = np.empty((h, w, 3))
    rows = np.arange(h)[:, None, None] / max(1, h - 1)
    sky = np.array([0.72, 0.8, 0.9])
    ground_near = np.array([0.48, 0.46, 0.44])
    ground_far = np.array([0.6, 0.58, 0.55])
    horizon = h // 2
    img[:horizon] = sky * (1.0 - 0.25 * rows[:horizon])
    frac = (rows[horizon:] - 0.5) * 2.0
    img[horizon:] = ground_far + (ground_near - ground_far) * frac
    img += rng.normal(0.0, cfg.image_noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _occlusion_levels(objects: list[SceneObject]) -> None:
    """Occlusion from 2D overlap with strictly nearer cars (levels 0/1/2)."""
    order = sorted(range(len(objects)), key=lambda i: objects[i].box3d.center[0])
    for rank, i in enumerate(order):
        covered = 0.0
        b = objects[i].box2d
        for j in order[:rank]:
            covered = max(covered, _overlap_fraction(b, objects[j].box2d))
        objects[i].occlusion = 0 if covered < 0.1 else (1 if covered < 0.4 else 2)


def _overlap_fraction(a: Box2D, b: Box2D) -> float:
    ix = max(0.0, min(a.right, b.right) - max(a.left, b.left))
    iy = max(0.0, min(a.bottom, b.bottom) - max(a.top, b.top))
    return ix * iy / a.area()


def gen_synthetic(cfg: SynthConfig) -> list[Scene]:
    """Deterministic synthetic dataset; scene i depends only on (seed, i)."""
    calib = default_calibration(cfg)
    scenes = []
    for idx in range(cfg.n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, idx)))
        boxes: list[Box3D] = []
        n_cars = int(rng.integers(cfg.cars_min, cfg.cars_max + 1))
        tries = 0
        while len(boxes) < n_cars and tries < 80:
            tries += 1
            cand = _sample_car_box(rng, cfg)
            if all(np.linalg.norm(cand.center[:2] - b.center[:2]) > 5.2 for b in boxes):
                boxes.append(cand)

        objects = []
        for box in boxes:
            box2d = project_box_to_image(box, calib)
            if box2d is not None:
                objects.append(SceneObject(box3d=box, box2d=box2d))
        _occlusion_levels(objects)

        gx, gy = cfg.ground_x, cfg.ground_y
        area = (gx[1] - gx[0]) * (gy[1] - gy[0])
        n_ground = rng.poisson(area * cfg.ground_density)
        ground = np.column_stack(
            [
                rng.uniform(gx[0], gx[1], n_ground),
                rng.uniform(gy[0], gy[1], n_ground),
                -cfg.sensor_height + rng.normal(0.0, cfg.ground_jitter, n_ground),
            ]
        )
        shells = [
            box_shell_points(rng, obj.box3d, cfg.car_density, cfg.car_jitter)
            for obj in objects
        ]
        cloud = np.vstack([ground] + shells) if shells else ground
        cloud = np.column_stack([cloud, np.full(len(cloud), 0.3)])

        image = _background(rng, cfg)
        if objects:
            sprite_parts = []
            for obj in objects:
                value = rng.uniform(*cfg.sprite_brightness)
                tint = rng.uniform(0.85, 1.15, 3)
                body = np.clip(value * tint, 0.0, 1.0)
                sprite_parts.append(car_sprite_mesh(obj.box3d, calib, body))
            merged = TriMesh(
                np.vstack([m.vertices for m in sprite_parts]),
                np.vstack(
                    [
                        m.faces + off
                        for m, off in zip(
                            sprite_parts,
                            np.cumsum([0] + [m.n_vertices for m in sprite_parts[:-1]]),
                        )
                    ]
                ),
                np.vstack([m.colors for m in sprite_parts]),
            )
            image, _ = rasterize(merged, calib.camera, image)

        scenes.append(
            Scene(
                scene_id=f"{idx:06d}", cloud=cloud, image=image,
                calib=calib, objects=objects,
            )
        )
    return scenes


def place_meshes(
    scene: Scene, mesh: TriMesh, displacement: np.ndarray, clearance: float
) -> list[tuple[RigidTransform, TriMesh]]:
    """One deformed mesh placement per ground-truth car, sharing the displacement."""
    placements = []
    for obj in scene.objects:
        transform = roof_pose(obj.box3d, clearance)
        placements.append((transform, apply_deformation(mesh, displacement, transform)))
    return placements
