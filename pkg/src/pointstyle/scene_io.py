"""Scene data model, pinhole camera math, the on-disk scene layout and a
deterministic synthetic-scene generator.

Conventions: camera looks down +z, x right, y down.  Poses map world to
camera, ``x_cam = R @ x_world + t``.  Pixel ``(u, v)`` addresses column ``u``
and row ``v`` with pixel centers on integer coordinates.  Depth 0 marks a hole.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .errors import (
    BehindCameraError,
    InvalidDepthError,
    PoseValidationError,
    SceneLoadError,
    SpecError,
)

EPS_DEPTH = 1e-8
DEPTH_MAGIC = b"DPTH"
DEPTH_SUFFIX = ".depth"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise PoseValidationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise PoseValidationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics of the stride-``stride`` feature grid (cell j sits on pixel j*stride)."""
        return CameraIntrinsics(
            self.fx / stride,
            self.fy / stride,
            self.cx / stride,
            self.cy / stride,
            -(-self.width // stride),
            -(-self.height // stride),
        )


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise PoseValidationError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise PoseValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise PoseValidationError(f"rotation determinant {np.linalg.det(R):.6f} != 1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True, eq=False)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    image: np.ndarray | None = None
    depth: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.image is not None:
            img = np.asarray(self.image, dtype=np.float32)
            if img.shape != (h, w, 3):
                raise SceneLoadError(f"image shape {img.shape} does not match intrinsics {h}x{w}")
            object.__setattr__(self, "image", img)
        if self.depth is not None:
            dep = np.asarray(self.depth, dtype=np.float32)
            if dep.shape != (h, w):
                raise SceneLoadError(f"depth shape {dep.shape} does not match intrinsics {h}x{w}")
            if not np.all(np.isfinite(dep)) or (dep < 0).any():
                raise InvalidDepthError("depth map must be finite and non-negative")
            object.__setattr__(self, "depth", dep)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.height, self.intrinsics.width

    def with_intrinsics(self, intrinsics: CameraIntrinsics) -> "CameraView":
        return CameraView(intrinsics, self.pose)


@dataclass(frozen=True, eq=False)
class Scene:
    name: str
    views: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if len(self.views) < 2:
            raise SpecError(f"a scene needs at least 2 views, got {len(self.views)}")

    def subset(self, indices, name=None) -> "Scene":
        return Scene(name or self.name, [self.views[i] for i in indices], dict(self.meta))


# -- camera math -------------------------------------------------------------


def to_camera(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ pose.rotation.T + pose.translation


def to_world(points_cam: np.ndarray, pose: CameraPose) -> np.ndarray:
    return (np.asarray(points_cam, dtype=np.float64) - pose.translation) @ pose.rotation


def project_points(points: np.ndarray, view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; no behind-camera check (callers mask on depth)."""
    cam = to_camera(np.atleast_2d(points), view.pose)
    z = cam[:, 2]
    K = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z


def backproject_pixels(pixels: np.ndarray, depth: np.ndarray, view: CameraView) -> np.ndarray:
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    K = view.intrinsics
    cam = np.stack(
        [(pixels[:, 0] - K.cx) / K.fx * depth, (pixels[:, 1] - K.cy) / K.fy * depth, depth], axis=1
    )
    return to_world(cam, view.pose)


def project_point(point, view: CameraView) -> tuple[np.ndarray, float]:
    pix, z = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), view)
    if not z[0] > EPS_DEPTH:
        raise BehindCameraError(f"point {tuple(np.ravel(point))} has camera depth {z[0]:.3g}")
    return pix[0], float(z[0])


def backproject_pixel(pixel, depth: float, view: CameraView) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(f"cannot backproject at depth {depth}")
    return backproject_pixels(np.asarray(pixel, dtype=np.float64).reshape(1, 2), [depth], view)[0]


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H*W, 2) array of (u, v) pixel centers in row-major order."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    # camera y points down, so "up" in the image is -y
    right = np.cross(forward, -np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraPose(R, -R @ eye)


# -- on-disk format ----------------------------------------------------------


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<HH", h, w))
        fh.write(depth.tobytes(order="C"))


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != DEPTH_MAGIC:
        raise SceneLoadError(f"{path}: not a depth file (bad magic)", path)
    h, w = struct.unpack("<HH", data[4:8])
    if len(data) != 8 + 4 * h * w:
        raise SceneLoadError(f"{path}: expected {h}x{w} floats, file size {len(data)}", path)
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w).astype(np.float32)


def view_to_json(view: CameraView) -> dict:
    K, P = view.intrinsics, view.pose
    return {
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "width": K.width, "height": K.height,
        "rotation": [float(x) for x in P.rotation.ravel()],
        "translation": [float(x) for x in P.translation],
    }


def camera_from_json(entry: dict) -> CameraView:
    try:
        K = CameraIntrinsics(
            float(entry["fx"]), float(entry["fy"]), float(entry["cx"]), float(entry["cy"]),
            int(entry["width"]), int(entry["height"]),
        )
        pose = CameraPose(np.array(entry["rotation"], dtype=np.float64).reshape(3, 3),
                          np.array(entry["translation"], dtype=np.float64))
    except KeyError as exc:
        raise SceneLoadError(f"camera entry missing field {exc}") from None
    return CameraView(K, pose)


def save_scene(scene: Scene, path) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    cameras = []
    for i, view in enumerate(scene.views):
        if view.image is not None:
            rgb = np.clip(np.rint(view.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{i:04d}.png")
        if view.depth is not None:
            write_depth(root / "depth" / f"{i:04d}{DEPTH_SUFFIX}", view.depth)
        cameras.append(view_to_json(view))
    (root / "cameras.json").write_text(json.dumps({"name": scene.name, "views": cameras}, indent=1))
    return root


def _indexed_files(directory: Path) -> dict[int, Path]:
    out = {}
    if directory.is_dir():
        for p in sorted(directory.iterdir()):
            m = re.fullmatch(r"(\d{4})\..+", p.name)
            if m:
                out[int(m.group(1))] = p
    return out


def load_scene(path) -> Scene:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise SceneLoadError(f"missing {cam_file}", cam_file)
    try:
        meta = json.loads(cam_file.read_text())
    except json.JSONDecodeError as exc:
        raise SceneLoadError(f"{cam_file}: invalid JSON ({exc})", cam_file) from None
    entries = meta.get("views", [])
    images = _indexed_files(root / "images")
    depths = _indexed_files(root / "depth")
    views = []
    for i, entry in enumerate(entries):
        if i not in images:
            raise SceneLoadError(f"missing image {root / 'images' / f'{i:04d}.png'}", root / "images")
        if i not in depths:
            raise SceneLoadError(f"missing depth {root / 'depth' / f'{i:04d}{DEPTH_SUFFIX}'}", root / "depth")
        try:
            cam = camera_from_json(entry)
        except PoseValidationError as exc:
            raise PoseValidationError(f"{cam_file} view {i}: {exc}") from None
        img = np.asarray(Image.open(images[i]).convert("RGB"), dtype=np.float32) / 255.0
        views.append(CameraView(cam.intrinsics, cam.pose, img, read_depth(depths[i])))
    return Scene(meta.get("name", root.name), views)


# -- synthetic scenes --------------------------------------------------------

TEXTURES = ("checker", "stripes", "noise")


@dataclass(frozen=True)
class SyntheticSpec:
    n_views: int = 4
    n_points: int = 5000
    texture: str = "checker"
    image_size: int = 64
    arc_step: float = 8.0  # degrees between consecutive cameras
    arc_start: float = -12.0

    def __post_init__(self):
        if self.n_views < 2:
            raise SpecError(f"n_views must be >= 2, got {self.n_views}")
        if self.n_points < 1:
            raise SpecError("n_points must be positive")
        if self.texture not in TEXTURES:
            raise SpecError(f"unknown texture {self.texture!r}; choose from {TEXTURES}")
        if self.image_size < 4:
            raise SpecError("image_size must be >= 4")


class SyntheticWorld:
    """Closed room with a cube in the middle, colored by a procedural mosaic.

    Every surface location takes the color of its nearest mosaic seed, so the
    color field is a function of 3D position only and views agree exactly.
    """

    ROOM = 4.0
    CUBE = 0.6

    def __init__(self, n_points: int, texture: str, seed: int):
        rng = np.random.default_rng(seed)
        self.texture = texture
        self._palette = rng.uniform(0.1, 0.9, size=(12, 2, 3))
        self._waves = rng.normal(size=(6, 3)) * 1.2
        self._phases = rng.uniform(0, 2 * np.pi, size=(6, 3))
        self.seeds = self._sample_surface(rng, n_points)
        colors = self._texture_color(self.seeds)
        self.seed_colors = np.rint(colors * 255.0) / 255.0
        self._tree = cKDTree(self.seeds)

    def _faces(self):
        out = []
        for k, half in enumerate((self.ROOM, self.CUBE)):
            for axis in range(3):
                for sign in (-1.0, 1.0):
                    out.append((6 * k + 2 * axis + (sign > 0), half, axis, sign))
        return out

    def _sample_surface(self, rng, n):
        faces = self._faces()
        areas = np.array([(2 * h) ** 2 for _, h, _, _ in faces])
        choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        for i, (_, h, axis, sign) in enumerate(faces):
            sel = choice == i
            pts[sel] *= h
            pts[sel, axis] = sign * h
        return pts

    def _face_id(self, p):
        ids = np.zeros(len(p), dtype=np.int64)
        on_cube = np.abs(p).max(axis=1) < 0.5 * (self.ROOM + self.CUBE)
        half = np.where(on_cube, self.CUBE, self.ROOM)
        axis = np.argmax(np.abs(p) / half[:, None], axis=1)
        sign = p[np.arange(len(p)), axis] > 0
        ids = 6 * on_cube + 2 * axis + sign
        return ids

    def _texture_color(self, p):
        face = self._face_id(p)
        period = np.where(face >= 6, 0.4, 1.0)[:, None]
        if self.texture == "checker":
            cell = np.floor(p / period).astype(np.int64).sum(axis=1) % 2
        elif self.texture == "stripes":
            cell = (np.floor((p[:, 0] + p[:, 1] + p[:, 2]) / period[:, 0]).astype(np.int64)) % 2
        else:
            s = np.sin(p @ self._waves.T + self._phases[:, 0]).sum(axis=1)
            cell = (s > 0).astype(np.int64)
        base = self._palette[face, cell]
        if self.texture == "noise":
            shade = 0.5 + 0.25 * np.tanh(np.sin(p @ self._waves[:3].T + self._phases[:3, 1]).sum(axis=1))
            base = base * (0.6 + 0.4 * shade[:, None])
        return np.clip(base, 0.0, 1.0)

    def color(self, p) -> np.ndarray:
        _, idx = self._tree.query(np.asarray(p, dtype=np.float64))
        return self.seed_colors[idx]

    def raycast(self, origins, dirs) -> np.ndarray:
        """Distance along ``dirs`` to the first surface (room interior or cube)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            # leaving the room: largest per-axis exit, take the smallest
            t_room = np.min(np.maximum((self.ROOM - origins) * inv, (-self.ROOM - origins) * inv), axis=1)
            t1 = (-self.CUBE - origins) * inv
            t2 = (self.CUBE - origins) * inv
        t_near = np.max(np.minimum(t1, t2), axis=1)
        t_far = np.min(np.maximum(t1, t2), axis=1)
        hit_cube = (t_near <= t_far) & (t_near > 0)
        return np.where(hit_cube, np.minimum(t_near, t_room), t_room)

    def surface_distance(self, p) -> np.ndarray:
        """Unsigned distance from points to the nearest surface of the arrangement."""
        p = np.asarray(p, dtype=np.float64)
        d_room = self.ROOM - np.abs(p).max(axis=1)
        q = np.abs(p) - self.CUBE
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.minimum(np.abs(d_room), np.abs(outside + inside))


def synthetic_cameras(spec: SyntheticSpec) -> list[CameraView]:
    size = spec.image_size
    K = CameraIntrinsics(0.9 * size, 0.9 * size, (size - 1) / 2, (size - 1) / 2, size, size)
    views = []
    for k in range(spec.n_views):
        a = np.deg2rad(spec.arc_start + k * spec.arc_step)
        eye = np.array([2.6 * np.sin(a), -0.8, -2.6 * np.cos(a)])
        views.append(CameraView(K, look_at(eye, [0.0, 0.1, 0.0])))
    return views


def render_synthetic_view(world: SyntheticWorld, camera: CameraView) -> CameraView:
    K = camera.intrinsics
    pix = pixel_grid(K.height, K.width)
    rays = np.stack([(pix[:, 0] - K.cx) / K.fx, (pix[:, 1] - K.cy) / K.fy, np.ones(len(pix))], axis=1)
    origin = camera.pose.center
    dirs_world = rays @ camera.pose.rotation
    t = world.raycast(np.broadcast_to(origin, dirs_world.shape), dirs_world)
    # ray z-component is 1 in camera space, so t is the camera depth
    depth = t.astype(np.float32)
    points = backproject_pixels(pix, depth, camera)
    image = world.color(points).astype(np.float32)
    return CameraView(K, camera.pose, image.reshape(K.height, K.width, 3), depth.reshape(K.height, K.width))


def make_synthetic_scene(spec: SyntheticSpec | dict, seed: int, cameras=None) -> Scene:
    """Render a seeded synthetic scene.

    ``cameras`` overrides the default orbit (same world, different path).
    """
    if isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    world = SyntheticWorld(spec.n_points, spec.texture, seed)
    cams = synthetic_cameras(spec) if cameras is None else list(cameras)
    views = [render_synthetic_view(world, cam) for cam in cams]
    return Scene(f"synthetic-{spec.texture}-s{seed}", views,
                 {"seed": seed, "spec": spec.__dict__.copy()})
