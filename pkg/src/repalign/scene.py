"""Scene data model: meshes, cameras, per-object layout parameters, and the
rigid/affine transform math shared by the renderer and the optimizer.

Conventions:
  - layout transform is scale, then rotate, then translate:
        world = R(r) @ diag(s) @ local + t
  - rotation r is an axis-angle vector (radians); the zero vector is identity
  - camera pose is a 4x4 world-to-camera rigid transform, camera looks down +z
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_VERTEX_COLOR = (0.7, 0.7, 0.7)

# column layout of the 9 layout parameters, used by every gradient consumer
PARAM_NAMES = ("tx", "ty", "tz", "sx", "sy", "sz", "rx", "ry", "rz")
PARAM_BLOCKS = {"t": slice(0, 3), "s": slice(3, 6), "r": slice(6, 9)}


class MeshError(ValueError):
    """Malformed mesh file or mesh invariant violation."""


class SceneError(ValueError):
    """Malformed scene description or scene invariant violation."""


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with per-vertex colors, immutable after construction."""

    vertices: np.ndarray  # (V, 3) float64, object-local units
    colors: np.ndarray  # (V, 3) float64 in [0, 1]
    triangles: np.ndarray  # (T, 3) int32, indices into vertices
    id: str = "mesh"

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        c = np.ascontiguousarray(np.asarray(self.colors, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int32))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if c.shape != v.shape:
            raise MeshError(f"colors must match vertices shape, got {c.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (T, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError(
                f"triangle index out of range (vertex count {len(v)}, "
                f"max index {t.max() if t.size else '-'})"
            )
        if c.size and (c.min() < 0.0 or c.max() > 1.0):
            raise MeshError("vertex colors must lie in [0, 1]")
        if t.size:
            degenerate = (
                (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            )
            if degenerate.any():
                raise MeshError(
                    f"triangle {int(np.flatnonzero(degenerate)[0])} repeats a vertex index"
                )
        for name, arr in (("vertices", v), ("colors", c)):
            if arr.size and not np.isfinite(arr).all():
                raise MeshError(f"non-finite values in {name}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "colors", c)
        object.__setattr__(self, "triangles", t)

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def triangle_count(self):
        return len(self.triangles)


@dataclass
class LayoutParams:
    """Optimizable per-object placement: translation, per-axis scale, rotation.

    Rotation is carried but frozen under the default parameter mask.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: np.ndarray = field(default_factory=lambda: np.ones(3))
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        self.s = np.asarray(self.s, dtype=np.float64).reshape(3).copy()
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3).copy()
        self.validate()

    def validate(self):
        if not np.isfinite(self.t).all():
            raise SceneError("translation must be finite")
        if not np.isfinite(self.r).all():
            raise SceneError("rotation must be finite")
        if not np.isfinite(self.s).all() or (self.s <= 0.0).any():
            raise SceneError(f"scale components must be strictly positive, got {self.s}")

    @classmethod
    def identity(cls):
        return cls()

    def as_vector(self):
        """Pack into the canonical 9-vector (t, s, r)."""
        return np.concatenate([self.t, self.s, self.r])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64).reshape(9)
        return cls(t=vec[0:3], s=vec[3:6], r=vec[6:9])

    def copy(self):
        return LayoutParams(t=self.t, s=self.s, r=self.r)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: x = fx*X/Z + cx, y = fy*Y/Z + cy in camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # (4, 4) world-to-camera rigid transform
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4).copy()
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise SceneError(f"require 0 < near < far, got near={self.near} far={self.far}")
        if self.width < 1 or self.height < 1:
            raise SceneError("resolution components must be >= 1")
        if not np.allclose(pose[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
            raise SceneError("pose last row must be (0, 0, 0, 1)")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5):
            raise SceneError("pose rotation block is not orthonormal")
        object.__setattr__(self, "pose", pose)

    @property
    def rotation(self):
        return self.pose[:3, :3]

    @property
    def translation(self):
        return self.pose[:3, 3]

    def world_to_camera(self, points):
        """Map world points (..., 3) into camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass
class SceneObject:
    mesh: Mesh
    layout: LayoutParams


@dataclass
class Scene:
    """A camera plus object instances; layout params are the optimizable state."""

    objects: list
    camera: Camera
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3).copy()
        if len(self.objects) < 1:
            raise SceneError("scene must contain at least one object")
        if (self.background < 0.0).any() or (self.background > 1.0).any():
            raise SceneError("background color must lie in [0, 1]")
        for obj in self.objects:
            if not isinstance(obj, SceneObject):
                raise SceneError("scene objects must be SceneObject instances")

    def copy(self):
        """Copy with fresh LayoutParams; meshes are shared immutably."""
        return Scene(
            objects=[SceneObject(o.mesh, o.layout.copy()) for o in self.objects],
            camera=self.camera,
            background=self.background,
        )

    def params_matrix(self):
        """Stack per-object layout parameters into an (n_objects, 9) array."""
        return np.stack([o.layout.as_vector() for o in self.objects])

    def set_params_matrix(self, mat):
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (len(self.objects), 9):
            raise SceneError(f"expected {(len(self.objects), 9)} parameter matrix")
        for obj, row in zip(self.objects, mat):
            obj.layout = LayoutParams.from_vector(row)


@dataclass(frozen=True)
class HyperParams:
    """Cost-channel weights (alpha: rgb, beta: depth, gamma: position) and the
    appearance/semantic mix lam."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 0.8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise SceneError("channel weights must be nonnegative")
        if self.alpha + self.beta + self.gamma <= 0:
            raise SceneError("at least one channel weight must be positive")
        if not (0.0 <= self.lam <= 1.0):
            raise SceneError(f"lam must lie in [0, 1], got {self.lam}")


@dataclass
class LayoutGradient:
    """Per-object loss gradient in the (t, s, r) parameter layout."""

    data: np.ndarray  # (n_objects, 9)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != 9:
            raise ValueError(f"layout gradient must be (n_objects, 9), got {self.data.shape}")

    @classmethod
    def zeros(cls, n_objects):
        return cls(np.zeros((n_objects, 9)))

    @property
    def g_t(self):
        return self.data[:, 0:3]

    @property
    def g_s(self):
        return self.data[:, 3:6]

    @property
    def g_r(self):
        return self.data[:, 6:9]

    def all_finite(self):
        return bool(np.isfinite(self.data).all())

    def __add__(self, other):
        return LayoutGradient(self.data + other.data)

    def scaled(self, k):
        return LayoutGradient(self.data * k)


# ---------------------------------------------------------------------------
# rotation and transform math


def rotation_matrix(r):
    """Rodrigues rotation matrix for an axis-angle vector."""
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(r))
    kx, ky, kz = r
    hat = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    if theta < 1e-8:
        # second-order Taylor keeps derivatives consistent near zero
        return np.eye(3) + hat + 0.5 * (hat @ hat)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * hat + b * (hat @ hat)


def rotation_jacobian(r):
    """d(rotation_matrix)/dr as a (3, 3, 3) array indexed [k, i, j] for dR/dr_k.

    Closed form: dR/dr_k = ((r_k [r]x + [r x (I - R) e_k]x) / |r|^2) R,
    with the |r| -> 0 limit dR/dr_k = [e_k]x.
    """
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta2 = float(r @ r)
    R = rotation_matrix(r)

    def _hat(v):
        return np.array(
            [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
        )

    out = np.empty((3, 3, 3))
    if theta2 < 1e-16:
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            out[k] = _hat(e)
        return out
    eye_minus_r = np.eye(3) - R
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        v = np.cross(r, eye_minus_r @ e)
        out[k] = ((r[k] * _hat(r) + _hat(v)) / theta2) @ R
    return out


def transform_point(layout, m):
    """Apply the layout transform: R(r) @ diag(s) @ m + t."""
    m = np.asarray(m, dtype=np.float64).reshape(3)
    return rotation_matrix(layout.r) @ (layout.s * m) + layout.t


def transform_points(layout, pts):
    """Vectorized transform_point over (N, 3) local points."""
    pts = np.asarray(pts, dtype=np.float64)
    return (layout.s * pts) @ rotation_matrix(layout.r).T + layout.t


def transform_jacobian(layout, m):
    """Jacobian of the world point w.r.t. the 9 layout params, shape (3, 9).

    Columns follow PARAM_NAMES: translation block is the identity, scale block
    is R[:, k] * m_k, rotation block goes through the axis-angle derivative.
    Frozen parameters are still differentiated; masking is the optimizer's job.
    """
    m = np.asarray(m, dtype=np.float64).reshape(3)
    R = rotation_matrix(layout.r)
    dR = rotation_jacobian(layout.r)
    jac = np.zeros((3, 9))
    jac[:, 0:3] = np.eye(3)
    for k in range(3):
        jac[:, 3 + k] = R[:, k] * m[k]
    sm = layout.s * m
    for k in range(3):
        jac[:, 6 + k] = dR[k] @ sm
    return jac


def transform_jacobians(layout, pts):
    """Vectorized transform_jacobian over (N, 3) points, shape (N, 3, 9)."""
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    R = rotation_matrix(layout.r)
    dR = rotation_jacobian(layout.r)
    jac = np.zeros((n, 3, 9))
    jac[:, :, 0:3] = np.eye(3)
    for k in range(3):
        jac[:, :, 3 + k] = R[:, k][None, :] * pts[:, k, None]
    sm = layout.s * pts  # (N, 3)
    for k in range(3):
        jac[:, :, 6 + k] = sm @ dR[k].T
    return jac


# ---------------------------------------------------------------------------
# mesh and scene file I/O


def load_mesh(path):
    """Parse a Wavefront-OBJ subset.

    Supported records: `v x y z` (optionally `v x y z r g b` carrying a vertex
    color) and `f i j k` with 1-based positive indices. Anything else is
    skipped with a warning. Vertices without a color get the default gray.
    """
    path = Path(path)
    if not path.exists():
        raise MeshError(f"mesh file not found: {path}")
    vertices = []
    colors = []
    triangles = []
    warned = set()
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            kind = tokens[0]
            if kind == "v":
                vals = tokens[1:]
                if len(vals) not in (3, 6):
                    raise MeshError(
                        f"{path}:{lineno}: vertex record needs 3 or 6 numbers, got {len(vals)}"
                    )
                try:
                    nums = [float(x) for x in vals]
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex number: {exc}") from None
                vertices.append(nums[0:3])
                colors.append(nums[3:6] if len(nums) == 6 else list(DEFAULT_VERTEX_COLOR))
            elif kind == "f":
                vals = tokens[1:]
                if len(vals) != 3:
                    raise MeshError(
                        f"{path}:{lineno}: only triangle faces are supported, got {len(vals)} indices"
                    )
                idx = []
                for tok in vals:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: bad face index {tok!r}") from None
                    if i <= 0:
                        raise MeshError(
                            f"{path}:{lineno}: face indices must be positive 1-based, got {i}"
                        )
                    idx.append(i - 1)
                triangles.append(idx)
            else:
                if kind not in warned:
                    log.warning("%s:%d: ignoring unsupported record type %r", path, lineno, kind)
                    warned.add(kind)
    if not vertices:
        raise MeshError(f"{path}: no vertices found")
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if tri.size and tri.max() >= len(vertices):
        bad = int(tri.max())
        raise MeshError(
            f"{path}: face index {bad + 1} out of range for {len(vertices)} vertices"
        )
    try:
        return Mesh(
            vertices=np.asarray(vertices),
            colors=np.asarray(colors),
            triangles=tri,
            id=str(path),
        )
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def save_mesh(mesh, path):
    """Write the OBJ subset produced by load_mesh (vertex colors inline)."""
    path = Path(path)
    with open(path, "w") as fh:
        for v, c in zip(mesh.vertices, mesh.colors):
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def _camera_from_json(cam):
    try:
        return Camera(
            fx=float(cam["fx"]),
            fy=float(cam["fy"]),
            cx=float(cam["cx"]),
            cy=float(cam["cy"]),
            pose=np.asarray(cam["pose"], dtype=np.float64).reshape(4, 4),
            width=int(cam["width"]),
            height=int(cam["height"]),
            near=float(cam["near"]),
            far=float(cam["far"]),
        )
    except KeyError as exc:
        raise SceneError(f"camera record is missing field {exc}") from None


def load_scene(path):
    """Load a scene description JSON; see README for the schema.

    Mesh paths are resolved relative to the scene file. Omitted t/s/r fall
    back to the identity layout.
    """
    path = Path(path)
    if not path.exists():
        raise SceneError(f"scene file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON: {exc}") from None
    if "camera" not in doc:
        raise SceneError(f"{path}: missing camera record")
    if "objects" not in doc or not isinstance(doc["objects"], list):
        raise SceneError(f"{path}: missing objects list")
    camera = _camera_from_json(doc["camera"])
    background = np.asarray(doc.get("background", (0.0, 0.0, 0.0)), dtype=np.float64)
    objects = []
    mesh_cache = {}
    for i, rec in enumerate(doc["objects"]):
        if "mesh" not in rec:
            raise SceneError(f"{path}: object {i} has no mesh path")
        mesh_path = Path(rec["mesh"])
        if not mesh_path.is_absolute():
            mesh_path = path.parent / mesh_path
        key = str(mesh_path)
        if key not in mesh_cache:
            if not mesh_path.exists():
                raise SceneError(f"{path}: object {i} mesh file not found: {mesh_path}")
            mesh_cache[key] = load_mesh(mesh_path)
        try:
            layout = LayoutParams(
                t=np.asarray(rec.get("t", (0.0, 0.0, 0.0)), dtype=np.float64),
                s=np.asarray(rec.get("s", (1.0, 1.0, 1.0)), dtype=np.float64),
                r=np.asarray(rec.get("r", (0.0, 0.0, 0.0)), dtype=np.float64),
            )
        except (SceneError, ValueError) as exc:
            raise SceneError(f"{path}: object {i}: {exc}") from None
        objects.append(SceneObject(mesh_cache[key], layout))
    try:
        return Scene(objects=objects, camera=camera, background=background)
    except SceneError as exc:
        raise SceneError(f"{path}: {exc}") from None


def scene_to_json(scene, mesh_paths=None):
    """Serialize a scene back to the description schema.

    mesh_paths maps object index to the mesh path string to record; defaults
    to each mesh's id (which load_mesh sets to the source path).
    """
    cam = scene.camera
    doc = {
        "camera": {
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "width": cam.width,
            "height": cam.height,
            "near": cam.near,
            "far": cam.far,
            "pose": [float(x) for x in cam.pose.reshape(16)],
        },
        "background": [float(x) for x in scene.background],
        "objects": [],
    }
    for i, obj in enumerate(scene.objects):
        mesh_ref = mesh_paths[i] if mesh_paths else obj.mesh.id
        doc["objects"].append(
            {
                "mesh": str(mesh_ref),
                "t": [float(x) for x in obj.layout.t],
                "s": [float(x) for x in obj.layout.s],
                "r": [float(x) for x in obj.layout.r],
            }
        )
    return doc


def save_scene(scene, path, mesh_paths=None):
    Path(path).write_text(json.dumps(scene_to_json(scene, mesh_paths), indent=2) + "\n")
