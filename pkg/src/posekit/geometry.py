"""Mesh representation and pose/transform math.

Conventions: right-handed coordinates, column vectors, world units chosen so
a loaded mesh has a bounding-box extent of 2.0. Yaw/pitch/roll rotate about
the fixed (extrinsic) y, x and z axes and compose as R_y @ R_p @ R_r, i.e.
roll is applied first.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

TWO_PI = 2.0 * math.pi

POSE_PARAM_NAMES = ("x_delta", "y_delta", "z_delta", "theta_y", "theta_p", "theta_r")
ANGLE_PARAMS = ("theta_y", "theta_p", "theta_r")


class ObjFormatError(ValueError):
    """Raised for malformed OBJ/MTL input; carries the offending line number."""

    def __init__(self, path: str, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class DegenerateAngleError(ValueError):
    """A (cos, sin) pair of (0, 0) has no decodable angle."""


def wrap_angle(theta: float) -> float:
    """Map an angle in radians into [0, 2*pi)."""
    r = float(theta) % TWO_PI
    if r >= TWO_PI or r < 0.0:  # guard the float rounding edge at 2*pi
        r = 0.0
    return r


def circular_distance(a: float, b: float) -> float:
    """Shortest angular distance between two angles; always in [0, pi]."""
    d = abs(wrap_angle(a) - wrap_angle(b))
    return min(d, TWO_PI - d)


@dataclass(frozen=True)
class FrustumSpec:
    """Camera vertical half-angle plus the depth sub-volume objects live in."""

    half_angle_v: float = math.radians(8.213)
    camera_z: float = 0.0
    depth_range: tuple[float, float] = (-28.0, 0.0)

    def __post_init__(self):
        if not (0.0 < self.half_angle_v < math.pi / 2):
            raise ValueError(f"half_angle_v must be in (0, pi/2), got {self.half_angle_v}")
        lo, hi = self.depth_range
        if lo > hi:
            raise ValueError(f"depth_range must satisfy z_min <= z_max, got {self.depth_range}")

    @property
    def view_sign(self) -> float:
        """+1 if the camera looks toward +z, -1 toward -z (toward the depth range)."""
        mid = 0.5 * (self.depth_range[0] + self.depth_range[1])
        return 1.0 if mid > self.camera_z else -1.0


def frustum_bound(spec: FrustumSpec, z_delta: float) -> float:
    """Lateral bound s = d * tan(half_angle_v) keeping a point in frame at depth z_delta."""
    lo, hi = spec.depth_range
    if not (lo <= z_delta <= hi):
        raise ValueError(f"z_delta {z_delta} outside depth range [{lo}, {hi}]")
    d = abs(spec.camera_z - z_delta)
    return d * math.tan(spec.half_angle_v)


@dataclass(frozen=True)
class PoseParams:
    """6D pose: world translation deltas plus yaw/pitch/roll in radians.

    Angles are wrapped into [0, 2*pi) at construction.
    """

    x_delta: float = 0.0
    y_delta: float = 0.0
    z_delta: float = 0.0
    theta_y: float = 0.0
    theta_p: float = 0.0
    theta_r: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta_y", wrap_angle(self.theta_y))
        object.__setattr__(self, "theta_p", wrap_angle(self.theta_p))
        object.__setattr__(self, "theta_r", wrap_angle(self.theta_r))

    def translation(self) -> np.ndarray:
        return np.array([self.x_delta, self.y_delta, self.z_delta], dtype=np.float64)

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.x_delta, self.y_delta, self.z_delta, self.theta_y, self.theta_p, self.theta_r)

    def replace(self, **kw) -> "PoseParams":
        vals = dict(zip(POSE_PARAM_NAMES, self.as_tuple()))
        vals.update(kw)
        return PoseParams(**vals)

    def is_valid(self, spec: FrustumSpec, tol: float = 1e-9) -> bool:
        lo, hi = spec.depth_range
        if not (lo - tol <= self.z_delta <= hi + tol):
            return False
        s = frustum_bound(spec, min(max(self.z_delta, lo), hi))
        return abs(self.x_delta) <= s + tol and abs(self.y_delta) <= s + tol


def validate_pose(pose: PoseParams, spec: FrustumSpec) -> None:
    """Raise ValueError naming the offending field if the pose violates the frustum box."""
    lo, hi = spec.depth_range
    if not (lo <= pose.z_delta <= hi):
        raise ValueError(f"z_delta {pose.z_delta} outside depth range [{lo}, {hi}]")
    s = frustum_bound(spec, pose.z_delta)
    if abs(pose.x_delta) > s:
        raise ValueError(f"x_delta {pose.x_delta} outside [-{s}, {s}] at z_delta {pose.z_delta}")
    if abs(pose.y_delta) > s:
        raise ValueError(f"y_delta {pose.y_delta} outside [-{s}, {s}] at z_delta {pose.z_delta}")


def clamp_pose(pose: PoseParams, spec: FrustumSpec) -> PoseParams:
    """Project translation components into the frustum box (angles untouched)."""
    lo, hi = spec.depth_range
    z = min(max(pose.z_delta, lo), hi)
    s = frustum_bound(spec, z)
    x = min(max(pose.x_delta, -s), s)
    y = min(max(pose.y_delta, -s), s)
    if (x, y, z) == (pose.x_delta, pose.y_delta, pose.z_delta):
        return pose
    return pose.replace(x_delta=x, y_delta=y, z_delta=z)


@dataclass(frozen=True)
class TrigPose:
    """9-parameter pose encoding: translation plus a (cos, sin) pair per angle.

    Pairs are not required to lie on the unit circle; decoding normalizes
    through atan2, which is what lets gradient steps move them off it.
    """

    x_delta: float
    y_delta: float
    z_delta: float
    cos_y: float
    sin_y: float
    cos_p: float
    sin_p: float
    cos_r: float
    sin_r: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x_delta, self.y_delta, self.z_delta,
             self.cos_y, self.sin_y, self.cos_p, self.sin_p, self.cos_r, self.sin_r],
            dtype=np.float64,
        )

    @staticmethod
    def from_array(w: np.ndarray) -> "TrigPose":
        if len(w) != 9:
            raise ValueError(f"trig pose needs 9 values, got {len(w)}")
        return TrigPose(*(float(v) for v in w))


def encode_trig(pose: PoseParams) -> TrigPose:
    return TrigPose(
        pose.x_delta, pose.y_delta, pose.z_delta,
        math.cos(pose.theta_y), math.sin(pose.theta_y),
        math.cos(pose.theta_p), math.sin(pose.theta_p),
        math.cos(pose.theta_r), math.sin(pose.theta_r),
    )


def decode_trig(tp: TrigPose) -> PoseParams:
    angles = []
    for c, s, name in ((tp.cos_y, tp.sin_y, "yaw"), (tp.cos_p, tp.sin_p, "pitch"),
                       (tp.cos_r, tp.sin_r, "roll")):
        if c == 0.0 and s == 0.0:
            raise DegenerateAngleError(f"(0, 0) trig pair for {name} has no angle")
        angles.append(wrap_angle(math.atan2(s, c)))
    return PoseParams(tp.x_delta, tp.y_delta, tp.z_delta, *angles)


def rotation_matrix_axis_angle(axis, theta: float) -> np.ndarray:
    """Proper rotation by theta about a unit axis (Rodrigues form)."""
    a = np.asarray(axis, dtype=np.float64)
    n = float(np.linalg.norm(a))
    if abs(n - 1.0) > 1e-9:
        raise ValueError(f"axis must be unit length, got norm {n}")
    x, y, z = a
    c = math.cos(theta)
    s = math.sin(theta)
    t = 1.0 - c
    return np.array([
        [x * x * t + c, x * y * t - z * s, x * z * t + y * s],
        [x * y * t + z * s, y * y * t + c, y * z * t - x * s],
        [x * z * t - y * s, y * z * t + x * s, z * z * t + c],
    ], dtype=np.float64)


_Y_AXIS = np.array([0.0, 1.0, 0.0])
_X_AXIS = np.array([1.0, 0.0, 0.0])
_Z_AXIS = np.array([0.0, 0.0, 1.0])


def pose_rotation(pose: PoseParams) -> np.ndarray:
    """Combined rotation R_y @ R_p @ R_r (roll applied first)."""
    r_y = rotation_matrix_axis_angle(_Y_AXIS, pose.theta_y)
    r_p = rotation_matrix_axis_angle(_X_AXIS, pose.theta_p)
    r_r = rotation_matrix_axis_angle(_Z_AXIS, pose.theta_r)
    return r_y @ r_p @ r_r


def apply_pose(mesh: "Mesh", pose: PoseParams) -> np.ndarray:
    """Transformed copy of the mesh vertices: T + R_y R_p R_r v."""
    r = pose_rotation(pose)
    return mesh.vertices @ r.T + pose.translation()


def rotate_normals(mesh: "Mesh", pose: PoseParams) -> np.ndarray:
    """Vertex normals under the pose rotation (pure rotation, no rescale needed)."""
    return mesh.normals @ pose_rotation(pose).T


@dataclass(frozen=True)
class TransformChain:
    """An ordered list of axis-angle rotations followed by one translation."""

    rotations: tuple[tuple[tuple[float, float, float], float], ...] = ()
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for axis, _ in self.rotations:
            n = math.sqrt(sum(v * v for v in axis))
            if abs(n - 1.0) > 1e-9:
                raise ValueError(f"rotation axis {axis} has norm {n}, expected 1")


def compose_chain(chain: TransformChain) -> np.ndarray:
    """Homogeneous 4x4 matrix T @ R_{n-1} @ ... @ R_0."""
    acc = np.eye(4)
    for axis, angle in chain.rotations:
        m = np.eye(4)
        m[:3, :3] = rotation_matrix_axis_angle(np.asarray(axis, dtype=np.float64), angle)
        acc = m @ acc
    t = np.eye(4)
    t[:3, 3] = chain.translation
    return t @ acc


def pose_chain(pose: PoseParams) -> TransformChain:
    """The pose expressed as a transform chain (roll, pitch, yaw, then translation)."""
    return TransformChain(
        rotations=(
            ((0.0, 0.0, 1.0), pose.theta_r),
            ((1.0, 0.0, 0.0), pose.theta_p),
            ((0.0, 1.0, 0.0), pose.theta_y),
        ),
        translation=(pose.x_delta, pose.y_delta, pose.z_delta),
    )


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with per-face-vertex UVs, per-vertex unit normals and one texture."""

    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray  # (F, 3) int32
    uv_coords: np.ndarray  # (F, 3, 2) float64 in [0, 1]
    normals: np.ndarray  # (N, 3) float64, unit
    texture: np.ndarray = field(repr=False, default=None)  # (th, tw, 3) float64 in [0, 1]
    texture_ref: str = "solid:white"

    def __post_init__(self):
        if self.texture is None:
            object.__setattr__(self, "texture", np.ones((2, 2, 3), dtype=np.float64))
        validate_mesh(self)

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def num_faces(self) -> int:
        return int(self.faces.shape[0])

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def validate_mesh(mesh: Mesh) -> None:
    if mesh.faces.shape[0] < 1:
        raise ValueError("mesh must have at least one face")
    if mesh.faces.min() < 0 or mesh.faces.max() >= mesh.vertices.shape[0]:
        raise ValueError("face index out of range")
    norms = np.linalg.norm(mesh.normals, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise ValueError("vertex normals must have unit length within 1e-6")


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals (cross products carry the weight)."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    face_n = np.cross(v1 - v0, v2 - v0)  # magnitude = 2 * area
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], face_n)
    lens = np.linalg.norm(normals, axis=1)
    degenerate = lens < 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    lens[degenerate] = 1.0
    return normals / lens[:, None]


def normalize_mesh(vertices: np.ndarray) -> np.ndarray:
    """Center on the bounding-box centroid and scale the largest extent to 2.0."""
    lo = vertices.min(axis=0)
    hi = vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max())
    scale = 2.0 / extent if extent > 0 else 1.0
    return (vertices - center) * scale


def load_texture(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"texture file not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def _parse_mtl(path: str) -> tuple[np.ndarray | None, str | None]:
    """First material's diffuse map (or Kd color as a 1x1 texture)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"material file not found: {path}")
    kd = None
    base = os.path.dirname(path)
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line_no, raw in enumerate(fh, start=1):
            tokens = raw.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if tokens[0] == "map_Kd" and len(tokens) >= 2:
                tex_path = os.path.join(base, tokens[-1])
                return load_texture(tex_path), tex_path
            if tokens[0] == "Kd" and len(tokens) >= 4:
                try:
                    kd = [float(v) for v in tokens[1:4]]
                except ValueError:
                    raise ObjFormatError(path, line_no, f"bad Kd values: {raw.strip()}")
    if kd is not None:
        return np.full((1, 1, 3), np.clip(kd, 0.0, 1.0), dtype=np.float64), f"Kd:{path}"
    return None, None


def load_obj(path: str, normalize: bool = True) -> Mesh:
    """Load a triangulated (or quad, fan-split) OBJ with optional MTL diffuse texture."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"mesh file not found: {path}")
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    obj_normals: list[list[float]] = []
    face_tuples: list[list[tuple[int, int, int]]] = []  # (v, vt, vn) 0-based, -1 = absent
    texture = None
    texture_ref = None
    base = os.path.dirname(path)

    def idx(token: str, count: int, line_no: int, what: str) -> int:
        try:
            i = int(token)
        except ValueError:
            raise ObjFormatError(path, line_no, f"bad {what} index {token!r}")
        if i < 0:
            i = count + i
        else:
            i = i - 1
        if not (0 <= i < count):
            raise ObjFormatError(path, line_no, f"{what} index {token} out of range (have {count})")
        return i

    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line_no, raw in enumerate(fh, start=1):
            tokens = raw.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            kind = tokens[0]
            try:
                if kind == "v":
                    if len(tokens) < 4:
                        raise ObjFormatError(path, line_no, "vertex needs 3 coordinates")
                    positions.append([float(v) for v in tokens[1:4]])
                elif kind == "vt":
                    if len(tokens) < 3:
                        raise ObjFormatError(path, line_no, "texcoord needs 2 values")
                    texcoords.append([float(tokens[1]), float(tokens[2])])
                elif kind == "vn":
                    if len(tokens) < 4:
                        raise ObjFormatError(path, line_no, "normal needs 3 values")
                    obj_normals.append([float(v) for v in tokens[1:4]])
                elif kind == "f":
                    corners = []
                    for part in tokens[1:]:
                        fields = part.split("/")
                        vi = idx(fields[0], len(positions), line_no, "vertex")
                        ti = -1
                        ni = -1
                        if len(fields) > 1 and fields[1]:
                            ti = idx(fields[1], len(texcoords), line_no, "texcoord")
                        if len(fields) > 2 and fields[2]:
                            ni = idx(fields[2], len(obj_normals), line_no, "normal")
                        corners.append((vi, ti, ni))
                    if len(corners) == 3:
                        face_tuples.append(corners)
                    elif len(corners) == 4:
                        face_tuples.append([corners[0], corners[1], corners[2]])
                        face_tuples.append([corners[0], corners[2], corners[3]])
                    else:
                        raise ObjFormatError(
                            path, line_no,
                            f"faces must be triangles or quads, got {len(corners)} vertices")
                elif kind == "mtllib" and len(tokens) >= 2:
                    texture, texture_ref = _parse_mtl(os.path.join(base, tokens[-1]))
            except ValueError as exc:
                if isinstance(exc, ObjFormatError):
                    raise
                raise ObjFormatError(path, line_no, f"parse failure: {raw.strip()!r}") from exc

    if not positions:
        raise ObjFormatError(path, 0, "no vertices found")
    if not face_tuples:
        raise ObjFormatError(path, 0, "no faces found")

    vertices = np.asarray(positions, dtype=np.float64)
    if normalize:
        vertices = normalize_mesh(vertices)
    faces = np.array([[c[0] for c in f] for f in face_tuples], dtype=np.int32)

    uv = np.zeros((len(face_tuples), 3, 2), dtype=np.float64)
    for fi, f in enumerate(face_tuples):
        for k, (_, ti, _) in enumerate(f):
            if ti >= 0:
                uv[fi, k] = texcoords[ti]
    uv = np.clip(uv, 0.0, 1.0)

    if obj_normals and all(c[2] >= 0 for f in face_tuples for c in f):
        acc = np.zeros_like(vertices)
        for f in face_tuples:
            for vi, _, ni in f:
                acc[vi] += obj_normals[ni]
        lens = np.linalg.norm(acc, axis=1)
        bad = lens < 1e-12
        acc[bad] = (0.0, 0.0, 1.0)
        lens[bad] = 1.0
        normals = acc / lens[:, None]
    else:
        normals = compute_vertex_normals(vertices, faces)

    return Mesh(
        vertices=vertices,
        faces=faces,
        uv_coords=uv,
        normals=normals,
        texture=texture,
        texture_ref=texture_ref or "solid:white",
    )
