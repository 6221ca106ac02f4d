"""Deterministic software rasterizer.

Perspective projection with a z-buffer, perspective-correct attribute
interpolation, nearest-neighbor texture sampling (bilinear behind a flag) and
ambient + directional Lambertian shading. The inner loops run under numba
when available; the pure-Python fallback executes the identical arithmetic in
the identical order, so pixel output is bit-for-bit the same either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .geometry import (
    FrustumSpec,
    Mesh,
    PoseParams,
    apply_pose,
    rotate_normals,
    validate_pose,
)

_NEAR_PLANE = 1e-4

DEFAULT_BACKGROUND = (0.485, 0.456, 0.406)  # ImageNet mean pixel
DEFAULT_IMAGE_SIZE = (299, 299)


class ProjectionError(ValueError):
    """Point lies exactly on the camera plane; perspective division undefined."""


@dataclass(frozen=True)
class LightingConfig:
    """One white-by-default directional light plus ambient term."""

    directional_intensity: float = 0.4
    ambient_intensity: float = 1.0
    light_direction: tuple[float, float, float] = (0.0, -1.0, 0.0)
    directional_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ambient_color: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.directional_intensity < 0 or self.ambient_intensity < 0:
            raise ValueError("light intensities must be nonnegative")
        n = math.sqrt(sum(v * v for v in self.light_direction))
        if n == 0:
            raise ValueError("light_direction must be nonzero")
        object.__setattr__(self, "light_direction",
                           tuple(v / n for v in self.light_direction))


# (directional, ambient) intensity presets
LIGHTING_PRESETS = {
    "bright": (1.2, 1.6),
    "medium": (0.4, 1.0),
    "dark": (0.2, 0.5),
}


def lighting_preset(name: str) -> LightingConfig:
    if name not in LIGHTING_PRESETS:
        raise KeyError(f"unknown lighting preset {name!r}; have {sorted(LIGHTING_PRESETS)}")
    directional, ambient = LIGHTING_PRESETS[name]
    return LightingConfig(directional_intensity=directional, ambient_intensity=ambient)


@dataclass(frozen=True)
class SceneConfig:
    """Everything the renderer needs besides the pose."""

    mesh: Mesh = field(repr=False, default=None)
    mesh_id: str = "mesh"
    lighting: LightingConfig = field(default_factory=LightingConfig)
    frustum: FrustumSpec = field(default_factory=FrustumSpec)
    background_color: tuple[float, float, float] = DEFAULT_BACKGROUND
    background_image: np.ndarray | None = field(repr=False, default=None)
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE  # (H, W)
    texture_filter: str = "nearest"
    true_class: int | None = None

    def __post_init__(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError(f"image size must be at least 16x16, got {self.image_size}")
        if self.texture_filter not in ("nearest", "bilinear"):
            raise ValueError(f"texture_filter must be nearest or bilinear, got {self.texture_filter}")
        if self.background_image is not None:
            if self.background_image.shape[:2] != (h, w):
                raise ValueError("background image must already match image_size; "
                                 "use center_crop_resize when loading")

    def with_lighting(self, lighting: LightingConfig) -> "SceneConfig":
        return replace(self, lighting=lighting)


@dataclass
class RenderOutput:
    """Rendered pixels in [0,1], per-pixel object coverage, and identifying metadata."""

    pixels: np.ndarray  # (H, W, 3) float64
    coverage_mask: np.ndarray  # (H, W) bool
    meta: dict

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_u8(self) -> np.ndarray:
        """8-bit RGB as shipped over the wire: round(p * 255)."""
        return np.rint(self.pixels * 255.0).astype(np.uint8)


def _raster_kernel_py(xy, inv_d, uvd, nd, texture, ambient, diffuse, neg_light,
                      bilinear, image, zbuf, mask):
    height, width = zbuf.shape
    th, tw = texture.shape[0], texture.shape[1]
    n_tri = xy.shape[0]
    for t in range(n_tri):
        ax = xy[t, 0, 0]
        ay = xy[t, 0, 1]
        bx = xy[t, 1, 0]
        by = xy[t, 1, 1]
        cx = xy[t, 2, 0]
        cy = xy[t, 2, 1]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area2 == 0.0:
            continue
        inv_area = 1.0 / area2
        minx = min(ax, min(bx, cx))
        maxx = max(ax, max(bx, cx))
        miny = min(ay, min(by, cy))
        maxy = max(ay, max(by, cy))
        j0 = int(math.floor(minx - 0.5))
        j1 = int(math.ceil(maxx - 0.5))
        i0 = int(math.floor(miny - 0.5))
        i1 = int(math.ceil(maxy - 0.5))
        if j0 < 0:
            j0 = 0
        if i0 < 0:
            i0 = 0
        if j1 > width - 1:
            j1 = width - 1
        if i1 > height - 1:
            i1 = height - 1
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                px = j + 0.5
                l0 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) * inv_area
                if l0 < 0.0:
                    continue
                l1 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) * inv_area
                if l1 < 0.0:
                    continue
                l2 = 1.0 - l0 - l1
                if l2 < 0.0:
                    continue
                w_inv = l0 * inv_d[t, 0] + l1 * inv_d[t, 1] + l2 * inv_d[t, 2]
                if w_inv <= 0.0:
                    continue
                depth = 1.0 / w_inv
                if depth >= zbuf[i, j]:
                    continue
                u = (l0 * uvd[t, 0, 0] + l1 * uvd[t, 1, 0] + l2 * uvd[t, 2, 0]) * depth
                v = (l0 * uvd[t, 0, 1] + l1 * uvd[t, 1, 1] + l2 * uvd[t, 2, 1]) * depth
                nx = (l0 * nd[t, 0, 0] + l1 * nd[t, 1, 0] + l2 * nd[t, 2, 0]) * depth
                ny = (l0 * nd[t, 0, 1] + l1 * nd[t, 1, 1] + l2 * nd[t, 2, 1]) * depth
                nz = (l0 * nd[t, 0, 2] + l1 * nd[t, 1, 2] + l2 * nd[t, 2, 2]) * depth
                nlen = math.sqrt(nx * nx + ny * ny + nz * nz)
                if nlen > 0.0:
                    nx /= nlen
                    ny /= nlen
                    nz /= nlen
                lam = nx * neg_light[0] + ny * neg_light[1] + nz * neg_light[2]
                if lam < 0.0:
                    lam = 0.0
                if bilinear:
                    fx = u * tw - 0.5
                    fy = (1.0 - v) * th - 0.5
                    x0 = int(math.floor(fx))
                    y0 = int(math.floor(fy))
                    dx = fx - x0
                    dy = fy - y0
                    x1 = x0 + 1
                    y1 = y0 + 1
                    if x0 < 0:
                        x0 = 0
                    if y0 < 0:
                        y0 = 0
                    if x1 < 0:
                        x1 = 0
                    if y1 < 0:
                        y1 = 0
                    if x0 > tw - 1:
                        x0 = tw - 1
                    if x1 > tw - 1:
                        x1 = tw - 1
                    if y0 > th - 1:
                        y0 = th - 1
                    if y1 > th - 1:
                        y1 = th - 1
                    for ch in range(3):
                        t00 = texture[y0, x0, ch]
                        t10 = texture[y0, x1, ch]
                        t01 = texture[y1, x0, ch]
                        t11 = texture[y1, x1, ch]
                        texel = (t00 * (1 - dx) * (1 - dy) + t10 * dx * (1 - dy)
                                 + t01 * (1 - dx) * dy + t11 * dx * dy)
                        val = texel * (ambient[ch] + diffuse[ch] * lam)
                        if val < 0.0:
                            val = 0.0
                        elif val > 1.0:
                            val = 1.0
                        image[i, j, ch] = val
                else:
                    tj = int(u * tw)
                    ti = int((1.0 - v) * th)
                    if tj < 0:
                        tj = 0
                    elif tj > tw - 1:
                        tj = tw - 1
                    if ti < 0:
                        ti = 0
                    elif ti > th - 1:
                        ti = th - 1
                    for ch in range(3):
                        val = texture[ti, tj, ch] * (ambient[ch] + diffuse[ch] * lam)
                        if val < 0.0:
                            val = 0.0
                        elif val > 1.0:
                            val = 1.0
                        image[i, j, ch] = val
                zbuf[i, j] = depth
                mask[i, j] = 1


try:  # identical arithmetic either way; numba only removes interpreter overhead
    import numba

    _raster_kernel = numba.njit(cache=True, fastmath=False)(_raster_kernel_py)
except ImportError:  # pragma: no cover
    _raster_kernel = _raster_kernel_py


def _camera_space(spec: FrustumSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-handed look-at along the z axis toward the depth range."""
    sign = spec.view_sign
    xc = -sign * points[:, 0]
    yc = points[:, 1]
    d = sign * (points[:, 2] - spec.camera_z)
    return xc, yc, d


def _tan_halves(scene: SceneConfig) -> tuple[float, float]:
    h, w = scene.image_size
    tan_v = math.tan(scene.frustum.half_angle_v)
    tan_h = tan_v * (w / h)
    return tan_h, tan_v


def _clip_triangle(corners: list) -> list:
    """Sutherland-Hodgman clip of one triangle against depth > _NEAR_PLANE.

    corners: list of (xc, yc, d, u, v, nx, ny, nz) tuples. Returns 0..4 vertices.
    """
    out = []
    n = len(corners)
    for k in range(n):
        cur = corners[k]
        nxt = corners[(k + 1) % n]
        cur_in = cur[2] > _NEAR_PLANE
        nxt_in = nxt[2] > _NEAR_PLANE
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = (_NEAR_PLANE - cur[2]) / (nxt[2] - cur[2])
            out.append(tuple(c + t * (m - c) for c, m in zip(cur, nxt)))
    return out


def render(scene: SceneConfig, pose: PoseParams, enforce_frustum: bool = True) -> RenderOutput:
    """Rasterize the scene's mesh under the pose. Deterministic: same inputs, same bits."""
    if enforce_frustum:
        validate_pose(pose, scene.frustum)
    mesh = scene.mesh
    h, w = scene.image_size

    image = np.empty((h, w, 3), dtype=np.float64)
    if scene.background_image is not None:
        image[:] = scene.background_image
    else:
        image[:] = scene.background_color
    zbuf = np.full((h, w), np.inf, dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)

    verts = apply_pose(mesh, pose)
    normals = rotate_normals(mesh, pose)
    xc, yc, d = _camera_space(scene.frustum, verts)

    faces = mesh.faces
    fd = d[faces]  # (F, 3)
    front = fd > _NEAR_PLANE
    any_front = front.any(axis=1)
    all_front = front.all(axis=1)

    # fast path: fully-front triangles, vectorized attribute assembly
    tris = []
    if all_front.any():
        f_idx = np.nonzero(all_front)[0]
        fv = faces[f_idx]
        cam = np.stack([xc[fv], yc[fv], fd[f_idx]], axis=2)  # (F, 3, 3): xc, yc, d
        uv = mesh.uv_coords[f_idx]
        nrm = normals[fv]
        tris.append((cam, uv, nrm))

    # slow path: triangles crossing the near plane get clipped one by one
    for fi in np.nonzero(any_front & ~all_front)[0]:
        corners = []
        for k in range(3):
            vi = faces[fi, k]
            corners.append((xc[vi], yc[vi], d[vi],
                            mesh.uv_coords[fi, k, 0], mesh.uv_coords[fi, k, 1],
                            normals[vi, 0], normals[vi, 1], normals[vi, 2]))
        poly = _clip_triangle(corners)
        for k in range(1, len(poly) - 1):
            fan = [poly[0], poly[k], poly[k + 1]]
            cam = np.array([[p[0], p[1], p[2]] for p in fan]).reshape(1, 3, 3)
            uv = np.array([[p[3], p[4]] for p in fan]).reshape(1, 3, 2)
            nrm = np.array([[p[5], p[6], p[7]] for p in fan]).reshape(1, 3, 3)
            tris.append((cam, uv, nrm))

    if tris:
        cam = np.concatenate([t[0] for t in tris], axis=0)
        uv = np.concatenate([t[1] for t in tris], axis=0)
        nrm = np.concatenate([t[2] for t in tris], axis=0)

        tan_h, tan_v = _tan_halves(scene)
        depth = cam[:, :, 2]
        inv_d = 1.0 / depth
        sx = (cam[:, :, 0] / (depth * tan_h) + 1.0) * (w / 2.0)
        sy = (1.0 - cam[:, :, 1] / (depth * tan_v)) * (h / 2.0)
        xy = np.stack([sx, sy], axis=2)
        uvd = uv * inv_d[:, :, None]
        nd = nrm * inv_d[:, :, None]

        lt = scene.lighting
        ambient = np.array(lt.ambient_color) * lt.ambient_intensity
        diffuse = np.array(lt.directional_color) * lt.directional_intensity
        neg_light = -np.array(lt.light_direction)

        _raster_kernel(
            np.ascontiguousarray(xy), np.ascontiguousarray(inv_d),
            np.ascontiguousarray(uvd), np.ascontiguousarray(nd),
            np.ascontiguousarray(mesh.texture), ambient, diffuse, neg_light,
            scene.texture_filter == "bilinear", image, zbuf, mask)

    return RenderOutput(
        pixels=image,
        coverage_mask=mask.astype(bool),
        meta={"pose": pose, "mesh_id": scene.mesh_id},
    )


def project_point(scene: SceneConfig, p) -> tuple[float, float, bool]:
    """Pixel coordinates (u right, v down) of a world point, plus an in-frame flag."""
    p = np.asarray(p, dtype=np.float64)
    spec = scene.frustum
    sign = spec.view_sign
    d = sign * (p[2] - spec.camera_z)
    if d == 0.0:
        raise ProjectionError(f"point {tuple(p)} lies on the camera plane z={spec.camera_z}")
    h, w = scene.image_size
    tan_h, tan_v = _tan_halves(scene)
    u = (-sign * p[0] / (d * tan_h) + 1.0) * (w / 2.0)
    v = (1.0 - p[1] / (d * tan_v)) * (h / 2.0)
    in_frame = bool(d > 0.0 and 0.0 <= u <= w and 0.0 <= v <= h)
    return float(u), float(v), in_frame


def bbox_area(out: RenderOutput) -> int:
    """Area in px^2 of the tightest axis-aligned box around covered pixels (0 if none)."""
    rows = np.any(out.coverage_mask, axis=1)
    cols = np.any(out.coverage_mask, axis=0)
    if not rows.any():
        return 0
    r = np.nonzero(rows)[0]
    c = np.nonzero(cols)[0]
    return int((r[-1] - r[0] + 1) * (c[-1] - c[0] + 1))


def coverage_bbox(out: RenderOutput) -> tuple[int, int, int, int] | None:
    """(col0, row0, col1, row1) inclusive bounds of the coverage mask, or None."""
    if not out.coverage_mask.any():
        return None
    rows = np.nonzero(np.any(out.coverage_mask, axis=1))[0]
    cols = np.nonzero(np.any(out.coverage_mask, axis=0))[0]
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def save_png(out: RenderOutput, path: str) -> None:
    Image.fromarray(out.to_u8(), mode="RGB").save(path, format="PNG")


def load_png_u8(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def center_crop_resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Scale-to-cover then center-crop a float [0,1] HxWx3 image to (H, W)."""
    h, w = size
    ih, iw = img.shape[:2]
    scale = max(h / ih, w / iw)
    nh, nw = max(h, int(round(ih * scale))), max(w, int(round(iw * scale)))
    pil = Image.fromarray(np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8))
    pil = pil.resize((nw, nh), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float64) / 255.0
    top = (nh - h) // 2
    left = (nw - w) // 2
    return arr[top:top + h, left:left + w]


def load_background(path: str, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return center_crop_resize(arr, size)
