"""Built-in meshes so experiments run without external OBJ assets."""

from __future__ import annotations

import numpy as np

from .geometry import Mesh, compute_vertex_normals, normalize_mesh


def checker_texture(cells: int = 8, size: int = 64,
                    dark=(0.15, 0.15, 0.2), light=(0.9, 0.85, 0.3)) -> np.ndarray:
    """Checkerboard texture; high-frequency enough that pose changes move pixels."""
    tex = np.empty((size, size, 3), dtype=np.float64)
    cell = max(1, size // cells)
    for i in range(size):
        for j in range(size):
            tex[i, j] = light if ((i // cell) + (j // cell)) % 2 == 0 else dark
    return tex


def solid_texture(rgb=(1.0, 1.0, 1.0)) -> np.ndarray:
    return np.full((2, 2, 3), rgb, dtype=np.float64)


def triangle(texture: np.ndarray | None = None, normals_up: bool = False) -> Mesh:
    """One triangle in the xy plane facing +z; optionally all normals (0,1,0)."""
    vertices = np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]])
    faces = np.array([[0, 1, 2]], dtype=np.int32)
    uv = np.array([[[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]]])
    if normals_up:
        normals = np.tile([0.0, 1.0, 0.0], (3, 1))
    else:
        normals = np.tile([0.0, 0.0, 1.0], (3, 1))
    return Mesh(vertices, faces, uv, normals,
                texture=texture if texture is not None else solid_texture(),
                texture_ref="builtin:triangle")


def quad(texture: np.ndarray | None = None) -> Mesh:
    """Unit square in the xy plane (two triangles), facing +z."""
    vertices = np.array([
        [-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    uv = np.array([
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
        [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
    ])
    normals = np.tile([0.0, 0.0, 1.0], (4, 1))
    return Mesh(vertices, faces, uv, normals,
                texture=texture if texture is not None else checker_texture(),
                texture_ref="builtin:quad")


def cube(texture: np.ndarray | None = None) -> Mesh:
    """Axis-aligned cube spanning [-1, 1]^3 with face-projected UVs."""
    corners = np.array([
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ], dtype=np.float64)
    quads = [
        (0, 1, 2, 3), (5, 4, 7, 6), (4, 0, 3, 7),
        (1, 5, 6, 2), (4, 5, 1, 0), (3, 2, 6, 7),
    ]
    verts = []
    faces = []
    uv = []
    quad_uv = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    for q in quads:
        base = len(verts)
        verts.extend(corners[i] for i in q)
        faces.append([base, base + 1, base + 2])
        faces.append([base, base + 2, base + 3])
        uv.append([quad_uv[0], quad_uv[1], quad_uv[2]])
        uv.append([quad_uv[0], quad_uv[2], quad_uv[3]])
    vertices = np.asarray(verts)
    faces_arr = np.asarray(faces, dtype=np.int32)
    normals = compute_vertex_normals(vertices, faces_arr)
    return Mesh(vertices, faces_arr, np.asarray(uv), normals,
                texture=texture if texture is not None else checker_texture(),
                texture_ref="builtin:cube")


def icosphere(subdivisions: int = 1, texture: np.ndarray | None = None) -> Mesh:
    """Unit sphere from subdivided icosahedron; normals are exact (radial)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    cache: dict[tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key in cache:
            return cache[key]
        m = verts[a] + verts[b]
        m = m / np.linalg.norm(m)
        verts.append(m)
        cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    vertices = np.asarray(verts)
    faces_arr = np.asarray(faces, dtype=np.int32)
    # equirectangular UVs from spherical angles
    uv = np.zeros((faces_arr.shape[0], 3, 2))
    for fi, f in enumerate(faces_arr):
        for k, vi in enumerate(f):
            x, y, z = vertices[vi]
            uv[fi, k, 0] = 0.5 + np.arctan2(z, x) / (2 * np.pi)
            uv[fi, k, 1] = 0.5 + np.arcsin(np.clip(y, -1, 1)) / np.pi
    normals = vertices.copy()
    return Mesh(vertices, faces_arr, uv, normals,
                texture=texture if texture is not None else checker_texture(),
                texture_ref="builtin:icosphere")


_BUILTINS = {
    "triangle": triangle,
    "quad": quad,
    "cube": cube,
    "icosphere": icosphere,
}


def builtin_mesh(name: str) -> Mesh:
    """Look up a builtin mesh by name (used by 'builtin:<name>' config references)."""
    if name not in _BUILTINS:
        raise KeyError(f"unknown builtin mesh {name!r}; have {sorted(_BUILTINS)}")
    mesh = _BUILTINS[name]()
    return Mesh(normalize_mesh(mesh.vertices), mesh.faces, mesh.uv_coords,
                mesh.normals, mesh.texture, mesh.texture_ref)
