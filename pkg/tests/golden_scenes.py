"""The five golden render scenes, shared by the generator and the tests."""

from __future__ import annotations

import numpy as np

from posekit.geometry import Mesh, PoseParams
from posekit.renderer import LightingConfig, SceneConfig, render
from posekit.primitives import checker_texture, quad, solid_texture, triangle


def _triangle_coverage():
    scene = SceneConfig(mesh=triangle(texture=solid_texture((1.0, 1.0, 1.0))),
                        image_size=(64, 64),
                        lighting=LightingConfig(directional_intensity=0.0,
                                                ambient_intensity=1.0))
    return render(scene, PoseParams(0, 0, -4))


def _occlusion():
    vertices = np.array([
        [-2.0, -2.0, 0.0], [2.0, -2.0, 0.0], [0.0, 2.0, 0.0],  # far
        [-0.6, -0.6, 1.0], [0.6, -0.6, 1.0], [0.0, 0.6, 1.0],  # near
    ])
    texture = np.zeros((2, 2, 3))
    texture[0, :] = (0.9, 0.1, 0.1)  # sampled by the near triangle (v=1)
    texture[1, :] = (0.1, 0.2, 0.9)  # sampled by the far triangle (v=0)
    mesh = Mesh(
        vertices=vertices,
        faces=np.array([[0, 1, 2], [3, 4, 5]], dtype=np.int32),
        uv_coords=np.stack([np.zeros((3, 2)), np.ones((3, 2))]),
        normals=np.tile([0.0, 0.0, 1.0], (6, 1)),
        texture=texture,
    )
    scene = SceneConfig(mesh=mesh, image_size=(64, 64),
                        lighting=LightingConfig(directional_intensity=0.0,
                                                ambient_intensity=1.0))
    return render(scene, PoseParams(0, 0, -8), enforce_frustum=False)


def _shading_08():
    scene = SceneConfig(mesh=triangle(texture=solid_texture((1.0, 1.0, 1.0)),
                                      normals_up=True),
                        image_size=(64, 64),
                        lighting=LightingConfig(directional_intensity=0.4,
                                                ambient_intensity=0.4,
                                                light_direction=(0.0, -1.0, 0.0)))
    return render(scene, PoseParams(0, 0, -6))


def _background_purity():
    scene = SceneConfig(mesh=quad(), image_size=(64, 64))
    return render(scene, PoseParams(0, 0, 6.0), enforce_frustum=False)


def _textured_quad():
    scene = SceneConfig(mesh=quad(texture=checker_texture(cells=8, size=64)),
                        image_size=(64, 64),
                        lighting=LightingConfig(directional_intensity=0.4,
                                                ambient_intensity=1.0))
    return render(scene, PoseParams(0.1, -0.1, -7.0, 0.6, 0.35, 0.15))


GOLDEN_CASES = {
    "triangle_coverage": _triangle_coverage,
    "occlusion": _occlusion,
    "shading_08": _shading_08,
    "background_purity": _background_purity,
    "textured_quad": _textured_quad,
}
