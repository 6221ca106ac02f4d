from __future__ import annotations

import numpy as np
import pytest

from posekit import FrustumSpec, SceneConfig, SyntheticBackend
from posekit.primitives import quad


@pytest.fixture
def small_scene():
    """16x16 two-triangle scene; cheap enough for search loops in tests."""
    return SceneConfig(mesh=quad(), mesh_id="quad", image_size=(16, 16), true_class=0)


@pytest.fixture
def plain_backend(small_scene):
    """No planted regions; 8 classes of seeded base logits."""
    return SyntheticBackend(seed=7, num_classes=8, frustum=small_scene.frustum)


def make_truth_backend(scene, num_classes=8, seed=7):
    """Backend that labels everything as the scene's true class."""
    return SyntheticBackend(seed=seed, num_classes=num_classes, frustum=scene.frustum,
                            class_bias={scene.true_class: 25.0})


def rng(seed=0):
    return np.random.default_rng(seed)
