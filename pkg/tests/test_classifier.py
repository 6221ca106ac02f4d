from __future__ import annotations

import math

import numpy as np
import pytest

from posekit.classifier import (
    ClassifierResponse,
    PoseRegion,
    SyntheticBackend,
    cross_entropy,
    resize_bilinear,
    softmax,
)
from posekit.geometry import FrustumSpec, PoseParams
from posekit.renderer import RenderOutput, SceneConfig, render
from posekit.primitives import quad


def make_output(pixels, pose=None):
    return RenderOutput(pixels=pixels, coverage_mask=np.zeros(pixels.shape[:2], bool),
                        meta={"pose": pose} if pose is not None else {})


def test_response_top_label_tie_breaks_low_index():
    resp = ClassifierResponse.from_probs(np.array([0.25, 0.25, 0.25, 0.25]))
    assert resp.top_label == 0
    resp = ClassifierResponse.from_probs(np.array([0.1, 0.45, 0.45]))
    assert resp.top_label == 1


def test_cross_entropy_values():
    assert cross_entropy(np.array([0.0, 1.0]), 1) == pytest.approx(0.0, abs=1e-9)
    assert cross_entropy(np.array([1 - math.exp(-1), math.exp(-1)]), 1) == \
        pytest.approx(1.0, abs=1e-9)
    # epsilon floor: -log(1e-12)
    assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(27.631021115928547, abs=1e-9)


def test_cross_entropy_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(np.array([0.5, 0.5]), 2)


def test_cross_entropy_strictly_decreasing():
    ps = np.linspace(0.0, 1.0, 50)
    losses = [cross_entropy(np.array([1 - p, p]), 1) for p in ps]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_synthetic_deterministic():
    frustum = FrustumSpec()
    backend = SyntheticBackend(seed=3, num_classes=10, frustum=frustum)
    rng = np.random.default_rng(0)
    img = make_output(rng.uniform(size=(16, 16, 3)), pose=PoseParams(0, 0, -5))
    p1 = backend.classify(img).probs
    p2 = SyntheticBackend(seed=3, num_classes=10, frustum=frustum).classify(img).probs
    assert np.array_equal(p1, p2)
    assert abs(p1.sum() - 1.0) < 1e-5
    assert p1.min() >= 0.0


def test_uniform_logits_give_uniform_probs():
    frustum = FrustumSpec()
    backend = SyntheticBackend(seed=3, num_classes=10, frustum=frustum, base_scale=0.0)
    img = make_output(np.zeros((16, 16, 3)))
    probs = backend.classify(img).probs
    assert np.allclose(probs, 0.1, atol=1e-12)


def test_planted_region_dominates_inside():
    frustum = FrustumSpec()
    region = PoseRegion(class_index=4, amplitude=30.0,
                        bounds={"z_delta": (-10.0, 2.0, 0.5),
                                "theta_y": (1.0, 0.5, 0.3)})
    backend = SyntheticBackend(seed=3, num_classes=8, frustum=frustum, regions=(region,))
    rng = np.random.default_rng(1)
    img = make_output(rng.uniform(size=(16, 16, 3)), pose=PoseParams(0, 0, -10, 1.0, 0, 0))
    assert backend.classify(img).top_label == 4
    far = make_output(rng.uniform(size=(16, 16, 3)), pose=PoseParams(0, 0, -25, 4.0, 0, 0))
    probs = backend.classify(far).probs
    assert np.argmax(probs) != 4 or probs[4] < 0.5


def test_region_membership_and_volume():
    frustum = FrustumSpec()
    region = PoseRegion(class_index=0, amplitude=1.0,
                        bounds={"z_delta": (-14.0, 0.42, 0.001)})
    assert region.contains(PoseParams(0, 0, -14.0), frustum)
    assert region.contains(PoseParams(0, 0, -14.42), frustum)
    assert not region.contains(PoseParams(0, 0, -14.43), frustum)
    # fraction 2*0.42/28 = 0.03 exactly
    assert region.volume_fraction(frustum) == pytest.approx(0.03, abs=1e-12)
    # angles use circular distance: a region straddling 0 wraps
    wrap = PoseRegion(class_index=0, amplitude=1.0, bounds={"theta_y": (0.1, 0.3, 0.1)})
    assert wrap.contains(PoseParams(theta_y=2 * math.pi - 0.1), frustum)
    assert wrap.volume_fraction(frustum) == pytest.approx(0.6 / (2 * math.pi), abs=1e-12)


def test_region_volume_monte_carlo():
    from posekit.search import sample_random_pose
    from posekit.runio import substream

    frustum = FrustumSpec()
    region = PoseRegion(class_index=0, amplitude=1.0,
                        bounds={"z_delta": (-10.0, 2.8, 0.01),
                                "x_norm": (0.0, 0.5, 0.01),
                                "theta_p": (3.0, math.pi / 4, 0.01)})
    expected = region.volume_fraction(frustum)
    rng = substream(11, "mc")
    n = 20000
    hits = sum(region.contains(sample_random_pose(rng, frustum), frustum) for _ in range(n))
    sigma = math.sqrt(expected * (1 - expected) / n)
    assert abs(hits / n - expected) < 4 * sigma


def test_bump_continuity_across_boundary():
    # smooth fixture: amplitude 12, taper 0.5 -> softmax jump per 1e-3 step stays < 0.05
    frustum = FrustumSpec()
    region = PoseRegion(class_index=2, amplitude=12.0,
                        bounds={"z_delta": (-10.0, 1.0, 0.5)})
    backend = SyntheticBackend(seed=5, num_classes=8, frustum=frustum,
                               regions=(region,), base_scale=0.0)
    img_pixels = np.full((16, 16, 3), 0.5)
    zs = np.arange(-12.2, -8.3, 1e-3)
    probs = []
    for z in zs:
        out = make_output(img_pixels, pose=PoseParams(0, 0, float(z)))
        probs.append(backend.classify(out).probs[2])
    jumps = np.abs(np.diff(probs))
    assert jumps.max() < 0.05


def test_embed_identity_and_difference():
    frustum = FrustumSpec()
    backend = SyntheticBackend(seed=3, num_classes=4, frustum=frustum)
    a = make_output(np.zeros((16, 16, 3)))
    b = make_output(np.ones((16, 16, 3)))
    ea1, ea2 = backend.embed(a), backend.embed(a)
    assert np.linalg.norm(ea1 - ea2) == 0.0
    assert np.linalg.norm(backend.embed(b) - ea1) > 0.0


def test_classify_through_render_uses_pose_meta(small_scene):
    region = PoseRegion(class_index=1, amplitude=40.0, bounds={"z_delta": (-20.0, 1.0, 0.5)})
    backend = SyntheticBackend(seed=2, num_classes=4, frustum=small_scene.frustum,
                               regions=(region,))
    inside = render(small_scene, PoseParams(0, 0, -20))
    outside = render(small_scene, PoseParams(0, 0, -3))
    assert backend.classify(inside).top_label == 1
    assert backend.classify(outside).top_label != 1


def test_region_validation():
    with pytest.raises(ValueError, match="unknown region parameter"):
        PoseRegion(class_index=0, amplitude=1.0, bounds={"w": (0, 1, 1)})
    with pytest.raises(ValueError, match="taper_width"):
        PoseRegion(class_index=0, amplitude=1.0, bounds={"z_delta": (0, 1, 0)})


def test_resize_bilinear_constant_preserved():
    img = np.full((20, 30, 3), 0.37)
    out = resize_bilinear(img, (16, 16))
    assert out.shape == (16, 16, 3)
    assert np.allclose(out, 0.37, atol=1e-12)
    same = resize_bilinear(img, (20, 30))
    assert same is img


def test_softmax_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = softmax(rng.normal(size=32) * 10)
        assert abs(p.sum() - 1.0) < 1e-12
        assert p.min() >= 0.0
