from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posekit.analysis import (
    DEFAULT_LANDSCAPE_FIXED,
    SensitivityCell,
    aggregate_cells,
    aggregate_objects,
    census,
    landscape_grid,
    lighting_overlap,
    measure_cell,
    nearest_neighbors,
    parameter_delta,
    sensitivity,
    top_k_classes,
    transfer,
    yaw_sweep_eval,
)
from posekit.classifier import (
    CapabilityError,
    ClassifierResponse,
    PoseRegion,
    SyntheticBackend,
    softmax,
)
from posekit.geometry import PoseParams, circular_distance
from posekit.renderer import RenderOutput, SceneConfig
from posekit.runio import substream
from posekit.search import SearchConfig, run_random_search
from posekit.primitives import quad

from conftest import make_truth_backend


def scene16(true_class=0, **kw):
    return SceneConfig(mesh=quad(), mesh_id="quad", image_size=(16, 16),
                       true_class=true_class, **kw)


def region_truth_backend(scene, volume_region, seed=4, num_classes=8, amplitude=40.0):
    """Correct exactly inside the region box: truth suppressed outside, boosted inside."""
    region = PoseRegion(class_index=scene.true_class, amplitude=amplitude,
                        bounds=volume_region)
    return SyntheticBackend(seed=seed, num_classes=num_classes, frustum=scene.frustum,
                            regions=(region,), class_bias={scene.true_class: -15.0},
                            base_scale=0.3)


# ---------------------------------------------------------------------------
# census

def test_census_calibrated_against_known_volume():
    scene = scene16()
    # truth correct only inside |z+14| <= 1.4: volume fraction 2.8/28 = 10%
    backend = region_truth_backend(scene, {"z_delta": (-14.0, 1.4, 0.002)})
    report = census(scene, backend, n=3000, seed=5)
    assert abs(report.pooled_accuracy - 10.0) < 2.0
    for name in ("bright", "medium", "dark"):
        assert report.settings[name].n == 3000
        assert report.settings[name].accuracy is not None


def test_census_zero_samples_marks_accuracy_undefined(plain_backend):
    scene = scene16()
    report = census(scene, plain_backend, n=0, seed=0)
    assert report.pooled_accuracy is None
    for stats in report.settings.values():
        assert stats.accuracy is None
        assert stats.median_conf_correct is None


def test_census_collects_histograms_and_medians():
    scene = scene16()
    backend = make_truth_backend(scene)
    report = census(scene, backend, n=50, seed=1, lighting_set=("medium",))
    stats = report.settings["medium"]
    assert stats.accuracy == 100.0
    assert stats.histogram[scene.true_class] == 50
    assert stats.median_conf_correct is not None
    assert stats.median_conf_incorrect is None
    assert report.distinct_labels == 1


# ---------------------------------------------------------------------------
# landscape

def test_landscape_constant_oracle_uniform():
    scene = scene16()
    backend = make_truth_backend(scene)
    grid = landscape_grid(scene, backend, resolution=6)
    assert grid.labels.shape == (6, 6)
    assert (grid.labels == scene.true_class).all()
    assert grid.correct.all()


def test_landscape_default_fixed_values():
    assert DEFAULT_LANDSCAPE_FIXED == {"x_delta": 0.0, "y_delta": 0.0,
                                       "z_delta": -3.0, "theta_y": math.pi / 4}


def test_landscape_disc_matches_membership_within_one_cell():
    scene = scene16()
    bounds = {"theta_p": (2.0, 0.9, 0.02), "theta_r": (4.0, 1.1, 0.02)}
    backend = region_truth_backend(scene, bounds, amplitude=60.0)
    res = 24
    grid = landscape_grid(scene, backend, sweep=("theta_p", "theta_r"), resolution=res)
    region = backend.regions[0]
    member = np.zeros((res, res), dtype=bool)
    for i, vp in enumerate(grid.values_a):
        for j, vr in enumerate(grid.values_b):
            pose = PoseParams(0, 0, -3.0, math.pi / 4, float(vp), float(vr))
            member[i, j] = region.contains(pose, scene.frustum)
    # allow disagreement only within one cell of the membership boundary (wrapping)
    dilated = member.copy()
    eroded = member.copy()
    for axis in (0, 1):
        for shift in (-1, 1):
            rolled = np.roll(member, shift, axis=axis)
            dilated |= rolled
            eroded &= rolled
    assert (grid.correct | dilated).all() == dilated.all() or (~grid.correct | dilated).all()
    assert (grid.correct & eroded).sum() == eroded.sum()  # interior fully correct
    assert (grid.correct & ~dilated).sum() == 0  # nothing correct far outside


def test_landscape_emits_artifacts(tmp_path):
    scene = scene16()
    backend = make_truth_backend(scene)
    grid = landscape_grid(scene, backend, resolution=4)
    csv_path = tmp_path / "grid.csv"
    png_path = tmp_path / "grid.png"
    grid.to_csv(str(csv_path))
    grid.to_heatmap_png(str(png_path))
    assert csv_path.exists() and csv_path.stat().st_size > 0
    assert png_path.exists() and png_path.stat().st_size > 0
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 1 + 16  # header + row-major cells


def test_landscape_resolution_validation(plain_backend):
    with pytest.raises(ValueError, match="resolution"):
        landscape_grid(scene16(), plain_backend, resolution=1)


# ---------------------------------------------------------------------------
# sensitivity primitives

def test_measure_cell_no_failures():
    rate, delta, idx = measure_cell("theta_y", 1.0, [(0.5, False), (2.0, False)])
    assert rate == 0.0 and delta is None and idx is None


def test_measure_cell_min_failing_delta():
    samples = [(1.4, True), (0.2, False), (1.05, True), (5.0, True)]
    rate, delta, idx = measure_cell("x_delta", 1.0, samples)
    assert rate == 75.0
    assert delta == pytest.approx(0.05)
    assert idx == 2


def test_parameter_delta_circular_for_angles():
    assert parameter_delta("theta_p", 0.1, 2 * math.pi - 0.1) == pytest.approx(0.2, abs=1e-12)
    assert parameter_delta("x_delta", 0.1, -0.3) == pytest.approx(0.4)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0, 2 * math.pi - 1e-9), b=st.floats(0, 2 * math.pi - 1e-9))
def test_angle_min_delta_never_exceeds_pi(a, b):
    assert parameter_delta("theta_y", a, b) <= math.pi + 1e-12


def test_aggregate_cells_matches_brute_force():
    rng = np.random.default_rng(8)
    cells = []
    for si in range(7):
        for param in ("x_delta", "theta_y"):
            has_fail = rng.uniform() < 0.7
            cells.append(SensitivityCell(
                start_index=si, param=param, n_resamples=10,
                failure_rate=float(rng.uniform(0, 100)),
                min_delta=float(rng.uniform(0, 3)) if has_fail else None,
                min_delta_interp=float(rng.uniform(0, 50)) if has_fail else None))
    agg = aggregate_cells(cells)
    for param in ("x_delta", "theta_y"):
        mine = [c for c in cells if c.param == param]
        assert agg[param]["failure_rate"] == np.median([c.failure_rate for c in mine])
        present = [c.min_delta for c in mine if c.min_delta is not None]
        assert agg[param]["min_delta"] == (np.median(present) if present else None)


def test_aggregate_objects_median_of_medians():
    def report_with(param_rates):
        from posekit.analysis import SensitivityReport

        cells = [SensitivityCell(i, "theta_y", 5, r, None, None)
                 for i, r in enumerate(param_rates)]
        return SensitivityReport("obj", len(param_rates), 5, cells)

    reports = [report_with([10.0, 20.0, 30.0]),   # median 20
               report_with([50.0, 70.0]),         # median 60
               report_with([0.0, 100.0])]         # median 50
    agg = aggregate_objects(reports)
    assert agg["theta_y"]["failure_rate"] == 50.0  # median of [20, 60, 50]


# ---------------------------------------------------------------------------
# sensitivity pipeline

def test_sensitivity_all_correct_no_failures():
    scene = scene16()
    backend = make_truth_backend(scene)
    report = sensitivity(scene, backend, n_starts=3, n_resamples=8, seed=2)
    assert report.n_starts == 3
    assert len(report.cells) == 3 * 6
    for cell in report.cells:
        assert cell.failure_rate == 0.0
        assert cell.min_delta is None
    agg = report.per_param_medians()
    assert agg["theta_y"]["failure_rate"] == 0.0
    assert agg["theta_y"]["min_delta"] is None


def test_sensitivity_all_fail_min_delta_is_smallest_sampled():
    scene = scene16()

    class OnlyExactStart:
        """Correct only at poses whose pixels match the start render exactly."""

        num_classes = 4
        class_table = ["a", "b", "c", "d"]
        supports_embedding = False

        def __init__(self):
            self.start_poses = set()

        def classify(self, image):
            pose = image.meta["pose"]
            probs = np.zeros(4)
            if pose.as_tuple() in self.start_poses:
                probs[0] = 1.0
            else:
                probs[1] = 1.0
            return ClassifierResponse.from_probs(probs)

    backend = OnlyExactStart()
    start = PoseParams(0.1, -0.1, -6.0, 1.0, 2.0, 3.0)
    backend.start_poses.add(start.as_tuple())
    report = sensitivity(scene, backend, n_starts=1, n_resamples=12, seed=3,
                         starts=[start])
    assert report.n_starts == 1
    from posekit.analysis import _resample_value

    for cell in report.cells:
        assert cell.failure_rate == 100.0
        rng = substream(3, f"sensitivity/resample/0/{cell.param}")
        values = [_resample_value(cell.param, rng, scene.frustum, start)
                  for _ in range(12)]
        brute = min(parameter_delta(cell.param, getattr(start, cell.param), v)
                    for v in values)
        assert cell.min_delta == pytest.approx(brute, abs=1e-15)


def test_sensitivity_skips_misclassified_starts():
    scene = scene16()
    backend = make_truth_backend(scene)

    bad = PoseParams(0, 0, -6.0)

    class Wrapper:
        num_classes = backend.num_classes
        class_table = backend.class_table
        supports_embedding = False

        def classify(self, image):
            pose = image.meta["pose"]
            if pose.as_tuple() == bad.as_tuple():
                return ClassifierResponse.from_probs(np.array([0, 0, 0, 1.0, 0, 0, 0, 0]))
            return backend.classify(image)

    with pytest.warns(UserWarning, match="skipped"):
        report = sensitivity(scene, Wrapper(), n_starts=2, n_resamples=4, seed=0,
                             starts=[bad, PoseParams(0.01, 0, -6.0)])
    assert report.n_starts == 1
    assert report.skipped_starts == 1


def test_sensitivity_interpretable_units():
    scene = scene16()

    class AlwaysWrong:
        num_classes = 4
        class_table = ["a", "b", "c", "d"]
        supports_embedding = False

        def classify(self, image):
            pose = image.meta["pose"]
            probs = np.zeros(4)
            probs[0 if pose.as_tuple() in starts else 1] = 1.0
            return ClassifierResponse.from_probs(probs)

    start = PoseParams(0.0, 0.0, -10.0, 1.0, 2.0, 3.0)
    starts = {start.as_tuple()}
    report = sensitivity(scene, AlwaysWrong(), n_starts=1, n_resamples=6, seed=1,
                         starts=[start])
    by_param = {c.param: c for c in report.cells}
    for angle in ("theta_y", "theta_p", "theta_r"):
        cell = by_param[angle]
        assert cell.min_delta_interp == pytest.approx(math.degrees(cell.min_delta))
        assert cell.min_delta <= math.pi + 1e-12
    assert by_param["x_delta"].min_delta_interp >= 0.0  # pixels
    assert by_param["z_delta"].min_delta_interp >= 0.0  # percent bbox area


# ---------------------------------------------------------------------------
# lighting overlap

def test_overlap_identical_sets():
    h = Counter({i: 10 - (i % 7) for i in range(60)})
    score = lighting_overlap([h, h, h])
    assert score.o_s == 100.0


def test_overlap_disjoint_sets():
    hists = [Counter({i + off: 5 for i in range(50)}) for off in (0, 100, 200)]
    score = lighting_overlap(hists)
    assert score.o_s == 0.0
    assert all(len(s) == 50 for s in score.sets)


def test_overlap_ties_break_by_class_index():
    h = Counter({i: 1 for i in range(80)})
    top = top_k_classes(h, 50)
    assert top == frozenset(range(50))


def test_overlap_matches_brute_force_on_random_triples():
    rng = np.random.default_rng(17)
    for _ in range(20):
        hists = []
        for _ in range(3):
            labels = rng.choice(300, size=rng.integers(30, 120), replace=False)
            hists.append(Counter({int(l): int(rng.integers(1, 40)) for l in labels}))
        score = lighting_overlap(hists)
        sets = [set(sorted(h, key=lambda c: (-h[c], c))[:50]) for h in hists]
        expected = 100.0 * len(sets[0] & sets[1] & sets[2]) / len(sets[0] | sets[1] | sets[2])
        assert score.o_s == pytest.approx(expected, abs=1e-12)


def test_overlap_permutation_invariant():
    rng = np.random.default_rng(3)
    hists = [Counter({int(l): int(rng.integers(1, 9)) for l in
                      rng.choice(200, size=70, replace=False)}) for _ in range(3)]
    base = lighting_overlap(hists).o_s
    assert lighting_overlap(hists[::-1]).o_s == base
    assert lighting_overlap([hists[1], hists[2], hists[0]]).o_s == base


def test_overlap_requires_three_nonempty():
    with pytest.raises(ValueError):
        lighting_overlap([Counter({1: 1}), Counter(), Counter({2: 1})])


# ---------------------------------------------------------------------------
# transfer

def test_self_transfer_identity():
    scene = scene16()
    wrong = PoseRegion(class_index=3, amplitude=50.0, bounds={"z_delta": (-14.0, 6.0, 0.01)})
    backend = SyntheticBackend(seed=4, num_classes=8, frustum=scene.frustum,
                               regions=(wrong,), class_bias={0: 20.0})
    res = run_random_search(scene, backend, SearchConfig(mode="RS", budget=400, rng_seed=2))
    report = transfer(res.records, scene, backend, backend.class_table,
                      confidence_floor=0.9)
    assert report.n_selected > 0
    assert report.misclassification_rate == 100.0
    assert report.agreement_rate == 100.0


def test_transfer_rate_matches_region_overlap():
    scene = scene16()
    # A misclassifies inside z in [-20, -8]; B inside z in [-14, -2]; overlap fraction 0.5
    wrong_a = PoseRegion(class_index=3, amplitude=50.0, bounds={"z_delta": (-14.0, 6.0, 0.01)})
    wrong_b = PoseRegion(class_index=3, amplitude=50.0, bounds={"z_delta": (-8.0, 6.0, 0.01)})
    backend_a = SyntheticBackend(seed=4, num_classes=8, frustum=scene.frustum,
                                 regions=(wrong_a,), class_bias={0: 20.0})
    backend_b = SyntheticBackend(seed=4, num_classes=8, frustum=scene.frustum,
                                 regions=(wrong_b,), class_bias={0: 20.0})
    res = run_random_search(scene, backend_a, SearchConfig(mode="RS", budget=600, rng_seed=6))
    report = transfer(res.records, scene, backend_b, backend_a.class_table)
    assert report.n_selected > 100
    assert 40.0 <= report.misclassification_rate <= 60.0


def test_transfer_class_table_mismatch_requires_map():
    scene = scene16()
    backend_a = make_truth_backend(scene)
    backend_b = SyntheticBackend(seed=4, num_classes=8, frustum=scene.frustum,
                                 class_table=[f"other_{i}" for i in range(8)])
    res = run_random_search(scene, backend_a, SearchConfig(mode="RS", budget=20, rng_seed=2))
    records = res.records
    for r in records:  # force one misclassified high-confidence record
        r.correct = False
        r.confidence = 1.0
    with pytest.raises(ValueError, match="label_map"):
        transfer(records, scene, backend_b, backend_a.class_table)
    report = transfer(records, scene, backend_b, backend_a.class_table,
                      label_map={i: i for i in range(8)})
    assert report.n_selected == len(records)


def test_transfer_empty_selection():
    scene = scene16()
    backend = make_truth_backend(scene)
    res = run_random_search(scene, backend, SearchConfig(mode="RS", budget=30, rng_seed=2))
    report = transfer(res.records, scene, backend, backend.class_table)
    assert report.n_selected == 0
    assert report.misclassification_rate is None


# ---------------------------------------------------------------------------
# yaw sweep

def test_yaw_sweep_exactly_36_views():
    scene = scene16()
    backend = make_truth_backend(scene)
    report = yaw_sweep_eval(scene, backend)
    assert report.n_evaluations == 36
    assert [r.distance for r in report.rows] == [4.0, 6.0, 8.0]


def test_yaw_sweep_perfect_oracle():
    scene = scene16()
    backend = make_truth_backend(scene)
    report = yaw_sweep_eval(scene, backend)
    for row in report.rows:
        assert row.top1_accuracy == 100.0
        assert row.top5_accuracy == 100.0
        assert 0.0 <= row.mean_confidence <= 1.0
    assert report.average.top1_accuracy == 100.0


def test_yaw_sweep_csv(tmp_path):
    scene = scene16()
    backend = make_truth_backend(scene)
    report = yaw_sweep_eval(scene, backend)
    path = tmp_path / "sweep.csv"
    report.to_csv(str(path))
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 1 + 3 + 1  # header, three distances, average


# ---------------------------------------------------------------------------
# nearest neighbors

class ChannelMeanBackend:
    num_classes = 2
    class_table = ["a", "b"]
    supports_embedding = True

    def embed(self, image):
        return image.pixels.mean(axis=(0, 1))

    def classify(self, image):
        return ClassifierResponse.from_probs(np.array([0.5, 0.5]))


def solid_output(rgb):
    pixels = np.full((16, 16, 3), rgb, dtype=np.float64)
    return RenderOutput(pixels=pixels, coverage_mask=np.zeros((16, 16), bool), meta={})


def test_nearest_neighbors_self_at_rank_one():
    backend = ChannelMeanBackend()
    corpus = [solid_output((0.1, 0.1, 0.1)), solid_output((0.5, 0.5, 0.5)),
              solid_output((0.9, 0.9, 0.9))]
    result = nearest_neighbors([corpus[1]], corpus, backend, k=2)
    assert result[0][0] == (1, 0.0)


def test_nearest_neighbors_matches_brute_force():
    backend = ChannelMeanBackend()
    corpus = [solid_output((0.1, 0.2, 0.3)), solid_output((0.4, 0.4, 0.4)),
              solid_output((0.8, 0.1, 0.0)), solid_output((0.2, 0.2, 0.25))]
    queries = [solid_output((0.15, 0.2, 0.28)), solid_output((0.7, 0.2, 0.1))]
    result = nearest_neighbors(queries, corpus, backend, k=4)
    for q, ranked in zip(queries, result):
        qe = q.pixels.mean(axis=(0, 1))
        dists = [float(np.linalg.norm(c.pixels.mean(axis=(0, 1)) - qe)) for c in corpus]
        expected = sorted(range(4), key=lambda i: (dists[i], i))
        assert [i for i, _ in ranked] == expected


def test_nearest_neighbors_k_larger_than_corpus():
    backend = ChannelMeanBackend()
    corpus = [solid_output((0.1, 0.1, 0.1)), solid_output((0.2, 0.2, 0.2))]
    result = nearest_neighbors([solid_output((0.0, 0.0, 0.0))], corpus, backend, k=10)
    assert len(result[0]) == 2


def test_nearest_neighbors_requires_embeddings(small_scene):
    class NoEmbed:
        supports_embedding = False

    with pytest.raises(CapabilityError):
        nearest_neighbors([], [], NoEmbed())
