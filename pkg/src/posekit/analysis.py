"""Measurement machinery over the search primitives.

Pose-space censuses under named lighting settings, 2D classification
landscapes, single-parameter sensitivity with interpretable units, top-50
lighting-overlap scores, cross-model transfer, the 36-view yaw sweep, and
embedding nearest neighbors. Aggregations are kept as small pure functions so
they can be checked against brute-force recomputation.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import CapabilityError
from .geometry import (
    POSE_PARAM_NAMES,
    ANGLE_PARAMS,
    FrustumSpec,
    PoseParams,
    circular_distance,
    frustum_bound,
)
from .renderer import (
    LightingConfig,
    RenderOutput,
    SceneConfig,
    bbox_area,
    lighting_preset,
    project_point,
    render,
)
from .runio import substream
from .search import PoseEvaluator, SearchAborted, TrialRecord, sample_random_pose

TWO_PI = 2.0 * math.pi

DEFAULT_LIGHTING_SET = ("bright", "medium", "dark")


# ---------------------------------------------------------------------------
# census

@dataclass
class SettingStats:
    name: str
    n: int
    n_correct: int
    histogram: Counter
    median_conf_correct: float | None
    median_conf_incorrect: float | None

    @property
    def accuracy(self) -> float | None:
        """Percent correct; None (undefined) when no samples were evaluated."""
        if self.n == 0:
            return None
        return 100.0 * self.n_correct / self.n


@dataclass
class CensusReport:
    settings: dict[str, SettingStats]
    records: dict[str, list[TrialRecord]]

    @property
    def pooled_accuracy(self) -> float | None:
        n = sum(s.n for s in self.settings.values())
        if n == 0:
            return None
        return 100.0 * sum(s.n_correct for s in self.settings.values()) / n

    @property
    def distinct_labels(self) -> int:
        labels = set()
        for s in self.settings.values():
            labels.update(s.histogram.keys())
        return len(labels)


def _median_or_none(values: list[float]) -> float | None:
    return float(np.median(values)) if values else None


def census(scene: SceneConfig, backend, n: int,
           lighting_set=DEFAULT_LIGHTING_SET, seed: int = 0, on_record=None) -> CensusReport:
    """n random-search samples per lighting setting, labeled against true_class."""
    if scene.true_class is None:
        raise ValueError("census needs scene.true_class")
    settings: dict[str, SettingStats] = {}
    all_records: dict[str, list[TrialRecord]] = {}
    for name in lighting_set:
        lighting = lighting_preset(name) if isinstance(name, str) else name
        key = name if isinstance(name, str) else "custom"
        lit_scene = scene.with_lighting(lighting)
        rng = substream(seed, f"census/{key}")
        ev = PoseEvaluator(lit_scene, backend)
        records: list[TrialRecord] = []
        hist: Counter = Counter()
        conf_correct: list[float] = []
        conf_incorrect: list[float] = []
        n_correct = 0
        for i in range(n):
            pose = sample_random_pose(rng, lit_scene.frustum)
            try:
                resp, clamped = ev.evaluate(pose)
            except Exception as exc:
                raise SearchAborted(f"backend failed in census ({key}, sample {i}): {exc}",
                                    records) from exc
            correct = resp.top_label == scene.true_class
            hist[resp.top_label] += 1
            (conf_correct if correct else conf_incorrect).append(resp.confidence)
            n_correct += correct
            rec = TrialRecord(
                step_index=i, phase=f"census/{key}", pose=clamped,
                top_label=resp.top_label, confidence=resp.confidence, correct=correct)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
        settings[key] = SettingStats(key, n, n_correct, hist,
                                     _median_or_none(conf_correct),
                                     _median_or_none(conf_incorrect))
        all_records[key] = records
    return CensusReport(settings, all_records)


# ---------------------------------------------------------------------------
# landscape grids

def param_range_values(param: str, spec: FrustumSpec, resolution: int) -> np.ndarray:
    """Full-range sweep values; x/y are in frustum-normalized units [-1, 1]."""
    if param in ANGLE_PARAMS:
        return np.linspace(0.0, TWO_PI, resolution, endpoint=False)
    if param == "z_delta":
        return np.linspace(spec.depth_range[0], spec.depth_range[1], resolution)
    if param in ("x_delta", "y_delta"):
        return np.linspace(-1.0, 1.0, resolution)
    raise ValueError(f"unknown pose parameter {param!r}")


DEFAULT_LANDSCAPE_FIXED = {"x_delta": 0.0, "y_delta": 0.0, "z_delta": -3.0,
                           "theta_y": math.pi / 4}


@dataclass
class LandscapeGrid:
    sweep: tuple[str, str]
    values_a: np.ndarray  # rows
    values_b: np.ndarray  # cols
    fixed: dict
    labels: np.ndarray  # (ra, rb) int
    confidence: np.ndarray  # (ra, rb) float, top-1 confidence
    correct: np.ndarray  # (ra, rb) bool

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", self.sweep[0], self.sweep[1], "label", "confidence",
                        "correct"])
            for i, va in enumerate(self.values_a):
                for j, vb in enumerate(self.values_b):
                    w.writerow([i, j, repr(float(va)), repr(float(vb)),
                                int(self.labels[i, j]),
                                repr(float(self.confidence[i, j])),
                                int(self.correct[i, j])])

    def to_heatmap_png(self, path: str) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, 2, figsize=(9, 4))
        extent = [self.values_b[0], self.values_b[-1], self.values_a[-1], self.values_a[0]]
        axes[0].imshow(self.correct.astype(float), cmap="gray", extent=extent,
                       aspect="auto", vmin=0, vmax=1)
        axes[0].set_title("correct classification")
        im = axes[1].imshow(self.confidence, cmap="viridis", extent=extent,
                            aspect="auto", vmin=0, vmax=1)
        axes[1].set_title("top-1 confidence")
        for ax in axes:
            ax.set_xlabel(self.sweep[1])
            ax.set_ylabel(self.sweep[0])
        fig.colorbar(im, ax=axes[1])
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)


def landscape_grid(scene: SceneConfig, backend, sweep: tuple[str, str] = ("theta_p", "theta_r"),
                   fixed: dict | None = None, resolution: int = 32) -> LandscapeGrid:
    """Row-major grid over two swept parameters' full ranges, others held fixed."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2 per axis")
    pa, pb = sweep
    if pa == pb:
        raise ValueError("sweep parameters must differ")
    fixed_vals = dict(DEFAULT_LANDSCAPE_FIXED if fixed is None else fixed)
    for p in sweep:
        fixed_vals.pop(p, None)
    missing = set(POSE_PARAM_NAMES) - set(fixed_vals) - set(sweep)
    fixed_vals.update({p: 0.0 for p in missing})

    spec = scene.frustum
    values_a = param_range_values(pa, spec, resolution)
    values_b = param_range_values(pb, spec, resolution)
    labels = np.zeros((resolution, resolution), dtype=np.int64)
    confidence = np.zeros((resolution, resolution))
    correct = np.zeros((resolution, resolution), dtype=bool)
    ev = PoseEvaluator(scene, backend)

    def build_pose(va: float, vb: float) -> PoseParams:
        vals = dict(fixed_vals)
        vals[pa] = va
        vals[pb] = vb
        z = vals["z_delta"]
        s = frustum_bound(spec, min(max(z, spec.depth_range[0]), spec.depth_range[1]))
        for lateral in ("x_delta", "y_delta"):
            if lateral in sweep:  # swept laterals are normalized by the frustum bound
                vals[lateral] = vals[lateral] * s
        return PoseParams(**vals)

    for i, va in enumerate(values_a):
        for j, vb in enumerate(values_b):
            resp, _ = ev.evaluate(build_pose(float(va), float(vb)))
            labels[i, j] = resp.top_label
            confidence[i, j] = resp.confidence
            if scene.true_class is not None:
                correct[i, j] = resp.top_label == scene.true_class
    return LandscapeGrid(sweep, values_a, values_b, fixed_vals, labels, confidence, correct)


# ---------------------------------------------------------------------------
# single-parameter sensitivity

@dataclass
class SensitivityCell:
    start_index: int
    param: str
    n_resamples: int
    failure_rate: float  # percent
    min_delta: float | None  # raw parameter units; circular distance for angles
    min_delta_interp: float | None  # px for x/y, % bbox area for z, degrees for angles


@dataclass
class SensitivityReport:
    object_id: str
    n_starts: int
    n_resamples: int
    cells: list[SensitivityCell]
    skipped_starts: int = 0

    def per_param_medians(self) -> dict[str, dict[str, float | None]]:
        return aggregate_cells(self.cells)


def parameter_delta(param: str, old: float, new: float) -> float:
    """Disturbance magnitude; circular distance for angles, else absolute."""
    if param in ANGLE_PARAMS:
        return circular_distance(old, new)
    return abs(new - old)


def measure_cell(param: str, old_value: float,
                 samples: list[tuple[float, bool]]) -> tuple[float, float | None, int | None]:
    """Failure rate (%) and the smallest failing disturbance over resamples.

    samples: (new_value, misclassified) pairs. Returns (rate, min_delta,
    argmin sample index); min_delta is None when nothing failed.
    """
    if not samples:
        return 0.0, None, None
    failures = [(parameter_delta(param, old_value, v), i)
                for i, (v, miss) in enumerate(samples) if miss]
    rate = 100.0 * len(failures) / len(samples)
    if not failures:
        return rate, None, None
    best = min(failures)
    return rate, best[0], best[1]


def aggregate_cells(cells: list[SensitivityCell]) -> dict[str, dict[str, float | None]]:
    """Median over starts per parameter; absent min-deltas are excluded."""
    out: dict[str, dict[str, float | None]] = {}
    for param in POSE_PARAM_NAMES:
        mine = [c for c in cells if c.param == param]
        if not mine:
            continue
        out[param] = {
            "failure_rate": _median_or_none([c.failure_rate for c in mine]),
            "min_delta": _median_or_none([c.min_delta for c in mine
                                          if c.min_delta is not None]),
            "min_delta_interp": _median_or_none([c.min_delta_interp for c in mine
                                                 if c.min_delta_interp is not None]),
        }
    return out


def aggregate_objects(reports: list[SensitivityReport]) -> dict[str, dict[str, float | None]]:
    """Median of the per-object medians (the Fail Rate / Min delta table layout)."""
    out: dict[str, dict[str, float | None]] = {}
    per_object = [r.per_param_medians() for r in reports]
    for param in POSE_PARAM_NAMES:
        rows = [p[param] for p in per_object if param in p]
        if not rows:
            continue
        out[param] = {
            key: _median_or_none([r[key] for r in rows if r[key] is not None])
            for key in ("failure_rate", "min_delta", "min_delta_interp")
        }
    return out


def _resample_value(param: str, rng: np.random.Generator, spec: FrustumSpec,
                    start: PoseParams) -> float:
    """One fresh value for a single parameter, per the random-search ranges."""
    if param in ANGLE_PARAMS:
        return float(rng.uniform(0.0, TWO_PI))
    if param == "z_delta":
        return float(rng.uniform(*spec.depth_range))
    s = frustum_bound(spec, start.z_delta)
    return float(rng.uniform(-s, s))


def sensitivity(scene: SceneConfig, backend, n_starts: int = 100,
                n_resamples: int = 100, seed: int = 0,
                starts: list[PoseParams] | None = None,
                max_start_draws: int | None = None) -> SensitivityReport:
    """Single-parameter disturbance analysis from correctly classified starts."""
    if scene.true_class is None:
        raise ValueError("sensitivity needs scene.true_class")
    spec = scene.frustum
    ev = PoseEvaluator(scene, backend)

    skipped = 0
    verified: list[PoseParams] = []
    if starts is not None:
        for p in starts:
            resp, clamped = ev.evaluate(p)
            if resp.top_label == scene.true_class:
                verified.append(clamped)
            else:
                skipped += 1
                warnings.warn(f"start {p} not correctly classified; skipped")
    else:
        rng = substream(seed, "sensitivity/starts")
        draws = 0
        limit = max_start_draws if max_start_draws is not None else 200 * n_starts
        while len(verified) < n_starts and draws < limit:
            pose = sample_random_pose(rng, spec)
            resp, clamped = ev.evaluate(pose)
            draws += 1
            if resp.top_label == scene.true_class:
                verified.append(clamped)
        if len(verified) < n_starts:
            warnings.warn(f"only found {len(verified)}/{n_starts} correctly classified "
                          f"starts in {draws} draws")

    cells: list[SensitivityCell] = []
    for si, start in enumerate(verified):
        start_render = render(scene, start, enforce_frustum=False)
        u0, v0, _ = project_point(scene, start.translation())
        area0 = bbox_area(start_render)
        for param in POSE_PARAM_NAMES:
            rng = substream(seed, f"sensitivity/resample/{si}/{param}")
            samples: list[tuple[float, bool]] = []
            evaluated: list[PoseParams] = []
            for _ in range(n_resamples):
                value = _resample_value(param, rng, spec, start)
                candidate = start.replace(**{param: value})
                resp, clamped = ev.evaluate(candidate)
                samples.append((value, resp.top_label != scene.true_class))
                evaluated.append(clamped)
            rate, min_delta, argmin = measure_cell(param, getattr(start, param), samples)
            interp = None
            if argmin is not None:
                interp = _interpretable_delta(scene, param, min_delta, start,
                                              evaluated[argmin], u0, v0, area0)
            cells.append(SensitivityCell(si, param, n_resamples, rate, min_delta, interp))
    return SensitivityReport(scene.mesh_id, len(verified), n_resamples, cells, skipped)


def _interpretable_delta(scene: SceneConfig, param: str, raw_delta: float,
                         start: PoseParams, failing: PoseParams,
                         u0: float, v0: float, area0: int) -> float | None:
    """Image-unit conversion: px shift for x/y, % bbox-area change for z, degrees for angles."""
    if param in ANGLE_PARAMS:
        return math.degrees(raw_delta)
    if param in ("x_delta", "y_delta"):
        u1, v1, _ = project_point(scene, failing.translation())
        return abs(u1 - u0) if param == "x_delta" else abs(v1 - v0)
    if area0 <= 0:
        return None
    area1 = bbox_area(render(scene, failing, enforce_frustum=False))
    return 100.0 * abs(area1 - area0) / area0


def sensitivity_csv(aggregated: dict[str, dict[str, float | None]], path: str) -> None:
    """Fail Rate / Min delta / Interpretable delta table (one row per parameter)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "fail_rate_pct", "min_delta", "interpretable_delta"])
        for param in POSE_PARAM_NAMES:
            if param not in aggregated:
                continue
            row = aggregated[param]
            w.writerow([param,
                        "" if row["failure_rate"] is None else repr(row["failure_rate"]),
                        "" if row["min_delta"] is None else repr(row["min_delta"]),
                        "" if row["min_delta_interp"] is None else repr(row["min_delta_interp"])])


# ---------------------------------------------------------------------------
# lighting overlap

@dataclass
class OverlapScore:
    sets: tuple[frozenset, ...]
    o_s: float  # 100 * |intersection| / |union|


def top_k_classes(histogram: Counter, k: int = 50) -> frozenset:
    """k most frequent labels; frequency ties break toward the lower class index."""
    ranked = sorted(histogram.items(), key=lambda item: (-item[1], item[0]))
    return frozenset(label for label, _ in ranked[:k])


def lighting_overlap(histograms, k: int = 50) -> OverlapScore:
    """Intersection-over-union of the top-k class sets across lighting settings."""
    hists = list(histograms.values()) if isinstance(histograms, dict) else list(histograms)
    if len(hists) != 3 or any(not h for h in hists):
        raise ValueError("lighting_overlap needs three nonempty histograms")
    sets = tuple(top_k_classes(h, k) for h in hists)
    inter = sets[0] & sets[1] & sets[2]
    union = sets[0] | sets[1] | sets[2]
    return OverlapScore(sets, 100.0 * len(inter) / len(union))


# ---------------------------------------------------------------------------
# transfer

@dataclass
class TransferReport:
    n_selected: int
    misclassification_rate: float | None  # percent of selected poses backend_b gets wrong
    agreement_rate: float | None  # percent whose top-1 equals the source top-1


def transfer(records: list[TrialRecord], scene: SceneConfig, backend_b,
             source_class_table: list[str], confidence_floor: float = 0.9,
             label_map: dict[int, int] | None = None) -> TransferReport:
    """Re-render source misclassifications and measure how backend_b labels them."""
    if scene.true_class is None:
        raise ValueError("transfer needs scene.true_class")
    if list(backend_b.class_table) != list(source_class_table):
        if label_map is None:
            raise ValueError("class tables differ between backends; an explicit "
                             "label_map {source_index: target_index} is required")
        mapping = label_map
    else:
        mapping = None

    def to_b(idx: int) -> int | None:
        if mapping is None:
            return idx
        return mapping.get(idx)

    selected = [r for r in records if r.correct is False and r.confidence >= confidence_floor]
    if not selected:
        return TransferReport(0, None, None)
    true_b = to_b(scene.true_class)
    ev = PoseEvaluator(scene, backend_b)
    n_miss = 0
    n_agree = 0
    for r in selected:
        resp, _ = ev.evaluate(r.pose)
        if resp.top_label != true_b:
            n_miss += 1
        if resp.top_label == to_b(r.top_label):
            n_agree += 1
    n = len(selected)
    return TransferReport(n, 100.0 * n_miss / n, 100.0 * n_agree / n)


# ---------------------------------------------------------------------------
# yaw sweep

YAW_SWEEP_DISTANCES = (4.0, 6.0, 8.0)
YAW_SWEEP_START_DEG = 10.0
YAW_SWEEP_STEP_DEG = 30.0
YAW_SWEEP_VIEWS_PER_DISTANCE = 12


@dataclass
class YawSweepRow:
    distance: float
    top1_accuracy: float  # percent
    top5_accuracy: float  # percent
    mean_confidence: float


@dataclass
class YawSweepReport:
    rows: list[YawSweepRow]
    n_evaluations: int

    @property
    def average(self) -> YawSweepRow:
        return YawSweepRow(
            distance=float("nan"),
            top1_accuracy=float(np.mean([r.top1_accuracy for r in self.rows])),
            top5_accuracy=float(np.mean([r.top5_accuracy for r in self.rows])),
            mean_confidence=float(np.mean([r.mean_confidence for r in self.rows])),
        )

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["distance", "top1_accuracy_pct", "top5_accuracy_pct",
                        "mean_top1_confidence"])
            for r in self.rows + [self.average]:
                name = "average" if math.isnan(r.distance) else repr(r.distance)
                w.writerow([name, repr(r.top1_accuracy), repr(r.top5_accuracy),
                            repr(r.mean_confidence)])


def yaw_sweep_eval(scene: SceneConfig, backend,
                   distances=YAW_SWEEP_DISTANCES) -> YawSweepReport:
    """12 yaw views (10 deg start, 30 deg steps) at each camera distance, object at origin."""
    if scene.true_class is None:
        raise ValueError("yaw_sweep_eval needs scene.true_class")
    rows = []
    n_eval = 0
    for dist in distances:
        spec = FrustumSpec(half_angle_v=scene.frustum.half_angle_v,
                           camera_z=-float(dist), depth_range=(0.0, 0.0))
        sweep_scene = replace(scene, frustum=spec)
        top1 = 0
        top5 = 0
        confs = []
        for k in range(YAW_SWEEP_VIEWS_PER_DISTANCE):
            yaw = math.radians(YAW_SWEEP_START_DEG + YAW_SWEEP_STEP_DEG * k)
            pose = PoseParams(0.0, 0.0, 0.0, yaw, 0.0, 0.0)
            out = render(sweep_scene, pose)
            resp = backend.classify(out)
            n_eval += 1
            order = np.argsort(-resp.probs, kind="stable")
            if resp.top_label == scene.true_class:
                top1 += 1
            if scene.true_class in order[:5]:
                top5 += 1
            confs.append(resp.confidence)
        n = YAW_SWEEP_VIEWS_PER_DISTANCE
        rows.append(YawSweepRow(float(dist), 100.0 * top1 / n, 100.0 * top5 / n,
                                float(np.mean(confs))))
    return YawSweepReport(rows, n_eval)


# ---------------------------------------------------------------------------
# nearest neighbors

def nearest_neighbors(query_images: list[RenderOutput], corpus_images: list[RenderOutput],
                      backend, k: int = 5) -> list[list[tuple[int, float]]]:
    """Per query, the k corpus items with smallest Euclidean embedding distance."""
    if not getattr(backend, "supports_embedding", False):
        raise CapabilityError("backend does not support embeddings")
    corpus = np.stack([backend.embed(img) for img in corpus_images])
    results = []
    for q in query_images:
        qe = backend.embed(q)
        d = np.linalg.norm(corpus - qe[None, :], axis=1)
        order = np.argsort(d, kind="stable")[:k]  # stable sort: ties by corpus index
        results.append([(int(i), float(d[i])) for i in order])
    return results
