"""Pose-attack procedures over the classifier abstraction.

Three search modes plus one variant:
  RS          untargeted uniform sampling of the whole pose box
  ZRS         targeted: a sweep over evenly spaced depth levels picks a
              starting pose (init) or a refined depth interval to keep
              sampling in (attack)
  FDG         targeted vanilla gradient descent on the 9-parameter trig
              encoding, with central finite-difference gradients
  multi-view  FDG stepped with the gradient of whichever camera variant
              currently has the lowest loss

All randomness flows through one seed; records come back in step order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierResponse, cross_entropy
from .geometry import (
    FrustumSpec,
    PoseParams,
    TrigPose,
    clamp_pose,
    decode_trig,
    encode_trig,
    frustum_bound,
)
from .renderer import SceneConfig, render
from .runio import substream

TWO_PI = 2.0 * math.pi

SEARCH_MODES = ("RS", "ZRS_init", "ZRS_attack", "FDG", "MULTIVIEW")


class SearchAborted(RuntimeError):
    """Backend failed mid-run; carries the records gathered so far."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class SearchConfig:
    mode: str = "RS"
    budget: int = 100  # RS samples, ZRS_attack refine samples, or FDG steps
    target_class: int | None = None
    rng_seed: int = 0
    fd_step: float = 1e-3
    learning_rate: float = 1e-3
    zrs_levels: int = 30
    zrs_samples_per_level: int = 10
    depth_range: tuple[float, float] | None = None  # overrides the scene frustum's range
    fd_step_per_param: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mode not in SEARCH_MODES:
            raise ValueError(f"mode must be one of {SEARCH_MODES}, got {self.mode!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.fd_step <= 0 or self.learning_rate <= 0:
            raise ValueError("fd_step and learning_rate must be positive")
        if self.zrs_levels < 2:
            raise ValueError("zrs_levels must be >= 2")
        if self.fd_step_per_param is not None and len(self.fd_step_per_param) != 9:
            raise ValueError("fd_step_per_param needs 9 entries")


@dataclass
class TrialRecord:
    step_index: int
    phase: str
    pose: PoseParams
    top_label: int
    confidence: float
    correct: bool | None = None
    target_prob: float | None = None
    loss: float | None = None
    view: int | None = None
    wall_time: float = 0.0  # informational; excluded from canonical serialization


def effective_frustum(scene: SceneConfig, cfg: SearchConfig) -> FrustumSpec:
    if cfg.depth_range is None:
        return scene.frustum
    from dataclasses import replace
    return replace(scene.frustum, depth_range=tuple(cfg.depth_range))


class PoseEvaluator:
    """Render + classify with frustum clamping; counts every backend call."""

    def __init__(self, scene: SceneConfig, backend, frustum: FrustumSpec | None = None):
        self.scene = scene
        self.backend = backend
        self.frustum = frustum if frustum is not None else scene.frustum
        self.calls = 0

    def evaluate(self, pose: PoseParams, trig: np.ndarray | None = None
                 ) -> tuple[ClassifierResponse, PoseParams]:
        clamped = clamp_pose(pose, self.frustum)
        out = render(self.scene, clamped, enforce_frustum=False)
        if trig is not None:
            out.meta["trig"] = trig
        self.calls += 1
        return self.backend.classify(out), clamped


def sample_random_pose(rng: np.random.Generator, spec: FrustumSpec) -> PoseParams:
    """Uniform pose: z over the depth range, x/y within the frustum bound at that z."""
    lo, hi = spec.depth_range
    z = float(rng.uniform(lo, hi))
    s = frustum_bound(spec, z)
    x = float(rng.uniform(-s, s))
    y = float(rng.uniform(-s, s))
    ty, tp, tr = (float(rng.uniform(0.0, TWO_PI)) for _ in range(3))
    return PoseParams(x, y, z, ty, tp, tr)


def _sample_pose_at_z(rng: np.random.Generator, spec: FrustumSpec, z: float) -> PoseParams:
    s = frustum_bound(spec, z)
    x = float(rng.uniform(-s, s))
    y = float(rng.uniform(-s, s))
    ty, tp, tr = (float(rng.uniform(0.0, TWO_PI)) for _ in range(3))
    return PoseParams(x, y, float(z), ty, tp, tr)


def _record(step: int, phase: str, resp: ClassifierResponse, pose: PoseParams,
            true_class: int | None, target: int | None, t0: float,
            view: int | None = None) -> TrialRecord:
    target_prob = float(resp.probs[target]) if target is not None else None
    return TrialRecord(
        step_index=step,
        phase=phase,
        pose=pose,
        top_label=resp.top_label,
        confidence=resp.confidence,
        correct=(resp.top_label == true_class) if true_class is not None else None,
        target_prob=target_prob,
        loss=cross_entropy(resp, target) if target is not None else None,
        view=view,
        wall_time=time.monotonic() - t0,
    )


@dataclass
class RandomSearchResult:
    records: list[TrialRecord]
    backend_calls: int

    @property
    def misclassified_fraction(self) -> float:
        labeled = [r for r in self.records if r.correct is not None]
        if not labeled:
            return float("nan")
        return sum(1 for r in labeled if not r.correct) / len(labeled)


def run_random_search(scene: SceneConfig, backend, cfg: SearchConfig,
                      on_record=None) -> RandomSearchResult:
    if cfg.mode != "RS":
        raise ValueError(f"run_random_search requires mode RS, got {cfg.mode}")
    spec = effective_frustum(scene, cfg)
    ev = PoseEvaluator(scene, backend, spec)
    rng = substream(cfg.rng_seed, "rs")
    records: list[TrialRecord] = []
    t0 = time.monotonic()
    for i in range(cfg.budget):
        pose = sample_random_pose(rng, spec)
        try:
            resp, clamped = ev.evaluate(pose)
        except Exception as exc:
            raise SearchAborted(f"backend failed at sample {i}: {exc}", records) from exc
        rec = _record(i, "rs", resp, clamped, scene.true_class, cfg.target_class, t0)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return RandomSearchResult(records, ev.calls)


@dataclass
class ZrsResult:
    mode: str
    best_pose: PoseParams  # argmax target probability over the init sweep
    best_prob: float
    level_z: np.ndarray
    level_probs: np.ndarray  # per-level max target probability
    refined_range: tuple[float, float] | None
    records: list[TrialRecord]
    backend_calls: int
    hit: bool  # target was top-1 during the post-init phase
    max_target_prob: float  # over the post-init phase (init max if init-only)


def run_zrs(scene: SceneConfig, backend, cfg: SearchConfig, on_record=None) -> ZrsResult:
    """Depth-level sweep initializer / attack (mode ZRS_init or ZRS_attack)."""
    if cfg.mode not in ("ZRS_init", "ZRS_attack"):
        raise ValueError(f"run_zrs requires mode ZRS_init or ZRS_attack, got {cfg.mode}")
    if cfg.target_class is None:
        raise ValueError("ZRS needs target_class")
    target = cfg.target_class
    spec = effective_frustum(scene, cfg)
    ev = PoseEvaluator(scene, backend, spec)
    rng = substream(cfg.rng_seed, "zrs")
    lo, hi = spec.depth_range
    levels = np.linspace(lo, hi, cfg.zrs_levels)
    level_probs = np.zeros(len(levels))
    records: list[TrialRecord] = []
    best_pose = None
    best_prob = -1.0
    t0 = time.monotonic()
    step = 0
    for li, z in enumerate(levels):
        for _ in range(cfg.zrs_samples_per_level):
            pose = _sample_pose_at_z(rng, spec, float(z))
            try:
                resp, clamped = ev.evaluate(pose)
            except Exception as exc:
                raise SearchAborted(f"backend failed at init sample {step}: {exc}",
                                    records) from exc
            rec = _record(step, "zrs_init", resp, clamped, scene.true_class, target, t0)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            if rec.target_prob > level_probs[li]:
                level_probs[li] = rec.target_prob
            if rec.target_prob > best_prob:  # strict: ties keep the earliest (lowest level)
                best_prob = rec.target_prob
                best_pose = clamped
            step += 1

    if cfg.mode == "ZRS_init":
        return ZrsResult(cfg.mode, best_pose, best_prob, levels, level_probs, None,
                         records, ev.calls, False, best_prob)

    order = sorted(range(len(levels)), key=lambda i: (-level_probs[i], i))
    z_a, z_b = levels[order[0]], levels[order[1]]
    z_lo, z_hi = (float(min(z_a, z_b)), float(max(z_a, z_b)))
    hit = False
    max_prob = -1.0
    for k in range(cfg.budget):
        z = float(rng.uniform(z_lo, z_hi))
        pose = _sample_pose_at_z(rng, spec, z)
        try:
            resp, clamped = ev.evaluate(pose)
        except Exception as exc:
            raise SearchAborted(f"backend failed at refine sample {k}: {exc}",
                                records) from exc
        rec = _record(step, "zrs_refine", resp, clamped, scene.true_class, target, t0)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if rec.top_label == target:
            hit = True
        if rec.target_prob > max_prob:
            max_prob = rec.target_prob
        step += 1
    return ZrsResult(cfg.mode, best_pose, best_prob, levels, level_probs,
                     (z_lo, z_hi), records, ev.calls, hit, max_prob)


def central_difference(f, w: np.ndarray, h: float,
                       h_per_param: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient: component i is [f(w_i + h/2) - f(w_i - h/2)] / h."""
    w = np.asarray(w, dtype=np.float64)
    steps = np.full(len(w), h) if h_per_param is None else np.asarray(h_per_param, dtype=np.float64)
    grad = np.zeros(len(w))
    for i in range(len(w)):
        wp = w.copy()
        wp[i] = w[i] + steps[i] / 2.0
        fp = f(wp)
        wm = w.copy()
        wm[i] = w[i] - steps[i] / 2.0
        fm = f(wm)
        grad[i] = (fp - fm) / steps[i]
    return grad


def _trig_objective(ev: PoseEvaluator, target: int):
    def objective(w: np.ndarray) -> float:
        pose = decode_trig(TrigPose.from_array(w))
        resp, _ = ev.evaluate(pose, trig=w)
        return cross_entropy(resp, target)

    return objective


def fd_gradient(scene: SceneConfig, backend, tp: TrigPose, target: int,
                h: float = 1e-3, h_per_param=None,
                frustum: FrustumSpec | None = None) -> np.ndarray:
    """9-vector finite-difference gradient of the targeted loss at a trig pose.

    Costs exactly 18 render+classify calls. Translation components are
    clamped into the frustum box at render time; the difference quotient
    itself uses the unclamped parameter values.
    """
    if h <= 0:
        raise ValueError("fd step h must be positive")
    ev = PoseEvaluator(scene, backend, frustum)
    return central_difference(_trig_objective(ev, target), tp.as_array(), h, h_per_param)


@dataclass
class FdgResult:
    records: list[TrialRecord]
    backend_calls: int
    hit: bool
    max_target_prob: float
    best_pose: PoseParams  # evaluated pose with the highest target probability
    final_pose: PoseParams  # state after the last update (not evaluated)
    final_trig: np.ndarray


def run_fdg(scene: SceneConfig, backend, cfg: SearchConfig,
            init: PoseParams, on_record=None) -> FdgResult:
    """Vanilla gradient descent w <- w - lr * grad for cfg.budget steps, no early stop."""
    if cfg.mode != "FDG":
        raise ValueError(f"run_fdg requires mode FDG, got {cfg.mode}")
    if cfg.target_class is None:
        raise ValueError("FDG needs target_class")
    target = cfg.target_class
    spec = effective_frustum(scene, cfg)
    ev = PoseEvaluator(scene, backend, spec)
    objective = _trig_objective(ev, target)
    h_pp = np.asarray(cfg.fd_step_per_param) if cfg.fd_step_per_param else None
    w = encode_trig(init).as_array()
    records: list[TrialRecord] = []
    t0 = time.monotonic()
    for step in range(cfg.budget):
        pose = decode_trig(TrigPose.from_array(w))
        try:
            resp, clamped = ev.evaluate(pose, trig=w)
            rec = _record(step, "fdg", resp, clamped, scene.true_class, target, t0)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            grad = central_difference(objective, w, cfg.fd_step, h_pp)
        except SearchAborted:
            raise
        except Exception as exc:
            raise SearchAborted(f"backend failed at step {step}: {exc}", records) from exc
        w = w - cfg.learning_rate * grad
    hit = any(r.top_label == target for r in records)
    best = max(records, key=lambda r: r.target_prob)
    final_pose = clamp_pose(decode_trig(TrigPose.from_array(w)), spec)
    return FdgResult(records, ev.calls, hit, best.target_prob, best.pose,
                     final_pose, w)


@dataclass
class MultiViewResult:
    records: list[TrialRecord]  # one per step, for the chosen (lowest-loss) view
    backend_calls: int
    hit: bool  # target was top-1 in any view's objective evaluation
    max_target_prob: float  # over all views' objective evaluations
    best_pose: PoseParams
    final_trig: np.ndarray


def run_multiview_fdg(scenes: list[SceneConfig], backend, cfg: SearchConfig,
                      init: PoseParams, on_record=None) -> MultiViewResult:
    """Per step: evaluate all k views, step with the gradient of the lowest-loss view.

    Costs k objective evaluations + k*18 gradient evaluations per step.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    if cfg.target_class is None:
        raise ValueError("multi-view FDG needs target_class")
    target = cfg.target_class
    evs = [PoseEvaluator(s, backend, effective_frustum(s, cfg)) for s in scenes]
    objectives = [_trig_objective(ev, target) for ev in evs]
    h_pp = np.asarray(cfg.fd_step_per_param) if cfg.fd_step_per_param else None
    w = encode_trig(init).as_array()
    records: list[TrialRecord] = []
    hit = False
    max_prob = -1.0
    best_pose = init
    t0 = time.monotonic()
    for step in range(cfg.budget):
        pose = decode_trig(TrigPose.from_array(w))
        evals = []
        try:
            for ev in evs:
                resp, clamped = ev.evaluate(pose, trig=w)
                evals.append((resp, clamped, cross_entropy(resp, target)))
                if resp.top_label == target:
                    hit = True
                p = float(resp.probs[target])
                if p > max_prob:
                    max_prob = p
                    best_pose = clamped
            kbest = int(np.argmin([e[2] for e in evals]))  # ties go to the lowest view index
            rec = _record(step, "multiview", evals[kbest][0], evals[kbest][1],
                          scenes[kbest].true_class, target, t0, view=kbest)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            grads = [central_difference(obj, w, cfg.fd_step, h_pp) for obj in objectives]
        except SearchAborted:
            raise
        except Exception as exc:
            raise SearchAborted(f"backend failed at step {step}: {exc}", records) from exc
        w = w - cfg.learning_rate * grads[kbest]
    return MultiViewResult(records, sum(ev.calls for ev in evs), hit, max_prob,
                           best_pose, w)
