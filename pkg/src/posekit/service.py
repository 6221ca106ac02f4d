"""Local HTTP service: render/classify on demand, search runs with SSE streaming.

Stateless for /render and /classify (responses depend only on the request body
and the configured scene); search runs execute on worker threads and stream
TrialRecords as server-sent events, with artifacts persisted per run.
"""

from __future__ import annotations

import base64
import io
import json
import math
import os
import threading
import uuid
from dataclasses import replace

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse, StreamingResponse
from PIL import Image

from . import analysis
from .classifier import CapabilityError
from .geometry import PoseParams, frustum_bound, validate_pose
from .protocol import ProtocolError, TransportError
from .renderer import SceneConfig, coverage_bbox, lighting_preset, render, LIGHTING_PRESETS
from .runio import ensure_dir, record_to_dict, scene_digest, write_jsonl
from .search import (
    SearchConfig,
    run_fdg,
    run_multiview_fdg,
    run_random_search,
    run_zrs,
)

POSE_FIELDS = ("x_delta", "y_delta", "z_delta", "theta_y", "theta_p", "theta_r")

SEARCH_REQUEST_KEYS = {"mode", "budget", "target_class", "rng_seed", "fd_step",
                       "learning_rate", "zrs_levels", "zrs_samples_per_level", "n",
                       "init"}


class FieldError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(message)


def parse_pose_payload(payload, frustum) -> PoseParams:
    """Pose dict or 6-list -> validated PoseParams; FieldError names the bad field."""
    if isinstance(payload, (list, tuple)):
        if len(payload) != 6:
            raise FieldError("pose", f"pose list needs 6 values, got {len(payload)}")
        payload = dict(zip(POSE_FIELDS, payload))
    if not isinstance(payload, dict):
        raise FieldError("pose", "pose must be an object or a 6-element list")
    unknown = set(payload) - set(POSE_FIELDS)
    if unknown:
        raise FieldError(sorted(unknown)[0], f"unknown pose field(s) {sorted(unknown)}")
    values = {}
    for field in POSE_FIELDS:
        try:
            values[field] = float(payload.get(field, 0.0))
        except (TypeError, ValueError):
            raise FieldError(field, f"{field} must be a number")
        if not math.isfinite(values[field]):
            raise FieldError(field, f"{field} must be finite")
    pose = PoseParams(**values)
    lo, hi = frustum.depth_range
    if not (lo <= pose.z_delta <= hi):
        raise FieldError("z_delta", f"z_delta {pose.z_delta} outside [{lo}, {hi}]")
    s = frustum_bound(frustum, pose.z_delta)
    if abs(pose.x_delta) > s:
        raise FieldError("x_delta", f"x_delta {pose.x_delta} outside [-{s}, {s}] "
                                    f"at z_delta {pose.z_delta}")
    if abs(pose.y_delta) > s:
        raise FieldError("y_delta", f"y_delta {pose.y_delta} outside [-{s}, {s}] "
                                    f"at z_delta {pose.z_delta}")
    return pose


def parse_lighting_payload(payload):
    if payload is None:
        return None
    if isinstance(payload, str):
        if payload not in LIGHTING_PRESETS:
            raise FieldError("lighting", f"unknown preset {payload!r}; "
                                         f"have {sorted(LIGHTING_PRESETS)}")
        return lighting_preset(payload)
    if isinstance(payload, dict):
        from .config import build_lighting

        try:
            return build_lighting(payload)
        except ValueError as exc:
            raise FieldError("lighting", str(exc))
    raise FieldError("lighting", "lighting must be a preset name or an object")


class ActiveRun:
    def __init__(self, run_id: str, config: dict):
        self.run_id = run_id
        self.config = config
        self.records: list[dict] = []
        self.done = False
        self.error: str | None = None
        self.summary: dict | None = None
        self.cond = threading.Condition()

    def append(self, record) -> None:
        with self.cond:
            self.records.append(record_to_dict(record))
            self.cond.notify_all()

    def finish(self, summary: dict | None, error: str | None = None) -> None:
        with self.cond:
            self.summary = summary
            self.error = error
            self.done = True
            self.cond.notify_all()


class RunRegistry:
    def __init__(self, root: str):
        self.root = root
        self._runs: dict[str, ActiveRun] = {}
        self._lock = threading.Lock()

    def create(self, config: dict) -> ActiveRun:
        run_id = uuid.uuid4().hex[:12]
        run = ActiveRun(run_id, config)
        with self._lock:
            self._runs[run_id] = run
        return run

    def get(self, run_id: str) -> ActiveRun | None:
        with self._lock:
            return self._runs.get(run_id)

    def list_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._runs)

    def run_dir(self, run_id: str) -> str:
        return ensure_dir(os.path.join(self.root, run_id))


def _execute_search(scene: SceneConfig, backend, run: ActiveRun, registry: RunRegistry):
    cfg_dict = dict(run.config)
    mode = cfg_dict.pop("mode", "rs").lower()
    n = int(cfg_dict.pop("n", 1000))
    init = cfg_dict.pop("init", None)
    summary: dict = {"mode": mode}
    try:
        if mode == "census":
            report = analysis.census(scene, backend, n,
                                     seed=int(cfg_dict.get("rng_seed", 0)),
                                     on_record=run.append)
            summary.update(pooled_accuracy=report.pooled_accuracy,
                           distinct_labels=report.distinct_labels)
        else:
            known = {"budget", "target_class", "rng_seed", "fd_step", "learning_rate",
                     "zrs_levels", "zrs_samples_per_level"}
            kwargs = {k: v for k, v in cfg_dict.items() if k in known and v is not None}
            if mode == "rs":
                cfg = SearchConfig(mode="RS", **kwargs)
                res = run_random_search(scene, backend, cfg, on_record=run.append)
                summary.update(backend_calls=res.backend_calls,
                               misclassified_fraction=res.misclassified_fraction)
            elif mode == "zrs":
                cfg = SearchConfig(mode="ZRS_attack", **kwargs)
                res = run_zrs(scene, backend, cfg, on_record=run.append)
                summary.update(backend_calls=res.backend_calls, hit=res.hit,
                               max_target_prob=res.max_target_prob,
                               refined_range=list(res.refined_range))
            elif mode in ("fdg", "multiview"):
                if init is not None:
                    start = PoseParams(*[float(v) for v in init])
                else:
                    zrs_cfg = SearchConfig(mode="ZRS_init", **kwargs)
                    zres = run_zrs(scene, backend, zrs_cfg, on_record=run.append)
                    start = zres.best_pose
                    summary.update(init_target_prob=zres.best_prob)
                if mode == "fdg":
                    cfg = SearchConfig(mode="FDG", **kwargs)
                    res = run_fdg(scene, backend, cfg, start, on_record=run.append)
                else:
                    cfg = SearchConfig(mode="MULTIVIEW", **kwargs)
                    from .config import multiview_scenes

                    res = run_multiview_fdg(multiview_scenes(scene, {}), backend, cfg,
                                            start, on_record=run.append)
                best = res.best_pose
                summary.update(backend_calls=res.backend_calls, hit=res.hit,
                               max_target_prob=res.max_target_prob,
                               best_pose=list(best.as_tuple()),
                               init_pose=list(start.as_tuple()))
            else:
                raise ValueError(f"unknown search mode {mode!r}")
        out_dir = registry.run_dir(run.run_id)
        write_jsonl(os.path.join(out_dir, "records.jsonl"), run.records)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        run.finish(summary)
    except Exception as exc:
        out_dir = registry.run_dir(run.run_id)
        write_jsonl(os.path.join(out_dir, "records.jsonl"), run.records)
        run.finish(None, error=f"{type(exc).__name__}: {exc}")


def _field_error_response(exc: FieldError) -> JSONResponse:
    return JSONResponse(status_code=400,
                        content={"error": {"field": exc.field, "message": str(exc)}})


def _png_bytes(out) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(out.to_u8(), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(scene: SceneConfig, backend, backend_desc: dict | None = None,
               run_root: str | None = None, ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="posekit service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    registry = RunRegistry(ensure_dir(run_root or "runs"))
    scene_hash = scene_digest(scene)

    def scene_for(lighting):
        return scene if lighting is None else scene.with_lighting(lighting)

    @app.get("/scene")
    def get_scene():
        spec = scene.frustum
        return {
            "mesh_id": scene.mesh_id,
            "scene_hash": scene_hash,
            "num_vertices": scene.mesh.num_vertices,
            "num_faces": scene.mesh.num_faces,
            "image_size": list(scene.image_size),
            "true_class": scene.true_class,
            "limits": {
                "depth_range": list(spec.depth_range),
                "camera_z": spec.camera_z,
                "half_angle_v": spec.half_angle_v,
                "tan_half_angle_v": math.tan(spec.half_angle_v),
                "angle_range": [0.0, 2.0 * math.pi],
            },
            "lighting_presets": {k: list(v) for k, v in LIGHTING_PRESETS.items()},
            "backend": {
                "num_classes": backend.num_classes,
                "class_table": list(backend.class_table),
                "supports_embedding": bool(getattr(backend, "supports_embedding", False)),
                **(backend_desc or {}),
            },
        }

    async def _json_body(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception:
            raise FieldError("body", "request body must be JSON")
        if not isinstance(body, dict):
            raise FieldError("body", "request body must be a JSON object")
        return body

    @app.post("/render")
    async def post_render(request: Request):
        try:
            body = await _json_body(request)
            pose = parse_pose_payload(body.get("pose", {}), scene.frustum)
            lighting = parse_lighting_payload(body.get("lighting"))
        except FieldError as exc:
            return _field_error_response(exc)
        out = render(scene_for(lighting), pose)
        bbox = coverage_bbox(out)
        headers = {
            "X-Coverage-Bbox": "" if bbox is None else ",".join(str(v) for v in bbox),
            "X-Scene-Hash": scene_hash,
        }
        return Response(content=_png_bytes(out), media_type="image/png", headers=headers)

    @app.post("/classify")
    async def post_classify(request: Request):
        try:
            body = await _json_body(request)
            pose = parse_pose_payload(body.get("pose", {}), scene.frustum)
            lighting = parse_lighting_payload(body.get("lighting"))
        except FieldError as exc:
            return _field_error_response(exc)
        out = render(scene_for(lighting), pose)
        try:
            resp = backend.classify(out)
        except (TransportError, ProtocolError) as exc:
            return JSONResponse(status_code=503, content={
                "error": {"message": f"backend unavailable: {exc}",
                          "backend": backend_desc or {}}})
        order = np.argsort(-resp.probs, kind="stable")[:5]
        table = list(backend.class_table)
        return {
            "pose": list(pose.as_tuple()),
            "scene_hash": scene_hash,
            "probs": [float(p) for p in resp.probs],
            "top_label": resp.top_label,
            "top5": [{"label": int(i), "name": table[int(i)],
                      "prob": float(resp.probs[i])} for i in order],
            "render_png_b64": base64.b64encode(_png_bytes(out)).decode("ascii"),
            "coverage_bbox": coverage_bbox(out),
        }

    @app.post("/search")
    async def post_search(request: Request):
        try:
            body = await _json_body(request)
            unknown = set(body) - SEARCH_REQUEST_KEYS
            if unknown:
                raise FieldError(sorted(unknown)[0],
                                 f"unknown search key(s) {sorted(unknown)}; "
                                 f"valid: {sorted(SEARCH_REQUEST_KEYS)}")
            mode = str(body.get("mode", "rs")).lower()
            if mode not in ("rs", "zrs", "fdg", "multiview", "census"):
                raise FieldError("mode", f"unknown mode {mode!r}")
            if mode in ("zrs", "fdg", "multiview") and body.get("target_class") is None:
                raise FieldError("target_class", f"mode {mode} needs target_class")
        except FieldError as exc:
            return _field_error_response(exc)
        run = registry.create(body)
        thread = threading.Thread(target=_execute_search,
                                  args=(scene, backend, run, registry), daemon=True)
        thread.start()
        return {"run_id": run.run_id}

    @app.get("/runs")
    def list_runs():
        return {"runs": registry.list_ids()}

    @app.get("/runs/{run_id}")
    def stream_run(run_id: str):
        run = registry.get(run_id)
        if run is None:
            return JSONResponse(status_code=404,
                                content={"error": {"message": f"no run {run_id}"}})

        def gen():
            sent = 0
            while True:
                with run.cond:
                    while len(run.records) == sent and not run.done:
                        run.cond.wait(timeout=30.0)
                    batch = run.records[sent:]
                    done = run.done
                    summary = run.summary
                    error = run.error
                sent += len(batch)
                for rec in batch:
                    yield f"event: record\ndata: {json.dumps(rec, sort_keys=True)}\n\n"
                if done:
                    payload = {"summary": summary, "error": error,
                               "n_records": sent}
                    yield f"event: summary\ndata: {json.dumps(payload, sort_keys=True)}\n\n"
                    return

        return StreamingResponse(gen(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    @app.get("/runs/{run_id}/artifacts")
    def list_artifacts(run_id: str):
        run = registry.get(run_id)
        if run is None:
            return JSONResponse(status_code=404,
                                content={"error": {"message": f"no run {run_id}"}})
        out_dir = registry.run_dir(run_id)
        files = sorted(os.listdir(out_dir)) if os.path.isdir(out_dir) else []
        return {"run_id": run_id, "done": run.done, "files": files}

    @app.get("/runs/{run_id}/artifacts/{name}")
    def get_artifact(run_id: str, name: str):
        if "/" in name or ".." in name:
            return JSONResponse(status_code=400,
                                content={"error": {"message": "bad artifact name"}})
        path = os.path.join(registry.run_dir(run_id), name)
        if not os.path.exists(path):
            return JSONResponse(status_code=404,
                                content={"error": {"message": f"no artifact {name}"}})
        return FileResponse(path)

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
