"""Command-line entry points for every experiment.

Each run writes a manifest.json (resolved config + scene hash + backend
handshake) next to its artifacts; `posekit rerun manifest.json --out DIR`
re-executes the identical run, and the JSONL outputs are byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import asdict

import click
import numpy as np

from . import analysis
from .classifier import cross_entropy
from .config import (
    ConfigError,
    build_backend,
    build_scene,
    build_search,
    load_config_file,
    multiview_scenes,
)
from .geometry import PoseParams
from .renderer import coverage_bbox, render, save_png, load_png_u8, RenderOutput
from .runio import (
    RunManifest,
    ensure_dir,
    new_run_id,
    read_jsonl,
    record_to_dict,
    scene_digest,
    write_jsonl,
)
from .search import (
    SearchAborted,
    SearchConfig,
    run_fdg,
    run_multiview_fdg,
    run_random_search,
    run_zrs,
)


def parse_pose(text: str) -> PoseParams:
    parts = [p for p in text.replace(" ", ",").split(",") if p]
    if len(parts) != 6:
        raise click.UsageError(
            f"pose needs 6 comma-separated values x,y,z,yaw,pitch,roll; got {text!r}")
    try:
        return PoseParams(*(float(p) for p in parts))
    except ValueError as exc:
        raise click.UsageError(f"bad pose value in {text!r}: {exc}")


def _load_resolved(config_path: str) -> dict:
    cfg = load_config_file(config_path)
    return {"scene": cfg.get("scene", {}), "backend": cfg.get("backend", {}),
            "search": cfg.get("search", {})}


def _dump_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir: str, command: str, resolved: dict, scene, backend_desc,
                    outputs: dict) -> RunManifest:
    seed = int(resolved.get("search", {}).get("rng_seed", 0))
    manifest = RunManifest(
        run_id=new_run_id(seed, command, resolved),
        command=command,
        config=resolved,
        seed=seed,
        scene_hash=scene_digest(scene),
        backend=backend_desc,
        outputs=outputs,
    )
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def _pose_dict(pose: PoseParams) -> dict:
    return {k: v for k, v in zip(
        ("x_delta", "y_delta", "z_delta", "theta_y", "theta_p", "theta_r"),
        pose.as_tuple())}


# ---------------------------------------------------------------------------
# executors (used by both the subcommands and `rerun`)

def _exec_census(resolved: dict, out_dir: str) -> dict:
    scene = build_scene(resolved["scene"])
    backend, desc = build_backend(resolved["backend"], scene.frustum)
    args = resolved.get("args", {})
    n = int(args.get("n", 1000))
    seed = int(resolved.get("search", {}).get("rng_seed", 0))
    report = analysis.census(scene, backend, n, seed=seed)
    outputs = {}
    for name, records in report.records.items():
        rel = f"records_{name}.jsonl"
        write_jsonl(os.path.join(out_dir, rel), (record_to_dict(r) for r in records))
        outputs[name] = rel
    payload = {
        "n_per_setting": n,
        "pooled_accuracy": report.pooled_accuracy,
        "distinct_labels": report.distinct_labels,
        "settings": {
            name: {
                "accuracy": s.accuracy,
                "n": s.n,
                "median_conf_correct": s.median_conf_correct,
                "median_conf_incorrect": s.median_conf_incorrect,
            } for name, s in report.settings.items()
        },
    }
    if all(s.histogram for s in report.settings.values()) and len(report.settings) == 3:
        score = analysis.lighting_overlap([s.histogram for s in report.settings.values()])
        payload["lighting_overlap_o_s"] = score.o_s
    _dump_json(os.path.join(out_dir, "report.json"), payload)
    outputs["report"] = "report.json"
    _write_manifest(out_dir, "census", resolved, scene, desc, outputs)
    return payload


def _exec_landscape(resolved: dict, out_dir: str) -> dict:
    scene = build_scene(resolved["scene"])
    backend, desc = build_backend(resolved["backend"], scene.frustum)
    args = resolved.get("args", {})
    sweep = tuple(args.get("sweep", ("theta_p", "theta_r")))
    fixed = args.get("fixed")
    resolution = int(args.get("resolution", 32))
    grid = analysis.landscape_grid(scene, backend, sweep=sweep, fixed=fixed,
                                   resolution=resolution)
    grid.to_csv(os.path.join(out_dir, "grid.csv"))
    grid.to_heatmap_png(os.path.join(out_dir, "heatmap.png"))
    outputs = {"grid": "grid.csv", "heatmap": "heatmap.png"}
    _write_manifest(out_dir, "landscape", resolved, scene, desc, outputs)
    return {"cells": int(grid.labels.size), "correct_cells": int(grid.correct.sum())}


def _exec_sensitivity(resolved: dict, out_dir: str) -> dict:
    scene = build_scene(resolved["scene"])
    backend, desc = build_backend(resolved["backend"], scene.frustum)
    args = resolved.get("args", {})
    seed = int(resolved.get("search", {}).get("rng_seed", 0))
    report = analysis.sensitivity(
        scene, backend, n_starts=int(args.get("starts", 100)),
        n_resamples=int(args.get("resamples", 100)), seed=seed)
    cells = [{
        "start": c.start_index, "param": c.param, "failure_rate": c.failure_rate,
        "min_delta": c.min_delta, "min_delta_interp": c.min_delta_interp,
    } for c in report.cells]
    write_jsonl(os.path.join(out_dir, "cells.jsonl"), cells)
    agg = report.per_param_medians()
    analysis.sensitivity_csv(agg, os.path.join(out_dir, "aggregate.csv"))
    payload = {"object": report.object_id, "n_starts": report.n_starts,
               "skipped_starts": report.skipped_starts, "aggregate": agg}
    _dump_json(os.path.join(out_dir, "report.json"), payload)
    outputs = {"cells": "cells.jsonl", "aggregate": "aggregate.csv", "report": "report.json"}
    _write_manifest(out_dir, "sensitivity", resolved, scene, desc, outputs)
    return payload


def _exec_attack(resolved: dict, out_dir: str) -> dict:
    scene = build_scene(resolved["scene"])
    backend, desc = build_backend(resolved["backend"], scene.frustum)
    args = resolved.get("args", {})
    method = args.get("method", "rs")
    search_section = dict(resolved.get("search", {}))
    records = []
    result: dict = {"method": method}
    try:
        if method == "rs":
            cfg = build_search(search_section, mode="RS")
            res = run_random_search(scene, backend, cfg)
            records = res.records
            result.update(backend_calls=res.backend_calls,
                          misclassified_fraction=res.misclassified_fraction)
        elif method == "zrs":
            cfg = build_search(search_section, mode="ZRS_attack")
            res = run_zrs(scene, backend, cfg)
            records = res.records
            result.update(backend_calls=res.backend_calls, hit=res.hit,
                          max_target_prob=res.max_target_prob,
                          refined_range=list(res.refined_range),
                          best_init_pose=_pose_dict(res.best_pose))
        elif method in ("fdg", "multiview"):
            init_arg = args.get("init")
            zrs_result = None
            if init_arg is not None:
                init = PoseParams(*[float(v) for v in init_arg])
            else:
                zrs_cfg = build_search(search_section, mode="ZRS_init")
                zrs_result = run_zrs(scene, backend, zrs_cfg)
                records.extend(zrs_result.records)
                init = zrs_result.best_pose
                result.update(init_target_prob=zrs_result.best_prob)
            if method == "fdg":
                cfg = build_search(search_section, mode="FDG")
                res = run_fdg(scene, backend, cfg, init)
                result.update(final_pose=_pose_dict(res.final_pose))
            else:
                cfg = build_search(search_section, mode="MULTIVIEW")
                scenes = multiview_scenes(scene, search_section)
                res = run_multiview_fdg(scenes, backend, cfg, init)
                result.update(views=len(scenes))
            records.extend(res.records)
            zrs_calls = zrs_result.backend_calls if zrs_result else 0
            result.update(backend_calls=res.backend_calls + zrs_calls, hit=res.hit,
                          max_target_prob=res.max_target_prob,
                          best_pose=_pose_dict(res.best_pose),
                          init_pose=_pose_dict(init))
        else:
            raise click.UsageError(
                f"unknown attack method {method!r}; use rs, zrs, fdg or multiview")
    except SearchAborted as exc:
        write_jsonl(os.path.join(out_dir, "records.jsonl"),
                    (record_to_dict(r) for r in (records + exc.records)))
        raise click.ClickException(f"backend failure, partial results saved: {exc}")
    write_jsonl(os.path.join(out_dir, "records.jsonl"),
                (record_to_dict(r) for r in records))
    _dump_json(os.path.join(out_dir, "result.json"), result)
    outputs = {"records": "records.jsonl", "result": "result.json"}
    _write_manifest(out_dir, f"attack:{method}", resolved, scene, desc, outputs)
    return result


def _exec_transfer(resolved: dict, out_dir: str) -> dict:
    scene = build_scene(resolved["scene"])
    backend_b, desc = build_backend(resolved["backend_b"], scene.frustum)
    args = resolved.get("args", {})
    rows = read_jsonl(args["records"])
    from .search import TrialRecord

    records = [TrialRecord(
        step_index=row["step"], phase=row["phase"], pose=PoseParams(*row["pose"]),
        top_label=row["top_label"], confidence=row["confidence"],
        correct=row.get("correct"), target_prob=row.get("target_prob"),
        loss=row.get("loss")) for row in rows]
    label_map = None
    if args.get("label_map"):
        with open(args["label_map"], "r", encoding="utf-8") as fh:
            label_map = {int(k): int(v) for k, v in json.load(fh).items()}
    source_table = args.get("source_class_table")
    if source_table is None:
        source_table = backend_b.class_table
    report = analysis.transfer(records, scene, backend_b, source_table,
                               confidence_floor=float(args.get("floor", 0.9)),
                               label_map=label_map)
    payload = {"n_selected": report.n_selected,
               "misclassification_rate": report.misclassification_rate,
               "agreement_rate": report.agreement_rate}
    _dump_json(os.path.join(out_dir, "report.json"), payload)
    _write_manifest(out_dir, "transfer", resolved, scene, desc, {"report": "report.json"})
    return payload


def _exec_yaw_sweep(resolved: dict, out_dir: str) -> dict:
    scene = build_scene(resolved["scene"])
    backend, desc = build_backend(resolved["backend"], scene.frustum)
    report = analysis.yaw_sweep_eval(scene, backend)
    report.to_csv(os.path.join(out_dir, "sweep.csv"))
    avg = report.average
    payload = {
        "n_evaluations": report.n_evaluations,
        "rows": [{"distance": r.distance, "top1": r.top1_accuracy,
                  "top5": r.top5_accuracy, "mean_confidence": r.mean_confidence}
                 for r in report.rows],
        "average": {"top1": avg.top1_accuracy, "top5": avg.top5_accuracy,
                    "mean_confidence": avg.mean_confidence},
    }
    _dump_json(os.path.join(out_dir, "report.json"), payload)
    outputs = {"sweep": "sweep.csv", "report": "report.json"}
    _write_manifest(out_dir, "yaw-sweep", resolved, scene, desc, outputs)
    return payload


def _exec_neighbors(resolved: dict, out_dir: str) -> dict:
    scene = build_scene(resolved["scene"])
    backend, desc = build_backend(resolved["backend"], scene.frustum)
    args = resolved.get("args", {})

    def load_images(paths):
        out = []
        for p in paths:
            u8 = load_png_u8(p)
            out.append(RenderOutput(pixels=u8.astype(np.float64) / 255.0,
                                    coverage_mask=np.zeros(u8.shape[:2], bool),
                                    meta={"path": p}))
        return out

    queries = load_images(args["queries"])
    corpus = load_images(args["corpus"])
    ranked = analysis.nearest_neighbors(queries, corpus, backend, k=int(args.get("k", 5)))
    payload = {"queries": [{
        "query": args["queries"][qi],
        "neighbors": [{"corpus_index": i, "path": args["corpus"][i], "distance": d}
                      for i, d in row],
    } for qi, row in enumerate(ranked)]}
    _dump_json(os.path.join(out_dir, "neighbors.json"), payload)
    _write_manifest(out_dir, "neighbors", resolved, scene, desc,
                    {"neighbors": "neighbors.json"})
    return payload


EXECUTORS = {
    "census": _exec_census,
    "landscape": _exec_landscape,
    "sensitivity": _exec_sensitivity,
    "attack:rs": _exec_attack,
    "attack:zrs": _exec_attack,
    "attack:fdg": _exec_attack,
    "attack:multiview": _exec_attack,
    "transfer": _exec_transfer,
    "yaw-sweep": _exec_yaw_sweep,
    "neighbors": _exec_neighbors,
}


def _run_command(command: str, resolved: dict, out_dir: str) -> dict:
    ensure_dir(out_dir)
    try:
        return EXECUTORS[command](resolved, out_dir)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


# ---------------------------------------------------------------------------
# click wiring

@click.group()
@click.version_option()
def main():
    """Adversarial-pose search engine."""


config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(), help="TOML/JSON config file")
out_option = click.option("--out", "out_dir", required=True, type=click.Path(),
                          help="output directory")
seed_option = click.option("--seed", type=int, default=None, help="override search.rng_seed")


def _resolved_with_args(config_path, seed=None, **args) -> dict:
    try:
        resolved = _load_resolved(config_path)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    if seed is not None:
        resolved.setdefault("search", {})["rng_seed"] = seed
    resolved["args"] = {k: v for k, v in args.items() if v is not None}
    return resolved


@main.command("render")
@config_option
@click.option("--pose", required=True, help="x,y,z,yaw,pitch,roll")
@click.option("--lighting", default=None, help="lighting preset override")
@click.option("--out", "out_path", required=True, type=click.Path())
def render_cmd(config_path, pose, lighting, out_path):
    """Render one pose to a PNG."""
    resolved = _resolved_with_args(config_path)
    if lighting:
        resolved["scene"]["lighting"] = lighting
    try:
        scene = build_scene(resolved["scene"])
        out = render(scene, parse_pose(pose))
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    save_png(out, out_path)
    bbox = coverage_bbox(out)
    click.echo(f"wrote {out_path} coverage_bbox={bbox}")


@main.command("census")
@config_option
@out_option
@seed_option
@click.option("--n", type=int, default=1000, help="samples per lighting setting")
def census_cmd(config_path, out_dir, seed, n):
    """Pose-space accuracy census across the three lighting settings."""
    payload = _run_command("census", _resolved_with_args(config_path, seed, n=n), out_dir)
    click.echo(json.dumps({k: payload[k] for k in ("pooled_accuracy", "distinct_labels")}))


@main.command("landscape")
@config_option
@out_option
@click.option("--sweep", default="theta_p,theta_r", help="two pose params, comma separated")
@click.option("--resolution", type=int, default=32)
@click.option("--fixed", "fixed_text", default=None,
              help='fixed params, e.g. "x_delta=0,z_delta=-3"')
def landscape_cmd(config_path, out_dir, sweep, resolution, fixed_text):
    """Classification landscape over two pose parameters."""
    sweep_pair = tuple(s.strip() for s in sweep.split(","))
    if len(sweep_pair) != 2:
        raise click.UsageError("--sweep needs exactly two parameter names")
    fixed = None
    if fixed_text:
        fixed = {}
        for part in fixed_text.split(","):
            key, _, value = part.partition("=")
            try:
                fixed[key.strip()] = float(value)
            except ValueError:
                raise click.UsageError(f"bad --fixed entry {part!r}")
    resolved = _resolved_with_args(config_path, sweep=list(sweep_pair),
                                   resolution=resolution, fixed=fixed)
    payload = _run_command("landscape", resolved, out_dir)
    click.echo(json.dumps(payload))


@main.command("sensitivity")
@config_option
@out_option
@seed_option
@click.option("--starts", type=int, default=100)
@click.option("--resamples", type=int, default=100)
def sensitivity_cmd(config_path, out_dir, seed, starts, resamples):
    """Single-parameter disturbance analysis from correctly classified starts."""
    resolved = _resolved_with_args(config_path, seed, starts=starts, resamples=resamples)
    payload = _run_command("sensitivity", resolved, out_dir)
    click.echo(json.dumps(payload["aggregate"]))


@main.command("attack")
@click.argument("method", type=click.Choice(["rs", "zrs", "fdg", "multiview"]))
@config_option
@out_option
@seed_option
@click.option("--target", type=int, default=None, help="target class index")
@click.option("--steps", "--budget", "budget", type=int, default=None,
              help="FDG steps / RS samples / ZRS refine samples")
@click.option("--lr", type=float, default=None, help="FDG learning rate")
@click.option("--h", "fd_step", type=float, default=None, help="FD step size")
@click.option("--init", default=None, help="skip ZRS init: x,y,z,yaw,pitch,roll")
def attack_cmd(method, config_path, out_dir, seed, target, budget, lr, fd_step, init):
    """Run a pose attack: rs, zrs, fdg or multiview."""
    resolved = _resolved_with_args(config_path, seed, method=method,
                                   init=list(parse_pose(init).as_tuple()) if init else None)
    search = resolved.setdefault("search", {})
    if target is not None:
        search["target_class"] = target
    if budget is not None:
        search["budget"] = budget
    if lr is not None:
        search["learning_rate"] = lr
    if fd_step is not None:
        search["fd_step"] = fd_step
    payload = _run_command(f"attack:{method}", resolved, out_dir)
    click.echo(json.dumps({k: v for k, v in payload.items()
                           if k in ("method", "hit", "max_target_prob",
                                    "misclassified_fraction", "backend_calls")}))


@main.command("transfer")
@config_option
@out_option
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--backend-b", "backend_b_path", required=True, type=click.Path(),
              help="config file whose [backend] section is the transfer target")
@click.option("--floor", type=float, default=0.9, help="source confidence floor")
@click.option("--label-map", "label_map_path", default=None, type=click.Path(),
              help="JSON {source_index: target_index} when class tables differ")
def transfer_cmd(config_path, out_dir, records_path, backend_b_path, floor, label_map_path):
    """Expose recorded adversarial poses to a second backend."""
    resolved = _resolved_with_args(config_path, None, records=records_path,
                                   floor=floor, label_map=label_map_path)
    try:
        backend_b_cfg = load_config_file(backend_b_path)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    resolved["backend_b"] = backend_b_cfg.get("backend", {})
    resolved["args"]["source_class_table"] = None
    try:
        source_backend, _ = build_backend(resolved["backend"],
                                          build_scene(resolved["scene"]).frustum)
        resolved["args"]["source_class_table"] = list(source_backend.class_table)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    payload = _run_command("transfer", resolved, out_dir)
    click.echo(json.dumps(payload))


@main.command("yaw-sweep")
@config_option
@out_option
def yaw_sweep_cmd(config_path, out_dir):
    """36-view canonical evaluation: 12 yaw steps at 3 camera distances."""
    payload = _run_command("yaw-sweep", _resolved_with_args(config_path), out_dir)
    click.echo(json.dumps(payload["average"]))


@main.command("neighbors")
@config_option
@out_option
@click.option("--queries", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--corpus", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--k", type=int, default=5)
def neighbors_cmd(config_path, out_dir, queries, corpus, k):
    """Embedding nearest neighbors of query images within a corpus."""
    resolved = _resolved_with_args(config_path, None, queries=list(queries),
                                   corpus=list(corpus), k=k)
    payload = _run_command("neighbors", resolved, out_dir)
    click.echo(f"wrote neighbors for {len(payload['queries'])} queries")


@main.command("serve")
@config_option
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8008)
@click.option("--run-root", default=None, type=click.Path(),
              help="directory for run artifacts (default: temp dir)")
@click.option("--ui", "ui_dir", default=None, type=click.Path(),
              help="static directory to serve at / (the explorer frontend)")
def serve_cmd(config_path, host, port, run_root, ui_dir):
    """Local HTTP service exposing render/classify/search for the explorer UI."""
    import tempfile

    import uvicorn

    from .service import create_app

    resolved = _resolved_with_args(config_path)
    try:
        scene = build_scene(resolved["scene"])
        backend, desc = build_backend(resolved["backend"], scene.frustum)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    root = run_root or tempfile.mkdtemp(prefix="posekit-runs-")
    app = create_app(scene, backend, desc, ensure_dir(root), ui_dir=ui_dir)
    click.echo(f"serving on http://{host}:{port} (runs in {root})")
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("rerun")
@click.argument("manifest_path", type=click.Path(exists=True))
@out_option
def rerun_cmd(manifest_path, out_dir):
    """Re-execute a run from its manifest; JSONL outputs are byte-identical."""
    manifest = RunManifest.load(manifest_path)
    if manifest.command not in EXECUTORS:
        raise click.ClickException(f"manifest command {manifest.command!r} is not rerunnable")
    resolved = manifest.config
    payload = _run_command(manifest.command, resolved, out_dir)
    new_manifest = RunManifest.load(os.path.join(out_dir, "manifest.json"))
    if new_manifest.scene_hash != manifest.scene_hash:
        raise click.ClickException(
            f"scene hash changed: {manifest.scene_hash} -> {new_manifest.scene_hash}; "
            "the mesh/texture/config inputs are no longer identical")
    click.echo(json.dumps({"rerun_of": manifest.run_id, "command": manifest.command}))


if __name__ == "__main__":
    main()
