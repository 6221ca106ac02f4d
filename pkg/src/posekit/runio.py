"""Run persistence: seeded substreams, canonical JSONL, manifests, scene hashes.

Canonical JSONL is byte-reproducible: records serialize with sorted keys,
compact separators and Python's shortest-round-trip float repr, and exclude
wall-clock fields. Re-running a manifest therefore yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from (seed, name); stable across platforms."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def record_to_dict(rec) -> dict:
    """TrialRecord -> plain dict with deterministic content (wall_time excluded)."""
    d = {
        "step": rec.step_index,
        "phase": rec.phase,
        "pose": list(rec.pose.as_tuple()),
        "top_label": rec.top_label,
        "confidence": rec.confidence,
    }
    if rec.correct is not None:
        d["correct"] = rec.correct
    if rec.target_prob is not None:
        d["target_prob"] = rec.target_prob
    if rec.loss is not None:
        d["loss"] = rec.loss
    if rec.view is not None:
        d["view"] = rec.view
    return d


def write_jsonl(path: str, dicts) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dicts:
            fh.write(_canonical(d))
            fh.write("\n")


def read_jsonl(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def records_jsonl_bytes(records) -> bytes:
    return "".join(_canonical(record_to_dict(r)) + "\n" for r in records).encode("utf-8")


def scene_digest(scene) -> str:
    """Content hash of mesh + texture + scene settings; identical inputs, identical hash."""
    h = hashlib.sha256()
    mesh = scene.mesh
    for arr in (mesh.vertices, mesh.faces.astype(np.int64), mesh.uv_coords,
                mesh.normals, mesh.texture):
        h.update(np.ascontiguousarray(arr).tobytes())
    cfg = {
        "mesh_id": scene.mesh_id,
        "texture_ref": mesh.texture_ref,
        "lighting": [scene.lighting.directional_intensity, scene.lighting.ambient_intensity,
                     list(scene.lighting.light_direction),
                     list(scene.lighting.directional_color), list(scene.lighting.ambient_color)],
        "frustum": [scene.frustum.half_angle_v, scene.frustum.camera_z,
                    list(scene.frustum.depth_range)],
        "background_color": list(scene.background_color),
        "has_background_image": scene.background_image is not None,
        "image_size": list(scene.image_size),
        "texture_filter": scene.texture_filter,
        "true_class": scene.true_class,
    }
    if scene.background_image is not None:
        h.update(np.ascontiguousarray(scene.background_image).tobytes())
    h.update(_canonical(cfg).encode("utf-8"))
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    seed: int
    scene_hash: str
    backend: dict = field(default_factory=dict)
    created_unix: float = field(default_factory=time.time)
    outputs: dict = field(default_factory=dict)  # name -> relative path

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "scene_hash": self.scene_hash,
            "backend": self.backend,
            "created_unix": self.created_unix,
            "outputs": self.outputs,
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path: str) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return RunManifest(
            run_id=d["run_id"], command=d["command"], config=d["config"],
            seed=d["seed"], scene_hash=d["scene_hash"], backend=d.get("backend", {}),
            created_unix=d.get("created_unix", 0.0), outputs=d.get("outputs", {}),
        )


def new_run_id(seed: int, command: str, config: dict) -> str:
    """Deterministic run id from the reproducibility-relevant inputs."""
    payload = _canonical({"seed": seed, "command": command, "config": config})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
