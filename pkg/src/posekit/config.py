"""Config files (TOML or JSON) -> scene, backend and search objects.

Every key is validated against the known set so a typo fails loudly with the
list of valid keys. The backend endpoint can be overridden with the
POSEKIT_BACKEND environment variable ("tcp:host:port" or "stdio:cmd ...").
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

try:
    import tomllib  # python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .classifier import ExternalBackend, PoseRegion, SyntheticBackend
from .geometry import FrustumSpec, Mesh, load_obj
from .primitives import builtin_mesh
from .protocol import ProtocolClient
from .renderer import (
    DEFAULT_BACKGROUND,
    LightingConfig,
    SceneConfig,
    lighting_preset,
    load_background,
)
from .search import SearchConfig

BACKEND_ENV_VAR = "POSEKIT_BACKEND"

SCENE_KEYS = {"mesh", "image_size", "background", "background_image", "lighting",
              "true_class", "texture_filter", "frustum", "mesh_id"}
FRUSTUM_KEYS = {"half_angle_deg", "camera_z", "depth_range"}
LIGHTING_KEYS = {"preset", "directional_intensity", "ambient_intensity",
                 "light_direction", "directional_color", "ambient_color"}
BACKEND_KEYS = {"kind", "seed", "num_classes", "base_scale", "stats_grid",
                "class_bias", "regions", "endpoint", "class_table", "input_size"}
REGION_KEYS = {"class_index", "amplitude", "bounds"}
SEARCH_KEYS = {"mode", "budget", "target_class", "rng_seed", "fd_step", "learning_rate",
               "zrs_levels", "zrs_samples_per_level", "depth_range", "fd_step_per_param",
               "multiview_camera_z"}
TOP_KEYS = {"scene", "backend", "search"}


class ConfigError(ValueError):
    """Bad config content; message names the offending key and the valid ones."""


def _check_keys(section: dict, valid: set, where: str) -> None:
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; "
                          f"valid keys: {sorted(valid)}")


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        if path.endswith(".json"):
            cfg = json.load(fh)
        else:
            cfg = tomllib.load(fh)
    _check_keys(cfg, TOP_KEYS, path)
    return cfg


def build_lighting(spec) -> LightingConfig:
    if spec is None:
        return LightingConfig()
    if isinstance(spec, str):
        return lighting_preset(spec)
    _check_keys(spec, LIGHTING_KEYS, "scene.lighting")
    if "preset" in spec:
        base = lighting_preset(spec["preset"])
        spec = {k: v for k, v in spec.items() if k != "preset"}
        kwargs = {
            "directional_intensity": base.directional_intensity,
            "ambient_intensity": base.ambient_intensity,
            "light_direction": base.light_direction,
        }
    else:
        kwargs = {}
    for key in ("directional_intensity", "ambient_intensity"):
        if key in spec:
            kwargs[key] = float(spec[key])
    for key in ("light_direction", "directional_color", "ambient_color"):
        if key in spec:
            kwargs[key] = tuple(float(v) for v in spec[key])
    return LightingConfig(**kwargs)


def build_frustum(spec) -> FrustumSpec:
    if spec is None:
        return FrustumSpec()
    _check_keys(spec, FRUSTUM_KEYS, "scene.frustum")
    kwargs = {}
    if "half_angle_deg" in spec:
        kwargs["half_angle_v"] = math.radians(float(spec["half_angle_deg"]))
    if "camera_z" in spec:
        kwargs["camera_z"] = float(spec["camera_z"])
    if "depth_range" in spec:
        lo, hi = spec["depth_range"]
        kwargs["depth_range"] = (float(lo), float(hi))
    return FrustumSpec(**kwargs)


def load_mesh(ref: str) -> tuple[Mesh, str]:
    if ref.startswith("builtin:"):
        return builtin_mesh(ref.split(":", 1)[1]), ref
    if not os.path.exists(ref):
        raise FileNotFoundError(f"mesh file not found: {ref}")
    return load_obj(ref), ref


def build_scene(section: dict) -> SceneConfig:
    _check_keys(section, SCENE_KEYS, "scene")
    mesh_ref = section.get("mesh", "builtin:cube")
    mesh, mesh_id = load_mesh(mesh_ref)
    image_size = tuple(int(v) for v in section.get("image_size", (299, 299)))
    background_image = None
    if "background_image" in section:
        background_image = load_background(section["background_image"], image_size)
    background = tuple(float(v) for v in section.get("background", DEFAULT_BACKGROUND))
    return SceneConfig(
        mesh=mesh,
        mesh_id=section.get("mesh_id", mesh_id),
        lighting=build_lighting(section.get("lighting")),
        frustum=build_frustum(section.get("frustum")),
        background_color=background,
        background_image=background_image,
        image_size=image_size,
        texture_filter=section.get("texture_filter", "nearest"),
        true_class=section.get("true_class"),
    )


def build_regions(entries) -> tuple[PoseRegion, ...]:
    regions = []
    for entry in entries or ():
        _check_keys(entry, REGION_KEYS, "backend.regions[]")
        bounds = {name: tuple(float(v) for v in triple)
                  for name, triple in entry.get("bounds", {}).items()}
        regions.append(PoseRegion(class_index=int(entry["class_index"]),
                                  amplitude=float(entry["amplitude"]), bounds=bounds))
    return tuple(regions)


def parse_endpoint(endpoint: str):
    if endpoint.startswith("tcp:"):
        host, port = endpoint[4:].rsplit(":", 1)
        return ProtocolClient.connect_tcp(host, int(port))
    if endpoint.startswith("stdio:"):
        return ProtocolClient.spawn_stdio(endpoint[6:].split())
    raise ConfigError(f"endpoint must start with tcp: or stdio:, got {endpoint!r}")


def build_backend(section: dict, frustum: FrustumSpec):
    """Returns (backend, descriptor_dict_for_manifest)."""
    _check_keys(section, BACKEND_KEYS, "backend")
    endpoint = os.environ.get(BACKEND_ENV_VAR) or section.get("endpoint")
    kind = section.get("kind", "synthetic")
    if os.environ.get(BACKEND_ENV_VAR):
        kind = "external"
    if kind == "external":
        if not endpoint:
            raise ConfigError("external backend needs an endpoint "
                              f"(or the {BACKEND_ENV_VAR} environment variable)")
        client = parse_endpoint(endpoint)
        input_size = section.get("input_size")
        backend = ExternalBackend(client, tuple(input_size) if input_size else None)
        descriptor = {"kind": "external", "endpoint": endpoint,
                      "handshake": client.handshake.to_message()}
        return backend, descriptor
    if kind != "synthetic":
        raise ConfigError(f"backend.kind must be synthetic or external, got {kind!r}")
    class_bias = {int(k): float(v) for k, v in section.get("class_bias", {}).items()}
    backend = SyntheticBackend(
        seed=int(section.get("seed", 0)),
        num_classes=int(section.get("num_classes", 16)),
        frustum=frustum,
        regions=build_regions(section.get("regions")),
        base_scale=float(section.get("base_scale", 0.5)),
        class_bias=class_bias,
        stats_grid=int(section.get("stats_grid", 4)),
        class_table=section.get("class_table"),
    )
    descriptor = {"kind": "synthetic", "seed": backend.seed,
                  "num_classes": backend.num_classes}
    return backend, descriptor


def build_search(section: dict, **overrides) -> SearchConfig:
    _check_keys(section, SEARCH_KEYS, "search")
    merged = {k: v for k, v in section.items() if k != "multiview_camera_z"}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "depth_range" in merged and merged["depth_range"] is not None:
        merged["depth_range"] = tuple(float(v) for v in merged["depth_range"])
    if "fd_step_per_param" in merged and merged["fd_step_per_param"] is not None:
        merged["fd_step_per_param"] = tuple(float(v) for v in merged["fd_step_per_param"])
    return SearchConfig(**merged)


def multiview_scenes(scene: SceneConfig, section: dict) -> list[SceneConfig]:
    """Camera variants for multi-view FDG: one scene per configured camera_z."""
    from dataclasses import replace

    zs = section.get("multiview_camera_z")
    if not zs:
        base = scene.frustum.camera_z
        zs = [base, base + 1.0, base - 1.0]
    scenes = []
    for i, z in enumerate(zs):
        spec = FrustumSpec(half_angle_v=scene.frustum.half_angle_v, camera_z=float(z),
                           depth_range=scene.frustum.depth_range)
        scenes.append(replace(scene, frustum=spec, mesh_id=f"{scene.mesh_id}#view{i}"))
    return scenes
