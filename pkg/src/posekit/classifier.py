"""Black-box classifier abstraction and loss functions.

Backends map a render to a probability vector. The synthetic backend is a
deterministic, analytically controllable oracle: base logits come from a
seeded linear projection of downsampled pixel statistics, and "planted
regions" add a cosine-tapered bump to one class's logit inside a box in pose
space. Region membership volume is an exact product of per-dimension
fractions, which is what the calibration tests lean on.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import FrustumSpec, PoseParams, circular_distance, frustum_bound
from .renderer import RenderOutput

CROSS_ENTROPY_EPS = 1e-12

REGION_PARAMS = ("x_norm", "y_norm", "z_delta", "theta_y", "theta_p", "theta_r")
_ANGLE_REGION_PARAMS = ("theta_y", "theta_p", "theta_r")


class CapabilityError(RuntimeError):
    """Backend does not advertise the requested capability."""


@dataclass(frozen=True)
class ClassifierResponse:
    probs: np.ndarray  # (K,) floats summing to 1
    top_label: int
    embedding: np.ndarray | None = None
    latency: float = 0.0

    @property
    def confidence(self) -> float:
        return float(self.probs[self.top_label])

    @staticmethod
    def from_probs(probs: np.ndarray, embedding: np.ndarray | None = None,
                   latency: float = 0.0) -> "ClassifierResponse":
        probs = np.asarray(probs, dtype=np.float64)
        return ClassifierResponse(probs, int(np.argmax(probs)), embedding, latency)


def cross_entropy(resp: ClassifierResponse | np.ndarray, target: int) -> float:
    """Targeted loss -log(p_target + eps); the quantity the attacks minimize."""
    probs = resp.probs if isinstance(resp, ClassifierResponse) else np.asarray(resp)
    if not (0 <= target < len(probs)):
        raise ValueError(f"target {target} out of range for {len(probs)} classes")
    return float(-math.log(float(probs[target]) + CROSS_ENTROPY_EPS))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def resize_bilinear(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centered separable bilinear resize of an HxWxC float image."""
    h, w = size
    ih, iw = pixels.shape[:2]
    if (ih, iw) == (h, w):
        return pixels
    ry = ih / h
    rx = iw / w
    sy = np.clip((np.arange(h) + 0.5) * ry - 0.5, 0.0, ih - 1.0)
    sx = np.clip((np.arange(w) + 0.5) * rx - 0.5, 0.0, iw - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, ih - 1)
    x1 = np.minimum(x0 + 1, iw - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    top = pixels[y0][:, x0] * (1 - fx) + pixels[y0][:, x1] * fx
    bot = pixels[y1][:, x0] * (1 - fx) + pixels[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(frozen=True)
class PoseRegion:
    """A box in pose space where a class's logit is raised.

    Each constrained parameter maps to (center, half_width, taper_width).
    Translations x/y are specified in frustum-normalized units x/s(z) so the
    region's probability mass under random search is an exact product of
    per-dimension fractions. The bump is the full amplitude inside the box
    and falls off as 0.5*(1+cos(pi*rho)) across the taper band.
    """

    class_index: int
    amplitude: float
    bounds: dict = field(default_factory=dict)  # name -> (center, half_width, taper_width)

    def __post_init__(self):
        for name, (center, hw, taper) in self.bounds.items():
            if name not in REGION_PARAMS:
                raise ValueError(f"unknown region parameter {name!r}; have {REGION_PARAMS}")
            if hw < 0 or taper <= 0:
                raise ValueError(f"{name}: half_width must be >= 0 and taper_width > 0")

    def _deltas(self, pose: PoseParams, spec: FrustumSpec):
        for name, (center, hw, taper) in self.bounds.items():
            if name in _ANGLE_REGION_PARAMS:
                delta = circular_distance(getattr(pose, name), center)
            elif name == "z_delta":
                delta = abs(pose.z_delta - center)
            else:  # x_norm / y_norm
                s = frustum_bound(spec, min(max(pose.z_delta, spec.depth_range[0]),
                                            spec.depth_range[1]))
                raw = pose.x_delta if name == "x_norm" else pose.y_delta
                if s > 0.0:
                    delta = abs(raw / s - center)
                else:  # at the camera plane every nonzero offset is out of frame
                    delta = 0.0 if raw == 0.0 and center == 0.0 else math.inf
            yield delta, hw, taper

    def contains(self, pose: PoseParams, spec: FrustumSpec) -> bool:
        """Inside the full-amplitude box (the volume the analytic fraction describes)."""
        return all(delta <= hw for delta, hw, _ in self._deltas(pose, spec))

    def bump(self, pose: PoseParams, spec: FrustumSpec) -> float:
        # radial cosine taper over the scaled excess beyond the box: full
        # amplitude inside, 0.5*(1+cos(pi*rho)) across the band, zero at
        # rho >= 1; the gradient has a component along every constrained
        # dimension at once
        sq = 0.0
        for delta, hw, taper in self._deltas(pose, spec):
            excess = (delta - hw) / taper
            if excess > 0.0:
                sq += excess * excess
                if sq >= 1.0:
                    return 0.0
        if sq == 0.0:
            return self.amplitude
        return self.amplitude * 0.5 * (1.0 + math.cos(math.pi * math.sqrt(sq)))

    def volume_fraction(self, spec: FrustumSpec) -> float:
        """Probability a random-search pose lands inside the box."""
        frac = 1.0
        lo, hi = spec.depth_range
        for name, (center, hw, _) in self.bounds.items():
            if name in _ANGLE_REGION_PARAMS:
                frac *= min(2.0 * hw, 2.0 * math.pi) / (2.0 * math.pi)
            elif name == "z_delta":
                width = min(center + hw, hi) - max(center - hw, lo)
                frac *= max(width, 0.0) / (hi - lo) if hi > lo else float(lo == center)
            else:
                width = min(center + hw, 1.0) - max(center - hw, -1.0)
                frac *= max(width, 0.0) / 2.0
        return frac


class SyntheticBackend:
    """Deterministic stand-in for an external model; smooth in pose and pixels."""

    def __init__(self, seed: int, num_classes: int, frustum: FrustumSpec,
                 regions: tuple[PoseRegion, ...] = (), base_scale: float = 0.5,
                 class_bias: dict[int, float] | None = None, stats_grid: int = 4,
                 class_table: list[str] | None = None):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.seed = seed
        self.num_classes = num_classes
        self.frustum = frustum
        self.regions = tuple(regions)
        self.base_scale = base_scale
        self.stats_grid = stats_grid
        self.class_table = class_table or [f"class_{i}" for i in range(num_classes)]
        self.supports_embedding = True
        nfeat = 3 * stats_grid * stats_grid
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        self._w = rng.normal(0.0, 1.0 / math.sqrt(nfeat), size=(num_classes, nfeat))
        self._b = rng.normal(0.0, 1.0, size=num_classes)
        self._bias = np.zeros(num_classes)
        for idx, v in (class_bias or {}).items():
            self._bias[idx] = v

    def _stats(self, pixels: np.ndarray) -> np.ndarray:
        g = self.stats_grid
        h, w = pixels.shape[:2]
        rows = (np.arange(g) * h) // g
        cols = (np.arange(g) * w) // g
        sums = np.add.reduceat(np.add.reduceat(pixels, rows, axis=0), cols, axis=1)
        rc = np.diff(np.append(rows, h)).astype(np.float64)
        cc = np.diff(np.append(cols, w)).astype(np.float64)
        return (sums / (rc[:, None, None] * cc[None, :, None])).ravel()

    def logits(self, image: RenderOutput) -> np.ndarray:
        x = self._stats(image.pixels)
        logits = self.base_scale * (self._w @ x + self._b) + self._bias
        pose = image.meta.get("pose") if image.meta else None
        if pose is not None:
            for region in self.regions:
                b = region.bump(pose, self.frustum)
                if b != 0.0:
                    logits[region.class_index] += b
        return logits

    def classify(self, image: RenderOutput) -> ClassifierResponse:
        return ClassifierResponse.from_probs(softmax(self.logits(image)))

    def embed(self, image: RenderOutput) -> np.ndarray:
        return self._stats(image.pixels)


class ExternalBackend:
    """Protocol-v1 client exposed through the same interface as SyntheticBackend."""

    def __init__(self, client, input_size: tuple[int, int] | None = None):
        self.client = client
        self.input_size = input_size
        hs = client.handshake
        self.num_classes = hs.num_classes
        self.class_table = list(hs.labels)
        self.supports_embedding = hs.supports_embedding

    def _wire_pixels(self, image: RenderOutput) -> np.ndarray:
        pixels = image.pixels
        if self.input_size is not None and pixels.shape[:2] != tuple(self.input_size):
            pixels = resize_bilinear(pixels, self.input_size)
        return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)

    def classify(self, image: RenderOutput) -> ClassifierResponse:
        t0 = time.monotonic()
        probs = self.client.classify(self._wire_pixels(image))
        return ClassifierResponse.from_probs(probs, latency=time.monotonic() - t0)

    def embed(self, image: RenderOutput) -> np.ndarray:
        if not self.supports_embedding:
            raise CapabilityError("backend does not support embeddings")
        return self.client.embed(self._wire_pixels(image))
