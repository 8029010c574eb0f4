"""Guided-generation demos: heatmap-driven placement, scene-consistent hand
sizes across crops, and layout-interpolation strips.

All three lean on the same mechanism: constrained coordinates are pinned by
guidance during sampling, so drawn contact points become exact palm
locations and per-crop relative sizes multiply back to one shared absolute
hand size.
"""

from __future__ import annotations

import math

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams, eps_predictor
from .diffusion import GuidanceSpec, NoiseSchedule, sample_layout
from .geometry import Layout, TemplateSpec, interpolate_layouts
from .render import compose_overlay

__all__ = [
    "InfeasibleSizeError",
    "draw_heatmap_points",
    "heatmap_guided_sample",
    "scene_consistent_sample",
    "interpolate_demo",
]


class InfeasibleSizeError(ValueError):
    """A requested relative hand size falls outside the usable range."""


def draw_heatmap_points(heatmap: np.ndarray, n: int, rng) -> np.ndarray:
    """Draw n pixel-center locations by inverse CDF over the flattened grid."""
    hm = np.asarray(heatmap, dtype=np.float64)
    total = hm.sum()
    if not np.isfinite(total) or total <= 0.0 or hm.min() < 0.0:
        raise ValueError("heatmap must be non-negative with positive mass")
    size_y, size_x = hm.shape
    cdf = np.cumsum(hm.ravel())
    u = rng.random(n) * cdf[-1]
    flat = np.searchsorted(cdf, u, side="right")
    flat = np.minimum(flat, hm.size - 1)
    ii, jj = np.unravel_index(flat, hm.shape)
    xs = (2.0 * jj + 1.0) / size_x - 1.0
    ys = (2.0 * ii + 1.0) / size_y - 1.0
    return np.stack([xs, ys], axis=1)


def heatmap_guided_sample(params: DenoiserParams, net_cfg: DenoiserConfig, scene, heatmap,
                          n: int, rng, spec: TemplateSpec = TemplateSpec(),
                          splat_condition: bool = True, sched: NoiseSchedule = None,
                          sampler: str = "ddim", eta: float = 0.0):
    """Sample n layouts whose palm locations are drawn from the heatmap.

    Returns (layouts, points); each layout's (x, y) is pinned to its drawn
    point by guidance.
    """
    points = draw_heatmap_points(heatmap, n, rng)
    eps_fn = eps_predictor(params, net_cfg, scene.object_grid, spec, splat_condition)
    layouts = []
    for px, py in points:
        guidance = GuidanceSpec.from_fixed({"x": px, "y": py})
        layouts.append(sample_layout(eps_fn, sched, rng, sampler=sampler, eta=eta, guidance=guidance))
    return layouts, points


def scene_consistent_sample(params: DenoiserParams, net_cfg: DenoiserConfig, crops,
                            shared_hand_size: float, rng, spec: TemplateSpec = TemplateSpec(),
                            splat_condition: bool = True, sched: NoiseSchedule = None,
                            sampler: str = "ddim", eta: float = 0.0):
    """One layout per (scene, crop_width) pair with a shared absolute hand size.

    The relative palm scale in crop i is s_i = shared_hand_size / crop_width_i,
    pinned via guidance on a = sqrt(s_i); reported absolute sizes are
    s_i * crop_width_i.
    """
    rel_sizes = []
    for _, crop_width in crops:
        if crop_width <= 0.0:
            raise ValueError("crop widths must be positive")
        s = shared_hand_size / crop_width
        if not 0.0 < s <= 1.5:
            raise InfeasibleSizeError(
                f"relative size {s:.4g} for crop width {crop_width:.4g} outside (0, 1.5]"
            )
        rel_sizes.append(s)

    layouts, rows = [], []
    for (scene, crop_width), s in zip(crops, rel_sizes):
        eps_fn = eps_predictor(params, net_cfg, scene.object_grid, spec, splat_condition)
        guidance = GuidanceSpec.from_fixed({"a": math.sqrt(s)})
        layout = sample_layout(eps_fn, sched, rng, sampler=sampler, eta=eta, guidance=guidance)
        layouts.append(layout)
        rows.append({
            "crop_width": crop_width,
            "relative_size": layout.a ** 2,
            "absolute_size": layout.a ** 2 * crop_width,
        })
    return layouts, rows


def interpolate_demo(l_a: Layout, l_b: Layout, k_steps: int, scene_grid: np.ndarray,
                     spec: TemplateSpec = TemplateSpec(), tint: float = 1.0):
    """k_steps+1 overlay frames walking from l_a to l_b; endpoints exact."""
    if k_steps < 1:
        raise ValueError("need at least one interpolation step")
    frames = []
    for i in range(k_steps + 1):
        layout = interpolate_layouts(l_a, l_b, i / k_steps)
        frames.append(compose_overlay(scene_grid, [layout], spec, tint=tint))
    return frames
