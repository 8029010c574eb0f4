"""Rendering of masks and scene overlays to 8-bit PGM (optionally PNG).

PGM is the bit-exact reference format; byte values are round(255 * v) with
half rounded up. Overlays alpha-blend each splatted mask over the scene in
a fixed gray tint, later layouts over earlier ones; pixels with zero mask
stay bit-identical to the rendered scene.
"""

from __future__ import annotations

import numpy as np

from .data import write_pgm
from .geometry import Layout, TemplateSpec, splat_values

__all__ = ["to_bytes", "render_mask", "compose_overlay", "write_png"]


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0,1] grid values to uint8 with round-half-up."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(255.0 * v + 0.5), 0, 255).astype(np.uint8)


def render_mask(mask, path) -> None:
    """Write a density grid (LayoutMask or raw array) as PGM."""
    values = getattr(mask, "values", mask)
    write_pgm(path, to_bytes(values))


def compose_overlay(scene_grid: np.ndarray, layouts, spec: TemplateSpec = TemplateSpec(),
                    tint: float = 1.0) -> np.ndarray:
    """Blend splatted layouts over the object grid; returns the float grid."""
    out = np.asarray(scene_grid, dtype=np.float64).copy()
    h, w = out.shape
    for layout in layouts:
        if isinstance(layout, Layout):
            m = splat_values(layout, w, h, spec)
        else:
            m = np.asarray(layout, dtype=np.float64)
            if m.shape != out.shape:
                raise ValueError(f"mask shape {m.shape} does not match scene {out.shape}")
        out = (1.0 - m) * out + m * tint
    return out


def write_png(grid: np.ndarray, path) -> None:
    """Optional PNG companion; requires pillow."""
    try:
        from PIL import Image
    except ImportError as exc:
        raise RuntimeError("PNG output requires pillow (pip install pillow)") from exc
    Image.fromarray(to_bytes(grid), mode="L").save(path)
