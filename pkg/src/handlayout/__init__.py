"""handlayout: diffusion over 5-parameter hand-over-object layouts.

A small conditional denoising-diffusion model generates hand layouts
(size, location, approach direction) for procedurally generated object
scenes. The layout is differentiably splatted into a 2D mask, trained with
a combined parameter/mask loss, and sampled with optional test-time
constraints on any subset of the five parameters.
"""

from .geometry import (
    AmbiguousInterpolationError,
    DegenerateDirectionError,
    Layout,
    LayoutMask,
    SimilarityTransform,
    TemplateSpec,
    blend_condition,
    interpolate_layouts,
    layout_to_transform,
    normalize_approach,
    splat,
    splat_jacobian,
    template_density,
)
from .kernels import backend_name

__version__ = "0.1.0"
