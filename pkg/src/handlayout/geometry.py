"""Hand-layout parameterization and differentiable 2D splatting.

A layout l = (a, x, y, b1, b2) describes a hand relative to an object crop:
palm scale s = a^2, palm center (x, y) in normalized image coordinates
([-1, 1]^2, y down), and an un-normalized approach direction (b1, b2).
The layout induces a similarity transform that warps a canonical lollipop
template (Gaussian palm disk + Gaussian-profiled forearm strip trailing
along the negative approach axis) into the image, producing a density mask
in [0, 1].

Splatting is done by inverse warping: each pixel center is pulled back to
the canonical frame and the template is evaluated there. This is exact,
hole-free and analytically differentiable; `splat_jacobian` returns the
per-pixel gradient with respect to all five layout parameters.

Two representations induce the same mask: (a, ...) vs (-a, ...), and
(b1, b2) vs (c*b1, c*b2) for c > 0. Losses defined on the splatted mask are
invariant to both, which is the point of training in mask space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels

__all__ = [
    "Layout",
    "SimilarityTransform",
    "TemplateSpec",
    "LayoutMask",
    "DegenerateDirectionError",
    "AmbiguousInterpolationError",
    "normalize_approach",
    "layout_to_transform",
    "template_density",
    "splat",
    "splat_values",
    "splat_jacobian",
    "blend_condition",
    "interpolate_layouts",
]


class DegenerateDirectionError(ValueError):
    """Raised when the approach direction (b1, b2) has no usable direction."""


class AmbiguousInterpolationError(ValueError):
    """Raised when interpolating between antipodal approach directions."""


@dataclass(frozen=True)
class Layout:
    """The 5-parameter hand proxy. Palm scale is a^2; (x, y) is the palm center."""

    a: float
    x: float
    y: float
    b1: float
    b2: float

    def vector(self) -> np.ndarray:
        return np.array([self.a, self.x, self.y, self.b1, self.b2], dtype=np.float64)

    @classmethod
    def from_vector(cls, vec) -> "Layout":
        a, x, y, b1, b2 = (float(v) for v in np.asarray(vec, dtype=np.float64))
        return cls(a, x, y, b1, b2)

    def canonical(self) -> "Layout":
        """Representative of the equivalence class: a > 0, unit direction."""
        bh1, bh2 = normalize_approach(self.b1, self.b2)
        return Layout(abs(self.a), self.x, self.y, bh1, bh2)

    def validate(self) -> None:
        if self.a == 0.0:
            raise ValueError("layout scale root a must be nonzero")
        if self.b1 == 0.0 and self.b2 == 0.0:
            raise DegenerateDirectionError("approach direction is the zero vector")
        if not all(math.isfinite(v) for v in (self.a, self.x, self.y, self.b1, self.b2)):
            raise ValueError("layout parameters must be finite")

    def to_line(self) -> str:
        """Serialize as `a x y b1 b2` with 12 significant digits."""
        return " ".join(f"{v:.12g}" for v in (self.a, self.x, self.y, self.b1, self.b2))

    @classmethod
    def from_line(cls, line: str) -> "Layout":
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"expected 5 scalars in layout line, got {len(parts)}")
        return cls(*(float(p) for p in parts))


@dataclass(frozen=True)
class SimilarityTransform:
    """Homogeneous 3x3 matrix with upper-left block s*R and translation (x, y)."""

    matrix: np.ndarray

    @property
    def scale(self) -> float:
        return float(math.sqrt(max(np.linalg.det(self.matrix[:2, :2]), 0.0)))

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:2, 2].copy()

    def inverse(self) -> "SimilarityTransform":
        m = self.matrix
        s2 = m[0, 0] * m[0, 0] + m[1, 0] * m[1, 0]
        if s2 == 0.0:
            raise ValueError("transform is not invertible (zero scale)")
        rt = np.array([[m[0, 0], m[1, 0]], [m[0, 1], m[1, 1]]]) / s2
        inv = np.eye(3)
        inv[:2, :2] = rt
        inv[:2, 2] = -rt @ m[:2, 2]
        return SimilarityTransform(inv)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:2, :2].T + self.matrix[:2, 2]


@dataclass(frozen=True)
class TemplateSpec:
    """Canonical lollipop template.

    The palm is an unnormalized isotropic Gaussian (std `palm_sigma`, peak 1)
    at the origin. The forearm is a strip along the negative approach axis:
    a 1D Gaussian profile across the axis (std `forearm_sigma`) restricted to
    axis positions in [-forearm_length, 0]. The strip ends are smoothed with
    C^3 ramps of width `taper` so the mask stays smooth in the layout
    parameters; hard ends would break the analytic/finite-difference
    gradient agreement at boundary pixels. The default length is chosen so
    the strip runs out of the frame at working palm scales (the forearm
    reaches the image border) and its far ramp never lands on a pixel.
    Palm and forearm are combined with the soft union p + f - p*f, which
    preserves the [0, 1] range and the peak of 1 at the palm center.
    """

    palm_sigma: float = 1.0
    width_ratio: float = 0.8
    forearm_sigma: float | None = None
    forearm_length: float = 28.0
    taper: float = 1.0

    def __post_init__(self):
        if self.forearm_sigma is None:
            object.__setattr__(self, "forearm_sigma", 2.0 * self.width_ratio * self.palm_sigma)
        if self.palm_sigma <= 0 or self.forearm_sigma <= 0 or self.forearm_length <= 0:
            raise ValueError("template scales must be positive")
        if not 0.0 < self.width_ratio <= 1.0:
            raise ValueError("width_ratio must be in (0, 1]")
        if not 0.0 < self.taper <= self.forearm_length / 2.0:
            raise ValueError("taper must be in (0, forearm_length/2]")


@dataclass(frozen=True)
class LayoutMask:
    """A W x H grid of splat densities in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError("mask values must be a 2D grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("mask contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def normalize_approach(b1: float, b2: float):
    """Unit vector along (b1, b2). Exact under scaling by powers of two."""
    if b1 == 0.0 and b2 == 0.0:
        raise DegenerateDirectionError("cannot normalize the zero direction")
    n = math.sqrt(b1 * b1 + b2 * b2)
    if not math.isfinite(n) or n == 0.0:
        raise DegenerateDirectionError(f"direction norm {n} is unusable")
    return b1 / n, b2 / n


def layout_to_transform(l: Layout) -> SimilarityTransform:
    """Similarity transform [[s*bh1, -s*bh2, x], [s*bh2, s*bh1, y], [0, 0, 1]], s = a^2."""
    l.validate()
    bh1, bh2 = normalize_approach(l.b1, l.b2)
    s = l.a * l.a
    m = np.array(
        [
            [s * bh1, -s * bh2, l.x],
            [s * bh2, s * bh1, l.y],
            [0.0, 0.0, 1.0],
        ]
    )
    return SimilarityTransform(m)


def _smoothstep(z: np.ndarray) -> np.ndarray:
    # C^3 septic: derivatives up to third order vanish at both ends, so
    # finite differences across the ramp junctions stay clean
    z = np.clip(z, 0.0, 1.0)
    return z * z * z * z * (35.0 + z * (-84.0 + z * (70.0 - 20.0 * z)))


def _strip_window(r: np.ndarray, length: float, taper: float) -> np.ndarray:
    """Compactly supported along-axis profile: 1 on [taper, length-taper], C^2 ramps."""
    rise = _smoothstep(r / taper)
    fall = _smoothstep((length - r) / taper)
    return np.where((r > 0.0) & (r < length), np.minimum(rise, fall), 0.0)


def template_density(q, spec: TemplateSpec = TemplateSpec()):
    """Density of the canonical template at canonical point(s) q = (u, v).

    Accepts a single 2-vector or an (..., 2) array; returns matching shape.
    """
    q = np.asarray(q, dtype=np.float64)
    u, v = q[..., 0], q[..., 1]
    palm = np.exp(-(u * u + v * v) / (2.0 * spec.palm_sigma**2))
    across = np.exp(-(v * v) / (2.0 * spec.forearm_sigma**2))
    forearm = _strip_window(-u, spec.forearm_length, spec.taper) * across
    out = palm + forearm - palm * forearm
    return out if out.ndim else float(out)


def _splat_inputs(l: Layout, width: int, height: int, spec: TemplateSpec):
    if width < 8 or height < 8:
        raise ValueError("splat grid must be at least 8x8")
    l.validate()
    bh1, bh2 = normalize_approach(l.b1, l.b2)
    s = l.a * l.a
    if s == 0.0:
        raise ValueError("layout induces a non-invertible transform (zero scale)")
    return s, bh1, bh2


def splat_values(l: Layout, width: int, height: int, spec: TemplateSpec = TemplateSpec()) -> np.ndarray:
    """Raw (height, width) density grid for `l`; see `splat`."""
    s, bh1, bh2 = _splat_inputs(l, width, height, spec)
    return kernels.splat_grid(
        s, l.x, l.y, bh1, bh2, width, height,
        spec.palm_sigma, spec.forearm_sigma, spec.forearm_length, spec.taper,
    )


def splat(l: Layout, width: int, height: int, spec: TemplateSpec = TemplateSpec()) -> LayoutMask:
    """Render the layout into a width x height mask by inverse warping.

    Pixel centers are mapped to normalized coordinates ((2j+1)/W - 1,
    (2i+1)/H - 1) and pulled back through the inverse similarity transform.
    """
    return LayoutMask(splat_values(l, width, height, spec))


def splat_jacobian(l: Layout, width: int, height: int, spec: TemplateSpec = TemplateSpec()) -> np.ndarray:
    """Analytic per-pixel gradient of the splat, shape (height, width, 5).

    Last axis is the derivative with respect to (a, x, y, b1, b2).
    """
    s, bh1, bh2 = _splat_inputs(l, width, height, spec)
    n = math.sqrt(l.b1 * l.b1 + l.b2 * l.b2)
    return kernels.splat_jacobian_grid(
        l.a, s, l.x, l.y, bh1, bh2, n, width, height,
        spec.palm_sigma, spec.forearm_sigma, spec.forearm_length, spec.taper,
    )


def blend_condition(mask: LayoutMask | np.ndarray, object_grid: np.ndarray) -> np.ndarray:
    """Stack (object, mask, blend) planes; blend = (1 - m) * object + m."""
    m = mask.values if isinstance(mask, LayoutMask) else np.asarray(mask, dtype=np.float64)
    obj = np.asarray(object_grid, dtype=np.float64)
    if m.shape != obj.shape:
        raise ValueError(f"mask shape {m.shape} does not match object grid {obj.shape}")
    blend = (1.0 - m) * obj + m
    return np.stack([obj, m, blend])


def interpolate_layouts(l_a: Layout, l_b: Layout, k: float) -> Layout:
    """Interpolate two layouts: linear center, slerp direction, geometric scale.

    Endpoints are returned as-is (up to re-signing a positive) at k = 0 and
    k = 1. Antipodal directions have no unique path and raise.
    """
    l_a.validate()
    l_b.validate()
    if not 0.0 <= k <= 1.0:
        raise ValueError("interpolation parameter k must be in [0, 1]")
    if k == 0.0:
        return replace(l_a, a=abs(l_a.a))
    if k == 1.0:
        return replace(l_b, a=abs(l_b.a))

    da = np.array(normalize_approach(l_a.b1, l_a.b2))
    db = np.array(normalize_approach(l_b.b1, l_b.b2))
    dot = float(np.clip(da @ db, -1.0, 1.0))
    if dot <= -1.0 + 1e-12:
        raise AmbiguousInterpolationError("antipodal approach directions")
    omega = math.acos(dot)
    if omega < 1e-9:
        d = (1.0 - k) * da + k * db
        d /= np.linalg.norm(d)
    else:
        d = (math.sin((1.0 - k) * omega) * da + math.sin(k * omega) * db) / math.sin(omega)

    a = math.exp((1.0 - k) * math.log(abs(l_a.a)) + k * math.log(abs(l_b.a)))
    x = (1.0 - k) * l_a.x + k * l_b.x
    y = (1.0 - k) * l_a.y + k * l_b.y
    return Layout(a, x, y, float(d[0]), float(d[1]))
