"""Noise schedules, forward corruption, reverse samplers and test-time guidance.

Coefficient convention: alpha_bar[t] grows from 0 at t=0 to ~1 at t=T and
multiplies the NOISE, i.e.

    x_t = sqrt(1 - alpha_bar[t]) * x0 + sqrt(alpha_bar[t]) * eps.

This is the transpose of the common convention (where alpha_bar decays and
scales the signal); to keep formulas unambiguous everything downstream uses
`signal_coef(t) = sqrt(1 - alpha_bar[t])` and
`noise_coef(t) = sqrt(alpha_bar[t])` instead of raw alphas.

Both reverse samplers share one step form

    x_{t-1} = signal_coef(t-1) * x0_hat + sqrt(noise_coef(t-1)^2 - sigma^2) * eps_hat + sigma * z

with sigma = eta * posterior_sigma(t) for DDIM and sigma = posterior_sigma(t)
for the ancestral DDPM step (at which the form equals the standard Gaussian
posterior mean plus posterior noise). The final step is noiseless.

Guidance hijacks constrained coordinates after each reverse step, replacing
them with the target freshly noised to the current level; at t=0 the noise
coefficient is exactly zero, so constraints are met exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import DegenerateDirectionError, Layout

__all__ = [
    "NoiseSchedule",
    "GuidanceSpec",
    "build_schedule",
    "schedule_table",
    "forward_noise",
    "predict_x0",
    "ddpm_step",
    "ddim_step",
    "apply_guidance",
    "sample_layout",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficient tables; alpha_bar has T+1 entries for t = 0..T."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.ndim != 1 or ab.shape[0] < 2:
            raise ValueError("alpha_bar must be a 1D array with at least 2 entries")
        if ab[0] != 0.0:
            raise ValueError("alpha_bar[0] must be exactly 0")
        if ab[-1] < 1.0 - 1e-4:
            raise ValueError("alpha_bar[T] must reach at least 1 - 1e-4")
        if np.any(np.diff(ab) <= 0.0):
            raise ValueError("alpha_bar must be strictly increasing")

    @property
    def T(self) -> int:
        return self.alpha_bar.shape[0] - 1

    def signal_coef(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[t])

    def noise_coef(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[t])

    def posterior_sigma(self, t: int) -> float:
        """Std of the forward-process posterior q(x_{t-1} | x_t, x0); 0 at t=1."""
        self._check_t(t, low=1)
        ab_t = self.alpha_bar[t]
        ab_p = self.alpha_bar[t - 1]
        var = ab_p * (ab_t - ab_p) / (ab_t * (1.0 - ab_p))
        return math.sqrt(max(var, 0.0))

    def _check_t(self, t: int, low: int = 0) -> None:
        if not low <= t <= self.T:
            raise ValueError(f"step {t} outside [{low}, {self.T}]")


def build_schedule(T: int, family: str = "linear") -> NoiseSchedule:
    """Build a T-step schedule. Linear: alpha_bar[t] = (t/T) * (1 - 1e-5)."""
    if T < 10:
        raise ValueError("schedule needs at least 10 steps")
    top = 1.0 - 1e-5
    if family == "linear":
        ab = np.arange(T + 1) / T * top
    elif family == "cosine":
        # standard-convention squared-cosine curve, mapped into this
        # convention and clipped away from 1 so late steps stay invertible
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
        ab = 1.0 - f / f[0]
        ab[0] = 0.0
        ab = np.minimum(ab, top)
        for t in range(T - 1, 0, -1):  # keep strictly increasing after the clip
            ab[t] = min(ab[t], ab[t + 1] - 1e-12)
    else:
        raise ValueError(f"unknown schedule family {family!r}")
    return NoiseSchedule(ab)


def schedule_table(sched: NoiseSchedule) -> str:
    """Audit dump, one `t alpha_bar` line per step."""
    return "\n".join(f"{t} {sched.alpha_bar[t]:.17g}" for t in range(sched.T + 1)) + "\n"


def forward_noise(x0, t: int, eps, sched: NoiseSchedule):
    """Corrupt x0 to level t: signal_coef(t) * x0 + noise_coef(t) * eps."""
    sched._check_t(t)
    return sched.signal_coef(t) * np.asarray(x0, dtype=np.float64) + sched.noise_coef(t) * np.asarray(eps, dtype=np.float64)


def predict_x0(x_t, t: int, eps_hat, sched: NoiseSchedule):
    """Invert the corruption: x0_hat = x_t / signal_coef(t) - (noise_coef(t)/signal_coef(t)) * eps_hat."""
    sched._check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    if t == 0:
        return x_t.copy()
    if sched.alpha_bar[t] >= 1.0 - 1e-12:
        raise ValueError(f"alpha_bar[{t}] too close to 1; inversion would divide by ~0")
    s = sched.signal_coef(t)
    n = sched.noise_coef(t)
    return x_t / s - (n / s) * np.asarray(eps_hat, dtype=np.float64)


def _reverse_step(x_t, t: int, eps_hat, sched: NoiseSchedule, sigma: float, rng):
    sched._check_t(t, low=1)
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    n_prev = sched.noise_coef(t - 1)
    coef = math.sqrt(max(n_prev * n_prev - sigma * sigma, 0.0))
    out = sched.signal_coef(t - 1) * x0_hat + coef * np.asarray(eps_hat, dtype=np.float64)
    if sigma > 0.0:
        out = out + sigma * rng.standard_normal(np.shape(out))
    return out


def ddpm_step(x_t, t: int, eps_hat, sched: NoiseSchedule, rng, sigma: float | None = None):
    """One ancestral reverse step; sigma defaults to the posterior std (0 at t=1)."""
    if sigma is None:
        sigma = sched.posterior_sigma(t)
    return _reverse_step(x_t, t, eps_hat, sched, sigma, rng)


def ddim_step(x_t, t: int, eps_hat, sched: NoiseSchedule, eta: float, rng):
    """One DDIM step; eta=0 is deterministic, eta=1 matches the DDPM variance."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must be in [0, 1]")
    return _reverse_step(x_t, t, eps_hat, sched, eta * sched.posterior_sigma(t), rng)


@dataclass(frozen=True)
class GuidanceSpec:
    """Indicator mask over the 5 layout dimensions plus target values.

    Entries of `target` where `mask` is 0 are zeroed and ignored.
    """

    mask: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        tgt = np.asarray(self.target, dtype=np.float64)
        if m.shape != (5,) or tgt.shape != (5,):
            raise ValueError("guidance mask and target must be length-5 vectors")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("guidance mask entries must be 0 or 1")
        if not np.all(np.isfinite(tgt)):
            raise ValueError("guidance target must be finite")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "target", tgt * m)

    @classmethod
    def from_fixed(cls, fixed: dict) -> "GuidanceSpec":
        """Build from a {name: value} dict with names among a, x, y, b1, b2."""
        names = ("a", "x", "y", "b1", "b2")
        m = np.zeros(5)
        tgt = np.zeros(5)
        for key, val in fixed.items():
            if key not in names:
                raise ValueError(f"unknown layout coordinate {key!r}")
            idx = names.index(key)
            m[idx] = 1.0
            tgt[idx] = float(val)
        return cls(m, tgt)


def apply_guidance(x_t, t: int, spec: GuidanceSpec, sched: NoiseSchedule, rng):
    """Overwrite constrained coordinates with the target noised to level t.

    Fresh noise is drawn per call; at t=0 the noise coefficient is exactly 0,
    so constrained coordinates equal the target and no draw is consumed.
    """
    sched._check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    if not np.any(spec.mask):
        return x_t.copy()
    n = sched.noise_coef(t)
    target_t = sched.signal_coef(t) * spec.target
    if n > 0.0:
        target_t = target_t + n * rng.standard_normal(5)
    return target_t * spec.mask + x_t * (1.0 - spec.mask)


def sample_layout(
    eps_fn,
    sched: NoiseSchedule,
    rng,
    sampler: str = "ddim",
    eta: float = 0.0,
    guidance: GuidanceSpec | None = None,
) -> Layout:
    """Run the full reverse chain and return the sampled layout.

    `eps_fn(x_t, t)` is the trained noise predictor (already closed over its
    conditioning). Guidance, when present, is applied after every reverse
    step at the new step's noise level; the final application at level 0
    pins constrained coordinates exactly. The returned layout is canonical:
    a re-signed positive, direction normalized.

    A final direction below 1e-8 norm triggers one full resample; a second
    failure raises DegenerateDirectionError.
    """
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    for attempt in range(2):
        x = rng.standard_normal(5)
        for t in range(sched.T, 0, -1):
            eps_hat = np.asarray(eps_fn(x, t), dtype=np.float64)
            if sampler == "ddpm":
                x = ddpm_step(x, t, eps_hat, sched, rng)
            else:
                x = ddim_step(x, t, eps_hat, sched, eta, rng)
            if guidance is not None:
                x = apply_guidance(x, t - 1, guidance, sched, rng)
        if math.hypot(x[3], x[4]) >= 1e-8:
            return Layout.from_vector(x).canonical()
    raise DegenerateDirectionError("sampled direction degenerate twice in a row")
