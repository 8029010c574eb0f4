"""Training loop, evaluation metrics, sampler validation and ablations.

Training is plain Adam over the combined loss, bit-reproducible for a fixed
seed (one rng stream consumed in a fixed order, serial reductions). The
contact-recall metric is geometric: a layout is in contact when its palm
disk (radius palm_fraction * a^2 in normalized units) meets the object mask
dilated by a few pixels. Ground-truth layouts from the generator satisfy it
by construction.

The closed-form Gaussian oracle provides an exact conditional-mean noise
predictor for N(mu, sigma^2) targets, which validates the reverse samplers
end to end without any training in the loop.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SceneSample, load_manifest, read_dataset
from .denoiser import (
    DenoiserConfig,
    DenoiserParams,
    LossConfig,
    eps_predictor,
    init_params,
    load_checkpoint,
    total_loss,
)
from .diffusion import NoiseSchedule, build_schedule, ddim_step, ddpm_step, sample_layout
from .geometry import Layout

__all__ = [
    "AdamState",
    "TrainConfig",
    "MetricsReport",
    "TrainingDivergedError",
    "NonFiniteGradientError",
    "adam_step",
    "train",
    "evaluate_layouts",
    "contact_recall",
    "constraint_error",
    "gaussian_oracle_epsilon",
    "sampler_moment_check",
    "ablation_suite",
    "config_echo",
]


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, params: DenoiserParams) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros_like(arr) for name, arr in params.items()},
            v={name: np.zeros_like(arr) for name, arr in params.items()},
        )


def adam_step(params: DenoiserParams, grads: dict, state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Standard bias-corrected adaptive-moment update, in place, float64."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, arr in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass(frozen=True)
class TrainConfig:
    data_root: str = "data"
    manifest: str = "manifest-train.txt"
    steps: int = 5000
    batch: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    T: int = 100
    family: str = "linear"
    net: DenoiserConfig = field(default_factory=DenoiserConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    splat_condition: bool = True
    init_checkpoint: str | None = None
    log_every: int = 100
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("steps must be >= 0, batch >= 1, lr > 0")


@dataclass(frozen=True)
class MetricsReport:
    metrics: dict
    loss_curve: tuple = ()
    config: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{k} = {v!r}" for k, v in sorted(self.metrics.items())]
        lines += [f"loss_curve {s} {v!r}" for s, v in self.loss_curve]
        machine = json.dumps(
            {"metrics": self.metrics, "loss_curve": [list(p) for p in self.loss_curve],
             "config": self.config},
            sort_keys=True,
        )
        lines.append("[machine] " + machine)
        return "\n".join(lines) + "\n"


def config_echo(cfg) -> dict:
    """Flatten a (possibly nested) config dataclass into dotted string pairs."""
    flat = {}

    def walk(prefix, obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(val):
                walk(key + ".", val)
            else:
                flat[key] = repr(val) if isinstance(val, float) else str(val)

    walk("", cfg)
    return flat


def train(cfg: TrainConfig, samples: list[SceneSample] | None = None):
    """Run the training loop; returns (params, MetricsReport)."""
    if samples is None:
        samples = read_dataset(cfg.data_root, cfg.manifest)
    if not samples:
        raise ValueError("training dataset is empty")
    grid = samples[0].object_grid.shape[0]
    if grid != cfg.net.grid:
        raise ValueError(f"scene grid {grid} does not match network grid {cfg.net.grid}")

    sched = build_schedule(cfg.T, cfg.family)
    rng = np.random.default_rng(cfg.seed)
    if cfg.init_checkpoint:
        params, net_cfg, _ = load_checkpoint(cfg.init_checkpoint)
        if net_cfg != cfg.net:
            raise ValueError("warm-start checkpoint architecture does not match config")
    else:
        params = init_params(cfg.net, rng)
    state = AdamState.fresh(params)

    data = [(s.object_grid, s.gt_layout) for s in samples]
    n = len(data)
    curve = []
    loss = math.nan
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch)
        batch = [data[i] for i in idx]
        loss, grads, _ = total_loss(batch, params, cfg.net, cfg.loss, sched, rng,
                                    splat_condition=cfg.splat_condition)
        if loss > cfg.divergence_limit:
            raise TrainingDivergedError(f"loss {loss:.3e} at step {step}")
        adam_step(params, grads, state, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            curve.append((step, loss))

    report = MetricsReport(
        metrics={"loss_final": loss, "sample_count": n, "steps": cfg.steps},
        loss_curve=tuple(curve),
        config=config_echo(cfg),
    )
    return params, report


def evaluate_layouts(params: DenoiserParams, net_cfg: DenoiserConfig, scenes, sched: NoiseSchedule,
                     template, splat_condition: bool = True, sampler: str = "ddim",
                     eta: float = 0.0, seed: int = 0, guidance_fn=None) -> list[Layout]:
    """Sample one layout per scene, each from its own derived stream."""
    out = []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, 0xE7A1, i])
        eps_fn = eps_predictor(params, net_cfg, scene.object_grid, template, splat_condition)
        guidance = guidance_fn(i, scene) if guidance_fn else None
        out.append(sample_layout(eps_fn, sched, rng, sampler=sampler, eta=eta, guidance=guidance))
    return out


def contact_recall(layouts, scenes, palm_fraction: float = 1.0, dilation_px: int = 2) -> float:
    """Fraction of layouts whose palm disk meets the dilated object mask."""
    if len(layouts) != len(scenes):
        raise ValueError(f"{len(layouts)} layouts vs {len(scenes)} scenes")
    if not layouts:
        raise ValueError("empty evaluation set")
    hits = 0
    for layout, scene in zip(layouts, scenes):
        size = scene.object_mask.shape[0]
        ii, jj = np.nonzero(scene.object_mask)
        if ii.size == 0:
            continue
        px = (2.0 * jj + 1.0) / size - 1.0
        py = (2.0 * ii + 1.0) / size - 1.0
        dmin = np.min(np.hypot(px - layout.x, py - layout.y))
        reach = palm_fraction * layout.a ** 2 + dilation_px * (2.0 / size)
        if dmin <= reach:
            hits += 1
    return hits / len(layouts)


def constraint_error(layouts, specs):
    """Per-dimension MAE over constrained coordinates.

    Returns (mae, counts); mae is NaN where no sample constrains a dimension.
    Raises if nothing is constrained anywhere.
    """
    if len(layouts) != len(specs):
        raise ValueError("layouts and guidance specs must pair up")
    sums = np.zeros(5)
    counts = np.zeros(5)
    for layout, spec in zip(layouts, specs):
        err = np.abs(layout.vector() - spec.target) * spec.mask
        sums += err
        counts += spec.mask
    if counts.sum() == 0:
        raise ValueError("no constrained coordinate anywhere; metric undefined")
    mae = np.divide(sums, counts, out=np.full(5, np.nan), where=counts > 0)
    return mae, counts


def gaussian_oracle_epsilon(x_t, t: int, mu: float, sigma: float, sched: NoiseSchedule):
    """Exact E[eps | x_t] for x0 ~ N(mu, sigma^2) under this noise convention."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    s = sched.signal_coef(t)
    n = sched.noise_coef(t)
    return n * (np.asarray(x_t, dtype=np.float64) - s * mu) / (s * s * sigma * sigma + n * n)


def sampler_moment_check(sched: NoiseSchedule, sampler: str, mu: float, sigma: float,
                         n_chains: int, rng, eta: float = 1.0,
                         mean_tol: float = 0.02, std_rtol: float = 0.02) -> dict:
    """Run full reverse chains with the oracle denoiser and check moments."""
    if n_chains < 1000:
        raise ValueError("need at least 1000 chains for stable moments")
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    x = rng.standard_normal(n_chains)
    for t in range(sched.T, 0, -1):
        eps_hat = gaussian_oracle_epsilon(x, t, mu, sigma, sched)
        if sampler == "ddpm":
            x = ddpm_step(x, t, eps_hat, sched, rng)
        else:
            x = ddim_step(x, t, eps_hat, sched, eta, rng)
    mean = float(x.mean())
    std = float(x.std())
    mean_ok = abs(mean - mu) <= mean_tol
    std_ok = abs(std - sigma) <= std_rtol * sigma
    return {
        "sampler": sampler, "eta": eta, "target_mean": mu, "target_std": sigma,
        "mean": mean, "std": std, "mean_ok": mean_ok, "std_ok": std_ok,
        "passed": mean_ok and std_ok,
    }


ABLATION_VARIANTS = ("full", "vector-conditioned", "no-mask-loss")


def ablation_suite(base_cfg: TrainConfig, test_manifest: str = "manifest-test.txt",
                   max_eval: int = 100, eval_seed: int = 0):
    """Train the three design variants with shared seeds and compare recall.

    Returns (rows, table, notes): rows maps variant name to its held-out
    contact recall; the directional expectations are reported, not enforced.
    """
    variants = {
        "full": base_cfg,
        "vector-conditioned": replace(base_cfg, splat_condition=False),
        "no-mask-loss": replace(base_cfg, loss=replace(base_cfg.loss, use_mask_loss=False)),
    }
    manifest = load_manifest(base_cfg.data_root, test_manifest)
    scenes = read_dataset(base_cfg.data_root, test_manifest)[:max_eval]
    if not scenes:
        raise ValueError(f"no evaluation scenes in {manifest.root / test_manifest}")
    sched = build_schedule(base_cfg.T, base_cfg.family)

    rows = {}
    for name in ABLATION_VARIANTS:
        params, _ = train(variants[name])
        layouts = evaluate_layouts(params, base_cfg.net, scenes, sched,
                                   base_cfg.loss.template,
                                   splat_condition=variants[name].splat_condition,
                                   seed=eval_seed)
        rows[name] = contact_recall(layouts, scenes)

    width = max(len(n) for n in ABLATION_VARIANTS) + 2
    lines = [f"{'variant':<{width}}contact_recall"]
    for name in ABLATION_VARIANTS:
        lines.append(f"{name:<{width}}{rows[name]:.4f}")
    table = "\n".join(lines) + "\n"

    notes = [
        f"expectation full >= vector-conditioned: {'met' if rows['full'] >= rows['vector-conditioned'] else 'not met'}",
        f"expectation full >= no-mask-loss: {'met' if rows['full'] >= rows['no-mask-loss'] else 'not met'}",
    ]
    return rows, table, notes
