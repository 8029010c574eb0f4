"""Conditional noise-prediction network and the combined training loss.

The network predicts the noise that corrupted a layout vector:

    eps_hat = net(l_t, t, scene)

Conditioning: the noisy layout is splatted into a mask, stacked with the
object grid and their blend, and pushed through two strided 3x3 convolutions
plus a global mean pool into a fixed-length feature. The trunk consumes
[l_t | sinusoidal time embedding | condition feature] through three tanh
hidden layers. All gradients are hand-rolled reverse mode in float64.

Training uses two losses: a parameter-space loss |eps - eps_hat|^2 and a
mask-space loss |M(l0) - M(l0_hat)|^2, where l0_hat is recovered from
eps_hat by the schedule inversion and M is the differentiable splat. The
mask loss is invariant to the sign of the size root and to positive scaling
of the approach direction, which the parameter loss is not; the total is
L_mask + lambda * L_para with lambda = 10 by default.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffusion import NoiseSchedule, forward_noise, predict_x0
from .geometry import Layout, TemplateSpec, blend_condition, splat_jacobian, splat_values

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "LossConfig",
    "NonFiniteLossError",
    "init_params",
    "param_count",
    "time_embedding",
    "encode_condition",
    "denoiser_forward",
    "eps_predictor",
    "clamp_layout_vec",
    "loss_para",
    "loss_mask",
    "total_loss",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = "handlayout-checkpoint v1"


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term becomes non-finite; carries item diagnostics."""


@dataclass(frozen=True)
class DenoiserConfig:
    """Fixed architecture shape. The condition feature length is conv2 channels."""

    grid: int = 32
    conv1: int = 16
    conv2: int = 32
    time_dim: int = 16
    hidden: int = 128

    def __post_init__(self):
        if self.grid < 8 or self.grid % 4 != 0:
            raise ValueError("conditioning grid must be >= 8 and divisible by 4")
        if self.time_dim % 2 != 0:
            raise ValueError("time embedding dimension must be even")

    @property
    def trunk_in(self) -> int:
        return 5 + self.time_dim + self.conv2


@dataclass
class DenoiserParams:
    """All weights, in declaration order (checkpoints and Adam rely on it)."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def items(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(**{name: arr.copy() for name, arr in self.items()})


def init_params(cfg: DenoiserConfig, rng) -> DenoiserParams:
    """Scaled-normal weights, zero biases, small final layer."""

    def w(shape, fan_in, scale=1.0):
        return rng.standard_normal(shape) * (scale / math.sqrt(fan_in))

    h = cfg.hidden
    return DenoiserParams(
        conv1_w=w((cfg.conv1, 3, 3, 3), 27),
        conv1_b=np.zeros(cfg.conv1),
        conv2_w=w((cfg.conv2, cfg.conv1, 3, 3), cfg.conv1 * 9),
        conv2_b=np.zeros(cfg.conv2),
        w1=w((h, cfg.trunk_in), cfg.trunk_in),
        b1=np.zeros(h),
        w2=w((h, h), h),
        b2=np.zeros(h),
        w3=w((h, h), h),
        b3=np.zeros(h),
        w_out=w((5, h), h, scale=0.1),
        b_out=np.zeros(5),
    )


def param_count(params: DenoiserParams) -> int:
    return sum(arr.size for _, arr in params.items())


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos at geometrically spaced frequencies.

    Frequencies are 10000**(-k / (dim/2)) for k = 0 .. dim/2 - 1; the output
    is [sin(t*f0), cos(t*f0), sin(t*f1), cos(t*f1), ...].
    """
    if dim % 2 != 0:
        raise ValueError("time embedding dimension must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    out = np.empty(dim)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return out


# ---------------------------------------------------------------------------
# strided 3x3 convolutions (stride 2, pad 1) via im2col


def _conv_forward(x, w, b):
    bsz, cin, hh, ww = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
    h2, w2 = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz, h2 * w2, cin * 9)
    out = cols @ w.reshape(cout, -1).T + b
    return out.reshape(bsz, h2, w2, cout).transpose(0, 3, 1, 2), cols


def _conv_backward(cols, w, d_out, x_shape, need_dx):
    bsz, cout, h2, w2 = d_out.shape
    cin = x_shape[1]
    dr = np.ascontiguousarray(d_out.transpose(0, 2, 3, 1)).reshape(bsz * h2 * w2, cout)
    colsr = cols.reshape(bsz * h2 * w2, cin * 9)
    dw = (dr.T @ colsr).reshape(w.shape)
    db = dr.sum(axis=0)
    dx = None
    if need_dx:
        dcols = (dr @ w.reshape(cout, -1)).reshape(bsz, h2, w2, cin, 3, 3)
        dxp = np.zeros((bsz, cin, x_shape[2] + 2, x_shape[3] + 2))
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki:ki + 2 * h2:2, kj:kj + 2 * w2:2] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        dx = dxp[:, :, 1:-1, 1:-1]
    return dw, db, dx


def _forward_batch(params: DenoiserParams, cfg: DenoiserConfig, stacks, l_t, ts):
    """Batched network forward; returns eps_hat (B, 5) and the backward cache."""
    h1_pre, cols1 = _conv_forward(stacks, params.conv1_w, params.conv1_b)
    h1 = np.tanh(h1_pre)
    h2_pre, cols2 = _conv_forward(h1, params.conv2_w, params.conv2_b)
    h2 = np.tanh(h2_pre)
    feat = h2.mean(axis=(2, 3))
    temb = np.stack([time_embedding(int(t), cfg.time_dim) for t in ts])
    z0 = np.concatenate([l_t, temb, feat], axis=1)
    a1 = np.tanh(z0 @ params.w1.T + params.b1)
    a2 = np.tanh(a1 @ params.w2.T + params.b2)
    a3 = np.tanh(a2 @ params.w3.T + params.b3)
    # identity skip: the trunk predicts a residual on the noisy layout, so the
    # near-pure-noise steps (where the optimal prediction is ~ the input and
    # the reverse chain amplifies errors hardest) start out already calibrated
    eps_hat = a3 @ params.w_out.T + params.b_out + l_t
    cache = (stacks.shape, h1.shape, cols1, cols2, h1, h2, z0, a1, a2, a3)
    return eps_hat, cache


def _backward_batch(params: DenoiserParams, cfg: DenoiserConfig, cache, d_eps):
    stacks_shape, h1_shape, cols1, cols2, h1, h2, z0, a1, a2, a3 = cache
    grads = {}
    grads["w_out"] = d_eps.T @ a3
    grads["b_out"] = d_eps.sum(axis=0)
    d = (d_eps @ params.w_out) * (1.0 - a3 * a3)
    grads["w3"] = d.T @ a2
    grads["b3"] = d.sum(axis=0)
    d = (d @ params.w3) * (1.0 - a2 * a2)
    grads["w2"] = d.T @ a1
    grads["b2"] = d.sum(axis=0)
    d = (d @ params.w2) * (1.0 - a1 * a1)
    grads["w1"] = d.T @ z0
    grads["b1"] = d.sum(axis=0)
    d_feat = (d @ params.w1)[:, 5 + cfg.time_dim:]
    spatial = h2.shape[2] * h2.shape[3]
    d_h2 = np.broadcast_to(d_feat[:, :, None, None] / spatial, h2.shape)
    d_pre2 = d_h2 * (1.0 - h2 * h2)
    grads["conv2_w"], grads["conv2_b"], d_h1 = _conv_backward(
        cols2, params.conv2_w, d_pre2, h1_shape, need_dx=True
    )
    d_pre1 = d_h1 * (1.0 - h1 * h1)
    grads["conv1_w"], grads["conv1_b"], _ = _conv_backward(
        cols1, params.conv1_w, d_pre1, stacks_shape, need_dx=False
    )
    return grads


def encode_condition(params: DenoiserParams, cfg: DenoiserConfig, object_grid, mask_context=None) -> np.ndarray:
    """Condition feature for one scene; zeros stand in for a missing mask context."""
    obj = np.asarray(object_grid, dtype=np.float64)
    if obj.shape != (cfg.grid, cfg.grid):
        raise ValueError(f"object grid shape {obj.shape} does not match config grid {cfg.grid}")
    if mask_context is None:
        mask_context = np.zeros_like(obj)
    stack = blend_condition(mask_context, obj)[None]
    h1, _ = _conv_forward(stack, params.conv1_w, params.conv1_b)
    h2, _ = _conv_forward(np.tanh(h1), params.conv2_w, params.conv2_b)
    return np.tanh(h2).mean(axis=(2, 3))[0]


def denoiser_forward(params: DenoiserParams, cfg: DenoiserConfig, l_t, t: int, cond: np.ndarray) -> np.ndarray:
    """Noise prediction for one item from an already-encoded condition."""
    l_t = np.asarray(l_t, dtype=np.float64)
    if l_t.shape != (5,) or cond.shape != (cfg.conv2,):
        raise ValueError("layout vector must have length 5 and condition must match config")
    z0 = np.concatenate([l_t, time_embedding(t, cfg.time_dim), cond])
    a1 = np.tanh(params.w1 @ z0 + params.b1)
    a2 = np.tanh(params.w2 @ a1 + params.b2)
    a3 = np.tanh(params.w3 @ a2 + params.b3)
    return params.w_out @ a3 + params.b_out + l_t


def clamp_layout_vec(vec: np.ndarray) -> np.ndarray:
    """Make a raw 5-vector safe to splat: |a| >= 1e-3, direction norm >= 1e-6.

    Gradients are treated as straight-through (identity) where the clamp
    engages; valid layouts pass unchanged.
    """
    out = np.array(vec, dtype=np.float64)
    if abs(out[0]) < 1e-3:
        out[0] = 1e-3 if out[0] >= 0.0 else -1e-3
    n = math.hypot(out[3], out[4])
    if n < 1e-6:
        if n == 0.0:
            out[3], out[4] = 1e-6, 0.0
        else:
            out[3] *= 1e-6 / n
            out[4] *= 1e-6 / n
    return out


@dataclass(frozen=True)
class LossConfig:
    """Weights and resolution of the combined loss."""

    lam: float = 10.0
    mask_res: int = 32
    use_mask_loss: bool = True
    template: TemplateSpec = field(default_factory=TemplateSpec)

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("lambda must be non-negative")
        if self.mask_res < 8:
            raise ValueError("mask resolution must be at least 8")


def loss_para(eps, eps_hat) -> float:
    """Sum of squared differences over the 5 coordinates, mean over any batch."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    d = eps - eps_hat
    per_item = (d * d).sum(axis=-1)
    return float(per_item.mean())


def loss_mask(l0_vec, l0hat_vec, res: int, spec: TemplateSpec) -> float:
    """Mean squared difference between the two splatted masks at res x res."""
    m0 = splat_values(Layout.from_vector(clamp_layout_vec(l0_vec)), res, res, spec)
    mh = splat_values(Layout.from_vector(clamp_layout_vec(l0hat_vec)), res, res, spec)
    d = mh - m0
    return float((d * d).mean())


def _loss_mask_with_grad(l0_vec, l0hat_vec, res, spec):
    safe0 = clamp_layout_vec(l0_vec)
    safeh = clamp_layout_vec(l0hat_vec)
    m0 = splat_values(Layout.from_vector(safe0), res, res, spec)
    mh = splat_values(Layout.from_vector(safeh), res, res, spec)
    jac = splat_jacobian(Layout.from_vector(safeh), res, res, spec)
    d = mh - m0
    loss = float((d * d).mean())
    grad = 2.0 / d.size * np.einsum("ij,ijk->k", d, jac)
    return loss, grad


def _condition_stack(object_grid, x_t, grid, spec, splat_condition):
    if splat_condition:
        ctx = splat_values(Layout.from_vector(clamp_layout_vec(x_t)), grid, grid, spec)
    else:
        ctx = np.zeros((grid, grid))
    return blend_condition(ctx, object_grid)


def eps_predictor(params: DenoiserParams, cfg: DenoiserConfig, object_grid,
                  spec: TemplateSpec = TemplateSpec(), splat_condition: bool = True):
    """Close the network over one scene; returns eps_fn(x_t, t) for sampling."""
    obj = np.asarray(object_grid, dtype=np.float64)

    def eps_fn(x_t, t):
        stack = _condition_stack(obj, x_t, cfg.grid, spec, splat_condition)
        eps_hat, _ = _forward_batch(params, cfg, stack[None], np.asarray(x_t)[None], [t])
        return eps_hat[0]

    return eps_fn


def total_loss(batch, params: DenoiserParams, cfg: DenoiserConfig, loss_cfg: LossConfig,
               sched: NoiseSchedule, rng, splat_condition: bool = True):
    """Combined loss and full parameter gradient over a batch.

    `batch` is a sequence of (object_grid, gt_layout) pairs. Per item, a step
    t is drawn uniformly from 1..T and fresh noise corrupts the ground-truth
    layout vector; the gradient flows through the network, the schedule
    inversion and the splat Jacobian. Returns (loss, grads, stats).
    """
    bsz = len(batch)
    if bsz == 0:
        raise ValueError("empty batch")
    grid = cfg.grid
    ts = np.empty(bsz, dtype=np.int64)
    eps = np.empty((bsz, 5))
    x_t = np.empty((bsz, 5))
    l0 = np.empty((bsz, 5))
    stacks = np.empty((bsz, 3, grid, grid))
    for i, (obj, gt) in enumerate(batch):
        ts[i] = rng.integers(1, sched.T + 1)
        eps[i] = rng.standard_normal(5)
        l0[i] = gt.vector() if isinstance(gt, Layout) else np.asarray(gt, dtype=np.float64)
        x_t[i] = forward_noise(l0[i], int(ts[i]), eps[i], sched)
        stacks[i] = _condition_stack(obj, x_t[i], grid, loss_cfg.template, splat_condition)

    eps_hat, cache = _forward_batch(params, cfg, stacks, x_t, ts)

    d_eps = np.zeros((bsz, 5))
    para_terms = np.empty(bsz)
    mask_terms = np.zeros(bsz)
    for i in range(bsz):
        diff = eps_hat[i] - eps[i]
        para_terms[i] = float(diff @ diff)
        d_eps[i] = loss_cfg.lam * 2.0 * diff
        if loss_cfg.use_mask_loss:
            t = int(ts[i])
            l0hat = predict_x0(x_t[i], t, eps_hat[i], sched)
            m_loss, d_l0hat = _loss_mask_with_grad(l0[i], l0hat, loss_cfg.mask_res, loss_cfg.template)
            mask_terms[i] = m_loss
            # d l0hat / d eps_hat = -noise_coef/signal_coef, per coordinate
            d_eps[i] += d_l0hat * (-sched.noise_coef(t) / sched.signal_coef(t))
        if not (math.isfinite(para_terms[i]) and math.isfinite(mask_terms[i])):
            raise NonFiniteLossError(f"non-finite loss at batch item {i}, t={ts[i]}")

    loss = float((mask_terms + loss_cfg.lam * para_terms).mean())
    grads = _backward_batch(params, cfg, cache, d_eps / bsz)
    stats = {
        "loss_mask": float(mask_terms.mean()),
        "loss_para": float(para_terms.mean()),
        "loss": loss,
    }
    return loss, grads, stats


# ---------------------------------------------------------------------------
# checkpoints: text header, then raw little-endian float64 in field order


def save_checkpoint(path, params: DenoiserParams, cfg: DenoiserConfig, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write((CKPT_MAGIC + "\n").encode())
    arch = f"grid={cfg.grid} conv1={cfg.conv1} conv2={cfg.conv2} time_dim={cfg.time_dim} hidden={cfg.hidden}"
    buf.write((arch + "\n").encode())
    extra = extra or {}
    buf.write((" ".join(f"{k}={extra[k]}" for k in sorted(extra)) + "\n").encode())
    buf.write(f"params={param_count(params)}\n".encode())
    for _, arr in params.items():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (params, cfg, extra); bit-exact inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head, rest = raw.split(b"\n", 1)
    if head.decode() != CKPT_MAGIC:
        raise ValueError(f"{path}: not a handlayout checkpoint")
    arch_line, rest = rest.split(b"\n", 1)
    extra_line, rest = rest.split(b"\n", 1)
    count_line, blob = rest.split(b"\n", 1)
    arch = dict(kv.split("=") for kv in arch_line.decode().split())
    cfg = DenoiserConfig(
        grid=int(arch["grid"]), conv1=int(arch["conv1"]), conv2=int(arch["conv2"]),
        time_dim=int(arch["time_dim"]), hidden=int(arch["hidden"]),
    )
    extra = dict(kv.split("=", 1) for kv in extra_line.decode().split()) if extra_line else {}
    declared = int(count_line.decode().split("=")[1])
    shapes = _param_shapes(cfg)
    total = sum(int(np.prod(s)) for s in shapes.values())
    if declared != total:
        raise ValueError(f"{path}: parameter count {declared} does not match architecture ({total})")
    flat = np.frombuffer(blob, dtype="<f8")
    if flat.size != total:
        raise ValueError(f"{path}: payload holds {flat.size} floats, expected {total}")
    out = {}
    offset = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        out[name] = flat[offset:offset + n].reshape(shape).copy()
        offset += n
    return DenoiserParams(**out), cfg, extra


def _param_shapes(cfg: DenoiserConfig) -> dict:
    h = cfg.hidden
    return {
        "conv1_w": (cfg.conv1, 3, 3, 3), "conv1_b": (cfg.conv1,),
        "conv2_w": (cfg.conv2, cfg.conv1, 3, 3), "conv2_b": (cfg.conv2,),
        "w1": (h, cfg.trunk_in), "b1": (h,),
        "w2": (h, h), "b2": (h,),
        "w3": (h, h), "b3": (h,),
        "w_out": (5, h), "b_out": (5,),
    }
