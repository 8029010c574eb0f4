"""Pure-numpy splat kernels, the fallback twin of the compiled module.

Same contracts as `handlayout._splat`; selected by `handlayout.kernels`
when the extension is unavailable or HANDLAYOUT_PURE=1 is set.
"""

import numpy as np

BACKEND = "numpy"


def _grid_canonical(s, x, y, bh1, bh2, width, height):
    px = (2.0 * np.arange(width) + 1.0) / width - 1.0
    py = (2.0 * np.arange(height) + 1.0) / height - 1.0
    dx = px[None, :] - x
    dy = py[:, None] - y
    u = (bh1 * dx + bh2 * dy) / s
    v = (-bh2 * dx + bh1 * dy) / s
    return u, v


def _density_parts(u, v, palm_sigma, forearm_sigma, forearm_length, taper):
    palm = np.exp(-(u * u + v * v) / (2.0 * palm_sigma * palm_sigma))
    across = np.exp(-(v * v) / (2.0 * forearm_sigma * forearm_sigma))
    r = -u
    zr = np.clip(r / taper, 0.0, 1.0)
    zf = np.clip((forearm_length - r) / taper, 0.0, 1.0)
    rise = zr * zr * zr * zr * (35.0 + zr * (-84.0 + zr * (70.0 - 20.0 * zr)))
    fall = zf * zf * zf * zf * (35.0 + zf * (-84.0 + zf * (70.0 - 20.0 * zf)))
    inside = (r > 0.0) & (r < forearm_length)
    window = np.where(inside, np.minimum(rise, fall), 0.0)
    return palm, across, window, r


def splat_grid(s, x, y, bh1, bh2, width, height,
               palm_sigma, forearm_sigma, forearm_length, taper):
    u, v = _grid_canonical(s, x, y, bh1, bh2, width, height)
    palm, across, window, _ = _density_parts(u, v, palm_sigma, forearm_sigma,
                                             forearm_length, taper)
    forearm = window * across
    return palm + forearm - palm * forearm


def splat_jacobian_grid(a, s, x, y, bh1, bh2, bnorm, width, height,
                        palm_sigma, forearm_sigma, forearm_length, taper):
    u, v = _grid_canonical(s, x, y, bh1, bh2, width, height)
    palm, across, window, r = _density_parts(u, v, palm_sigma, forearm_sigma,
                                             forearm_length, taper)
    forearm = window * across

    inv_ps2 = 1.0 / (palm_sigma * palm_sigma)
    inv_fs2 = 1.0 / (forearm_sigma * forearm_sigma)
    dpalm_du = -palm * u * inv_ps2
    dpalm_dv = -palm * v * inv_ps2

    # window derivative w.r.t. r, nonzero only on the two septic ramps
    # (taper <= L/2 keeps them disjoint; min(rise, fall) selects the ramp)
    zr = r / taper
    zf = (forearm_length - r) / taper
    on_rise = (r > 0.0) & (r < taper)
    on_fall = (r > forearm_length - taper) & (r < forearm_length)
    rise_smaller = zr <= zf
    dwin_dr = np.zeros_like(r)
    m = on_rise & rise_smaller
    dwin_dr[m] = 140.0 * zr[m] ** 3 * (1.0 - zr[m]) ** 3 / taper
    m = on_fall & ~rise_smaller
    dwin_dr[m] = -140.0 * zf[m] ** 3 * (1.0 - zf[m]) ** 3 / taper

    dfore_du = -dwin_dr * across  # r = -u
    dfore_dv = -forearm * v * inv_fs2

    dd_du = (1.0 - forearm) * dpalm_du + (1.0 - palm) * dfore_du
    dd_dv = (1.0 - forearm) * dpalm_dv + (1.0 - palm) * dfore_dv

    two_over_a = 2.0 / a
    du_da = -two_over_a * u
    dv_da = -two_over_a * v
    inv_s = 1.0 / s
    inv_n = 1.0 / bnorm

    out = np.empty((height, width, 5))
    out[:, :, 0] = dd_du * du_da + dd_dv * dv_da
    out[:, :, 1] = dd_du * (-bh1 * inv_s) + dd_dv * (bh2 * inv_s)
    out[:, :, 2] = dd_du * (-bh2 * inv_s) + dd_dv * (-bh1 * inv_s)
    out[:, :, 3] = (dd_du * (-bh2 * v) + dd_dv * (bh2 * u)) * inv_n
    out[:, :, 4] = (dd_du * (bh1 * v) + dd_dv * (-bh1 * u)) * inv_n
    return out
