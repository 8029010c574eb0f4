# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled splat kernels: per-pixel template evaluation and its gradient.

Mirrors `handlayout._splat_py`; keep the two in sync.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

BACKEND = "cython"


cdef inline double _window(double r, double length, double taper) nogil:
    # C^3 septic smoothstep ramps at both ends of [0, length]
    cdef double z
    if r <= 0.0 or r >= length:
        return 0.0
    if r < taper:
        z = r / taper
    elif r > length - taper:
        z = (length - r) / taper
    else:
        return 1.0
    return z * z * z * z * (35.0 + z * (-84.0 + z * (70.0 - 20.0 * z)))


cdef inline double _window_deriv(double r, double length, double taper) nogil:
    # derivative of _window w.r.t. r; nonzero only on the ramps
    cdef double z
    if r <= 0.0 or r >= length:
        return 0.0
    if r < taper:
        z = r / taper
        return 140.0 * z * z * z * (1.0 - z) * (1.0 - z) * (1.0 - z) / taper
    if r > length - taper:
        z = (length - r) / taper
        return -140.0 * z * z * z * (1.0 - z) * (1.0 - z) * (1.0 - z) / taper
    return 0.0


def splat_grid(double s, double x, double y, double bh1, double bh2,
               int width, int height, double palm_sigma, double forearm_sigma,
               double forearm_length, double taper):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((height, width))
    cdef double[:, ::1] o = out
    cdef double inv_ps2 = 1.0 / (2.0 * palm_sigma * palm_sigma)
    cdef double inv_fs2 = 1.0 / (2.0 * forearm_sigma * forearm_sigma)
    cdef double inv_s = 1.0 / s
    cdef int i, j
    cdef double px, py, dx, dy, u, v, palm, fore
    with nogil:
        for i in range(height):
            py = (2.0 * i + 1.0) / height - 1.0
            dy = py - y
            for j in range(width):
                px = (2.0 * j + 1.0) / width - 1.0
                dx = px - x
                u = (bh1 * dx + bh2 * dy) * inv_s
                v = (-bh2 * dx + bh1 * dy) * inv_s
                palm = exp(-(u * u + v * v) * inv_ps2)
                fore = _window(-u, forearm_length, taper) * exp(-v * v * inv_fs2)
                o[i, j] = palm + fore - palm * fore
    return out


def splat_jacobian_grid(double a, double s, double x, double y,
                        double bh1, double bh2, double bnorm,
                        int width, int height, double palm_sigma,
                        double forearm_sigma, double forearm_length, double taper):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty((height, width, 5))
    cdef double[:, :, ::1] o = out
    cdef double inv_ps2 = 1.0 / (palm_sigma * palm_sigma)
    cdef double inv_fs2 = 1.0 / (forearm_sigma * forearm_sigma)
    cdef double inv_s = 1.0 / s
    cdef double inv_n = 1.0 / bnorm
    cdef double two_over_a = 2.0 / a
    cdef int i, j
    cdef double px, py, dx, dy, u, v, palm, across, win, fore
    cdef double dpalm_du, dpalm_dv, dfore_du, dfore_dv, dd_du, dd_dv
    with nogil:
        for i in range(height):
            py = (2.0 * i + 1.0) / height - 1.0
            dy = py - y
            for j in range(width):
                px = (2.0 * j + 1.0) / width - 1.0
                dx = px - x
                u = (bh1 * dx + bh2 * dy) * inv_s
                v = (-bh2 * dx + bh1 * dy) * inv_s
                palm = exp(-(u * u + v * v) * 0.5 * inv_ps2)
                across = exp(-v * v * 0.5 * inv_fs2)
                win = _window(-u, forearm_length, taper)
                fore = win * across
                dpalm_du = -palm * u * inv_ps2
                dpalm_dv = -palm * v * inv_ps2
                dfore_du = -_window_deriv(-u, forearm_length, taper) * across
                dfore_dv = -fore * v * inv_fs2
                dd_du = (1.0 - fore) * dpalm_du + (1.0 - palm) * dfore_du
                dd_dv = (1.0 - fore) * dpalm_dv + (1.0 - palm) * dfore_dv
                o[i, j, 0] = -(dd_du * u + dd_dv * v) * two_over_a
                o[i, j, 1] = (-dd_du * bh1 + dd_dv * bh2) * inv_s
                o[i, j, 2] = (-dd_du * bh2 - dd_dv * bh1) * inv_s
                o[i, j, 3] = (-dd_du * bh2 * v + dd_dv * bh2 * u) * inv_n
                o[i, j, 4] = (dd_du * bh1 * v - dd_dv * bh1 * u) * inv_n
    return out
