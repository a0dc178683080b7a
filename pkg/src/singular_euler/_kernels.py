"""Compiled inner loops for grid propagation and Duhamel sums."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

TRUNC = 10.0
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@nb.njit(cache=True)
def _deposit(out, ys, y0, dy, c, sigma, coef, lo, hi):
    """out[i] += coef exp(-(ys[i] - c)^2 / (2 sigma^2)) for lo <= i <= hi.

    Walks outward from the node nearest to c with the exact ratio recurrence
    g_{i+1}/g_i = exp(-(2 z_i d + d^2)/2), d = dy/sigma, which needs one exp per
    direction instead of one per node.
    """
    if lo > hi:
        return
    ic = int(round((c - y0) / dy))
    if ic < lo:
        ic = lo
    if ic > hi:
        ic = hi
    d = dy / sigma
    r = math.exp(-d * d)
    z = (ys[ic] - c) / sigma
    gc = math.exp(-0.5 * z * z)
    out[ic] += coef * gc
    gv = gc
    q = math.exp(-(2.0 * z * d + d * d) * 0.5)
    for i in range(ic + 1, hi + 1):
        gv *= q
        q *= r
        out[i] += coef * gv
    gv = gc
    q = math.exp(-(-2.0 * z * d + d * d) * 0.5)
    for i in range(ic - 1, lo - 1, -1):
        gv *= q
        q *= r
        out[i] += coef * gv


@nb.njit(cache=True)
def push_1d(mass, centers, node_w, sigma, ys, out):
    """out[i] += sum_j sum_m mass[j] node_w[m] g(sigma^2, ys[i] - centers[m, j]).

    Gaussians are truncated at TRUNC standard deviations; ``ys`` is uniform.
    """
    n_src = mass.shape[0]
    n_out = ys.shape[0]
    y0 = ys[0]
    dy = (ys[n_out - 1] - ys[0]) / (n_out - 1)
    norm = _INV_SQRT_2PI / sigma
    for j in range(n_src):
        mj = mass[j]
        if mj == 0.0:
            continue
        for m in range(centers.shape[0]):
            c = centers[m, j]
            lo = int(math.ceil((c - TRUNC * sigma - y0) / dy))
            hi = int(math.floor((c + TRUNC * sigma - y0) / dy))
            if lo < 0:
                lo = 0
            if hi > n_out - 1:
                hi = n_out - 1
            _deposit(out, ys, y0, dy, c, sigma, mj * node_w[m] * norm, lo, hi)


@nb.njit(cache=True)
def push_2d(mass, centers, node_w, sigma, ys0, ys1, out):
    """Two-dimensional analogue of :func:`push_1d` (separable Gaussian)."""
    n0 = ys0.shape[0]
    n1 = ys1.shape[0]
    dy0 = (ys0[n0 - 1] - ys0[0]) / (n0 - 1)
    dy1 = (ys1[n1 - 1] - ys1[0]) / (n1 - 1)
    inv_s = 1.0 / sigma
    norm = (_INV_SQRT_2PI * inv_s) ** 2
    w0 = np.empty(n0)
    w1 = np.empty(n1)
    for a in range(mass.shape[0]):
        for b in range(mass.shape[1]):
            mab = mass[a, b]
            if mab == 0.0:
                continue
            for m in range(centers.shape[0]):
                c0 = centers[m, a, b, 0]
                c1 = centers[m, a, b, 1]
                lo0 = max(0, int(math.ceil((c0 - TRUNC * sigma - ys0[0]) / dy0)))
                hi0 = min(n0 - 1, int(math.floor((c0 + TRUNC * sigma - ys0[0]) / dy0)))
                lo1 = max(0, int(math.ceil((c1 - TRUNC * sigma - ys1[0]) / dy1)))
                hi1 = min(n1 - 1, int(math.floor((c1 + TRUNC * sigma - ys1[0]) / dy1)))
                if lo0 > hi0 or lo1 > hi1:
                    continue
                for i in range(lo0, hi0 + 1):
                    z = (ys0[i] - c0) * inv_s
                    w0[i] = math.exp(-0.5 * z * z)
                for i in range(lo1, hi1 + 1):
                    z = (ys1[i] - c1) * inv_s
                    w1[i] = math.exp(-0.5 * z * z)
                coef = mab * node_w[m] * norm
                for i in range(lo0, hi0 + 1):
                    ci = coef * w0[i]
                    for k in range(lo1, hi1 + 1):
                        out[i, k] += ci * w1[k]


@nb.njit(cache=True)
def duhamel_step_1d(mass, ws, drifts, node_w, tau, r_off, r_w, ys, out, out_abs):
    """Accumulate sum_w sum_m sum_r mass[w] node_w[m] r_w[r] b dg/dy(tau, y - w - b r_off[r]).

    ``drifts[m, w]`` is the cutoff drift at node m; ``out_abs`` collects the sum
    of absolute values of the summands (round-off scale).
    """
    inv_tau = 1.0 / tau
    sig = math.sqrt(tau)
    norm = _INV_SQRT_2PI / sig
    for w in range(ws.shape[0]):
        mw = mass[w]
        if mw == 0.0:
            continue
        for m in range(drifts.shape[0]):
            b = drifts[m, w]
            if b == 0.0:
                continue
            reach = TRUNC * sig + abs(b) * r_off[r_off.shape[0] - 1]
            coef = mw * node_w[m] * b
            for i in range(ys.shape[0]):
                base = ys[i] - ws[w]
                if abs(base) > reach:
                    continue
                acc = 0.0
                for r in range(r_off.shape[0]):
                    z = base - b * r_off[r]
                    acc += r_w[r] * (-z * inv_tau) * norm * math.exp(-0.5 * z * z * inv_tau)
                term = coef * acc
                out[i] += term
                out_abs[i] += abs(term)
