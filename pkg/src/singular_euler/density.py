"""Exact transition densities of the scheme on a truncated grid.

The law of X_{t_{k+1}} given X_{t_k} = z is the mixture over the randomized
time s in [0, h] of Gaussians N(z + h b_h(t_k + s, z), h I). Densities are
carried as point values on a uniform lattice and propagated step by step with
trapezoid quadrature in the source variable; the first step from the start
point is evaluated analytically, so no discrete delta ever sits on the grid.
In one dimension, cells on which the drift is far from linear (jumps, kinks
of the cutoff, singular cores) sample the drift at sub-cell midpoints so that
a discontinuity inside a cell does not bias the pushed mass at order dx.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erfc, factorial, roots_legendre

from . import _kernels
from .driftlib import (
    BOUNDED_SIGN,
    CONSTANT,
    POWER_SINGULARITY,
    TIME_SINGULAR,
    ZERO,
    check_condition,
)
from .gaussian import g
from .scheme import SchemeParams

DEFAULT_N = {1: 2048, 2: 256}
DEFAULT_L_FACTOR = 8.0
DEFAULT_M = 16
TAIL_INFLATION = 2.0
MASS_UPPER_SLACK = 1e-8
CRAMER_CONSTANT = 1.0865
ROUNDOFF_FACTOR = 4.0 * np.finfo(float).eps
SUBCELLS = 32
BEND_RATIO = 0.1


class TruncationError(RuntimeError):
    """Mass escaped the truncated grid beyond the documented budget."""


def tail_bound(d: int, L_factor: float, c: float = TAIL_INFLATION) -> float:
    """d * P(|N(0, c T)| > L_factor sqrt(T)) per axis: d * erfc(L_factor / sqrt(2 c))."""
    return float(d * erfc(L_factor / math.sqrt(2.0 * c)))


def displacement_budget(params: SchemeParams) -> float:
    """Upper bound on |int_0^T b_h dt| along any path."""
    drift = params.drift
    p = drift.params
    if drift.family == ZERO:
        return 0.0
    if drift.family in (CONSTANT, BOUNDED_SIGN):
        return drift.sup_norm() * params.T
    if drift.family == POWER_SINGULARITY:
        # drift vanishes outside radius R; the last push out of the ball is at most one capped step
        thr = params.B * params.h ** -check_condition(drift.d, drift.rho, drift.q).threshold_exponent
        return p["R"] + thr * params.h
    if drift.family == TIME_SINGULAR:
        delta = p["delta"]
        return params.T ** (1.0 - delta) / (1.0 - delta) * p["inner"].sup_norm()
    return float(p.get("displacement", 0.0))


@dataclass(frozen=True)
class Grid:
    """Uniform lattice center + (j - (N - 1)/2) dx per axis, dx = 2L/(N - 1)."""

    center: tuple[float, ...]
    L: float
    N: int

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def dx(self) -> float:
        return 2.0 * self.L / (self.N - 1)

    def axis(self, i: int) -> np.ndarray:
        return self.center[i] + (np.arange(self.N) - 0.5 * (self.N - 1)) * self.dx

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(self.axis(i) for i in range(self.d))

    def points(self) -> np.ndarray:
        """Array of shape (N,)*d + (d,)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def weights(self) -> np.ndarray:
        w1 = np.full(self.N, self.dx)
        w1[0] = w1[-1] = 0.5 * self.dx
        out = w1
        for _ in range(1, self.d):
            out = np.multiply.outer(out, w1)
        return out

    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d


def default_grid(params: SchemeParams, N: int | None = None, L_factor: float = DEFAULT_L_FACTOR) -> Grid:
    d = params.d
    if d > 2:
        raise NotImplementedError("grid propagation is available for d <= 2 only")
    N = N or DEFAULT_N[d]
    L = L_factor * math.sqrt(params.T) + displacement_budget(params)
    return Grid(tuple(params.x), L, N)


@dataclass
class GridDensity:
    t: float
    grid: Grid
    values: np.ndarray
    mass: float = float("nan")
    tail_defect: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if math.isnan(self.mass):
            self.mass = float(np.sum(self.grid.weights() * self.values))
            self.tail_defect = 1.0 - self.mass

    def to_csv(self, path: str | Path | None = None, header: dict | None = None) -> str:
        buf = io.StringIO()
        for key, val in (header or {}).items():
            buf.write(f"# {key}: {val}\n")
        buf.write(f"# t: {self.t:.16e}\n# mass: {self.mass:.16e}\n")
        w = csv.writer(buf, lineterminator="\n")
        d = self.grid.d
        w.writerow([*[f"y{i}" for i in range(d)], "gamma"])
        pts = self.grid.points().reshape(-1, d)
        for p, v in zip(pts, self.values.reshape(-1)):
            w.writerow([*[f"{c:.16e}" for c in p], f"{v:.16e}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def randomization_nodes(params: SchemeParams, k: int, M: int = DEFAULT_M) -> tuple[np.ndarray, np.ndarray]:
    """Offsets s in [0, h] and weights approximating (1/h) int_0^h ds on step k.

    Time-homogeneous drifts need one node. For a t^-delta singularity on the
    first step the midpoint rule is applied after s = h v^(1/(1 - delta)).
    """
    h = params.h
    drift = params.drift
    if drift.time_homogeneous:
        return np.array([0.5 * h]), np.array([1.0])
    v = (np.arange(M) + 0.5) / M
    if k == 0 and drift.family == TIME_SINGULAR and params.variant == "primary":
        delta = drift.params["delta"]
        a = 1.0 / (1.0 - delta)
        s = h * v**a
        w = a * v ** (a - 1.0)
        return s, w / np.sum(w)
    return h * v, np.full(M, 1.0 / M)


def _step_drifts(params: SchemeParams, k: int, pts: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Cutoff drift at (t_k + s_m, z) for every node m and grid point z: shape (M,) + pts.shape."""
    bh = params.cutoff()
    t_k = k * params.T / params.n
    return np.stack([bh(t_k + s, pts) for s in offsets])


@dataclass(frozen=True)
class StepSources:
    """Quadrature sources of one 1-D step: position, owning grid node, sub-cell weight, drifts (M, P)."""

    points: np.ndarray
    owner: np.ndarray
    weight: np.ndarray
    drifts: np.ndarray

    def mass(self, node_mass: np.ndarray) -> np.ndarray:
        return node_mass[self.owner] * self.weight


def step_sources(params: SchemeParams, k: int, grid: Grid, offsets: np.ndarray) -> StepSources:
    """Grid nodes as sources; strongly non-linear drift cells carry SUBCELLS drift samples.

    A cell is split when |b(lo) + b(hi) - 2 b(node)| > BEND_RATIO |b(hi) - b(lo)| for any
    randomization node, with lo and hi the cell edges; linear drift is never split. Split
    sources stay at the node and only the drift is sampled at the sub-cell midpoints, so the
    drift-free part of every step is the plain node sum and the Duhamel sums telescope.
    """
    if grid.d != 1:
        raise ValueError("sub-cell sources are one-dimensional")
    axis = grid.axis(0)
    dx = grid.dx
    edges = np.append(axis - 0.5 * dx, axis[-1] + 0.5 * dx)
    b_node = _step_drifts(params, k, axis[:, None], offsets)[..., 0]
    b_edge = _step_drifts(params, k, edges[:, None], offsets)[..., 0]
    lo, hi = b_edge[:, :-1], b_edge[:, 1:]
    bend = np.abs(lo + hi - 2.0 * b_node)
    floor = 1e-12 * (np.abs(lo) + np.abs(hi) + np.abs(b_node))
    split = np.any(bend > BEND_RATIO * np.abs(hi - lo) + floor, axis=0)
    keep = np.flatnonzero(~split)
    cut = np.flatnonzero(split)
    frac = (np.arange(SUBCELLS) + 0.5) / SUBCELLS - 0.5
    sub = (axis[cut, None] + dx * frac[None, :]).ravel()
    b_sub = _step_drifts(params, k, sub[:, None], offsets)[..., 0]
    owner = np.concatenate([keep, np.repeat(cut, SUBCELLS)])
    weight = np.concatenate([np.ones(keep.size), np.full(sub.size, 1.0 / SUBCELLS)])
    drifts = np.concatenate([b_node[:, keep], b_sub], axis=1)
    order = np.argsort(owner, kind="stable")
    owner = owner[order]
    return StepSources(axis[owner], owner, weight[order], np.ascontiguousarray(drifts[:, order]))


def first_step_density(params: SchemeParams, k: int, t: float, x, y, M: int = DEFAULT_M) -> np.ndarray:
    """Density of X_t given X_{t_k} = x for t in (t_k, t_{k+1}] (mixture formula)."""
    t_k = k * params.T / params.n
    t_next = (k + 1) * params.T / params.n
    if not t_k < t <= t_next * (1 + 1e-14):
        raise ValueError("t must lie in (t_k, t_{k+1}]")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.ndim == 0 or y.shape[-1] != params.d:
        y = y[..., None]
    offsets, weights = randomization_nodes(params, k, M)
    bh = params.cutoff()
    tau = t - t_k
    out = np.zeros(y.shape[:-1])
    for s, w in zip(offsets, weights):
        b = bh(t_k + s, x[None, :])[0]
        out += w * g(1.0, tau, y - x - tau * b)
    return out


def _push(params: SchemeParams, grid: Grid, values: np.ndarray, k: int, tau: float, M: int) -> np.ndarray:
    """Density at t_k + tau from grid values at t_k (0 < tau <= h)."""
    offsets, weights = randomization_nodes(params, k, M)
    mass = grid.weights() * values
    out = np.zeros(grid.shape())
    sigma = math.sqrt(tau)
    if grid.d == 1:
        src = step_sources(params, k, grid, offsets)
        centers = src.points[None, :] + tau * src.drifts
        _kernels.push_1d(src.mass(mass), np.ascontiguousarray(centers), weights, sigma, grid.axis(0), out)
    else:
        pts = grid.points()
        drifts = _step_drifts(params, k, pts, offsets)
        centers = pts[None] + tau * drifts
        _kernels.push_2d(mass, np.ascontiguousarray(centers), weights, sigma, grid.axis(0), grid.axis(1), out)
    return out


@dataclass
class DensitySequence:
    params: SchemeParams
    grid: Grid
    M: int
    start_step: int
    start_point: tuple[float, ...]
    densities: list[GridDensity]
    keep: str = "all"

    def at_step(self, k: int) -> GridDensity:
        """Density at grid time t_k (k > start_step)."""
        if self.keep != "all":
            if k == self.params.n:
                return self.densities[-1]
            raise KeyError("only the final density was kept")
        return self.densities[k - self.start_step - 1]

    def at_time(self, t: float) -> np.ndarray:
        """Grid values at any t in (t_start, T] (intra-step times via the mixture)."""
        p = self.params
        h = p.h
        k0 = self.start_step
        j = max(k0, min(p.n - 1, math.ceil(t / h - 1e-12) - 1))
        t_j = j * p.T / p.n
        if abs(t - (j + 1) * p.T / p.n) <= 1e-12 * p.T:
            return self.at_step(j + 1).values
        if j == k0:
            pts = self.grid.points()
            return first_step_density(p, j, t, self.start_point, pts, self.M)
        return _push(p, self.grid, self.at_step(j).values, j, t - t_j, self.M)

    @property
    def final(self) -> GridDensity:
        return self.densities[-1]


def propagate(
    params: SchemeParams,
    grid: Grid | None = None,
    M: int = DEFAULT_M,
    *,
    keep: str = "all",
    start_step: int = 0,
    start_point=None,
    eps_budget: float | None = None,
    L_factor: float = DEFAULT_L_FACTOR,
) -> DensitySequence:
    """Densities of the scheme at t_{k+1}, ..., t_n started from ``start_point`` at t_k."""
    if keep not in ("all", "final"):
        raise ValueError("keep must be 'all' or 'final'")
    grid = grid or default_grid(params, L_factor=L_factor)
    if params.d != grid.d:
        raise ValueError("grid dimension mismatch")
    if not 0 <= start_step < params.n:
        raise ValueError("start_step must lie in [0, n)")
    x = tuple(params.x) if start_point is None else tuple(np.atleast_1d(start_point).astype(float))
    if eps_budget is None:
        eps_budget = tail_bound(grid.d, (grid.L - displacement_budget(params)) / math.sqrt(params.T))
    pts = grid.points()
    h = params.h
    kept: list[GridDensity] = []
    values = first_step_density(params, start_step, (start_step + 1) * params.T / params.n, x, pts, M)
    for k in range(start_step + 1, params.n + 1):
        if k > start_step + 1:
            values = _push(params, grid, values, k - 1, h, M)
        t_k = k * params.T / params.n
        dens = GridDensity(t_k, grid, values)
        if dens.tail_defect > eps_budget or dens.mass > 1.0 + MASS_UPPER_SLACK:
            raise TruncationError(
                f"mass {dens.mass!r} at t = {t_k} outside [1 - {eps_budget:.3e}, 1 + {MASS_UPPER_SLACK}]"
            )
        if keep == "all" or k == params.n:
            kept.append(dens)
    return DensitySequence(params, grid, M, start_step, x, kept, keep)


def reference_density(
    params: SchemeParams, n_ref: int, grid: Grid | None = None, M: int = DEFAULT_M, *, variant: str | None = None
) -> GridDensity:
    """Fine-step density at T standing in for the diffusion density."""
    if n_ref % params.n or n_ref // params.n < 16:
        raise ValueError("n_ref must be a multiple of n with n_ref / n >= 16")
    fine = SchemeParams(params.drift, params.T, n_ref, params.x, params.B, variant or params.variant)
    return propagate(fine, grid or default_grid(params), M, keep="final").final


# ---------------------------------------------------------------------------
# dense one-step kernel
# ---------------------------------------------------------------------------


@dataclass
class StepKernel:
    source: Grid
    target: Grid
    matrix: np.ndarray  # K[z, y]

    def row_masses(self) -> np.ndarray:
        return self.matrix @ self.target.weights().reshape(-1)

    def apply(self, values: np.ndarray) -> np.ndarray:
        w = self.source.weights().reshape(-1)
        return ((w * values.reshape(-1)) @ self.matrix).reshape(self.target.shape())


def build_step_kernel(
    params: SchemeParams, k: int, grid: Grid, M: int = DEFAULT_M, target: Grid | None = None
) -> StepKernel:
    target = target or grid
    src = grid.points().reshape(-1, grid.d)
    tgt = target.points().reshape(-1, target.d)
    offsets, weights = randomization_nodes(params, k, M)
    if grid.d == 1:
        sources = step_sources(params, k, grid, offsets)
        pts, owner, sub_w, drifts = sources.points[:, None], sources.owner, sources.weight, sources.drifts[..., None]
    else:
        pts, owner, sub_w = src, np.arange(src.shape[0]), np.ones(src.shape[0])
        drifts = _step_drifts(params, k, src, offsets)
    rows = np.zeros((pts.shape[0], tgt.shape[0]))
    for m, w in enumerate(weights):
        centers = pts + params.h * drifts[m]
        rows += w * g(1.0, params.h, tgt[None, :, :] - centers[:, None, :])
    K = np.zeros((src.shape[0], tgt.shape[0]))
    np.add.at(K, owner, sub_w[:, None] * rows)
    return StepKernel(grid, target, K)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def empirical_gaussian_bound(density: GridDensity, x, c: float = 2.0) -> float:
    """max_y density(y) / g_c(t, y - x) over the grid."""
    if not c > 1:
        raise ValueError("c must be > 1")
    pts = density.grid.points()
    gc = g(c, density.t, pts - np.asarray(x, dtype=float))
    ok = gc > 0
    return float(np.max(density.values[ok] / gc[ok]))


def holder_time_modulus(seq: DensitySequence, k: int, ell: int, t: float, c: float = 2.0) -> float:
    """max_y |G(t, y) - G(t_ell, y)| / [((t - t_ell)/(t_ell - t_k))^(alpha/2) (1 + 1{alpha=1} ln((t_ell - t_k)/h)) g_c(t - t_k, y - x)].

    ``seq`` must start at step ``k``.
    """
    p = seq.params
    if seq.start_step != k:
        raise ValueError("density sequence must start at step k")
    if not k < ell < p.n:
        raise ValueError("need k < ell < n")
    t_k = k * p.T / p.n
    t_l = ell * p.T / p.n
    if not t_l <= t <= (ell + 1) * p.T / p.n * (1 + 1e-14):
        raise ValueError("t must lie in [t_ell, t_{ell+1}]")
    if t == t_l:
        return 0.0
    alpha = check_condition(p.d, p.drift.rho, p.drift.q).alpha
    diff = np.abs(seq.at_time(t) - seq.at_step(ell).values)
    scale = ((t - t_l) / (t_l - t_k)) ** (0.5 * alpha)
    if alpha == 1.0:
        scale *= 1.0 + math.log((t_l - t_k) / p.h)
    pts = seq.grid.points()
    gc = g(c, t - t_k, pts - np.asarray(seq.start_point))
    ok = gc > 0
    return float(np.max(diff[ok] / (scale * gc[ok])))


@dataclass(frozen=True)
class DuhamelReport:
    t: float
    ys: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    residual: np.ndarray
    sup_residual: float
    budget: float
    budget_parts: dict

    @property
    def within(self) -> float:
        """sup residual / budget."""
        return self.sup_residual / self.budget if self.budget > 0 else (0.0 if self.sup_residual == 0 else math.inf)


def default_y_indices(grid: Grid, x: float, t: float, count: int = 41, spread: float = 4.0) -> np.ndarray:
    axis = grid.axis(0)
    targets = x + np.linspace(-spread, spread, count) * math.sqrt(t)
    idx = np.clip(np.rint((targets - axis[0]) / grid.dx).astype(int), 0, grid.N - 1)
    return np.unique(idx)


def _gauss_legendre_bound(R: int, length: float, bmax: float, tau: float) -> float:
    """A-priori bound on the R-point Gauss-Legendre error of int b dg/dy(tau, y - w - b r) dr.

    Uses the remainder (len^(2R+1) (R!)^4 / ((2R+1) ((2R)!)^3)) max|f^(2R)| with
    |d^m g_1(tau, .)| <= K sqrt(m!) (2 pi)^(-1/2) tau^(-(m+1)/2) (Cramer's bound).
    """
    m = 2 * R + 1
    rem = length**m * factorial(R) ** 4 / (m * factorial(2 * R) ** 3)
    deriv = CRAMER_CONSTANT * math.sqrt(factorial(m)) / math.sqrt(2.0 * math.pi) * tau ** (-(m + 1) / 2.0)
    return float(rem * bmax**m * deriv)


def duhamel_residual(
    seq: DensitySequence, params: SchemeParams | None = None, t: float | None = None,
    y_indices: Sequence[int] | None = None, R: int = 4,
) -> DuhamelReport:
    """Residual of G(t, y) - [g_1(t, y - x) - int_0^t E[b_h(U, X_tau) . grad_y g_1(t - r, y - X_r)] dr].

    On step j the inner expectation is written with the stored density at t_j
    (the start point for j = 0), the randomization nodes of the propagation,
    and the Gaussian convolution in the intra-step variable done in closed
    form; the r-integral uses ``R``-point Gauss-Legendre.
    """
    p = params or seq.params
    if seq.grid.d != 1:
        raise NotImplementedError("Duhamel residual implemented for d = 1")
    if seq.start_step != 0 or seq.keep != "all":
        raise ValueError("need a full density sequence started at t = 0")
    t = p.T if t is None else t
    grid = seq.grid
    axis = grid.axis(0)
    x0 = seq.start_point[0]
    idx = default_y_indices(grid, x0, t) if y_indices is None else np.asarray(y_indices)
    ys = axis[idx]
    h = p.h
    J = max(0, min(p.n - 1, math.ceil(t / h - 1e-12) - 1))
    nodes, glw = roots_legendre(R)
    acc = np.zeros(ys.shape[0])
    acc_abs = np.zeros(ys.shape[0])
    gl_budget = 0.0
    alias_budget = 0.0
    weights = grid.weights()
    for j in range(J + 1):
        t_j = j * p.T / p.n
        length = min(h, t - t_j)
        tau = t - t_j
        r_off = 0.5 * length * (nodes + 1.0)
        r_w = 0.5 * length * glw
        offsets, node_w = randomization_nodes(p, j, seq.M)
        if j == 0:
            src = np.array([x0])
            mass = np.array([1.0])
            drifts = _step_drifts(p, j, src[:, None], offsets)[..., 0]
        else:
            sources = step_sources(p, j, grid, offsets)
            src = sources.points
            mass = sources.mass(weights * seq.at_step(j).values)
            drifts = sources.drifts
        _kernels.duhamel_step_1d(
            np.ascontiguousarray(mass), src, np.ascontiguousarray(drifts), node_w, tau, r_off, r_w, ys, acc, acc_abs
        )
        bmax = float(np.max(np.abs(drifts))) if drifts.size else 0.0
        gl_budget += float(np.sum(np.abs(mass))) * _gauss_legendre_bound(R, length, bmax, tau)
        if j < J or tau > length:
            tau_next = t - min(t_j + h, t)
            if tau_next > 0:
                v = h * tau_next / (h + tau_next)
                alias_budget += 2.0 * math.exp(-2.0 * math.pi**2 * v / grid.dx**2) / math.sqrt(2 * math.pi * tau)
    lhs = seq.at_time(t)[idx]
    rhs = g(1.0, t, (ys - x0)[:, None]) - acc
    residual = lhs - rhs
    lhs_scale = float(np.max(np.abs(lhs))) if lhs.size else 0.0
    roundoff = ROUNDOFF_FACTOR * (float(np.max(acc_abs)) + lhs_scale) * (J + 2)
    truncation = (J + 1) * math.exp(-0.5 * _kernels.TRUNC**2) * max(lhs_scale, 1.0)
    parts = {
        "roundoff": roundoff,
        "aliasing": alias_budget,
        "gauss_legendre": gl_budget,
        "truncation": truncation,
    }
    return DuhamelReport(
        t, ys, lhs, rhs, residual, float(np.max(np.abs(residual))), sum(parts.values()), parts
    )
