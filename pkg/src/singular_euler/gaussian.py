"""Gaussian kernels g_c, their derivatives, and numeric checks of kernel bounds.

g_c(u, x) = (2 pi c u)^(-d/2) exp(-|x|^2 / (2 c u)).

Points carry the dimension on the last axis. Derivatives of the unit-variance
kernel use probabilists' Hermite polynomials:
d^k/dx^k g_1(u, x) = (-1)^k u^(-k/2) He_k(x / sqrt(u)) g_1(u, x) per axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.polynomial import hermite_e
from scipy import integrate
from scipy.special import betaln

from .driftlib import DriftSpec, _space_hints, evaluate, lq_lrho_norm

TRUNCATION_SIGMAS = 10.0
INEQUALITIES = ("GradBound", "TimeDerivBound", "SpaceHolder", "TimeHolder")


def _check_u(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(~(u > 0)):
        raise ValueError("time argument u must be > 0")
    return u


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(1) if x.ndim == 0 else x


@dataclass(frozen=True)
class GaussKernel:
    c: float = 1.0
    d: int = 1

    def __post_init__(self) -> None:
        if self.c < 1:
            raise ValueError("variance inflation c must be >= 1")

    def __call__(self, u, x) -> np.ndarray:
        return g(self.c, u, x)


def g(c: float, u, x) -> np.ndarray:
    """g_c(u, x); ``x`` has shape (..., d), result has shape (...)."""
    u = _check_u(u)
    x = _points(x)
    d = x.shape[-1]
    r2 = np.sum(x * x, axis=-1)
    cu = c * u
    return (2.0 * math.pi * cu) ** (-0.5 * d) * np.exp(-r2 / (2.0 * cu))


def g1d(c: float, u, x) -> np.ndarray:
    """g_c in dimension one with scalar (array) positions."""
    x = np.asarray(x, dtype=float)
    return g(c, u, x[..., None])


def grad_g(c: float, u, x) -> np.ndarray:
    u = _check_u(u)
    x = _points(x)
    return -(x / (c * u)[..., None] if np.ndim(u) else x / (c * u)) * g(c, u, x)[..., None]


def hess_g(c: float, u, x) -> np.ndarray:
    u = np.asarray(_check_u(u), dtype=float)
    x = _points(x)
    d = x.shape[-1]
    cu = (c * u)[..., None, None] if u.ndim else c * u
    outer = x[..., :, None] * x[..., None, :]
    return (outer / cu**2 - np.eye(d) / cu) * g(c, u, x)[..., None, None]


def beta_function(a: float, b: float) -> float:
    """B(a, b) from the log-gamma identity."""
    if not (a > 0 and b > 0):
        raise ValueError("beta function arguments must be > 0")
    return float(np.exp(betaln(a, b)))


# ---------------------------------------------------------------------------
# derivatives of the unit-variance kernel
# ---------------------------------------------------------------------------


def _hermite(k: int, v: np.ndarray) -> np.ndarray:
    coef = np.zeros(k + 1)
    coef[k] = 1.0
    return hermite_e.hermeval(v, coef)


def deriv_g1(zeta, u, x) -> np.ndarray:
    """nabla_x^zeta g_1(u, x) for a multi-index ``zeta`` (one entry per axis)."""
    u = _check_u(u)
    x = _points(x)
    zeta = tuple(int(k) for k in np.atleast_1d(zeta))
    if len(zeta) != x.shape[-1]:
        raise ValueError("multi-index length must equal d")
    su = np.sqrt(u)[..., None] if np.ndim(u) else math.sqrt(u)
    v = x / su
    factor = np.ones(x.shape[:-1])
    for axis, k in enumerate(zeta):
        if k:
            factor = factor * _hermite(k, v[..., axis])
    order = sum(zeta)
    return (-1.0) ** order * u ** (-0.5 * order) * factor * g(1.0, u, x)


def dt_deriv_g1(zeta, u, x) -> np.ndarray:
    """d/du nabla_x^zeta g_1(u, x) via the heat equation d/du g_1 = Laplacian(g_1) / 2."""
    x = _points(x)
    zeta = np.atleast_1d(np.asarray(zeta, dtype=int))
    out = np.zeros(np.broadcast_shapes(np.shape(u), x.shape[:-1]))
    for axis in range(x.shape[-1]):
        z2 = zeta.copy()
        z2[axis] += 2
        out = out + 0.5 * deriv_g1(z2, u, x)
    return out


def multi_indices(d: int, max_order: int = 2) -> list[tuple[int, ...]]:
    out = []
    for idx in np.ndindex(*([max_order + 1] * d)):
        if sum(idx) <= max_order:
            out.append(tuple(int(i) for i in idx))
    return sorted(out, key=lambda z: (sum(z), z))


# ---------------------------------------------------------------------------
# sensitivity constants
# ---------------------------------------------------------------------------


def _weight(c: float, u, x) -> np.ndarray:
    """Comparison kernel c^(d/2) g_c(u, x) = (2 pi u)^(-d/2) exp(-|x|^2/(2 c u))."""
    x = _points(x)
    return c ** (0.5 * x.shape[-1]) * g(c, u, x)


def sensitivity_ratio(inequality_id: str, c: float, zeta, u, x, u2=None, x2=None) -> np.ndarray:
    """Ratio of the kernel sensitivity to its Gaussian majorant (without the constant)."""
    if not c > 1:
        raise ValueError("sensitivity bounds need c > 1")
    u = _check_u(u)
    x = _points(x)
    order = int(np.sum(zeta))
    if inequality_id == "GradBound":
        lhs = np.abs(deriv_g1(zeta, u, x))
        return lhs / (u ** (-0.5 * order) * _weight(c, u, x))
    if inequality_id == "TimeDerivBound":
        lhs = np.abs(dt_deriv_g1(zeta, u, x))
        return lhs / (u ** (-1.0 - 0.5 * order) * _weight(c, u, x))
    if inequality_id == "SpaceHolder":
        x2 = _points(x2)
        dist = np.sqrt(np.sum((x - x2) ** 2, axis=-1))
        lhs = np.abs(deriv_g1(zeta, u, x) - deriv_g1(zeta, u, x2))
        scale = np.minimum(dist, np.sqrt(u)) / u ** (0.5 * (1 + order))
        den = scale * (_weight(c, u, x) + _weight(c, u, x2))
        return np.where(dist > 0, lhs / np.where(dist > 0, den, 1.0), 0.0)
    if inequality_id == "TimeHolder":
        u2 = _check_u(u2)
        lo = np.minimum(u, u2)
        gap = np.abs(u2 - u)
        lhs = np.abs(deriv_g1(zeta, u2, x) - deriv_g1(zeta, u, x))
        scale = np.minimum(gap, lo) / lo ** (1.0 + 0.5 * order)
        den = scale * (_weight(c, u, x) + _weight(c, u2, x))
        return np.where(gap > 0, lhs / np.where(gap > 0, den, 1.0), 0.0)
    raise ValueError(f"unknown inequality {inequality_id!r}")


@dataclass(frozen=True)
class GridSpec:
    """Sampling grid: u in logspace(u_min, T), |x|/sqrt(u) in linspace(0, v_max)."""

    u_min: float = 1e-4
    T: float = 1.0
    v_max: float = 8.0
    points: int = 64

    def refined(self) -> "GridSpec":
        return GridSpec(self.u_min, self.T, self.v_max, 2 * self.points)

    def u_grid(self) -> np.ndarray:
        return np.logspace(math.log10(self.u_min), math.log10(self.T), self.points)

    def v_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.v_max, self.points)


def _diagonal_limit(inequality_id: str, c: float, k: int, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Limit of the Hoelder ratio as x' -> x (space) or u' -> u (time)."""
    U, V = np.meshgrid(us, vs, indexing="ij")
    x = (V * np.sqrt(U))[..., None]
    if inequality_id == "SpaceHolder":
        lhs = np.abs(deriv_g1((k + 1,), U, x))
        return lhs / (2.0 * U ** (-0.5 * (k + 1)) * _weight(c, U, x))
    lhs = np.abs(dt_deriv_g1((k,), U, x))
    return lhs / (2.0 * U ** (-1.0 - 0.5 * k) * _weight(c, U, x))


@dataclass(frozen=True)
class SensitivityResult:
    inequality_id: str
    c: float
    constant: float
    per_order: dict[int, float]
    grid: GridSpec


def sensitivity_constant_search(
    inequality_id: str, c: float, grid_spec: GridSpec | None = None
) -> SensitivityResult:
    """Sup of :func:`sensitivity_ratio` over the grid and all |zeta| <= 2 (d = 1).

    Reported constants are the sup over the sampled points, so they are lower
    estimates of the true constants; the refinement check in the test-suite
    measures how far they move when the grid is doubled.
    """
    if not c > 1:
        raise ValueError("sensitivity bounds need c > 1")
    grid = grid_spec or GridSpec()
    us = grid.u_grid()
    vs = grid.v_grid()
    signed = np.concatenate([-vs[:0:-1], vs])
    per_order: dict[int, float] = {}
    for zeta in multi_indices(1):
        k = zeta[0]
        if inequality_id in ("GradBound", "TimeDerivBound"):
            U, V = np.meshgrid(us, vs, indexing="ij")
            r = sensitivity_ratio(inequality_id, c, zeta, U, (V * np.sqrt(U))[..., None])
        elif inequality_id == "SpaceHolder":
            U, V1, V2 = np.meshgrid(us, signed, signed, indexing="ij")
            su = np.sqrt(U)
            r = sensitivity_ratio(
                inequality_id, c, zeta, U, (V1 * su)[..., None], x2=(V2 * su)[..., None]
            )
        elif inequality_id == "TimeHolder":
            U1, U2, V = np.meshgrid(us, us, vs, indexing="ij")
            x = (V * np.sqrt(np.minimum(U1, U2)))[..., None]
            r = sensitivity_ratio(inequality_id, c, zeta, U1, x, u2=U2)
        else:
            raise ValueError(f"unknown inequality {inequality_id!r}")
        best = float(np.max(r))
        if inequality_id in ("SpaceHolder", "TimeHolder"):
            # the ratio extends continuously to the diagonal; include that limit in the sup
            best = max(best, float(np.max(_diagonal_limit(inequality_id, c, k, us, signed))))
        per_order[k] = max(per_order.get(k, 0.0), best)
    return SensitivityResult(inequality_id, c, max(per_order.values()), per_order, grid)


# ---------------------------------------------------------------------------
# Gaussian-convolution bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheckReport:
    params: dict[str, Any]
    lhs: float
    rhs: float
    satisfied: bool
    abserr: float
    tolerance: float = 1e-6
    extras: dict[str, Any] = field(default_factory=dict)

    def row(self) -> dict[str, Any]:
        return {**self.params, "lhs": self.lhs, "rhs": self.rhs, "satisfied": self.satisfied}


def _conj(p: float) -> float:
    if math.isinf(p):
        return 1.0
    if p == 1:
        return math.inf
    return p / (p - 1.0)


def holder_constant(rho_p: float, c: float, d: int = 1) -> float:
    """Constant from the spatial Hoelder step: (2 pi c)^(-d/(2 rho')) rhobar'^(-d/(2 rhobar'))."""
    if math.isinf(rho_p):
        return 1.0
    rbar = _conj(rho_p)
    return (2.0 * math.pi * c) ** (-d / (2.0 * rho_p)) * rbar ** (-d / (2.0 * rbar))


def convolution_rhs(
    rho_p: float, q_p: float, beta: float, gamma: float, phi_norm: float, c: float,
    s: float, t: float, x, y, d: int = 1,
) -> float:
    span = t - s
    e = 0.0 if math.isinf(rho_p) else d / (2.0 * rho_p)
    qbar = _conj(q_p)
    inv_q = 0.0 if math.isinf(q_p) else 1.0 / q_p
    gc = float(g(c, span, np.asarray(y, float) - np.asarray(x, float)))
    bfun = beta_function(1.0 - qbar * (beta + e), 1.0 - qbar * (gamma + e))
    return (
        holder_constant(rho_p, c, d) * phi_norm * gc
        * span ** (1.0 - inv_q - (beta + gamma + e)) * bfun ** (1.0 / qbar)
    )


def _scalar_abs(phi: DriftSpec, u: float):
    """z -> |phi(u, z)| as a plain float function (d = 1)."""
    p = phi.params
    if phi.family == "PowerSingularity":
        theta, gam, R = abs(p["theta"]), p["gamma"], p["R"]
        return lambda z: theta * abs(z) ** -gam if 0.0 < abs(z) <= R else 0.0
    if phi.family in ("Constant", "BoundedSign"):
        level = phi.sup_norm()
        if phi.family == "BoundedSign":
            return lambda z: level if z != 0.0 else 0.0
        return lambda z: level
    if phi.family == "TimeSingular":
        inner = _scalar_abs(p["inner"], u)
        factor = u ** -p["delta"] if u > 0 else 0.0
        return lambda z: factor * inner(z)
    return lambda z: abs(float(evaluate(phi, u, np.array([[z]]))[0, 0]))


def _gauss_expectation_abs(phi: DriftSpec, u: float, m: float, sig: float, rho_p: float) -> tuple[float, float]:
    """E |phi(u, Z)| for Z ~ N(m, sig^2) in d = 1, truncated at 10 sigma."""
    S, sings = _space_hints(phi, rho_p if math.isfinite(rho_p) else 1.0)
    lo, hi = m - TRUNCATION_SIGMAS * sig, m + TRUNCATION_SIGMAS * sig
    if phi.family in ("PowerSingularity",):
        lo, hi = max(lo, -S), min(hi, S)
    if hi <= lo:
        return 0.0, 0.0
    norm = 1.0 / (math.sqrt(2.0 * math.pi) * sig)

    def dens(z):
        return norm * math.exp(-0.5 * ((z - m) / sig) ** 2)

    absphi = _scalar_abs(phi, u)

    cuts = sorted({lo, hi, *[a for a, _ in sings if lo < a < hi]})
    total, err = 0.0, 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        ex_a = next((e / max(rho_p, 1.0) if math.isfinite(rho_p) else 0.0 for p, e in sings if p == a), 0.0)
        ex_b = next((e / max(rho_p, 1.0) if math.isfinite(rho_p) else 0.0 for p, e in sings if p == b), 0.0)
        if ex_a > 0 or ex_b > 0:
            # factor out the algebraic singularity at the cut and let QUADPACK weight it
            sing = [p for p, _ in sings]

            def smooth(z, a=a, b=b):
                dist = abs(z - a) if a in sing else abs(z - b)
                return dens(z) * absphi(z) * dist ** max(ex_a, ex_b)

            val, e1 = integrate.quad(
                smooth, a, b, weight="alg", wvar=(-ex_a, -ex_b), epsabs=0.0, epsrel=1e-9, limit=100
            )
        else:
            val, e1 = integrate.quad(
                lambda z: dens(z) * absphi(z), a, b, epsabs=0.0, epsrel=1e-9, limit=100
            )
        total += val
        err += e1
    return total, err


def convolution_lhs(
    phi: DriftSpec, beta: float, gamma: float, c: float, s: float, t: float, x: float, y: float,
    rho_p: float = math.inf, epsrel: float = 1e-7,
) -> tuple[float, float]:
    """I(s, t) for f = 1 in d = 1 by nested quadrature.

    The product of the two kernels in z is g_c(t - s, y - x) times a normal
    density with mean (b x + a y)/(a + b) and variance c a b/(a + b), where
    a = u - s and b = t - u; the inner integral is therefore an expectation of
    |phi(u, .)| under that normal.
    """
    if phi.d != 1:
        raise NotImplementedError("convolution check implemented for d = 1")
    if phi.family == "Zero":
        return 0.0, 0.0
    span = t - s
    prefactor = float(g1d(c, span, y - x))

    def inner(u: float) -> float:
        a, b = u - s, t - u
        if a <= 0 or b <= 0:
            return 0.0
        m = (b * x + a * y) / span
        sig = math.sqrt(c * a * b / span)
        return _gauss_expectation_abs(phi, u, m, sig, rho_p)[0]

    val, err = integrate.quad(
        inner, s, t, weight="alg", wvar=(-beta, -gamma), epsabs=0.0, epsrel=epsrel, limit=100
    )
    return prefactor * val, prefactor * err


def convolution_bound_check(
    rho_p: float, q_p: float, beta: float, gamma: float, phi: DriftSpec,
    s: float, t: float, x: float, y: float, c: float = 2.0, tolerance: float = 1e-6,
) -> BoundCheckReport:
    """Compare I_{beta,gamma,1,phi}(s, t) with its closed-form majorant (f = 1, d = 1)."""
    if not 0 <= s < t:
        raise ValueError("need 0 <= s < t")
    if beta < 0 or gamma < 0:
        raise ValueError("beta, gamma must be >= 0")
    e = 0.0 if math.isinf(rho_p) else phi.d / (2.0 * rho_p)
    limit = 1.0 - (0.0 if math.isinf(q_p) else 1.0 / q_p)
    if not max(beta + e, gamma + e) < limit:
        raise ValueError(
            f"time singularity not integrable: max(beta, gamma) + d/(2 rho') = {max(beta, gamma) + e} "
            f">= 1 - 1/q' = {limit}"
        )
    if phi.family == "Zero":
        norm_val = 0.0
    else:
        norm_val = lq_lrho_norm(phi, t, rho=rho_p, q=q_p, t0=s).value
    rhs = convolution_rhs(rho_p, q_p, beta, gamma, norm_val, c, s, t, x, y, phi.d)
    lhs, err = convolution_lhs(phi, beta, gamma, c, s, t, x, y, rho_p)
    params = {
        "rho_p": rho_p, "q_p": q_p, "beta": beta, "gamma": gamma, "c": c,
        "s": s, "t": t, "x": x, "y": y, "phi": phi.family,
    }
    return BoundCheckReport(params, lhs, rhs, bool(lhs <= rhs * (1.0 + tolerance)), err, tolerance)


def random_convolution_draws(count: int, seed: int) -> list[dict[str, Any]]:
    """Admissible random draws for the convolution bound with power-singular phi (d = 1)."""
    gen = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        beta, gamma = gen.uniform(0.0, 0.4, size=2)
        rho_p = gen.uniform(2.0, 8.0)
        q_p = gen.uniform(3.0, 10.0)
        e = 1.0 / (2.0 * rho_p)
        if not max(beta, gamma) + e < 1.0 - 1.0 / q_p:
            continue
        phi_gamma = gen.uniform(0.0, 0.9) / rho_p
        phi = DriftSpec.power_singularity(
            theta=gen.uniform(0.5, 2.0), gamma=phi_gamma, R=gen.uniform(0.5, 2.0), rho=rho_p, q=q_p
        )
        s = gen.uniform(0.0, 0.5)
        t = s + gen.uniform(0.05, 1.0)
        x, y = gen.normal(0.0, 0.7, size=2)
        out.append({"rho_p": rho_p, "q_p": q_p, "beta": beta, "gamma": gamma, "phi": phi,
                    "s": s, "t": t, "x": float(x), "y": float(y)})
    return out
