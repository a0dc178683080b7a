"""Drift coefficient families, the two cutoff operators and L^q-L^rho norms.

Exponents equal to infinity are carried as ``math.inf`` and every formula
branches on :func:`math.isinf` explicitly rather than relying on a large float.

Points are arrays whose last axis has length ``d``; times broadcast against the
leading axes.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy import integrate
from scipy.special import gammaln

INF = math.inf

ZERO = "Zero"
CONSTANT = "Constant"
BOUNDED_SIGN = "BoundedSign"
POWER_SINGULARITY = "PowerSingularity"
TIME_SINGULAR = "TimeSingular"
CUSTOM = "Custom"

FAMILIES = (ZERO, CONSTANT, BOUNDED_SIGN, POWER_SINGULARITY, TIME_SINGULAR, CUSTOM)
_BOUNDED_PROFILES = (ZERO, CONSTANT, BOUNDED_SIGN)

NORM_RTOL = 1e-8


class InadmissibleDrift(ValueError):
    """Raised when (d, rho, q) violates rho >= 2 and d/rho + 2/q < 1."""


def _parse_exponent(v: Any) -> float:
    if isinstance(v, str):
        if v.strip().lower() in ("inf", "infinity", "+inf"):
            return INF
        return float(v)
    return float(v)


def _dump_exponent(v: float) -> Any:
    if math.isinf(v):
        return "inf"
    return int(v) if float(v).is_integer() else v


@dataclass(frozen=True)
class DriftSpec:
    """A drift family b(t, x) on [0, T] x R^d with declared exponents (rho, q).

    Families and parameters:

    * ``Zero``: b = 0.
    * ``Constant``: ``mu`` (length-d vector), b = mu.
    * ``BoundedSign``: ``beta``, b(x) = -beta x/|x| (b(0) = 0), pulling towards
      the origin when beta > 0.
    * ``PowerSingularity``: ``theta, gamma, R``,
      b(x) = theta x |x|^(-1-gamma) on 0 < |x| <= R, zero elsewhere and at 0.
    * ``TimeSingular``: ``delta, inner``, b(t, x) = t^(-delta) inner(x) with a
      bounded time-homogeneous ``inner`` profile; b(0, x) = 0.
    * ``Custom``: ``fn(t, x) -> array``; optional ``support`` (radius used by
      numeric norms), ``time_homogeneous``, ``sup`` (known sup norm),
      ``space_singularities`` / ``time_singularity`` exponent hints.
    """

    family: str
    params: Mapping[str, Any] = field(default_factory=dict)
    d: int = 1
    rho: float = INF
    q: float = INF

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown drift family {self.family!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("dimension d must be a positive integer")
        object.__setattr__(self, "rho", _parse_exponent(self.rho))
        object.__setattr__(self, "q", _parse_exponent(self.q))
        object.__setattr__(self, "params", dict(self.params))
        if not self.rho >= 2:
            raise ValueError(f"rho must be >= 2, got {self.rho}")
        if not self.q > 2:
            raise ValueError(f"q must lie in (2, inf], got {self.q}")
        p = self.params
        if self.family == CONSTANT:
            mu = np.atleast_1d(np.asarray(p["mu"], dtype=float))
            if mu.shape != (self.d,):
                raise ValueError("mu must have length d")
            p["mu"] = tuple(float(v) for v in mu)
        elif self.family == BOUNDED_SIGN:
            p["beta"] = float(p["beta"])
        elif self.family == POWER_SINGULARITY:
            for key in ("theta", "gamma", "R"):
                p[key] = float(p[key])
            if p["gamma"] < 0 or p["R"] <= 0:
                raise ValueError("PowerSingularity needs gamma >= 0 and R > 0")
            if not math.isinf(self.rho) and p["gamma"] * self.rho >= self.d:
                raise ValueError(
                    f"PowerSingularity with gamma*rho = {p['gamma'] * self.rho} >= d "
                    "is not locally rho-integrable"
                )
        elif self.family == TIME_SINGULAR:
            p["delta"] = float(p["delta"])
            inner = p["inner"]
            if not isinstance(inner, DriftSpec):
                inner = DriftSpec.from_dict(inner)
            if inner.family not in _BOUNDED_PROFILES:
                raise ValueError("TimeSingular needs a bounded time-homogeneous inner profile")
            if inner.d != self.d:
                raise ValueError("inner profile dimension mismatch")
            p["inner"] = inner
            if p["delta"] < 0:
                raise ValueError("delta must be >= 0")
            if not math.isinf(self.q) and p["delta"] * self.q >= 1:
                raise ValueError(f"TimeSingular with delta*q = {p['delta'] * self.q} >= 1")
        elif self.family == CUSTOM:
            if not callable(p.get("fn")):
                raise ValueError("Custom drift needs a callable 'fn'")

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, d: int = 1, rho: float = INF, q: float = INF) -> "DriftSpec":
        return cls(ZERO, {}, d, rho, q)

    @classmethod
    def constant(cls, mu, rho: float = INF, q: float = INF) -> "DriftSpec":
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return cls(CONSTANT, {"mu": mu}, mu.size, rho, q)

    @classmethod
    def bounded_sign(cls, beta: float, d: int = 1, rho: float = INF, q: float = INF) -> "DriftSpec":
        return cls(BOUNDED_SIGN, {"beta": beta}, d, rho, q)

    @classmethod
    def power_singularity(
        cls, theta: float, gamma: float, R: float, d: int = 1, rho: float = 2.0, q: float = INF
    ) -> "DriftSpec":
        return cls(POWER_SINGULARITY, {"theta": theta, "gamma": gamma, "R": R}, d, rho, q)

    @classmethod
    def time_singular(cls, delta: float, inner: "DriftSpec", q: float, rho: float = INF) -> "DriftSpec":
        return cls(TIME_SINGULAR, {"delta": delta, "inner": inner}, inner.d, rho, q)

    @classmethod
    def custom(cls, fn: Callable, d: int = 1, rho: float = INF, q: float = INF, **hints) -> "DriftSpec":
        return cls(CUSTOM, {"fn": fn, **hints}, d, rho, q)

    # -- properties --------------------------------------------------------
    @property
    def time_homogeneous(self) -> bool:
        if self.family == TIME_SINGULAR:
            return self.params["delta"] == 0
        if self.family == CUSTOM:
            return bool(self.params.get("time_homogeneous", False))
        return True

    @property
    def is_odd(self) -> bool:
        """True when b(t, -x) = -b(t, x) holds exactly."""
        if self.family in (ZERO, BOUNDED_SIGN, POWER_SINGULARITY):
            return True
        if self.family == TIME_SINGULAR:
            return self.params["inner"].is_odd
        if self.family == CONSTANT:
            return not any(self.params["mu"])
        return bool(self.params.get("odd", False))

    def sup_norm(self) -> float:
        """ess sup over [0, T] x R^d of |b|; inf for unbounded families."""
        p = self.params
        if self.family == ZERO:
            return 0.0
        if self.family == CONSTANT:
            return math.hypot(*p["mu"])
        if self.family == BOUNDED_SIGN:
            return abs(p["beta"])
        if self.family == POWER_SINGULARITY:
            if p["theta"] == 0:
                return 0.0
            return abs(p["theta"]) * p["R"] ** (-p["gamma"]) if p["gamma"] == 0 else INF
        if self.family == TIME_SINGULAR:
            inner = p["inner"].sup_norm()
            if inner == 0:
                return 0.0
            return inner if p["delta"] == 0 else INF
        return float(p.get("sup", INF))

    def scaled(self, lam: float) -> "DriftSpec":
        """The drift lam * b (lam >= 0)."""
        if lam < 0:
            raise ValueError("scale must be nonnegative")
        p = dict(self.params)
        if self.family == CONSTANT:
            p["mu"] = tuple(lam * v for v in p["mu"])
        elif self.family == BOUNDED_SIGN:
            p["beta"] = lam * p["beta"]
        elif self.family == POWER_SINGULARITY:
            p["theta"] = lam * p["theta"]
        elif self.family == TIME_SINGULAR:
            p["inner"] = p["inner"].scaled(lam)
        elif self.family == CUSTOM:
            fn = p["fn"]
            p["fn"] = lambda t, x, _fn=fn: lam * np.asarray(_fn(t, x))
            if "sup" in p:
                p["sup"] = lam * p["sup"]
        return DriftSpec(self.family, p, self.d, self.rho, self.q)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        if self.family == CUSTOM:
            raise TypeError("Custom drifts carry a callable and cannot be serialized")
        params = {}
        for key, val in self.params.items():
            if isinstance(val, DriftSpec):
                params[key] = val.to_dict()
            elif isinstance(val, tuple):
                params[key] = list(val)
            else:
                params[key] = val
        return {
            "family": self.family,
            "params": params,
            "d": self.d,
            "rho": _dump_exponent(self.rho),
            "q": _dump_exponent(self.q),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "DriftSpec":
        params = dict(obj.get("params", {}))
        if obj["family"] == TIME_SINGULAR and isinstance(params.get("inner"), Mapping):
            params["inner"] = cls.from_dict(params["inner"])
        return cls(obj["family"], params, int(obj.get("d", 1)), obj.get("rho", INF), obj.get("q", INF))

    @classmethod
    def from_json(cls, text: str) -> "DriftSpec":
        return cls.from_dict(json.loads(text))


def _norm_last(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 1:
        return np.abs(x[..., 0])
    return np.sqrt(np.sum(x * x, axis=-1))


def _as_points(drift: DriftSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != drift.d:
        raise ValueError(f"points must have last axis of length d={drift.d}, got shape {x.shape}")
    return x


def evaluate(drift: DriftSpec, t, x) -> np.ndarray:
    """Pointwise b(t, x); singular points get the value 0."""
    x = _as_points(drift, x)
    p = drift.params
    fam = drift.family
    if fam == ZERO:
        return np.zeros_like(x)
    if fam == CONSTANT:
        return np.broadcast_to(np.asarray(p["mu"]), x.shape).copy()
    if fam == BOUNDED_SIGN:
        if drift.d == 1:
            return -p["beta"] * np.sign(x)
        r = _norm_last(x)
        safe = np.where(r > 0, r, 1.0)
        return np.where((r > 0)[..., None], -p["beta"] * x / safe[..., None], 0.0)
    if fam == POWER_SINGULARITY:
        r = _norm_last(x)
        inside = (r > 0) & (r <= p["R"])
        safe = np.where(inside, r, 1.0)
        factor = np.where(inside, p["theta"] * safe ** (-1.0 - p["gamma"]), 0.0)
        return factor[..., None] * x
    if fam == TIME_SINGULAR:
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        pos = t > 0
        factor = np.where(pos, np.where(pos, t, 1.0) ** (-p["delta"]), 0.0)
        return factor[..., None] * evaluate(p["inner"], t, x)
    out = np.asarray(p["fn"](t, x), dtype=float)
    return np.broadcast_to(out, x.shape).copy()


@dataclass(frozen=True)
class ConditionReport:
    admissible: bool
    alpha: float | None
    threshold_exponent: float
    failure_reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "admissible": self.admissible,
            "alpha": self.alpha,
            "threshold_exponent": self.threshold_exponent,
            "failure_reason": self.failure_reason,
        }


def _ratio(num: float, den: float) -> float:
    return 0.0 if math.isinf(den) else num / den


def check_condition(d: int, rho: float, q: float) -> ConditionReport:
    """Admissibility rho >= 2, d/rho + 2/q < 1 and the gap alpha."""
    rho = _parse_exponent(rho)
    q = _parse_exponent(q)
    if d < 1 or not rho > 0 or not q > 0:
        raise ValueError("need d >= 1 and rho, q > 0")
    s = _ratio(d, rho) + _ratio(2.0, q)
    threshold = _ratio(1.0, q) + _ratio(d, 2.0 * rho)
    if rho < 2:
        return ConditionReport(False, None, threshold, f"rho = {rho} < 2")
    if not s < 1:
        return ConditionReport(False, None, threshold, f"d/rho + 2/q = {s} is not < 1")
    return ConditionReport(True, 1.0 - s, threshold)


def require_admissible(drift: DriftSpec) -> ConditionReport:
    rep = check_condition(drift.d, drift.rho, drift.q)
    if not rep.admissible:
        raise InadmissibleDrift(rep.failure_reason)
    return rep


def default_cutoff_constant(drift: DriftSpec) -> float:
    """sup |b| for bounded drifts (so that b_h = b), otherwise 1."""
    s = drift.sup_norm()
    if math.isinf(s) or s == 0:
        return 1.0
    return s


def _clamp(b: np.ndarray, threshold) -> np.ndarray:
    threshold = np.asarray(threshold, dtype=float)
    if b.shape[-1] == 1:
        thr = threshold[..., None] if threshold.ndim else threshold
        return np.clip(b, -thr, thr)
    nb = _norm_last(b)
    over = nb > threshold
    scale = np.where(over, threshold / np.where(over, nb, 1.0), 1.0)
    return b * scale[..., None]


def cutoff_threshold(
    drift: DriftSpec, h: float, B: float, variant: str = "primary", strict: bool = True
) -> float:
    """Cutoff level; ``strict=False`` skips the admissibility check (exponent still used)."""
    if h <= 0 or B <= 0:
        raise ValueError("need h > 0 and B > 0")
    if strict:
        rep = require_admissible(drift)
    else:
        rep = check_condition(drift.d, drift.rho, drift.q)
    if variant == "primary":
        return B * h ** (-rep.threshold_exponent)
    if variant == "zero_first":
        return B * h ** -0.5
    raise ValueError(f"unknown scheme variant {variant!r}")


def cutoff_primary(drift: DriftSpec, h: float, B: float, t, x, strict: bool = True) -> np.ndarray:
    """b_h: direction of b, magnitude min(|b|, B h^-(1/q + d/(2 rho)))."""
    thr = cutoff_threshold(drift, h, B, "primary", strict)
    return _clamp(evaluate(drift, t, x), thr)


def cutoff_zero_first(drift: DriftSpec, h: float, B: float, t, x, strict: bool = True) -> np.ndarray:
    """Alternative cutoff at B h^-1/2, switched off on [0, h)."""
    thr = cutoff_threshold(drift, h, B, "zero_first", strict)
    x = _as_points(drift, x)
    b = _clamp(evaluate(drift, t, x), thr)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    return np.where((t >= h)[..., None], b, 0.0)


def cutoff(
    drift: DriftSpec, h: float, B: float, t, x, variant: str = "primary", strict: bool = True
) -> np.ndarray:
    if variant == "primary":
        return cutoff_primary(drift, h, B, t, x, strict)
    if variant == "zero_first":
        return cutoff_zero_first(drift, h, B, t, x, strict)
    raise ValueError(f"unknown scheme variant {variant!r}")


# ---------------------------------------------------------------------------
# L^q - L^rho norms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormReport:
    value: float
    abserr: float
    method: str
    member: bool


def _sphere_area(d: int) -> float:
    return 2.0 * math.exp(0.5 * d * math.log(math.pi) - gammaln(0.5 * d))


def _space_norm_closed(drift: DriftSpec, rho: float) -> float:
    """||b(t, .)||_{L^rho} for the time-homogeneous built-ins."""
    p = drift.params
    fam = drift.family
    if fam == ZERO:
        return 0.0
    if fam in (CONSTANT, BOUNDED_SIGN):
        level = drift.sup_norm()
        if level == 0:
            return 0.0
        return level if math.isinf(rho) else INF
    if fam == POWER_SINGULARITY:
        theta, gamma, R, d = p["theta"], p["gamma"], p["R"], drift.d
        if theta == 0:
            return 0.0
        if math.isinf(rho):
            return abs(theta) * R ** -gamma if gamma == 0 else INF
        if gamma * rho >= d:
            return INF
        return abs(theta) * (_sphere_area(d) * R ** (d - gamma * rho) / (d - gamma * rho)) ** (1.0 / rho)
    raise ValueError(f"no closed form for {fam}")


def _time_factor_closed(drift: DriftSpec, q: float, t0: float, t1: float) -> float:
    """||t -> f(t)||_{L^q([t0, t1])} for the time profile of the drift."""
    if drift.family != TIME_SINGULAR or drift.params["delta"] == 0:
        return 1.0 if math.isinf(q) else (t1 - t0) ** (1.0 / q)
    delta = drift.params["delta"]
    if math.isinf(q):
        return t0 ** -delta if t0 > 0 else INF
    e = 1.0 - delta * q
    if e <= 0 and t0 == 0:
        return INF
    if e == 0:
        return math.log(t1 / t0) ** (1.0 / q)
    return ((t1 ** e - t0 ** e) / e) ** (1.0 / q)


def _closed_form_norm(drift: DriftSpec, rho: float, q: float, t0: float, t1: float) -> float:
    if drift.family == TIME_SINGULAR:
        space = _space_norm_closed(drift.params["inner"], rho)
    else:
        space = _space_norm_closed(drift, rho)
    if space == 0:
        return 0.0
    return space * _time_factor_closed(drift, q, t0, t1)


def _power_sub_quad(f: Callable[[float], float], a: float, b: float, p: float) -> tuple[float, float]:
    """Integral of f over [a, b] where f ~ (x - a)^(-p) near a, via x = a + (b-a) v^(1/(1-p))."""
    if p <= 0:
        return integrate.quad(f, a, b, epsrel=NORM_RTOL, epsabs=0.0, limit=200)
    m = 1.0 / (1.0 - p)
    L = b - a

    def g(v: float) -> float:
        if v == 0.0:
            return 0.0
        return f(a + L * v ** m) * L * m * v ** (m - 1.0)

    return integrate.quad(g, 0.0, 1.0, epsrel=NORM_RTOL, epsabs=0.0, limit=200)


def _space_hints(drift: DriftSpec, rho: float) -> tuple[float, list[tuple[float, float]]]:
    """(support radius, [(singular point, exponent of |b|^rho)]) for numeric norms."""
    p = drift.params
    if drift.family == POWER_SINGULARITY:
        return p["R"], [(0.0, p["gamma"] * rho)]
    if drift.family == TIME_SINGULAR:
        return _space_hints(p["inner"], rho)
    if drift.family == CUSTOM:
        sings = [(float(a), float(e) * rho) for a, e in p.get("space_singularities", [])]
        return float(p.get("support", 10.0)), sings
    return 10.0, []


def _numeric_norm(drift: DriftSpec, rho: float, q: float, t0: float, t1: float) -> tuple[float, float, bool]:
    if drift.d != 1:
        raise NotImplementedError("numeric L^q-L^rho norms are implemented for d = 1")
    S, sings = _space_hints(drift, rho)
    cuts = sorted({-S, S, *[a for a, _ in sings if -S < a < S]})
    if drift.family in (CONSTANT, BOUNDED_SIGN) and not math.isinf(rho) and drift.sup_norm() > 0:
        return INF, 0.0, False

    def space_norm(t: float) -> tuple[float, float]:
        if math.isinf(rho):
            xs = np.linspace(-S, S, 200_001)
            vals = np.abs(evaluate(drift, t, xs[:, None])[:, 0])
            m = float(np.max(vals))
            return m, 0.0
        total, err = 0.0, 0.0
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            mid = 0.5 * (lo + hi)
            ex_lo = max([e for a, e in sings if a == lo] or [0.0])
            ex_hi = max([e for a, e in sings if a == hi] or [0.0])
            if ex_lo >= 1 or ex_hi >= 1:
                return INF, 0.0

            def f(y: float) -> float:
                return float(np.abs(evaluate(drift, t, np.array([[y]]))[0, 0])) ** rho

            half = mid - lo
            # integrate in the distance from each endpoint so the singular point is hit exactly
            v1, e1 = _power_sub_quad(lambda s: f(lo + s), 0.0, half, ex_lo)
            v2, e2 = _power_sub_quad(lambda s: f(hi - s), 0.0, half, ex_hi)
            total += v1 + v2
            err += e1 + e2
        return total ** (1.0 / rho), err / max(rho * total ** (1.0 - 1.0 / rho), 1e-300)

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            if drift.time_homogeneous:
                val, err = space_norm(0.5 * (t0 + t1))
                if math.isinf(q):
                    return val, err, math.isfinite(val)
                factor = (t1 - t0) ** (1.0 / q)
                return val * factor, err * factor, math.isfinite(val)
            if drift.family == TIME_SINGULAR:
                delta = drift.params["delta"]
            else:
                delta = float(drift.params.get("time_singularity", 0.0))
            if math.isinf(q):
                if delta > 0 and t0 == 0:
                    return INF, 0.0, False
                ts = np.linspace(t0, t1, 257)
                val = max(space_norm(float(t))[0] for t in ts)
                return val, 0.0, math.isfinite(val)
            if delta * q >= 1 and t0 == 0:
                return INF, 0.0, False
            val, err = _power_sub_quad(
                lambda t: space_norm(t)[0] ** q, t0, t1, delta * q if t0 == 0 else 0.0
            )
        except integrate.IntegrationWarning:
            return INF, INF, False
    out = val ** (1.0 / q)
    return out, err * out / max(q * val, 1e-300), math.isfinite(out)


def lq_lrho_norm(
    drift: DriftSpec,
    T: float,
    *,
    rho: float | None = None,
    q: float | None = None,
    t0: float = 0.0,
    method: str = "auto",
) -> NormReport:
    """Nested norm (int_{t0}^{T} ||b(t, .)||_rho^q dt)^(1/q), ess sup for infinite exponents.

    ``method`` is ``"auto"`` (closed form when registered), ``"closed"`` or
    ``"quadrature"``. Divergent integrals come back with ``member=False``.
    """
    rho = drift.rho if rho is None else _parse_exponent(rho)
    q = drift.q if q is None else _parse_exponent(q)
    if not T > t0 >= 0:
        raise ValueError("need 0 <= t0 < T")
    if method not in ("auto", "closed", "quadrature"):
        raise ValueError(f"unknown method {method!r}")
    if method != "quadrature" and drift.family != CUSTOM:
        val = _closed_form_norm(drift, rho, q, t0, T)
        return NormReport(val, 0.0, "closed", math.isfinite(val))
    if method == "closed":
        raise ValueError("Custom drifts have no closed-form norm")
    val, err, member = _numeric_norm(drift, rho, q, t0, T)
    return NormReport(val, err, "quadrature", member)


def cutoff_function(
    drift: DriftSpec, h: float, B: float, variant: str = "primary", strict: bool = True
) -> Callable[[Any, Any], np.ndarray]:
    """(t, x) -> cutoff drift with the threshold computed once."""
    thr = cutoff_threshold(drift, h, B, variant, strict)
    if variant == "primary":
        return lambda t, x: _clamp(evaluate(drift, t, x), thr)

    def zero_first(t, x):
        x = _as_points(drift, x)
        b = _clamp(evaluate(drift, t, x), thr)
        tt = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        return np.where((tt >= h)[..., None], b, 0.0)

    return zero_first
