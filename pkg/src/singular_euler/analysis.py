"""Error metrics, rate fitting, Monte Carlo weak error and Gronwall-Volterra constants."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import betainc, ndtri

from . import rng
from .density import DEFAULT_M, Grid, GridDensity, default_grid, propagate, reference_density
from .driftlib import check_condition
from .gaussian import beta_function, g
from .scheme import SchemeParams, stream_chunks

RATE_SLACK = 0.1
# log-scale residual norm above which a rate fit is flagged as possibly pre-asymptotic
RESIDUAL_FLAG = 0.25
MIN_MC_SAMPLES = 100


def _same_grid(a: GridDensity, b: GridDensity) -> None:
    if a.grid != b.grid:
        raise ValueError("densities live on different grids")
    if not math.isclose(a.t, b.t, rel_tol=1e-12, abs_tol=1e-15):
        raise ValueError("densities are at different times")


def weighted_sup_error(num: GridDensity, ref: GridDensity, x, c: float = 2.0) -> float:
    """max_y |num - ref| / g_c(t, y - x)."""
    if not c > 1:
        raise ValueError("c must be > 1")
    _same_grid(num, ref)
    gc = g(c, num.t, num.grid.points() - np.asarray(x, dtype=float))
    ok = gc > 0
    return float(np.max(np.abs(num.values - ref.values)[ok] / gc[ok]))


def tv_error(num: GridDensity, ref: GridDensity) -> float:
    """Half the trapezoid integral of |num - ref|."""
    _same_grid(num, ref)
    return 0.5 * float(np.sum(num.grid.weights() * np.abs(num.values - ref.values)))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual_norm: float
    residuals: tuple[float, ...]


def fit_rate(pairs: Sequence[tuple[float, float]]) -> RateFit:
    """Least-squares fit of log(error) = intercept + slope log(h)."""
    if len(pairs) < 3:
        raise ValueError("need at least 3 (h, error) pairs")
    h = np.array([p[0] for p in pairs], dtype=float)
    e = np.array([p[1] for p in pairs], dtype=float)
    if np.any(~(e > 0)) or np.any(~(h > 0)):
        raise ValueError("step sizes and errors must be > 0")
    A = np.column_stack([np.ones_like(h), np.log(h)])
    coef, *_ = np.linalg.lstsq(A, np.log(e), rcond=None)
    res = np.log(e) - A @ coef
    return RateFit(float(coef[1]), float(coef[0]), float(np.linalg.norm(res)), tuple(float(r) for r in res))


@dataclass
class RateReport:
    variant: str
    drift: dict
    rows: list[tuple[int, float, float, float]]
    slope: float
    intercept: float
    residual_norm: float
    alpha_over_2: float
    slack: float = RATE_SLACK
    passed: bool = False
    extras: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "h", "weighted_sup_error", "tv_error"])
        for n, h, ws, tv in self.rows:
            w.writerow([n, f"{h:.16e}", f"{ws:.16e}", f"{tv:.16e}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "drift": self.drift,
            "slope": self.slope,
            "intercept": self.intercept,
            "residual_norm": self.residual_norm,
            "alpha_over_2": self.alpha_over_2,
            "threshold": self.alpha_over_2 - self.slack,
            "pass": self.passed,
            "high_residual": bool(self.residual_norm > RESIDUAL_FLAG),
            **self.extras,
        }

    def write(self, out_dir: str | Path, stem: str = "rate") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.csv_text())
        (out / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def rate_study(
    params: SchemeParams,
    n_list: Sequence[int],
    n_ref: int,
    *,
    grid: Grid | None = None,
    M: int = DEFAULT_M,
    c: float = 2.0,
    reference: GridDensity | None = None,
    threads: int = 1,
) -> tuple[RateReport, dict[int, GridDensity], GridDensity]:
    """Weighted-sup and TV errors against a fine reference for every n in ``n_list``.

    The reference is the primary scheme at ``n_ref`` steps for both variants,
    since it stands in for the diffusion density shared by both schemes.
    """
    n_list = sorted(int(n) for n in n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    grid = grid or default_grid(params.with_n(n_list[0]))
    if reference is None:
        reference = reference_density(params.with_n(n_list[-1]), n_ref, grid, M, variant="primary")

    def run(n: int) -> GridDensity:
        return propagate(params.with_n(n), grid, M, keep="final").final

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            finals = dict(zip(n_list, pool.map(run, n_list)))
    else:
        finals = {n: run(n) for n in n_list}
    rows = []
    for n in n_list:
        rows.append((n, params.T / n, weighted_sup_error(finals[n], reference, params.x, c), tv_error(finals[n], reference)))
    fit = fit_rate([(h, ws) for _, h, ws, _ in rows])
    alpha = check_condition(params.d, params.drift.rho, params.drift.q).alpha
    report = RateReport(
        params.variant, params.drift.to_dict(), rows, fit.slope, fit.intercept, fit.residual_norm, alpha / 2.0,
    )
    report.passed = bool(fit.slope >= report.alpha_over_2 - report.slack)
    report.extras = {"n_ref": n_ref, "c": c, "M": M, "N": grid.N, "L": grid.L, "residuals": list(fit.residuals)}
    return report, finals, reference


# ---------------------------------------------------------------------------
# Monte Carlo weak error with common random numbers
# ---------------------------------------------------------------------------

PHI_IDS = ("coordinate", "squared_norm", "bump", "halfspace")


def test_function(phi: str, level: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    if phi == "coordinate":
        return lambda x: x[..., 0]
    if phi == "squared_norm":
        return lambda x: np.sum(x * x, axis=-1)
    if phi == "bump":
        return lambda x: np.exp(-0.5 * np.sum(x * x, axis=-1))
    if phi == "halfspace":
        return lambda x: (x[..., 0] > level).astype(float)
    raise ValueError(f"unknown test function {phi!r}; choose from {PHI_IDS}")


@dataclass(frozen=True)
class WeakErrorEstimate:
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    samples: int
    mean_coarse: float
    mean_fine: float
    n: int
    n_ref: int
    phi: str
    confidence: float

    def to_dict(self) -> dict:
        return asdict(self)


def _coupled_chunk(coarse: SchemeParams, fine: SchemeParams, seed: int, streams: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Terminal values of both schemes on shared Brownian paths.

    States are carried as x + W_t + D_t so that identical drift sums give
    identical states; coarse increments are sums of fine ones.
    """
    d = fine.d
    ratio = fine.n // coarse.n
    bkeys = rng.substream_keys(seed, streams, rng.BROWNIAN)
    tkeys = rng.substream_keys(seed, streams, rng.TIME)
    bc, bf = coarse.cutoff(), fine.cutoff()
    x0 = np.asarray(coarse.x, dtype=float)
    W = np.zeros((len(streams), d))
    Dc = np.zeros_like(W)
    Df = np.zeros_like(W)
    sqrt_hf = math.sqrt(fine.h)
    for kf in range(fine.n):
        if kf % ratio == 0:
            k = kf // ratio
            U = np.minimum(k * coarse.T / coarse.n + coarse.h * rng.uniforms(tkeys, np.uint64(k)), (k + 1) * coarse.T / coarse.n)
            Dc = Dc + coarse.h * bc(U, x0 + W + Dc)
        Uf = np.minimum(kf * fine.T / fine.n + fine.h * rng.uniforms(tkeys, np.uint64(kf)), (kf + 1) * fine.T / fine.n)
        Df = Df + fine.h * bf(Uf, x0 + W + Df)
        counters = np.arange(kf * d, (kf + 1) * d, dtype=np.uint64)
        W = W + sqrt_hf * rng.normals(bkeys[:, None], counters[None, :])
    return x0 + W + Dc, x0 + W + Df


def mc_weak_error(
    params: SchemeParams,
    phi: str,
    n: int,
    n_ref: int,
    samples: int,
    seed: int,
    *,
    level: float = 0.5,
    confidence: float = 0.99,
    threads: int = 1,
    chunk: int = 65536,
) -> WeakErrorEstimate:
    """CRN estimate of E[phi(X^h_T)] - E[phi(X^{h_ref}_T)] with a CLT interval."""
    if samples < MIN_MC_SAMPLES:
        raise ValueError(f"need at least {MIN_MC_SAMPLES} samples")
    if n_ref % n:
        raise ValueError("n_ref must be a multiple of n")
    fn = test_function(phi, level)
    coarse, fine = params.with_n(n), params.with_n(n_ref)
    chunks = stream_chunks(0, samples, chunk)

    def run(streams: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xc, xf = _coupled_chunk(coarse, fine, seed, streams)
        return fn(xc), fn(xf)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    pc = np.concatenate([p[0] for p in parts])
    pf = np.concatenate([p[1] for p in parts])
    diff = pc - pf
    est = float(np.mean(diff))
    se = float(np.std(diff, ddof=1) / math.sqrt(samples))
    z = float(ndtri(0.5 + 0.5 * confidence))
    return WeakErrorEstimate(
        est, se, est - z * se, est + z * se, samples, float(np.mean(pc)), float(np.mean(pf)), n, n_ref, phi, confidence
    )


# ---------------------------------------------------------------------------
# Gronwall-Volterra constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GronwallInput:
    """Case I: f(t) <= eta + delta t^beta int_0^t f(s) s^-beta_tilde ds.

    Case II: f(t) <= a + b t^beta_check int_0^t f(s) s^-beta_tilde (t - s)^-beta_hat ds.
    """

    case: str
    T: float = 1.0
    beta_tilde: float = 0.0
    beta: float = 0.0
    eta: float = 1.0
    delta: float = 1.0
    beta_hat: float = 0.0
    beta_check: float = 0.0
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self) -> None:
        if self.case not in ("I", "II"):
            raise ValueError("case must be 'I' or 'II'")
        if not self.T > 0:
            raise ValueError("T must be > 0")
        if self.case == "I":
            if not (self.beta_tilde < 1 and self.beta > self.beta_tilde - 1):
                raise ValueError("case I needs beta_tilde < 1 and beta > beta_tilde - 1")
            if self.eta < 0 or self.delta < 0:
                raise ValueError("eta, delta must be >= 0")
        else:
            if not (self.beta_tilde < 1 and self.beta_hat < 1):
                raise ValueError("case II needs beta_tilde, beta_hat < 1")
            if not self.beta_check > self.beta_tilde + self.beta_hat - 1:
                raise ValueError("case II needs beta_check > beta_tilde + beta_hat - 1")
            if self.a < 0 or self.b < 0:
                raise ValueError("a, b must be >= 0")

    @classmethod
    def case_one(cls, beta_tilde: float, beta: float, eta: float, delta: float, T: float = 1.0) -> "GronwallInput":
        return cls("I", T, beta_tilde=beta_tilde, beta=beta, eta=eta, delta=delta)

    @classmethod
    def case_two(
        cls, beta_tilde: float, beta_hat: float, beta_check: float, a: float, b: float, T: float = 1.0
    ) -> "GronwallInput":
        return cls("II", T, beta_tilde=beta_tilde, beta_hat=beta_hat, beta_check=beta_check, a=a, b=b)


@dataclass(frozen=True)
class GronwallReduction:
    """Case I data reached from case II after ``iterations`` doubling steps."""

    eta: float
    delta: float
    beta: float
    iterations: int
    branch: str


def _case_one_constant(eta: float, delta: float, beta: float, beta_tilde: float, T: float) -> float:
    expo = delta * T ** (1.0 + beta - beta_tilde) / (1.0 + min(beta, 0.0) - beta_tilde)
    if expo > 700.0:
        return math.inf
    return eta * math.exp(expo)


def gronwall_reduction(inp: GronwallInput) -> GronwallReduction:
    """Turn a case II inequality into case I data by the doubling iteration."""
    if inp.case != "II":
        raise ValueError("reduction applies to case II")
    bt, bh, bc, T = inp.beta_tilde, inp.beta_hat, inp.beta_check, inp.T
    if bh <= 0:
        return GronwallReduction(inp.a, inp.b, bc - bh, 0, "nonpositive")
    gam = 1.0 + bc - bt - bh
    a_n, b_n = inp.a, inp.b
    if bt - bc >= 0:
        n_hat = max(1, math.ceil(math.log(1.0 + bh / gam) / math.log(2.0) - 1e-12))
        for n in range(1, n_hat + 1):
            p = 2 ** (n - 1)
            a_n = a_n + a_n * b_n * T ** (p * gam) * beta_function(1.0 - bt, 1.0 + (p - 1) * gam - bh)
            b_n = b_n**2 * beta_function(p * gam, 1.0 + (p - 1) * gam - bh)
        branch = "first"
    else:
        n_hat = max(1, math.ceil(-math.log(1.0 - bh) / math.log(2.0) - 1e-12))
        for n in range(1, n_hat + 1):
            p = 2 ** (n - 1)
            a_n = a_n + a_n * b_n * T ** (p * gam) * beta_function(1.0 - bt, p * (1.0 - bh))
            b_n = b_n**2 * beta_function(p * (1.0 - bh), p * (1.0 - bh))
        branch = "second"
    return GronwallReduction(a_n, b_n, 2**n_hat * gam + bt - 1.0, n_hat, branch)


def gronwall_constant(inp: GronwallInput) -> float:
    """Finite K with sup_[0,T] f <= K for every bounded f satisfying the inequality."""
    if inp.case == "I":
        return _case_one_constant(inp.eta, inp.delta, inp.beta, inp.beta_tilde, inp.T)
    red = gronwall_reduction(inp)
    return _case_one_constant(red.eta, red.delta, red.beta, inp.beta_tilde, inp.T)


def gronwall_small_time_bound(inp: GronwallInput, t: float) -> float:
    """Explicit bound on sup_[0,t] f, valid while the denominator stays positive."""
    if inp.case == "I":
        e = inp.beta + 1.0 - inp.beta_tilde
        den = 1.0 - inp.beta_tilde - inp.delta * t**e
        if den <= 0:
            raise ValueError("t too large for the small-time bound")
        return inp.eta * (1.0 - inp.beta_tilde) / den
    e = inp.beta_check + 1.0 - inp.beta_tilde - inp.beta_hat
    den = 1.0 - inp.b * beta_function(1.0 - inp.beta_tilde, 1.0 - inp.beta_hat) * t**e
    if den <= 0:
        raise ValueError("t too large for the small-time bound")
    return inp.a / den


@dataclass(frozen=True)
class GronwallCheckReport:
    sup_f: float
    constant: float
    satisfied: bool
    flagged: bool
    points: int
    message: str = ""


def _kernel_moments(inp: GronwallInput, t: float, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cellwise int K(t, s) ds and int K(t, s) s ds over [edges[j], edges[j+1]]."""
    bt = inp.beta_tilde
    if inp.case == "I" or inp.beta_hat == 0:
        m0 = edges ** (1.0 - bt) / (1.0 - bt)
        m1 = edges ** (2.0 - bt) / (2.0 - bt)
        return np.diff(m0), np.diff(m1)
    bh = inp.beta_hat
    u = np.clip(edges / t, 0.0, 1.0)
    c0 = t ** (1.0 - bt - bh) * beta_function(1.0 - bt, 1.0 - bh)
    c1 = t ** (2.0 - bt - bh) * beta_function(2.0 - bt, 1.0 - bh)
    return c0 * np.diff(betainc(1.0 - bt, 1.0 - bh, u)), c1 * np.diff(betainc(2.0 - bt, 1.0 - bh, u))


def _linear_cell_weights(inp: GronwallInput, t: float, edges: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Weights of f at the left and right end of each cell for piecewise-linear f."""
    m0, m1 = _kernel_moments(inp, t, edges)
    return (edges[1:] * m0 - m1) / h, (m1 - edges[:-1] * m0) / h


def gronwall_numeric_check(inp: GronwallInput, points: int = 4096, tol: float = 1e-6) -> GronwallCheckReport:
    """Solve the inequality with equality on a uniform grid and compare with the constant.

    The integral is discretised by product integration: f is interpolated
    linearly between nodes and the singular kernel is integrated exactly per
    cell (incomplete beta functions), which gives a triangular system solved
    forward in time. Case I has a separable kernel, so its running integral is
    accumulated in O(points).
    """
    if points < 2:
        raise ValueError("need at least 2 grid points")
    K = gronwall_constant(inp)
    T = inp.T
    ts = np.linspace(0.0, T, points + 1)
    h = T / points
    f = np.empty(points + 1)
    if inp.case == "I":
        base, coef, power = inp.eta, inp.delta, inp.beta
    else:
        base, coef, power = inp.a, inp.b, inp.beta_check
    f[0] = base
    flagged = False
    message = ""
    if inp.case == "I":
        left, right = _linear_cell_weights(inp, T, ts, h)
        running = 0.0
    for i in range(1, points + 1):
        t = ts[i]
        scale = coef * t**power
        if inp.case == "I":
            known = running + left[i - 1] * f[i - 1]
            diag = right[i - 1]
        else:
            lw, rw = _linear_cell_weights(inp, t, ts[: i + 1], h)
            w = np.zeros(i + 1)
            w[:-1] += lw
            w[1:] += rw
            known = float(np.dot(w[:i], f[:i]))
            diag = w[i]
        den = 1.0 - scale * diag
        if den <= 0 or not math.isfinite(den):
            flagged = True
            message = f"discrete iteration does not converge at t = {t:.6g}"
            f[i:] = math.inf
            break
        f[i] = (base + scale * known) / den
        if inp.case == "I":
            running = known + diag * f[i]
    sup_f = float(np.max(f))
    ok = (not flagged) and sup_f <= K * (1.0 + tol)
    return GronwallCheckReport(sup_f, K, bool(ok), flagged, points, message)


def random_gronwall_inputs(count: int, seed: int) -> list[GronwallInput]:
    """Admissible case II draws with beta_hat > 0 (both reduction branches occur)."""
    gen = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        bt = gen.uniform(-0.3, 0.6)
        bh = gen.uniform(0.05, 0.8)
        bc = bt + bh - 1.0 + gen.uniform(0.2, 1.2)
        inp = GronwallInput.case_two(bt, bh, bc, gen.uniform(0.5, 2.0), gen.uniform(0.2, 1.0), gen.uniform(0.5, 1.0))
        if math.isfinite(gronwall_constant(inp)):
            out.append(inp)
    return out
