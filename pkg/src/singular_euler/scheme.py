"""Randomized, cutoff Euler-Maruyama schemes for dX = b(t, X) dt + dW.

X_{k+1} = X_k + dW_k + h b_h(U_k, X_k),  U_k ~ Unif[t_k, t_{k+1}],

with ``b_h`` the primary cutoff or the zero-first variant. Sample ``i`` always
uses stream ``i`` of :mod:`singular_euler.rng`: Brownian component ``j`` of
step ``k`` is counter ``k d + j`` of the Brownian substream and U_k is counter
``k`` of the time substream.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .driftlib import DriftSpec, cutoff_function, default_cutoff_constant, require_admissible

VARIANTS = ("primary", "zero_first")
SNAP_TOL = 1e-9


def step_floor(s: float, h: float) -> float:
    """Largest grid point k h <= s, snapping s/h to an integer within round-off."""
    if s < 0 or h <= 0:
        raise ValueError("need s >= 0 and h > 0")
    ratio = s / h
    k = round(ratio)
    if abs(ratio - k) > SNAP_TOL * max(1.0, ratio):
        k = math.floor(ratio)
    return k * h


@dataclass(frozen=True)
class SchemeParams:
    drift: DriftSpec
    T: float = 1.0
    n: int = 16
    x: tuple[float, ...] = (0.0,)
    B: float | None = None
    variant: str = "primary"

    def __post_init__(self) -> None:
        if not self.T > 0 or int(self.n) != self.n or self.n < 1:
            raise ValueError("need T > 0 and integer n >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        x = tuple(float(v) for v in np.atleast_1d(np.asarray(self.x, dtype=float)))
        if len(x) != self.drift.d:
            raise ValueError("start point dimension must equal drift dimension")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "n", int(self.n))
        if self.B is None:
            object.__setattr__(self, "B", default_cutoff_constant(self.drift))
        if not self.B > 0:
            raise ValueError("B must be > 0")
        require_admissible(self.drift)

    @property
    def h(self) -> float:
        return self.T / self.n

    @property
    def d(self) -> int:
        return self.drift.d

    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.T / self.n

    def with_n(self, n: int) -> "SchemeParams":
        return replace(self, n=n)

    def cutoff(self):
        return cutoff_function(self.drift, self.h, self.B, self.variant)

    def to_dict(self) -> dict:
        return {
            "drift": self.drift.to_dict(),
            "T": self.T,
            "n": self.n,
            "x": list(self.x),
            "B": self.B,
            "variant": self.variant,
        }


@dataclass(frozen=True)
class PathSample:
    times: np.ndarray
    states: np.ndarray
    U: np.ndarray
    dW: np.ndarray
    stream: int
    seed: int
    meta: dict = field(default_factory=dict)

    def recursion_residual(self, params: SchemeParams) -> np.ndarray:
        """X_{k+1} - X_k - dW_k - h b_h(U_k, X_k) for every step."""
        bh = params.cutoff()(self.U, self.states[:-1])
        return self.states[1:] - self.states[:-1] - self.dW - params.h * bh

    def write_csv(self, path: str | Path) -> None:
        d = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "t_k", "U_k", *[f"dW_{j}" for j in range(d)], *[f"X_{j}" for j in range(d)]])
            n = len(self.U)
            for k in range(n + 1):
                if k < n:
                    extra = [f"{self.U[k]:.16e}", *[f"{v:.16e}" for v in self.dW[k]]]
                else:
                    extra = [""] * (1 + d)
                w.writerow([k, f"{self.times[k]:.16e}", *extra, *[f"{v:.16e}" for v in self.states[k]]])


def _brownian_increments(params: SchemeParams, bkeys: np.ndarray, k: int) -> np.ndarray:
    d = params.d
    counters = np.arange(k * d, (k + 1) * d, dtype=np.uint64)
    return math.sqrt(params.h) * rng.normals(bkeys[:, None], counters[None, :])


def _uniform_times(params: SchemeParams, tkeys: np.ndarray, k: int) -> np.ndarray:
    t_k = k * params.T / params.n
    t_next = (k + 1) * params.T / params.n
    u = rng.uniforms(tkeys, np.uint64(k))
    return np.minimum(t_k + params.h * u, t_next)


def _advance(params: SchemeParams, bh, x, dW, U) -> np.ndarray:
    return (x + dW) + params.h * bh(U, x)


def simulate_path(
    params: SchemeParams, seed: int, stream: int, u_stream: int | None = None
) -> PathSample:
    """One trajectory; ``u_stream`` swaps the randomization substream only."""
    bkeys = rng.substream_keys(seed, [stream], rng.BROWNIAN)
    tkeys = rng.substream_keys(seed, [stream if u_stream is None else u_stream], rng.TIME)
    bh = params.cutoff()
    n, d = params.n, params.d
    states = np.empty((n + 1, d))
    dWs = np.empty((n, d))
    Us = np.empty(n)
    x = np.asarray(params.x, dtype=float)[None, :]
    states[0] = x[0]
    for k in range(n):
        dW = _brownian_increments(params, bkeys, k)
        U = _uniform_times(params, tkeys, k)
        x = _advance(params, bh, x, dW, U)
        states[k + 1] = x[0]
        dWs[k] = dW[0]
        Us[k] = U[0]
    return PathSample(params.times(), states, Us, dWs, stream, seed)


def _terminal_chunk(params: SchemeParams, seed: int, streams: np.ndarray) -> np.ndarray:
    bkeys = rng.substream_keys(seed, streams, rng.BROWNIAN)
    tkeys = rng.substream_keys(seed, streams, rng.TIME)
    bh = params.cutoff()
    x = np.broadcast_to(np.asarray(params.x, dtype=float), (len(streams), params.d)).copy()
    for k in range(params.n):
        x = _advance(params, bh, x, _brownian_increments(params, bkeys, k), _uniform_times(params, tkeys, k))
    return x


def stream_chunks(start: int, count: int, chunk: int) -> list[np.ndarray]:
    return [np.arange(a, min(a + chunk, start + count), dtype=np.uint64) for a in range(start, start + count, chunk)]


def simulate_terminals(
    params: SchemeParams, count: int, seed: int, *, threads: int = 1, chunk: int = 65536, start: int = 0
) -> np.ndarray:
    """Terminal values X_T for streams ``start .. start + count - 1`` (shape (count, d))."""
    if count < 1:
        raise ValueError("count must be >= 1")
    chunks = stream_chunks(start, count, chunk)
    if threads <= 1:
        parts = [_terminal_chunk(params, seed, c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _terminal_chunk(params, seed, c), chunks))
    return np.concatenate(parts, axis=0)


def recursion_residuals(params: SchemeParams, samples: Sequence[PathSample]) -> float:
    return max(float(np.max(np.abs(s.recursion_residual(params)))) for s in samples)
