"""Command-line driver: ``singular-euler {check,density,rate,mc,lemmas,simulate}``.

Every command reads one JSON config (defaults and validation in
``config_schema.json``) and writes CSV/JSON files under ``--out``. Outputs are
a deterministic function of (config, seed) apart from the ``created`` stamp,
which honours ``SOURCE_DATE_EPOCH`` when set.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import analysis, density, gaussian
from .driftlib import DriftSpec, InadmissibleDrift, check_condition
from .scheme import SchemeParams, simulate_path, simulate_terminals

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INADMISSIBLE = 2

COMMANDS = ("check", "density", "rate", "mc", "lemmas", "simulate")
CLASSICAL_GRONWALL_POINTS = 2**17
CLASSICAL_GRONWALL_RTOL = 1e-10


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config_schema.json").read_text())


def _fill_defaults(schema: dict, value: Any) -> Any:
    if schema.get("type") != "object" or not isinstance(value, dict):
        return value
    out = dict(value)
    for key, sub in schema.get("properties", {}).items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if key in out:
            out[key] = _fill_defaults(sub, out[key])
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    drift: DriftSpec
    scheme: dict
    study: dict
    mc: dict
    density: dict
    simulate: dict
    lemmas: dict
    seed: int

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        schema = load_schema()
        try:
            jsonschema.validate(raw, schema)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(k) for k in exc.absolute_path) or "<root>"
            raise ValueError(f"config {where}: {exc.message}") from None
        cfg = _fill_defaults(schema, raw)
        if "x" not in raw.get("scheme", {}):
            cfg["scheme"]["x"] = [0.0] * int(cfg["drift"].get("d", 1))
        n_list = cfg["study"]["n_list"]
        if any(b <= a for a, b in zip(n_list, n_list[1:])):
            raise ValueError("study.n_list must be strictly increasing")
        if cfg["study"]["n_ref"] < 16 * max(n_list) or cfg["study"]["n_ref"] % max(n_list):
            raise ValueError("study.n_ref must be a multiple of max(n_list) and >= 16 max(n_list)")
        drift = DriftSpec.from_dict(cfg["drift"])
        return cls(drift, cfg["scheme"], cfg["study"], cfg["mc"], cfg["density"], cfg["simulate"], cfg["lemmas"], cfg["seed"])

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def params(self, n: int, variant: str | None = None) -> SchemeParams:
        s = self.scheme
        return SchemeParams(self.drift, s["T"], n, tuple(s["x"]), s["B"], variant or s["variant"])

    def grid(self, params: SchemeParams) -> density.Grid:
        g = self.study["grid"]
        return density.default_grid(params, g["N"], g["L_factor"])


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def created_stamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (
        _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
        if epoch
        else _dt.datetime.now(_dt.timezone.utc)
    )
    return when.replace(microsecond=0).isoformat()


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict, created: str) -> None:
    body = {"created": created, **_jsonable(payload)}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, text: str, created: str) -> None:
    path.write_text(f"# created: {created}\n{text}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_check(cfg: ExperimentConfig, out: Path, created: str, threads: int) -> int:
    rep = check_condition(cfg.drift.d, cfg.drift.rho, cfg.drift.q)
    payload = rep.to_dict()
    print(json.dumps(_jsonable(payload), sort_keys=True))
    write_json(out / "check.json", payload, created)
    return EXIT_OK if rep.admissible else EXIT_INADMISSIBLE


def cmd_density(cfg: ExperimentConfig, out: Path, created: str, threads: int) -> int:
    params = cfg.params(cfg.density["n"])
    grid = cfg.grid(params)
    t = cfg.density["t"]
    keep = "final" if t is None else "all"
    seq = density.propagate(params, grid, cfg.study["grid"]["M"], keep=keep)
    if t is None:
        dens = seq.final
    else:
        dens = density.GridDensity(t, grid, seq.at_time(t))
    eps = density.tail_bound(grid.d, (grid.L - density.displacement_budget(params)) / math.sqrt(params.T))
    header = {"n": params.n, "variant": params.variant, "drift": params.drift.to_json()}
    write_csv(out / "density.csv", dens.to_csv(header=header), created)
    write_json(
        out / "density.json",
        {
            "t": dens.t, "mass": dens.mass, "tail_defect": dens.tail_defect, "tail_budget": eps,
            "grid": {"center": list(grid.center), "L": grid.L, "N": grid.N},
            "params": params.to_dict(), "M": cfg.study["grid"]["M"],
        },
        created,
    )
    return EXIT_OK


def cmd_rate(cfg: ExperimentConfig, out: Path, created: str, threads: int) -> int:
    st = cfg.study
    base = cfg.params(st["n_list"][0])
    grid = cfg.grid(base)
    report, _, _ = analysis.rate_study(
        base, st["n_list"], st["n_ref"], grid=grid, M=st["grid"]["M"], c=st["c_weight"], threads=threads
    )
    write_csv(out / "rate.csv", report.csv_text(), created)
    write_json(out / "rate.json", report.summary(), created)
    print(json.dumps(_jsonable({"slope": report.slope, "pass": report.passed}), sort_keys=True))
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_mc(cfg: ExperimentConfig, out: Path, created: str, threads: int) -> int:
    mc = cfg.mc
    params = cfg.params(mc["n"])
    est = analysis.mc_weak_error(
        params, mc["phi"], mc["n"], mc["n_ref"], mc["samples"], cfg.seed,
        level=mc["level"], confidence=mc["confidence"], threads=threads,
    )
    payload = {**est.to_dict(), "seed": cfg.seed, "params": params.to_dict()}
    write_json(out / "mc.json", payload, created)
    print(json.dumps(_jsonable({"estimate": est.estimate, "stderr": est.stderr}), sort_keys=True))
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig, out: Path, created: str, threads: int) -> int:
    sim = cfg.simulate
    params = cfg.params(sim["n"])
    for i in range(sim["paths"]):
        path = simulate_path(params, cfg.seed, i)
        tmp = out / f"path_{i}.csv"
        path.write_csv(tmp)
        write_csv(tmp, tmp.read_text(), created)
    X = simulate_terminals(params, sim["samples"], cfg.seed, threads=threads)
    lines = [",".join(f"x{j}" for j in range(params.d))]
    lines += [",".join(f"{v:.16e}" for v in row) for row in X]
    write_csv(out / "terminals.csv", "\n".join(lines) + "\n", created)
    write_json(
        out / "simulate.json",
        {"params": params.to_dict(), "seed": cfg.seed, "paths": sim["paths"], "samples": sim["samples"],
         "mean": X.mean(axis=0), "var": X.var(axis=0)},
        created,
    )
    return EXIT_OK


def run_lemma_suite(lem: dict, seed: int, threads: int = 1) -> dict:
    """Kernel sensitivity constants, convolution bound draws and Gronwall checks."""
    rows: list[dict] = []
    base = gaussian.GridSpec(points=lem["grid_points"])
    for ineq in gaussian.INEQUALITIES:
        for c in lem["c_values"]:
            coarse = gaussian.sensitivity_constant_search(ineq, c, base)
            fine = gaussian.sensitivity_constant_search(ineq, c, base.refined())
            change = abs(fine.constant - coarse.constant) / fine.constant
            rows.append({
                "check": "sensitivity", "id": ineq, "c": c, "constant": fine.constant,
                "coarse": coarse.constant, "relative_change": change,
                "pass": bool(math.isfinite(fine.constant) and change <= lem["refinement_tolerance"]),
            })

    draws = gaussian.random_convolution_draws(lem["convolution_draws"], seed)

    def conv(dr: dict) -> gaussian.BoundCheckReport:
        return gaussian.convolution_bound_check(**dr)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(conv, draws))
    else:
        reports = [conv(dr) for dr in draws]
    trivial = [
        gaussian.convolution_bound_check(math.inf, math.inf, 0.0, 0.0, DriftSpec.constant(1.0), 0.0, 1.0, 0.0, 0.0),
        gaussian.convolution_bound_check(math.inf, math.inf, 0.0, 0.0, DriftSpec.zero(), 0.0, 1.0, 0.0, 0.0),
    ]
    tagged = [(f"random_{i}", r) for i, r in enumerate(reports)]
    tagged += [("trivial_constant", trivial[0]), ("trivial_zero", trivial[1])]
    for tag, rep in tagged:
        row = {"check": "convolution", "id": tag, **rep.row(), "pass": rep.satisfied}
        rows.append(row)

    classical = analysis.GronwallInput.case_one(0.0, 0.0, 1.0, 1.0)
    cl = analysis.gronwall_numeric_check(classical, CLASSICAL_GRONWALL_POINTS)
    rel = abs(cl.sup_f - math.e) / math.e
    rows.append({"check": "gronwall", "id": "classical", "sup_f": cl.sup_f, "constant": cl.constant,
                 "relative_error": rel, "pass": bool(cl.satisfied and rel <= CLASSICAL_GRONWALL_RTOL)})
    no_kernel = analysis.GronwallInput.case_one(0.2, 0.1, 1.7, 0.0)
    k0 = analysis.gronwall_constant(no_kernel)
    rows.append({"check": "gronwall", "id": "delta_zero", "constant": k0, "pass": k0 == 1.7})
    c1 = analysis.gronwall_constant(analysis.GronwallInput.case_one(0.3, 0.2, 1.5, 0.7))
    c2 = analysis.gronwall_constant(analysis.GronwallInput.case_two(0.3, 0.0, 0.2, 1.5, 0.7))
    rows.append({"check": "gronwall", "id": "branch_consistency", "case_one": c1, "case_two": c2, "pass": c1 == c2})
    for i, inp in enumerate(analysis.random_gronwall_inputs(lem["gronwall_draws"], seed)):
        rep = analysis.gronwall_numeric_check(inp, lem["gronwall_points"])
        red = analysis.gronwall_reduction(inp)
        rows.append({"check": "gronwall", "id": f"random_{i}", "sup_f": rep.sup_f, "constant": rep.constant,
                     "branch": red.branch, "iterations": red.iterations, "flagged": rep.flagged,
                     "pass": rep.satisfied})

    b11 = gaussian.beta_function(1.0, 1.0)
    b_half = gaussian.beta_function(0.5, 0.5)
    b_sym = abs(gaussian.beta_function(2.5, 0.7) - gaussian.beta_function(0.7, 2.5))
    rows.append({"check": "beta", "id": "identities", "B11": b11, "B_half_half": b_half, "asymmetry": b_sym,
                 "pass": bool(abs(b11 - 1.0) < 1e-14 and abs(b_half - math.pi) < 1e-13 and b_sym < 1e-15)})
    return {"rows": rows, "all_pass": all(r["pass"] for r in rows)}


def cmd_lemmas(cfg: ExperimentConfig, out: Path, created: str, threads: int) -> int:
    suite = run_lemma_suite(cfg.lemmas, cfg.seed, threads)
    write_json(out / "lemmas.json", suite, created)
    for r in suite["rows"]:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['check']} {r['id']}" + (f" c={r['c']}" if "c" in r else ""))
    return EXIT_OK if suite["all_pass"] else EXIT_FAILURE


HANDLERS = {
    "check": cmd_check,
    "density": cmd_density,
    "rate": cmd_rate,
    "mc": cmd_mc,
    "lemmas": cmd_lemmas,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="singular-euler",
        description="Randomized cutoff Euler schemes for SDEs with singular drift.",
        epilog=(
            "Config: one JSON document with keys drift, scheme, study, mc, density, simulate, lemmas, seed. "
            "Defaults: scheme {T: 1, x: [0], B: sup norm, variant: primary}; "
            "study {n_list: [16..512], n_ref: 8192, grid {N: 2048, L_factor: 8, M: 16}, c_weight: 2}; "
            "mc {samples: 100000, phi: halfspace, level: 0.5, n: 32, n_ref: 4096, confidence: 0.99}; "
            "density {n: 64, t: T}; simulate {n: 64, paths: 4, samples: 10000}; seed 0. "
            "The full schema ships as config_schema.json. Exit codes: 0 success, 1 failure, 2 inadmissible."
        ),
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for batch operations")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(args.config.read_text())
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ValueError("seed must be an unsigned 64-bit integer")
            raw["seed"] = args.seed
        if args.command == "check":
            drift = DriftSpec.from_dict(raw["drift"])
            cfg = ExperimentConfig(drift, {}, {}, {}, {}, {}, {}, raw.get("seed", 0))
        else:
            cfg = ExperimentConfig.from_dict(raw)
            cfg.params(1)
        args.out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, args.out, created_stamp(), max(1, args.threads))
    except InadmissibleDrift as exc:
        print(f"inadmissible: {exc}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
