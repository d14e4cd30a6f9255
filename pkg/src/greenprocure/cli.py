"""Command-line entry point: greenprocure simulate|solve|sweep|references."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dual import BundleParams, DualResult, SolverSettings, optimize_dual
from .dynamics import simulate_controlled_paths, simulate_fading, simulate_renewable
from .hjb import CFLViolation, FieldPolicy, GridSpec, SweepError
from .market import DataError, describe_inputs, scenario_from_dict, synthetic_scenario
from .model import ScenarioInputs, traffic_count
from .references import InfeasibleReference, OrderingViolation, compare_references, energy_balance

log = logging.getLogger("greenprocure")

EXIT_OK, EXIT_TOLERANCE, EXIT_INFEASIBLE, EXIT_INPUT = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class SimulateSettings:
    n_paths: int = 1000
    n_steps: int = 960
    record_every: int = 4


@dataclass
class RunConfig:
    scenario: dict = field(default_factory=lambda: {"preset": "base"})
    grid: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "out"
    policy_steps: int = 512
    report_hours: float = 24.0
    with_references: bool = False
    n_runs: int = 50
    trace_seconds: bool = False

    def inputs(self, seed: int | None = None) -> ScenarioInputs:
        return scenario_from_dict(self.scenario, self.seed if seed is None else seed)

    def grid_spec(self, horizon: float) -> GridSpec:
        g = {"n_a": 10, "n_r": 10, "n_chi": 10, **self.grid}
        return GridSpec(horizon=horizon, **g)

    def solver_settings(self) -> SolverSettings:
        s = dict(self.solver)
        if "bundle" in s:
            s["bundle"] = BundleParams(**s["bundle"])
        return SolverSettings(**s)

    def sim_settings(self) -> SimulateSettings:
        return SimulateSettings(**self.simulate)

    def canonical(self) -> str:
        d = asdict(self)
        d.pop("output_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Set a dotted key path, e.g. scenario.model.w=0.99 or grid.n_a=5."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into non-object at {p!r} in {key!r}")
    node[parts[-1]] = _parse_value(value)


def build_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if args.preset:
        raw.setdefault("scenario", {})["preset"] = args.preset
    for a in args.set or []:
        apply_override(raw, a)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["output_dir"] = args.out
    if getattr(args, "with_references", False):
        raw["with_references"] = True
    if getattr(args, "n_runs", None) is not None:
        raw["n_runs"] = args.n_runs
    names = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**raw)
    if cfg.n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    return cfg


def provenance(cfg: RunConfig, inputs: ScenarioInputs | None = None, seed: int | None = None) -> str:
    h = hashlib.sha256(cfg.canonical().encode())
    if inputs is not None:
        h.update(json.dumps(describe_inputs(inputs), sort_keys=True, default=str).encode())
    return f"greenprocure {__version__} config_sha256={h.hexdigest()[:16]} seed={cfg.seed if seed is None else seed}"


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _write_rows(path: Path, prov: str, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {prov}\n")
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _summary_rows(s):
    return [(t, m, sd, lo, hi) for t, m, sd, lo, hi in zip(s.times, s.mean, s.std, s.lower, s.upper)]


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: RunConfig) -> int:
    inputs = cfg.inputs()
    sim = cfg.sim_settings()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, inputs)
    T = inputs.horizon_hours
    fad = simulate_fading(inputs.fading, sim.n_paths, sim.n_steps, T, cfg.seed, record_every=sim.record_every)
    hdr = ["time", "mean", "std", "q025", "q975"]
    _write_rows(out / "fading.csv", prov, hdr, _summary_rows(fad))
    ren = simulate_renewable(inputs, sim.n_paths, sim.n_steps, cfg.seed, record_every=sim.record_every)
    rows = [(t, m, sd, lo, hi, float(inputs.renewable.forecast(t)))
            for t, m, sd, lo, hi in _summary_rows(ren)]
    _write_rows(out / "renewable.csv", prov, hdr + ["forecast"], rows)
    log.info("wrote %s and %s", out / "fading.csv", out / "renewable.csv")
    return EXIT_OK


def _policy_rows(ens, inputs):
    """Mean and 95% band of net consumption, P_A, P_F, P_S and battery charge per time."""
    u, x = ens.controls, ens.states
    net = u[..., 0] + u[..., 1] - inputs.model.p_r_max * x[..., 1]
    series = [net, u[..., 0], u[..., 1], u[..., 3], x[..., 0]]
    m = ens.m_paths
    rows = []
    for n, t in enumerate(ens.times):
        row = [t]
        for s in series:
            col = s[:, n]
            half = 1.96 * col.std(ddof=1) / math.sqrt(m) if m > 1 else 0.0
            row += [col.mean(), col.mean() - half, col.mean() + half]
        rows.append(row)
    header = ["time"] + [f"{n}_{k}" for n in ("net_consumption", "p_a", "p_f", "p_s", "charge")
                         for k in ("mean", "ci_low", "ci_high")]
    return header, rows


def solve_and_write(cfg: RunConfig, inputs: ScenarioInputs, out: Path, seed: int) -> tuple[DualResult, dict]:
    """Run the dual optimizer and write all artifacts into `out`; returns (result, summary)."""
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, inputs, seed)
    settings = cfg.solver_settings()
    grid = cfg.grid_spec(inputs.horizon_hours)
    res = optimize_dual(settings, inputs, seed, grid)
    res.trace.to_csv(out / "dual_trace.csv", prov, include_seconds=cfg.trace_seconds)
    _write_json(out / "multiplier.json", {"level": res.multiplier.level, "horizon": res.multiplier.horizon,
                                          "amplitudes": list(res.multiplier.amplitudes), "provenance": prov})
    est = res.subgradient
    eps = inputs.qos.epsilon
    vrows = []
    for t, p in zip(est.point_times, est.point_means):
        se = math.sqrt(max(p * (1 - p), 0.0) / est.m_paths)
        vrows.append((t, p - eps, p - eps - 1.96 * se, p - eps + 1.96 * se))
    _write_rows(out / "violation.csv", prov, ["time", "violation_minus_eps", "ci_low", "ci_high"], vrows)
    policy = FieldPolicy(res.field, inputs, res.multiplier)
    ens = simulate_controlled_paths(policy, settings.m_sg, cfg.policy_steps, seed, inputs)
    header, rows = _policy_rows(ens, inputs)
    _write_rows(out / "policy.csv", prov, header, rows)
    bal = energy_balance(ens, inputs, cfg.report_hours)
    summary = {
        "provenance": prov,
        "scenario": inputs.name,
        "dual_value": res.value,
        "dual_value_stderr": res.value_se,
        "subgradient_norm": res.norm,
        "tolerance": settings.tol * eps,
        "converged": res.converged,
        "level": res.multiplier.level,
        "hjb_solves": res.n_solves,
        "n_t": res.field.grid.n_t,
        "energy_balance_wh": bal.as_dict(),
    }
    if cfg.with_references:
        rep = compare_references(inputs, grid, seed, settings, dual_result=res, raise_on_violation=False)
        summary["references"] = rep.as_dict()
        rep.to_csv(out / "references.csv", prov)
    _write_json(out / "summary.json", summary)
    return res, summary


def cmd_solve(cfg: RunConfig) -> int:
    inputs = cfg.inputs()
    res, summary = solve_and_write(cfg, inputs, Path(cfg.output_dir), cfg.seed)
    log.info("dual value %.6g, subgradient norm %.3g (tolerance %.3g)", res.value, summary["subgradient_norm"],
             summary["tolerance"])
    if cfg.with_references and not summary["references"]["ordering_holds"]:
        log.error("reference ordering violated: %s", summary["references"])
    return EXIT_OK if res.converged else EXIT_TOLERANCE


def run_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence(int(master), spawn_key=(7, index)).generate_state(1)[0])


def _sweep_one(args):
    cfg, index = args
    seed = run_seed(cfg.seed, index)
    out = Path(cfg.output_dir) / f"run_{index:03d}"
    row = {"run": index, "seed": seed, "status": "ok", "dual_value": float("nan"), "subgradient_norm": float("nan"),
           "converged": False, "level": 0, "error": ""}
    try:
        spec = dict(cfg.scenario)
        spec["preset"] = "randomized"
        inputs = scenario_from_dict(spec, seed)
        res, summary = solve_and_write(cfg, inputs, out, seed)
        row.update(dual_value=res.value, subgradient_norm=summary["subgradient_norm"], converged=res.converged,
                   level=res.multiplier.level)
        if not res.converged:
            row["status"] = "tolerance_not_reached"
    except Exception as exc:   # recorded per run, the sweep goes on
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_sweep(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i) for i in range(cfg.n_runs)]
    workers = _thread_cap()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    header = ["run", "seed", "status", "dual_value", "subgradient_norm", "converged", "level", "error"]
    _write_rows(out / "sweep.csv", provenance(cfg), header, [[r[h] for h in header] for r in rows])
    n_ok = sum(r["converged"] for r in rows)
    log.info("%d/%d runs reached the tolerance", n_ok, len(rows))
    return EXIT_OK if n_ok == len(rows) else EXIT_TOLERANCE


def cmd_references(cfg: RunConfig) -> int:
    inputs = cfg.inputs()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, inputs)
    rep = compare_references(inputs, cfg.grid_spec(inputs.horizon_hours), cfg.seed, cfg.solver_settings(),
                             raise_on_violation=False)
    rep.to_csv(out / "references.csv", prov)
    rep.to_json(out / "references.json", prov)
    if not rep.ordering_holds:
        log.error("ordering violated: %s", rep.as_dict())
    return EXIT_OK if rep.dual_converged else EXIT_TOLERANCE


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "sweep": cmd_sweep, "references": cmd_references}


def _thread_cap() -> int:
    raw = os.environ.get("GREENPROCURE_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise ConfigError(f"GREENPROCURE_THREADS must be an integer, got {raw!r}")


def _apply_thread_cap() -> None:
    if not os.environ.get("GREENPROCURE_THREADS"):
        return
    n = _thread_cap()
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except (ImportError, ValueError):
        pass


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greenprocure", description="Energy procurement under chance-constrained QoS")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--preset", help="scenario preset (base, scenario_a..e, randomized)")
        s.add_argument("--seed", type=int)
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
        s.add_argument("--out", help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "solve":
            s.add_argument("--with-references", action="store_true")
        if name == "sweep":
            s.add_argument("--n-runs", type=int)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    stage = "config"
    try:
        cfg = build_config(args)
        _apply_thread_cap()
        stage = args.command
        t0 = time.perf_counter()
        code = COMMANDS[args.command](cfg)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        return code
    except InfeasibleReference as exc:
        print(f"[{stage}] infeasible reference: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, DataError, CFLViolation, FileNotFoundError, TypeError, ValueError) as exc:
        print(f"[{stage}] input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SweepError, OrderingViolation, RuntimeError) as exc:
        print(f"[{stage}] failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
