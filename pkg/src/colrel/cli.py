"""Command-line front end: TOML experiment configs, orchestration and artifacts.

    colrel optimize|simulate|verify|bound --config exp.toml [--seed S] [--out DIR]

Every command writes its artifacts plus a ``manifest.json`` (config hash,
seeds, library versions) into the output directory. ``COLREL_THREADS`` caps
the number of replicas simulated in parallel.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy
import tomli
import tomli_w

from . import __version__
from .connectivity import (build_erdos_renyi, build_mmwave, build_threshold, load_model,
                           load_positions, random_model, save_model)
from .objective import QuadraticObjective, make_logistic_synthetic, random_quadratic
from .protocol import MODES, RoundTrace, Schedule, run_simulation
from .theory import (bound_curve, closed_form_covariance, enumerate_covariance,
                     unbiasedness_monte_carlo, write_bound_csv, MAX_ENUM_N)
from .weights import InfeasibleModelError, optimize_weights, s_bar_value, s_value, save_weights_csv

COMMANDS = ("optimize", "simulate", "verify", "bound")
TRACE_HEADER = ("round", "dist_sq", "loss", "uplink_successes", "seed")
MONOTONE_SLACK = 1e-9


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- schema
# key -> (type, default, check); default ``None`` means optional (omitted when unset),
# ``REQUIRED`` means it must be given.

REQUIRED = object()


def _prob(v):
    return 0.0 <= v <= 1.0


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _atleast(k):
    return lambda v: v >= k


def _prob_or_list(v):
    return all(0.0 <= x <= 1.0 for x in (v if isinstance(v, list) else [v]))


def _point(v):
    return len(v) == 2 and all(math.isfinite(x) for x in v)


_TOPOLOGY = {
    "erdos_renyi": {"n": (int, REQUIRED, _atleast(1)), "p_c": (float, REQUIRED, _prob),
                    "p_up": ("prob_or_list", REQUIRED, _prob_or_list), "reciprocal": (bool, True, None),
                    "frozen": (bool, False, None), "seed": (int, 0, _nonneg)},
    "mmwave": {"positions": ("path", REQUIRED, None), "ps_pos": ("point", [0.0, 0.0], _point),
               "prune_below": (float, 0.5, _prob), "reciprocal": (bool, True, None)},
    "threshold": {"positions": ("path", REQUIRED, None), "ps_pos": ("point", [0.0, 0.0], _point),
                  "level": (float, 0.99, lambda v: 0.0 < v <= 1.0)},
    "model": {"path": ("path", REQUIRED, None)},
    "random": {"n": (int, REQUIRED, _atleast(1)), "density": (float, 0.7, _prob),
               "seed": (int, 0, _nonneg)},
}
_TOPOLOGY_COMMON = {"unreachable": (str, "raise", lambda v: v in ("raise", "drop"))}

_OBJECTIVE = {
    "quadratic": {"d": (int, 10, _atleast(1)), "mu": (float, 1.0, _pos), "L": (float, 4.0, _pos),
                  "sigma": (float, 1.0, _nonneg), "spread": (float, 0.0, _nonneg),
                  "offset": (float, 1.0, None), "seed": (int, 0, _nonneg)},
    "logistic": {"features": (int, 20, _atleast(1)), "samples_per_client": (int, 300, _atleast(1)),
                 "label_count": (int, 10, _atleast(2)), "partition": ("partition", "iid", None),
                 "l2": (float, 1e-4, _pos), "separation": (float, 3.0, _nonneg), "seed": (int, 0, _nonneg)},
}

_SCHEDULE = {
    "rounds": (int, 100, _atleast(1)), "local_steps": (int, 8, _atleast(1)),
    "step_rule": (str, "constant", lambda v: v in ("constant", "theory")),
    "lr": (float, 0.05, _pos), "momentum": (float, None, lambda v: 0.0 <= v < 1.0),
    "batch_size": (int, 64, _atleast(1)),
}

_EXPERIMENT = {
    "modes": ("modes", list(MODES), None), "seeds": ("seeds", [0], None),
    "sweeps": (int, None, _atleast(1)), "out_dir": (str, "out", None),
    "verify_samples": (int, 100000, _atleast(2)),
}


@dataclass
class ExperimentConfig:
    topology: dict
    objective: dict
    schedule: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @property
    def seeds(self):
        return list(self.experiment["seeds"])

    @property
    def modes(self):
        return list(self.experiment["modes"])

    @property
    def momentum(self) -> float:
        # heavy-ball default only applies to the constant rule; the theory rule assumes plain SGD
        m = self.schedule.get("momentum")
        if m is not None:
            return m
        return 0.0 if self.schedule["step_rule"] == "theory" else 0.9

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _coerce(section, key, kind, value):
    where = f"{section}.{key}"

    def fail(msg):
        raise ConfigError(f"{where}: {msg} (got {value!r})")

    if kind is bool:
        if not isinstance(value, bool):
            fail("expected a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            fail("expected an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            fail("expected a finite number")
        return float(value)
    if kind is str or kind == "path":
        if not isinstance(value, str):
            fail("expected a string")
        return value
    if kind == "prob_or_list":
        if isinstance(value, list):
            return [_coerce(section, key, float, v) for v in value]
        return _coerce(section, key, float, value)
    if kind == "point":
        if not isinstance(value, list):
            fail("expected [x, y]")
        return [_coerce(section, key, float, v) for v in value]
    if kind == "partition":
        if value == "iid":
            return value
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            fail('expected "iid" or a positive integer label skew')
        return value
    if kind == "modes":
        if not isinstance(value, list) or not value:
            fail("expected a nonempty list of modes")
        for v in value:
            if v not in MODES:
                fail(f"unknown mode {v!r}; choose from {list(MODES)}")
        if len(set(value)) != len(value):
            fail("duplicate modes")
        return list(value)
    if kind == "seeds":
        if not isinstance(value, list) or not value:
            fail("expected a nonempty list of seeds")
        return [_coerce(section, key, int, v) for v in value]
    raise AssertionError(kind)


def _apply_schema(section, raw, schema, base_dir=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {unknown}; allowed: {sorted(schema)}")
    out = {}
    for key, (kind, default, check) in schema.items():
        if key not in raw:
            if default is REQUIRED:
                raise ConfigError(f"{section}.{key}: required")
            if default is not None:
                out[key] = default
            continue
        value = _coerce(section, key, kind, raw[key])
        if check is not None and not check(value):
            raise ConfigError(f"{section}.{key}: value {value!r} out of range")
        if kind == "path" and base_dir is not None:
            target = Path(value) if Path(value).is_absolute() else base_dir / value
            if not target.is_file():
                raise ConfigError(f"{section}.{key}: file not found: {target}")
        out[key] = value
    return out


def _kinded(section, raw, kinds, common=None, base_dir=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    kind = raw.get("kind")
    if kind not in kinds:
        raise ConfigError(f"{section}.kind: expected one of {sorted(kinds)} (got {kind!r})")
    schema = dict(kinds[kind], **(common or {}))
    body = {k: v for k, v in raw.items() if k != "kind"}
    return {"kind": kind, **_apply_schema(section, body, schema, base_dir)}


def config_from_dict(raw: dict, base_dir=None) -> ExperimentConfig:
    base = Path(base_dir) if base_dir is not None else Path(".")
    unknown = sorted(set(raw) - {"topology", "objective", "schedule", "experiment"})
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}")
    for name in ("topology", "objective"):
        if name not in raw:
            raise ConfigError(f"[{name}] section is required")
    topo = _kinded("topology", raw["topology"], _TOPOLOGY, _TOPOLOGY_COMMON, base)
    obj = _kinded("objective", raw["objective"], _OBJECTIVE)
    sched = _apply_schema("schedule", raw.get("schedule", {}), _SCHEDULE)
    exp = _apply_schema("experiment", raw.get("experiment", {}), _EXPERIMENT)
    if topo["kind"] == "erdos_renyi" and isinstance(topo["p_up"], list) and len(topo["p_up"]) != topo["n"]:
        raise ConfigError(f"topology.p_up: expected {topo['n']} entries (got {len(topo['p_up'])})")
    if obj["kind"] == "quadratic" and obj["L"] < obj["mu"]:
        raise ConfigError("objective.L: must be >= objective.mu")
    return ExperimentConfig(topo, obj, sched, exp, base)


def parse_config_text(text: str, base_dir=None) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from exc
    return config_from_dict(raw, base_dir)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent)


def emit_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps({"topology": cfg.topology, "objective": cfg.objective,
                          "schedule": cfg.schedule, "experiment": cfg.experiment})


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(emit_config(cfg).encode()).hexdigest()


# ---------------------------------------------------------------- builders

def build_model(cfg: ExperimentConfig):
    t = cfg.topology
    kind = t["kind"]
    if kind == "erdos_renyi":
        rng = np.random.default_rng(t["seed"])
        return build_erdos_renyi(t["n"], t["p_c"], t["p_up"], t["reciprocal"], t["frozen"], rng)
    if kind in ("mmwave", "threshold"):
        _, pos = load_positions(cfg.resolve(t["positions"]))
        if kind == "mmwave":
            return build_mmwave(pos, t["ps_pos"], t["prune_below"], t["reciprocal"])
        return build_threshold(pos, t["ps_pos"], t["level"])
    if kind == "model":
        return load_model(cfg.resolve(t["path"]))
    return random_model(t["n"], np.random.default_rng(t["seed"]), t["density"])


def build_objective(cfg: ExperimentConfig, n: int):
    o = cfg.objective
    rng = np.random.default_rng(o["seed"])
    if o["kind"] == "quadratic":
        return random_quadratic(o["d"], n, o["mu"], o["L"], o["sigma"], rng, o["spread"], o["offset"])
    return make_logistic_synthetic(o["features"], n, o["samples_per_client"], o["label_count"],
                                   o["partition"], o["l2"], rng, o["separation"])


def build_schedule(cfg: ExperimentConfig, obj=None) -> Schedule:
    s = cfg.schedule
    mu = obj.mu if obj is not None else None
    return Schedule(rounds=s["rounds"], local_steps=s["local_steps"], step_rule=s["step_rule"],
                    lr=s["lr"], mu=mu, momentum=cfg.momentum, batch_size=s.get("batch_size"))


# ---------------------------------------------------------------- artifacts

def _fmt(v) -> str:
    return format(float(v), ".17g")


def emit_metrics(trace, path) -> None:
    """Write one or more :class:`RoundTrace` objects as CSV, one row per round."""
    traces = [trace] if isinstance(trace, RoundTrace) else list(trace)
    if not traces or any(len(t) == 0 for t in traces):
        raise ValueError("cannot emit metrics for an empty trace")
    lines = [",".join(TRACE_HEADER)]
    for t in traces:
        for r, dist, loss, up, seed in t.rows():
            lines.append(f"{r},{_fmt(dist)},{_fmt(loss)},{int(up)},{int(seed)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_manifest(cfg: ExperimentConfig, command: str, out: Path, files) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": emit_config(cfg),
        "seeds": cfg.seeds,
        "files": sorted(files),
        "versions": {"colrel": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _threads() -> int:
    raw = os.environ.get("COLREL_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        k = int(raw)
    except ValueError:
        raise ConfigError(f"COLREL_THREADS must be a positive integer (got {raw!r})") from None
    if k < 1:
        raise ConfigError(f"COLREL_THREADS must be a positive integer (got {raw!r})")
    return k


# ---------------------------------------------------------------- commands

def _optimize(cfg, model):
    return optimize_weights(model, cfg.experiment.get("sweeps"), unreachable=cfg.topology["unreachable"])


def cmd_optimize(cfg: ExperimentConfig, out: Path) -> dict:
    model = build_model(cfg)
    A, report = _optimize(cfg, model)
    save_model(model, out / "model.json")
    save_weights_csv(A, out / "weights.csv")
    (out / "solver_report.json").write_text(report.to_json() + "\n")
    return {"files": ["model.json", "weights.csv", "solver_report.json"],
            "summary": {"s": report.s, "s_bar": report.s_bar, "max_residual": report.max_residual,
                        "unreachable": report.unreachable}}


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    model = build_model(cfg)
    obj = build_objective(cfg, model.n)
    schedule = build_schedule(cfg, obj)
    A = None
    files = []
    if "colrel" in cfg.modes:
        A, report = _optimize(cfg, model)
        save_weights_csv(A, out / "weights.csv")
        files.append("weights.csv")
    jobs = [(mode, seed) for mode in cfg.modes for seed in cfg.seeds]
    with ThreadPoolExecutor(max_workers=min(_threads(), len(jobs))) as pool:
        traces = list(pool.map(lambda job: run_simulation(model, A, obj, schedule, job[0], job[1]), jobs))
    summary = {}
    for mode in cfg.modes:
        mine = [t for (m, _), t in zip(jobs, traces) if m == mode]
        name = f"trace_{mode}.csv"
        emit_metrics(mine, out / name)
        files.append(name)
        summary[mode] = {"final_loss_mean": float(np.mean([t.loss[-1] for t in mine])),
                         "final_dist_sq_mean": float(np.mean([t.dist_sq[-1] for t in mine]))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    files.append("summary.json")
    return {"files": files, "summary": summary}


def cmd_verify(cfg: ExperimentConfig, out: Path) -> dict:
    """Property suite on the configured model: unbiasedness, covariance oracle, monotone descent."""
    model = build_model(cfg)
    checks = {}
    steps = {"relaxed": [], "finetune": []}
    residuals = []

    def watch(phase, sweep, i, A):
        steps[phase].append((s_bar_value if phase == "relaxed" else s_value)(model, A))
        res = (model.p[:, None] * model.P.T * A).sum(axis=0)[i] - 1.0
        residuals.append(abs(res))

    A, report = optimize_weights(model, cfg.experiment.get("sweeps"), callback=watch,
                                 unreachable=cfg.topology["unreachable"])
    keep = [i for i in range(model.n) if i not in report.unreachable]

    for phase, vals in steps.items():
        # column solves hold the constraint to ~1e-12, so allow rounding-level increases
        rises = [b - a for a, b in zip(vals, vals[1:]) if b > a + MONOTONE_SLACK * max(1.0, abs(a))]
        checks[f"monotone_{phase}"] = {"pass": bool(not rises), "updates": len(vals),
                                       "max_increase": max(rises, default=0.0)}
    checks["residual"] = {"pass": bool(max(residuals, default=0.0) <= 1e-9),
                          "max_residual": max(residuals, default=0.0)}

    samples = cfg.experiment["verify_samples"]
    rng = np.random.default_rng(cfg.seeds[0])
    mean, se = unbiasedness_monte_carlo(model, A, samples, rng)
    dev = np.abs(mean - 1.0)[keep]
    ok = np.all(dev <= 4 * se[keep])
    checks["unbiasedness"] = {"pass": bool(ok), "samples": samples, "mean": mean.tolist(),
                              "stderr": se.tolist()}

    if model.n <= MAX_ENUM_N and not report.unreachable:
        cf = closed_form_covariance(model, A)
        en = enumerate_covariance(model, A)
        err = float(np.max(np.abs(cf - en)))
        sum_err = abs(float(cf.sum()) - s_value(model, A))
        checks["covariance_oracle"] = {"pass": bool(err <= 1e-12 and sum_err <= 1e-12),
                                       "max_entry_error": err, "sum_vs_s_error": sum_err}
    else:
        checks["covariance_oracle"] = {"pass": True, "skipped": f"needs n <= {MAX_ENUM_N} and no dropped clients"}

    passed = all(c["pass"] for c in checks.values())
    (out / "verify_report.json").write_text(json.dumps({"pass": passed, "checks": checks}, indent=2) + "\n")
    return {"files": ["verify_report.json"], "summary": {k: c["pass"] for k, c in checks.items()},
            "failed": not passed}


def cmd_bound(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.objective["kind"] != "quadratic":
        raise ConfigError("bound: needs objective.kind = \"quadratic\" (known L, mu, sigma and x*)")
    model = build_model(cfg)
    obj = build_objective(cfg, model.n)
    if not isinstance(obj, QuadraticObjective) or not obj.homogeneous:
        raise ConfigError("bound: the bound assumes homogeneous clients; set objective.spread = 0")
    cfg = replace(cfg, schedule=dict(cfg.schedule, step_rule="theory"))
    schedule = build_schedule(cfg, obj)
    if schedule.momentum:
        raise ConfigError("bound: the bound assumes schedule.momentum = 0")
    A, _ = _optimize(cfg, model)
    consts, rows = bound_curve(model, A, obj, schedule, cfg.seeds)
    write_bound_csv(rows, out / "bound.csv")
    (out / "constants.json").write_text(json.dumps(consts.__dict__, indent=2) + "\n")
    violations = sum(1 for _, b, m, se in rows if m > b + 4 * se)
    return {"files": ["bound.csv", "constants.json"],
            "summary": {"r0": consts.r0, "rows": len(rows), "violations": violations}}


_RUNNERS = {"optimize": cmd_optimize, "simulate": cmd_simulate, "verify": cmd_verify, "bound": cmd_bound}


def run_command(cmd: str, cfg: ExperimentConfig, out_dir=None) -> tuple[int, dict]:
    """Run one command; returns ``(exit_status, result)``.

    Exit status 0 on success, 1 when ``verify`` finds a failing check,
    2 for configuration errors and 3 for any other failure. On error
    ``result`` carries a structured ``error`` record.
    """
    if cmd not in _RUNNERS:
        return 2, {"error": {"type": "usage", "message": f"unknown command {cmd!r}"}}
    out = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.experiment["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = _RUNNERS[cmd](cfg, out)
    except InfeasibleModelError as exc:
        return 3, {"error": {"type": "infeasible_model", "message": str(exc), "unreachable": exc.columns}}
    except ConfigError as exc:
        return 2, {"error": {"type": "config", "message": str(exc)}}
    except Exception as exc:  # noqa: BLE001 - surfaced as a structured error
        return 3, {"error": {"type": type(exc).__name__, "message": str(exc)}}
    write_manifest(cfg, cmd, out, result["files"] + ["manifest.json"])
    return (1 if result.get("failed") else 0), result


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="colrel", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="TOML experiment config")
    ap.add_argument("--seed", type=int, help="run a single seed instead of experiment.seeds")
    ap.add_argument("--out", help="output directory (overrides experiment.out_dir)")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg = replace(cfg, experiment=dict(cfg.experiment, seeds=[args.seed]))
        _threads()
    except ConfigError as exc:
        print(json.dumps({"error": {"type": "config", "message": str(exc)}}), file=sys.stderr)
        return 2
    status, result = run_command(args.command, cfg, args.out)
    stream = sys.stderr if "error" in result else sys.stdout
    print(json.dumps(result, indent=2, default=float), file=stream)
    return status


if __name__ == "__main__":
    sys.exit(main())
