"""Batch runner: ``cmjvolterra {simulate,resolvent,cbi,converge,validate} --config FILE``.

Every run writes its data files, a ``summary.json`` and a ``manifest.json``
holding the fully resolved configuration, which is itself a valid config.
Exit status: 0 on success, 2 when a convergence tolerance fails, 1 on error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import warnings
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import rng as streams
from .cbi_limit import LimitParams, laplace_cbi, mean_cbi, simulate_cbi_ensemble
from .cmj_sim import SimulationOverflow, simulate, simulate_ensemble
from .distributions import ModelParams, law_from_dict
from .grid import fmt
from .harness import ConvergenceConfig, build_c1_family, empirical_laplace, run_convergence
from .volterra import (DivergentIntegralError, check_total_integral_identity, local_integral_identity,
                       resolvent_for, resolvent_total_integral, total_integral_exact)

EXIT_OK, EXIT_ERROR, EXIT_TOLERANCE = 0, 1, 2


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config_schema.json").read_text())


def _resolve_ref(schema, root):
    while "$ref" in schema:
        ref = schema["$ref"]
        node = root
        for part in ref.lstrip("#/").split("/"):
            node = node[part]
        extra = {k: v for k, v in schema.items() if k != "$ref"}
        schema = {**node, **extra}
    return schema


def _fill_defaults(value, schema, root):
    """Insert schema defaults into ``value`` in place (objects, arrays, oneOf)."""
    schema = _resolve_ref(schema, root)
    if "oneOf" in schema:
        for sub in schema["oneOf"]:
            sub = _resolve_ref(sub, root)
            if jsonschema.Draft202012Validator(sub).is_valid(value):
                return _fill_defaults(value, sub, root)
        return value
    if isinstance(value, dict):
        for key, sub in schema.get("properties", {}).items():
            sub = _resolve_ref(sub, root)
            if key not in value and "default" in sub:
                value[key] = copy.deepcopy(sub["default"])
            if key in value:
                value[key] = _fill_defaults(value[key], sub, root)
    elif isinstance(value, list) and isinstance(schema.get("items"), dict):
        return [_fill_defaults(v, schema["items"], root) for v in value]
    return value


def _locate(text: str, path) -> int | None:
    """Best-effort line number of a JSON path inside the source text."""
    pos, found = 0, None
    for part in path:
        if isinstance(part, int):
            continue
        i = text.find(json.dumps(part), pos)
        if i < 0:
            break
        pos, found = i, i
    return None if found is None else text.count("\n", 0, found) + 1


def _describe(err: jsonschema.ValidationError, text: str) -> str:
    path = list(err.absolute_path)
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = [k for k in err.instance if k not in allowed]
        if extra:
            path = path + [extra[0]]
    field = ".".join(str(p) for p in path) or "<root>"
    line = _locate(text, path)
    where = f"line {line}, " if line else ""
    return f"{where}field {field}: {err.message}"


def parse_config(text: str) -> dict:
    """Parse, schema-check and default-fill a config document."""
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}, column {e.colno}: {e.msg}") from None
    schema = load_schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        best = jsonschema.exceptions.best_match(errors)
        lines = [_describe(best, text)] + [_describe(e, text) for e in errors if e is not best]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    given = set(cfg) if isinstance(cfg, dict) else set()
    cfg = _fill_defaults(cfg, schema, schema)
    used = _BLOCKS[cfg["experiment"]] | {"experiment", "seed", "threads", "output"}
    return {k: v for k, v in cfg.items() if k in given or k in used}


_BLOCKS = {
    "resolvent": {"lifetime", "model", "grid", "resolvent"},
    "simulate": {"lifetime", "model", "grid", "mc", "simulate"},
    "cbi": {"limit", "grid", "mc", "cbi"},
    "converge": {"lifetime", "limit", "converge", "grid", "mc", "tolerances"},
}


def _model(cfg) -> ModelParams:
    d = dict(cfg["model"])
    d["lifetime"] = cfg["lifetime"]
    return ModelParams.from_dict(d)


def _limit(cfg) -> LimitParams:
    return LimitParams.from_dict(cfg["limit"])


def _check_semantics(cfg):
    """Construct every object the run will need, so bad values fail early."""
    kind = cfg["experiment"]
    try:
        if kind in ("simulate", "resolvent"):
            _model(cfg)
        if kind == "cbi":
            _limit(cfg)
            dt, T = cfg["grid"]["dt"], cfg["grid"]["T"]
            for t in cfg["cbi"]["eval_times"]:
                if t > T * (1 + 1e-12) or abs(round(t / dt) * dt - t) > 1e-9 * t:
                    raise ValueError(f"eval time {t} must be a multiple of dt={dt} within [0, T]")
        if kind == "converge":
            lim, law = _limit(cfg), law_from_dict(cfg["lifetime"])
            for n in cfg["converge"]["n_sequence"]:
                build_c1_family(lim, law, n)
            _convergence_config(cfg)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid config: {e}") from None


def _convergence_config(cfg, threads=1) -> ConvergenceConfig:
    c, mc = cfg["converge"], cfg["mc"]
    return ConvergenceConfig(
        n_sequence=list(c["n_sequence"]), replicas=mc["replicas"],
        eval_times=list(c["eval_times"]), z_list=list(c["z_list"]), alpha=c["alpha"],
        seed=cfg["seed"], z0=c["z0"], tolerances=list(cfg["tolerances"]),
        dt=cfg["grid"]["dt"], diag_h=c["diag_h"], resolvent_h=c["resolvent_h"],
        block_size=mc["block_size"], threads=threads, max_events=mc["max_events"])


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())


def _write_json(path: Path, obj):
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        return float(fmt(v)) if math.isfinite(v) else str(v)
    return x


def cmd_resolvent(cfg, out: Path, threads: int) -> int:
    params = _model(cfg)
    T, h = cfg["grid"]["T"], cfg["grid"]["h"]
    R = resolvent_for(params, T, h, damped=cfg["resolvent"]["damped"])
    t = R.base.t
    _write_csv(out / "resolvent.csv", ("t", "R", "R_left"),
               zip(t, R.base.values, R.left))
    beta = params.beta if cfg["resolvent"]["damped"] else 0.0
    summary = {"lambda_m": params.lambda_m, "criticality": params.criticality,
               "classification": params.classification, "T": T, "h": h}
    try:
        summary["total_integral"] = resolvent_total_integral(R)
        summary["total_integral_exact"] = total_integral_exact(params.lifetime, params.lambda_m,
                                                               beta, params.gamma_n)
        summary["total_integral_residual"] = check_total_integral_identity(
            R, params.lifetime, beta, params.gamma_n, params.lambda_m)
    except DivergentIntegralError as e:
        summary["total_integral"] = None
        summary["note"] = str(e)
    res1, res2 = local_integral_identity(R, T=min(1.0, T / 2))
    summary["local_identity_residuals"] = [res1, res2]
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_simulate(cfg, out: Path, threads: int) -> int:
    params = _model(cfg)
    sim, mc = cfg["simulate"], cfg["mc"]
    T, h = cfg["grid"]["T"], cfg["grid"]["h"]
    N = int(round(T / h))
    if N < 1 or abs(N * h - T) > 1e-9 * T:
        raise ConfigError(f"grid.T={T} is not a multiple of grid.h={h}")
    times = h * np.arange(N + 1)
    times[-1] = T
    ens = simulate_ensemble(params, sim["z0"], T, times, mc["replicas"], cfg["seed"],
                            size_biased=sim["size_biased"], block_size=mc["block_size"],
                            threads=threads, max_events=mc["max_events"])
    counts = ens.counts.astype(float)
    mean = counts.mean(axis=0)
    se = counts.std(axis=0, ddof=1) / math.sqrt(counts.shape[0]) if counts.shape[0] > 1 \
        else np.zeros_like(mean)
    _write_csv(out / "mean.csv", ("t", "mean", "stderr", "min", "max"),
               zip(times, mean, se, counts.min(axis=0).astype(int), counts.max(axis=0).astype(int)))
    for j in range(sim["record_paths"]):
        path, log = simulate(params, sim["z0"], T, streams.stream(cfg["seed"], streams.DIAGNOSTICS + j),
                             record=True, size_biased=sim["size_biased"],
                             max_events=mc["max_events"])
        path.to_csv(out / f"path_{j}.csv")
        log.to_csv(out / f"events_{j}.csv")
    _write_json(out / "summary.json", {
        "replicas": mc["replicas"], "z0": sim["z0"], "T": T,
        "lambda_m": params.lambda_m, "classification": params.classification,
        "final_mean": mean[-1], "final_stderr": se[-1],
        "events_total": int(np.sum(ens.events)), "max_count": int(counts.max())})
    return EXIT_OK


def cmd_cbi(cfg, out: Path, threads: int) -> int:
    lim = _limit(cfg)
    c, mc = cfg["cbi"], cfg["mc"]
    dt, T = cfg["grid"]["dt"], cfg["grid"]["T"]
    states, _ = simulate_cbi_ensemble(lim, c["z0"], T, dt, mc["replicas"],
                                      streams.stream(cfg["seed"], streams.CBI))
    lap_rows, mean_rows = [], []
    for t in sorted(c["eval_times"]):
        x = states[int(round(t / dt))]
        mean_rows.append((t, float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)),
                          mean_cbi(c["z0"], t, lim)))
        for z in c["z_list"]:
            emp, se = empirical_laplace(x, z)
            orc = laplace_cbi(c["z0"], z, t, lim, dt)
            lap_rows.append((t, float(z), emp, se, orc, abs(emp - orc)))
    _write_csv(out / "laplace.csv", ("t", "z", "empirical", "stderr", "oracle", "gap"), lap_rows)
    _write_csv(out / "mean.csv", ("t", "mean", "stderr", "oracle"), mean_rows)
    _write_json(out / "summary.json", {
        "paths": mc["replicas"], "dt": dt, "T": T,
        "max_gap_in_se": max(r[5] / r[3] if r[3] > 0 else 0.0 for r in lap_rows)})
    return EXIT_OK


def cmd_converge(cfg, out: Path, threads: int) -> int:
    report = run_convergence(_convergence_config(cfg, threads), _limit(cfg),
                             law_from_dict(cfg["lifetime"]))
    (out / "gaps.csv").write_text(report.rows_csv())
    (out / "per_n.csv").write_text(report.per_n_csv())
    (out / "summary.json").write_text(report.summary_json())
    return EXIT_OK if report.passed else EXIT_TOLERANCE


COMMANDS = {"simulate": cmd_simulate, "resolvent": cmd_resolvent, "cbi": cmd_cbi,
            "converge": cmd_converge}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmjvolterra", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in (*COMMANDS, "validate"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", type=Path, default=None, help="output directory")
        s.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: all cores)")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
    return p


def resolve(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        cfg["threads"] = args.threads
    cfg.setdefault("threads", os.cpu_count() or 1)
    if args.out is not None:
        cfg["output"]["dir"] = str(args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text()
        cfg = resolve(parse_config(text), args)
        _check_semantics(cfg)
        if args.command == "validate":
            print(f"{args.config}: valid {cfg['experiment']} config")
            return EXIT_OK
        if cfg["experiment"] != args.command:
            raise ConfigError(f"config is for '{cfg['experiment']}', not '{args.command}'")
        out = Path(cfg["output"]["dir"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "manifest.json", cfg)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code = COMMANDS[args.command](cfg, out, cfg["threads"])
        for msg in dict.fromkeys(f"{w.category.__name__}: {w.message}" for w in caught):
            print(f"warning: {msg}", file=sys.stderr)
        if code == EXIT_TOLERANCE:
            print("tolerance check failed; see summary.json", file=sys.stderr)
        return code
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except SimulationOverflow as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, ArithmeticError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
