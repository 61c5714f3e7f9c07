"""Command-line front end: ``deflate-rom {generate,run,check,compare} CONFIG``.

The configuration is one YAML (or JSON) file; any value can be overridden
with ``--dotted.key=value``.  Example::

    problem:
      generator: diffusion_1d       # or random_spd, or  bundle: path/to/dir
      n_elements: 64
      quadrature: {kind: gauss, n: 33, interval: [1, 2]}
    method:
      deflation: {k: 1, tol: 1.0e-8, max_steps: 64}
      pod: {inner: reference, k: 16}
    output_dir: out
    seed: 0

Exit codes: 0 success, 1 usage or configuration error, 2 numerical or
invariant failure.
"""

import argparse
import copy
import csv
import itertools
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .deflation import (
    decay_diagnostic,
    fit_decay,
    load_expansion,
    run_deflation,
    save_expansion,
    verify_identities,
)
from .errors import ConfigError, DeflateRomError
from .hilbert import identity_form
from .parametric import (
    default_threads,
    generate_diffusion_1d,
    generate_random_spd_family,
    load_problem,
    mean_operator,
    parse_quadrature,
    save_problem,
    truth_solve,
)
from .pod import pod_error_curve, pod_modes, save_pod
from .subspace_opt import OptimizerOptions

__all__ = ["main", "load_config", "apply_overrides"]

log = logging.getLogger("deflate_rom")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
DEFAULT_CHECK_TOL = 1e-10
FIT_FLOOR = 1e-14
GENERATORS = ("diffusion_1d", "random_spd")
POD_INNER = ("reference", "identity", "a_mean")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# Configuration ---------------------------------------------------------------

def _scalar(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return yaml.safe_load(text)


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping at top level")
    return cfg


def apply_overrides(cfg, overrides):
    """Apply ``--a.b.c=value`` strings to a nested mapping (copied)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r} (expected --key=value)")
        key, value = item[2:].split("=", 1)
        parts = key.split(".")
        if not all(parts):
            raise ConfigError(f"bad override key {key!r}")
        node = cfg
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
            node = child
        node[parts[-1]] = _scalar(value)
    return cfg


def _num(section, key, default, kind=float, positive=False, allow_none=False):
    value = section.get(key, default)
    if value is None and allow_none:
        return None
    try:
        out = kind(float(value)) if kind is int else kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a number, got {value!r}") from None
    if kind is int and float(value) != out:
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    if positive and not out > 0:
        raise ConfigError(f"{key} must be positive, got {value!r}")
    if kind is float and not math.isfinite(out):
        raise ConfigError(f"{key} must be finite")
    return out


def resolve_config(cfg):
    """Fill defaults and validate; returns a new mapping."""
    cfg = copy.deepcopy(cfg)
    cfg["seed"] = _num(cfg, "seed", 0, int)
    cfg["check_every"] = _num(cfg, "check_every", 10, int)
    cfg["check_tol"] = _num(cfg, "check_tol", DEFAULT_CHECK_TOL, positive=True)
    if not cfg.get("output_dir"):
        raise ConfigError("output_dir is required")
    cfg["output_dir"] = str(cfg["output_dir"])

    prob = cfg.get("problem")
    if not isinstance(prob, dict):
        raise ConfigError("problem must be a mapping")
    has_bundle = "bundle" in prob
    has_gen = "generator" in prob
    if has_bundle == has_gen:
        raise ConfigError("problem needs exactly one of 'generator' or 'bundle'")
    if has_gen and prob["generator"] not in GENERATORS:
        raise ConfigError(f"unknown generator {prob['generator']!r}; choose from {GENERATORS}")

    method = cfg.setdefault("method", {})
    if not isinstance(method, dict):
        raise ConfigError("method must be a mapping")
    if "deflation" in method:
        defl = method["deflation"]
        if not isinstance(defl, dict):
            defl = {}
        defl["k"] = _num(defl, "k", 1, int, positive=True)
        defl["tol"] = _num(defl, "tol", 1e-8, positive=True)
        defl["max_steps"] = _num(defl, "max_steps", None, int, positive=True, allow_none=True)
        opt = defl.get("optimizer") or {}
        if not isinstance(opt, dict):
            raise ConfigError("method.deflation.optimizer must be a mapping")
        defl["optimizer"] = {
            "tol": _num(opt, "tol", 1e-9, positive=True),
            "n_starts": _num(opt, "n_starts", 8, int, positive=True),
            "max_iters": _num(opt, "max_iters", 10_000, int, positive=True),
            "max_sweeps": _num(opt, "max_sweeps", 200, int, positive=True),
        }
        method["deflation"] = defl
    if "pod" in method:
        pod = method["pod"]
        if not isinstance(pod, dict):
            pod = {}
        pod["inner"] = pod.get("inner", "reference")
        if pod["inner"] not in POD_INNER:
            raise ConfigError(f"unknown POD inner product {pod['inner']!r}; choose from {POD_INNER}")
        pod["k"] = _num(pod, "k", 8, int)
        if pod["k"] < 0:
            raise ConfigError("method.pod.k must be non-negative")
        method["pod"] = pod
    return cfg


def _options(cfg):
    opt = cfg["method"]["deflation"]["optimizer"]
    return OptimizerOptions(
        tol=opt["tol"],
        n_starts=opt["n_starts"],
        seed=cfg["seed"],
        max_iters=opt["max_iters"],
        max_sweeps=opt["max_sweeps"],
        threads=cfg["threads"],
    )


def build_problem(cfg):
    """Return ``(op, rhs, grid)`` for the configured problem source."""
    prob = cfg["problem"]
    if "bundle" in prob:
        try:
            return load_problem(prob["bundle"])
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from None
    try:
        if prob["generator"] == "diffusion_1d":
            grid = parse_quadrature(prob.get("quadrature"))
            n_el = _num(prob, "n_elements", 64, int)
            if n_el < 2:
                raise ConfigError("diffusion_1d needs n_elements >= 2")
            return generate_diffusion_1d(n_el, grid, reference=prob.get("reference", "midpoint"))
        decay = prob.get("decay")
        return generate_random_spd_family(
            _num(prob, "n", 16, int, positive=True),
            _num(prob, "n_nodes", 8, int, positive=True),
            seed=_num(prob, "seed", cfg["seed"], int),
            gamma_independent=bool(prob.get("gamma_independent", False)),
            decay=None if decay is None else float(decay),
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid problem description: {exc}") from None


def _pod_inner(name, op, grid):
    if name == "reference":
        return op.reference
    if name == "identity":
        return identity_form(op.n)
    return mean_operator(op, grid)


# Output helpers -------------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _echo_config(out, cfg):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _gnuplot(path, data, columns, title):
    lines = [
        "# gnuplot script; run with: gnuplot -p " + path.name,
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set logscale y",
        "set xlabel 'index'",
        "set ylabel 'mean energy'",
        f"set title '{title}'",
    ]
    plots = [f"'{data}' using 1:{c} with linespoints" for c in columns]
    lines.append("plot " + ", \\\n     ".join(plots))
    path.write_text("\n".join(lines) + "\n")


def _pad(values, length):
    values = list(values)
    return values + [None] * (length - len(values))


# Commands -------------------------------------------------------------------

def cmd_generate(cfg):
    out = Path(cfg["output_dir"])
    op, rhs, grid = build_problem(cfg)
    save_problem(out, op, rhs, grid)
    _echo_config(out, cfg)
    print(f"wrote problem bundle to {out} (n={op.n}, nodes={op.n_nodes})")
    return EXIT_OK


def _check_k(cfg, op):
    defl = cfg["method"].get("deflation")
    if defl is not None and defl["k"] > op.n:
        raise ConfigError(f"deflation k={defl['k']} exceeds the dimension n={op.n}")
    pod = cfg["method"].get("pod")
    if pod is not None and pod["k"] > min(op.n, op.n_nodes):
        raise ConfigError(f"pod k={pod['k']} exceeds min(n, n_nodes)={min(op.n, op.n_nodes)}")


def _report(report, tol, stream=None):
    stream = stream or sys.stdout
    print(f"{'identity':<15}{'worst':>26}  status", file=stream)
    for name, value in report.worst().items():
        status = "ok" if value <= tol else "FAIL"
        print(f"{name:<15}{value:>26.17g}  {status}", file=stream)


def cmd_run(cfg):
    out = Path(cfg["output_dir"])
    op, rhs, grid = build_problem(cfg)
    _check_k(cfg, op)
    method = cfg["method"]
    if "deflation" not in method and "pod" not in method:
        raise ConfigError("method needs 'deflation' and/or 'pod'")
    _echo_config(out, cfg)
    truth = truth_solve(op, rhs, threads=cfg["threads"])
    columns = {"index": [0]}
    timings = []
    ok = True
    if "deflation" in method:
        d = method["deflation"]
        t0 = time.perf_counter()
        exp = run_deflation(op, grid, rhs, k=d["k"], tol=d["tol"], max_steps=d["max_steps"],
                            options=_options(cfg), check_every=cfg["check_every"],
                            threads=cfg["threads"])
        total_ms = 1e3 * (time.perf_counter() - t0)
        save_expansion(out / "expansion", exp)
        report = verify_identities(op, grid, rhs, exp, truth)
        columns["index"] = list(range(len(exp.terms) + 1))
        columns["step_energy"] = [0.0] + list(exp.step_energies)
        columns["residual_energy_ledger"] = list(exp.residual_energies)
        columns["residual_energy_recomputed"] = list(report.residual_energies)
        timings = [(dg.step, dg.wall_ms) for dg in exp.diagnostics] + [("total", total_ms)]
        print(f"deflation: {len(exp.terms)} steps, stop: {exp.stop_reason}")
        _report(report, cfg["check_tol"])
        failed = report.failures(cfg["check_tol"])
        if failed:
            ok = False
            print("invariant failure: " + ", ".join(failed), file=sys.stderr)
    if "pod" in method:
        p = method["pod"]
        t0 = time.perf_counter()
        pod = pod_modes(truth, grid, _pod_inner(p["inner"], op, grid), p["k"])
        curve = pod_error_curve(pod, op, grid, rhs, truth)
        save_pod(out / "pod", pod)
        timings.append(("pod", 1e3 * (time.perf_counter() - t0)))
        columns["pod_error"] = curve
        if len(curve) > len(columns["index"]):
            columns["index"] = list(range(len(curve)))
    n_rows = len(columns["index"])
    header = list(columns)
    rows = zip(*[_pad(columns[h], n_rows) for h in header])
    _write_csv(out / "curves.csv", header, rows)
    _write_csv(out / "timings.csv", ["step", "wall_ms"],
               [(s, ms) for s, ms in timings])
    if cfg.get("gnuplot"):
        cols = [i + 1 for i, h in enumerate(header) if h != "index" and h != "step_energy"]
        _gnuplot(out / "curves.gp", "curves.csv", cols, "residual energy")
    print(f"wrote {out / 'curves.csv'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_check(cfg):
    out = Path(cfg["output_dir"])
    op, rhs, grid = build_problem(cfg)
    try:
        exp = load_expansion(out / "expansion")
    except FileNotFoundError as exc:
        raise ConfigError(f"missing run artifacts: {exc}") from None
    except (ValueError, KeyError) as exc:
        print(f"corrupt run artifacts: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if exp.n != op.n or exp.n_nodes != op.n_nodes:
        raise ConfigError("expansion does not match the configured problem")
    truth = truth_solve(op, rhs, threads=cfg["threads"])
    report = verify_identities(op, grid, rhs, exp, truth)
    print(f"expansion with {len(exp.terms)} terms, tolerance {cfg['check_tol']:.3g}")
    _report(report, cfg["check_tol"])
    failed = report.failures(cfg["check_tol"])
    if failed:
        print("invariant failure: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_compare(cfg):
    out = Path(cfg["output_dir"])
    method = cfg["method"]
    op, rhs, grid = build_problem(cfg)
    _check_k(cfg, op)
    _echo_config(out, cfg)
    m_max = method["pod"]["k"]
    d = method["deflation"]
    truth = truth_solve(op, rhs, threads=cfg["threads"])
    exp = run_deflation(op, grid, rhs, k=1, tol=d["tol"], max_steps=m_max,
                        options=_options(cfg), check_every=cfg["check_every"],
                        threads=cfg["threads"])
    report = verify_identities(op, grid, rhs, exp, truth)
    pod = pod_modes(truth, grid, _pod_inner(method["pod"]["inner"], op, grid), m_max)
    pod_curve = pod_error_curve(pod, op, grid, rhs, truth)
    defl_curve = list(report.residual_energies)
    # after an early stop the deflation approximation no longer changes
    defl_curve += [defl_curve[-1]] * (m_max + 1 - len(defl_curve))
    _write_csv(out / "compare.csv", ["index", "deflation_error", "pod_error"],
               zip(range(m_max + 1), defl_curve, pod_curve))
    fits = {
        "deflation": decay_diagnostic(exp),
        # POD decrements stop at the round-off floor of the initial energy
        "pod": fit_decay(list(itertools.takewhile(
            lambda x: x > FIT_FLOOR * pod_curve[0],
            (a - b for a, b in zip(pod_curve, pod_curve[1:]))))),
    }
    _write_csv(out / "decay.csv", ["method", "slope", "rho", "rate"],
               [(name, f.slope, f.rho, f.rate) for name, f in fits.items()])
    if cfg.get("gnuplot"):
        _gnuplot(out / "compare.gp", "compare.csv", [2, 3], "deflation vs POD")
    print(f"{'m':>4}{'deflation':>26}{'pod':>26}")
    for m in range(m_max + 1):
        print(f"{m:>4}{defl_curve[m]:>26.17g}{pod_curve[m]:>26.17g}")
    for name, f in fits.items():
        rate = "n/a" if f.rate is None else f"{f.rate:.6g}"
        print(f"{name} fitted rate: {rate}")
    failed = report.failures(cfg["check_tol"])
    if failed:
        print("invariant failure: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "check": cmd_check, "compare": cmd_compare}


def build_parser():
    parser = _Parser(prog="deflate-rom", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="YAML or JSON configuration file")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: $DEFLATE_ROM_THREADS or all cores)")
    parser.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), extra)
        if args.command == "compare":
            # compare always runs both methods, deflation with k = 1
            method = cfg.setdefault("method", {})
            if not isinstance(method, dict):
                raise ConfigError("method must be a mapping")
            method.setdefault("pod", {})
            if not isinstance(method.get("deflation"), dict):
                method["deflation"] = {}
            method["deflation"]["k"] = 1
        cfg = resolve_config(cfg)
        threads = args.threads if args.threads is not None else default_threads()
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg["threads"] = threads
        cfg["gnuplot"] = bool(args.gnuplot or cfg.get("gnuplot", False))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DeflateRomError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
