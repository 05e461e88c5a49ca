"""Batch command line front end.

Usage::

    python3 -m langevin_sensitivity <subcommand> key=value ... [--desk]

Settings may also come from ``config=path``, a file of ``key = value``
lines; command line tokens override the file.  Every CSV starts with ``#``
comment lines holding the resolved settings, then one header row.
"""

import io
import math
import sys
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .analysis import empirical_tail_cdf, fit_log_slope, log_separation_slope, plateau_detect
from .dynamics import InitialCondition, SimConfig, final_states, simulate_coupled_pair, simulate_replica, NoiseStream
from .errors import DivergenceError, NumericError, UsageError
from .estimators import (
    green_kubo_sensitivity,
    make_observable,
    nemd_finite_difference,
    tangent_estimates,
)
from .merging import MergeConfig, merge_compare
from .potentials import CATALOG, build_model
from .spectral import SpectralGrid, check_assumptions, mean_min_spec, poincare_constant

__all__ = ["RunSpec", "parse_config", "run", "main", "EXIT_OK", "EXIT_USAGE", "EXIT_NUMERIC",
           "EXIT_DIVERGENCE"]

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DIVERGENCE = 0, 2, 3, 4

SUBCOMMANDS = ("simulate", "sensitivity", "greenkubo", "nemd", "spectral", "sweep", "tail",
               "merge-compare", "pair-contraction", "colloid")
PRESETS = tuple(f"figure{k}" for k in range(1, 7))


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _parse_int(s):
    v = float(s)
    if not v.is_integer():
        raise ValueError(s)
    return int(v)


def _parse_floats(s):
    return tuple(float(t) for t in s.split(","))


# key -> (parser, default); None means "no default"
COMMON = {
    "model": (str, None),
    "output": (str, None),
    "series": (str, None),
    "seed": (_parse_int, 0),
    "dt": (float, 1e-3),
    "t_final": (float, 10.0),
    "n_replicas": (_parse_int, 1000),
    "burn_in": (float, 0.0),
    "record_stride": (_parse_int, 1),
    "workers": (_parse_int, 1),
    "initial": (str, "default"),
    "x0": (_parse_floats, None),
    "sd": (float, 1.0),
    "average_from": (float, None),
}

SPECIFIC = {
    "simulate": {},
    "sensitivity": {"observable": (str, "x1"), "estimator": (str, "ensemble")},
    "greenkubo": {"observable": (str, "x1"), "t_trunc": (float, None), "centered": (_parse_bool, True)},
    "nemd": {"observable": (str, "x1"), "eps": (float, 1e-2)},
    "spectral": {"beta_moment": (float, 1.0), "sweep": (str, None), "tol": (float, 1e-3),
                 "dx": (float, 0.01)},
    "sweep": {"observable": (str, "x1"), "estimator": (str, "ensemble"), "param": (str, None),
              "values": (str, None), "eps": (float, 1e-2), "t_trunc": (float, None)},
    "tail": {"input": (str, None)},
    "merge-compare": {"observable": (str, "smoothed_indicator"), "bin": (float, 0.04),
                      "period": (_parse_int, 10), "batch": (_parse_int, None)},
    "pair-contraction": {"y0": (_parse_floats, None), "fit_from": (float, None)},
    "colloid": {"rel_tol": (float, 0.1)},
}

# subcommand-specific overrides of COMMON defaults
DEFAULTS = {
    "greenkubo": {"burn_in": 10.0, "record_stride": 10},
    "tail": {"t_final": 40.0, "n_replicas": 10000, "record_stride": 1000},
    "merge-compare": {"record_stride": 100},
    "pair-contraction": {"n_replicas": 100, "record_stride": 10},
    "colloid": {"model": "colloid", "dt": 5e-5, "t_final": 1.0, "n_replicas": 2000,
                "record_stride": 200},
    "spectral": {"n_replicas": 1},
    "simulate": {"n_replicas": 1, "t_final": 1.0},
}

PRESET_SPECS = {
    "figure1": ("spectral", {"model": "double_well", "sweep": "c:0.1:3:0.1"}, {}),
    "figure2": ("spectral", {"model": "double_well", "sweep": "c:0.1:3:0.1", "beta_moment": "2"}, {}),
    "figure3": ("tail", {"model": "double_well", "c": "2", "t_final": "40", "n_replicas": "1000000"},
                {"n_replicas": "100000"}),
    "figure4": ("colloid", {"dt": "5e-6", "n_replicas": "100000", "t_final": "1"},
                {"dt": "5e-5", "n_replicas": "2000"}),
    "figure5": ("merge-compare", {"model": "double_well", "c": "2.9", "n_replicas": "1000000",
                                  "batch": "1000", "observable": "smoothed_indicator"},
                {"n_replicas": "40000", "batch": "200"}),
    "figure6": ("merge-compare", {"model": "double_well", "c": "2.9", "n_replicas": "1000000",
                                  "batch": "1000", "observable": "smoothed_indicator"},
                {"n_replicas": "40000", "batch": "200"}),
}


@dataclass
class RunSpec:
    subcommand: str
    model: Optional[str]
    model_params: dict
    sim: Optional[SimConfig]
    options: dict
    output: Optional[str] = None
    warnings: list = field(default_factory=list)
    preset: Optional[str] = None

    def header_lines(self):
        lines = [f"# artifact {__version__}", f"# subcommand={self.subcommand}"]
        if self.preset:
            lines.append(f"# preset={self.preset}")
        if self.model:
            lines.append(f"# model={self.model}")
        for k in sorted(self.model_params):
            lines.append(f"# {k}={_fmt(self.model_params[k])}")
        if self.sim is not None:
            s = self.sim
            for k in ("dt", "t_final", "n_replicas", "burn_in", "record_stride", "workers",
                      "average_from"):
                lines.append(f"# {k}={_fmt(getattr(s, k))}")
            lines.append(f"# initial={s.initial.kind}")
            lines.append(f"# master_seed={s.master_seed}")
        for k in sorted(self.options):
            lines.append(f"# {k}={_fmt(self.options[k])}")
        return lines


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, tuple):
        return ",".join(_fmt(a) for a in v)
    if v is None:
        return "none"
    return str(v)


def _read_config_file(path):
    pairs = []
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
                k, v = line.split("=", 1)
                pairs.append((k.strip(), v.strip(), f"{path}:{lineno}"))
    except OSError as exc:
        raise UsageError(f"cannot read config file {path!r}: {exc}") from exc
    return pairs


def _tokens(args):
    flags, pairs = set(), []
    for tok in args:
        if tok.startswith("--"):
            flags.add(tok[2:])
        elif "=" in tok:
            k, v = tok.split("=", 1)
            if not k:
                raise UsageError(f"malformed token {tok!r}")
            pairs.append((k, v, tok))
        else:
            raise UsageError(f"expected key=value, got {tok!r}")
    return flags, pairs


def _expand_range(text):
    """``a:b:step`` to an inclusive list of values."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"range must be a:b:step, got {text!r}")
    a, b, h = (float(p) for p in parts)
    if h <= 0 or b < a:
        raise UsageError(f"invalid range {text!r}")
    n = int(math.floor((b - a) / h + 1e-9)) + 1
    return [round(a + k * h, 12) for k in range(n)]


def parse_config(args, config_text=None):
    """Resolve command line tokens (and an optional config file) into a :class:`RunSpec`."""
    args = list(args)
    if not args:
        raise UsageError(f"missing subcommand; one of {', '.join(SUBCOMMANDS + PRESETS)}")
    sub, rest = args[0], args[1:]
    flags, pairs = _tokens(rest)
    unknown_flags = flags - {"desk"}
    if unknown_flags:
        raise UsageError(f"unknown flag(s): {', '.join('--' + f for f in sorted(unknown_flags))}")
    preset = None
    if sub in PRESETS:
        preset = sub
        sub, full, desk = PRESET_SPECS[preset]
        base = dict(full)
        if "desk" in flags:
            base.update(desk)
        pairs = [(k, v, f"preset {preset}") for k, v in base.items()] + pairs
    elif sub not in SUBCOMMANDS:
        raise UsageError(f"unknown subcommand {sub!r}; one of {', '.join(SUBCOMMANDS + PRESETS)}")
    elif "desk" in flags:
        raise UsageError("--desk only applies to figure presets")

    file_pairs = []
    cfg_tokens = [p for p in pairs if p[0] == "config"]
    pairs = [p for p in pairs if p[0] != "config"]
    if cfg_tokens:
        file_pairs = _read_config_file(cfg_tokens[-1][1])
    if config_text is not None:
        file_pairs = []
        for lineno, raw in enumerate(config_text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                if "=" not in line:
                    raise UsageError(f"config line {lineno}: expected 'key = value'")
                k, v = line.split("=", 1)
                file_pairs.append((k.strip(), v.strip(), f"config line {lineno}"))

    raw, origin, warns = {}, {}, []
    for k, v, src in file_pairs:
        raw[k], origin[k] = v, src
    seen = set()
    for k, v, src in pairs:
        if k in seen and raw[k] != v:
            warns.append(f"duplicate key {k!r}: using {v!r} (last wins)")
        seen.add(k)
        raw[k], origin[k] = v, src

    schema = dict(COMMON)
    schema.update(SPECIFIC[sub])
    defaults = {k: d for k, (_, d) in schema.items()}
    defaults.update(DEFAULTS.get(sub, {}))
    model_name = raw.get("model", defaults.get("model"))
    model_schema = {}
    if model_name is not None:
        if model_name not in CATALOG:
            raise UsageError(f"unknown model {model_name!r}; catalog: {', '.join(sorted(CATALOG))}")
        model_schema = CATALOG[model_name].parameters

    values = dict(defaults)
    model_params = {}
    for k, v in raw.items():
        if k in schema:
            try:
                values[k] = schema[k][0](v)
            except ValueError:
                raise UsageError(f"malformed value in {origin[k]!r}: {k}={v}") from None
        elif k in model_schema:
            default = model_schema[k]
            try:
                model_params[k] = type(default)(float(v)) if isinstance(default, int) else (
                    float(v) if isinstance(default, float) else v)
            except ValueError:
                raise UsageError(f"malformed value in {origin[k]!r}: {k}={v}") from None
        else:
            raise UsageError(f"unknown key {k!r} (from {origin[k]}) for subcommand {sub!r}")

    needs_model = not (sub == "tail" and values.get("input"))
    if needs_model and values.get("model") is None:
        raise UsageError(f"subcommand {sub!r} requires model=<name>")
    if sub == "sweep" and (values.get("param") is None or values.get("values") is None):
        raise UsageError("sweep requires param=<name> and values=a:b:step")

    sim = None
    if sub not in ("spectral",) and not (sub == "tail" and values.get("input")):
        sim = _sim_config(sub, values)
    options = {k: values[k] for k in SPECIFIC[sub] if values.get(k) is not None}
    if sub == "spectral" and values.get("sweep"):
        name, _, rng = values["sweep"].partition(":")
        if name not in model_schema:
            raise UsageError(f"sweep parameter {name!r} is not a parameter of {values['model']!r}")
        options["sweep_values"] = tuple(_expand_range(rng))
    if sub == "sweep":
        if values["param"] not in model_schema:
            raise UsageError(f"sweep parameter {values['param']!r} is not a parameter of {values['model']!r}")
        options["sweep_values"] = tuple(_expand_range(values["values"]))
    if values.get("series"):
        options["series"] = values["series"]
    if values.get("x0") is not None and sub == "pair-contraction":
        options["x0"] = values["x0"]
    return RunSpec(sub, values.get("model"), model_params, sim, options, values.get("output"),
                   warns, preset)


def _sim_config(sub, v):
    average_from = v["average_from"]
    if average_from is None:
        average_from = 0.5 * v["t_final"] if sub in ("sensitivity", "nemd", "sweep") else 0.0
    kind = v["initial"]
    mean = v["x0"] if kind in ("point", "gaussian") else None
    if kind == "gaussian" and mean is None:
        mean = (0.0,)
    try:
        ic = InitialCondition(kind, mean, v["sd"])
        return SimConfig(dt=v["dt"], t_final=v["t_final"], n_replicas=v["n_replicas"],
                         master_seed=v["seed"], burn_in=v["burn_in"],
                         record_stride=v["record_stride"], initial=ic, workers=v["workers"],
                         average_from=average_from)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------------------
# CSV helpers


def _write_table(out, header, rows):
    out.write(",".join(header) + "\n")
    for r in rows:
        out.write(",".join(_fmt(a) for a in r) + "\n")


def _summary_rows(results):
    keys = ["estimator", "value", "std_error", "ci_lo", "ci_hi", "n_replicas", "n_diverged"]
    return keys, [[r.summary()[k] for k in keys] for r in results]


def _series_csv(path, spec, result):
    with open(path, "w", newline="") as fh:
        for line in spec.header_lines():
            fh.write(line + "\n")
        _write_table(fh, ["time", "estimate", "std_error"], result.series)


def _guard_divergence(results):
    for r in results:
        if r.n_diverged * 2 > max(r.n_replicas, 1):
            raise DivergenceError(f"{r.estimator}: {r.n_diverged} of {r.n_replicas} replicas diverged",
                                  r.n_diverged, r.n_replicas)


# --------------------------------------------------------------------------
# Handlers: each writes its table to ``out`` and may append comment lines


def _models(spec, **override):
    params = dict(spec.model_params)
    params.update(override)
    return build_model(spec.model, **params)


def _do_simulate(spec, out):
    pot, pert = _models(spec)
    d = pot.dim
    cols = ["time", "replica"] + [f"x_{i}" for i in range(d)] + [f"t_{i}" for i in range(d)]
    out.write(",".join(cols) + "\n")
    obs = {"x": lambda s: s.x, "t": lambda s: s.tangent}
    for r in range(spec.sim.n_replicas):
        rec = simulate_replica(spec.sim, pot, pert, NoiseStream(spec.sim.master_seed, r, d), obs)
        for k, t in enumerate(rec.times):
            row = [float(t), r] + [float(a) for a in rec.series["x"][k]] + [float(a) for a in rec.series["t"][k]]
            out.write(",".join(_fmt(a) for a in row) + "\n")
        if rec.diverged_at is not None:
            warnings.warn(f"replica {r} diverged at time {rec.diverged_at}", RuntimeWarning)


def _estimate(spec, pot, pert, which):
    o = spec.options
    obs = make_observable(o.get("observable", "x1"), pot.dim)
    if which in ("ensemble", "ergodic"):
        erg, ens = tangent_estimates(spec.sim, pot, pert, obs, want_average=which == "ergodic",
                                     want_series=which == "ensemble")
        return erg if which == "ergodic" else ens
    if which == "greenkubo":
        return green_kubo_sensitivity(spec.sim, pot, pert, obs, o.get("t_trunc"),
                                      o.get("centered", True))
    if which == "nemd":
        return nemd_finite_difference(spec.sim, pot, pert, obs, o.get("eps", 1e-2))
    raise UsageError(f"unknown estimator {which!r}; use ensemble, ergodic, greenkubo or nemd")


def _do_estimator(which):
    def handler(spec, out):
        pot, pert = _models(spec)
        res = _estimate(spec, pot, pert, which)
        _guard_divergence([res])
        keys, rows = _summary_rows([res])
        _write_table(out, keys, rows)
        if which == "greenkubo":
            out.write(f"# t_trunc={_fmt(res.diagnostics['t_trunc'])}\n")
            out.write(f"# truncation_tail={_fmt(res.diagnostics['tail'])}\n")
        if spec.options.get("series") and res.series is not None:
            _series_csv(spec.options["series"], spec, res)
    return handler


def _do_sensitivity(spec, out):
    return _do_estimator(spec.options.get("estimator", "ensemble"))(spec, out)


def _assumptions(spec, pot, bm):
    grid = SpectralGrid.for_model(pot, spec.options.get("dx", 0.01))
    eta, _ = poincare_constant(pot, grid, spec.options.get("tol", 1e-3))
    return check_assumptions(pot, bm, eta=eta)


def _do_spectral(spec, out):
    bm = spec.options.get("beta_moment", 1.0)
    if "sweep_values" in spec.options:
        name = spec.options["sweep"].split(":")[0]
        rows = []
        for v in spec.options["sweep_values"]:
            pot, _ = _models(spec, **{name: v})
            rep = _assumptions(spec, pot, bm)
            rows.append((v, rep.eta, rep.rho, rep.beta))
        _write_table(out, [name, "eta", "rho", "beta"], rows)
        return
    pot, _ = _models(spec)
    rep = _assumptions(spec, pot, bm)
    flags = ";".join(f"{k}={_fmt(v)}" for k, v in rep.flags().items())
    out.write(f"eta={_fmt(rep.eta)}, rho={_fmt(rep.rho)}, beta={_fmt(rep.beta)}, "
              f"inf_phi={_fmt(rep.inf_phi)}, E={_fmt(rep.E)}, Var={_fmt(rep.Var)}, flags={flags}\n")
    for note in rep.notes:
        out.write(f"# note: {note}\n")


def _do_sweep(spec, out):
    name = spec.options["param"]
    rows = []
    for v in spec.options["sweep_values"]:
        pot, pert = _models(spec, **{name: v})
        res = _estimate(spec, pot, pert, spec.options.get("estimator", "ensemble"))
        rows.append((v, res.value, res.std_error))
    _write_table(out, ["param", "value", "std_error"], rows)


def _tail_samples(spec):
    if spec.options.get("input"):
        path = spec.options["input"]
        try:
            data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read samples from {path!r}: {exc}") from exc
        return data[:, -1]
    pot, pert = _models(spec)
    _, T, alive = final_states(spec.sim, pot, pert)
    n_bad = int((~alive).sum())
    if n_bad:
        warnings.warn(f"{n_bad} replicas diverged and were excluded", RuntimeWarning)
    return T[alive, 0]


def _do_tail(spec, out):
    tail = fit_log_slope(empirical_tail_cdf(_tail_samples(spec)))
    x, S = tail.points()
    _write_table(out, ["x", "survival"], zip(x, S))
    out.write(f"# fit slope={_fmt(tail.slope)} slope_se={_fmt(tail.slope_se)} "
              f"intercept={_fmt(tail.intercept)} r_squared={_fmt(tail.r_squared)} "
              f"x_lo={_fmt(tail.fit_range[0])} x_hi={_fmt(tail.fit_range[1])} "
              f"n_points={tail.n_fit_points}\n")
    if tail.slope < -2:
        note = "slope below -2: consistent with a finite second moment (heuristic)"
    elif tail.slope < -1:
        note = "slope between -2 and -1: consistent with a finite first moment only (heuristic)"
    else:
        note = "slope above -1: the first moment may be infinite (heuristic)"
    out.write(f"# {note}\n")


def _do_merge_compare(spec, out):
    pot, pert = _models(spec)
    o = spec.options
    mc = MergeConfig(o.get("bin", 0.04), o.get("period", 10), True, o.get("batch"))
    obs = make_observable(o.get("observable", "smoothed_indicator"), pot.dim)
    rows, merged, plain = merge_compare(spec.sim, mc, pot, pert, obs)
    _guard_divergence([merged, plain])
    _write_table(out, ["time", "mean_merged", "se_merged", "mean_plain", "se_plain", "var_ratio"], rows)


def _do_pair_contraction(spec, out):
    from .dynamics import BlockNoise, INITIAL_STREAM
    pot, _ = _models(spec)
    n, d = spec.sim.n_replicas, pot.dim
    o = spec.options
    if "x0" in o and "y0" in o:
        x = np.broadcast_to(np.asarray(o["x0"], dtype=float), (n, d)).copy()
        y = np.broadcast_to(np.asarray(o["y0"], dtype=float), (n, d)).copy()
    else:
        g = BlockNoise(spec.sim.master_seed, 0, n, 2 * d, INITIAL_STREAM).next()
        x, y = g[:, :d].copy(), g[:, d:].copy()
    times, sep = simulate_coupled_pair(x, y, spec.sim, pot)
    t0 = o.get("fit_from", 0.5 * spec.sim.t_final)
    slope, mean_log, n_gone = log_separation_slope(times, sep, t0)
    _write_table(out, ["time", "mean_log_separation", "mean_separation"],
                 zip(times, mean_log, sep.mean(axis=1)))
    try:
        ref = mean_min_spec(pot)
    except UsageError:
        ref = float("nan")
    out.write(f"# slope={_fmt(slope)} mean_min_spec={_fmt(ref)} fit_from={_fmt(t0)} "
              f"coalesced_pairs={n_gone}\n")


def _do_colloid(spec, out):
    pot, pert = _models(spec)
    obs = make_observable("covariance", pot.dim)
    _, ens = tangent_estimates(spec.sim, pot, pert, obs, want_average=False)
    _guard_divergence([ens])
    theta = pot.params["temperature"]
    _write_table(out, ["time", "estimate", "std_error"], ens.series)
    plateau = plateau_detect(ens.series, spec.options.get("rel_tol", 0.1))
    out.write(f"# physical_time = time / {_fmt(theta)}\n")
    if plateau is None:
        out.write("# plateau=none\n")
    else:
        out.write(f"# plateau={_fmt(plateau[0])} onset={_fmt(plateau[1])}\n")


HANDLERS = {
    "simulate": _do_simulate,
    "sensitivity": _do_sensitivity,
    "greenkubo": _do_estimator("greenkubo"),
    "nemd": _do_estimator("nemd"),
    "spectral": _do_spectral,
    "sweep": _do_sweep,
    "tail": _do_tail,
    "merge-compare": _do_merge_compare,
    "pair-contraction": _do_pair_contraction,
    "colloid": _do_colloid,
}


def run(spec, stdout=None, stderr=None):
    """Execute a :class:`RunSpec`; returns the exit status."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    for w in spec.warnings:
        stderr.write(f"warning: {w}\n")
    buf = io.StringIO()
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            HANDLERS[spec.subcommand](spec, buf)
        for w in caught:
            stderr.write(f"warning: {w.message}\n")
    except UsageError as exc:
        stderr.write(f"error: kind=usage message={exc}\n")
        return EXIT_USAGE
    except DivergenceError as exc:
        stderr.write(f"error: kind=divergence n_diverged={exc.n_diverged} message={exc}\n")
        return EXIT_DIVERGENCE
    except (NumericError, FloatingPointError) as exc:
        stderr.write(f"error: kind=numeric message={exc}\n")
        return EXIT_NUMERIC
    text = "\n".join(spec.header_lines()) + "\n" + buf.getvalue()
    if spec.output:
        with open(spec.output, "w", newline="") as fh:
            fh.write(text)
    else:
        stdout.write(text)
    return EXIT_OK


def main(argv=None, stdout=None, stderr=None):
    argv = sys.argv[1:] if argv is None else argv
    stderr = stderr or sys.stderr
    if argv and argv[0] in ("-h", "--help", "help"):
        (stdout or sys.stdout).write(__doc__.lstrip() + "\nsubcommands: "
                                     + ", ".join(SUBCOMMANDS + PRESETS) + "\n")
        return EXIT_OK
    try:
        spec = parse_config(argv)
    except UsageError as exc:
        stderr.write(f"error: kind=usage message={exc}\n")
        return EXIT_USAGE
    return run(spec, stdout, stderr)
