"""Experiment runner.

    python -m kslab run --config exp.ini [--seed S] [--paths P] [--workers W] [--out-dir DIR]

The config is INI (or JSON with the same nesting).  Sections:

``[experiment]``  kind (simulate | lr-control | source-term | fixed-point |
                  certificate | probe), seed, paths, n_modes
``[model]``       b1, b2, b3 (noise), a (nonlinearity switch 0/1), a1..a4
``[weights]``     M, P, Q, zeta, T (source-term weights; also the horizon
                  for source-term, fixed-point and certificate)
``[<kind>]``      parameters of the selected experiment, see ``SCHEMA``

Lists are comma separated.  Unknown keys are rejected.  Outputs in
``--out-dir``: ``report.json`` (resolved config, calibrated constant, results)
and ``series.csv`` (header row, 12 significant digits).  Exit 0 on success,
2 on a validation error (field named on stderr as JSON), 1 on a runtime error.
"""

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("kslab")

KINDS = ("simulate", "lr-control", "source-term", "fixed-point", "certificate", "probe")
PROBES = ("spectral", "band", "clamped", "duality")


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


# ---------------------------------------------------------------------------
# schema: key -> (parser, default, check or None, description of the check)


def _floats(s):
    if isinstance(s, (list, tuple)):
        return [float(v) for v in s]
    return [float(v) for v in str(s).replace(";", ",").split(",") if v.strip()]


def _ints(s):
    return [int(v) for v in _floats(s)]


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _interval(s):
    v = _floats(s)
    if len(v) != 2:
        raise ValueError("expected two numbers a, b")
    return v


pos = (lambda v: v > 0, "must be positive")
nonneg = (lambda v: v >= 0, "must be nonnegative")
unit_open = (lambda v: 0 < v < 1, "must lie in (0, 1)")
sub_interval = (lambda v: 0 <= v[0] < v[1] <= 1, "must satisfy 0 <= a < b <= 1")
all_pos = (lambda v: len(v) > 0 and all(x > 0 for x in v), "must be a nonempty list of positive numbers")

SCHEMA = {
    "experiment": {
        "kind": (str, None, (lambda v: v in KINDS, f"must be one of {', '.join(KINDS)}")),
        "seed": (int, 0, nonneg),
        "paths": (int, 20, pos),
        "n_modes": (int, 8, pos),
    },
    "model": {
        "b1": (float, 0.1, None),
        "b2": (float, 0.05, None),
        "b3": (float, 0.1, None),
        "a": (int, 0, (lambda v: v in (0, 1), "must be 0 or 1")),
        "a1": (float, 0.0, None),
        "a2": (float, 0.0, None),
        "a3": (float, 1.0, None),
        "a4": (float, 0.0, None),
    },
    "weights": {
        "M": (float, 1.0, pos),
        "P": (float, 4.0, None),
        "Q": (float, 1.2, None),
        "zeta": (float, 3.8, None),
        "T": (float, 0.5, unit_open),
    },
    "simulate": {
        "T": (float, 0.1, pos),
        "n_steps": (int, 100, pos),
        "y0": (_floats, [], None),
        "z0": (_floats, [], None),
    },
    "lr-control": {
        "T": (float, 1.0, pos),
        "beta": (float, 1.0, pos),
        "epsilon0": (float, 1e-6, pos),
        "n_sub": (int, 16, pos),
        "d0": (_interval, [0.3, 0.7], sub_interval),
        "adapt": (_bool, True, None),
        "y0": (_floats, None, None),
        "z0": (_floats, None, None),
    },
    "source-term": {
        "mode": (int, 1, pos),
        "scale": (float, 1.0, None),
        "steps_per_block": (int, 400, pos),
        "tail_steps": (int, 200, pos),
        "epsilon0": (float, 1e-14, pos),
        "y0": (_floats, None, None),
        "z0": (_floats, None, None),
    },
    "fixed-point": {
        "C_lr": (float, 1.87, nonneg),
        "R_factor": (float, 0.5, pos),
        "data_scale": (float, None, pos),
        "steps_per_block": (int, 200, pos),
        "tail_steps": (int, 100, pos),
        "max_iters": (int, 20, pos),
        "tol": (float, 1e-8, pos),
    },
    "certificate": {
        "C_lr": (float, 1.87, nonneg),
        "epsilon": (float, 0.1, unit_open),
        "steps_per_block": (int, 200, pos),
        "tail_steps": (int, 100, pos),
        "chunk": (int, 250, pos),
    },
    "probe": {
        "probe": (str, "spectral", (lambda v: v in PROBES, f"must be one of {', '.join(PROBES)}")),
        "d0": (_interval, [0.3, 0.7], sub_interval),
        "band_modes": (_ints, [1, 2, 4, 8, 16, 32], all_pos),
        "samples": (int, 0, nonneg),
        "band_k": (int, 4, pos),
        "tau": (_floats, [0.5, 0.25, 0.125], all_pos),
        "n_points": (_ints, [32, 64], (lambda v: len(v) > 0 and all(x >= 5 for x in v), "entries must be >= 5")),
        "T": (float, 0.1, pos),
        "dt": (float, None, pos),
        "d": (_floats, [0.0, 0.0, 0.0], (lambda v: len(v) == 3, "must list d1, d2, d3")),
        "n_data": (int, 4, pos),
        "alpha": (_floats, [1e-8, 1e-10, 1e-12], all_pos),
    },
}

SECTIONS_FOR = {
    "simulate": ("experiment", "model", "simulate"),
    "lr-control": ("experiment", "model", "lr-control"),
    "source-term": ("experiment", "model", "weights", "source-term"),
    "fixed-point": ("experiment", "model", "weights", "fixed-point"),
    "certificate": ("experiment", "model", "weights", "certificate"),
    "probe": ("experiment", "model", "probe"),
}


def read_config(path):
    """Raw nested dict from an INI or JSON file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e.strerror}")
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON: {e}")
        if not isinstance(raw, dict) or not all(isinstance(v, dict) for v in raw.values()):
            raise ConfigError("config", "JSON must map section names to objects")
        return raw
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep M, P, Q, T as written
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError("config", f"invalid INI: {e}")
    return {s: dict(cp[s]) for s in cp.sections()}


def resolve(raw, overrides=None):
    """Typed config with defaults; every constraint checked before any run."""
    raw = {k: dict(v) for k, v in raw.items()}
    for key, val in (overrides or {}).items():
        if val is not None:
            raw.setdefault("experiment", {})[key] = val
    kind = raw.get("experiment", {}).get("kind")
    if kind is None:
        raise ConfigError("experiment.kind", "missing")
    if kind not in KINDS:
        raise ConfigError("experiment.kind", f"must be one of {', '.join(KINDS)}, got {kind!r}")
    wanted = SECTIONS_FOR[kind]
    for sec in raw:
        if sec not in wanted:
            raise ConfigError(sec, f"section not used by kind {kind}")
    cfg = {}
    for sec in wanted:
        given = raw.get(sec, {})
        schema = SCHEMA[sec]
        for key in given:
            if key not in schema:
                raise ConfigError(f"{sec}.{key}", "unknown key")
        out = {}
        for key, (parse, default, check) in schema.items():
            name = f"{sec}.{key}"
            if key in given and given[key] is not None:
                try:
                    val = parse(given[key])
                except (TypeError, ValueError) as e:
                    raise ConfigError(name, f"cannot parse {given[key]!r}: {e}")
            else:
                if default is None and key == "kind":
                    raise ConfigError(name, "missing")
                val = default
            if check is not None and val is not None and not check[0](val):
                raise ConfigError(name, f"{check[1]}, got {val!r}")
            if isinstance(val, float) and not math.isfinite(val):
                raise ConfigError(name, "must be finite")
            out[key] = val
        cfg[sec] = out
    _cross_checks(cfg, kind)
    return cfg


def _cross_checks(cfg, kind):
    from .weights import SourceWeightParams, WeightParameterError

    n = cfg["experiment"]["n_modes"]
    for sec in (kind,):
        for comp in ("y0", "z0"):
            v = cfg.get(sec, {}).get(comp)
            if v is not None and len(v) > n:
                raise ConfigError(f"{sec}.{comp}", f"has {len(v)} entries but n_modes = {n}")
    if "weights" in cfg:
        w = cfg["weights"]
        try:
            SourceWeightParams(**w)
        except WeightParameterError as e:
            msg = str(e)
            field = next((k for k in ("M", "T", "Q", "P", "zeta") if msg.startswith(k + " ")), "M")
            raise ConfigError(f"weights.{field}", msg)
    if kind == "source-term" and cfg["source-term"]["mode"] > n:
        raise ConfigError("source-term.mode", f"exceeds n_modes = {n}")
    if kind == "probe":
        pr = cfg["probe"]
        if pr["dt"] is not None and pr["dt"] > pr["T"]:
            raise ConfigError("probe.dt", "exceeds probe.T")


# ---------------------------------------------------------------------------
# experiments: each returns (result dict, C_hat or None, header, rows)


def _coeffs(cfg):
    from .sde import SystemCoefficients

    return SystemCoefficients(**cfg["model"])


def _weights(cfg):
    from .weights import SourceWeightParams

    return SourceWeightParams(**cfg["weights"])


def _data(n, y, z, default):
    x = np.zeros(2 * n)
    if y is None and z is None:
        return default(n)
    y = y or []
    z = z or []
    x[: len(y)] = y
    x[n : n + len(z)] = z
    return x


def _decaying(n):
    c = 1.0 / np.arange(1, n + 1) ** 2
    return np.concatenate([c, c])


def run_simulate(cfg, workers):
    from .basis import SpectralBasis
    from .sde import brownian_batch, simulate, uniform_times

    e, s = cfg["experiment"], cfg["simulate"]
    n = e["n_modes"]
    basis = SpectralBasis(n)
    x0 = _data(n, s["y0"], s["z0"], lambda n: np.zeros(2 * n))
    paths = brownian_batch(uniform_times(s["T"], s["n_steps"]), e["paths"], e["seed"])
    rec = simulate(basis, _coeffs(cfg), x0, paths)
    en = rec.mean_energy()
    y1 = rec.states[:, :, 0].mean(axis=0)
    z1 = rec.states[:, :, n].mean(axis=0)
    rows = [[t, a, b, c] for t, a, b, c in zip(rec.times, en, y1, z1)]
    result = {"final_mean_energy": float(en[-1]), "initial_energy": float(en[0])}
    return result, None, ["t", "mean_energy", "mean_y1", "mean_z1"], rows


def run_lr(cfg, workers):
    from .control import lebeau_robbiano_synthesize

    e, s = cfg["experiment"], cfg["lr-control"]
    n = e["n_modes"]
    x0 = _data(n, s["y0"], s["z0"], _decaying)
    rep = lebeau_robbiano_synthesize(
        x0, s["T"], beta=s["beta"], epsilon0=s["epsilon0"], n_paths=e["paths"], seed=e["seed"],
        coeffs=_coeffs(cfg), n_modes=n, n_sub=s["n_sub"], d0=tuple(s["d0"]), adapt=s["adapt"],
    )
    rows = []
    for iv, sch in zip(rep.intervals, rep.schedule.intervals):
        rows.append([iv.j, sch.start, sch.end, iv.band_size, iv.start_norm, iv.end_norm, iv.cost])
    head = ["j", "start", "end", "band_size", "start_norm", "end_norm", "cost"]
    return rep.to_dict(), None, head, rows


def run_source(cfg, workers):
    from .basis import SpectralBasis
    from .sourceterm import direct_replay, rho_scaled_mode_source, run_source_term

    e, s = cfg["experiment"], cfg["source-term"]
    n = e["n_modes"]
    p = _weights(cfg)
    basis = SpectralBasis(n)
    x0 = _data(n, s["y0"], s["z0"], _decaying)
    F = rho_scaled_mode_source(p, s["mode"], s["scale"])
    res = run_source_term(basis, _coeffs(cfg), x0, p, e["paths"], e["seed"], F=F,
                          steps_per_block=s["steps_per_block"], tail_steps=s["tail_steps"], epsilon0=s["epsilon0"])
    dev, _ = direct_replay(basis, _coeffs(cfg), res)
    out = res.to_dict()
    out["replay_deviation"] = dev
    en = np.mean(np.sum(res.states**2, axis=2), axis=0)
    rows = [[t, v] for t, v in zip(res.times, en)]
    return out, None, ["t", "mean_energy"], rows


def run_fixed_point(cfg, workers):
    from .basis import SpectralBasis
    from .nonlinear import calibrate_theorem_constant, data_norm_sq, fixed_point_solve, sample_small_data
    from .sde import brownian_batch
    from .sourceterm import block_times, truncation_index

    e, s = cfg["experiment"], cfg["fixed-point"]
    basis = SpectralBasis(e["n_modes"])
    coeffs = _coeffs(cfg)
    p = _weights(cfg)
    tc = calibrate_theorem_constant(basis, coeffs, p, s["C_lr"])
    C = tc.C_hat
    R = s["R_factor"] * math.exp(-C / p.T)
    scale = s["data_scale"] if s["data_scale"] is not None else R * math.exp(-C / p.T)
    K = truncation_index(p)
    times, starts = block_times(p, K, s["steps_per_block"], s["tail_steps"])
    paths = brownian_batch(times, e["paths"], e["seed"])
    x0 = sample_small_data(basis, e["paths"], 1.0, e["seed"])
    x0 = x0 / np.sqrt(data_norm_sq(basis, x0))[:, None] * scale
    fp = fixed_point_solve(basis, coeffs, x0, p, R, paths, starts, K, C, max_iters=s["max_iters"], tol=s["tol"])
    out = fp.to_dict()
    out["theorem_constant"] = tc.to_dict()
    out["XT_max_over_R"] = float(np.max(fp.XT) / R)
    rows = [[i + 1, d, fp.ratios[i - 1] if i > 0 else float("nan")] for i, d in enumerate(fp.distances)]
    return out, C, ["iteration", "distance", "ratio"], rows


def run_certificate(cfg, workers):
    from .basis import SpectralBasis
    from .nonlinear import calibrate_theorem_constant, statistical_certificate

    e, s = cfg["experiment"], cfg["certificate"]
    basis = SpectralBasis(e["n_modes"])
    coeffs = _coeffs(cfg)
    p = _weights(cfg)
    tc = calibrate_theorem_constant(basis, coeffs, p, s["C_lr"])
    cert = statistical_certificate(
        basis, coeffs, p, tc.C_hat, epsilon=s["epsilon"], n_paths=e["paths"], seed=e["seed"],
        steps_per_block=s["steps_per_block"], tail_steps=s["tail_steps"], chunk=s["chunk"], workers=workers,
    )
    out = cert.to_dict()
    out["theorem_constant"] = tc.to_dict()
    head = ["delta", "epsilon", "R", "exceedance_count", "exceedance_fraction", "ci_half_width", "markov_bound"]
    return out, tc.C_hat, head, [[out[h] for h in head]]


def run_probe(cfg, workers):
    from . import obsprobe as ob
    from .basis import SpectralBasis

    e, s = cfg["experiment"], cfg["probe"]
    d0 = tuple(s["d0"])
    kind = s["probe"]
    if kind == "spectral":
        mu = np.array([(k * math.pi) ** 4 for k in s["band_modes"]])
        rep = ob.spectral_inequality_probe(mu, d0, samples=s["samples"], seed=e["seed"])
        rows = [[r, q, 0.0] for r, q in zip(rep.r, rep.ratios)]
        out = {"C_slope": rep.C_slope, "C_intercept": rep.C_intercept, "rows": rep.to_rows()}
        return out, None, ["r", "estimate", "ci"], rows
    if kind == "band":
        k = s["band_k"]
        r = (k * math.pi) ** 4
        basis = SpectralBasis(k)
        coeffs = _coeffs(cfg)
        vals = [ob.band_gramians(basis, r, tau, coeffs, d0).constant() for tau in s["tau"]]
        rows = [[tau, v, 0.0] for tau, v in zip(s["tau"], vals)]
        return {"band_size": k, "constants": vals}, None, ["tau", "estimate", "ci"], rows
    if kind == "clamped":
        rows, dump = [], []
        for npts in s["n_points"]:
            pr = ob.clamped_observability_probe(npts, d=tuple(s["d"]), T=s["T"], dt=s["dt"], d0=d0,
                                                n_paths=e["paths"], n_data=s["n_data"], seed=e["seed"])
            rows.append([npts, pr.mc_estimate, pr.mc_ci, pr.exact_constant])
            dump.append(pr.to_dict())
        return {"probes": dump}, None, ["n_points", "estimate", "ci", "exact_constant"], rows
    # duality
    npts = s["n_points"][0]
    disc = ob.ClampedDiscretization(npts)
    yT = np.sin(np.pi * disc.x) ** 2
    zT = np.sin(np.pi * disc.x)
    rows, dump = [], []
    for a in s["alpha"]:
        dc = ob.duality_control_backward(yT, zT, npts, T=s["T"], dt=s["dt"], d0=d0, alpha=a, seed=e["seed"])
        rows.append([a, dc.x0_residual, dc.duality_residual, dc.residual_bound])
        dump.append(dc.to_dict())
    return {"duality": dump}, None, ["alpha", "x0_residual", "duality_residual", "residual_bound"], rows


RUNNERS = {
    "simulate": run_simulate,
    "lr-control": run_lr,
    "source-term": run_source,
    "fixed-point": run_fixed_point,
    "certificate": run_certificate,
    "probe": run_probe,
}


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        v = float(o)
        return v if math.isfinite(v) else str(v)
    if isinstance(o, (int, str)) or o is None:
        return o
    return repr(o)


def run(config_path, seed=None, paths=None, workers=1, out_dir="."):
    """Run one experiment; returns the exit status."""
    try:
        if workers is not None and workers < 1:
            raise ConfigError("workers", "must be at least 1")
        cfg = resolve(read_config(config_path), {"seed": seed, "paths": paths})
        _coeffs(cfg)
    except ConfigError as e:
        print(json.dumps({"error": "validation", "field": e.field, "message": e.message}), file=sys.stderr)
        return 2
    except ValueError as e:
        print(json.dumps({"error": "validation", "field": "model", "message": str(e)}), file=sys.stderr)
        return 2
    kind = cfg["experiment"]["kind"]
    try:
        result, C_hat, header, rows = RUNNERS[kind](cfg, workers or 1)
    except Exception as e:  # module errors surface as exit 1
        print(json.dumps({"error": "runtime", "type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"config": cfg, "kind": kind, "C_hat": C_hat, "result": result}
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    write_csv(out / "series.csv", header, rows)
    log.info("wrote %s and %s", out / "report.json", out / "series.csv")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="kslab", description="Stochastic KS-heat control experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--paths", type=int)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out-dir", default=".")
    r.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(args.config, args.seed, args.paths, args.workers, args.out_dir)


if __name__ == "__main__":
    sys.exit(main())
