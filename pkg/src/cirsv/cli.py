"""Command-line entry point.

Every subcommand takes the model parameters as flags (defaults are the
reference parameter set) and an optional ``--config`` file, either flat
``key = value`` lines named after the flags or a ``.meta.json`` sidecar
written by a previous run. Flags given on the command line override the
file. Files written with ``-o`` get a ``<file>.meta.json`` sidecar echoing
the full configuration.

Exit codes: 0 success, 1 computation error (JSON message on stderr),
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from ._io import csv_text, emit, json_text
from .calibration import kde, load_csv, mle_dispersion, synth_series
from .errors import CIRSVError
from .expansion import (
    CIRParams, PriceQuery, build_expansion, check_barP2, price, residual_scaling, term_structure,
)
from .mcsim import SimConfig, empirical_density, mc_bond_price, simulate
from .volprocess import VolParams, clustering_drift, moments, stationary_density

COMMANDS = ("density", "moments", "price", "term-structure", "simulate", "calibrate", "residual")
MODEL_KEYS = ("kappa", "theta", "lambda1", "lambda2", "kappa_y", "theta1", "theta2", "v", "k")
DUMP_PATH_CAP = 1000


def _model_flags(p, eps_list=False):
    g = p.add_argument_group("model parameters")
    vol, cir = VolParams(), CIRParams()
    g.add_argument("--kappa", type=float, default=cir.kappa, help="short-rate mean reversion")
    g.add_argument("--theta", type=float, default=cir.theta, help="short-rate long-run level")
    g.add_argument("--lambda1", type=float, default=cir.lambda1, help="market price of rate risk")
    g.add_argument("--lambda2", type=float, default=cir.lambda2, help="market price of dispersion risk")
    g.add_argument("--kappa-y", type=float, default=vol.kappa_y, help="dispersion mean reversion")
    g.add_argument("--theta1", type=float, default=vol.theta1, help="first dispersion level")
    g.add_argument("--theta2", type=float, default=vol.theta2, help="second dispersion level")
    g.add_argument("--v", type=float, default=vol.v, help="volatility of dispersion")
    g.add_argument("--k", type=float, default=vol.k, help="weight of the first level")
    if eps_list:
        g.add_argument("--eps", type=float, action="append", default=None,
                       help="time-scale ratio; repeat for several values")
    else:
        g.add_argument("--eps", type=float, default=vol.epsilon, help="time-scale ratio epsilon")
    p.add_argument("--config", help="flat key=value file or a .meta.json sidecar")
    p.add_argument("-o", "--output", default="-", help="output file (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default=None, help="output format")


def build_parser():
    parser = argparse.ArgumentParser(prog="cirsv", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"cirsv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("density", help="stationary dispersion density (CSV y,g)")
    _model_flags(p)
    p.add_argument("--points", type=int, default=401, help="number of output abscissae")
    p.add_argument("--y-max", type=float, default=None, help="right end of the output grid")

    p = sub.add_parser("moments", help="mean, variance, skewness and integral constants (JSON)")
    _model_flags(p)

    p = sub.add_parser("price", help="expansion bond price")
    _model_flags(p)
    p.add_argument("--r", type=float, default=0.03, help="short rate")
    p.add_argument("--t", type=float, default=0.0, help="calendar time")
    p.add_argument("--maturity", type=float, default=1.0, help="bond maturity T")
    p.add_argument("--y", type=float, default=None, help="current dispersion (default: averaged)")
    p.add_argument("--order", type=int, choices=(0, 1, 2), default=2)

    p = sub.add_parser("term-structure", help="yields of orders 0-2 (CSV tau,R_order0..2)")
    _model_flags(p)
    p.add_argument("--r0", type=float, default=0.03, help="initial short rate")
    p.add_argument("--tau-max", type=float, default=5.0, help="longest maturity")
    p.add_argument("--n-tau", type=int, default=100, help="number of maturities")
    p.add_argument("--coeffs-json", default=None, help="also dump expansion coefficients here")

    p = sub.add_parser("simulate", help="Monte Carlo paths; JSON summary (price, SE, KS)")
    _model_flags(p)
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--dt", type=float, default=None, help="rate step (default eps/20)")
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--measure", choices=("risk-neutral", "physical"), default="risk-neutral")
    p.add_argument("--scheme", choices=("full-truncation-euler", "reflected-euler"),
                   default="full-truncation-euler")
    p.add_argument("--r0", type=float, default=0.03)
    p.add_argument("--y0", default="stationary", help="number or 'stationary'")
    p.add_argument("--antithetic", action="store_true")
    p.add_argument("--fast-step-target", type=float, default=SimConfig.fast_step_target,
                   help="bound on (fast mean-reversion rate) x substep")
    p.add_argument("--dump-paths", default=None,
                   help=f"write stored paths of the first {DUMP_PATH_CAP} paths as CSV")
    p.add_argument("--n-store", type=int, default=2, help="stored time points per path")

    p = sub.add_parser("calibrate", help="windowed dispersion estimates and their KDE")
    _model_flags(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", default=None, help="two-column CSV of rates")
    src.add_argument("--synthetic", action="store_true", help="simulate a series instead")
    p.add_argument("--days", type=int, default=1800, help="length of the synthetic series")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0, help="multiplier for input rates")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--drift", choices=("global", "window", "none"), default="global")
    p.add_argument("--kde-output", default=None, help="KDE CSV (x,density)")

    p = sub.add_parser("residual", help="PDE residual of the expansion versus epsilon")
    _model_flags(p, eps_list=True)
    p.add_argument("--maturity", type=float, default=1.0)
    return parser


def _coerce(action, value):
    """Config-file value to the type the flag would produce."""
    if isinstance(action, argparse._StoreTrueAction):
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(action, argparse._AppendAction):
        items = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
        return [action.type(v) if action.type else v for v in items]
    if value is None:
        return None
    if action.type is not None and not isinstance(value, (list, dict)):
        return action.type(value)
    return value


def _read_config(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        return data.get("config", data)
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        try:
            cfg = _read_config(args.config)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config: {exc}")
        defaults, late = {}, {}
        for key, val in cfg.items():
            if key in ("config", "command", "version"):
                continue
            if key not in actions:
                parser.error(f"unknown config key {key!r} for {args.command}")
            try:
                value = _coerce(actions[key], val)
            except (TypeError, ValueError):
                parser.error(f"bad value for config key {key!r}: {val!r}")
            # repeatable flags would append to a list default instead of replacing it
            (late if isinstance(actions[key], argparse._AppendAction) else defaults)[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        for key, value in late.items():
            if getattr(args, key) is None:
                setattr(args, key, value)
    return args


def _params(args):
    eps = args.eps
    if not isinstance(eps, float):
        # residual takes a list; the model itself only needs a placeholder epsilon
        eps = eps[0] if eps else VolParams.epsilon
    vol = VolParams(args.kappa_y, args.theta1, args.theta2, args.v, args.k, eps)
    maturity = getattr(args, "maturity", 1.0)
    cir = CIRParams(args.kappa, args.theta, args.lambda1, args.lambda2, maturity)
    return vol, cir


def _meta(args, **extra):
    config = {k: v for k, v in vars(args).items() if k not in ("config",)}
    return {"artifact": "cirsv", "version": __version__, "command": args.command,
            "config": config, **extra}


def _density(args):
    vol, _ = _params(args)
    g = stationary_density(clustering_drift(vol), vol)
    if args.format == "json":
        return json_text(g.to_dict()), {}
    hi = args.y_max if args.y_max is not None else float(g.ppf(1 - 1e-9))
    ys = np.linspace(0.0, min(hi, g.y_max), args.points)
    return csv_text(["y", "g"], zip(ys, g.pdf(ys))), {"normalization_constant": g.norm_constant}


def _moments(args):
    vol, _ = _params(args)
    m = moments(stationary_density(clustering_drift(vol), vol))
    out = m.to_dict()
    out["K1"] = 2.0 * args.lambda2 / vol.v * m.D
    if args.format == "csv":
        return csv_text(["name", "value"], sorted(out.items())), {}
    return json_text(out), {}


def _price(args):
    vol, cir = _params(args)
    coeffs = build_expansion(vol, cir)
    res = price(PriceQuery(args.t, args.r, vol.epsilon, args.order, args.y), coeffs)
    out = {"price": res.price, "in_range": res.in_range, "order": args.order,
           "epsilon": vol.epsilon, "tau": args.maturity - args.t}
    if args.format == "csv":
        return csv_text(list(out), [list(out.values())]), {}
    return json_text(out), {}


def _term_structure(args):
    vol, cir = _params(args)
    cir = CIRParams(cir.kappa, cir.theta, cir.lambda1, cir.lambda2, args.tau_max)
    coeffs = build_expansion(vol, cir)
    taus = np.linspace(args.tau_max / args.n_tau, args.tau_max, args.n_tau)
    curves = [term_structure(coeffs, args.r0, taus, vol.epsilon, o) for o in (0, 1, 2)]
    extra = {"P2bar_residual": check_barP2(coeffs), "moments": coeffs.moments.to_dict(), "K1": coeffs.K1}
    if args.coeffs_json:
        emit(json_text(coeffs.to_dict()), args.coeffs_json, _meta(args))
    if args.format == "json":
        return json_text({"tau": taus, **{f"R_order{o}": c.rate for o, c in enumerate(curves)}}), extra
    rows = zip(taus, *(c.rate for c in curves))
    return csv_text(["tau", "R_order0", "R_order1", "R_order2"], rows), extra


def _simulate(args):
    vol, cir = _params(args)
    cfg = SimConfig(n_paths=args.paths, horizon=args.horizon, dt=args.dt, seed=args.seed,
                    measure=args.measure, scheme=args.scheme, antithetic=args.antithetic,
                    n_store=args.n_store, fast_step_target=args.fast_step_target)
    y0 = args.y0 if args.y0 == "stationary" else float(args.y0)
    g = stationary_density(clustering_drift(vol), vol) if vol.v > 0 else None
    ens = simulate(vol, cir, cfg, args.r0, y0, density=g)
    out = {"n_paths": ens.n_paths, "n_sub": ens.n_sub, "horizon": args.horizon,
           "wiener_correlation": ens.wiener_correlation, "measure": args.measure}
    if args.measure == "risk-neutral":
        p = mc_bond_price(ens)
        out.update(price=p.price, std_error=p.std_error)
    elif g is not None and ens.n_paths >= 100:
        ed = empirical_density(ens.y_paths[-1], g)
        out.update(ks=ed.ks, ks_pvalue=ed.ks_pvalue)
    if args.dump_paths:
        m = min(ens.n_paths, DUMP_PATH_CAP)
        rows = ((j, t, ens.r_paths[i, j], ens.y_paths[i, j])
                for j in range(m) for i, t in enumerate(ens.times))
        emit(csv_text(["path", "t", "r", "y"], rows), args.dump_paths, _meta(args))
    if args.format == "csv":
        return csv_text(list(out), [list(out.values())]), {}
    return json_text(out), {}


def _calibrate(args):
    if args.input:
        series = load_csv(args.input, scale=args.scale)
    else:
        vol, cir = _params(args)
        series = synth_series(vol, cir, args.days, seed=args.seed)
    est = mle_dispersion(series, args.window, args.drift)
    extra = {"n_windows": len(est), "dropped_windows": list(est.dropped)}
    if len(est) >= 10:
        curve = kde(est)
        extra.update(bandwidth=curve.bandwidth, kde_peaks=curve.peaks, kde_mass=curve.mass())
        if args.kde_output:
            emit(csv_text(["x", "density"], zip(curve.x, curve.density)), args.kde_output, _meta(args, **extra))
    if args.format == "json":
        return json_text({"window_start": est.window_starts, "sigma2_hat": est.sigma2_hats}), extra
    return csv_text(["window_start", "sigma2_hat"], zip(est.window_starts, est.sigma2_hats)), extra


def _residual(args):
    eps_values = args.eps or [1e-3, 4e-3, 1.6e-2]
    vol, cir = _params(args)
    stats, slope = residual_scaling(build_expansion(vol, cir), eps_values)
    rows = [(e, s.sup, s.rms) for e, s in zip(eps_values, stats)]
    extra = {} if len(rows) < 2 else {"slope": slope}
    if args.format == "json":
        return json_text({"eps": eps_values, "sup": [r[1] for r in rows],
                          "rms": [r[2] for r in rows], **extra}), extra
    return csv_text(["eps", "sup_residual", "rms_residual"], rows), extra


HANDLERS = {
    "density": _density, "moments": _moments, "price": _price,
    "term-structure": _term_structure, "simulate": _simulate,
    "calibrate": _calibrate, "residual": _residual,
}
DEFAULT_FORMAT = {"moments": "json", "price": "json", "simulate": "json"}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    if args.format is None:
        args.format = DEFAULT_FORMAT.get(args.command, "csv")
    try:
        text, extra = HANDLERS[args.command](args)
        emit(text, args.output, _meta(args, **extra))
    except CIRSVError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "type": type(exc).__name__,
                                     "message": str(exc)}) + "\n")
        return 1
    except (OSError, ArithmeticError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": "computation-error", "type": type(exc).__name__,
                                     "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
