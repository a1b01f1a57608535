"""Command-line pipeline: ingest -> fit -> simulate / diagnose / impute / validate.

Every command reads and writes plain files. JSON outputs carry
``format_version``, ``config_hash`` and ``seed``; CSV outputs start with a
``# config_hash=... seed=...`` comment line. Nothing time- or host-dependent
is written, so fixed seeds give byte-identical files.

Exit codes: 0 ok, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import RngStream, TimeRescaling
from .diagnostics import DEFAULT_S, data_vs_simulated_acf, diagnose, residual_acf
from .errors import HistSdeError, InputError, InsufficientDataError, NumericalError
from .impute import impute_panel, imputation_csv
from .lbn import LbnEnsemble, TrainConfig, fit_lbn, km_targets
from .likelihood import TransitionMethod
from .npsde import NpsdeConfig, NpsdeModel, fit_npsde
from .simulate import simulate_ensemble
from .statespace import LatentPanel, ingest_csv, pca_fit, pca_project

FORMAT_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3
DEFAULT_NSUB = 10
METHODS = {"one_step": "one_step_gaussian", "composed": "composed_gaussian", "kde": "simulated_kde"}
ESTIMATORS = {"lbn": LbnEnsemble, "npsde": NpsdeModel}

log = logging.getLogger("histsde")


# --- argument types -----------------------------------------------------------


def _ranged(kind, lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {kind.__name__}, got {text!r}") from None
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise argparse.ArgumentTypeError(f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and v > hi:
            raise argparse.ArgumentTypeError(f"must be <= {hi}, got {v}")
        return v

    return parse


pos_int = _ranged(int, 1)
pos_float = _ranged(float, 0.0, lo_open=True)
seed_type = _ranged(int, 0, 2**64 - 1)


def _csv_list(kind=str):
    def parse(text):
        try:
            return [kind(s.strip()) for s in text.split(",") if s.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse {text!r} as a comma list") from None

    return parse


# --- file helpers ---------------------------------------------------------------


def _file_digest(path):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {p}")
    return hashlib.sha256(p.read_bytes()).hexdigest()


def config_hash(command, params, inputs):
    """Hash of the command, its result-affecting flags and input file contents.

    Output location and worker count are left out, since they do not change
    results.
    """
    blob = {"command": command, "params": params, "inputs": {k: _file_digest(v) for k, v in sorted(inputs.items())}}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def _read_json(path, what):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"no such {what} file: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from None
    v = d.get("format_version")
    if v != FORMAT_VERSION:
        raise InputError(f"{path}: format_version {v!r} is not supported (expected {FORMAT_VERSION})")
    return d


def _write_json(out, name, payload, chash, seed):
    body = {"format_version": FORMAT_VERSION, "config_hash": chash, "seed": seed, **payload}
    path = out / name
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_text(out, name, text):
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


def _header(chash, seed):
    return f"config_hash={chash} seed={seed}"


def _table_csv(header, rows, chash, seed):
    buf = io.StringIO()
    buf.write(f"# {_header(chash, seed)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def load_panel(path, alpha=None, n_sub=None):
    d = _read_json(path, "panel")
    panel = LatentPanel.from_dict(d["panel"])
    if alpha is not None or n_sub is not None:
        r = panel.rescaling
        panel.rescaling = TimeRescaling(alpha if alpha is not None else r.alpha, n_sub if n_sub is not None else r.n_sub)
    return panel


def load_model(path):
    d = _read_json(path, "model")
    kind = d.get("estimator")
    if kind not in ESTIMATORS:
        raise InputError(f"{path}: unknown estimator {kind!r}")
    return ESTIMATORS[kind].from_dict(d["model"]), d


def _method(args, panel):
    n_sub = args.nsub or panel.rescaling.n_sub
    return TransitionMethod(METHODS[args.method], n_sub=n_sub, S=args.kde_samples, seed=args.seed)


# --- commands ---------------------------------------------------------------------


def cmd_ingest(args):
    panel = ingest_csv(args.input, args.unit_col, args.time_col, args.columns)
    n_pca = panel.p - len(args.passthrough)
    k = args.k if args.k is not None else n_pca
    pca = pca_fit(panel, k, args.log_columns, args.anchors, args.passthrough)
    latent = pca_project(pca, panel, args.nominal_interval)
    latent.rescaling = TimeRescaling(args.alpha if args.alpha is not None else 1.0, args.nsub or DEFAULT_NSUB)
    params = {
        "unit_col": args.unit_col, "time_col": args.time_col, "columns": args.columns, "k": k,
        "log_columns": args.log_columns, "passthrough": args.passthrough, "anchors": args.anchors,
        "nominal_interval": args.nominal_interval, "alpha": latent.rescaling.alpha, "n_sub": latent.rescaling.n_sub,
    }
    chash = config_hash("ingest", params, {"input": args.input})
    report = {
        "columns": list(pca.columns),
        "axis_names": pca.axis_names,
        "loadings": pca.components.tolist(),
        "explained_variance_ratio": pca.explained_variance_ratio.tolist(),
        "eigenvalues": pca.eigenvalues.tolist(),
        "n_fit_rows": pca.n_fit_rows,
        "n_units": len(latent.units),
        "n_observations": latent.n_observations(),
        "gaps": [{"unit_id": g.unit_id, "t_start": g.t_start, "t_end": g.t_end, "missing_times": list(g.missing_times)}
                 for g in latent.gaps],
    }
    return [
        _write_json(args.out, "latent.json", {"panel": latent.to_dict(), "pca": pca.to_dict(), "config": params}, chash, args.seed),
        _write_json(args.out, "pca_report.json", report, chash, args.seed),
    ]


def _lbn_config(args):
    return TrainConfig(
        hidden=tuple(args.hidden), lr=args.lr if args.lr is not None else 1e-3, batch_size=args.batch_size,
        max_epochs=args.max_epochs, patience=args.patience, swa_epochs=args.swa_epochs, k=args.folds, n_ens=args.n_ens,
    )


def _npsde_config(args):
    return NpsdeConfig(
        M=args.inducing, S=args.mc_samples, iterations=args.iterations, lr=args.lr if args.lr is not None else 0.05,
        fit_R=args.fit_R, R_init=args.R_init,
    )


def cmd_fit(args):
    panel = load_panel(args.input, args.alpha, args.nsub)
    if args.estimator == "lbn":
        cfg = _lbn_config(args)
        model = fit_lbn(km_targets(panel), cfg, seed=args.seed)
        rows = [
            (f["fold"], net, e, v)
            for f in model.metadata["folds"]
            for net in ("drift", "diffusion")
            for e, v in enumerate(f[net]["val_history"])
        ]
        log_header = ["fold", "net", "epoch", "val_loss"]
    else:
        cfg = _npsde_config(args)
        model = fit_npsde(panel, cfg, seed=args.seed)
        rows = list(enumerate(model.metadata["objective_trace"]))
        log_header = ["iteration", "objective"]
    r = panel.rescaling
    params = {"estimator": args.estimator, "config": cfg.to_dict(), "alpha": r.alpha, "n_sub": r.n_sub}
    chash = config_hash("fit", params, {"input": args.input})
    payload = {
        "estimator": args.estimator,
        "model": model.to_dict(),
        "rescaling": {"alpha": r.alpha, "n_sub": r.n_sub},
        "axis_names": panel.axis_names,
        "config": params,
    }
    return [
        _write_json(args.out, "model.json", payload, chash, args.seed),
        _write_text(args.out, "train_log.csv", _table_csv(log_header, rows, chash, args.seed)),
    ]


def cmd_simulate(args):
    model, md = load_model(args.model)
    r = md.get("rescaling", {})
    alpha = args.alpha if args.alpha is not None else r.get("alpha", 1.0)
    n_sub = args.nsub or r.get("n_sub", 1)
    x0 = np.asarray(args.x0, dtype=float)
    if x0.size != model.dim:
        raise InputError(f"--x0 has {x0.size} values; the model state has {model.dim}")
    t_obs = np.arange(0.0, args.horizon + 1e-9 * args.horizon, args.interval)
    if len(t_obs) < 2:
        raise InputError("--horizon must cover at least one --interval")
    ens = simulate_ensemble(model, x0, alpha * t_obs, args.paths, RngStream(args.seed), n_sub)
    params = {"x0": x0.tolist(), "horizon": args.horizon, "interval": args.interval, "paths": args.paths,
              "alpha": alpha, "n_sub": n_sub}
    chash = config_hash("simulate", params, {"model": args.model})
    names = md.get("axis_names") or [f"x{i + 1}" for i in range(model.dim)]
    rows = [(p, t) + tuple(ens.paths[p, j]) for p in range(ens.S) for j, t in enumerate(t_obs)]
    return [_write_text(args.out, "simulation.csv", _table_csv(["path", "t"] + list(names), rows, chash, args.seed))]


def cmd_diagnose(args):
    model, _ = load_model(args.model)
    panel = load_panel(args.input, args.alpha, args.nsub)
    if not any(True for _ in panel.transitions()):
        raise InsufficientDataError("panel has no gap-free transitions to diagnose")
    method = _method(args, panel)
    report = diagnose(model, panel, method, args.S, args.seed)
    params = {"method": method.describe(), "S": args.S, "alpha": panel.rescaling.alpha, "n_sub": panel.rescaling.n_sub}
    chash = config_hash("diagnose", params, {"model": args.model, "input": args.input})
    return [
        _write_text(args.out, "diagnostics.csv", report.to_csv(_header(chash, args.seed))),
        _write_json(args.out, "diagnostics_summary.json", report.summary(), chash, args.seed),
    ]


def cmd_impute(args):
    model, _ = load_model(args.model)
    panel = load_panel(args.input, args.alpha, args.nsub)
    method = _method(args, panel)
    rows = impute_panel(model, panel, args.S, args.seed, method, method.n_sub)
    params = {"method": method.describe(), "S": args.S, "alpha": panel.rescaling.alpha, "n_sub": method.n_sub}
    chash = config_hash("impute", params, {"model": args.model, "input": args.input})
    names = panel.axis_names or [f"x{i + 1}" for i in range(panel.dim)]
    return [_write_text(args.out, "imputation.csv", imputation_csv(rows, names, _header(chash, args.seed)))]


def _acf_rows(kind, res, names):
    return [(kind, names[i], int(k), float(res.acf[i, k]), float(res.band))
            for i in range(res.acf.shape[0]) for k in res.lags]


def cmd_validate(args):
    model, _ = load_model(args.model)
    panel = load_panel(args.input, args.alpha, args.nsub)
    res = residual_acf(model, panel, args.max_lag)
    data, sim = data_vs_simulated_acf(model, panel, args.max_lag, args.nsub, args.seed)
    params = {"max_lag": args.max_lag, "alpha": panel.rescaling.alpha, "n_sub": args.nsub or panel.rescaling.n_sub}
    chash = config_hash("validate", params, {"model": args.model, "input": args.input})
    names = panel.axis_names or [f"x{i + 1}" for i in range(panel.dim)]
    rows = _acf_rows("data", data, names) + _acf_rows("simulated", sim, names) + _acf_rows("residual", res, names)
    summary = {
        "markovian": bool(res.markovian),
        "inside_fraction": res.inside_fraction,
        "band": res.band,
        "n_residuals": res.n,
        "max_lag": args.max_lag,
        "rule": "at least 93% of (dimension, lag 1..max_lag) residual autocorrelations inside +-1.96/sqrt(n)",
    }
    log.info("Markovianity verdict: %s (%.1f%% inside band)", "pass" if res.markovian else "fail", 100 * res.inside_fraction)
    return [
        _write_json(args.out, "validation.json", summary, chash, args.seed),
        _write_text(args.out, "acf.csv", _table_csv(["kind", "axis", "lag", "acf", "band"], rows, chash, args.seed)),
    ]


# --- parser -----------------------------------------------------------------------


def _shared(p):
    p.add_argument("--seed", type=seed_type, default=0, help="master seed (unsigned 64-bit)")
    p.add_argument("--alpha", type=pos_float, default=None, help="simulation time per observed time unit")
    p.add_argument("--nsub", type=pos_int, default=None, help="Euler-Maruyama sub-steps per observation interval")
    p.add_argument("--workers", type=pos_int, default=1, help="maximum worker count")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")


def _method_flags(p, default="composed"):
    p.add_argument("--method", choices=sorted(METHODS), default=default, help="transition density approximation")
    p.add_argument("--kde-samples", type=_ranged(int, 100), default=1000, help="endpoint samples for the kde density")


def build_parser():
    parser = argparse.ArgumentParser(prog="histsde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="CSV panel -> latent panel JSON and PCA report")
    _shared(p)
    p.add_argument("--input", required=True, help="long-format panel CSV")
    p.add_argument("--unit-col", default="unit")
    p.add_argument("--time-col", default="time")
    p.add_argument("--columns", type=_csv_list(), default=None, help="value columns (default: all others)")
    p.add_argument("--k", type=_ranged(int, 0), default=None, help="principal components kept (default: all)")
    p.add_argument("--log-columns", type=_csv_list(), default=[], help="columns log10-transformed first")
    p.add_argument("--passthrough", type=_csv_list(), default=[], help="columns appended without PCA")
    p.add_argument("--anchors", type=_csv_list(), default=None, help="sign-anchor column per component")
    p.add_argument("--nominal-interval", type=pos_float, default=None, help="expected observation spacing")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="latent panel -> model JSON and training log")
    _shared(p)
    p.add_argument("--input", required=True, help="latent panel JSON from ingest")
    p.add_argument("--estimator", choices=sorted(ESTIMATORS), required=True)
    p.add_argument("--lr", type=pos_float, default=None, help="Adam step size (lbn 1e-3, npsde 0.05)")
    g = p.add_argument_group("lbn")
    g.add_argument("--hidden", type=_csv_list(int), default=[64, 64, 64], help="hidden widths")
    g.add_argument("--batch-size", type=pos_int, default=256)
    g.add_argument("--max-epochs", type=pos_int, default=300)
    g.add_argument("--patience", type=pos_int, default=20)
    g.add_argument("--swa-epochs", type=pos_int, default=20)
    g.add_argument("--folds", type=pos_int, default=5)
    g.add_argument("--n-ens", type=pos_int, default=30)
    g = p.add_argument_group("npsde")
    g.add_argument("--inducing", type=pos_int, default=None, help="inducing points (default 5^d, max 64)")
    g.add_argument("--mc-samples", type=pos_int, default=32, help="simulated paths per unit and iteration")
    g.add_argument("--iterations", type=pos_int, default=400)
    g.add_argument("--fit-R", action=argparse.BooleanOptionalAction, default=True, help="learn observation noise")
    g.add_argument("--R-init", type=pos_float, default=0.1, help="initial (or fixed) observation noise variance")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="model -> simulated paths CSV")
    _shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--x0", type=_csv_list(float), required=True, help="initial state, comma separated")
    p.add_argument("--horizon", type=pos_float, required=True, help="length in observed time units")
    p.add_argument("--interval", type=pos_float, default=1.0, help="output spacing in observed time units")
    p.add_argument("--paths", type=pos_int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="model + panel -> per-transition diagnostics CSV and summary")
    _shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--S", type=_ranged(int, 1000), default=DEFAULT_S, help="simulated successors per transition")
    _method_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("impute", help="model + panel -> bridge imputation CSV for every gap")
    _shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--S", type=_ranged(int, 2), default=4096, help="particles per gap")
    _method_flags(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("validate", help="model + panel -> ACF tables and Markovianity verdict")
    _shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--max-lag", type=pos_int, default=20)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        for path in args.func(args):
            print(path)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, HistSdeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
