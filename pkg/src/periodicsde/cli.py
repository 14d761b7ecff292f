"""Command-line front end: one config document in, CSV/JSON artifacts plus a manifest out.

Exit status: 0 success, 2 invalid configuration (nothing written),
3 numerical failure (explosion, non-convergence).
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, config
from .config import ConfigError
from .errors import NumericalError
from . import ergodicity, fokker_planck, integrators, lyapunov, ou_analytic
from .sde_core import PolyDriftSpec

log = logging.getLogger("periodicsde")


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.17g}"


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _coords(d):
    return [f"x{i}" for i in range(d)]


# each runner returns ({filename: text or bytes}, extra manifest fields)

def run_simulate(model, ou, p, seed, workers):
    chain = integrators.sample_grid_chain(model, p.s, p.x0, p.n_periods, p.dt, p.n_paths, seed,
                                          record_every=p.record_every, workers=workers)
    files = {}
    for n in chain.recorded_ns:
        x = chain.at(n)
        if p.format == "csv":
            files[f"samples_n{n:04d}.csv"] = csv_text(_coords(model.dim), x)
        else:
            buf = io.BytesIO()
            np.savez(buf, **{f"x{i}": np.ascontiguousarray(x[:, i]) for i in range(model.dim)})
            files[f"samples_n{n:04d}.npz"] = buf.getvalue()
    files["samples.json"] = _json(chain.metadata())
    return files, {"dt_snapped": chain.dt_snapped}


def run_estimate_pm(model, ou, p, seed, workers):
    rep = ergodicity.check_periodicity(model, p.phases, p.burn_in, p.n_paths, p.dt, seed,
                                       x0=p.x0, bins=p.bins, workers=workers)
    files = {"periodicity.json": _json(rep.to_dict())}
    d = model.dim
    files["phase_means.csv"] = csv_text(
        ["phase"] + [f"mean_x{i}" for i in range(d)] + [f"stderr_x{i}" for i in range(d)],
        [[ph, *m, *e] for ph, m, e in zip(rep.phases, rep.means, rep.stderr)])
    for j, ph in enumerate(rep.phases):
        files[f"pm_phase{j:02d}.csv"] = csv_text(_coords(d) + ["mass"], rep.measures[ph].rows())
    return files, {"dt_snapped": rep.meta["dt_snapped"]}


def run_convergence(model, ou, p, seed, workers):
    if p.target == "analytic":
        if ou is None:
            raise ConfigError("convergence: analytic target needs an 'ou' model")
        target = ou_analytic.periodic_measure(ou, p.s)
    else:
        ens = integrators.sample_phase_ensemble(
            model, [p.s], p.target.burn_in, p.target.n_paths, p.dt, seed,
            workers=workers, path_offset=p.n_paths)
        ref = ens[integrators.reduce_phase(p.s, model.period)]
        target = ergodicity.empirical_measure(
            ref, ergodicity.grid_for_samples(ref, bins=p.bins))
    x0 = np.atleast_1d(np.asarray(p.x0, float))
    curve = ergodicity.convergence_curve(model, p.s, x0, p.ns, p.dt, p.n_paths, seed, target,
                                         bins=p.bins, workers=workers)
    summary = curve.summary()
    if ou is not None and ou.dim == 1:
        summary["analytic_r"] = float(np.exp(-ou.eigvals[0] * ou.period))
    files = {"curve.csv": csv_text(["n", "tv", "stderr"], curve.rows()),
             "fit.json": _json(summary)}
    return files, {"dt_snapped": curve.meta["dt_snapped"]}


def run_verify_drift(model, ou, p, seed, workers):
    if p.mode == "classify":
        if model.poly_coeffs is None:
            raise ConfigError("verify-drift: classify needs a polynomial drift")
        rep = lyapunov.classify_poly_drift(PolyDriftSpec(model.period, model.poly_coeffs))
    elif p.mode == "weak-dissipativity":
        rep = lyapunov.verify_weak_dissipativity(model, p.c, p.lam, p.radius, p.grid_density)
    else:
        V = config.build_test_function(p.V, model)
        rep = lyapunov.verify_geometric_drift(model, V, p.C, p.lam, p.radius, p.grid_density)
    files = {"drift_report.json": _json(rep.to_dict())}
    if rep.slice_margins:
        files["margins.csv"] = csv_text(["t", "worst_margin"], rep.slice_margins)
    return files, {}


def run_doeblin(model, ou, p, seed, workers):
    pts = np.array([np.atleast_1d(x) for x in p.start_points], float)
    res = ergodicity.doeblin_estimate(model, p.s, p.lower, p.upper, pts, p.dt, p.n_paths, seed,
                                      bins=p.bins, bandwidth=p.bandwidth, workers=workers)
    summary = res.summary()
    if ou is not None and ou.dim == 1:
        summary["eta_exact"] = ou_analytic.doeblin_eta_exact(
            ou, p.s, pts[:, 0], float(np.atleast_1d(p.lower)[0]), float(np.atleast_1d(p.upper)[0]))
    files = {"doeblin.json": _json(summary)}
    if res.phi is not None:
        files["phi.csv"] = csv_text(_coords(model.dim) + ["mass"], res.phi.rows())
    dt_s, _ = integrators.snap_dt(model.period, p.dt)
    return files, {"dt_snapped": dt_s}


def run_fokker_planck(model, ou, p, seed, workers):
    if model.dim != 1:
        raise ConfigError("fokker-planck: model must be one-dimensional")
    grid = fokker_planck.FpGrid(p.x_lo, p.x_hi, p.nx, p.nt, model.period)
    pd = fokker_planck.solve_periodic(model, grid, max_iters=p.max_iters, tol=p.tol)
    files = {"fp_log.json": _json(pd.log())}
    for j, ph in enumerate(p.phases):
        q = fokker_planck.density_at(pd, integrators.reduce_phase(ph, model.period))
        files[f"density_phase{j:02d}.csv"] = csv_text(["x", "q"], zip(grid.centers, q))
    return files, {"dt_snapped": grid.dt}


def run_ou_analytic(model, ou, p, seed, workers):
    if ou is None:
        raise ConfigError("ou-analytic: needs an 'ou' model")
    T, d = ou.period, ou.dim
    rho = ou_analytic.periodic_measure(ou, 0.0)
    var = np.diag(rho.cov)
    rows = []
    for t in np.linspace(0.0, T, p.n_times, endpoint=False):
        x = ou_analytic.xi(ou, t)
        gap = float(np.max(np.abs(ou_analytic.xi(ou, t + T) - x)))
        rows.append([t, *x, *var, gap])
    header = (["t"] + [f"xi_x{i}" for i in range(d)] + [f"var_x{i}" for i in range(d)]
              + ["xi_period_gap"])
    measures = {str(ph): ou_analytic.periodic_measure(ou, ph).to_dict() for ph in p.phases}
    return {"xi.csv": csv_text(header, rows), "periodic_measures.json": _json(measures)}, {}


RUNNERS = {
    "simulate": run_simulate, "estimate-pm": run_estimate_pm, "convergence": run_convergence,
    "verify-drift": run_verify_drift, "doeblin": run_doeblin,
    "fokker-planck": run_fokker_planck, "ou-analytic": run_ou_analytic,
}


def write_artifacts(out_dir, files, manifest):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    listed = []
    for name in sorted(files):
        body = files[name]
        data = body.encode() if isinstance(body, str) else body
        (out / name).write_bytes(data)
        listed.append({"file": name, "sha256": hashlib.sha256(data).hexdigest(),
                       "bytes": len(data)})
    manifest["artifacts"] = listed
    (out / "manifest.json").write_text(_json(manifest))
    return out / "manifest.json"


def build_parser():
    ap = argparse.ArgumentParser(prog="periodic-sde",
                                 description="Periodic measures of T-periodic SDEs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML or JSON experiment document")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides config)")
        sp.add_argument("--workers", type=int, default=1, help="worker threads for sampling")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        data = config.load_config(args.config)
        cfg, params = config.validate(data, args.command, args.seed)
        out_dir = args.out or cfg.output_dir
        if not out_dir:
            raise ConfigError("config: no output directory (use --out or output_dir)")
        model, ou = config.build_model(cfg)
        files, extra = RUNNERS[args.command](model, ou, params, cfg.seed, args.workers)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 2
    manifest = {
        "experiment": args.command,
        "config": cfg.model_dump(mode="json", by_alias=True) | {"params": data.get("params", {})},
        "seed": cfg.seed,
        "workers": args.workers,
        "version": __version__,
        "wall_time_s": time.perf_counter() - started,
        "created": datetime.now(timezone.utc).isoformat(),
        **extra,
    }
    path = write_artifacts(out_dir, files, manifest)
    log.info("wrote %d artifacts, manifest %s", len(files), path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
