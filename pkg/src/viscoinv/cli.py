"""Command-line front end: forward runs, inversion, gradient checks, sweeps.

    viscoinv forward   --config run.toml --out results/
    viscoinv invert    --config run.toml --out results/
    viscoinv gradcheck --config run.toml --out results/
    viscoinv sweep     --config run.toml --out results/ --threads 4

All outputs are CSV (plus a plain-text summary for invert).  Every file
starts with `# config <hash> seed <seed>` so reruns are verifiable:
identical config + seed produce byte-identical files.  Exit codes:
0 success, 1 config error, 2 I/O error, 3 numerical failure.
"""

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import experiments as ex
from . import inverse as inv
from . import optim
from . import simulate as sim

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_csv(path, header_cols, rows, doc, seed):
    """CSV with a config-hash + seed comment header; %.17g floats."""
    lines = ["# config %s seed %d" % (cfgmod.config_hash(doc), seed),
             ",".join(header_cols)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _out_dir(args, doc):
    out = args.out or doc.get("run", {}).get("out")
    if not out:
        raise cfgmod.ConfigError("no output directory: set --out or run.out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_doc(args):
    doc = cfgmod.load_config(args.config)
    if args.seed is not None:
        doc.setdefault("run", {})["seed"] = int(args.seed)
    return doc


def _read_observations(path, doc):
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=2)
    except OSError:
        raise cfgmod.ConfigError("observation file not found: %s" % (path,))
    raw = np.atleast_2d(raw)
    times = np.unique(raw[:, 0].astype(int))
    sensors = np.unique(raw[:, 1].astype(int))
    values = np.full((times.size, sensors.size), np.nan)
    ti = {t: i for i, t in enumerate(times)}
    si = {s: i for i, s in enumerate(sensors)}
    for t, s, v in raw[:, :3]:
        values[ti[int(t)], si[int(s)]] = v
    return inv.ObservationSet(sensors, times, values, dict(source=str(path)))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _forward_states(spec):
    """Truth forward run of a scenario; returns field tables for export."""
    prob = ex.build_problem(spec)
    aux = prob.aux
    fields = {}
    if spec.scenario == "kv_1d":
        eps, sigma = aux["eps"], aux["sigma"]
        rows = [(k, t, eps[k, t, 0], sigma[k, t, 0])
                for k in range(eps.shape[0]) for t in range(eps.shape[1])]
        fields["trajectories"] = (("trajectory", "step", "eps", "sigma"),
                                  rows)
        return prob, fields

    m = aux["mesh"]
    out = aux.get("truth_out") or aux["truth_run"](1.0)
    snaps = {"stress": ("sigma", m.gauss_xy, 3)}
    if "d" in out:
        snaps["displacement"] = ("d", m.nodes, 2)
    if "p" in out:
        snaps["pressure"] = ("p", aux["grid"].centers, 1)
    if "s2" in out:
        snaps["saturation"] = ("s2", aux["grid"].centers, 1)
        snaps["potential"] = ("psi", aux["grid"].centers, 1)

    steps = sorted({0, spec.n_steps // 2, spec.n_steps - 1})
    for name, (key, xy, width) in snaps.items():
        rows = []
        for k in steps:
            vals = np.asarray(ad.value_of(out[key][k]))
            vals = vals.reshape(xy.shape[0], width)
            for i in range(xy.shape[0]):
                rows.append((k, xy[i, 0], xy[i, 1], *vals[i]))
        cols = ("step", "x", "y") + {
            1: ("value",), 2: ("ux", "uy"),
            3: ("sxx", "syy", "sxy")}[width]
        fields[name] = (cols, rows)
    return prob, fields


def cmd_forward(args):
    doc = _load_doc(args)
    spec = cfgmod.spec_from_config(doc)
    out_dir = _out_dir(args, doc)
    prob, fields = _forward_states(spec)
    for name, (cols, rows) in fields.items():
        write_csv(out_dir / ("%s.csv" % name), cols, rows, doc, spec.seed)
    if prob.obs is not None:
        obs = prob.obs
        rows = [(int(t), int(s), obs.values[i, j])
                for i, t in enumerate(obs.times)
                for j, s in enumerate(obs.sensors)]
        write_csv(out_dir / "observations.csv",
                  ("time", "sensor", "value"), rows, doc, spec.seed)
    print("forward: wrote %d file(s) to %s"
          % (len(fields) + (prob.obs is not None), out_dir))
    return EXIT_OK


# ---------------------------------------------------------------------------
# invert
# ---------------------------------------------------------------------------

def cmd_invert(args):
    doc = _load_doc(args)
    spec = cfgmod.spec_from_config(doc)
    out_dir = _out_dir(args, doc)

    obs_path = doc.get("run", {}).get("observations")
    if obs_path is not None:
        obs = _read_observations(obs_path, doc)
        prob = ex.build_problem(spec, obs=obs)
        res = optim.minimize(prob.fg, prob.theta0, bounds=prob.bounds,
                             config=ex._config_from(spec))
        report = ex.AssessmentReport(spec.scenario, spec.assessment,
                                     dict(loss=res.f), dict(theta=res.x),
                                     res.history, res.status, 0.0)
    else:
        report = ex.run_experiment(spec)

    write_csv(out_dir / "history.csv", ("iter", "loss", "proj_grad"),
              report.history, doc, spec.seed)
    write_csv(out_dir / "metrics.csv", ("metric", "value"),
              sorted(report.metrics.items()), doc, spec.seed)
    rec_rows = []
    for name, val in sorted(report.recovered.items()):
        for i, v in enumerate(np.atleast_1d(np.asarray(val, dtype=float)
                                            ).ravel()):
            rec_rows.append((name, i, v))
    write_csv(out_dir / "recovered.csv", ("name", "index", "value"),
              rec_rows, doc, spec.seed)

    summary = ["scenario: %s" % report.scenario,
               "assessment: %s" % report.assessment,
               "status: %s" % report.status,
               "iterations: %d" % (len(report.history) - 1),
               "seconds: %.3f" % report.seconds]
    summary += ["%s: %.17g" % (k, v)
                for k, v in sorted(report.metrics.items())]
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return EXIT_NUMERICAL if report.status == "numerical-failure" else EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    doc = _load_doc(args)
    spec = cfgmod.spec_from_config(doc)
    out_dir = _out_dir(args, doc)
    gc = doc.get("gradcheck", {})
    tol = float(gc.get("tol", 1e-5))

    rows = ex.gradcheck_problem(spec, h=float(gc.get("h", 1e-5)),
                                n_directions=int(gc.get("n_directions", 4)),
                                seed=spec.seed,
                                corrupt=bool(gc.get("corrupt", False)))
    table = [(r["segment"], r["n_params"], r["max_rel_err"]) for r in rows]
    write_csv(out_dir / "gradcheck.csv",
              ("segment", "n_params", "max_rel_err"), table, doc, spec.seed)
    worst = 0.0
    for seg, n, err in table:
        print("%-12s n=%-6d max_rel_err=%.3e" % (seg, n, err))
        worst = max(worst, err)
    print("worst %.3e (tol %.1e)" % (worst, tol))
    return EXIT_OK if worst < tol else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _noise_member(job):
    doc, sigma, seed = job
    try:
        spec = cfgmod.spec_from_config(doc, seed=seed)
        spec.noise = float(sigma)
        rep = ex.run_experiment(spec)
        return (sigma, seed, ex.scenario_error(rep),
                rep.metrics.get("loss", float("nan")), rep.status,
                rep.seconds)
    except Exception as e:                  # record the failure, keep going
        return (sigma, seed, float("nan"), float("nan"),
                "failed: %s" % e, 0.0)


def _arch_member(job):
    doc, width, depth, activation, seed = job
    try:
        spec = cfgmod.spec_from_config(doc, seed=seed)
        spec.options.update(width=int(width), depth=int(depth),
                            activation=activation)
        prob = ex.build_problem(spec)
        res = optim.minimize(prob.fg, prob.theta0, bounds=prob.bounds,
                             config=ex._config_from(spec))
        return (width, depth, activation, seed, res.f, res.n_iter,
                res.status, 0.0)
    except Exception as e:
        return (width, depth, activation, seed, float("nan"), 0,
                "failed: %s" % e, 0.0)


def _run_jobs(fn, jobs, threads):
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def cmd_sweep(args):
    doc = _load_doc(args)
    cfgmod.spec_from_config(doc)            # validate base config
    out_dir = _out_dir(args, doc)
    sw = doc.get("sweep", {})
    kind = sw.get("kind", "noise")
    seed0 = int(doc.get("run", {}).get("seed", 0))

    if kind == "noise":
        sigmas = [float(s) for s in sw.get("sigmas", (0.0, 0.01, 0.1))]
        seeds = [int(s) for s in sw.get("seeds", range(5))]
        jobs = [(doc, s, sd) for s in sigmas for sd in seeds]
        rows = _run_jobs(_noise_member, jobs, args.threads)
        write_csv(out_dir / "sweep.csv",
                  ("sigma", "seed", "error", "loss", "status", "seconds"),
                  rows, doc, seed0)
        agg = []
        for s in sigmas:
            errs = [r[2] for r in rows if r[0] == s and np.isfinite(r[2])]
            agg.append((s, np.median(errs) if errs else float("nan"),
                        np.std(errs) if errs else float("nan"), len(errs)))
        write_csv(out_dir / "sweep_aggregate.csv",
                  ("sigma", "median_error", "std_error", "n_ok"),
                  agg, doc, seed0)
        for row in agg:
            print("sigma=%-8g median=%.6e std=%.3e n=%d" % row)
    elif kind == "arch":
        widths = [int(w) for w in sw.get("widths", (1, 5, 10, 20, 40))]
        depths = [int(d) for d in sw.get("depths", (1, 3, 5, 10))]
        acts = list(sw.get("activations",
                           ("tanh", "relu", "elu", "selu")))
        jobs = [(doc, w, d, a, seed0)
                for w in widths for d in depths for a in acts]
        rows = _run_jobs(_arch_member, jobs, args.threads)
        write_csv(out_dir / "sweep.csv",
                  ("width", "depth", "activation", "seed", "loss",
                   "iterations", "status", "seconds"),
                  rows, doc, seed0)
        best = min((r for r in rows if np.isfinite(r[4])),
                   key=lambda r: r[4], default=None)
        if best:
            print("best: width=%d depth=%d %s loss=%.6e"
                  % (best[0], best[1], best[2], best[4]))
    else:
        raise cfgmod.ConfigError("sweep.kind must be 'noise' or 'arch'")
    print("sweep: %d member(s) written to %s" % (len(rows), out_dir))
    return EXIT_OK


# ---------------------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="viscoinv",
        description="Inverse modeling of viscoelastic constitutive "
                    "relations (forward runs, inversion, gradient checks, "
                    "sweep campaigns)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("forward", cmd_forward), ("invert", cmd_invert),
                     ("gradcheck", cmd_gradcheck), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.set_defaults(fn=fn)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except cfgmod.ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print("i/o error: %s" % e, file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError) as e:
        print("numerical failure: %s" % e, file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
