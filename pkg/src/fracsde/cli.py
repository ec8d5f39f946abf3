"""Command-line experiment runner.

Each subcommand runs one pipeline stage and writes its artifacts under
``<output>/<name>/`` together with ``manifest.json``. Exit codes: 0 ok,
2 configuration error, 3 numeric failure, 4 threshold failure.
"""

import argparse
import csv
import glob
import io
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import CapabilityError, ConfigError, NumericError, ParameterError

RESULT_COLUMNS = ["method", "benchmark", "dimension", "alpha", "seed", "time",
                  "ll_rel_l2", "ll_rel_linf", "pdf_rel_l2", "pdf_rel_linf"]
TABLE_COLUMNS = ["method", "dimension", "alpha", "time",
                 "ll_rel_l2", "ll_rel_linf", "pdf_rel_l2", "pdf_rel_linf"]
_METRICS = ("ll_rel_l2", "ll_rel_linf", "pdf_rel_l2", "pdf_rel_linf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 2, 3, 4


class ThresholdFailure(Exception):
    pass


def _replace_atomic(tmp, final):
    os.replace(tmp, final)
    return Path(final)


def _write_text_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    return _replace_atomic(tmp, path)


class Run:
    """A configured experiment plus its output directory and manifest."""

    def __init__(self, cfg, workers=1):
        self.cfg = cfg
        self.workers = max(1, int(workers))
        e = cfg["experiment"]
        self.dir = Path(e["output"]) / e["name"]
        self.dir.mkdir(parents=True, exist_ok=True)
        self.spec = cfg.spec()
        self.seed = e["seed"]

    def path(self, name):
        return self.dir / name

    @property
    def t_eval(self):
        t = self.cfg["oracle"]["t"]
        return self.spec.T if t is None else t

    def record(self, stage, wall, artifacts, **extra):
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        import jax
        import scipy

        manifest.update({
            "config_hash": self.cfg.digest(),
            "config": self.cfg.as_dict(),
            "seed": self.seed,
            "versions": {"fracsde": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "jax": jax.__version__},
        })
        manifest.setdefault("stages", {})[stage] = {
            "wall_s": round(wall, 3),
            "artifacts": sorted(str(Path(a).name) for a in artifacts),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            **extra,
        }
        _write_text_atomic(mpath, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# stages


def stage_sample_stable(run):
    from .stable import StableLaw, sample_isotropic_stable

    s, e = run.cfg["stable"], run.cfg["experiment"]
    law = StableLaw(e["alpha"], s["gamma"])
    X = sample_isotropic_stable(law, e["d"], s["n"], seed=run.seed, stream=(11,))
    out = run.path("stable_samples.npy")
    tmp = str(out) + ".tmp.npy"
    np.save(tmp, X)
    _replace_atomic(tmp, out)
    return [out], {"streams": "(11,)"}


def stage_simulate(run):
    from .sde import TimeGrid, simulate, write_trajectories

    s = run.cfg["simulate"]
    grid = TimeGrid.uniform(run.spec.T, s["steps"])
    keep = sorted(set(range(0, s["steps"] + 1, max(1, s["save_every"]))) | {s["steps"]})
    batches = simulate(run.spec, s["scheme"], grid, s["n"], seed=run.seed, save_at=keep,
                       workers=run.workers)
    out = run.path("trajectories.txt")
    tmp = str(out) + ".tmp"
    write_trajectories(tmp, batches, run.spec, s["scheme"], grid, run.seed)
    _replace_atomic(tmp, out)
    return [out], {"streams": "(2, block)"}


def stage_train_score(run):
    from .scorematch import ScoreTrainTask, save_score, train_score

    cfg, spec = run.cfg, run.spec
    route = cfg["score"]["route"]
    arts, wall = [], {}
    vanilla = None
    if route == "score-fpinn":
        t0 = time.perf_counter()
        task = ScoreTrainTask("ssm", spec, cfg.plan("vanilla"),
                              hard_constraint=cfg["vanilla"]["hard_constraint"], grid=cfg.grid())
        vanilla, log = train_score(task, checkpoint_path=str(run.path("vanilla.partial.ckpt")))
        wall["vanilla"] = time.perf_counter() - t0
        arts.append(_replace_atomic(run.path("vanilla.partial.ckpt"), run.path("vanilla.ckpt")))
        log.to_csv(run.path("vanilla_log.csv"))
        arts.append(run.path("vanilla_log.csv"))
    t0 = time.perf_counter()
    task = ScoreTrainTask(route, spec, cfg.plan("score"), frozen_vanilla=vanilla, grid=cfg.grid())
    model, log = train_score(task, checkpoint_path=str(run.path("score.partial.ckpt")))
    wall["score"] = time.perf_counter() - t0
    tmp = run.path("score.partial.ckpt")
    save_score(tmp, model, task.plan, {"route": route, "benchmark": spec.benchmark})
    arts.append(_replace_atomic(tmp, run.path("score.ckpt")))
    log.to_csv(run.path("score_log.csv"))
    arts.append(run.path("score_log.csv"))
    return arts, {"train_s": sum(wall.values()), "streams": "(5, route), (6, route)"}


def stage_solve_ll(run):
    from .llsolver import new_ll_model, save_ll, train_ll
    from .scorematch import load_score

    cfg, spec = run.cfg, run.spec
    ckpt = run.path("score.ckpt")
    if not ckpt.exists():
        raise ConfigError(f"{ckpt} not found; run train-score first")
    salpha, _ = load_score(ckpt, spec.initial)
    plan = cfg.plan("ll")
    c = cfg["ll"]["constraint"]
    model = new_ll_model(spec, plan, None if c == "auto" else c)
    t0 = time.perf_counter()
    model, log = train_ll(model, salpha, spec, plan, T=spec.T,
                          checkpoint_path=str(run.path("ll.partial.ckpt")))
    wall = time.perf_counter() - t0
    tmp = run.path("ll.partial.ckpt")
    save_ll(tmp, model, plan, {"benchmark": spec.benchmark})
    arts = [_replace_atomic(tmp, run.path("ll.ckpt"))]
    log.to_csv(run.path("ll_log.csv"))
    arts.append(run.path("ll_log.csv"))
    return arts, {"train_s": wall, "streams": "(7,), (8,)"}


def _law_samples(run, n, stream):
    """Samples of x_t at the evaluation time: exact where possible, else EM."""
    from .sde import TimeGrid, exact_marginal, simulate

    try:
        return exact_marginal(run.spec, run.t_eval, n, seed=run.seed, stream=stream).points
    except CapabilityError:
        steps = run.cfg["simulate"]["steps"]
        grid = TimeGrid.uniform(run.t_eval, steps)
        # simulate() fixes its own stream layout, so derive a distinct seed
        seed = int(np.random.SeedSequence(run.seed, spawn_key=stream).generate_state(1)[0])
        return simulate(run.spec, run.cfg["simulate"]["scheme"], grid, n, seed=seed,
                        save_at=[steps], workers=run.workers)[0].points


def write_reference(path, X, ll, header):
    buf = io.StringIO()
    buf.write("# fracsde-reference v1\n")
    buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    d = X.shape[1]
    buf.write(",".join([f"x{i + 1}" for i in range(d)] + ["ll"]) + "\n")
    np.savetxt(buf, np.column_stack([X, ll]), fmt="%.17g", delimiter=",")
    _write_text_atomic(path, buf.getvalue())


def read_reference(path):
    with open(path) as fh:
        fh.readline()
        header = dict(tok.split("=", 1) for tok in fh.readline()[1:].split())
        fh.readline()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data[:, :-1], data[:, -1]


def stage_make_reference(run):
    from .reference import exact_ll, mc_ll_oracle, radial_kde_ll

    o = run.cfg["oracle"]
    X = _law_samples(run, o["n_test"], (9,))
    if o["kind"] == "mc":
        ll = mc_ll_oracle(run.spec, run.t_eval, X, n_mc=o["n_mc"], seed=run.seed,
                          method=o["method"], workers=run.workers)
    elif o["kind"] == "exact":
        ll = exact_ll(run.spec, run.t_eval, X)
    else:
        S = _law_samples(run, o["n_mc"], (10,))
        bw = o["bandwidth"]
        ll = radial_kde_ll(S, X, bandwidth=bw if bw == "silverman" else float(bw))
    out = run.path("reference.csv")
    write_reference(out, X, ll, {"benchmark": run.spec.benchmark, "d": run.spec.d,
                                 "alpha": repr(run.spec.alpha), "t": repr(run.t_eval),
                                 "oracle": o["kind"], "n_mc": o["n_mc"], "seed": run.seed})
    return [out], {"streams": "(9,), (3, block)"}


def format_row(row):
    out = {}
    for k in RESULT_COLUMNS:
        v = row[k]
        out[k] = f"{v:.3E}" if k == "time" or k in _METRICS else str(v)
    return out


def write_rows(path, rows, columns=RESULT_COLUMNS):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    _write_text_atomic(path, buf.getvalue())


def stage_evaluate(run):
    from .llsolver import evaluate_ll, load_ll
    from .reference import make_report

    for name in ("ll.ckpt", "reference.csv"):
        if not run.path(name).exists():
            raise ConfigError(f"{run.path(name)} not found; run the earlier stages first")
    model, _ = load_ll(run.path("ll.ckpt"), run.spec.initial)
    _, X, ref = read_reference(run.path("reference.csv"))
    pred, _ = evaluate_ll(model, X, run.t_eval)
    report = make_report(pred, ref, run.cfg["evaluate"]["drop_fraction"])
    manifest = json.loads(run.path("manifest.json").read_text()) if run.path("manifest.json").exists() else {}
    stages = manifest.get("stages", {})
    train_s = sum(stages.get(s, {}).get("train_s", 0.0) for s in ("train-score", "solve-ll"))
    e = run.cfg["experiment"]
    row = {"method": run.cfg["score"]["route"], "benchmark": e["benchmark"], "dimension": e["d"],
           "alpha": repr(e["alpha"]), "seed": e["seed"], "time": train_s,
           **{k: getattr(report, k) for k in _METRICS}}
    out = run.path("results.csv")
    write_rows(out, [format_row(row)])
    gate = run.cfg["evaluate"]["max_ll_rel_l2"]
    extra = {"report": report.as_dict()}
    if gate is not None and not report.ll_rel_l2 <= gate:
        extra["threshold_failed"] = True
        return [out], extra
    return [out], extra


STAGES = {
    "sample-stable": stage_sample_stable,
    "simulate": stage_simulate,
    "train-score": stage_train_score,
    "solve-ll": stage_solve_ll,
    "make-reference": stage_make_reference,
    "evaluate": stage_evaluate,
}
FULL = ("train-score", "solve-ll", "make-reference", "evaluate")


def run_stage(name, run):
    t0 = time.perf_counter()
    arts, extra = STAGES[name](run)
    run.record(name, time.perf_counter() - t0, arts, **extra)
    print(f"{name}: wrote {', '.join(str(a) for a in arts)}")
    if extra.get("threshold_failed"):
        raise ThresholdFailure(
            f"ll_rel_l2 = {extra['report']['ll_rel_l2']:.3E} exceeds "
            f"{run.cfg['evaluate']['max_ll_rel_l2']:.3E}")


# --------------------------------------------------------------------------
# results table


def results_table(patterns):
    """Merge result CSVs into the table layout, sorted by method, dimension, alpha."""
    files = sorted({f for p in patterns for f in (glob.glob(p) or [p])})
    rows = []
    for f in files:
        try:
            with open(f, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != RESULT_COLUMNS:
                    raise ConfigError(f"{f}: schema mismatch, expected columns {RESULT_COLUMNS}, "
                                      f"got {reader.fieldnames}")
                rows.extend(reader)
        except OSError as exc:
            raise ConfigError(f"{f}: {exc}") from exc
    if not rows:
        raise ConfigError("no result rows found")
    rows.sort(key=lambda r: (r["method"], int(r["dimension"]), float(r["alpha"])))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="fracsde", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fracsde {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "full"):
        sp = sub.add_parser(name, help=f"run the {name} stage" if name != "full"
                            else "train-score, solve-ll, make-reference and evaluate")
        sp.add_argument("--config", help="INI file (defaults apply when omitted)")
        sp.add_argument("--workers", type=int, default=1, help="thread fan-out cap")
        sp.add_argument("--out", help="output root (overrides [experiment] output)")
        sp.add_argument("--seed", type=int, help="root seed override")
    rt = sub.add_parser("results-table", help="merge results.csv files")
    rt.add_argument("files", nargs="+", help="files or glob patterns")
    rt.add_argument("--out", help="write here instead of stdout")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "results-table":
            text = results_table(args.files)
            if args.out:
                _write_text_atomic(args.out, text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = ExperimentConfig.load(args.config) if args.config else \
            ExperimentConfig.from_text("", source="<defaults>")
        if args.out:
            cfg.set("experiment", "output", args.out)
        if args.seed is not None:
            cfg.set("experiment", "seed", args.seed)
        run = Run(cfg, args.workers)
        for name in (FULL if args.command == "full" else (args.command,)):
            run_stage(name, run)
    except ThresholdFailure as exc:
        print(f"threshold failure: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (ConfigError, ParameterError, CapabilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
