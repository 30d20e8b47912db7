"""Command-line interface.

    werrlab [--config PATH] [--seed N] [--out DIR] <command> ...

Commands: ``truth``, ``cycle``, ``train-ann``, ``build-q <kind>``,
``diagnose <metric>``, ``export``, ``twin``.  Output goes under ``--out``, or
the directory named by the ``WERR_OUT_DIR`` environment variable, or
``./runs``.  The effective config hash is printed to stderr on every run.
Exit status: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import qpipeline as qp
from .archive import load_archive
from .config import ExperimentConfig
from .covmodel import CovarianceMatrix
from .cycling import generate_truth_and_obs, run_cycle
from .dynamics import ModelSpec
from .errors import WerrError
from .matio import load_covariance, matrix_to_csv, read_matrix, write_matrix
from .neuralerr import load_params, save_params

OUT_ENV = "WERR_OUT_DIR"
DEFAULT_OUT = "runs"
Q_KINDS = ("pred", "oper", "ann", "incr", "daley")
METRICS = ("std", "correlation", "increments", "departures", "skill", "eta")

log = logging.getLogger("werrlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="flat key=value experiment config")
    p.add_argument("--seed", type=int, default=d, help="experiment seed (overrides the config)")
    p.add_argument("--out", default=d, help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS if suppress else [],
                   metavar="KEY=VALUE", help="override one config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = _Parser(prog="werrlab", description="Weak-constraint 4D-Var model-error experiments")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p, suppress=True)
        return p

    cmd("truth", "generate the truth run and synthetic observations")

    p = cmd("cycle", "run a strong- or weak-constraint cycling experiment")
    p.add_argument("--mode", choices=("sc", "wc"), help="overrides assim.mode")
    p.add_argument("--q", help="model-error covariance (WERRMAT) for weak-constraint runs")
    p.add_argument("--run-id", help="archive directory name (default: config run_id)")

    p = cmd("train-ann", "train the error emulator on an archived strong-constraint run")
    p.add_argument("--run", required=True, help="archive directory")
    p.add_argument("--output", help="checkpoint path (default: <out>/ann.werrnn)")

    p = cmd("build-q", "build a model-error covariance")
    p.add_argument("kind", choices=Q_KINDS)
    p.add_argument("--run", help="archive directory (ann, incr)")
    p.add_argument("--params", help="emulator checkpoint (ann)")
    p.add_argument("--q-pred", help="Q_pred matrix for the bootstrap (oper)")
    p.add_argument("--samples", type=int, default=10_000, help="Monte Carlo samples (daley)")
    p.add_argument("--output", help="matrix path (default: <out>/q_<kind>.werrmat)")

    p = cmd("diagnose", "emit a diagnostic table as CSV")
    p.add_argument("metric", choices=METRICS)
    p.add_argument("--run", help="archive directory")
    p.add_argument("--control", help="control archive for departure ratio tables")
    p.add_argument("--q", help="covariance matrix (std, correlation)")
    p.add_argument("--rows", default="0", help="comma-separated reference indices (correlation)")
    p.add_argument("--leads", default="0,1,2,4,8", help="comma-separated leads in sub-windows (skill)")
    p.add_argument("--kind", default="free", choices=("free", "debiased", "persistence"))
    p.add_argument("--output", help="CSV path (default: stdout)")

    p = cmd("export", "convert a WERRMAT matrix to lossless CSV")
    p.add_argument("matrix")
    p.add_argument("--output", help="CSV path (default: stdout)")

    cmd("twin", "run the whole standard biased-twin experiment")
    return parser


def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if getattr(args, "mode", None):
        overrides["assim.mode"] = args.mode
    return cfg.with_(**overrides).validate()


def _out_root(args):
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _emit(text, output):
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _need(args, *names):
    for n in names:
        if getattr(args, n.replace("-", "_")) is None:
            raise UsageError(f"{args.command} needs --{n}")


def cmd_truth(args, cfg, out):
    twin = generate_truth_and_obs(cfg)
    d = out / cfg.run_id
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "truth.werrmat", twin.truth)
    n, nsub = cfg.model.n, cfg.model.subwindows_per_window
    obs = np.full((twin.n_windows * (nsub + 1), n), np.nan)
    for w, o in enumerate(twin.obs):
        for k, (idx, y) in enumerate(zip(o.indices, o.values)):
            obs[w * (nsub + 1) + k, idx] = y
    write_matrix(d / "obs.werrmat", obs)
    cfg.save(d / "config.kv")
    print(f"truth: {twin.truth.shape[0]} states, {sum(o.count for o in twin.obs)} observations -> {d}")


def cmd_cycle(args, cfg, out):
    if args.run_id:
        cfg = cfg.with_(run_id=args.run_id)
    q = None
    q_path = args.q or cfg.assim.q_path
    if cfg.assim.mode == "wc":
        if not q_path:
            raise UsageError("weak-constraint cycling needs --q (or assim.q_path)")
        q = load_covariance(q_path)
    run = run_cycle(cfg, None, q, out / cfg.run_id)
    bad = int(np.sum(~run.converged)) if run.records else 0
    print(f"cycle: {run.n_windows} windows ({bad} not converged) -> {run.path}")


def cmd_train_ann(args, cfg, out):
    run = load_archive(args.run)
    params, hist = qp.train_emulator(run)
    dest = Path(args.output) if args.output else out / "ann.werrnn"
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_params(dest, params)
    best = hist.val_mse[hist.best_epoch] if hist.best_epoch >= 0 else float("nan")
    print(f"train-ann: {len(hist.train_mse)} epochs, best validation mse {best:.6g} -> {dest}")


def cmd_build_q(args, cfg, out):
    kind = args.kind
    if kind == "pred":
        q = qp.build_q_pred_for(cfg)
    elif kind == "oper":
        _need(args, "q-pred")
        boot = cfg.with_(run_id=f"{cfg.run_id}-bootstrap")
        q, _ = qp.build_q_oper(load_covariance(args.q_pred), boot, None, out / boot.run_id)
    elif kind == "ann":
        _need(args, "params", "run")
        q = qp.build_q_ann(load_params(args.params), load_archive(args.run), qp.taper_for(cfg))
    elif kind == "incr":
        _need(args, "run")
        q = qp.build_q_increment_climatology(load_archive(args.run), qp.taper_for(cfg))
    else:
        q = _daley_demo(cfg, args.samples)
    dest = Path(args.output) if args.output else out / f"q_{kind}.werrmat"
    dest.parent.mkdir(parents=True, exist_ok=True)
    qp.save_q(dest, q)
    print(f"build-q {kind}: {q.n}x{q.n} -> {dest}")


def _daley_demo(cfg, samples):
    """Residual estimator on a damped linear test system with a known diagonal Q."""
    n = cfg.model.n
    a = -np.eye(n) + 0.3 * (np.roll(np.eye(n), 1, axis=1) - np.roll(np.eye(n), -1, axis=1))
    spec = ModelSpec.linear(a, dt=cfg.model.dt, steps_per_subwindow=cfg.model.steps_per_subwindow,
                            subwindows_per_window=cfg.model.subwindows_per_window)
    q_true = CovarianceMatrix(np.diag(np.linspace(0.5, 2.0, n)))
    from .cycling import stream

    return qp.build_q_daley(spec, q_true, samples, stream(cfg.seed, 99))


def _matrix(path):
    return load_covariance(path)


def cmd_diagnose(args, cfg, out):
    m = args.metric
    if m in ("std", "correlation"):
        _need(args, "q")
        q = _matrix(args.q)
        if m == "std":
            spec = cfg.forecast_spec()
            text = dg.std_profile(q, spec.subwindows_per_window, spec.window_length).to_csv(
                None, Path(args.q).stem, cfg.hash)
        else:
            rows = dg.horizontal_correlation_rows(q, _ints(args.rows))
            text = dg.correlation_rows_csv(rows, None, Path(args.q).stem, cfg.hash)
        _emit(text, args.output)
        return
    _need(args, "run")
    run = load_archive(args.run)
    rid, h = run.run_id, run.config_hash
    if m == "increments":
        mean, rms = dg.increment_stats(run)
        text = dg._write_rows(None, "increments", "state", rid, h, ["index", "mean", "rms"],
                              zip(range(mean.values.size), mean.values, rms.values))
    elif m == "departures":
        stats = dg.departure_stats(run)
        if args.control:
            ctrl = dg.departure_stats(load_archive(args.control))
            text = dg.ratio_table_csv(dg.departure_ratios(stats, ctrl), None, rid, h)
        else:
            text = stats.to_csv(None, rid, h)
    elif m == "skill":
        text = dg.forecast_skill(run, _ints(args.leads), args.kind).to_csv(None, rid, h)
    else:
        ev = dg.eta_variability(run)
        text = ev.table().to_csv(None, rid, h)
    _emit(text, args.output)


def cmd_export(args, cfg, out):
    _emit(matrix_to_csv(read_matrix(args.matrix)), args.output)


def cmd_twin(args, cfg, out):
    from .experiment import run_biased_twin

    res = run_biased_twin(cfg, out / cfg.run_id)
    print("twin: " + ", ".join(f"{k} {v:.1f}s" for k, v in res.timings.items()))


COMMANDS = {
    "truth": cmd_truth,
    "cycle": cmd_cycle,
    "train-ann": cmd_train_ann,
    "build-q": cmd_build_q,
    "diagnose": cmd_diagnose,
    "export": cmd_export,
    "twin": cmd_twin,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = _out_root(args)
        # stderr, so CSV written to stdout stays machine-readable
        sys.stderr.write(f"config_hash={cfg.hash}\n")
        COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"werrlab: error: {exc}\n")
        return 1
    except (WerrError, ValueError, OSError) as exc:
        sys.stderr.write(f"werrlab: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
