"""The standard biased-twin experiment, end to end.

truth/obs -> strong-constraint control -> Q_pred -> Q_oper (one weak-constraint
bootstrap run) -> emulator trained on the control's increments -> Q_ann ->
weak-constraint run with Q_ann, plus the increment-climatology control Q.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import qpipeline as qp
from .config import ExperimentConfig
from .cycling import generate_truth_and_obs, run_cycle
from .matio import save_covariance
from .neuralerr import save_params

log = logging.getLogger(__name__)


@dataclass
class TwinResults:
    config: ExperimentConfig
    twin: object
    sc: object
    q_pred: object
    q_oper: object
    oper_run: object
    params: object
    history: object
    q_ann: object
    q_incr: object
    wc: object
    timings: dict = field(default_factory=dict)


def run_biased_twin(cfg=None, out=None):
    """Run every stage of the standard experiment; archives go under ``out`` when given."""
    cfg = (cfg or ExperimentConfig()).validate()
    out = None if out is None else Path(out)
    sub = (lambda name: None) if out is None else (lambda name: out / name)
    timings = {}

    def timed(name, fn, *args, **kw):
        t = time.perf_counter()
        res = fn(*args, **kw)
        timings[name] = time.perf_counter() - t
        log.info("%s done in %.1fs", name, timings[name])
        return res

    sc_cfg = cfg.with_(**{"assim.mode": "sc", "run_id": f"{cfg.run_id}-sc"})
    wc_cfg = cfg.with_(**{"assim.mode": "wc", "run_id": f"{cfg.run_id}-wc-ann"})
    oper_cfg = cfg.with_(**{"assim.mode": "wc", "run_id": f"{cfg.run_id}-wc-pred"})

    twin = timed("truth", generate_truth_and_obs, cfg)
    sc = timed("cycle_sc", run_cycle, sc_cfg, twin, None, sub("sc"))
    q_pred = timed("q_pred", qp.build_q_pred_for, cfg, twin)
    q_oper, oper_run = timed("q_oper", qp.build_q_oper, q_pred, oper_cfg, twin, sub("wc-pred"))
    params, history = timed("train_ann", qp.train_emulator, sc)
    q_ann = timed("q_ann", qp.build_q_ann, params, sc, qp.taper_for(cfg))
    q_incr = qp.build_q_increment_climatology(sc, qp.taper_for(cfg))
    wc = timed("cycle_wc", run_cycle, wc_cfg, twin, q_ann, sub("wc-ann"))
    if out is not None:
        for name, q in (("q_pred", q_pred), ("q_oper", q_oper), ("q_ann", q_ann), ("q_incr", q_incr)):
            save_covariance(out / f"{name}.werrmat", q)
        save_params(out / "ann.werrnn", params)
    return TwinResults(cfg, twin, sc, q_pred, q_oper, oper_run, params, history, q_ann, q_incr, wc, timings)
