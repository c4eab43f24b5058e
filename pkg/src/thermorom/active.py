"""Greedy physics-informed sampling of the parameter domain.

During training, every ``update_every`` epochs a random candidate pool is
scored with a truth-free residual indicator: roll the reduced model out from
the candidate's initial state, decode, and sum the full-order time-stepping
residual over a sparse subset of steps.  The worst candidate gets a fresh
full-order trajectory appended to the training set.  The indicator needs only
the right-hand side of the governing equations, never a reference solution.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .evaluation import rom_rollout
from .integrators import fom_residual
from .systems import SolverError, generate_dataset
from .training import Trainer

logger = logging.getLogger(__name__)


def corner_points(lo, hi):
    """The 2^N corners of a box parameter domain."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    return np.array([c for c in itertools.product(*zip(lo, hi))])


@dataclass
class ActiveConfig:
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    n_additions: int
    update_every: int
    pool_size: int = 16
    stride: int = 10
    method: str = "euler"
    seed: int = 0
    target_indicator: float = None  # stop adding once the worst candidate is below this
    gen_kwargs: dict = field(default_factory=dict)


def error_indicator(ae, model, mu, system, dt, n_steps, stride=10, method="euler"):
    """Summed full-order residual norms along the decoded reduced rollout.

    Divergence of the rollout returns +inf, which forces selection of the
    offending parameter.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    roll = rom_rollout(ae, model, system.initial_state(mu), mu, dt, n_steps, method)
    if roll.diverged or roll.U.shape[0] != n_steps + 1:
        logger.warning("reduced rollout diverged at mu=%s; indicator forced to inf", mu)
        return np.inf
    total = 0.0
    for n in range(stride, n_steps + 1, stride):
        total += fom_residual(roll.U[n], roll.U[n - 1], dt, lambda u: system.rhs(u, mu))
    if not np.isfinite(total):
        return np.inf
    return total


def greedy_select(ae, model, candidates, system, dt, n_steps, stride=10, method="euler"):
    """Index of the candidate with the largest indicator (first on ties)."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise ValueError("empty candidate set")
    values = np.array([error_indicator(ae, model, mu, system, dt, n_steps, stride, method)
                       for mu in candidates])
    return int(np.argmax(values)), values


@dataclass
class ActiveResult:
    train: object      # TrainResult
    sampling: list     # one record per update


def _draw_pool(cfg, update_idx, existing_mus):
    rng = np.random.default_rng([cfg.seed, 101, update_idx])
    lo = np.atleast_1d(np.asarray(cfg.domain_lo, dtype=float))
    hi = np.atleast_1d(np.asarray(cfg.domain_hi, dtype=float))
    pool = []
    while len(pool) < cfg.pool_size:
        cand = lo + (hi - lo) * rng.random(lo.size)
        if existing_mus.size and np.any(np.all(cand == existing_mus, axis=1)):
            continue  # exact repeat of a training point (measure zero, but cheap to guard)
        pool.append(cand)
    return np.array(pool)


def active_train(dataset, ae, model, weights, schedule, cfg, system, out_dir=None):
    """Joint training with on-the-fly greedy sampling.

    ``dataset`` should cover the corners of the parameter domain.  Every
    ``cfg.update_every`` epochs the indicator picks a new parameter from a
    fresh random pool; its full-order trajectory joins the batch pool at the
    next epoch boundary.  Sampling stops at the addition budget or once the
    pool-wide worst indicator drops below ``cfg.target_indicator``.
    """
    trainer = Trainer(dataset, ae, model, weights, schedule, out_dir=out_dir)
    n_steps = dataset.trajectories[0].U.shape[0] - 1
    dt = dataset.dt
    sampling = []
    additions = 0
    total = schedule.total_epochs
    while trainer.epoch < total:
        failure = trainer.run_epochs(min(cfg.update_every, total - trainer.epoch))
        if failure is not None:
            return ActiveResult(failure, sampling)
        if trainer.epoch >= total or additions >= cfg.n_additions:
            continue
        pool = _draw_pool(cfg, len(sampling), trainer.dataset.mus)
        best, values = greedy_select(ae, model, pool, system, dt, n_steps,
                                     cfg.stride, cfg.method)
        selected = None
        if cfg.target_indicator is not None and values[best] < cfg.target_indicator:
            additions = cfg.n_additions  # accuracy target reached; no more additions
        else:
            for idx in np.argsort(-values):
                mu = pool[idx]
                try:
                    new = generate_dataset(system, [mu], **cfg.gen_kwargs)
                except SolverError as err:
                    logger.warning("skipping mu=%s: full-order generation failed (%s)", mu, err)
                    continue
                if not np.isclose(new.dt, dataset.dt) or new.n_state != dataset.n_state:
                    raise ValueError("generated trajectory does not match the training "
                                     "dataset discretization; check gen_kwargs")
                trainer.add_trajectories(new.trajectories)
                selected = mu
                additions += 1
                break
        sampling.append({"update": len(sampling), "epoch": trainer.epoch,
                         "pool": pool.tolist(), "indicators": values.tolist(),
                         "selected": None if selected is None else selected.tolist()})
    result = trainer.run()
    if out_dir:
        _write_sampling_log(os.path.join(out_dir, "sampling.csv"), sampling)
    return ActiveResult(result, sampling)


def _write_sampling_log(path, sampling):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["update", "epoch", "pool", "indicators", "selected"])
        for row in sampling:
            writer.writerow([row["update"], row["epoch"], json.dumps(row["pool"]),
                             json.dumps(row["indicators"]), json.dumps(row["selected"])])
