"""Joint training of the reduction map and the latent model.

One optimizer step consumes one shuffled batch of (trajectory, step) pairs;
shuffling is keyed by (seed, epoch) so runs are bit-reproducible and training
resumed from a checkpoint continues identically.  Structural guarantees of
the latent model are asserted at every checkpoint, and a non-finite loss or
gradient aborts the run with the last good checkpoint restored.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import generic
from .autoencoder import load_autoencoder
from .losses import loss_and_grad, total_loss
from .optim import (NonFiniteGradientError, NonFiniteLossError, OptimState,
                    TrainableSet, opt_step)

HISTORY_FIELDS = ("epoch", "L_int", "L_rec", "L_Jac", "L_mod", "total", "lr", "full_loss")


@dataclass
class TrainSchedule:
    phases: list            # [(epochs, batch_size), ...]
    lr: float = 1e-4
    lr_decay: float = 0.99
    lr_decay_every: int = 2000
    seed: int = 0
    checkpoint_every: int = 500

    @property
    def total_epochs(self):
        return sum(e for e, _ in self.phases)

    def batch_size_at(self, epoch):
        passed = 0
        for epochs, bs in self.phases:
            passed += epochs
            if epoch < passed:
                return bs
        return self.phases[-1][1]


def make_batches(n_pairs, batch_size, seed, epoch):
    """Uniformly shuffled index batches; each pair appears exactly once."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n_pairs)
    return [perm[i:i + batch_size] for i in range(0, n_pairs, batch_size)]


@dataclass
class TrainResult:
    ae: object
    model: object
    history: list
    aborted: bool = False
    error: str = None


class Trainer:
    def __init__(self, dataset, ae, model, weights, schedule, out_dir=None):
        self.dataset = dataset
        self.ae = ae
        self.model = model
        self.weights = weights
        self.schedule = schedule
        self.out_dir = out_dir
        self.tset = TrainableSet([("ae", ae), ("model", model)])
        self.opt = OptimState.fresh(self.tset.size, lr=schedule.lr,
                                    decay=schedule.lr_decay,
                                    decay_every=schedule.lr_decay_every)
        self.epoch = 0
        self.history = []
        self.rows = dataset.pair_rows()
        self._pending = []
        self._last_good = (self.tset.flat.copy(), self.opt, 0)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self._history_path = os.path.join(out_dir, "history.csv")
            with open(self._history_path, "w", newline="") as f:
                csv.writer(f).writerow(HISTORY_FIELDS)

    # -- data growth (active learning feeds new trajectories mid-run) -------

    def add_trajectories(self, trajectories):
        """New trajectories join the batch pool at the next epoch boundary."""
        self._pending.extend(trajectories)

    def _absorb_pending(self):
        if self._pending:
            self.dataset.trajectories.extend(self._pending)
            self._pending = []
            self.rows = self.dataset.pair_rows()

    # -- evaluation helpers ---------------------------------------------------

    def full_loss(self):
        """Total loss over every pair in the training set."""
        batch = self.dataset.gather_rows(self.rows)
        _, parts = total_loss(batch, self.ae, self.model, self.weights)
        return parts["total"]

    def _assert_structure(self):
        """Check the latent model guarantees on encoded training states."""
        rng = np.random.default_rng([self.schedule.seed, self.epoch, 7])
        take = min(8, len(self.rows))
        sample = self.dataset.gather_rows(
            self.rows[rng.choice(len(self.rows), size=take, replace=False)])
        for i in range(take):
            z = self.ae.encode(sample.u[i])
            rep = generic.structure_report(self.model, z, sample.mu[i])
            ok = (rep["skew"] <= 1e-12 and rep["sym"] <= 1e-12
                  and rep["degeneracy_L"] <= 1e-10 and rep["degeneracy_M"] <= 1e-10
                  and rep["psd"] >= -1e-12)
            if not ok:
                raise AssertionError(f"structural guarantee violated at epoch {self.epoch}: {rep}")

    # -- checkpointing -----------------------------------------------------------

    def _checkpoint_dir(self, epoch):
        return os.path.join(self.out_dir, "checkpoints", f"epoch_{epoch:06d}")

    def checkpoint(self):
        self._assert_structure()
        self._last_good = (self.tset.flat.copy(), self.opt, self.epoch)
        if not self.out_dir:
            return
        path = self._checkpoint_dir(self.epoch)
        counters = {"epoch": self.epoch, "opt_step": self.opt.step}
        self.ae.save(os.path.join(path, "autoencoder"), counters=counters)
        generic.save_model(self.model, os.path.join(path, "model"), counters=counters)
        np.savez(os.path.join(path, "optimizer.npz"), step=self.opt.step,
                 m=self.opt.m, v=self.opt.v, epoch=self.epoch)

    def restore_checkpoint(self, path):
        """Resume: load parameters and optimizer state saved by checkpoint()."""
        ae = load_autoencoder(os.path.join(path, "autoencoder"))
        model = generic.load_model(os.path.join(path, "model"))
        blob = np.load(os.path.join(path, "optimizer.npz"))
        self.ae = ae
        self.model = model
        self.tset = TrainableSet([("ae", ae), ("model", model)])
        self.opt = replace(
            OptimState.fresh(self.tset.size, lr=self.schedule.lr,
                             decay=self.schedule.lr_decay,
                             decay_every=self.schedule.lr_decay_every),
            step=int(blob["step"]), m=blob["m"], v=blob["v"])
        self.epoch = int(blob["epoch"])
        self._last_good = (self.tset.flat.copy(), self.opt, self.epoch)

    def _record(self, row):
        self.history.append(row)
        if self.out_dir:
            with open(self._history_path, "a", newline="") as f:
                csv.writer(f).writerow([row.get(k, "") for k in HISTORY_FIELDS])

    # -- the loop -------------------------------------------------------------------

    def _one_epoch(self):
        self._absorb_pending()
        bs = self.schedule.batch_size_at(self.epoch)
        batches = make_batches(len(self.rows), bs, self.schedule.seed, self.epoch)
        sums = {"int": 0.0, "rec": 0.0, "jac": 0.0, "mod": 0.0, "total": 0.0}
        for idx in batches:
            batch = self.dataset.gather_rows(self.rows[idx])
            _, grad, parts = loss_and_grad(batch, self.ae, self.model, self.weights, self.tset)
            new_flat, self.opt = opt_step(self.opt, self.tset.flat, grad, self.epoch)
            self.tset.assign(new_flat)
            for k in sums:
                sums[k] += parts[k]
        row = {"epoch": self.epoch, "L_int": sums["int"], "L_rec": sums["rec"],
               "L_Jac": sums["jac"], "L_mod": sums["mod"], "total": sums["total"],
               "lr": self.opt.effective_lr(self.epoch)}
        self.epoch += 1
        if self.epoch % self.schedule.checkpoint_every == 0 or self.epoch == self.schedule.total_epochs:
            self.checkpoint()
            row["full_loss"] = self.full_loss()
        self._record(row)

    def run_epochs(self, n):
        """Advance n epochs; on a non-finite loss/gradient restore the last
        good checkpoint and stop."""
        target = min(self.epoch + n, self.schedule.total_epochs)
        while self.epoch < target:
            try:
                self._one_epoch()
            except (NonFiniteLossError, NonFiniteGradientError) as err:
                flat, opt, epoch = self._last_good
                self.tset.assign(flat)
                self.opt = opt
                return TrainResult(self.ae, self.model, self.history, aborted=True,
                                   error=f"{err} (restored epoch-{epoch} checkpoint)")
        return None

    def run(self):
        failure = self.run_epochs(self.schedule.total_epochs - self.epoch)
        if failure is not None:
            return failure
        if self.out_dir:
            final = os.path.join(self.out_dir, "final")
            self.ae.save(os.path.join(final, "autoencoder"))
            generic.save_model(self.model, os.path.join(final, "model"))
            with open(os.path.join(self.out_dir, "manifest.json"), "w") as f:
                json.dump({"epochs": self.epoch, "n_trainable": int(self.tset.size),
                           "pairs": len(self.rows),
                           "mus": [tr.mu.tolist() for tr in self.dataset.trajectories]},
                          f, indent=2)
        return TrainResult(self.ae, self.model, self.history)


def train(dataset, ae, model, weights, schedule, out_dir=None):
    """Train jointly per the schedule; returns the trained pair and history."""
    if schedule.total_epochs == 0:
        return TrainResult(ae, model, [])
    return Trainer(dataset, ae, model, weights, schedule, out_dir=out_dir).run()
