import csv

import numpy as np
import pytest

from thermorom.datasets import Trajectory, TrajectoryDataset, backward_difference
from thermorom.generic import PGFinn
from thermorom.autoencoder import AutoEncoder, IdentityAutoEncoder
from thermorom.losses import LossWeights
from thermorom.training import (Trainer, TrainResult, TrainSchedule,
                                make_batches, train)


def tiny_dataset(seed=0, n_mu=2, n_t=12, n_u=4):
    rng = np.random.default_rng(seed)
    dt = 0.05
    trajs = []
    for i in range(n_mu):
        t = dt * np.arange(n_t)
        U = np.cumsum(rng.normal(size=(n_t, n_u)) * 0.1, axis=0) + 1.0
        trajs.append(Trajectory(np.array([1.0 + i]), t, U, backward_difference(U, dt)))
    return TrajectoryDataset("synthetic", dt, trajs)


def tiny_setup(seed=0):
    ds = tiny_dataset(seed)
    ae = AutoEncoder.create([4, 3, 2], seed=seed)
    model = PGFinn.create(2, 1, n_skew=2, hidden=(6,), seed=seed + 1)
    weights = LossWeights(lam_rec=0.1, lam_jac=1e-6, lam_mod=1e-4)
    return ds, ae, model, weights


# -- batching ---------------------------------------------------------------------

def test_make_batches_single_batch_when_large():
    batches = make_batches(7, 100, seed=0, epoch=0)
    assert len(batches) == 1
    assert sorted(batches[0]) == list(range(7))


def test_make_batches_deterministic():
    a = make_batches(20, 6, seed=3, epoch=5)
    b = make_batches(20, 6, seed=3, epoch=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_make_batches_counting_oracle():
    batches = make_batches(23, 5, seed=1, epoch=2)
    seen = sorted(np.concatenate(batches).tolist())
    assert seen == list(range(23))


def test_make_batches_rejects_bad_size():
    with pytest.raises(ValueError):
        make_batches(10, 0, seed=0, epoch=0)


def test_batch_size_schedule_phases():
    sched = TrainSchedule(phases=[(2, 4), (3, 2)])
    assert [sched.batch_size_at(e) for e in range(5)] == [4, 4, 2, 2, 2]
    assert sched.total_epochs == 5


# -- training loop -------------------------------------------------------------------

def test_zero_epoch_schedule_returns_inputs():
    ds, ae, model, weights = tiny_setup()
    before = model.TM_net.params.copy()
    res = train(ds, ae, model, weights, TrainSchedule(phases=[(0, 4)]))
    assert res.history == []
    np.testing.assert_array_equal(model.TM_net.params, before)


def test_training_reduces_loss_and_is_deterministic():
    def run():
        ds, ae, model, weights = tiny_setup(seed=4)
        sched = TrainSchedule(phases=[(30, 8)], lr=3e-3, seed=11, checkpoint_every=15)
        res = train(ds, ae, model, weights, sched)
        return res, np.concatenate([ae.encoder.params, model.TM_net.params])

    res1, p1 = run()
    res2, p2 = run()
    np.testing.assert_array_equal(p1, p2)
    assert res1.history[-1]["total"] < res1.history[0]["total"]
    assert not res1.aborted


def test_history_csv_layout(tmp_path):
    ds, ae, model, weights = tiny_setup(seed=5)
    sched = TrainSchedule(phases=[(4, 8)], lr=1e-3, seed=0, checkpoint_every=2)
    train(ds, ae, model, weights, sched, out_dir=str(tmp_path / "run"))
    with open(tmp_path / "run" / "history.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    for key in ("epoch", "L_int", "L_rec", "L_Jac", "L_mod", "total", "lr"):
        assert key in rows[0]
    assert rows[1]["full_loss"] != ""  # checkpoint epoch records the full-set loss
    assert (tmp_path / "run" / "manifest.json").exists()
    assert (tmp_path / "run" / "final" / "model" / "model.json").exists()


def test_checkpoint_resume_reproduces_training(tmp_path):
    ds, ae, model, weights = tiny_setup(seed=6)
    sched = TrainSchedule(phases=[(6, 8)], lr=2e-3, seed=2, checkpoint_every=3)
    out = str(tmp_path / "run")
    res = train(ds, ae, model, weights, sched, out_dir=out)
    full = np.concatenate([res.ae.encoder.params, res.model.TM_net.params])

    ds2 = tiny_dataset(seed=6)
    ae2 = AutoEncoder.create([4, 3, 2], seed=99)  # placeholder, replaced by restore
    model2 = PGFinn.create(2, 1, n_skew=2, hidden=(6,), seed=98)
    trainer = Trainer(ds2, ae2, model2, weights, sched)
    trainer.restore_checkpoint(f"{out}/checkpoints/epoch_000003")
    assert trainer.epoch == 3
    assert trainer.run_epochs(3) is None
    resumed = np.concatenate([trainer.ae.encoder.params, trainer.model.TM_net.params])
    np.testing.assert_array_equal(resumed, full)


def test_nonfinite_loss_aborts_with_last_checkpoint():
    ds, ae, model, weights = tiny_setup(seed=7)
    ds.trajectories[0].U[5, 2] = np.nan
    initial = model.TM_net.params.copy()
    res = train(ds, ae, model, weights, TrainSchedule(phases=[(5, 8)], lr=1e-3, seed=0))
    assert res.aborted
    assert "restored" in res.error
    np.testing.assert_array_equal(model.TM_net.params, initial)


def test_pending_trajectories_join_at_epoch_boundary():
    ds, ae, model, weights = tiny_setup(seed=8)
    sched = TrainSchedule(phases=[(4, 8)], lr=1e-3, seed=0, checkpoint_every=100)
    trainer = Trainer(ds, ae, model, weights, sched)
    n0 = len(trainer.rows)
    trainer.run_epochs(1)
    extra = tiny_dataset(seed=9, n_mu=1).trajectories
    trainer.add_trajectories(extra)
    assert len(trainer.rows) == n0  # not yet absorbed
    trainer.run_epochs(1)
    assert len(trainer.rows) == n0 + extra[0].U.shape[0] - 1


def test_full_loss_matches_single_batch_evaluation():
    ds, ae, model, weights = tiny_setup(seed=10)
    trainer = Trainer(ds, ae, model, weights, TrainSchedule(phases=[(1, 4)], seed=0))
    from thermorom.losses import total_loss
    batch = ds.gather_rows(ds.pair_rows())
    _, parts = total_loss(batch, ae, model, weights)
    assert np.isclose(trainer.full_loss(), parts["total"], rtol=1e-12)
