"""Post-hoc evaluation: error maps, thermodynamic rollouts, latent spectra,
error-bound terms, indicator correlation, and timing.

All routines are pure; none of them renders plots.  Heat-map style outputs
are returned as plain arrays ready for external plotting.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .integrators import integrate


@dataclass
class RomRollout:
    Z: np.ndarray        # (n_kept + 1, d) latent trajectory
    U: np.ndarray        # decoded states, same leading length
    diverged: bool


def rom_rollout(ae, model, u0, mu, dt, n_steps, method="euler"):
    """Encode an initial state, integrate the latent model, decode each step."""
    z0 = ae.encode(np.asarray(u0, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float)) if mu is not None else None

    def field(z, m):
        try:
            return model.vector_field(z, m)
        except FloatingPointError:
            return np.full_like(z, np.nan)

    roll = integrate(method, field, z0, mu, dt, n_steps)
    return RomRollout(roll.states, ae.decode(roll.states), roll.diverged)


def max_relative_error(U_rom, U_truth):
    """max_n ||rom_n - truth_n||_2 / ||truth_n||_2 over snapshots."""
    U_rom = np.asarray(U_rom, dtype=float)
    U_truth = np.asarray(U_truth, dtype=float)
    if U_rom.shape != U_truth.shape:
        raise ValueError(f"trajectory shapes differ: {U_rom.shape} vs {U_truth.shape}")
    norms = np.linalg.norm(U_truth, axis=1)
    keep = norms > 0
    if not np.all(keep):
        warnings.warn(f"skipping {np.sum(~keep)} zero-norm truth snapshots")
    if not np.any(keep):
        raise ValueError("no non-degenerate snapshots to compare")
    errs = np.linalg.norm(U_rom[keep] - U_truth[keep], axis=1) / norms[keep]
    return float(np.max(errs))


def trajectory_error(ae, model, trajectory, dt, method="euler"):
    """Max relative error of the reduced model against one truth trajectory."""
    n_steps = trajectory.U.shape[0] - 1
    roll = rom_rollout(ae, model, trajectory.U[0], trajectory.mu, dt, n_steps, method)
    if roll.diverged or roll.U.shape[0] != trajectory.U.shape[0]:
        return np.inf
    return max_relative_error(roll.U, trajectory.U)


def error_map(ae, model, dataset, training_mus=None, method="euler"):
    """Per-parameter max relative errors over a truth dataset.

    Returns a dict with the parameter grid, per-point errors, their mean, and
    flags marking which grid points were used for training.
    """
    mus = dataset.mus
    errors = np.array([trajectory_error(ae, model, tr, dataset.dt, method)
                       for tr in dataset.trajectories])
    if training_mus is None:
        flags = np.zeros(len(mus), dtype=bool)
    else:
        tm = np.atleast_2d(np.asarray(training_mus, dtype=float))
        flags = np.array([np.any(np.all(np.isclose(mu, tm), axis=1)) for mu in mus])
    finite = errors[np.isfinite(errors)]
    return {"mus": mus, "errors": errors,
            "mean": float(np.mean(finite)) if finite.size else np.inf,
            "max": float(np.max(errors)) if errors.size else np.inf,
            "is_training": flags}


@dataclass
class ThermoSeries:
    t: np.ndarray
    energy: np.ndarray
    entropy: np.ndarray
    entropy_rate: np.ndarray  # grad_S^T M grad_S along the rollout
    diverged: bool


def thermo_rollout(model, z0, mu, dt, n_steps, method="euler"):
    """Latent energy/entropy evolution and the entropy production rate."""
    roll = integrate(method, lambda z, m: model.vector_field(z, m),
                     np.asarray(z0, dtype=float),
                     None if mu is None else np.atleast_1d(mu), dt, n_steps)
    Z = roll.states
    mu_rows = None if model.param_dim == 0 else np.broadcast_to(
        np.atleast_1d(mu), (Z.shape[0], model.param_dim))
    E = model.energy(Z, mu_rows)
    S = model.entropy(Z, mu_rows)
    gS = model.grad_entropy(Z, mu_rows)
    M = model.operator_M(Z, mu_rows)
    rate = np.einsum("bi,bij,bj->b", gS, M, gS)
    return ThermoSeries(dt * np.arange(Z.shape[0]), E, S, rate, roll.diverged)


def latent_spectrum(Z, dt):
    """Per-dimension discrete Fourier magnitudes and spectral centroids.

    Frequencies are in Hz for a snapshot spacing ``dt`` in seconds.  The
    centroid (magnitude-weighted mean frequency) summarizes how much of the
    signal lives at low frequencies.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.ndim != 2 or Z.shape[0] < 4:
        raise ValueError("need a (time, dim) trajectory with at least 4 samples")
    freqs = np.fft.rfftfreq(Z.shape[0], d=dt)
    mags = np.abs(np.fft.rfft(Z, axis=0))
    weight = np.sum(mags, axis=0)
    centroids = np.where(weight > 0, (freqs[:, None] * mags).sum(axis=0) / weight, 0.0)
    return freqs, mags, centroids


def _cumtrapz(values, t):
    out = np.zeros_like(values)
    out[1:] = np.cumsum(0.5 * (values[1:] + values[:-1]) * np.diff(t))
    return out


def bound_terms(ae, model, trajectory, Z):
    """Error-decomposition diagnostics along one trajectory.

    Given truth snapshots with derivatives and a time-aligned latent rollout,
    evaluates by trapezoid quadrature the four cumulative error terms --
    latent integration drift, reconstruction boundary errors, Jacobian
    mismatch, and model mismatch -- along with the measured reduced-model
    error and its ratio to the sum of the terms.
    """
    U, dU, t = trajectory.U, trajectory.dU, trajectory.t
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] != U.shape[0]:
        raise ValueError(f"latent rollout has {Z.shape[0]} steps, trajectory {U.shape[0]}")
    mu = trajectory.mu

    z_enc = ae.encode(U)
    eps_int = _cumtrapz(np.linalg.norm(z_enc - Z, axis=1), t)

    recon = ae.decode(z_enc)
    e_ae = np.linalg.norm(U - recon, axis=1)
    eps_rec = e_ae[0] + e_ae

    jac_gap = np.array([np.linalg.norm(dU[n] - ae.jvp(U[n], dU[n]))
                        for n in range(U.shape[0])])
    eps_jac = _cumtrapz(jac_gap, t)

    mu_rows = None if model.param_dim == 0 else np.broadcast_to(mu, (Z.shape[0], model.param_dim))
    f_r = model.vector_field(Z, mu_rows)
    enc_side = np.array([np.linalg.norm(ae.encoder_jvp(U[n], dU[n]) - f_r[n])
                         for n in range(U.shape[0])])
    dec_side = np.array([np.linalg.norm(dU[n] - ae.decoder_jvp(Z[n], f_r[n]))
                         for n in range(U.shape[0])])
    eps_mod = _cumtrapz(enc_side + dec_side, t)

    error = np.linalg.norm(U - ae.decode(Z), axis=1)
    total = eps_int + eps_rec + eps_jac + eps_mod
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(total > 0, error / total, np.nan)
    return {"t": t, "eps_int": eps_int, "eps_rec": eps_rec, "eps_jac": eps_jac,
            "eps_mod": eps_mod, "error": error, "ratio": ratio}


def correlate(x, y):
    """Pearson and Spearman (rank) correlation coefficients."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ValueError("need two equal-length 1-D series with n >= 3")
    if np.std(x) == 0 or np.std(y) == 0:
        raise ValueError("zero-variance series have no defined correlation")
    pearson = float(np.corrcoef(x, y)[0, 1])
    spearman = float(stats.spearmanr(x, y).statistic)
    return pearson, spearman


def timing_report(ae, model, system, mu, dt, n_steps, method="euler", repeats=5):
    """Median-of-N wall times for the full-order and reduced pipelines.

    Both run in-process on the same hardware; the reduced side covers encode,
    latent rollout, and decode (inference only, no training).
    """
    horizon = dt * n_steps

    def fom():
        t0 = time.perf_counter()
        system.simulate(mu, dt, horizon)
        return time.perf_counter() - t0

    def rom():
        t0 = time.perf_counter()
        rom_rollout(ae, model, system.initial_state(mu), mu, dt, n_steps, method)
        return time.perf_counter() - t0

    fom_times = sorted(fom() for _ in range(repeats))
    rom_times = sorted(rom() for _ in range(repeats))
    fom_s = fom_times[repeats // 2]
    rom_s = rom_times[repeats // 2]
    return {"fom_s": fom_s, "rom_s": rom_s, "speedup": fom_s / rom_s,
            "fom_times": fom_times, "rom_times": rom_times}
