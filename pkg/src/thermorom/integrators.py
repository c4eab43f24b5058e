"""Explicit time integrators and the full-order time-stepping residual.

Integrators are pure: identical inputs give bit-identical trajectories.  A
non-finite state truncates the rollout and flags it instead of raising, so
callers (e.g. the sampling error indicator) can treat divergence as a signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Rollout:
    states: np.ndarray  # (n_kept + 1, d); n_kept == n_steps unless diverged
    diverged: bool = False


def forward_euler(field, z0, mu, dt, n_steps):
    z = np.asarray(z0, dtype=float)
    out = np.empty((n_steps + 1, z.size))
    out[0] = z
    for n in range(n_steps):
        z = z + dt * field(z, mu)
        if not np.all(np.isfinite(z)):
            return Rollout(out[:n + 1].copy(), diverged=True)
        out[n + 1] = z
    return Rollout(out)


def rk4_step(field, z, mu, dt):
    k1 = field(z, mu)
    k2 = field(z + 0.5 * dt * k1, mu)
    k3 = field(z + 0.5 * dt * k2, mu)
    k4 = field(z + dt * k3, mu)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4(field, z0, mu, dt, n_steps):
    z = np.asarray(z0, dtype=float)
    out = np.empty((n_steps + 1, z.size))
    out[0] = z
    for n in range(n_steps):
        z = rk4_step(field, z, mu, dt)
        if not np.all(np.isfinite(z)):
            return Rollout(out[:n + 1].copy(), diverged=True)
        out[n + 1] = z
    return Rollout(out)


def integrate(method, field, z0, mu, dt, n_steps):
    if method == "euler":
        return forward_euler(field, z0, mu, dt, n_steps)
    if method == "rk4":
        return rk4(field, z0, mu, dt, n_steps)
    raise ValueError(f"unknown integrator {method!r}")


def fom_residual(u_n, u_prev, dt, rhs):
    """l2 norm of the backward-Euler residual u_n - u_prev - dt*f(u_n)."""
    u_n = np.asarray(u_n, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if u_n.shape != u_prev.shape:
        raise ValueError(f"state shapes differ: {u_n.shape} vs {u_prev.shape}")
    return float(np.linalg.norm(u_n - u_prev - dt * rhs(u_n)))
