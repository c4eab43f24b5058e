"""Full-order reference models and dataset generation.

Three built-in systems:

* two ideal gas containers separated by a movable, heat-conducting wall,
  state (q, p, S1, S2), with the ideal-gas closure
  ``E_i = (exp(S_i)/V_i)^(2/3)`` and ``T_i = (2/3) E_i`` (unit particle-count
  and entropy constants);
* a two-mass thermo-mechanical system with damping and heat exchange,
  state (q1, q2, p1, p2, S1, S2), with ``E_i = c_i S_i`` and ``T_i = c_i``;
* the 1D inviscid Burgers equation on [-3, 3) with periodic boundaries,
  first-order upwind in space and backward Euler in time (Newton on the
  time-stepping residual with the exact bidiagonal-plus-corner Jacobian).

Both ODE systems conserve their total energy exactly and produce entropy:
for the gas containers ``dS/dt = alpha (1/T1 - 1/T2)^2 >= 0``; the two-mass
system dissipates kinetic energy into heat at rate ``alpha (v1 - v2)^2``.

Dataset generation integrates the full-order model on a fine grid (RK4 for
the ODE systems, backward Euler for Burgers), subsamples to the requested
shape, and attaches backward-difference derivatives computed on the
subsampled grid.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import spsolve

from .datasets import Trajectory, TrajectoryDataset, backward_difference
from .generic import KnownScalar
from .integrators import rk4


class DomainError(ValueError):
    """State left the system's admissible domain."""


class SolverError(RuntimeError):
    """Newton iteration failed to converge."""


# ---------------------------------------------------------------------------
# two gas containers

GAS_INITIAL_STATE = np.array([0.87, 0.44, 1.00, 1.60])


@dataclass
class GasContainersParams:
    alpha: float = 10.0  # heat-exchange coefficient
    m: float = 1.0       # wall mass

    def __post_init__(self):
        if self.alpha <= 0 or self.m <= 0:
            raise ValueError("gas containers need alpha > 0 and m > 0")


def gas_internal_energies(q, S1, S2):
    """Subsystem energies from entropy and volume; V1 = q, V2 = 2 - q.

    Outside the admissible 0 < q < 2 the result is nan, which downstream
    rollout machinery treats as divergence."""
    with np.errstate(invalid="ignore", divide="ignore"):
        E1 = (np.exp(S1) / q) ** (2.0 / 3.0)
        E2 = (np.exp(S2) / (2.0 - q)) ** (2.0 / 3.0)
    return E1, E2


def gas_rhs(state, params):
    state = np.asarray(state, dtype=float)
    q, p, S1, S2 = state
    if not 0.0 < q < 2.0:
        raise DomainError(f"wall position q={q} outside (0, 2)")
    E1, E2 = gas_internal_energies(q, S1, S2)
    T1, T2 = (2.0 / 3.0) * E1, (2.0 / 3.0) * E2
    a = params.alpha
    return np.array([
        p / params.m,
        (2.0 / 3.0) * (E1 / q - E2 / (2.0 - q)),
        (a / T1) * (1.0 / T1 - 1.0 / T2),
        (a / T2) * (1.0 / T2 - 1.0 / T1),
    ])


def gas_energy_entropy(state, params):
    q, p, S1, S2 = np.asarray(state, dtype=float)
    E1, E2 = gas_internal_energies(q, S1, S2)
    return p * p / (2.0 * params.m) + E1 + E2, S1 + S2


def gas_known_functions(m=1.0):
    """Closed-form (E, S) with analytic gradients, batched over rows."""

    def energy(z):
        z = np.atleast_2d(z)
        E1, E2 = gas_internal_energies(z[:, 0], z[:, 2], z[:, 3])
        return z[:, 1] ** 2 / (2.0 * m) + E1 + E2

    def grad_energy(z):
        z = np.atleast_2d(z)
        q = z[:, 0]
        E1, E2 = gas_internal_energies(q, z[:, 2], z[:, 3])
        g = np.empty_like(z)
        g[:, 0] = -(2.0 / 3.0) * E1 / q + (2.0 / 3.0) * E2 / (2.0 - q)
        g[:, 1] = z[:, 1] / m
        g[:, 2] = (2.0 / 3.0) * E1
        g[:, 3] = (2.0 / 3.0) * E2
        return g

    def entropy(z):
        z = np.atleast_2d(z)
        return z[:, 2] + z[:, 3]

    def grad_entropy(z):
        z = np.atleast_2d(z)
        g = np.zeros_like(z)
        g[:, 2] = 1.0
        g[:, 3] = 1.0
        return g

    return (KnownScalar("gas_energy", energy, grad_energy),
            KnownScalar("gas_entropy", entropy, grad_entropy))


# ---------------------------------------------------------------------------
# two-mass thermo-mechanical system

THERMO_MASS_INITIAL_STATE = np.array([4.98, 0.04, 0.0, 9.96, 1.93, 1.92])


@dataclass
class ThermoMassParams:
    alpha: float = 0.5  # damping coefficient
    k: float = 10.0     # spring constant
    beta: float = 1.0   # heat conductivity (the beta terms vanish for c1 = c2)

    def __post_init__(self):
        if self.alpha < 0 or self.k <= 0 or self.beta < 0:
            raise ValueError("two-mass system needs alpha >= 0, k > 0, beta >= 0")


def thermo_mass_rhs(state, params):
    q1, q2, p1, p2, S1, S2 = np.asarray(state, dtype=float)
    # m1 = m2 = c1 = c2 = 1, so T1 = T2 = 1
    T1 = T2 = 1.0
    dv = p1 - p2
    a, k, b = params.alpha, params.k, params.beta
    return np.array([
        p1,
        p2,
        -k * (q1 - q2) - a * dv,
        -k * (q2 - q1) + a * dv,
        (a / (2.0 * T1)) * dv * dv + b * (1.0 / T2 - 1.0 / T1),
        (a / (2.0 * T2)) * dv * dv + b * (1.0 / T1 - 1.0 / T2),
    ])


def thermo_mass_energy_entropy(state, params):
    q1, q2, p1, p2, S1, S2 = np.asarray(state, dtype=float)
    # spring potential k/2 (q1 - q2)^2, consistent with the force -k(q1 - q2)
    E = 0.5 * (p1 * p1 + p2 * p2) + 0.5 * params.k * (q1 - q2) ** 2 + S1 + S2
    return E, S1 + S2


def thermo_mass_known_functions(k=10.0):
    def energy(z):
        z = np.atleast_2d(z)
        return (0.5 * (z[:, 2] ** 2 + z[:, 3] ** 2)
                + 0.5 * k * (z[:, 0] - z[:, 1]) ** 2 + z[:, 4] + z[:, 5])

    def grad_energy(z):
        z = np.atleast_2d(z)
        g = np.empty_like(z)
        dq = z[:, 0] - z[:, 1]
        g[:, 0] = k * dq
        g[:, 1] = -k * dq
        g[:, 2] = z[:, 2]
        g[:, 3] = z[:, 3]
        g[:, 4] = 1.0
        g[:, 5] = 1.0
        return g

    def entropy(z):
        z = np.atleast_2d(z)
        return z[:, 4] + z[:, 5]

    def grad_entropy(z):
        z = np.atleast_2d(z)
        g = np.zeros_like(z)
        g[:, 4] = 1.0
        g[:, 5] = 1.0
        return g

    return (KnownScalar("thermo_mass_energy", energy, grad_energy),
            KnownScalar("thermo_mass_entropy", entropy, grad_entropy))


def system_energy_entropy(tag, state, params):
    if tag == "gas_containers":
        return gas_energy_entropy(state, params)
    if tag == "thermo_mass":
        return thermo_mass_energy_entropy(state, params)
    raise ValueError(f"unknown system tag {tag!r}")


def resolve_known(tag_info):
    """Rebuild known-(E, S) closures from a serializable tag."""
    system = tag_info["system"]
    params = tag_info.get("params", {})
    if system == "gas_containers":
        return gas_known_functions(**params)
    if system == "thermo_mass":
        return thermo_mass_known_functions(**params)
    raise ValueError(f"no known energy/entropy functions for system {system!r}")


# ---------------------------------------------------------------------------
# 1D inviscid Burgers


def burgers_grid(n_x, x_lo=-3.0, x_hi=3.0):
    # periodic: left-closed, right endpoint identified with the left
    return x_lo + (x_hi - x_lo) * np.arange(n_x) / n_x


def burgers_initial(mu, grid):
    a, w = float(mu[0]), float(mu[1])
    if w <= 0 or a <= 0:
        raise ValueError("pulse needs a > 0 and w > 0")
    return a * np.exp(-grid ** 2 / (2.0 * w * w))


def burgers_rhs(u, dx):
    """First-order upwind flux, valid for u >= 0, with periodic wrap."""
    return -u * (u - np.roll(u, 1)) / dx


_NEWTON_INDEX_CACHE = {}


def _newton_indices(n):
    if n not in _NEWTON_INDEX_CACHE:
        i = np.arange(n)
        rows = np.concatenate([i, i])
        cols = np.concatenate([i, (i - 1) % n])
        _NEWTON_INDEX_CACHE[n] = (rows, cols)
    return _NEWTON_INDEX_CACHE[n]


def backward_euler_solve(u_prev, dt, dx, tol=1e-10, max_iter=20):
    """One implicit step of the upwind semi-discretization.

    Newton iteration on ``r(u) = u - u_prev - dt f(u)`` with the analytic
    bidiagonal-plus-corner Jacobian; converges when ||r||_2 <= tol.
    """
    u_prev = np.asarray(u_prev, dtype=float)
    n = u_prev.size
    rows, cols = _newton_indices(n)
    u = u_prev.copy()
    res_norm = np.inf
    for _ in range(max_iter):
        r = u - u_prev - dt * burgers_rhs(u, dx)
        res_norm = np.linalg.norm(r)
        if res_norm <= tol:
            return u
        u_m1 = np.roll(u, 1)
        diag = 1.0 + dt * (2.0 * u - u_m1) / dx
        sub = -dt * u / dx
        J = csc_matrix((np.concatenate([diag, sub]), (rows, cols)), shape=(n, n))
        u = u - spsolve(J, r)
    raise SolverError(f"Newton stalled at ||r|| = {res_norm:.3e} after {max_iter} iterations")


# ---------------------------------------------------------------------------
# system adapters


class GasContainersSystem:
    tag = "gas_containers"
    n_state = 4
    mu_dim = 1
    default_dt = 1e-3
    default_horizon = 8.0
    default_keep = (40, 1)

    def __init__(self, m=1.0, initial_state=None):
        self.m = m
        self._ic = GAS_INITIAL_STATE if initial_state is None else np.asarray(initial_state, float)

    def params_for(self, mu):
        return GasContainersParams(alpha=float(np.atleast_1d(mu)[0]), m=self.m)

    def initial_state(self, mu):
        return self._ic.copy()

    def rhs(self, u, mu):
        return gas_rhs(u, self.params_for(mu))

    def simulate(self, mu, dt, horizon):
        n_steps = int(round(horizon / dt))
        roll = rk4(self.rhs, self.initial_state(mu), np.atleast_1d(mu), dt, n_steps)
        if roll.diverged:
            raise SolverError(f"gas containers reference run diverged at mu={mu}")
        return dt * np.arange(n_steps + 1), roll.states

    def known_functions(self):
        return ({"system": self.tag, "params": {"m": self.m}},
                *gas_known_functions(self.m))


class ThermoMassSystem:
    tag = "thermo_mass"
    n_state = 6
    mu_dim = 1
    default_dt = 1e-3
    default_horizon = 10.0
    default_keep = (50, 1)

    def __init__(self, k=10.0, beta=1.0, initial_state=None):
        self.k = k
        self.beta = beta
        self._ic = (THERMO_MASS_INITIAL_STATE if initial_state is None
                    else np.asarray(initial_state, float))

    def params_for(self, mu):
        return ThermoMassParams(alpha=float(np.atleast_1d(mu)[0]), k=self.k, beta=self.beta)

    def initial_state(self, mu):
        return self._ic.copy()

    def rhs(self, u, mu):
        return thermo_mass_rhs(u, self.params_for(mu))

    def simulate(self, mu, dt, horizon):
        n_steps = int(round(horizon / dt))
        roll = rk4(self.rhs, self.initial_state(mu), np.atleast_1d(mu), dt, n_steps)
        if roll.diverged:
            raise SolverError(f"two-mass reference run diverged at mu={mu}")
        return dt * np.arange(n_steps + 1), roll.states

    def known_functions(self):
        return ({"system": self.tag, "params": {"k": self.k}},
                *thermo_mass_known_functions(self.k))


class BurgersSystem:
    tag = "burgers"
    mu_dim = 2
    default_dt = 1e-3
    default_horizon = 1.0
    default_keep = (5, 5)

    def __init__(self, n_x=1000, x_lo=-3.0, x_hi=3.0):
        self.n_x = n_x
        self.grid = burgers_grid(n_x, x_lo, x_hi)
        self.dx = (x_hi - x_lo) / n_x

    @property
    def n_state(self):
        return self.n_x

    def initial_state(self, mu):
        return burgers_initial(np.atleast_1d(mu), self.grid)

    def rhs(self, u, mu=None):
        return burgers_rhs(u, self.dx)

    def simulate(self, mu, dt, horizon):
        n_steps = int(round(horizon / dt))
        U = np.empty((n_steps + 1, self.n_x))
        U[0] = self.initial_state(mu)
        for n in range(n_steps):
            U[n + 1] = backward_euler_solve(U[n], dt, self.dx)
        return dt * np.arange(n_steps + 1), U


def get_system(tag, **kwargs):
    for cls in (GasContainersSystem, ThermoMassSystem, BurgersSystem):
        if cls.tag == tag:
            return cls(**kwargs)
    raise ValueError(f"unknown system tag {tag!r}")


# ---------------------------------------------------------------------------
# dataset generation


def generate_dataset(system, mus, dt=None, horizon=None, keep_every_t=None,
                     keep_every_x=None, jobs=1, provenance=None):
    """Integrate the full-order model per parameter value and subsample.

    ``system`` is an adapter instance or a tag string.  Derivatives are
    backward differences on the subsampled grid, so the dataset invariants
    ``dU[n] == (U[n] - U[n-1]) / dt`` hold exactly for n >= 1.
    """
    if isinstance(system, str):
        system = get_system(system)
    dt = system.default_dt if dt is None else dt
    horizon = system.default_horizon if horizon is None else horizon
    keep_t = system.default_keep[0] if keep_every_t is None else keep_every_t
    keep_x = system.default_keep[1] if keep_every_x is None else keep_every_x
    mus = [np.atleast_1d(np.asarray(m, dtype=float)) for m in mus]

    def one(mu):
        t, U = system.simulate(mu, dt, horizon)
        t_sub = t[::keep_t]
        U_sub = U[::keep_t, ::keep_x]
        dt_sub = dt * keep_t
        return Trajectory(mu, t_sub, U_sub, backward_difference(U_sub, dt_sub))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trajectories = list(pool.map(one, mus))
    else:
        trajectories = [one(mu) for mu in mus]

    info = {"fine_dt": dt, "horizon": horizon,
            "keep_every_t": keep_t, "keep_every_x": keep_x}
    info.update(provenance or {})
    return TrajectoryDataset(system.tag, dt * keep_t, trajectories, info)


def known_energy_entropy(tag, **params):
    """Convenience wrapper over :func:`resolve_known`."""
    return resolve_known({"system": tag, "params": params})
