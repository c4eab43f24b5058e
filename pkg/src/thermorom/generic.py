"""Parametric GENERIC surrogate for latent dynamics.

The latent vector field is ``dz/dt = L(z, mu) grad_E + M(z, mu) grad_S`` with

* scalar networks (or supplied closed-form functions) for the total energy E
  and entropy S,
* ``L = Q_S^T B_L Q_S`` where row j of ``Q_S`` is ``(S_j grad_S)^T`` built
  from trainable constant skew matrices ``S_j = W_j - W_j^T``, and
  ``B_L = T_L^T - T_L`` from a triangular network,
* ``M = Q_E^T B_M Q_E`` with its own skew basis and ``B_M = T_M^T T_M``.

By construction L is skew-symmetric, M is symmetric positive semi-definite,
and the degeneracies ``L grad_S = 0`` and ``M grad_E = 0`` hold to round-off
for every parameter value, which makes energy exactly conserved and entropy
non-decreasing along exact trajectories of the field.

System parameters ``mu`` enter the scalar and triangular networks as extra
inputs (optionally rescaled to [-1, 1] from a stated domain); the skew bases
are parameter-independent.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import nets
from .nets import DenseNet, DimensionError

_TRI_BASIS_CACHE = {}


def tri_basis(k, strict):
    """Constant basis tensors scattering a flat vector into (strictly) upper
    triangular k x k matrices."""
    key = (k, strict)
    if key not in _TRI_BASIS_CACHE:
        rows, cols = np.triu_indices(k, 1 if strict else 0)
        basis = np.zeros((len(rows), k, k))
        basis[np.arange(len(rows)), rows, cols] = 1.0
        _TRI_BASIS_CACHE[key] = basis
    return _TRI_BASIS_CACHE[key]


@dataclass
class KnownScalar:
    """Closed-form scalar function of the latent state with analytic gradient.

    Used to embed prior knowledge of the energy/entropy instead of learning
    them; both callables are vectorized over a leading batch axis.
    """
    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


class PGFinn:
    """The four learned objects {E, S, L, M} with their mu-conditioning."""

    def __init__(self, latent_dim, param_dim, n_skew, E_part, S_part,
                 TL_net, TM_net, skew_L, skew_M, mu_shift=None, mu_scale=None,
                 known_tag=None):
        self.latent_dim = latent_dim
        self.param_dim = param_dim
        self.n_skew = n_skew
        self.E_part = E_part
        self.S_part = S_part
        self.TL_net = TL_net  # None when n_skew == 1 (no strict upper entries)
        self.TM_net = TM_net
        self.skew_L = skew_L  # raw (K, d, d); realized as W - W^T
        self.skew_M = skew_M
        self.mu_shift = np.zeros(param_dim) if mu_shift is None else np.asarray(mu_shift, float)
        self.mu_scale = np.ones(param_dim) if mu_scale is None else np.asarray(mu_scale, float)
        self.known_tag = known_tag

    @classmethod
    def create(cls, latent_dim, param_dim, n_skew=None, hidden=(40, 40, 40, 40),
               activation="tanh", seed=0, known=None, mu_range=None):
        """Fresh model with Glorot-initialized networks.

        ``known`` may be a ``(tag, KnownScalar_E, KnownScalar_S)`` triple to
        embed prior energy/entropy.  ``mu_range`` is an optional (lo, hi) pair
        of length-param_dim arrays; parameters are affinely mapped to [-1, 1]
        before entering any network.
        """
        d = latent_dim
        k = d if n_skew is None else n_skew
        rng = np.random.default_rng(seed)
        n_in = d + param_dim
        if known is None:
            tag = None
            e_part = DenseNet([n_in, *hidden, 1], activation,
                              nets.glorot_params([n_in, *hidden, 1], rng))
            s_part = DenseNet([n_in, *hidden, 1], activation,
                              nets.glorot_params([n_in, *hidden, 1], rng))
        else:
            tag, e_part, s_part = known
        n_strict = k * (k - 1) // 2
        tl = None
        if n_strict > 0:
            tl = DenseNet([n_in, *hidden, n_strict], activation,
                          nets.glorot_params([n_in, *hidden, n_strict], rng))
        n_full = k * (k + 1) // 2
        tm = DenseNet([n_in, *hidden, n_full], activation,
                      nets.glorot_params([n_in, *hidden, n_full], rng))
        skew_l = rng.normal(size=(k, d, d)) / np.sqrt(d)
        skew_m = rng.normal(size=(k, d, d)) / np.sqrt(d)
        mu_shift, mu_scale = None, None
        if mu_range is not None:
            lo = np.asarray(mu_range[0], float)
            hi = np.asarray(mu_range[1], float)
            mu_shift = 0.5 * (lo + hi)
            mu_scale = 2.0 / (hi - lo)
        return cls(d, param_dim, k, e_part, s_part, tl, tm, skew_l, skew_m,
                   mu_shift, mu_scale, known_tag=tag)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def has_known_functions(self):
        return isinstance(self.E_part, KnownScalar)

    def trainables(self):
        """Named flat parameter blocks, in a fixed order."""
        out = []
        if not self.has_known_functions:
            out.append(("E", self.E_part.params))
            out.append(("S", self.S_part.params))
        if self.TL_net is not None:
            out.append(("TL", self.TL_net.params))
        out.append(("TM", self.TM_net.params))
        out.append(("skew_L", self.skew_L.reshape(-1)))
        out.append(("skew_M", self.skew_M.reshape(-1)))
        return out

    def rebind(self, name, array):
        """Point a trainable block at new storage (used for joint training)."""
        if name == "E":
            self.E_part.params = array
        elif name == "S":
            self.S_part.params = array
        elif name == "TL":
            self.TL_net.params = array
        elif name == "TM":
            self.TM_net.params = array
        elif name == "skew_L":
            self.skew_L = array.reshape(self.skew_L.shape)
        elif name == "skew_M":
            self.skew_M = array.reshape(self.skew_M.shape)
        else:
            raise KeyError(name)

    # -- evaluation ------------------------------------------------------------

    def _batchify(self, z, mu):
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        if z.shape[1] != self.latent_dim:
            raise DimensionError(f"latent state has width {z.shape[1]}, model has d={self.latent_dim}")
        if self.param_dim == 0:
            mu = np.zeros((z.shape[0], 0))
        else:
            mu = np.asarray(mu, dtype=float)
            if mu.ndim == 1:
                mu = np.broadcast_to(mu, (z.shape[0], mu.shape[0]))
            if mu.shape[1] != self.param_dim:
                raise DimensionError(f"parameter has width {mu.shape[1]}, model expects {self.param_dim}")
        return z, mu, single

    def _net_input(self, z, mu):
        if self.param_dim == 0:
            return z
        return np.concatenate([z, (mu - self.mu_shift) * self.mu_scale], axis=1)

    def energy(self, z, mu=None):
        z, mu, single = self._batchify(z, mu)
        if self.has_known_functions:
            e = self.E_part.value(z)
        else:
            e = self.E_part.forward(self._net_input(z, mu))[:, 0]
        return float(e[0]) if single else e

    def entropy(self, z, mu=None):
        z, mu, single = self._batchify(z, mu)
        if self.has_known_functions:
            s = self.S_part.value(z)
        else:
            s = self.S_part.forward(self._net_input(z, mu))[:, 0]
        return float(s[0]) if single else s

    def grad_energy(self, z, mu=None):
        z, mu, single = self._batchify(z, mu)
        if self.has_known_functions:
            g = self.E_part.grad(z)
        else:
            g = self.E_part.grad_input(self._net_input(z, mu))[:, :self.latent_dim]
        return g[0] if single else g

    def grad_entropy(self, z, mu=None):
        z, mu, single = self._batchify(z, mu)
        if self.has_known_functions:
            g = self.S_part.grad(z)
        else:
            g = self.S_part.grad_input(self._net_input(z, mu))[:, :self.latent_dim]
        return g[0] if single else g

    def realized_skew(self, which):
        raw = self.skew_L if which == "for_L" else self.skew_M
        return raw - np.swapaxes(raw, 1, 2)

    def assemble_Q(self, which, z, mu=None):
        """K x d matrix whose j-th row is (S_j grad_G)^T; G = S for L, E for M."""
        if which not in ("for_L", "for_M"):
            raise ValueError("which must be 'for_L' or 'for_M'")
        g = self.grad_entropy(z, mu) if which == "for_L" else self.grad_energy(z, mu)
        skew = self.realized_skew(which)
        if g.ndim == 1:
            return np.einsum("kij,j->ki", skew, g)
        return np.einsum("kij,bj->bki", skew, g)

    def _tri_L(self, x):
        k = self.n_skew
        if self.TL_net is None:
            return np.zeros((x.shape[0], k, k))
        return np.einsum("be,ekl->bkl", self.TL_net.forward(x), tri_basis(k, True))

    def _tri_M(self, x):
        return np.einsum("be,ekl->bkl", self.TM_net.forward(x), tri_basis(self.n_skew, False))

    def operator_L(self, z, mu=None):
        z, mu, single = self._batchify(z, mu)
        Q = self.assemble_Q("for_L", z if not single else z[0], mu if not single else mu[0])
        if single:
            Q = Q[None]
        T = self._tri_L(self._net_input(z, mu))
        B = np.swapaxes(T, 1, 2) - T
        L = np.einsum("bki,bkl,blj->bij", Q, B, Q)
        return L[0] if single else L

    def operator_M(self, z, mu=None):
        z, mu, single = self._batchify(z, mu)
        Q = self.assemble_Q("for_M", z if not single else z[0], mu if not single else mu[0])
        if single:
            Q = Q[None]
        T = self._tri_M(self._net_input(z, mu))
        B = np.einsum("bik,bil->bkl", T, T)
        M = np.einsum("bki,bkl,blj->bij", Q, B, Q)
        return M[0] if single else M

    def vector_field(self, z, mu=None):
        """Latent time derivative L grad_E + M grad_S (autonomous)."""
        zb, mub, single = self._batchify(z, mu)
        gE = self.grad_energy(zb, mub)
        gS = self.grad_entropy(zb, mub)
        x = self._net_input(zb, mub)
        skew_l = self.realized_skew("for_L")
        skew_m = self.realized_skew("for_M")
        Qs = np.einsum("kij,bj->bki", skew_l, gS)
        Qe = np.einsum("kij,bj->bki", skew_m, gE)
        TL = self._tri_L(x)
        BL = np.swapaxes(TL, 1, 2) - TL
        TM = self._tri_M(x)
        BM = np.einsum("bik,bil->bkl", TM, TM)
        psi = (np.einsum("bki,bk->bi", Qs, np.einsum("bkl,bl->bk", BL,
                         np.einsum("bkj,bj->bk", Qs, gE)))
               + np.einsum("bki,bk->bi", Qe, np.einsum("bkl,bl->bk", BM,
                           np.einsum("bkj,bj->bk", Qe, gS))))
        if not np.all(np.isfinite(psi)):
            raise FloatingPointError("non-finite latent vector field")
        return psi[0] if single else psi

    # -- differentiable graph ---------------------------------------------------

    def field_nodes(self, z, mu_values, slots):
        """The vector field as an autodiff graph over a batch.

        ``z``: (B, d) Node or ndarray; ``mu_values``: (B, param_dim) ndarray
        (parameters are never trainable); ``slots``: dict mapping trainable
        block names (see :meth:`trainables`) to Nodes; missing entries fall
        back to the stored arrays.

        With known energy/entropy functions the latent state must be constant
        (identity or frozen encoder): their gradients enter the graph as
        constants, which would silently drop curvature terms otherwise.
        """
        d = self.latent_dim
        k = self.n_skew
        B = np.shape(ad.value_of(z))[0]
        if self.param_dim == 0:
            x = z
        else:
            mu_in = (np.asarray(mu_values, float) - self.mu_shift) * self.mu_scale
            x = ad.concat([z, mu_in], axis=1)

        if self.has_known_functions:
            if isinstance(z, ad.Node):
                raise ValueError(
                    "known energy/entropy functions require a constant latent state "
                    "(identity or frozen encoder)")
            gE = self.E_part.grad(ad.value_of(z))
            gS = self.S_part.grad(ad.value_of(z))
        else:
            _, gE_full = nets.mlp_value_and_input_grad(self.E_part, x, params=slots.get("E"))
            _, gS_full = nets.mlp_value_and_input_grad(self.S_part, x, params=slots.get("S"))
            gE = ad.getcols(gE_full, 0, d)
            gS = ad.getcols(gS_full, 0, d)

        raw_l = slots.get("skew_L")
        raw_l = self.skew_L if raw_l is None else ad.reshape(raw_l, (k, d, d))
        raw_m = slots.get("skew_M")
        raw_m = self.skew_M if raw_m is None else ad.reshape(raw_m, (k, d, d))
        skew_l = ad.sub(raw_l, ad.transpose(raw_l, (0, 2, 1)))
        skew_m = ad.sub(raw_m, ad.transpose(raw_m, (0, 2, 1)))

        Qs = ad.einsum2("kij,bj->bki", skew_l, gS)
        Qe = ad.einsum2("kij,bj->bki", skew_m, gE)

        if self.TL_net is not None:
            tl = nets.mlp_forward(self.TL_net, x, params=slots.get("TL"))
            TL = ad.einsum2("be,ekl->bkl", tl, tri_basis(k, True))
            BL = ad.sub(ad.transpose(TL, (0, 2, 1)), TL)
            u = ad.einsum2("bkj,bj->bk", Qs, gE)
            v = ad.einsum2("bkl,bl->bk", BL, u)
            psi = ad.einsum2("bki,bk->bi", Qs, v)
        else:
            psi = np.zeros((B, d))

        tm = nets.mlp_forward(self.TM_net, x, params=slots.get("TM"))
        TM = ad.einsum2("be,ekl->bkl", tm, tri_basis(k, False))
        BM = ad.einsum2("bik,bil->bkl", TM, TM)
        r = ad.einsum2("bkj,bj->bk", Qe, gS)
        s = ad.einsum2("bkl,bl->bk", BM, r)
        psi = ad.add(psi, ad.einsum2("bki,bk->bi", Qe, s))
        return psi


# ---------------------------------------------------------------------------
# structural checks


def structure_report(model, z, mu=None):
    """Max violations of skewness, symmetry, PSD and both degeneracies at one
    point.

    Degeneracy residuals are normalized by the size of the products whose
    cancellation produces them (``|Q|^2 |B| |grad|``): the final operator can
    itself be a cancellation down to round-off (exactly zero in exact
    arithmetic, e.g. any 2x2 skew L with a forced kernel), so its norm is not
    a usable reference scale."""
    L = model.operator_L(z, mu)
    M = model.operator_M(z, mu)
    gE = model.grad_energy(z, mu)
    gS = model.grad_entropy(z, mu)
    Qs = model.assemble_Q("for_L", z, mu)
    Qe = model.assemble_Q("for_M", z, mu)
    zb, mub, _ = model._batchify(z, mu)
    x = model._net_input(zb, mub)
    TL = model._tri_L(x)[0]
    BL = TL.T - TL
    TM = model._tri_M(x)[0]
    BM = TM.T @ TM
    scale_L = max(np.max(np.abs(Qs)) ** 2 * np.max(np.abs(BL), initial=0.0)
                  * np.max(np.abs(gS)), 1e-30)
    scale_M = max(np.max(np.abs(Qe)) ** 2 * np.max(np.abs(BM))
                  * np.max(np.abs(gE)), 1e-30)
    rng = np.random.default_rng(0)
    v = rng.normal(size=model.latent_dim)
    return {
        "skew": np.max(np.abs(L + L.T)),
        "sym": np.max(np.abs(M - M.T)),
        "degeneracy_L": np.max(np.abs(L @ gS)) / scale_L,
        "degeneracy_M": np.max(np.abs(M @ gE)) / scale_M,
        "psd": min(0.0, float(v @ M @ v) / float(v @ v)),
    }


def assert_structure(model, rng, n_samples=16, mu_lo=None, mu_hi=None):
    """Sample random (z, mu) and raise if any structural guarantee is violated.

    Called at every training checkpoint; violations indicate a broken build,
    never a property of the data.
    """
    for _ in range(n_samples):
        z = rng.normal(size=model.latent_dim)
        if model.param_dim and mu_lo is not None:
            mu = rng.uniform(mu_lo, mu_hi)
        elif model.param_dim:
            mu = rng.normal(size=model.param_dim)
        else:
            mu = None
        rep = structure_report(model, z, mu)
        if rep["skew"] > 1e-12 or rep["sym"] > 1e-12:
            raise AssertionError(f"operator symmetry violated: {rep}")
        if rep["degeneracy_L"] > 1e-10 or rep["degeneracy_M"] > 1e-10:
            raise AssertionError(f"degeneracy violated: {rep}")
        if rep["psd"] < -1e-12:
            raise AssertionError(f"PSD violated: {rep}")


# ---------------------------------------------------------------------------
# serialization: diffcore checkpoints plus a JSON manifest


def save_model(model, dirpath, counters=None):
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "kind": "pgfinn",
        "latent_dim": model.latent_dim,
        "param_dim": model.param_dim,
        "n_skew": model.n_skew,
        "known_tag": model.known_tag,
        "mu_shift": model.mu_shift.tolist(),
        "mu_scale": model.mu_scale.tolist(),
        "counters": counters or {},
    }
    if not model.has_known_functions:
        nets.save_checkpoint(model.E_part, os.path.join(dirpath, "energy.bin"), counters=counters)
        nets.save_checkpoint(model.S_part, os.path.join(dirpath, "entropy.bin"), counters=counters)
    if model.TL_net is not None:
        nets.save_checkpoint(model.TL_net, os.path.join(dirpath, "tri_L.bin"), counters=counters)
    nets.save_checkpoint(model.TM_net, os.path.join(dirpath, "tri_M.bin"), counters=counters)
    np.save(os.path.join(dirpath, "skew_L.npy"), model.skew_L)
    np.save(os.path.join(dirpath, "skew_M.npy"), model.skew_M)
    with open(os.path.join(dirpath, "model.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_model(dirpath, known=None):
    """Rebuild a saved model.  ``known`` supplies (KnownScalar_E, KnownScalar_S)
    when the manifest declares a known-function tag; by default the tag is
    resolved through the reference systems registry."""
    with open(os.path.join(dirpath, "model.json")) as f:
        manifest = json.load(f)
    tag = manifest["known_tag"]
    if tag is not None:
        if known is None:
            from .systems import resolve_known
            e_part, s_part = resolve_known(tag)
        else:
            e_part, s_part = known
    else:
        e_part, _ = nets.load_checkpoint(os.path.join(dirpath, "energy.bin"))
        s_part, _ = nets.load_checkpoint(os.path.join(dirpath, "entropy.bin"))
    tl_path = os.path.join(dirpath, "tri_L.bin")
    tl = nets.load_checkpoint(tl_path)[0] if os.path.exists(tl_path) else None
    tm, _ = nets.load_checkpoint(os.path.join(dirpath, "tri_M.bin"))
    skew_l = np.load(os.path.join(dirpath, "skew_L.npy"))
    skew_m = np.load(os.path.join(dirpath, "skew_M.npy"))
    return PGFinn(manifest["latent_dim"], manifest["param_dim"], manifest["n_skew"],
                  e_part, s_part, tl, tm, skew_l, skew_m,
                  np.array(manifest["mu_shift"]), np.array(manifest["mu_scale"]),
                  known_tag=tag)
