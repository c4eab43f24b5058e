"""The four training loss terms and their weighted total.

All terms are sums (not means) of squared l2 norms over the batch of
consecutive snapshot pairs:

* integration: encoded step mismatch against one integration step of the
  latent field,
* reconstruction: autoencoder round-trip error,
* Jacobian: ``||(I - J(u)) du||^2`` given derivative data, or the Frobenius
  gap ``||I - J(u)||_F^2`` when derivatives are unavailable,
* model: decoder- and encoder-side mismatch between the data velocity and
  the latent field prediction.

Every term is differentiable with respect to all trainable blocks; pass
``slots`` (from :class:`thermorom.optim.TrainableSet`) to build the graph, or
omit it for a plain evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .optim import NonFiniteLossError

JAC_MODES = ("with_derivatives", "frobenius")
INT_SCHEMES = ("euler", "rk4")


@dataclass
class LossWeights:
    lam_rec: float = 1e-1
    lam_jac: float = 1e-9
    lam_mod: float = 1e-7
    jac_mode: str = "with_derivatives"
    int_scheme: str = "euler"

    def __post_init__(self):
        for v in (self.lam_rec, self.lam_jac, self.lam_mod):
            if not np.isfinite(v) or v < 0:
                raise ValueError("loss weights must be finite and non-negative")
        if self.jac_mode not in JAC_MODES:
            raise ValueError(f"jac_mode must be one of {JAC_MODES}")
        if self.int_scheme not in INT_SCHEMES:
            raise ValueError(f"int_scheme must be one of {INT_SCHEMES}")


def _sumsq(x):
    return ad.ssum(ad.square(x))


def _latent_step(model, z, mu, dt, scheme, mslots):
    """One integration step of the latent field starting at z (graph value)."""
    k1 = model.field_nodes(z, mu, mslots)
    if scheme == "euler":
        return ad.mul(k1, dt)
    k2 = model.field_nodes(ad.add(z, ad.mul(k1, 0.5 * dt)), mu, mslots)
    k3 = model.field_nodes(ad.add(z, ad.mul(k2, 0.5 * dt)), mu, mslots)
    k4 = model.field_nodes(ad.add(z, ad.mul(k3, dt)), mu, mslots)
    acc = ad.add(ad.add(k1, k4), ad.mul(ad.add(k2, k3), 2.0))
    return ad.mul(acc, dt / 6.0)


def loss_int(batch, ae, model, weights=None, slots=None):
    scheme = (weights.int_scheme if weights else "euler")
    slots = slots or {}
    z = ae.encode_nodes(batch.u, slots.get("ae"))
    z_next = ae.encode_nodes(batch.u_next, slots.get("ae"))
    step = _latent_step(model, z, batch.mu, batch.dt, scheme, slots.get("model", {}))
    return _sumsq(ad.sub(ad.sub(z_next, z), step))


def loss_rec(batch, ae, slots=None):
    slots = slots or {}
    z = ae.encode_nodes(batch.u, slots.get("ae"))
    u_hat = ae.decode_nodes(z, slots.get("ae"))
    return _sumsq(ad.sub(batch.u, u_hat))


def loss_jac(batch, ae, mode="with_derivatives", slots=None):
    slots = slots or {}
    aes = slots.get("ae")
    if mode == "with_derivatives":
        if batch.du is None:
            raise ValueError("jac_mode 'with_derivatives' needs derivative data in the batch")
        z, je_du = ae.encoder_jvp_nodes(batch.u, batch.du, aes)
        _, j_du = ae.decoder_jvp_nodes(z, je_du, aes)
        return _sumsq(ad.sub(batch.du, j_du))
    if mode != "frobenius":
        raise ValueError(f"unknown jac_mode {mode!r}")
    z, Je = ae.encoder_jacobian_nodes(batch.u, aes)
    _, Jd = ae.decoder_jacobian_nodes(z, aes)
    n_u = batch.u.shape[1]
    trace = ad.einsum2("bik,bki->b", Jd, Je)
    g_dec = ad.einsum2("bik,bil->bkl", Jd, Jd)
    g_enc = ad.einsum2("bki,bli->bkl", Je, Je)
    fro = ad.einsum2("bkl,blk->b", g_dec, g_enc)
    return ad.ssum(ad.add(ad.sub(fro, ad.mul(trace, 2.0)), float(n_u)))


def loss_model(batch, ae, model, slots=None):
    if batch.du is None:
        raise ValueError("the model-error loss needs derivative data in the batch")
    slots = slots or {}
    aes = slots.get("ae")
    z, je_du = ae.encoder_jvp_nodes(batch.u, batch.du, aes)
    psi = model.field_nodes(z, batch.mu, slots.get("model", {}))
    _, jd_psi = ae.decoder_jvp_nodes(z, psi, aes)
    return ad.add(_sumsq(ad.sub(batch.du, jd_psi)), _sumsq(ad.sub(je_du, psi)))


def total_loss(batch, ae, model, weights, slots=None):
    """Weighted total and the individual terms, sharing subgraphs.

    Returns ``(total, parts)`` where ``parts`` maps term names to plain
    float values and ``total`` is a Node when ``slots`` is given.
    """
    slots = slots or {}
    aes = slots.get("ae")
    mslots = slots.get("model", {})
    need_du = weights.lam_mod > 0 or (weights.lam_jac > 0 and weights.jac_mode == "with_derivatives")

    if need_du:
        if batch.du is None:
            raise ValueError("loss configuration needs derivative data in the batch")
        z, je_du = ae.encoder_jvp_nodes(batch.u, batch.du, aes)
    else:
        z = ae.encode_nodes(batch.u, aes)
        je_du = None

    z_next = ae.encode_nodes(batch.u_next, aes)
    psi = model.field_nodes(z, batch.mu, mslots)

    # integration term (forward Euler reuses psi; RK4 adds stages)
    if weights.int_scheme == "euler":
        step = ad.mul(psi, batch.dt)
    else:
        dt = batch.dt
        k2 = model.field_nodes(ad.add(z, ad.mul(psi, 0.5 * dt)), batch.mu, mslots)
        k3 = model.field_nodes(ad.add(z, ad.mul(k2, 0.5 * dt)), batch.mu, mslots)
        k4 = model.field_nodes(ad.add(z, ad.mul(k3, dt)), batch.mu, mslots)
        step = ad.mul(ad.add(ad.add(psi, k4), ad.mul(ad.add(k2, k3), 2.0)), dt / 6.0)
    term_int = _sumsq(ad.sub(ad.sub(z_next, z), step))

    # decoder work: reconstruction primal plus any needed tangents at z
    tangents = []
    if weights.lam_jac > 0 and weights.jac_mode == "with_derivatives":
        tangents.append(je_du)
    if weights.lam_mod > 0:
        tangents.append(psi)
    n_batch = batch.u.shape[0]
    d = np.shape(ad.value_of(z))[-1]
    if tangents:
        stacked = ad.concat([ad.reshape(t, (n_batch, 1, d)) for t in tangents], axis=1)
        u_hat, jt = ae.decoder_jvp_nodes(z, stacked, aes)
    else:
        u_hat = ae.decode_nodes(z, aes)
        jt = None

    term_rec = _sumsq(ad.sub(batch.u, u_hat)) if weights.lam_rec > 0 else 0.0

    term_jac = 0.0
    col = 0
    if weights.lam_jac > 0:
        if weights.jac_mode == "with_derivatives":
            j_du = ad.reshape(ad.getcols(ad.transpose(jt, (0, 2, 1)), col, col + 1),
                              (n_batch, -1))
            col += 1
            term_jac = _sumsq(ad.sub(batch.du, j_du))
        else:
            term_jac = loss_jac(batch, ae, "frobenius", slots)

    term_mod = 0.0
    if weights.lam_mod > 0:
        jd_psi = ad.reshape(ad.getcols(ad.transpose(jt, (0, 2, 1)), col, col + 1),
                            (n_batch, -1))
        term_mod = ad.add(_sumsq(ad.sub(batch.du, jd_psi)), _sumsq(ad.sub(je_du, psi)))

    total = term_int
    if weights.lam_rec > 0:
        total = ad.add(total, ad.mul(term_rec, weights.lam_rec))
    if weights.lam_jac > 0:
        total = ad.add(total, ad.mul(term_jac, weights.lam_jac))
    if weights.lam_mod > 0:
        total = ad.add(total, ad.mul(term_mod, weights.lam_mod))

    parts = {
        "int": float(ad.value_of(term_int)),
        "rec": float(ad.value_of(term_rec)),
        "jac": float(ad.value_of(term_jac)),
        "mod": float(ad.value_of(term_mod)),
        "total": float(ad.value_of(total)),
    }
    if not np.isfinite(parts["total"]):
        raise NonFiniteLossError(f"non-finite training loss: {parts}")
    return total, parts


def loss_and_grad(batch, ae, model, weights, tset):
    """Total loss, its gradient over the joint flat vector, and the parts."""
    theta = ad.Node(tset.flat)
    slots = tset.slots(theta)
    total, parts = total_loss(batch, ae, model, weights, slots)
    if isinstance(total, ad.Node):
        ad.backward(total)
        grad = theta.grad if theta.grad is not None else np.zeros(tset.size)
    else:
        grad = np.zeros(tset.size)
    return parts["total"], grad, parts
