"""Nonlinear dimensionality reduction with exact Jacobian actions.

The reduction map is a plain encoder/decoder pair of dense networks (ReLU
hidden layers, linear output).  Training-time losses need the Jacobian of the
round trip, ``J(u) = J_d(phi_e(u)) J_e(u)``; it is applied through JVPs
without materializing the full matrix, except where a d-row/column slab is
explicitly required.

An identity variant with no trainable parameters serves low-dimensional
systems whose state is already a usable latent space.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import autodiff as ad
from . import nets
from .nets import DenseNet, DimensionError


class AutoEncoder:
    def __init__(self, encoder, decoder):
        if encoder.n_in != decoder.n_out:
            raise DimensionError("encoder input size must equal decoder output size")
        if encoder.n_out != decoder.n_in:
            raise DimensionError("latent sizes of encoder and decoder disagree")
        if encoder.n_out >= encoder.n_in:
            raise DimensionError("latent dimension must be smaller than the state dimension")
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def create(cls, sizes, activation="relu", seed=0):
        """Encoder with the given layer sizes (e.g. [200, 100, 5]); the
        decoder mirrors it."""
        rng = np.random.default_rng(seed)
        enc = DenseNet(list(sizes), activation, nets.glorot_params(sizes, rng))
        dec_sizes = list(sizes)[::-1]
        dec = DenseNet(dec_sizes, activation, nets.glorot_params(dec_sizes, rng))
        return cls(enc, dec)

    @property
    def n_state(self):
        return self.encoder.n_in

    @property
    def latent_dim(self):
        return self.encoder.n_out

    def encode(self, u):
        return self.encoder.forward(u)

    def decode(self, z):
        return self.decoder.forward(z)

    def reconstruct(self, u):
        return self.decode(self.encode(u))

    def encoder_jvp(self, u, v):
        return self.encoder.jvp(u, v)

    def decoder_jvp(self, z, w):
        return self.decoder.jvp(z, w)

    def jvp(self, u, v):
        """J(u) v, computed as J_d(phi_e(u)) (J_e(u) v)."""
        return self.decoder.jvp(self.encode(u), self.encoder.jvp(u, v))

    # -- trainable plumbing ----------------------------------------------------

    def trainables(self):
        return [("enc", self.encoder.params), ("dec", self.decoder.params)]

    def rebind(self, name, array):
        if name == "enc":
            self.encoder.params = array
        elif name == "dec":
            self.decoder.params = array
        else:
            raise KeyError(name)

    # -- graph builders ----------------------------------------------------------

    def encode_nodes(self, u, slots=None):
        slots = slots or {}
        return nets.mlp_forward(self.encoder, u, params=slots.get("enc"))

    def decode_nodes(self, z, slots=None):
        slots = slots or {}
        return nets.mlp_forward(self.decoder, z, params=slots.get("dec"))

    def encoder_jvp_nodes(self, u, tangent, slots=None):
        slots = slots or {}
        return nets.mlp_forward_and_jvp(self.encoder, u, tangent, params=slots.get("enc"))

    def decoder_jvp_nodes(self, z, tangent, slots=None):
        slots = slots or {}
        return nets.mlp_forward_and_jvp(self.decoder, z, tangent, params=slots.get("dec"))

    def encoder_jacobian_nodes(self, u, slots=None):
        slots = slots or {}
        return nets.mlp_jacobian_rows(self.encoder, u, params=slots.get("enc"))

    def decoder_jacobian_nodes(self, z, slots=None):
        slots = slots or {}
        return nets.mlp_jacobian_rows(self.decoder, z, params=slots.get("dec"))

    # -- persistence ----------------------------------------------------------------

    def save(self, dirpath, counters=None):
        os.makedirs(dirpath, exist_ok=True)
        nets.save_checkpoint(self.encoder, os.path.join(dirpath, "encoder.bin"), counters=counters)
        nets.save_checkpoint(self.decoder, os.path.join(dirpath, "decoder.bin"), counters=counters)
        with open(os.path.join(dirpath, "autoencoder.json"), "w") as f:
            json.dump({"kind": "autoencoder",
                       "encoder_sizes": list(self.encoder.layer_sizes),
                       "activation": self.encoder.activation}, f, indent=2)


class IdentityAutoEncoder:
    """Pass-through reduction for states that are already low-dimensional."""

    def __init__(self, n_state):
        self.n_state = n_state
        self.latent_dim = n_state

    def encode(self, u):
        return np.asarray(u, dtype=float)

    def decode(self, z):
        return np.asarray(z, dtype=float)

    def reconstruct(self, u):
        return np.asarray(u, dtype=float)

    def encoder_jvp(self, u, v):
        return np.asarray(v, dtype=float)

    def decoder_jvp(self, z, w):
        return np.asarray(w, dtype=float)

    def jvp(self, u, v):
        return np.asarray(v, dtype=float)

    def trainables(self):
        return []

    def rebind(self, name, array):
        raise KeyError(name)

    def encode_nodes(self, u, slots=None):
        return u

    def decode_nodes(self, z, slots=None):
        return z

    def encoder_jvp_nodes(self, u, tangent, slots=None):
        return u, tangent

    def decoder_jvp_nodes(self, z, tangent, slots=None):
        return z, tangent

    def encoder_jacobian_nodes(self, u, slots=None):
        n_batch = np.shape(ad.value_of(u))[0]
        eye = np.broadcast_to(np.eye(self.n_state), (n_batch, self.n_state, self.n_state))
        return u, eye

    decoder_jacobian_nodes = encoder_jacobian_nodes

    def save(self, dirpath, counters=None):
        os.makedirs(dirpath, exist_ok=True)
        with open(os.path.join(dirpath, "autoencoder.json"), "w") as f:
            json.dump({"kind": "identity", "n_state": self.n_state}, f, indent=2)


def load_autoencoder(dirpath):
    with open(os.path.join(dirpath, "autoencoder.json")) as f:
        manifest = json.load(f)
    if manifest["kind"] == "identity":
        return IdentityAutoEncoder(manifest["n_state"])
    enc, _ = nets.load_checkpoint(os.path.join(dirpath, "encoder.bin"))
    dec, _ = nets.load_checkpoint(os.path.join(dirpath, "decoder.bin"))
    return AutoEncoder(enc, dec)
