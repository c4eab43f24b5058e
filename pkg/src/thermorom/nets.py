"""Dense feed-forward networks on flat float64 parameter vectors.

Parameter layout is canonical and documented so checkpoints are portable:
layer-major, and within each layer the weight matrix W_l (shape
``(n_out, n_in)``, row-major) followed by the bias b_l.  Hidden layers get the
configured activation; the output layer is always affine.

Besides plain evaluation, this module provides graph builders (on
:mod:`thermorom.autodiff` nodes) for the forward map, the input gradient of
scalar networks, Jacobian-vector products, and full per-sample Jacobians.
The builders accept the flat parameter vector either as an ndarray (plain
evaluation) or as a Node (differentiable, e.g. during training).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("tanh", "relu", "linear")

_MAGIC = b"TRNET1\n"


class DimensionError(ValueError):
    """Input/output shape does not match the network."""


def n_params(layer_sizes) -> int:
    return sum(layer_sizes[i] * layer_sizes[i + 1] + layer_sizes[i + 1]
               for i in range(len(layer_sizes) - 1))


def glorot_params(layer_sizes, rng) -> np.ndarray:
    """Glorot-uniform weights, zero biases, in canonical flat order."""
    chunks = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-limit, limit, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return np.concatenate(chunks) if chunks else np.zeros(0)


@dataclass
class DenseNet:
    layer_sizes: list
    activation: str
    params: np.ndarray

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        expected = n_params(self.layer_sizes)
        if self.params.shape != (expected,):
            raise DimensionError(
                f"params has length {self.params.shape}, layout needs {expected}")

    @classmethod
    def create(cls, layer_sizes, activation="tanh", seed=0):
        rng = np.random.default_rng(seed)
        return cls(list(layer_sizes), activation, glorot_params(layer_sizes, rng))

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def layer_arrays(self):
        """Views (W_l, b_l) into the flat parameter vector."""
        out = []
        off = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = self.params[off:off + n_in * n_out].reshape(n_out, n_in)
            off += n_in * n_out
            b = self.params[off:off + n_out]
            off += n_out
            out.append((W, b))
        return out

    # -- plain evaluation ---------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise DimensionError(
                f"input has width {x.shape[-1]}, network expects {self.n_in}")
        return x

    def forward(self, x):
        x = self._check_input(x)
        h = x
        layers = self.layer_arrays()
        for W, b in layers[:-1]:
            h = h @ W.T + b
            if self.activation == "tanh":
                h = np.tanh(h)
            elif self.activation == "relu":
                h = np.maximum(h, 0.0)
        W, b = layers[-1]
        return h @ W.T + b

    def _forward_saved(self, x):
        """Forward pass keeping post-activation hidden states."""
        h = x
        hs = []
        layers = self.layer_arrays()
        for W, b in layers[:-1]:
            h = h @ W.T + b
            if self.activation == "tanh":
                h = np.tanh(h)
            elif self.activation == "relu":
                h = np.maximum(h, 0.0)
            hs.append(h)
        W, b = layers[-1]
        return h @ W.T + b, hs

    def _dact(self, h):
        if self.activation == "tanh":
            return 1.0 - h * h
        if self.activation == "relu":
            return (h > 0.0).astype(float)
        return np.ones_like(h)

    def grad_input(self, x):
        """Gradient of the scalar output with respect to the input."""
        if self.n_out != 1:
            raise DimensionError("grad_input needs a scalar-output network")
        x = self._check_input(x)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        _, hs = self._forward_saved(xb)
        layers = self.layer_arrays()
        c = np.broadcast_to(layers[-1][0], (xb.shape[0], self.layer_sizes[-2]))
        for (W, _), h in zip(reversed(layers[:-1]), reversed(hs)):
            c = (c * self._dact(h)) @ W
        return c[0] if single else c

    def jvp(self, x, v):
        """Jacobian-vector product J(x) v (forward mode)."""
        x = self._check_input(x)
        v = np.asarray(v, dtype=float)
        if v.shape != x.shape:
            raise DimensionError("tangent must match input shape")
        layers = self.layer_arrays()
        h, t = x, v
        for W, b in layers[:-1]:
            h = h @ W.T + b
            t = t @ W.T
            if self.activation == "tanh":
                h = np.tanh(h)
            elif self.activation == "relu":
                h = np.maximum(h, 0.0)
            t = t * self._dact(h)
        return t @ layers[-1][0].T

    def vjp(self, x, w):
        """Vector-Jacobian product w^T J(x) (reverse mode)."""
        x = self._check_input(x)
        w = np.asarray(w, dtype=float)
        if w.shape[-1] != self.n_out:
            raise DimensionError("cotangent must match output width")
        _, hs = self._forward_saved(x)
        layers = self.layer_arrays()
        c = w @ layers[-1][0]
        for (W, _), h in zip(reversed(layers[:-1]), reversed(hs)):
            c = (c * self._dact(h)) @ W
        return c


# ---------------------------------------------------------------------------
# graph builders (params may be a Node for training)


def _act_node(h, activation):
    if activation == "tanh":
        return ad.tanh(h)
    if activation == "relu":
        return ad.relu(h)
    return h


def _dact_node(h, activation):
    """Activation derivative as a graph value, from the post-activation h."""
    if activation == "tanh":
        return ad.sub(1.0, ad.square(h))
    if activation == "relu":
        return (ad.value_of(h) > 0.0).astype(float)  # constant a.e.
    return None


def layer_nodes(net, params):
    """Per-layer (W, b) slices of a flat vector (Node or ndarray)."""
    out = []
    off = 0
    for n_in, n_out in zip(net.layer_sizes[:-1], net.layer_sizes[1:]):
        W = ad.reshape(ad.segment(params, off, n_in * n_out), (n_out, n_in))
        off += n_in * n_out
        b = ad.segment(params, off, n_out)
        off += n_out
        out.append((W, b))
    return out


def mlp_forward(net, x, params=None):
    """Forward map as a graph; ``x``: (B, n_in) Node or ndarray."""
    layers = layer_nodes(net, net.params if params is None else params)
    h = x
    for W, b in layers[:-1]:
        h = _act_node(ad.affine(h, W, b), net.activation)
    W, b = layers[-1]
    return ad.affine(h, W, b)


def mlp_forward_saved(net, x, params=None):
    layers = layer_nodes(net, net.params if params is None else params)
    h = x
    hs = []
    for W, b in layers[:-1]:
        h = _act_node(ad.affine(h, W, b), net.activation)
        hs.append(h)
    W, b = layers[-1]
    return ad.affine(h, W, b), hs, layers


def mlp_value_and_input_grad(net, x, params=None):
    """Scalar net: output (B, 1) and its input gradient (B, n_in) as graph values.

    The gradient is expressed through explicit graph operations, so further
    reverse-mode differentiation (e.g. parameter gradients of losses built on
    it) picks up the second-order terms exactly.
    """
    if net.n_out != 1:
        raise DimensionError("input gradient needs a scalar-output network")
    y, hs, layers = mlp_forward_saved(net, x, params)
    n_batch = np.shape(ad.value_of(x))[0]
    ones = np.ones((n_batch, 1))
    c = ad.matmul(ones, layers[-1][0])
    for (W, _), h in zip(reversed(layers[:-1]), reversed(hs)):
        d = _dact_node(h, net.activation)
        if d is not None:
            c = ad.mul(c, d)
        c = ad.matmul(c, W)
    return y, c


def mlp_forward_and_jvp(net, x, tangent, params=None):
    """Forward map plus J(x) applied to ``tangent`` as graph values.

    ``tangent`` may carry one extra leading axis of stacked directions,
    i.e. shape (B, n_in) or (B, m, n_in).
    """
    layers = layer_nodes(net, net.params if params is None else params)
    multi = np.ndim(ad.value_of(tangent)) == np.ndim(ad.value_of(x)) + 1
    h, t = x, tangent
    for W, b in layers[:-1]:
        h = _act_node(ad.affine(h, W, b), net.activation)
        t = ad.matmul(t, ad.transpose(W, (1, 0)))
        d = _dact_node(h, net.activation)
        if d is not None:
            if multi:
                d = ad.reshape(d, (np.shape(ad.value_of(d))[0], 1, -1))
            t = ad.mul(t, d)
    W, b = layers[-1]
    return ad.affine(h, W, b), ad.matmul(t, ad.transpose(W, (1, 0)))


def mlp_jacobian_rows(net, x, params=None):
    """Forward map plus the full per-sample Jacobian (B, n_out, n_in)."""
    y, hs, layers = mlp_forward_saved(net, x, params)
    n_batch = np.shape(ad.value_of(x))[0]
    W_last = layers[-1][0]
    J = ad.reshape(W_last, (1, net.n_out, net.layer_sizes[-2]))
    J = ad.mul(J, np.ones((n_batch, 1, 1)))  # broadcast to the batch
    for (W, _), h in zip(reversed(layers[:-1]), reversed(hs)):
        d = _dact_node(h, net.activation)
        if d is not None:
            d3 = ad.reshape(d, (n_batch, 1, -1)) if isinstance(d, ad.Node) else d[:, None, :]
            J = ad.mul(J, d3)
        J = ad.matmul(J, W)
    return y, J


# ---------------------------------------------------------------------------
# checkpoints: binary header + flat f64 payload, with a JSON sidecar


def save_checkpoint(net, path, seed=None, counters=None):
    header = {
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "seed": seed,
        "counters": counters or {},
        "n_params": int(net.params.size),
    }
    blob = json.dumps(header).encode()
    path = str(path)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(len(blob)).astype("<u4").tobytes())
        f.write(blob)
        f.write(net.params.astype("<f8").tobytes())
    with open(path + ".json", "w") as f:
        json.dump(header, f, indent=2)
    return header


def load_checkpoint(path):
    path = str(path)
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a network checkpoint (bad magic)")
        raw = f.read(4)
        if len(raw) < 4:
            raise ValueError(f"{path}: truncated header length")
        hlen = int(np.frombuffer(raw, dtype="<u4")[0])
        blob = f.read(hlen)
        if len(blob) < hlen:
            raise ValueError(f"{path}: truncated header")
        header = json.loads(blob.decode())
        payload = f.read()
    params = np.frombuffer(payload, dtype="<f8").astype(float)
    if params.size != header["n_params"]:
        raise ValueError(
            f"{path}: payload holds {params.size} values, header says {header['n_params']}")
    net = DenseNet(header["layer_sizes"], header["activation"], params)
    return net, header
