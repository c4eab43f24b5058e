import numpy as np
import pytest

from thermorom import autodiff as ad
from thermorom.autoencoder import (AutoEncoder, IdentityAutoEncoder,
                                   load_autoencoder)
from thermorom.nets import DenseNet, DimensionError

from conftest import rel_err


def away_from_kinks(ae, rng, n=4, margin=1e-4, tries=50):
    """Batch of states whose ReLU pre-activations are clear of zero."""
    for _ in range(tries):
        u = rng.normal(size=(n, ae.n_state))
        z = ae.encode(u)
        margins = []
        for net, x in ((ae.encoder, u), (ae.decoder, z)):
            h = x
            for W, b in net.layer_arrays()[:-1]:
                a = h @ W.T + b
                margins.append(np.min(np.abs(a)))
                h = np.maximum(a, 0.0)
        if min(margins) > margin:
            return u
    raise RuntimeError("could not find a kink-free batch")


def test_identity_ae_reconstructs_exactly(rng):
    ae = IdentityAutoEncoder(5)
    u = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(ae.reconstruct(u), u)
    np.testing.assert_array_equal(ae.jvp(u, u * 2), u * 2)


def test_reconstruct_is_composition(rng):
    ae = AutoEncoder.create([8, 5, 2], seed=1)
    u = rng.normal(size=(4, 8))
    np.testing.assert_array_equal(ae.reconstruct(u), ae.decode(ae.encode(u)))


def test_size_validation():
    enc = DenseNet.create([8, 4, 2], "relu", seed=0)
    bad_dec = DenseNet.create([3, 4, 8], "relu", seed=0)
    with pytest.raises(DimensionError):
        AutoEncoder(enc, bad_dec)
    with pytest.raises(DimensionError):
        AutoEncoder.create([4, 4, 4])


def test_jacobian_rank_bounded_by_latent_dim(rng):
    ae = AutoEncoder.create([7, 5, 2], seed=2)
    u = rng.normal(size=7)
    J = np.stack([ae.jvp(u, e) for e in np.eye(7)], axis=1)
    assert np.linalg.matrix_rank(J, tol=1e-10) <= 2


def test_jvp_against_directional_fd(rng):
    ae = AutoEncoder.create([6, 4, 2], seed=3)
    u = away_from_kinks(ae, rng, n=1)[0]
    v = rng.normal(size=6)
    h = 1e-6
    fd = (ae.reconstruct(u + h * v) - ae.reconstruct(u - h * v)) / (2 * h)
    assert rel_err(ae.jvp(u, v), fd) < 1e-4


def test_jvp_matches_assembled_jacobian(rng):
    ae = AutoEncoder.create([6, 4, 2], seed=4)
    u = rng.normal(size=6)
    du = rng.normal(size=6)
    Je = np.stack([ae.encoder.jvp(u, e) for e in np.eye(6)], axis=1)
    Jd = np.stack([ae.decoder.jvp(ae.encode(u), e) for e in np.eye(2)], axis=1)
    dense = np.linalg.norm((np.eye(6) - Jd @ Je) @ du)
    via_jvp = np.linalg.norm(du - ae.jvp(u, du))
    assert abs(dense - via_jvp) < 1e-10


def test_graph_builders_match_plain(rng):
    ae = AutoEncoder.create([6, 4, 2], seed=5)
    u = rng.normal(size=(3, 6))
    np.testing.assert_allclose(ad.value_of(ae.encode_nodes(u)), ae.encode(u))
    z, jt = ae.encoder_jvp_nodes(u, u * 0.5)
    expected = np.stack([ae.encoder.jvp(u[i], 0.5 * u[i]) for i in range(3)])
    np.testing.assert_allclose(ad.value_of(jt), expected, atol=1e-14)


def test_roundtrip_persistence(tmp_path, rng):
    ae = AutoEncoder.create([6, 4, 2], seed=6)
    ae.save(tmp_path / "ae")
    loaded = load_autoencoder(tmp_path / "ae")
    u = rng.normal(size=(2, 6))
    np.testing.assert_array_equal(loaded.reconstruct(u), ae.reconstruct(u))

    ide = IdentityAutoEncoder(4)
    ide.save(tmp_path / "ide")
    loaded = load_autoencoder(tmp_path / "ide")
    assert isinstance(loaded, IdentityAutoEncoder)
    assert loaded.n_state == 4
