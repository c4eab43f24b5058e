import numpy as np
import pytest

from thermorom import autodiff as ad
from thermorom import generic, systems
from thermorom.generic import KnownScalar, PGFinn
from thermorom.nets import DenseNet

from conftest import fd_grad, rel_err
from test_nets import straight_line_forward


def toy_model(d=3, n_mu=2, k=2, seed=0, hidden=(8, 8)):
    return PGFinn.create(d, n_mu, n_skew=k, hidden=hidden, seed=seed)


def flatten_trainables(model):
    blocks = model.trainables()
    flat = np.concatenate([arr.ravel() for _, arr in blocks])
    offsets = {}
    off = 0
    for name, arr in blocks:
        offsets[name] = (off, arr.size)
        off += arr.size
    return flat, offsets


def set_trainables(model, flat):
    off = 0
    for _, arr in model.trainables():
        arr.reshape(-1)[...] = flat[off:off + arr.size]
        off += arr.size


def graph_slots(model):
    flat, offsets = flatten_trainables(model)
    theta = ad.Node(flat.copy())
    slots = {name: ad.segment(theta, o, n) for name, (o, n) in offsets.items()}
    return theta, slots, offsets


# -- energy / entropy ---------------------------------------------------------

def test_known_entropy_at_reference_state():
    known = systems.GasContainersSystem().known_functions()
    model = PGFinn.create(4, 1, known=known, seed=0)
    assert np.isclose(model.entropy(systems.GAS_INITIAL_STATE, [10.0]), 2.60)


def test_zero_weight_energy_is_bias(rng):
    model = toy_model(seed=1)
    model.E_part.params[:] = 0.0
    model.E_part.layer_arrays()[-1][1][:] = 0.77
    for _ in range(5):
        z = rng.normal(size=3)
        mu = rng.normal(size=2)
        assert model.energy(z, mu) == 0.77


def test_energy_matches_straight_line_oracle(rng):
    model = toy_model(seed=2)
    z = rng.normal(size=3)
    mu = rng.normal(size=2)
    x = np.concatenate([z, mu])  # default mu scaling is the identity
    assert np.isclose(model.energy(z, mu),
                      straight_line_forward(model.E_part, x)[0], rtol=1e-14)


def test_dimension_checks(rng):
    model = toy_model()
    with pytest.raises(Exception):
        model.energy(np.ones(4), np.ones(2))
    with pytest.raises(Exception):
        model.energy(np.ones(3), np.ones(3))


# -- Q assembly -----------------------------------------------------------------

def test_q_single_skew_2x2():
    # S1 = [[0, 1], [-1, 0]], grad G = (a, b)  ->  row (b, -a)
    a_, b_ = 0.8, -1.7
    gradder = KnownScalar("lin", lambda z: np.zeros(z.shape[0]),
                          lambda z: np.broadcast_to([a_, b_], z.shape).copy())
    tm = DenseNet.create([2, 4, 1], "tanh", seed=0)
    raw = np.array([[[0.0, 0.5], [-0.5, 0.0]]])
    model = PGFinn(2, 0, 1, gradder, gradder, None, tm, raw.copy(), raw.copy())
    Q = model.assemble_Q("for_L", np.zeros(2))
    np.testing.assert_allclose(Q, [[b_, -a_]], atol=1e-15)
    assert abs(Q[0] @ np.array([a_, b_])) < 1e-15


def test_q_annihilates_gradient(rng):
    model = toy_model(seed=3)
    for _ in range(50):
        z = rng.normal(size=3)
        mu = rng.normal(size=2)
        for which, grad in (("for_L", model.grad_entropy), ("for_M", model.grad_energy)):
            g = grad(z, mu)
            Q = model.assemble_Q(which, z, mu)
            assert np.max(np.abs(Q @ g)) <= 1e-12 * max(np.max(np.abs(g)), 1e-3)


def test_q_rows_from_finite_difference_gradient(rng):
    model = toy_model(seed=4)
    z = rng.normal(size=3)
    mu = rng.normal(size=2)
    g_fd = fd_grad(lambda zz: model.entropy(zz, mu), z.copy())
    Q = model.assemble_Q("for_L", z, mu)
    Q_fd = np.einsum("kij,j->ki", model.realized_skew("for_L"), g_fd)
    assert rel_err(Q, Q_fd) < 1e-5


# -- operators --------------------------------------------------------------------

def test_operator_structure_random_draws(rng):
    model = toy_model(seed=5)
    zs = rng.normal(size=(1000, 3))
    mus = rng.normal(size=(1000, 2))
    L = model.operator_L(zs, mus)
    M = model.operator_M(zs, mus)
    assert np.max(np.abs(L + np.swapaxes(L, 1, 2))) <= 1e-12
    assert np.max(np.abs(M - np.swapaxes(M, 1, 2))) <= 1e-12
    v = rng.normal(size=(1000, 3))
    quad = np.einsum("bi,bij,bj->b", v, M, v)
    assert np.min(quad) >= -1e-12 * np.max(np.einsum("bi,bi->b", v, v))


def test_degeneracy_random_draws(rng):
    model = toy_model(seed=6)
    for _ in range(100):
        z = rng.normal(size=3)
        mu = rng.normal(size=2)
        rep = generic.structure_report(model, z, mu)
        assert rep["degeneracy_L"] <= 1e-10
        assert rep["degeneracy_M"] <= 1e-10


# -- vector field -----------------------------------------------------------------

def test_field_conserves_energy_produces_entropy(rng):
    model = toy_model(seed=7)
    for _ in range(100):
        z = rng.normal(size=3)
        mu = rng.normal(size=2)
        psi = model.vector_field(z, mu)
        gE = model.grad_energy(z, mu)
        gS = model.grad_entropy(z, mu)
        L = model.operator_L(z, mu)
        M = model.operator_M(z, mu)
        scale = 1.0 + np.max(np.abs(L)) * (gE @ gE) + np.max(np.abs(M)) * np.linalg.norm(gE) * np.linalg.norm(gS)
        assert abs(gE @ psi) <= 1e-10 * scale
        assert gS @ psi >= -1e-12 * scale


def test_field_matches_dense_assembly(rng):
    model = toy_model(seed=8)
    z = rng.normal(size=3)
    mu = rng.normal(size=2)
    dense = (model.operator_L(z, mu) @ model.grad_energy(z, mu)
             + model.operator_M(z, mu) @ model.grad_entropy(z, mu))
    np.testing.assert_allclose(model.vector_field(z, mu), dense, atol=1e-13)


def test_field_nodes_matches_plain_eval(rng):
    model = toy_model(seed=9)
    zs = rng.normal(size=(6, 3))
    mus = rng.normal(size=(6, 2))
    theta, slots, _ = graph_slots(model)
    psi = model.field_nodes(zs, mus, slots)
    np.testing.assert_allclose(ad.value_of(psi), model.vector_field(zs, mus), rtol=1e-12)


# -- parameter gradients -------------------------------------------------------------

def test_field_param_grad_finite_differences(rng):
    model = toy_model(seed=10)
    zs = rng.normal(size=(4, 3))
    mus = rng.normal(size=(4, 2))
    target = rng.normal(size=(4, 3))

    theta, slots, offsets = graph_slots(model)
    loss = ad.ssum(ad.square(ad.sub(model.field_nodes(zs, mus, slots), target)))
    ad.backward(loss)
    g = theta.grad

    flat0, _ = flatten_trainables(model)

    def loss_value(flat):
        set_trainables(model, flat)
        v = float(np.sum((model.vector_field(zs, mus) - target) ** 2))
        return v

    g_fd = fd_grad(loss_value, flat0.copy())
    set_trainables(model, flat0)
    for name, (off, n) in offsets.items():
        assert rel_err(g[off:off + n], g_fd[off:off + n]) < 1e-4, name


def test_loss_on_entropy_value_leaves_skew_m_untouched(rng):
    from thermorom import nets as nets_mod
    model = toy_model(seed=11)
    zs = rng.normal(size=(4, 3))
    mus = rng.normal(size=(4, 2))
    theta, slots, offsets = graph_slots(model)
    x = np.concatenate([zs, mus], axis=1)
    loss = ad.ssum(ad.square(nets_mod.mlp_forward(model.S_part, x, params=slots["S"])))
    ad.backward(loss)
    g = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
    off, n = offsets["skew_M"]
    np.testing.assert_array_equal(g[off:off + n], np.zeros(n))
    off, n = offsets["S"]
    assert np.max(np.abs(g[off:off + n])) > 0


def test_dissipative_part_linear_in_friction_factor(rng):
    model = toy_model(seed=12)
    z = rng.normal(size=3)
    mu = rng.normal(size=2)
    before = model.operator_M(z, mu) @ model.grad_entropy(z, mu)
    # scaling T_M by sqrt(2) doubles B_M = T^T T exactly
    W, b = model.TM_net.layer_arrays()[-1]
    W *= np.sqrt(2.0)
    b *= np.sqrt(2.0)
    after = model.operator_M(z, mu) @ model.grad_entropy(z, mu)
    np.testing.assert_allclose(after, 2.0 * before, rtol=1e-12)


def test_known_functions_require_constant_latent(rng):
    known = systems.GasContainersSystem().known_functions()
    model = PGFinn.create(4, 1, known=known, seed=0)
    theta, slots, _ = graph_slots(model)
    z = ad.Node(rng.normal(size=(3, 4)))
    with pytest.raises(ValueError, match="constant latent"):
        model.field_nodes(z, rng.normal(size=(3, 1)), slots)


def test_known_mode_field_param_grad(rng):
    known = systems.GasContainersSystem().known_functions()
    model = PGFinn.create(4, 1, known=known, seed=13, hidden=(8, 8),
                          mu_range=([1.0], [50.0]))
    zs = np.abs(rng.normal(size=(3, 4))) + 0.5
    zs[:, 0] = np.clip(zs[:, 0], 0.3, 1.7)
    mus = rng.uniform(1, 50, size=(3, 1))

    theta, slots, offsets = graph_slots(model)
    loss = ad.ssum(ad.square(model.field_nodes(zs, mus, slots)))
    ad.backward(loss)
    g = theta.grad

    flat0, _ = flatten_trainables(model)

    def loss_value(flat):
        set_trainables(model, flat)
        return float(np.sum(model.vector_field(zs, mus) ** 2))

    g_fd = fd_grad(loss_value, flat0.copy())
    set_trainables(model, flat0)
    assert rel_err(g, g_fd) < 1e-4


# -- serialization ---------------------------------------------------------------

def test_model_roundtrip(tmp_path, rng):
    model = toy_model(seed=14)
    generic.save_model(model, tmp_path / "m")
    loaded = generic.load_model(tmp_path / "m")
    z = rng.normal(size=(5, 3))
    mu = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(loaded.vector_field(z, mu), model.vector_field(z, mu))


def test_known_model_roundtrip(tmp_path):
    known = systems.GasContainersSystem(m=2.0).known_functions()
    model = PGFinn.create(4, 1, known=known, seed=15, mu_range=([1.0], [50.0]))
    generic.save_model(model, tmp_path / "m")
    loaded = generic.load_model(tmp_path / "m")
    z = systems.GAS_INITIAL_STATE
    np.testing.assert_allclose(loaded.energy(z, [10.0]), model.energy(z, [10.0]), rtol=0)
    np.testing.assert_array_equal(loaded.vector_field(z, [10.0]), model.vector_field(z, [10.0]))
