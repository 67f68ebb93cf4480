import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridauction.autodiff import grad_check
from hybridauction.data import PopulationSpec, generate, setting_from_preset
from hybridauction.model import AuctionInstance, AuctionSetting, BidProfile
from hybridauction.network import (HybridRegretNet, NetworkParams, assemble_z, build_inputs, c_cap_layer,
                                   min_softmax_layer, payment_head, z_to_a)

from oracles import reference_forward


def random_params(net, rng, scale=3.0):
    p = net.init_params(rng)
    return NetworkParams({k: v + rng.normal(scale=scale / np.sqrt(v.shape[0]), size=v.shape)
                          for k, v in p.items()})


def test_min_softmax_worked_example():
    S1 = np.zeros((2, 2))
    S2 = np.zeros((2, 2))
    np.testing.assert_allclose(min_softmax_layer(S1, S2), [[0.5], [0.5]])


def test_c_cap_sums_to_cap():
    H = np.random.default_rng(0).normal(size=(4, 3))
    assert c_cap_layer(H, 2).sum() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        c_cap_layer(H, -1)


def test_assemble_z_and_z_to_a():
    S3 = np.array([[0.5, 0.2], [0.3, 0.1], [0.2, 0.6]])
    Hc = np.array([[0.1, 0.9]])
    Z = assemble_z(S3, Hc)
    np.testing.assert_allclose(Z, [[0.1, 0.2], [0.3, 0.1], [0.2, 0.6]])
    inst = AuctionInstance([0.5, 2.0], [[0], [1]])  # one bundle (store 1, brand 0)
    A = z_to_a(Z, inst)
    np.testing.assert_allclose(A, [[0.15, 0.05], [0.4 + 0.1, 1.2 + 0.2], [0.1, 0.2]])
    with pytest.raises(ValueError):
        z_to_a(Z[:2], inst)


def test_build_inputs_and_payment_head():
    s = AuctionSetting(2, 1, 2, 1, (0.5, 0.25))
    inst = AuctionInstance([2.0, 1.0], [[1], [0]])
    b = BidProfile([0.4, 0.8], [0.6])
    bundle, store, mask = build_inputs(s, inst, b)
    np.testing.assert_allclose(bundle, [0.2, 0.1, 0.4, 0.2, 0.3, 0.15, 1, 0])
    np.testing.assert_allclose(store, [0.4, 0.2, 0.4, 0.2])
    np.testing.assert_array_equal(mask, [1, 0])
    A = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    pay, frac = payment_head(np.zeros(3), A, s, b)
    np.testing.assert_allclose(frac, 0.5)
    np.testing.assert_allclose(pay, [0.5 * 0.4 * 0.5, 0.0, 0.5 * 0.6 * 0.5])


@pytest.mark.parametrize("preset,C", [("A", 1), ("B", 2), ("D", 3)])
def test_graph_matches_reference(preset, C):
    rng = np.random.default_rng(5)
    s = setting_from_preset(preset, C)
    net = HybridRegretNet(s, hidden=(16, 8), store_hidden=(6,))
    p = random_params(net, rng)
    samples = generate(PopulationSpec(preset, C), 12, seed=4)
    res = net.forward(p, samples.values, samples.alphas, samples.adjacency)
    for l in range(len(samples)):
        A, pay, _ = reference_forward(s, p.arrays, samples.alphas[l], samples.adjacency[l], samples.values[l], 2, 1)
        np.testing.assert_allclose(res.outcome.allocation[l], A, atol=1e-12)
        np.testing.assert_allclose(res.outcome.payments[l], pay, atol=1e-12)


def test_mechanism_forward_single():
    s = setting_from_preset("A", 1)
    net = HybridRegretNet(s, hidden=(8,), store_hidden=(4,))
    p = net.init_params(np.random.default_rng(0))
    inst = AuctionInstance([1.0, 0.7], [[1, 0], [1, 1]])
    out = net.mechanism_forward(p, inst, BidProfile([0.3, 0.9], [0.5, 0.1]))
    assert out.allocation.shape == (4, 1) and out.payments.shape == (4,)


def test_params_roundtrip(tmp_path):
    s = setting_from_preset("B", 2)
    net = HybridRegretNet(s)
    p = net.init_params(np.random.default_rng(0))
    assert p.size == sum(np.prod(v) for v in net.shapes.values())
    p.save(tmp_path / "p.npz", meta={"seed": 1})
    q, meta = NetworkParams.load(tmp_path / "p.npz")
    assert meta == {"seed": 1}
    for k in p:
        np.testing.assert_array_equal(p[k], q[k])
    net.check_params(q)
    bad = q.copy()
    bad.arrays["h_w"] = bad["h_w"][:, :-1]
    with pytest.raises(ValueError):
        net.check_params(bad)


def test_init_statistics():
    net = HybridRegretNet(setting_from_preset("B", 1))
    p = net.init_params(np.random.default_rng(0))
    assert not p["bundle_b1"].any()
    w = p["bundle_w2"]
    assert w.std() == pytest.approx(1 / np.sqrt(w.shape[0]), rel=0.05)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["A", "B", "C", "D"]), st.floats(0.0, 1.0))
def test_feasible_and_ir_for_any_params(seed, preset, frac_c):
    rng = np.random.default_rng(seed)
    K = setting_from_preset(preset, 0).K
    s = setting_from_preset(preset, int(round(frac_c * K)))
    net = HybridRegretNet(s, hidden=(12,), store_hidden=(5,))
    p = random_params(net, rng, scale=float(rng.uniform(0.1, 20)))
    dens = float(rng.uniform(0.05, 1.0))
    samples = generate(PopulationSpec(preset, s.C, density=dens), 16, seed=seed % 1000)
    res = net.forward(p, samples.values, samples.alphas, samples.adjacency)
    z = res.z
    R = s.max_bundles
    adj = samples.adjacency.reshape(len(samples), R)
    assert (z >= 0).all()
    assert (z.sum(axis=1) <= 1 + 1e-9).all()          # one candidate per slot
    assert (z.sum(axis=2) <= 1 + 1e-9).all()          # one slot per candidate
    assert (z[:, :R].sum(axis=(1, 2)) <= s.C + 1e-9).all()
    assert (z[:, :R][adj == 0] == 0).all()
    g = res.outcome.expected_ctr(s.theta)
    assert (res.outcome.payments >= 0).all()
    assert (res.outcome.payments <= samples.values * g + 1e-12).all()
    assert (res.utilities >= -1e-12).all()


def test_gradient_wrt_bids_and_params():
    s = setting_from_preset("A", 1)
    net = HybridRegretNet(s, hidden=(6,), store_hidden=(3,))
    rng = np.random.default_rng(2)
    p = random_params(net, rng, scale=1.0)
    samples = generate(PopulationSpec("A", 1), 3, seed=1)
    bind = net.bindings(p, samples.values, samples.alphas, samples.adjacency)
    wrt = [net.nodes["bids"]] + [net.nodes["params"][k] for k in ("bundle_w1", "pay_b", "s1_store_w", "h_b")]
    rep = grad_check(net.graph, bind, net.nodes["util"], wrt, h=1e-6, tol=1e-5)
    assert rep.passed, rep.blocks


def test_constructor_validation():
    with pytest.raises(ValueError):
        HybridRegretNet(setting_from_preset("A", 1), hidden=())
