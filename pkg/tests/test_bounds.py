import numpy as np
import pytest
from hypothesis import given, strategies as st

from certprune import autodiff as ad
from certprune.bounds import (InputBox, LinearizedNet, build_margin_spec, classify_neurons, crown_bound,
                              crown_intermediate_batch, ibp_affine, ibp_batchnorm, ibp_relu, instability,
                              linearize, nrs_loss, propagate_ibp, propagate_ibp_batch, relu_relaxation,
                              rs_loss, stability_stats)
from certprune.network import ArchSpec, build_network, mlp_arch, predict, smallconv_arch
from certprune.nn import BatchNorm
from certprune.training import ibp_tensor_bounds, regularizer_term


def _bn(gamma, mean=0.0, var=1.0, beta=0.0):
    bn = BatchNorm(1, eps=0.0)
    bn.gamma.data[:] = gamma
    bn.beta.data[:] = beta
    bn.running_mean[:] = mean
    bn.running_var[:] = var
    return bn


def random_net(seed, max_layers=4, max_width=16, bn=True, in_dim=None):
    rng = np.random.default_rng(seed)
    in_dim = in_dim or int(rng.integers(1, 5))
    hidden = tuple(int(h) for h in rng.integers(1, max_width + 1, size=int(rng.integers(1, max_layers + 1))))
    net = build_network(mlp_arch(in_dim, hidden, int(rng.integers(2, 5)), bn=bn), seed=seed)
    for layer in net.layers:
        if layer.kind == "affine":
            layer.b.data = rng.normal(0, 0.5, layer.b.shape).astype(np.float32)
        elif layer.kind == "bn":
            c = layer.channels
            layer.gamma.data = rng.normal(0, 1.5, c).astype(np.float32)
            layer.beta.data = rng.normal(0, 0.5, c).astype(np.float32)
            layer.running_mean = rng.normal(0, 0.5, c).astype(np.float32)
            layer.running_var = rng.uniform(0.2, 2, c).astype(np.float32)
    return net


# ---------------------------------------------------------------- IBP examples


def test_ibp_affine_hand_example():
    W, b = np.array([[1.0, -1.0], [2.0, 0.0]]), np.array([0.0, 1.0])
    lo, hi = ibp_affine(np.array([0.0, -1.0]), np.array([1.0, 1.0]), (W, b))
    assert lo.tolist() == [-1.0, 1.0] and hi.tolist() == [2.0, 3.0]


def test_ibp_zero_width_is_forward_pass():
    W, b = np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([0.25, 1.0])
    x = np.array([0.3, -0.7])
    lo, hi = ibp_affine(x, x, (W, b))
    assert np.array_equal(lo, W @ x + b) and np.array_equal(hi, W @ x + b)


def test_ibp_batchnorm_examples():
    lo, hi = ibp_batchnorm(np.array([[-1.0]]), np.array([[1.0]]), _bn(1.0))
    assert lo.tolist() == [[-1.0]] and hi.tolist() == [[1.0]]
    lo, hi = ibp_batchnorm(np.array([[0.0]]), np.array([[1.0]]), _bn(-2.0))
    assert lo.tolist() == [[-2.0]] and hi.tolist() == [[0.0]]
    lo, hi = ibp_batchnorm(np.array([[-1.0]]), np.array([[1.0]]), _bn(3.0))
    assert lo.tolist() == [[-3.0]] and hi.tolist() == [[3.0]]
    with pytest.raises(ValueError):
        ibp_batchnorm(np.array([[0.0]]), np.array([[1.0]]), _bn(1.0, var=0.0))


def test_ibp_relu_phases():
    assert ibp_relu(np.array([-1.0]), np.array([2.0])) == pytest.approx((np.array([0.0]), np.array([2.0]), False))
    lo, hi, bad = ibp_relu(np.array([-1.0]), np.array([2.0]), np.array([-1]))
    assert lo.tolist() == [0.0] and hi.tolist() == [0.0] and not bad
    assert ibp_relu(np.array([1.0]), np.array([2.0]), np.array([-1]))[2]
    assert ibp_relu(np.array([-2.0]), np.array([-1.0]), np.array([1]))[2]


def test_eps_zero_collapses_to_activations():
    net = random_net(5, in_dim=3)
    x = np.array([0.2, 0.5, 0.9])
    b = propagate_ibp(net, InputBox.around(x, 0.0))
    acts = linearize(net).activations(x[None])
    for l, u, z in zip(b.pre_lower, b.pre_upper, acts):
        np.testing.assert_allclose(l, z, atol=1e-9)
        np.testing.assert_allclose(u, z, atol=1e-9)
    np.testing.assert_allclose(b.out_lower[0], predict(net, x[None].astype(np.float32))[0], atol=1e-5)


def test_input_box_clips_to_data_range():
    box = InputBox.around(np.array([0.02, 0.5]), 0.05)
    assert box.lower.tolist() == pytest.approx([0.0, 0.45])
    with pytest.raises(ValueError):
        InputBox.around(np.zeros(2), -0.1)


# ---------------------------------------------------------------- relaxation and CROWN


@pytest.mark.parametrize("l,u,slope,icpt,alpha", [(-1, 3, 0.75, 0.75, 1), (-3, 1, 0.25, 0.75, 0),
                                                 (-1, 1, 0.5, 0.5, 1)])
def test_relaxation_examples(l, u, slope, icpt, alpha):
    r = relu_relaxation(np.array([l]), np.array([u]))
    assert r.upper_slope[0] == pytest.approx(slope)
    assert r.upper_intercept[0] == pytest.approx(icpt)
    assert r.lower_slope[0] == alpha


def test_relaxation_rejects_stable():
    with pytest.raises(ValueError):
        relu_relaxation(np.array([0.0]), np.array([1.0]))


def test_crown_pure_affine_is_exact():
    net = build_network(ArchSpec([{"kind": "affine", "in": 2, "out": 2}], (2,), 2))
    net.layers[0].W.data = np.eye(2, dtype=np.float32)
    box = InputBox.from_bounds([-1.0, -1.0], [1.0, 1.0])
    assert crown_bound(net, box, spec=np.array([[2.0, -1.0]]))[0] == -3.0


def test_crown_infeasible_phases_give_inf():
    net = random_net(1, bn=False, in_dim=2)
    box = InputBox.around(np.array([0.5, 0.5]), 0.0)
    z = linearize(net).activations(np.array([[0.5, 0.5]]))[0][0]
    j = int(np.argmax(np.abs(z)))
    wrong = -1 if z[j] > 0 else 1
    spec = build_margin_spec(0, net.arch.num_classes, net.layers[-1])
    assert np.all(np.isinf(crown_bound(net, box, {(0, j): wrong}, spec)))


def test_margin_spec_identity_example():
    spec = build_margin_spec(0, 3, (np.eye(3), np.zeros(3)))
    assert spec.weights.tolist() == [[1, -1, 0], [1, 0, -1]] and spec.rivals == [1, 2]


def _sample_ball(rng, x, eps, n):
    lo, hi = np.clip(x - eps, 0, 1), np.clip(x + eps, 0, 1)
    pts = rng.uniform(lo, hi, size=(n, x.size))
    return np.vstack([pts, lo, hi])


@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.01, 0.05, 0.2]))
def test_bounds_are_sound(seed, eps):
    net = random_net(seed)
    lin = linearize(net)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=lin.input_dim)
    box = InputBox.around(x, eps)
    pts = _sample_ball(rng, x, eps, 200)
    acts = lin.activations(pts)
    ibp = propagate_ibp(lin, box)
    crown = crown_intermediate_batch(lin, box.lower, box.upper)
    for k, z in enumerate(acts):
        for b in (ibp, crown):
            assert np.all(z >= b.pre_lower[k] - 1e-5) and np.all(z <= b.pre_upper[k] + 1e-5)
        assert np.all(crown.pre_lower[k] >= ibp.pre_lower[k] - 1e-9)
    y = int(rng.integers(0, net.arch.num_classes))
    spec = build_margin_spec(y, net.arch.num_classes, net.layers[-1])
    lb = crown_bound(net, box, spec=spec)
    m = lin.forward(pts)
    margins = m[:, [y]] - m[:, spec.rivals]
    assert np.all(margins >= lb - 1e-5)


def test_conv_net_bounds_are_sound():
    net = build_network(smallconv_arch(1, 10, 3, width=2, hidden=6), seed=0)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(1, 10, 10))
    box = InputBox.around(x.reshape(-1), 0.02)
    b = propagate_ibp(net, box)
    lin = linearize(net)
    pts = _sample_ball(rng, x.reshape(-1), 0.02, 100)
    for k, z in enumerate(lin.activations(pts)):
        assert np.all(z >= b.pre_lower[k] - 1e-5) and np.all(z <= b.pre_upper[k] + 1e-5)
    out = predict(net, pts.reshape(-1, 1, 10, 10).astype(np.float32))
    assert np.all(out >= b.out_lower - 1e-4) and np.all(out <= b.out_upper + 1e-4)


@given(st.integers(0, 10_000))
def test_phase_constrained_bounds_sound_and_tighter(seed):
    net = random_net(seed, bn=False, in_dim=2)
    lin = linearize(net)
    rng = np.random.default_rng(seed)
    box = InputBox.around(rng.uniform(size=2), 0.2)
    free = crown_intermediate_batch(lin, box.lower, box.upper)
    unstable = [(k, j) for k, (l, u) in enumerate(zip(free.pre_lower, free.pre_upper))
                for j in np.flatnonzero((l[0] < 0) & (u[0] > 0))]
    if not unstable:
        return
    k, j = unstable[int(rng.integers(len(unstable)))]
    for p in (1, -1):
        phases = [np.zeros((1, n), dtype=np.int8) for n in lin.relu_sizes]
        phases[k][0, j] = p
        con = crown_intermediate_batch(lin, box.lower, box.upper, phases,
                                       prior=(free.pre_lower, free.pre_upper))
        pts = _sample_ball(rng, box.center, 0.2, 500)
        acts = lin.activations(pts)
        inside = p * acts[k][:, j] >= 0
        if con.infeasible[0]:
            assert not np.any(p * acts[k][:, j] > 1e-7)
            continue
        for a, b, z in zip(con.pre_lower, free.pre_lower, acts):
            assert np.all(a >= b)
            assert np.all(z[inside] >= a - 1e-6)
        for a, b, z in zip(con.pre_upper, free.pre_upper, acts):
            assert np.all(a <= b)
            assert np.all(z[inside] <= a + 1e-6)


@given(st.integers(0, 10_000))
def test_zeroing_a_weight_never_widens_interval(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(1, 8, size=2)
    W = rng.normal(size=(m, n))
    lo = rng.normal(size=n)
    hi = lo + rng.uniform(0, 2, size=n)
    before = ibp_affine(lo, hi, (W, np.zeros(m)))
    W2 = W.copy()
    W2[rng.integers(m), rng.integers(n)] = 0.0
    after = ibp_affine(lo, hi, (W2, np.zeros(m)))
    assert np.all(after[1] - after[0] <= before[1] - before[0] + 1e-12)


# ---------------------------------------------------------------- stability metrics and regularizers


def test_classify_examples():
    from certprune.bounds import LayerBounds

    b = LayerBounds([np.array([[-1.0, 0.0, -3.0]])], [np.array([[2.0, 2.0, -1.0]])], [None], [None],
                    None, None, None)
    rep = classify_neurons(b)
    assert rep.labels[0].tolist() == [[0, 1, -1]] and rep.unstable_count == 1


def test_instability_examples():
    from certprune.bounds import LayerBounds

    def lb(l, u):
        return LayerBounds([np.array(l, dtype=float)], [np.array(u, dtype=float)], [None], [None], None, None, None)

    assert instability(lb([-1.0], [1.0]))[0] == 1.0
    assert instability(lb([-1.0, 1.0, -3.0], [2.0, 2.0, -1.0]))[0] == -3.0


def test_rs_and_nrs_examples():
    assert float(rs_loss(np.array([-1.0]), np.array([1.0])).data) == 0.0
    assert float(rs_loss(np.array([-2.0]), np.array([2.0])).data) == pytest.approx(0.99505, abs=1e-5)
    assert float(rs_loss(np.array([1.0]), np.array([2.0])).data) == pytest.approx(-0.99505, abs=1e-5)
    assert float(nrs_loss(np.array([-2.0]), np.array([2.0]), np.array([2.0])).data) == 0.0


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=10))
def test_nrs_with_unit_gamma_is_rs(pairs):
    l, u = np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
    with ad.precision(np.float64):
        a = float(nrs_loss(l, u, np.ones_like(l)).data)
        b = float(rs_loss(l, u).data)
    assert abs(a - b) <= 1e-12


def test_nrs_skips_zero_gamma():
    rep = {}
    v = nrs_loss(np.array([-2.0, -1.0]), np.array([2.0, 1.0]), np.array([0.0, 1.0]), rep)
    assert rep["skipped"] == 1 and float(v.data) == 0.0


def test_nrs_gradient_wrt_gamma_is_exactly_zero():
    rng = np.random.default_rng(0)
    moved = False
    for _ in range(100):
        n = int(rng.integers(1, 6))
        l = ad.Tensor(rng.normal(size=n) - 1, requires_grad=True)
        u = ad.Tensor(rng.normal(size=n) + 1, requires_grad=True)
        g = ad.Tensor(rng.uniform(0.2, 3, size=n) * rng.choice([-1, 1], size=n), requires_grad=True)
        with ad.Tape() as tape:
            loss = nrs_loss(l, u, g)
        gl, gu, gg = tape.gradient(loss, [l, u, g])
        assert np.array_equal(gg, np.zeros(n))
        moved = moved or np.any(gl != 0) or np.any(gu != 0)
    assert moved


def test_regularizer_bound_pass_has_zero_gamma_gradient():
    net = random_net(3, bn=True, in_dim=2)
    x = np.random.default_rng(3).uniform(size=(16, 2)).astype(np.float32)
    gammas = [layer.gamma for layer in net.layers if layer.kind == "bn"]
    with ad.Tape() as tape:
        _, _, rec = ibp_tensor_bounds(net, x - 0.05, x + 0.05, stop_gamma=True)
        reg = regularizer_term(rec, "nrs")
    grads = tape.gradient(reg, gammas + [net.layers[0].W])
    assert all(np.array_equal(g, np.zeros_like(g)) for g in grads[:-1])
    assert np.any(grads[-1] != 0)


def test_stability_stats_shapes():
    net = random_net(2, in_dim=2)
    st_ = stability_stats(net, np.random.default_rng(0).uniform(size=(10, 2)), 0.05)
    assert 0.0 <= st_["unstable_ratio"] <= 1.0 and set(st_) == {"unstable_ratio", "instability_sum",
                                                                 "instability_mean"}


def test_tensor_bounds_match_numpy_ibp():
    net = random_net(7, in_dim=3)
    x = np.random.default_rng(7).uniform(size=(4, 3))
    lo, hi = np.clip(x - 0.1, 0, 1), np.clip(x + 0.1, 0, 1)
    with ad.precision(np.float64):
        tl, th, rec = ibp_tensor_bounds(net, lo, hi)
    b = propagate_ibp_batch(net, lo, hi)
    np.testing.assert_allclose(tl.data, b.out_lower, atol=1e-4)
    np.testing.assert_allclose(th.data, b.out_upper, atol=1e-4)
    for (l, u, _), bl, bu in zip(rec, b.pre_lower, b.pre_upper):
        np.testing.assert_allclose(l.data, bl, atol=1e-4)
        np.testing.assert_allclose(u.data, bu, atol=1e-4)
