from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from certprune import autodiff as ad
from certprune import training
from certprune.bounds import propagate_ibp_batch
from certprune.data import Dataset, gen_two_moons
from certprune.network import build_network, mlp_arch
from certprune.training import (TrainConfig, TrainingDiverged, batch_loss, eps_schedule, evaluate, fgsm_example,
                                ibp_tensor_bounds, lr_at, regularized_loss, regularizer_term, train,
                                worst_case_logits)


def moons(seed=0, n=500):
    return gen_two_moons(n, 0.1, seed)


def desk(method="standard", reg="none", **kw):
    return TrainConfig.preset("desk", method, reg, **kw)


def test_paper_preset_eps_schedule():
    cfg = TrainConfig.preset("paper")
    assert eps_schedule(10, cfg) == 0
    assert eps_schedule(11, cfg) == 0
    assert eps_schedule(80, cfg) == Fraction(2, 255)
    assert eps_schedule(200, cfg) == Fraction(2, 255)
    assert eps_schedule(46, cfg) == Fraction(46 - 11, 80 - 11) * Fraction(2, 255)
    with pytest.raises(ValueError):
        eps_schedule(0, cfg)


@given(st.integers(1, 200))
def test_eps_schedule_closed_form(epoch):
    cfg = TrainConfig.preset("paper")
    e = eps_schedule(epoch, cfg)
    if epoch <= 11:
        assert e == 0
    elif epoch >= 80:
        assert e == Fraction(2, 255)
    else:
        assert e == Fraction(2, 255) * (epoch - 11) / 69


def test_lr_decay_paper_preset():
    cfg = TrainConfig.preset("paper", "fgsm")
    assert lr_at(140, cfg) == 0.01
    assert lr_at(141, cfg) == pytest.approx(0.01 * 0.1)
    assert lr_at(171, cfg) == pytest.approx(0.01 * 0.1 * 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(ramp_start=30, ramp_end=20)
    with pytest.raises(ValueError):
        TrainConfig(kappa=1.5)
    with pytest.raises(ValueError):
        TrainConfig(eps_target=Fraction(-1, 10))
    with pytest.raises(ValueError):
        TrainConfig(method="pgd")


def test_fgsm_examples():
    net = build_network(mlp_arch(2, (4,), 2), seed=0)
    x = np.array([[0.5, 0.5]], dtype=np.float32)
    out = fgsm_example(net, x, [0], 0.1, grad=np.array([[0.3, -0.2]]))
    np.testing.assert_allclose(out, [[0.6, 0.4]], rtol=1e-6)
    assert np.array_equal(fgsm_example(net, x, [0], 0.0), x)
    edge = np.array([[1.0, 0.5]], dtype=np.float32)
    assert fgsm_example(net, edge, [0], 0.1, grad=np.array([[1.0, 0.0]]))[0].tolist() == [1.0, 0.5]


def test_worst_case_logits_example():
    wc = worst_case_logits(np.array([[1.0, -1.0]]), np.array([[2.0, 0.0]]), [0])
    assert wc.data.tolist() == [[1.0, 0.0]]


@given(st.integers(0, 1000))
def test_worst_case_ce_dominates_clean(seed):
    net = build_network(mlp_arch(2, (8, 8), 3), seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(16, 2)).astype(np.float32)
    y = rng.integers(0, 3, size=16)
    with ad.precision(np.float64):
        clean = net_logits = training.forward_network(net, x.astype(np.float64)).data
        lo, hi, _ = ibp_tensor_bounds(net, x.astype(np.float64), x.astype(np.float64))
        np.testing.assert_allclose(worst_case_logits(lo, hi, y).data, net_logits, atol=1e-6)
        lo, hi, _ = ibp_tensor_bounds(net, x - 0.05, x + 0.05)
        robust = float(ad.cross_entropy(worst_case_logits(lo, hi, y), y).data)
        assert robust >= float(ad.cross_entropy(ad.Tensor(clean), y).data) - 1e-9


def _records(net, x, eps=0.05, stop_gamma=False):
    return ibp_tensor_bounds(net, x - eps, x + eps, stop_gamma=stop_gamma)[2]


def test_regularized_loss_passthrough_cases():
    net = build_network(mlp_arch(2, (4,), 2), seed=0)
    x = np.random.default_rng(0).uniform(size=(4, 2)).astype(np.float32)
    base = ad.Tensor(1.25)
    loss, reg = regularized_loss(base, net, _records(net, x), desk(reg="none"))
    assert loss is base and reg is None
    loss, reg = regularized_loss(base, net, _records(net, x), desk(reg="nrs", reg_weight=0.0))
    assert loss is base
    loss, reg = regularized_loss(base, net, _records(net, x), desk(reg="rs"))
    assert float(loss.data) == pytest.approx(1.25 + 0.01 * float(reg.data))
    loss, _ = regularized_loss(base, net, [], desk(slim_l1=1e-4))
    assert float(loss.data) == pytest.approx(1.25 + 1e-4 * 4)


def test_nrs_regularizer_blind_to_gamma_but_total_loss_is_not():
    net = build_network(mlp_arch(2, (6, 6), 2), seed=1)
    x = np.random.default_rng(1).uniform(0.2, 0.8, size=(32, 2)).astype(np.float32)
    y = (x[:, 0] > 0.5).astype(np.int64)
    gammas = [l.gamma for l in net.layers if l.kind == "bn"]
    cfg = desk("ibp-certified", "nrs")
    with ad.Tape() as tape:
        loss, reg = batch_loss(net, x, y, 0.05, cfg)
    g_total = tape.gradient(loss, gammas)
    assert any(np.any(g != 0) for g in g_total)
    with ad.Tape() as tape:
        reg2 = regularizer_term(_records(net, x, stop_gamma=True), "nrs")
    assert all(np.array_equal(g, 0 * g) for g in tape.gradient(reg2, gammas))


def test_nrs_term_value_is_invariant_to_last_gamma_scaling():
    net = build_network(mlp_arch(2, (6, 6), 2), seed=2)
    x = np.random.default_rng(2).uniform(size=(16, 2))
    last = [l for l in net.layers if l.kind == "bn"][-1]
    with ad.precision(np.float64):
        ref = float(regularizer_term(_records(net, x), "nrs").data)
        last.gamma.data = last.gamma.data * np.float32(1.001)
        moved = float(regularizer_term(_records(net, x), "nrs").data)
        rs_ref = float(regularizer_term(_records(net, x), "rs").data)
        last.gamma.data = last.gamma.data * np.float32(1.5)
        rs_moved = float(regularizer_term(_records(net, x), "rs").data)
    assert abs(moved - ref) <= 1e-6 * abs(ref)
    assert rs_moved != rs_ref


def test_kappa_one_robust_loss_dominates_standard():
    data = moons()
    x, y = data.train.X[:64], data.train.y[:64]
    net = build_network(mlp_arch(2, (8, 8), 2), seed=0)
    std, _ = batch_loss(net.copy(), x, y, 0.05, desk("standard"))
    rob, _ = batch_loss(net.copy(), x, y, 0.05, desk("ibp-certified", kappa=1.0))
    assert float(rob.data) >= float(std.data)
    zero, _ = batch_loss(net.copy(), x, y, 0.0, desk("ibp-certified", kappa=1.0))
    assert float(zero.data) == float(std.data)


def test_training_is_deterministic():
    data = moons(n=300)
    runs = []
    for _ in range(2):
        net = build_network(mlp_arch(2, (8, 8), 2), seed=3)
        h = train(net, data.train, desk("ibp-certified", "nrs", epochs=6, ramp_start=2, ramp_end=4,
                                        milestones=(5,)))
        runs.append(([vars(m) for m in h], {k: v.tobytes() for k, v in net.state_arrays().items()}))
    assert runs[0] == runs[1]
    assert [m["eps"] for m in runs[0][0]] == [float(np.float32(v)) for v in (0, 0, 0.025, 0.05, 0.05, 0.05)]


def test_masked_weights_stay_zero_during_training():
    data = moons(n=200)
    net = build_network(mlp_arch(2, (8,), 2), seed=0, prune_linear=True)
    net.masks[0][:4] = False
    train(net, data.train, desk(epochs=3, ramp_start=1, ramp_end=2, milestones=()))
    assert np.all(net.layers[0].W.data[:4] == 0)


def test_divergence_restores_last_good_epoch(monkeypatch):
    data = moons(n=200)
    net = build_network(mlp_arch(2, (8,), 2), seed=0)
    real = training.batch_loss
    after_epoch = {}

    def flaky(net, xb, yb, eps, config, rng=None):
        loss, reg = real(net, xb, yb, eps, config, rng)
        if flaky.epoch == 2:
            return loss * np.nan, reg
        return loss, reg

    flaky.epoch = 1

    def on_epoch(m):
        after_epoch[m.epoch] = {k: v.copy() for k, v in net.state_arrays().items()}
        flaky.epoch = m.epoch + 1

    monkeypatch.setattr(training, "batch_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(net, data.train, desk(epochs=3, ramp_start=1, ramp_end=2, milestones=()), on_epoch=on_epoch)
    assert info.value.epoch == 2 and len(info.value.metrics) == 1
    for k, v in net.state_arrays().items():
        assert v.tobytes() == after_epoch[1][k].tobytes()


def test_standard_training_reaches_high_accuracy():
    accs = []
    for seed in range(5):
        data = gen_two_moons(1000, 0.1, seed)
        net = build_network(mlp_arch(), seed=seed)
        h = train(net, data.train, desk("standard", seed=seed))
        accs.append(h[-1].std_acc)
    assert np.mean(accs) >= 0.95


def test_fgsm_training_runs_and_tracks_adv_acc():
    data = moons(n=300)
    net = build_network(mlp_arch(2, (16, 16), 2), seed=0)
    h = train(net, data.train, TrainConfig.preset("desk", "fgsm", epochs=5, ramp_start=1, ramp_end=3,
                                                  milestones=(4,)))
    assert all(0 <= m.adv_acc <= 1 for m in h) and h[-1].eps == float(np.float32(0.05))


def test_evaluate_examples():
    data = moons()
    net = build_network(mlp_arch(2, (8,), 2), seed=0)
    train(net, data.train, desk(epochs=5, ramp_start=1, ramp_end=2, milestones=()))
    r = evaluate(net, data.test, 0.0)
    assert r["std_acc"] == r["adv_acc_fgsm"] == r["adv_acc_pgd"]
    r = evaluate(net, data.test, 0.05)
    assert r["adv_acc_pgd"] <= r["std_acc"] and r["adv_acc_fgsm"] <= r["std_acc"]
    const = build_network(mlp_arch(2, (4,), 2, bn=False), seed=0)
    for layer in const.layers:
        if layer.kind == "affine":
            layer.W.data[:] = 0
    const.layers[-1].b.data = np.array([1.0, 0.0], dtype=np.float32)
    prior = float((data.test.y == 0).mean())
    assert evaluate(const, data.test, 0.0)["std_acc"] == pytest.approx(prior)


def test_epoch_metrics_use_ibp_for_certified_method():
    data = moons(n=200)
    net = build_network(mlp_arch(2, (8,), 2), seed=0)
    cfg = desk("ibp-certified", epochs=3, ramp_start=1, ramp_end=2, milestones=())
    h = train(net, data.train, cfg)
    X, Y = data.train.X, data.train.y
    b = propagate_ibp_batch(net, np.clip(X - np.float32(0.05), 0, 1), np.clip(X + np.float32(0.05), 0, 1))
    wc = np.where(np.eye(2, dtype=bool)[Y], b.out_lower, b.out_upper)
    assert h[-1].adv_acc == float((wc.argmax(axis=1) == Y).mean())
