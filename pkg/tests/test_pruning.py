import numpy as np
import pytest
from hypothesis import given, strategies as st

from certprune.network import ArchSpec, build_network, mlp_arch, predict, remain_ratio
from certprune.pruning import (PruneState, find_certified_tickets, iterative_prune, prune_round, prune_slim,
                               prune_structlth, prune_unstructured, saliency)
from certprune.training import TrainingDiverged


def linear_net(W, out=None):
    W = np.atleast_2d(np.asarray(W, dtype=np.float32))
    net = build_network(ArchSpec([{"kind": "affine", "in": W.shape[1], "out": W.shape[0]}], (W.shape[1],),
                                 W.shape[0]), prune_linear=True)
    net.layers[0].W.data = W.copy()
    return net


def test_magnitude_example():
    net = linear_net([[0.1, -0.05, 0.3, 0.2, -0.4]])
    masks, flagged = prune_unstructured(net, "magnitude", 0.2)
    assert masks[0].tolist() == [[True, False, True, True, True]] and flagged == []
    assert net.layers[0].W.data[0, 1] == 0.0


def test_snip_prunes_zero_gradient_weight_first():
    net = linear_net([[1.0, 0.5], [0.3, 0.7]])
    X = np.array([[0.0, 1.0], [0.0, 0.4]], dtype=np.float32)  # feature 0 carries no gradient
    y = np.array([1, 0])
    sal = saliency(net, "snip", (X, y))
    assert sal.scores[0][0, 0] == 0.0 and sal.scores[0][1, 0] == 0.0 and sal.scores[0][0, 1] > 0
    masks, _ = prune_unstructured(net, "snip", 0.25, (X, y))
    assert masks[0].tolist() == [[False, True], [True, True]]
    tay = saliency(net, "taylor", (X, y))
    assert tay.scores[0][1, 0] == 0.0


def test_saliency_needs_batch_and_is_deterministic():
    net = build_network(mlp_arch(2, (8,), 2), seed=0, prune_linear=True)
    with pytest.raises(ValueError):
        saliency(net, "snip")
    a = saliency(net, "random", seed=4).scores
    b = saliency(net, "random", seed=4).scores
    assert all(np.array_equal(a[i], b[i]) for i in a)
    X = np.random.default_rng(0).uniform(size=(40, 2)).astype(np.float32)
    y = (X[:, 0] > 0.5).astype(np.int64)
    m1 = prune_unstructured(net.copy(), "taylor", 0.3, (X, y))[0]
    m2 = prune_unstructured(net.copy(), "taylor", 0.3, (X, y))[0]
    assert all(np.array_equal(m1[i], m2[i]) for i in m1)


def test_magnitude_ties_go_to_lower_layer_then_index():
    net = build_network(mlp_arch(2, (2,), 2, bn=False), prune_linear=True)
    for i in net.prunable_indices():
        net.layers[i].W.data[:] = 1.0
    masks, _ = prune_unstructured(net, "magnitude", 0.25)  # 8 weights -> remove 2
    assert masks[0].reshape(-1).tolist() == [False, False, True, True]
    assert masks[2].all()


def test_layer_floor_is_flagged():
    net = build_network(mlp_arch(2, (1,), 2, bn=False), prune_linear=True)
    net.layers[0].W.data[:] = 1e-3
    masks, flagged = prune_unstructured(net, "magnitude", 0.75)
    assert int(masks[0].sum()) == 1 and 0 in flagged


def test_sixteen_rounds_track_geometric_ratio():
    net = build_network(mlp_arch(2, (32, 32, 32), 2), seed=0, prune_linear=True)
    total = net.dense_prunable
    prev = {i: m.copy() for i, m in net.masks.items()}
    for k in range(1, 17):
        prune_unstructured(net, "magnitude", 0.2)
        alive = sum(int(m.sum()) for m in net.masks.values())
        assert abs(alive - total * 0.8 ** k) <= k
        for i, m in net.masks.items():
            assert not np.any(m & ~prev[i])  # never resurrect
        prev = {i: m.copy() for i, m in net.masks.items()}
    assert remain_ratio(net) == pytest.approx(0.8 ** 16, abs=16 / total)
    assert round(remain_ratio(net), 2) == 0.03


@given(st.integers(0, 1000), st.floats(0.05, 0.6))
def test_mask_monotone_and_quota(seed, rate):
    net = build_network(mlp_arch(3, (6, 5), 2), seed=seed, prune_linear=True)
    before = {i: m.copy() for i, m in net.masks.items()}
    alive = sum(int(m.sum()) for m in before.values())
    prune_unstructured(net, "magnitude", rate)
    after = sum(int(m.sum()) for m in net.masks.values())
    assert alive - after == int(np.floor(rate * alive))
    for i, m in net.masks.items():
        assert not np.any(m & ~before[i])


def _bn_net(gammas):
    net = build_network(mlp_arch(2, (len(gammas),), 2), prune_linear=True)
    net.layers[1].gamma.data = np.asarray(gammas, dtype=np.float32)
    return net


def test_slim_examples():
    keep, flagged = prune_slim(_bn_net([0.9, 0.01, 0.5]), 0.34)
    assert keep == {0: [0, 2]} and flagged == []
    keep, _ = prune_slim(_bn_net([0.5, 0.5, 0.5]), 0.34)
    assert keep == {0: [1, 2]}
    net = build_network(mlp_arch(2, (2, 4), 2), prune_linear=True)
    net.layers[1].gamma.data = np.array([0.01, 0.02], dtype=np.float32)
    keep, flagged = prune_slim(net, 0.5)
    assert keep == {0: [1], 3: [2, 3]} and flagged == [0]
    net = build_network(mlp_arch(2, (3,), 2, bn=False), prune_linear=True)
    with pytest.raises(ValueError, match="batch-norm"):
        prune_slim(net, 0.3)


def test_structlth_example_refills_kept_channel():
    net = build_network(mlp_arch(2, (2,), 2, bn=False), prune_linear=True)
    net.layers[0].W.data = np.array([[1.0, 0.2], [0.3, 0.0]], dtype=np.float32)
    net.masks[0] = np.array([[True, True], [True, False]])
    keep, masks, flagged = prune_structlth(net, 0.5)
    assert keep == {0: [0]} and masks[0][0].all() and flagged == []


def test_structlth_without_mask_ranks_total_magnitude():
    net = build_network(mlp_arch(2, (3,), 2, bn=False), prune_linear=True)
    net.layers[0].W.data = np.array([[1.0, 1.0], [0.1, -0.1], [-0.5, 0.6]], dtype=np.float32)
    keep, _, _ = prune_structlth(net, 0.34)
    assert keep == {0: [0, 2]}


def test_structured_round_shrinks_network():
    net = build_network(mlp_arch(2, (10, 10), 2), seed=1, prune_linear=True)
    out, _ = prune_round(net, "slim", 0.2)
    assert [out.layers[i].W.shape[0] for i in (0, 3)] == [8, 8] or \
        sum(out.layers[i].W.shape[0] for i in (0, 3)) == 16
    out, _ = prune_round(build_network(mlp_arch(2, (10, 10), 2), seed=1, prune_linear=True), "structlth", 0.2)
    assert sum(out.layers[i].W.shape[0] for i in (0, 3)) == 16
    x = np.random.default_rng(0).uniform(size=(4, 2)).astype(np.float32)
    assert predict(out, x).shape == (4, 2)


def _run_loop(rounds, finetune=False, diverge_at=None, method="magnitude"):
    net = build_network(mlp_arch(2, (8, 8), 2), seed=2, prune_linear=True)
    snapshots = []

    def train_fn(net, k):
        if k == diverge_at:
            raise TrainingDiverged(3, [])
        for t in net.parameters():
            t.data = (t.data * 1.5 + 0.01).astype(np.float32)
        from certprune.network import apply_masks
        apply_masks(net)

    def evaluate_fn(net, k):
        return {"std_acc": 1.0, "verified_acc": 0.5}

    def on_round(net, state):
        snapshots.append(net.copy())

    before_train = []

    def spy(net, k):
        before_train.append({k2: v.copy() for k2, v in net.state_arrays().items()})
        train_fn(net, k)

    net, state = iterative_prune(spy, net, rounds, 0.2, method, evaluate_fn, seed=0, finetune=finetune,
                                 on_round=on_round)
    return net, state, before_train, snapshots


def test_loop_remain_ratios_and_rewind():
    net, state, before, snaps = _run_loop(4)
    ratios = [r["remain_ratio"] for r in state.rounds]
    total = net.dense_prunable
    for k, r in enumerate(ratios):
        assert abs(r * total - total * 0.8 ** k) <= k
    assert len(snaps) == 5 and [r["round"] for r in state.rounds] == [0, 1, 2, 3, 4]
    for k in range(1, 5):
        m = snaps[k].masks
        for name, v in before[k].items():
            init = snaps[k].snapshot[name]
            i = int(name.split(".")[0])
            if name.endswith(".W") and i in m:
                init = np.where(m[i], init, np.float32(0))
            assert v.tobytes() == init.tobytes(), (k, name)


def test_loop_finetune_keeps_trained_values():
    _, _, before, snaps = _run_loop(2, finetune=True)
    assert not np.array_equal(before[1]["0.b"], snaps[1].snapshot["0.b"])


def test_one_round_is_one_shot():
    net, state, _, _ = _run_loop(1)
    total = net.dense_prunable
    assert [r["round"] for r in state.rounds] == [0, 1]
    assert state.rounds[1]["remain_ratio"] == (total - np.floor(0.2 * total)) / total


def test_divergence_flagged_and_loop_continues():
    _, state, _, _ = _run_loop(3, diverge_at=2)
    assert state.rounds[2]["flags"] == "diverged@epoch3"
    assert len(state.rounds) == 4 and state.rounds[3]["flags"] == ""


def test_state_json_round_trip():
    _, state, _, _ = _run_loop(2)
    again = PruneState.from_json(state.to_json())
    assert again == state


def test_ticket_examples():
    st_ = PruneState(0.2, "magnitude", dense={"std_acc": 80, "verified_acc": 60},
                     rounds=[{"round": 0, "std_acc": 80, "verified_acc": 60},
                             {"round": 1, "std_acc": 81, "verified_acc": 61},
                             {"round": 2, "std_acc": 81, "verified_acc": 59},
                             {"round": 3, "std_acc": 79.5, "verified_acc": 59.5}])
    assert find_certified_tickets(st_) == [1]
    assert find_certified_tickets(st_, delta=1) == [1, 2, 3]
    with pytest.raises(ValueError):
        find_certified_tickets(PruneState(0.2, "magnitude"))
