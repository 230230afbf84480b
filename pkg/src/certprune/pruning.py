"""Pruning criteria, the iterative prune-rewind-retrain loop and certified tickets."""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .network import (_consumer, apply_masks, forward_network, remain_ratio, rewind,
                      shrink_structured)
from .training import TrainingDiverged

UNSTRUCTURED = ("random", "magnitude", "snip", "taylor")
STRUCTURED = ("slim", "structlth")
METHODS = UNSTRUCTURED + STRUCTURED
TAYLOR_CHUNK = 32


@dataclass
class SaliencyMap:
    scores: dict  # layer index -> array (higher = keep)
    criterion: str
    batch_digest: str = ""


def _batch_digest(batch):
    if batch is None:
        return ""
    h = hashlib.sha256()
    for a in batch:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _weight_grads(net, X, y):
    idx = net.prunable_indices()
    Ws = [net.layers[i].W for i in idx]
    with ad.Tape() as tape:
        loss = ad.cross_entropy(forward_network(net, X, "eval"), y)
    return dict(zip(idx, tape.gradient(loss, Ws)))


def saliency(net, method, batch=None, seed=0):
    """Per-weight scores for the prunable tensors."""
    idx = net.prunable_indices()
    W = {i: net.layers[i].W.data.astype(np.float64) for i in idx}
    if method == "magnitude":
        scores = {i: np.abs(w) for i, w in W.items()}
    elif method == "random":
        rng = np.random.default_rng(seed)
        scores = {i: rng.random(W[i].shape) for i in idx}
    elif method in ("snip", "taylor"):
        if batch is None:
            raise ValueError(f"{method} saliency needs a data batch")
        X, y = np.asarray(batch[0], dtype=np.float32), np.asarray(batch[1], dtype=np.int64)
        if method == "snip":
            g = _weight_grads(net, X, y)
            scores = {i: np.abs(W[i] * g[i]) for i in idx}
        else:
            scores = {i: np.zeros_like(W[i]) for i in idx}
            for s in range(0, len(X), TAYLOR_CHUNK):
                g = _weight_grads(net, X[s:s + TAYLOR_CHUNK], y[s:s + TAYLOR_CHUNK])
                for i in idx:
                    scores[i] += (W[i] * g[i]) ** 2
    else:
        raise ValueError(f"unknown unstructured criterion {method!r}")
    return SaliencyMap(scores, method, _batch_digest(batch))


def prune_unstructured(net, method, rate, batch=None, seed=0):
    """Mask the floor(rate * surviving) lowest-saliency surviving weights, globally.

    Ties go to the lower (layer, flat index).  A layer never loses its last
    surviving weight; such layers are returned in ``flagged``.  Returns
    (masks, flagged); the network's masks and weights are updated in place.
    """
    if not 0 < rate < 1:
        raise ValueError("rate must be in (0, 1)")
    sal = saliency(net, method, batch, seed)
    idx = net.prunable_indices()
    layer_ids, flat_ids, vals = [], [], []
    for i in idx:
        m = net.masks[i].reshape(-1)
        alive = np.flatnonzero(m)
        layer_ids.append(np.full(alive.size, i))
        flat_ids.append(alive)
        vals.append(sal.scores[i].reshape(-1)[alive])
    layer_ids = np.concatenate(layer_ids)
    flat_ids = np.concatenate(flat_ids)
    vals = np.concatenate(vals)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite saliency scores")
    quota = int(np.floor(rate * vals.size))
    order = np.lexsort((flat_ids, layer_ids, vals))
    alive_count = {i: int(net.masks[i].sum()) for i in idx}
    flat_masks = {i: net.masks[i].reshape(-1).copy() for i in idx}
    flagged = set()
    removed = 0
    for k in order:
        if removed == quota:
            break
        i = int(layer_ids[k])
        if alive_count[i] <= 1:
            flagged.add(i)
            continue
        flat_masks[i][flat_ids[k]] = False
        alive_count[i] -= 1
        removed += 1
    net.masks = {i: flat_masks[i].reshape(net.masks[i].shape) for i in idx}
    apply_masks(net)
    return net.masks, sorted(flagged)


def _channel_producers(net, need_bn):
    """Producing affine/conv layers whose output channels can be removed."""
    out = []
    for i in net.prunable_indices():
        try:
            _consumer(net, i)
        except ValueError:
            continue
        has_bn = i + 1 < len(net.layers) and net.layers[i + 1].kind == "bn"
        if need_bn and not has_bn:
            raise ValueError(f"layer {i} is not followed by batch-norm; slimming needs a BN scale")
        out.append(i)
    return out


def _rank_channels(scores, rate):
    """Global removal of the lowest-scoring rate-fraction of channels; floor 1 per layer."""
    entries = [(float(s), i, c) for i, v in scores.items() for c, s in enumerate(v)]
    entries.sort()
    quota = int(np.floor(rate * len(entries)))
    left = {i: len(v) for i, v in scores.items()}
    gone = {i: set() for i in scores}
    flagged = set()
    removed = 0
    for _, i, c in entries:
        if removed == quota:
            break
        if left[i] <= 1:
            flagged.add(i)
            continue
        gone[i].add(c)
        left[i] -= 1
        removed += 1
    keep = {i: [c for c in range(len(v)) if c not in gone[i]] for i, v in scores.items()}
    return keep, sorted(flagged)


def prune_slim(net, rate):
    """Channel keep sets from a global ranking of |gamma| of the following BN."""
    if not 0 < rate < 1:
        raise ValueError("rate must be in (0, 1)")
    scores = {i: np.abs(net.layers[i + 1].gamma.data.astype(np.float64))
              for i in _channel_producers(net, need_bn=True)}
    return _rank_channels(scores, rate)


def prune_structlth(net, rate):
    """Channels ranked by the surviving (unmasked) |w| in each output channel.

    Returns (keep sets, refilled masks, flagged); kept channels get all-ones
    masks in their producing layer.
    """
    if not 0 < rate < 1:
        raise ValueError("rate must be in (0, 1)")
    scores = {}
    for i in _channel_producers(net, need_bn=False):
        w = np.abs(net.layers[i].W.data.astype(np.float64)) * net.masks[i]
        scores[i] = w.reshape(w.shape[0], -1).sum(axis=1)
    keep, flagged = _rank_channels(scores, rate)
    masks = {i: m.copy() for i, m in net.masks.items()}
    for i in keep:
        masks[i][:] = True
    return keep, masks, flagged


# ---------------------------------------------------------------- state


@dataclass
class PruneState:
    rate: float
    method: str
    regularizer: str = "none"
    round: int = 0
    dense: dict = field(default_factory=dict)
    rounds: list = field(default_factory=list)  # one metrics dict per round, round 0 = dense

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def prune_round(net, method, rate, batch=None, seed=0):
    """One pruning step; returns (net, flagged).  Structured methods return a new net."""
    if method in UNSTRUCTURED:
        _, flagged = prune_unstructured(net, method, rate, batch, seed)
        return net, flagged
    if method == "slim":
        keep, flagged = prune_slim(net, rate)
        return shrink_structured(net, keep), flagged
    if method == "structlth":
        prune_unstructured(net, "magnitude", rate)
        keep, masks, flagged = prune_structlth(net, rate)
        net.masks = masks
        return shrink_structured(net, keep), flagged
    raise ValueError(f"unknown pruning method {method!r}")


def iterative_prune(train_fn, net, rounds, rate, method, evaluate_fn, regularizer="none",
                    batch=None, seed=0, finetune=False, on_round=None, start_state=None):
    """Round 0 trains the dense network; rounds 1..R prune, rewind, retrain.

    ``train_fn(net, round)`` trains in place (it may raise TrainingDiverged,
    after which the round is flagged and the loop continues from the state
    the trainer restored).  ``evaluate_fn(net, round)`` returns a metrics
    dict.  ``on_round(net, state)`` is called after each round (checkpoints).
    With ``finetune`` the surviving weights keep their trained values
    instead of being rewound.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if method not in METHODS:
        raise ValueError(f"unknown pruning method {method!r}")
    state = start_state or PruneState(rate, method, regularizer)

    def run(net, k, flags):
        try:
            train_fn(net, k)
        except TrainingDiverged as exc:
            flags.append(f"diverged@epoch{exc.epoch}")
        metrics = dict(evaluate_fn(net, k))
        metrics.update(round=k, remain_ratio=remain_ratio(net), flags=";".join(flags))
        state.rounds.append(metrics)
        state.round = k
        if k == 0:
            state.dense = dict(metrics)
        if on_round is not None:
            on_round(net, state)

    if not state.rounds:
        run(net, 0, [])
    for k in range(state.round + 1, rounds + 1):
        net, flagged = prune_round(net, method, rate, batch, seed + k)
        flags = [f"floor@layer{i}" for i in flagged]
        if not finetune:
            rewind(net)
        run(net, k, flags)
    return net, state


def find_certified_tickets(state, delta=0.0, std_key="std_acc", ver_key="verified_acc"):
    """Pruned rounds matching the dense standard and verified accuracy within delta."""
    if not state.dense:
        raise ValueError("dense baseline metrics missing")
    d_std, d_ver = state.dense[std_key], state.dense[ver_key]
    return [r["round"] for r in state.rounds
            if r["round"] > 0 and r[std_key] >= d_std - delta and r[ver_key] >= d_ver - delta]
