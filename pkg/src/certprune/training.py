"""Standard, FGSM-adversarial and IBP-certified training with stability regularizers."""

import csv
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .bounds import nrs_terms, propagate_ibp_batch, stability_stats
from .network import apply_masks, forward_network
from .nn import channel_view
from .optim import OptimState, clip_grad_norm, optimizer_step

METHODS = ("standard", "fgsm", "ibp-certified")
REGULARIZERS = ("none", "rs", "nrs")
METRIC_COLUMNS = ("epoch", "eps", "loss", "reg_loss", "std_acc", "adv_acc", "instability_mean")


class TrainingDiverged(RuntimeError):
    """Raised when a batch loss is non-finite; the network holds the last good epoch."""

    def __init__(self, epoch, metrics):
        super().__init__(f"non-finite loss in epoch {epoch}; restored state after epoch {epoch - 1}")
        self.epoch = epoch
        self.metrics = metrics


@dataclass
class TrainConfig:
    method: str = "ibp-certified"
    epochs: int = 60
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    milestones: tuple = (42, 51)
    decay_factor: float = 0.1
    grad_clip: float = 8.0
    eps_target: Fraction = Fraction(1, 20)
    ramp_start: int = 4
    ramp_end: int = 24
    regularizer: str = "none"
    reg_weight: float = 0.0
    kappa: float = 0.5
    slim_l1: float = 0.0
    fgsm_random_init: bool = False
    eval_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.eps_target = Fraction(self.eps_target)
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if not 1 <= self.ramp_start <= self.ramp_end <= self.epochs:
            raise ValueError("need 1 <= ramp_start <= ramp_end <= epochs")
        if self.eps_target < 0:
            raise ValueError("eps_target must be >= 0")
        if not 0 <= self.kappa <= 1:
            raise ValueError("kappa must be in [0, 1]")
        if self.batch_size < 1 or self.grad_clip <= 0:
            raise ValueError("batch_size and grad_clip must be positive")

    @classmethod
    def preset(cls, name, method="ibp-certified", regularizer="none", **overrides):
        if name == "paper":
            base = dict(epochs=200, milestones=(140, 170), ramp_start=11, ramp_end=80,
                        eps_target=Fraction(2, 255))
        elif name == "desk":
            base = dict(epochs=60, milestones=(42, 51), ramp_start=4, ramp_end=24,
                        eps_target=Fraction(1, 20))
        else:
            raise ValueError(f"unknown training preset {name!r}")
        if method == "fgsm":
            base.update(optimizer="sgd", lr=0.01, momentum=0.9, weight_decay=5e-4)
        else:
            base.update(optimizer="adam", lr=1e-3, weight_decay=0.0 if regularizer != "none" else 1e-5)
        base.update(method=method, regularizer=regularizer,
                    reg_weight=0.01 if regularizer != "none" else 0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["eps_target"] = f"{self.eps_target.numerator}/{self.eps_target.denominator}"
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class EpochMetrics:
    epoch: int
    eps: float
    loss: float
    reg_loss: float
    std_acc: float
    adv_acc: float
    instability_mean: float


# ---------------------------------------------------------------- schedules


def eps_schedule(epoch, config):
    """Exact epsilon for a 1-based epoch: 0 before the ramp, linear, then flat."""
    if epoch < 1:
        raise ValueError("epoch is 1-based")
    s, e, target = config.ramp_start, config.ramp_end, Fraction(config.eps_target)
    if epoch < s:
        return Fraction(0)
    if epoch >= e:
        return target
    return Fraction(epoch - s, e - s) * target


def lr_at(epoch, config):
    """Learning rate for a 1-based epoch: decayed once per milestone already passed."""
    passed = sum(1 for m in config.milestones if m <= epoch - 1)
    return config.lr * config.decay_factor ** passed


# ---------------------------------------------------------------- attacks and bounds


def _ball(x, eps, data_range=(0.0, 1.0)):
    lo, hi = x - eps, x + eps
    if data_range is not None:
        lo, hi = np.clip(lo, *data_range), np.clip(hi, *data_range)
    return lo.astype(np.float32), hi.astype(np.float32)


def input_gradient(net, x, y, mode="eval"):
    xt = ad.Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.cross_entropy(forward_network(net, xt, mode), y)
    (g,) = tape.gradient(loss, [xt])
    return g


def fgsm_example(net, x, y, eps, data_range=(0.0, 1.0), mode="eval", rng=None, grad=None):
    """One signed-gradient step of size eps, clamped to the ball and data range.

    ``grad`` overrides the loss gradient (for testing); with ``rng`` given the
    step starts from a uniform random point in the ball.
    """
    x = np.asarray(x, dtype=np.float32)
    lo, hi = _ball(x, eps, data_range)
    start = x if rng is None else rng.uniform(lo, hi).astype(np.float32)
    if eps == 0:
        return x.copy()
    g = input_gradient(net, start, y, mode) if grad is None else np.asarray(grad)
    return np.clip(start + np.float32(eps) * np.sign(g), lo, hi).astype(np.float32)


def ibp_tensor_bounds(net, lower, upper, stats=None, stop_gamma=False):
    """Interval bounds as autodiff tensors.

    Returns (out_lower, out_upper, records) where records holds one
    (pre-activation lower, upper, gamma or None) per ReLU layer, each
    flattened to (N, n).  BN uses the clean-batch statistics in ``stats``
    when provided (training), else running statistics.  With ``stop_gamma``
    every BN scale is behind a stop-gradient.
    """
    lo, hi = ad.as_tensor(lower), ad.as_tensor(upper)
    records = []
    gamma = None
    for layer in net.layers:
        kind = layer.kind
        if kind in ("affine", "conv"):
            mu, r = (hi + lo) * 0.5, (hi - lo) * 0.5
            absW = ad.absolute(layer.W)
            if kind == "affine":
                mu, r = ad.linear(mu, layer.W, layer.b), ad.matmul(r, ad.transpose(absW))
            else:
                zero = ad.Tensor(np.zeros_like(layer.b.data))
                mu = ad.conv2d(mu, layer.W, layer.b, layer.stride, layer.padding)
                r = ad.conv2d(r, absW, zero, layer.stride, layer.padding)
            lo, hi = mu - r, mu + r
            gamma = None
        elif kind == "bn":
            g = ad.stop_gradient(layer.gamma) if stop_gamma else layer.gamma
            if stats is not None and id(layer) in stats:
                mean, var = stats[id(layer)]
                inv = 1.0 / ad.sqrt(var + layer.eps)
            else:
                mean = channel_view(layer.running_mean, lo.ndim)
                inv = ad.Tensor(channel_view(1.0 / np.sqrt(layer.running_var + np.float32(layer.eps)), lo.ndim))
            s = channel_view(g, lo.ndim) * inv
            beta = channel_view(layer.beta, lo.ndim)
            mu, r = (hi + lo) * 0.5, (hi - lo) * 0.5
            mu = (mu - mean) * s + beta
            r = r * ad.absolute(s)
            lo, hi = mu - r, mu + r
            gamma = layer.gamma.data
        elif kind == "relu":
            n = lo.shape[0]
            per = int(np.prod(lo.shape[1:]))
            gvec = None
            if gamma is not None:
                gvec = np.repeat(gamma.astype(np.float32), per // gamma.size)
            records.append((lo.reshape(n, per), hi.reshape(n, per), gvec))
            lo, hi = ad.relu(lo), ad.relu(hi)
            gamma = None
        elif kind == "flatten":
            lo, hi = lo.reshape(lo.shape[0], -1), hi.reshape(hi.shape[0], -1)
    return lo, hi, records


def worst_case_logits(lower, upper, y):
    """Lower bound for the true class, upper bound for every other class."""
    lo, hi = ad.as_tensor(lower), ad.as_tensor(upper)
    onehot = np.zeros(lo.shape, dtype=bool)
    onehot[np.arange(lo.shape[0]), np.asarray(y)] = True
    return ad.where(onehot, lo, hi)


def regularizer_term(records, kind):
    """Mean stability loss over every ReLU neuron in the batch (0 if none)."""
    if kind == "none" or not records:
        return None
    terms, valid = [], []
    for l, u, g in records:
        if kind == "rs" or g is None:
            terms.append(-ad.tanh(1.0 + l * u))
            valid.append(np.ones(l.shape, dtype=bool))
        else:
            t, v = nrs_terms(l, u, g[None, :])
            terms.append(t)
            valid.append(np.asarray(v))
    t = ad.concat(terms, axis=1)
    v = np.concatenate(valid, axis=1)
    n = int(v.sum())
    if n == 0:
        return ad.Tensor(0.0)
    if n == v.size:
        return ad.mean(t)
    return ad.tsum(ad.where(v, t, 0.0)) * (1.0 / n)


def regularized_loss(base, net, records, config):
    """base + weight * stability loss (+ slim L1 on BN scales)."""
    loss = base
    reg = None
    if config.regularizer != "none" and config.reg_weight:
        reg = regularizer_term(records, config.regularizer)
        if reg is not None:
            loss = loss + reg * config.reg_weight
    if config.slim_l1:
        l1 = None
        for layer in net.layers:
            if layer.kind == "bn":
                t = ad.tsum(ad.absolute(layer.gamma))
                l1 = t if l1 is None else l1 + t
        if l1 is not None:
            loss = loss + l1 * config.slim_l1
    return loss, reg


def batch_loss(net, xb, yb, eps, config, rng=None):
    """Training objective on one batch (builds the graph on the active tape)."""
    eps32 = np.float32(eps)
    if config.method == "fgsm" and eps > 0:
        xb = fgsm_example(net, xb, yb, eps32, mode="batch",
                          rng=rng if config.fgsm_random_init else None)
    stats = {}
    logits = forward_network(net, xb, "train", stats)
    loss = ad.cross_entropy(logits, yb)
    records = None
    if config.method == "ibp-certified" and eps > 0 and config.kappa > 0:
        lo, hi = _ball(xb, eps32)
        olo, ohi, records = ibp_tensor_bounds(net, lo, hi, stats)
        robust = ad.cross_entropy(worst_case_logits(olo, ohi, yb), yb)
        loss = loss * (1.0 - config.kappa) + robust * config.kappa
    reg_records = []
    if config.regularizer != "none" and config.reg_weight and eps > 0:
        if config.regularizer == "nrs" or records is None:
            lo, hi = _ball(xb, eps32)
            _, _, reg_records = ibp_tensor_bounds(net, lo, hi, stats,
                                                  stop_gamma=config.regularizer == "nrs")
        else:
            reg_records = records
    return regularized_loss(loss, net, reg_records, config)


# ---------------------------------------------------------------- loops


def _make_optimizer(config):
    return OptimState(kind=config.optimizer, lr=config.lr, momentum=config.momentum,
                      weight_decay=config.weight_decay)


def epoch_metrics(net, X, Y, eps, config, epoch, loss, reg):
    n = min(len(X), config.eval_samples)
    X, Y = X[:n], Y[:n]
    logits = forward_network(net, X).data
    std = float((logits.argmax(axis=1) == Y).mean())
    if config.method == "ibp-certified":
        lo, hi = _ball(X, np.float32(eps))
        b = propagate_ibp_batch(net, lo, hi)
        wc = np.where(np.eye(b.out_lower.shape[1], dtype=bool)[Y], b.out_lower, b.out_upper)
        adv = float((wc.argmax(axis=1) == Y).mean())
    elif config.method == "fgsm":
        xa = fgsm_example(net, X, Y, np.float32(eps))
        adv = float((forward_network(net, xa).data.argmax(axis=1) == Y).mean())
    else:
        adv = std
    inst = stability_stats(net, X, float(eps))["instability_mean"] if net.relu_indices() else 0.0
    return EpochMetrics(epoch, float(np.float32(eps)), loss, reg, std, adv, inst)


def train(net, dataset, config, metrics_path=None, on_epoch=None):
    """Train in place.  Returns the list of EpochMetrics.

    Masked weights stay at zero; the optimizer starts from a fresh state.  On
    a non-finite loss the network is restored to the end of the previous
    epoch and TrainingDiverged is raised.
    """
    X = np.asarray(dataset.X, dtype=np.float32)
    Y = np.asarray(dataset.y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty training set")
    opt = _make_optimizer(config)
    params = net.parameters()
    history = []
    apply_masks(net)
    for epoch in range(1, config.epochs + 1):
        good = {k: v.copy() for k, v in net.state_arrays().items()}
        eps = eps_schedule(epoch, config)
        opt.lr = lr_at(epoch, config)
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(X))
        tot, tot_reg, count = 0.0, 0.0, 0
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            with ad.Tape() as tape:
                loss, reg = batch_loss(net, X[idx], Y[idx], float(eps), config, rng)
            if not np.isfinite(loss.data):
                net.load_state(good)
                apply_masks(net)
                raise TrainingDiverged(epoch, history)
            grads = tape.gradient(loss, params)
            grads = clip_grad_norm(grads, config.grad_clip)
            optimizer_step(opt, params, grads)
            apply_masks(net)
            k = len(idx)
            tot += float(loss.data) * k
            tot_reg += (float(reg.data) if reg is not None else 0.0) * k
            count += k
        m = epoch_metrics(net, X, Y, eps, config, epoch, tot / count, tot_reg / count)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    if metrics_path is not None:
        write_metrics(history, metrics_path)
    return history


def write_metrics(history, path, extra=None):
    """Append-free CSV dump; ``extra`` is a dict of constant leading columns."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(extra) + list(METRIC_COLUMNS))
        for m in history:
            d = asdict(m)
            w.writerow(list(extra.values()) + [_fmt(d[c]) for c in METRIC_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def evaluate(net, dataset, eps, pgd_steps=20, pgd_restarts=1, seed=0, data_range=(0.0, 1.0), pgd=True):
    """Clean accuracy and adversarial accuracy under FGSM and PGD (skipped with ``pgd=False``)."""
    from .bounds import linearize
    from .verify import pgd_batch

    X = np.asarray(dataset.X, dtype=np.float32)
    Y = np.asarray(dataset.y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    clean = forward_network(net, X).data.argmax(axis=1) == Y
    eps32 = np.float32(eps)
    if eps == 0:
        return {"std_acc": float(clean.mean()), "adv_acc_fgsm": float(clean.mean()),
                "adv_acc_pgd": float(clean.mean())}
    xa = fgsm_example(net, X, Y, eps32, data_range)
    fgsm_ok = clean & (forward_network(net, xa).data.argmax(axis=1) == Y)
    if not pgd:
        return {"std_acc": float(clean.mean()), "adv_acc_fgsm": float(fgsm_ok.mean())}
    lin = linearize(net)
    _, found = pgd_batch(lin, X.reshape(len(X), -1), Y, float(eps32), pgd_steps, pgd_restarts,
                         np.random.default_rng(seed), data_range)
    return {"std_acc": float(clean.mean()), "adv_acc_fgsm": float(fgsm_ok.mean()),
            "adv_acc_pgd": float((clean & ~found).mean())}


def with_overrides(config, **kw):
    return replace(config, **kw)
