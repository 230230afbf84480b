"""Interval and linear-relaxation bounds for ReLU networks.

Bound computations run in float64 on the float32 parameters, so every
parameter is represented exactly.  Pre-activation bounds are those of the
ReLU input (after batch-norm where present); "pre-BN" bounds are the input
bounds of a batch-norm layer.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .network import LINEAR_KINDS, Network


@dataclass
class InputBox:
    center: np.ndarray
    eps: float
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def around(cls, x, eps, data_range=(0.0, 1.0)):
        x = np.asarray(x, dtype=np.float64)
        if eps < 0:
            raise ValueError("eps must be non-negative")
        lo, hi = x - eps, x + eps
        if data_range is not None:
            lo = np.clip(lo, *data_range)
            hi = np.clip(hi, *data_range)
        if np.any(lo > hi):
            raise ValueError("empty input box")
        return cls(x, float(eps), lo, hi)

    @classmethod
    def from_bounds(cls, lower, upper):
        lo = np.asarray(lower, dtype=np.float64)
        hi = np.asarray(upper, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("empty input box")
        return cls((lo + hi) / 2, float(np.max(hi - lo, initial=0.0) / 2), lo, hi)


@dataclass
class LayerBounds:
    """Per-ReLU-layer bounds, flattened to (K, n) with one row per box."""

    pre_lower: list
    pre_upper: list
    prebn_lower: list
    prebn_upper: list
    out_lower: np.ndarray
    out_upper: np.ndarray
    infeasible: np.ndarray
    gammas: list = field(default_factory=list)

    def row(self, k):
        """The bounds of box ``k`` as a single-row LayerBounds."""
        def pick(xs):
            return [None if a is None else a[k:k + 1] for a in xs]
        return LayerBounds(pick(self.pre_lower), pick(self.pre_upper), pick(self.prebn_lower),
                           pick(self.prebn_upper), self.out_lower[k:k + 1], self.out_upper[k:k + 1],
                           self.infeasible[k:k + 1], self.gammas)


@dataclass
class LinearizedNet:
    """Dense affine maps with BN folded in; a ReLU follows every hidden map."""

    weights: list
    biases: list
    final_W: np.ndarray
    final_b: np.ndarray
    input_shape: tuple

    @property
    def relu_sizes(self):
        return [w.shape[0] for w in self.weights]

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))

    def forward(self, x):
        """Logits for flat inputs of shape (N, input_dim), float64."""
        h = np.asarray(x, dtype=np.float64).reshape(-1, self.input_dim)
        for W, b in zip(self.weights, self.biases):
            h = np.maximum(h @ W.T + b, 0.0)
        return h @ self.final_W.T + self.final_b

    def activations(self, x):
        """Pre-activation values of every ReLU layer for flat inputs."""
        h = np.asarray(x, dtype=np.float64).reshape(-1, self.input_dim)
        out = []
        for W, b in zip(self.weights, self.biases):
            z = h @ W.T + b
            out.append(z)
            h = np.maximum(z, 0.0)
        return out


def _conv_apply(x, W, b, stride, pad):
    n = x.shape[0]
    o, _, kh, kw = W.shape
    cols = kernels.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)
    oh = (x.shape[2] + 2 * pad - kh) // stride + 1
    ow = (x.shape[3] + 2 * pad - kw) // stride + 1
    out = np.matmul(W.reshape(o, -1), cols)
    if b is not None:
        out = out + b[None, :, None]
    return out.reshape(n, o, oh, ow)


def _dense_operator(layer, in_shape):
    """Dense (W, b) of an affine or conv layer acting on flattened inputs."""
    W = layer.W.data.astype(np.float64)
    b = layer.b.data.astype(np.float64)
    if layer.kind == "affine":
        return W, b
    d = int(np.prod(in_shape))
    basis = np.eye(d).reshape((d,) + tuple(in_shape))
    cols = _conv_apply(basis, W, None, layer.stride, layer.padding).reshape(d, -1)
    out_hw = cols.shape[1] // W.shape[0]
    return cols.T.copy(), np.repeat(b, out_hw)


def linearize(net):
    """Fold a Network into a LinearizedNet (eval-mode BN, flatten is a no-op)."""
    if isinstance(net, LinearizedNet):
        return net
    shapes = net.arch.shapes()
    in_shapes = [tuple(net.arch.input_shape)] + shapes[:-1]
    weights, biases = [], []
    cur = None
    for i, layer in enumerate(net.layers):
        if layer.kind in LINEAR_KINDS:
            if cur is not None:
                raise ValueError(f"layer {i}: consecutive linear layers without ReLU are unsupported")
            cur = _dense_operator(layer, in_shapes[i])
        elif layer.kind == "bn":
            s, t = layer.scale_shift()
            reps = cur[0].shape[0] // s.size
            s, t = np.repeat(s, reps), np.repeat(t, reps)
            cur = (cur[0] * s[:, None], cur[1] * s + t)
        elif layer.kind == "relu":
            weights.append(cur[0])
            biases.append(cur[1])
            cur = None
    return LinearizedNet(weights, biases, cur[0], cur[1], tuple(net.arch.input_shape))


# ---------------------------------------------------------------- IBP


def ibp_affine(lower, upper, layer):
    """Interval propagation through an affine/conv layer (center/radius form).

    ``layer`` is an Affine, a Conv2d, or a ``(W, b)`` pair.  Inputs may carry
    a leading batch axis.
    """
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    if isinstance(layer, tuple):
        W, b = (np.asarray(a, dtype=np.float64) for a in layer)
        kind = "affine"
    else:
        W, b, kind = layer.W.data.astype(np.float64), layer.b.data.astype(np.float64), layer.kind
    if kind == "affine":
        single = lo.ndim == 1
        l2, u2 = kernels.interval_affine(W, b, np.atleast_2d(lo), np.atleast_2d(hi))
        return (l2[0], u2[0]) if single else (l2, u2)
    mu = (hi + lo) / 2.0
    r = (hi - lo) / 2.0
    mu_out = _conv_apply(mu, W, b, layer.stride, layer.padding)
    r_out = _conv_apply(r, np.abs(W), None, layer.stride, layer.padding)
    return mu_out - r_out, mu_out + r_out


def ibp_batchnorm(lower, upper, layer):
    """Eval-mode BN on bounds: scale s = gamma/sqrt(var+eps), swap where s < 0."""
    s, t = layer.scale_shift()
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    shape = (-1,) + (1,) * (lo.ndim - 2) if lo.ndim >= 2 else (-1,)
    s, t = s.reshape(shape), t.reshape(shape)
    a, b = s * lo + t, s * hi + t
    return np.minimum(a, b), np.maximum(a, b)


def ibp_relu(lower, upper, phase=None):
    """ReLU on bounds under optional phase constraints.

    Returns (post_lower, post_upper, infeasible).  ``phase`` holds 1 (active),
    -1 (inactive) or 0 per neuron.
    """
    lo = np.atleast_2d(np.asarray(lower, dtype=np.float64))
    hi = np.atleast_2d(np.asarray(upper, dtype=np.float64))
    shape = lo.shape
    flat_lo, flat_hi = lo.reshape(shape[0], -1), hi.reshape(shape[0], -1)
    if phase is None:
        ph = np.zeros(flat_lo.shape, dtype=np.int8)
    else:
        ph = np.broadcast_to(np.asarray(phase, dtype=np.int8).reshape(-1, flat_lo.shape[1]),
                             flat_lo.shape).copy()
    _, _, plo, phi, bad = kernels.relu_phase_bounds(flat_lo, flat_hi, ph)
    plo, phi = plo.reshape(shape), phi.reshape(shape)
    if np.ndim(lower) == 1:
        return plo[0], phi[0], bool(bad[0])
    return plo, phi, bad


class PhaseConstraints(dict):
    """Map (relu layer index, flat neuron index) -> +1 (active) / -1 (inactive)."""

    def constrain(self, layer, neuron, phase):
        key = (int(layer), int(neuron))
        if key in self and self[key] != phase:
            raise ValueError(f"neuron {key} already constrained to {self[key]}")
        child = PhaseConstraints(self)
        child[key] = int(phase)
        return child

    def arrays(self, sizes):
        out = [np.zeros((1, n), dtype=np.int8) for n in sizes]
        for (layer, neuron), p in self.items():
            if layer >= len(sizes) or neuron >= sizes[layer]:
                raise ValueError(f"constrained neuron {(layer, neuron)} does not exist")
            out[layer][0, neuron] = p
        return out


def propagate_ibp_batch(net, lower, upper, phases=None):
    """IBP for K boxes at once; ``lower``/``upper`` have shape (K, *input_shape).

    ``phases`` is None or a list with one (K or 1, n) int8 array per ReLU layer.
    """
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    K = lo.shape[0]
    pre_l, pre_u, bn_l, bn_u, gammas = [], [], [], [], []
    infeasible = np.zeros(K, dtype=bool)
    if isinstance(net, LinearizedNet):
        lo, hi = lo.reshape(K, -1), hi.reshape(K, -1)
        for k, (W, b) in enumerate(zip(net.weights, net.biases)):
            zl, zh = kernels.interval_affine(W, b, lo, hi)
            ph = _phase_rows(phases, k, K, zl.shape[1])
            zl, zh, lo, hi, bad = kernels.relu_phase_bounds(zl, zh, ph)
            infeasible |= bad
            pre_l.append(zl)
            pre_u.append(zh)
            bn_l.append(None)
            bn_u.append(None)
        ol, ou = kernels.interval_affine(net.final_W, net.final_b, lo, hi)
        return LayerBounds(pre_l, pre_u, bn_l, bn_u, ol, ou, infeasible)

    pending_bn = None
    relu_k = 0
    for layer in net.layers:
        if layer.kind in LINEAR_KINDS:
            lo, hi = ibp_affine(lo, hi, layer)
            pending_bn = None
        elif layer.kind == "bn":
            pending_bn = (lo.reshape(K, -1), hi.reshape(K, -1), layer)
            lo, hi = ibp_batchnorm(lo, hi, layer)
        elif layer.kind == "flatten":
            lo, hi = lo.reshape(K, -1), hi.reshape(K, -1)
        elif layer.kind == "relu":
            shape = lo.shape
            fl, fh = lo.reshape(K, -1), hi.reshape(K, -1)
            ph = _phase_rows(phases, relu_k, K, fl.shape[1])
            zl, zh, pl, pu, bad = kernels.relu_phase_bounds(fl, fh, ph)
            infeasible |= bad
            pre_l.append(zl)
            pre_u.append(zh)
            if pending_bn is not None:
                bn_l.append(pending_bn[0])
                bn_u.append(pending_bn[1])
                g = pending_bn[2].gamma.data.astype(np.float64)
                gammas.append(np.repeat(g, fl.shape[1] // g.size))
            else:
                bn_l.append(None)
                bn_u.append(None)
                gammas.append(None)
            lo, hi = pl.reshape(shape), pu.reshape(shape)
            pending_bn = None
            relu_k += 1
    return LayerBounds(pre_l, pre_u, bn_l, bn_u, lo.reshape(K, -1), hi.reshape(K, -1), infeasible, gammas)


def _phase_rows(phases, k, K, n):
    if phases is None:
        return np.zeros((K, n), dtype=np.int8)
    ph = np.asarray(phases[k], dtype=np.int8)
    if ph.shape[-1] != n:
        raise ValueError(f"phase array for relu layer {k} has {ph.shape[-1]} entries, expected {n}")
    return np.ascontiguousarray(np.broadcast_to(ph.reshape(-1, n), (K, n)))


def relu_sizes(net):
    if isinstance(net, LinearizedNet):
        return net.relu_sizes
    shapes = net.arch.shapes()
    return [int(np.prod(shapes[i])) for i in net.relu_indices()]


def propagate_ibp(net, box, phases=None):
    """Layer-by-layer IBP over one input box; returns single-row LayerBounds."""
    shape = tuple(net.input_shape) if isinstance(net, LinearizedNet) else tuple(net.arch.input_shape)
    lo = np.asarray(box.lower, dtype=np.float64).reshape((1,) + shape)
    hi = np.asarray(box.upper, dtype=np.float64).reshape((1,) + shape)
    arrays = None
    if phases:
        arrays = PhaseConstraints(phases).arrays(relu_sizes(net))
    return propagate_ibp_batch(net, lo, hi, arrays)


# ---------------------------------------------------------------- relaxation / CROWN


@dataclass
class ReluRelaxation:
    upper_slope: np.ndarray
    upper_intercept: np.ndarray
    lower_slope: np.ndarray


def relu_relaxation(lower, upper):
    """Triangle upper line and 0/1 lower line for unstable neurons (l < 0 < u).

    The lower slope is 1 when u >= -l (ties included), else 0.
    """
    l = np.asarray(lower, dtype=np.float64)
    u = np.asarray(upper, dtype=np.float64)
    if not np.all((l < 0) & (u > 0)):
        raise ValueError("relu_relaxation is only defined for unstable neurons (l < 0 < u)")
    slope = u / (u - l)
    return ReluRelaxation(slope, -u * l / (u - l), np.where(u >= -l, 1.0, 0.0))


@dataclass
class MarginSpec:
    """Rows (A, c) so that row j of A @ h + c is logit[label] - logit[j]; h is the
    last ReLU output (or the input, for a network without hidden layers)."""

    weights: np.ndarray
    bias: np.ndarray
    label: int
    rivals: list


def build_margin_spec(y, num_classes, final_layer):
    """One row per rival class j != y: (W[y] - W[j], b[y] - b[j])."""
    if not 0 <= y < num_classes:
        raise ValueError(f"label {y} out of range")
    if isinstance(final_layer, tuple):
        W, b = (np.asarray(a, dtype=np.float64) for a in final_layer)
    else:
        W, b = final_layer.W.data.astype(np.float64), final_layer.b.data.astype(np.float64)
    rivals = [j for j in range(num_classes) if j != y]
    A = np.stack([W[y] - W[j] for j in rivals]) if rivals else np.zeros((0, W.shape[1]))
    c = np.array([b[y] - b[j] for j in rivals])
    return MarginSpec(A, c, y, rivals)


def fold_spec(lin, spec):
    """(A, c) over the last hidden activation for a MarginSpec or a logit-space matrix C."""
    if isinstance(spec, MarginSpec):
        return spec.weights, spec.bias
    C = np.atleast_2d(np.asarray(spec, dtype=np.float64))
    return C @ lin.final_W, C @ lin.final_b


def crown_lower_batch(lin, lo, hi, zlo, zhi, phase, A, c):
    """Backward linear-relaxation bound for K subdomains sharing one input box.

    zlo/zhi/phase: one (K, n_k) array per ReLU layer (constrained IBP bounds).
    Returns (values (K, m), minimizing corners (K, m, n0)).
    """
    K = zlo[0].shape[0] if zlo else 1
    m = A.shape[0]
    lam = np.ascontiguousarray(np.broadcast_to(A, (K,) + A.shape))
    const = np.tile(np.asarray(c, dtype=np.float64), (K, 1)).reshape(K, m)
    lam, const = _backward_to_input(lin, len(lin.weights), lam, const, zlo, zhi, phase)
    return kernels.box_min(lam, const, lo.reshape(-1), hi.reshape(-1))


def _backward_to_input(lin, upto, lam, const, zlo, zhi, phase):
    for k in range(upto - 1, -1, -1):
        lam, cadd = kernels.crown_relu_backward(lam, zlo[k], zhi[k], phase[k])
        const = const + cadd + lam @ lin.biases[k]
        lam = np.ascontiguousarray(lam @ lin.weights[k])
    return lam, const


def crown_intermediate_batch(lin, lo, hi, phases=None, tol=1e-9, prior=None):
    """Pre-activation bounds for K phase assignments over one shared box.

    Each layer starts from IBP on the previous layer's constrained bounds and
    is then tightened by a backward CROWN pass for the neurons that are still
    free and unstable in some subdomain.  ``prior`` is an optional
    (lower list, upper list) of bounds known to hold on each subdomain (its
    parent's), intersected in layer by layer.  A subdomain whose tightened
    lower bound exceeds its upper bound by more than ``tol`` is infeasible.
    """
    lo = np.asarray(lo, dtype=np.float64).reshape(-1)
    hi = np.asarray(hi, dtype=np.float64).reshape(-1)
    K = 1 if phases is None else np.asarray(phases[0]).reshape(-1, lin.relu_sizes[0]).shape[0]
    plo = np.ascontiguousarray(np.broadcast_to(lo, (K, lo.size)))
    phi = np.ascontiguousarray(np.broadcast_to(hi, (K, hi.size)))
    zlos, zhis, phs = [], [], []
    infeasible = np.zeros(K, dtype=bool)
    for k, (W, b) in enumerate(zip(lin.weights, lin.biases)):
        zl, zh = kernels.interval_affine(W, b, plo, phi)
        ph = _phase_rows(phases, k, K, zl.shape[1])
        if k > 0:
            rows = np.flatnonzero(((zl < 0) & (zh > 0) & (ph == 0)).any(axis=0))
            if rows.size:
                m = rows.size
                A = np.concatenate([W[rows], -W[rows]])
                c = np.concatenate([b[rows], -b[rows]])
                lam = np.ascontiguousarray(np.broadcast_to(A, (K,) + A.shape))
                const = np.tile(c, (K, 1))
                lam, const = _backward_to_input(lin, k, lam, const, zlos, zhis, phs)
                vals, _ = kernels.box_min(lam, const, lo, hi)
                zl[:, rows] = np.maximum(zl[:, rows], vals[:, :m])
                zh[:, rows] = np.minimum(zh[:, rows], -vals[:, m:])
        if prior is not None:
            zl = np.maximum(zl, prior[0][k])
            zh = np.minimum(zh, prior[1][k])
        crossed = zl > zh
        infeasible |= (zl - zh > tol * np.maximum(1.0, np.abs(zl))).any(axis=1)
        zh = np.where(crossed, zl, zh)
        zl, zh, plo, phi, bad = kernels.relu_phase_bounds(zl, zh, ph)
        infeasible |= bad
        zlos.append(zl)
        zhis.append(zh)
        phs.append(ph)
    ol, ou = kernels.interval_affine(lin.final_W, lin.final_b, plo, phi)
    n = len(zlos)
    return LayerBounds(zlos, zhis, [None] * n, [None] * n, ol, ou, infeasible)


def crown_bound(net, box, phases=None, spec=None, intermediate=None):
    """Sound lower bound of each spec row over the (phase-constrained) box.

    ``spec`` is a MarginSpec (rows over the last hidden activation) or a
    logit-space matrix C.  Intermediate bounds default to IBP.  Returns +inf
    for every row when the phase constraints are infeasible.
    """
    lin = linearize(net)
    A, c = fold_spec(lin, spec)
    arrays = PhaseConstraints(phases or {}).arrays(lin.relu_sizes)
    if intermediate is None:
        intermediate = propagate_ibp(lin, box, phases)
    if bool(np.any(intermediate.infeasible)):
        return np.full(A.shape[0], np.inf)
    values, _ = crown_lower_batch(lin, box.lower, box.upper, intermediate.pre_lower,
                                  intermediate.pre_upper, arrays, A, c)
    return values[0]


# ---------------------------------------------------------------- stability metrics


@dataclass
class StabilityReport:
    labels: list  # per ReLU layer: 1 stable-active, -1 stable-inactive, 0 unstable
    unstable_count: int
    total: int
    ratio: float
    instability_sum: float
    instability_mean: float


def classify_neurons(bounds):
    """Unstable iff l < 0 < u; l >= 0 is stable-active; u <= 0 is stable-inactive."""
    labels = []
    for l, u in zip(bounds.pre_lower, bounds.pre_upper):
        l, u = np.asarray(l), np.asarray(u)
        lab = np.zeros(l.shape, dtype=np.int8)
        lab[l >= 0] = 1
        lab[u <= 0] = -1
        labels.append(lab)
    unstable = int(sum(int((lab == 0).sum()) for lab in labels))
    total = int(sum(lab.size for lab in labels))
    s, mu = instability(bounds)
    return StabilityReport(labels, unstable, total, unstable / total if total else 0.0, s, mu)


def instability(bounds, unstable_only=False):
    """(sum, mean) of -l*u over ReLU neurons; ``unstable_only`` keeps l < 0 < u."""
    total, count = 0.0, 0
    for l, u in zip(bounds.pre_lower, bounds.pre_upper):
        l = np.asarray(l, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        terms = -l * u
        if unstable_only:
            terms = np.where((l < 0) & (u > 0), terms, 0.0)
        total += float(terms.sum())
        count += terms.size
    return total, (total / count if count else 0.0)


def stability_stats(net, X, eps, data_range=(0.0, 1.0)):
    """Mean unstable ratio and instability (sum, mean) over a batch of inputs."""
    X = np.asarray(X, dtype=np.float64)
    lo, hi = X - eps, X + eps
    if data_range is not None:
        lo, hi = np.clip(lo, *data_range), np.clip(hi, *data_range)
    b = propagate_ibp_batch(net, lo, hi)
    l = np.concatenate(b.pre_lower, axis=1)
    u = np.concatenate(b.pre_upper, axis=1)
    terms = -l * u
    return {
        "unstable_ratio": float(((l < 0) & (u > 0)).mean()),
        "instability_sum": float(terms.sum(axis=1).mean()),
        "instability_mean": float(terms.mean()),
    }


# ---------------------------------------------------------------- regularizers


def rs_loss(lower, upper):
    """Mean over neurons of -tanh(1 + l*u)."""
    l, u = ad.as_tensor(lower), ad.as_tensor(upper)
    return ad.mean(-ad.tanh(1.0 + l * u))


def nrs_terms(lower, upper, gamma):
    """Per-neuron -tanh(1 + l*u / gamma^2) with gamma behind a stop-gradient.

    Returns (terms, valid) where ``valid`` masks out gamma == 0 channels.
    """
    l, u = ad.as_tensor(lower), ad.as_tensor(upper)
    g = ad.stop_gradient(ad.as_tensor(gamma))
    valid = np.broadcast_to(g.data != 0, np.broadcast_shapes(l.shape, g.shape))
    safe = ad.where(g.data != 0, g, 1.0)
    terms = -ad.tanh(1.0 + l * u / (safe * safe))
    return terms, valid


def nrs_loss(lower, upper, gamma, report=None):
    """Mean of the normalized stability loss over neurons with gamma != 0.

    If ``report`` is a dict, the number of skipped (gamma == 0) neurons is
    stored under "skipped".
    """
    terms, valid = nrs_terms(lower, upper, gamma)
    n_valid = int(valid.sum())
    if report is not None:
        report["skipped"] = int(valid.size - n_valid)
    if n_valid == 0:
        return ad.Tensor(0.0)
    if n_valid == valid.size:
        return ad.mean(terms)
    return ad.tsum(ad.where(valid, terms, 0.0)) * (1.0 / n_valid)
