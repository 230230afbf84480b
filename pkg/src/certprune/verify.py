"""Complete L-infinity robustness verification by branch-and-bound on ReLU phases.

The verifier works on the folded :class:`~certprune.bounds.LinearizedNet`
(float64 arithmetic on the float32 parameters).  Each subdomain is a set of
phase constraints; its bound is the CROWN lower bound over CROWN-tightened
intermediate bounds, floored by its parent's bound.  Fully split leaves are
settled by an exact linear program.  Subdomains are expanded
smallest-bound first with creation order as tie-break, so verdicts depend
only on the query and configuration, never on timing, except when the
wall-clock budget is the binding limit.
"""

import heapq
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import kernels
from .bounds import (InputBox, MarginSpec, build_margin_spec, crown_intermediate_batch,
                     crown_lower_batch, linearize, propagate_ibp_batch)

LP_TOL = 1e-9


@dataclass
class VerifierConfig:
    time_budget: float = 10.0
    max_subdomains: int = 20000
    batch: int = 32
    pgd_steps: int = 20
    pgd_restarts: int = 1
    seed: int = 0
    n_samples: int = None

    @classmethod
    def preset(cls, name):
        if name == "paper":
            return cls(time_budget=300.0, max_subdomains=10 ** 9)
        if name == "desk":
            return cls()
        raise ValueError(f"unknown verifier preset {name!r}")


@dataclass
class RobustnessQuery:
    net: object  # Network or LinearizedNet
    x: np.ndarray
    label: int
    eps: float
    data_range: tuple = (0.0, 1.0)
    time_budget: float = 10.0
    max_subdomains: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        x = np.asarray(self.x, dtype=np.float64)
        if self.data_range is not None and (x.min() < self.data_range[0] or x.max() > self.data_range[1]):
            raise ValueError("x lies outside the data range")

    def box(self):
        return InputBox.around(np.asarray(self.x, dtype=np.float64).reshape(-1), self.eps, self.data_range)


@dataclass
class Verdict:
    status: str  # "verified" | "falsified" | "timeout"
    counterexample: np.ndarray = None
    subdomains: int = 0
    splits: int = 0
    wall_time: float = 0.0
    worst_bound: float = float("nan")


@dataclass(order=True)
class Subdomain:
    bound: float
    index: int
    phases: list = field(compare=False)  # one int8 vector per ReLU layer
    depth: int = field(compare=False, default=0)
    zlo: list = field(compare=False, default=None)
    zhi: list = field(compare=False, default=None)
    corner: np.ndarray = field(compare=False, default=None)


# ---------------------------------------------------------------- helpers


def margins(lin, spec, X):
    """Spec-row values (logit[y] - logit[j]) at flat inputs X: (N, m)."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, lin.input_dim)
    h = X
    for W, b in zip(lin.weights, lin.biases):
        h = np.maximum(h @ W.T + b, 0.0)
    return h @ spec.weights.T + spec.bias


def is_counterexample(lin, x, label):
    z = lin.forward(np.asarray(x).reshape(1, -1))[0]
    return bool(np.any(np.delete(z, label) > z[label]))


def _input_grad(lin, X, Y):
    """Gradient of the summed cross-entropy w.r.t. flat inputs X."""
    h = X
    masks = []
    for W, b in zip(lin.weights, lin.biases):
        z = h @ W.T + b
        masks.append(z > 0)
        h = np.maximum(z, 0.0)
    logits = h @ lin.final_W.T + lin.final_b
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(Y)), Y] -= 1.0
    g = p @ lin.final_W
    for W, m in zip(reversed(lin.weights), reversed(masks)):
        g = (g * m) @ W
    return g


def pgd_batch(lin, X, Y, eps, steps=20, restarts=1, rng=None, data_range=(0.0, 1.0), step_size=None):
    """L-infinity PGD on cross-entropy for a batch of flat inputs.

    Runs one pass from the clean points, then ``restarts`` passes from uniform
    random starts.  Returns (points, found): ``points[i]`` is the first
    misclassified point found for sample i (or the clean point).
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=np.int64)
    lo, hi = X - eps, X + eps
    if data_range is not None:
        lo, hi = np.clip(lo, *data_range), np.clip(hi, *data_range)
    alpha = eps / 4.0 if step_size is None else step_size
    rng = np.random.default_rng(0) if rng is None else rng
    found = np.zeros(len(X), dtype=bool)
    best = X.copy()

    def check(P):
        z = lin.forward(P)
        zy = z[np.arange(len(Y)), Y]
        z[np.arange(len(Y)), Y] = -np.inf
        new = (z.max(axis=1) > zy) & ~found
        best[new] = P[new]
        found[new] = True

    check(X)
    starts = [X] + [rng.uniform(lo, hi) for _ in range(restarts)]
    if eps == 0:
        return best, found
    for start in starts:
        P = start.copy()
        check(P)
        for _ in range(steps):
            if found.all():
                return best, found
            g = _input_grad(lin, P, Y)
            P = np.clip(P + alpha * np.sign(g), lo, hi)
            check(P)
    return best, found


def attack_pgd(query, steps=20, restarts=1):
    """Counterexample inside the query's ball and data range, or None."""
    lin = linearize(query.net)
    x = np.asarray(query.x, dtype=np.float64).reshape(1, -1)
    rng = np.random.default_rng(query.seed)
    pts, found = pgd_batch(lin, x, [query.label], query.eps, steps, restarts, rng, query.data_range)
    return pts[0] if found[0] else None


def select_branch(zlo, zhi, phases):
    """(layer, neuron) of the free unstable neuron with the largest -l*u.

    Ties go to the earlier layer, then the lower index.  Returns None when no
    free unstable neuron remains (fully split).
    """
    best, where = -np.inf, None
    for k, (l, u, p) in enumerate(zip(zlo, zhi, phases)):
        s = kernels.branch_scores(np.atleast_2d(l), np.atleast_2d(u), np.atleast_2d(p))[0]
        j = int(np.argmax(s))
        if s[j] > best:
            best, where = s[j], (k, j)
    return where


def split(phases, neuron):
    """Children (active, inactive) phase vectors for one free neuron."""
    k, j = neuron
    if phases[k][j] != 0:
        raise ValueError(f"neuron {neuron} is already constrained")
    children = []
    for p in (1, -1):
        ph = [a.copy() for a in phases]
        ph[k][j] = p
        children.append(ph)
    return children


def _leaf_lp(lin, box, phases, zlo, zhi, row_A, row_c):
    """Exact minimum of one spec row over a fully split subdomain.

    Every neuron's phase is fixed (explicitly or by its bounds), so the
    network is affine on the subdomain.  Returns (status, value, point) with
    status "infeasible" or "optimal".
    """
    n0 = lin.input_dim
    A = np.eye(n0)
    c = np.zeros(n0)
    G, h = [], []
    for W, b, p, l, u in zip(lin.weights, lin.biases, phases, zlo, zhi):
        zA, zc = W @ A, W @ c + b
        act = (p == 1) | ((p == 0) & (l >= 0))
        for j in np.flatnonzero(p == 1):
            G.append(-zA[j])
            h.append(zc[j])
        for j in np.flatnonzero(p == -1):
            G.append(zA[j])
            h.append(-zc[j])
        A = zA * act[:, None]
        c = zc * act
    obj = row_A @ A
    const = float(row_A @ c + row_c)
    res = linprog(obj, A_ub=np.array(G) if G else None, b_ub=np.array(h) if h else None,
                  bounds=list(zip(box.lower, box.upper)), method="highs")
    if res.status == 2:
        return "infeasible", np.inf, None
    if res.status != 0:
        return "error", -np.inf, None
    return "optimal", float(res.fun) + const, np.clip(res.x, box.lower, box.upper)


# ---------------------------------------------------------------- BaB


class BaBVerifier:
    """Best-first branch-and-bound; subclass and override :meth:`bound` to
    experiment with (or fault-inject) the subdomain bounding step."""

    def __init__(self, config=None, trace=None):
        self.config = config or VerifierConfig()
        self.trace = trace

    def bound(self, lin, box, phase_batch, A, c, prior=None):
        """CROWN bounds (with CROWN-tightened intermediates) for a batch of
        phase assignments.  ``prior`` holds the parents' intermediate bounds.

        Returns (values (K,), corners (K, n0), infeasible (K,), zlo, zhi).
        """
        K = phase_batch[0].shape[0] if phase_batch else 1
        ib = crown_intermediate_batch(lin, box.lower, box.upper, phase_batch or None, prior=prior)
        phases = phase_batch or [np.zeros((K, n), dtype=np.int8) for n in lin.relu_sizes]
        values, corners = crown_lower_batch(lin, box.lower, box.upper, ib.pre_lower, ib.pre_upper,
                                            phases, A, c)
        rows = np.argmin(values, axis=1)
        return (values[np.arange(K), rows], corners[np.arange(K), rows], ib.infeasible,
                ib.pre_lower, ib.pre_upper)

    def verify(self, query, attack=True):
        t0 = time.perf_counter()
        cfg = self.config
        deadline = t0 + min(query.time_budget, cfg.time_budget)
        max_sub = min(query.max_subdomains, cfg.max_subdomains)
        lin = linearize(query.net)
        box = query.box()
        y = int(query.label)
        stats = {"subdomains": 0, "splits": 0}

        def done(status, cex=None, worst=float("nan")):
            return Verdict(status, cex, stats["subdomains"], stats["splits"],
                           time.perf_counter() - t0, worst)

        x = box.center
        if is_counterexample(lin, x, y):
            return done("falsified", x.copy())
        cex = attack_pgd(RobustnessQuery(lin, x, y, query.eps, query.data_range, seed=query.seed),
                         cfg.pgd_steps, cfg.pgd_restarts) if attack and query.eps > 0 else None
        if cex is not None:
            return done("falsified", cex)

        spec = build_margin_spec(y, lin.final_W.shape[0], (lin.final_W, lin.final_b))
        root_phases = [np.zeros(n, dtype=np.int8) for n in lin.relu_sizes]
        stats["subdomains"] += 1
        root_vals = []
        for r in range(spec.weights.shape[0]):
            v, corner, _, zlo, zhi = self.bound(lin, box, [p[None] for p in root_phases],
                                                spec.weights[r:r + 1], spec.bias[r:r + 1])
            root_vals.append((float(v[0]), r, corner[0], zlo, zhi))
        if all(v > 0 for v, *_ in root_vals):
            return done("verified", worst=min(v for v, *_ in root_vals))

        worst_final = np.inf
        for v, r, corner, zlo, zhi in sorted(root_vals, key=lambda t: (t[0], t[1])):
            if v > 0:
                worst_final = min(worst_final, v)
                continue
            status, cex, worst = self._bab_row(lin, box, y, spec, r, v, corner,
                                               [z[0] for z in zlo], [z[0] for z in zhi],
                                               root_phases, deadline, max_sub, stats)
            if status != "verified":
                return done(status, cex, worst)
            worst_final = min(worst_final, worst)
        return done("verified", worst=worst_final)

    def _bab_row(self, lin, box, y, spec, r, root_val, root_corner, zlo, zhi, root_phases,
                 deadline, max_sub, stats):
        A, c = spec.weights[r:r + 1], spec.bias[r:r + 1]
        counter = 0
        heap = [Subdomain(root_val, counter, root_phases, 0, zlo, zhi, root_corner)]
        undecided = False
        verified_floor = np.inf
        while heap:
            if stats["subdomains"] >= max_sub or time.perf_counter() > deadline:
                return "timeout", None, heap[0].bound
            batch = [heapq.heappop(heap) for _ in range(min(self.config.batch, len(heap)))]
            child_phases, parents, neurons = [], [], []
            for sub in batch:
                if is_counterexample(lin, sub.corner, y):
                    return "falsified", sub.corner.copy(), sub.bound
                neuron = select_branch(sub.zlo, sub.zhi, sub.phases)
                if neuron is None:
                    status, val, pt = _leaf_lp(lin, box, sub.phases, sub.zlo, sub.zhi, A[0], c[0])
                    if status == "optimal" and val < -LP_TOL and is_counterexample(lin, pt, y):
                        return "falsified", pt, val
                    if status == "infeasible" or (status == "optimal" and val > LP_TOL):
                        verified_floor = min(verified_floor, val)
                        continue
                    undecided = True
                    continue
                stats["splits"] += 1
                for ph in split(sub.phases, neuron):
                    child_phases.append(ph)
                    parents.append(sub)
                    neurons.append(neuron)
            if not child_phases:
                continue
            K = len(child_phases)
            stacked = [np.stack([ph[k] for ph in child_phases]) for k in range(len(lin.relu_sizes))]
            prior = ([np.stack([p.zlo[k] for p in parents]) for k in range(len(lin.relu_sizes))],
                     [np.stack([p.zhi[k] for p in parents]) for k in range(len(lin.relu_sizes))])
            vals, corners, infeasible, czlo, czhi = self.bound(lin, box, stacked, A, c, prior)
            stats["subdomains"] += K
            for i in range(K):
                parent = parents[i]
                val = np.inf if infeasible[i] else max(float(vals[i]), parent.bound)
                if self.trace is not None:
                    self.trace(f"row={r} parent={parent.index} split={neurons[i]} "
                               f"phase={child_phases[i][neurons[i][0]][neurons[i][1]]:+d} bound={val!r}")
                if val > 0:
                    verified_floor = min(verified_floor, val)
                    continue
                counter += 1
                heapq.heappush(heap, Subdomain(val, counter, child_phases[i], parent.depth + 1,
                                               [z[i] for z in czlo], [z[i] for z in czhi], corners[i]))
        if undecided:
            return "timeout", None, 0.0
        return "verified", None, verified_floor


def verify_sample(query, config=None, trace=None):
    """Falsify with PGD, then bound the root, then branch-and-bound."""
    return BaBVerifier(config, trace).verify(query)


# ---------------------------------------------------------------- oracle


@dataclass
class OracleResult:
    status: str  # "verified" | "falsified" | "inconclusive"
    witness: np.ndarray = None
    boxes: int = 0


def oracle_bisect(net, box, spec, min_width=1e-3, max_boxes=2_000_000):
    """Input-bisection oracle for inputs of dimension <= 3.

    A box is discharged when the IBP lower bound of every spec row is
    positive; any evaluated corner or center with a negative row is a
    counterexample; boxes narrower than ``min_width`` that are neither make
    the result inconclusive.
    """
    lin = linearize(net)
    d = lin.input_dim
    if d > 3:
        raise ValueError(f"oracle_bisect supports input dimension <= 3, got {d}")
    if not isinstance(spec, MarginSpec):
        raise TypeError("spec must be a MarginSpec")
    lo = np.asarray(box.lower, dtype=np.float64).reshape(1, d)
    hi = np.asarray(box.upper, dtype=np.float64).reshape(1, d)
    offsets = np.array(np.meshgrid(*[[0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
    offsets = np.vstack([offsets, np.full((1, d), 0.5)])
    inconclusive = False
    seen = 0
    while lo.shape[0]:
        seen += lo.shape[0]
        if seen > max_boxes:
            return OracleResult("inconclusive", None, seen)
        ib = propagate_ibp_batch(lin, lo, hi)
        post_lo = np.maximum(ib.pre_lower[-1], 0.0) if lin.weights else lo
        post_hi = np.maximum(ib.pre_upper[-1], 0.0) if lin.weights else hi
        row_lo, _ = kernels.interval_affine(spec.weights, spec.bias, np.ascontiguousarray(post_lo),
                                            np.ascontiguousarray(post_hi))
        open_ = ~(row_lo > 0).all(axis=1)
        lo, hi = lo[open_], hi[open_]
        if not lo.shape[0]:
            break
        pts = lo[:, None, :] + offsets[None] * (hi - lo)[:, None, :]
        flat = pts.reshape(-1, d)
        bad = (margins(lin, spec, flat) < 0).any(axis=1)
        if bad.any():
            return OracleResult("falsified", flat[np.argmax(bad)].copy(), seen)
        width = hi - lo
        axis = np.argmax(width, axis=1)
        wmax = width[np.arange(len(axis)), axis]
        small = wmax <= min_width
        if small.any():
            inconclusive = True
        lo, hi, axis = lo[~small], hi[~small], axis[~small]
        mid = (lo[np.arange(len(axis)), axis] + hi[np.arange(len(axis)), axis]) / 2
        lo2, hi1 = lo.copy(), hi.copy()
        hi1[np.arange(len(axis)), axis] = mid
        lo2[np.arange(len(axis)), axis] = mid
        lo, hi = np.vstack([lo, lo2]), np.vstack([hi1, hi])
    return OracleResult("inconclusive" if inconclusive else "verified", None, seen)


# ---------------------------------------------------------------- aggregate


def certified_accuracy(net, X, Y, eps, config=None, data_range=(0.0, 1.0), verifier=None):
    """Clean, PGD-adversarial and verified accuracy over the first N samples.

    PGD runs once over the batch; only samples that are correct and survive
    it go to branch-and-bound.  A sample counts as verified only if its
    verdict is "verified"; timeouts count as not verified.
    """
    cfg = config or VerifierConfig()
    n = len(X) if cfg.n_samples is None else min(cfg.n_samples, len(X))
    if n == 0:
        raise ValueError("empty dataset")
    lin = linearize(net)
    verifier = verifier or BaBVerifier(cfg)
    flat = np.asarray(X[:n], dtype=np.float64).reshape(n, -1)
    Y = np.asarray(Y[:n], dtype=np.int64)
    clean = lin.forward(flat).argmax(axis=1) == Y
    pts, found = pgd_batch(lin, flat, Y, float(eps), cfg.pgd_steps, cfg.pgd_restarts,
                           np.random.default_rng(cfg.seed), data_range)
    survived = clean & ~found
    verdicts = []
    for i in range(n):
        if not survived[i]:
            verdicts.append(Verdict("falsified", pts[i].copy()))
            continue
        q = RobustnessQuery(lin, flat[i], int(Y[i]), eps, data_range, cfg.time_budget, cfg.max_subdomains,
                            seed=cfg.seed + i)
        verdicts.append(verifier.verify(q, attack=False))
    ran = [v for v, s in zip(verdicts, survived) if s]
    return {
        "n": n,
        "std_acc": float(clean.mean()),
        "adv_acc": float(survived.mean()),
        "verified_acc": sum(v.status == "verified" for v in verdicts) / n,
        "mean_time": float(np.mean([v.wall_time for v in ran])) if ran else 0.0,
        "timeouts": sum(v.status == "timeout" for v in verdicts),
        "mean_subdomains": float(np.mean([v.subdomains for v in ran])) if ran else 0.0,
        "verdicts": verdicts,
    }
