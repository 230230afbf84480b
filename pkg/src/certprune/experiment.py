"""End-to-end pipeline: train, prune iteratively, verify, persist, aggregate, plot."""

import csv
import json
import os
import platform
import sys
from collections import defaultdict

import numpy as np

from . import kernels
from .bounds import build_margin_spec, linearize, stability_stats
from .checkpoint import save_checkpoint
from .config import dump_effective, frac_str
from .data import gen_two_moons, load_idx, Dataset, Split
from .network import ARCH_PRESETS, build_network, mlp_arch
from .pruning import PruneState, find_certified_tickets, iterative_prune
from .training import evaluate, train, write_metrics
from .verify import BaBVerifier, RobustnessQuery, VerifierConfig, certified_accuracy, oracle_bisect

RESULT_COLUMNS = ("variant", "seed", "round", "remain_ratio", "std_acc", "adv_acc_fgsm", "adv_acc_pgd",
                  "verified_acc", "timeouts", "mean_subdomains", "instability_sum", "instability_mean",
                  "unstable_ratio", "flags")
VERDICT_COLUMNS = ("round", "sample", "label", "status", "subdomains", "splits", "worst_bound")
NUMERIC = RESULT_COLUMNS[3:-1]


class RunFailed(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


# ---------------------------------------------------------------- io helpers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def versions():
    import matplotlib
    import numba
    import scipy
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "matplotlib": matplotlib.__version__,
            "jit": bool(kernels.JIT_ENABLED)}


# ---------------------------------------------------------------- data and models


def load_data(cfg):
    ds = cfg.dataset
    if ds.kind == "two-moons":
        return gen_two_moons(ds.n, ds.noise, ds.seed)
    train_ds = load_idx(ds.images, ds.labels, ds.train_subset or None)
    test_ds = load_idx(ds.test_images, ds.test_labels, ds.subset or None)
    return Split(train_ds, test_ds)


def build_arch(cfg, split):
    shape = split.train.X.shape[1:]
    n_cls = int(max(split.train.y.max(), split.test.y.max())) + 1
    params = dict(cfg.arch.params)
    name = cfg.arch.name
    if name == "mlp":
        if len(shape) != 1:
            raise ValueError("mlp architecture needs flat inputs")
        params.setdefault("in_dim", shape[0])
        params.setdefault("num_classes", n_cls)
        if "hidden" in params:
            params["hidden"] = tuple(params["hidden"])
    else:
        if len(shape) != 3 or shape[1] != shape[2]:
            raise ValueError(f"{name} architecture needs square (C, H, W) inputs")
        params.setdefault("in_channels", shape[0])
        params.setdefault("size", shape[1])
        params.setdefault("num_classes", n_cls)
    return ARCH_PRESETS[name](**params)


def verifier_config(cfg, seed=0):
    v = cfg.verifier
    return VerifierConfig(time_budget=v.time_budget, max_subdomains=v.max_subdomains, batch=v.batch,
                          pgd_steps=v.pgd_steps, pgd_restarts=v.pgd_restarts, seed=seed,
                          n_samples=v.n_samples)


def measure(net, test, cfg, seed):
    """Per-round metrics (deterministic), verdict rows and mean verification time."""
    eps = float(cfg.verifier.eps)
    n = min(cfg.verifier.n_samples, len(test))
    sub = Dataset(test.X[:n], test.y[:n])
    vcfg = verifier_config(cfg, seed)
    ev = evaluate(net, sub, eps, pgd=False)
    ca = certified_accuracy(net, sub.X, sub.y, eps, vcfg)
    st = stability_stats(net, sub.X.reshape(n, *net.arch.input_shape), eps)
    metrics = {
        "std_acc": ca["std_acc"], "adv_acc_fgsm": ev["adv_acc_fgsm"], "adv_acc_pgd": ca["adv_acc"],
        "verified_acc": ca["verified_acc"], "timeouts": ca["timeouts"],
        "mean_subdomains": ca["mean_subdomains"], "instability_sum": st["instability_sum"],
        "instability_mean": st["instability_mean"], "unstable_ratio": st["unstable_ratio"],
    }
    verdicts = [{"sample": i, "label": int(sub.y[i]), "status": v.status, "subdomains": v.subdomains,
                 "splits": v.splits, "worst_bound": float(v.worst_bound)}
                for i, v in enumerate(ca["verdicts"])]
    return metrics, verdicts, ca["mean_time"]


def saliency_batch(split, size, seed):
    rng = np.random.default_rng([seed, 256])
    idx = np.sort(rng.permutation(len(split.train))[:size])
    return split.train.X[idx], split.train.y[idx]


# ---------------------------------------------------------------- pipeline


def run_dir_for(cfg, out=None):
    return os.path.join(out or cfg.output, cfg.digest())


def _write_effective(cfg, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    dump_effective(cfg, os.path.join(run_dir, "config.json"))
    resolved = {v.name: cfg.train_config(v, 0).to_dict() for v in cfg.pruning.variants}
    for d in resolved.values():
        d.pop("seed")
    _write_json(os.path.join(run_dir, "train_resolved.json"), resolved)
    _write_json(os.path.join(run_dir, "manifest.json"),
                {"config_digest": cfg.digest(), "seeds": list(cfg.seeds), "versions": versions(),
                 "argv": sys.argv[1:]})


def run_seed_variant(cfg, split, seed, variant, run_dir, log=None):
    arch = build_arch(cfg, split)
    tcfg = cfg.train_config(variant, seed)
    out = os.path.join(run_dir, f"seed{seed}", variant.name)
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    net = build_network(arch, seed=seed, prune_linear=cfg.pruning.prune_linear)
    metric_rows, verdict_rows, result_rows, timing_rows = [], [], [], []
    batch = saliency_batch(split, cfg.pruning.saliency_batch, seed)
    stage = {"name": "init"}

    def train_fn(net, k):
        stage["name"] = f"seed{seed}/{variant.name}/round{k}/train"
        hist = train(net, split.train, tcfg)
        metric_rows.extend([dict(round=k, **vars(m)) for m in hist])

    def eval_fn(net, k):
        stage["name"] = f"seed{seed}/{variant.name}/round{k}/verify"
        metrics, verdicts, t = measure(net, split.test, cfg, seed)
        verdict_rows.extend(dict(round=k, **v) for v in verdicts)
        timing_rows.append({"variant": variant.name, "seed": seed, "round": k, "mean_verify_time": t})
        return metrics

    def on_round(net, state):
        k = state.round
        stage["name"] = f"seed{seed}/{variant.name}/round{k}/persist"
        r = dict(state.rounds[-1])
        result_rows.append({"variant": variant.name, "seed": seed, **r})
        save_checkpoint(net, {"seed": seed, "epoch": tcfg.epochs, "prune_round": k,
                              "config_digest": cfg.digest()}, os.path.join(ckpt_dir, f"round{k}.json"))
        _flush(out, metric_rows, verdict_rows, result_rows, timing_rows, state)
        if log:
            log(f"seed {seed} {variant.name} round {k}: remain {r['remain_ratio']:.4f} "
                f"std {r['std_acc']:.3f} ver {r['verified_acc']:.3f} unstable {r['unstable_ratio']:.4f}")

    try:
        _, state = iterative_prune(train_fn, net, cfg.pruning.rounds, cfg.pruning.rate, variant.method,
                                   eval_fn, variant.regularizer, batch=batch, seed=seed,
                                   finetune=cfg.pruning.finetune, on_round=on_round)
    except Exception as exc:
        raise RunFailed(stage["name"], exc) from exc
    return state


def _flush(out, metric_rows, verdict_rows, result_rows, timing_rows, state):
    cols = ("round",) + tuple(k for k in ("epoch", "eps", "loss", "reg_loss", "std_acc", "adv_acc",
                                          "instability_mean"))
    write_csv(os.path.join(out, "metrics.csv"), cols, metric_rows)
    write_csv(os.path.join(out, "verdicts.csv"), VERDICT_COLUMNS, verdict_rows)
    write_csv(os.path.join(out, "results.csv"), RESULT_COLUMNS, result_rows)
    write_csv(os.path.join(out, "timings.csv"), ("variant", "seed", "round", "mean_verify_time"), timing_rows)
    with open(os.path.join(out, "prune_state.json"), "w") as fh:
        fh.write(state.to_json() + "\n")


def run_experiment(cfg, out=None, log=None, seeds=None):
    """Run every (seed, variant) pipeline, then aggregate.  Returns the run directory.

    On failure the partial outputs stay on disk, status.json names the
    failed stage, and RunFailed is raised.
    """
    run_dir = run_dir_for(cfg, out)
    _write_effective(cfg, run_dir)
    status_path = os.path.join(run_dir, "status.json")
    _write_json(status_path, {"status": "running"})
    try:
        split = load_data(cfg)
    except Exception as exc:
        _write_json(status_path, {"status": "failed", "stage": "data", "error": str(exc)})
        raise RunFailed("data", exc) from exc
    for seed in (seeds if seeds is not None else cfg.seeds):
        for variant in cfg.pruning.variants:
            try:
                run_seed_variant(cfg, split, seed, variant, run_dir, log)
            except RunFailed as exc:
                _write_json(status_path, {"status": "failed", "stage": exc.stage, "error": str(exc.__cause__)})
                raise
    report(run_dir)
    _write_json(status_path, {"status": "complete"})
    return run_dir


# ---------------------------------------------------------------- reporting


def collect(run_dir):
    """All per-seed result rows (typed) and timing rows under a run directory."""
    rows, times = [], []
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"no run directory {run_dir}")
    for seed_dir in sorted(os.listdir(run_dir)):
        if not seed_dir.startswith("seed"):
            continue
        base = os.path.join(run_dir, seed_dir)
        for variant in sorted(os.listdir(base)):
            path = os.path.join(base, variant, "results.csv")
            if not os.path.exists(path):
                continue
            for r in read_csv(path):
                t = {"variant": r["variant"], "seed": int(r["seed"]), "round": int(r["round"]),
                     "flags": r["flags"]}
                t.update({c: float(r[c]) for c in NUMERIC})
                rows.append(t)
            tpath = os.path.join(base, variant, "timings.csv")
            if os.path.exists(tpath):
                times.extend({"variant": r["variant"], "seed": int(r["seed"]), "round": int(r["round"]),
                              "mean_verify_time": float(r["mean_verify_time"])} for r in read_csv(tpath))
    return rows, times


def aggregate(rows):
    """Seed means per (variant, round), ordered by variant name then round."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["variant"], r["round"])].append(r)
    out = []
    for (variant, rnd) in sorted(groups):
        g = groups[(variant, rnd)]
        agg = {"variant": variant, "round": rnd, "n_seeds": len(g)}
        for c in NUMERIC:
            agg[c] = float(np.mean([r[c] for r in g]))
        out.append(agg)
    return out


def best_round(agg_rows, variant):
    """Round with the highest mean verified accuracy (earliest on ties)."""
    cands = [r for r in agg_rows if r["variant"] == variant and r["round"] > 0]
    if not cands:
        return None
    return max(cands, key=lambda r: (r["verified_acc"], -r["round"]))


def _plot(path, agg_rows, column, ylabel, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "certprune"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for variant in sorted({r["variant"] for r in agg_rows}):
        pts = [(r["round"], r[column]) for r in agg_rows if r["variant"] == variant]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=variant)
    ax.set_xlabel("pruning round")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def report(run_dir, delta=0.0):
    """Aggregate table, Table-2-style summary, SVG curves and certified tickets."""
    rows, times = collect(run_dir)
    if not rows:
        raise ValueError(f"{run_dir}: no results to report")
    out = os.path.join(run_dir, "aggregate")
    os.makedirs(out, exist_ok=True)
    agg = aggregate(rows)
    write_csv(os.path.join(out, "table.csv"), ("variant", "round", "n_seeds") + NUMERIC, agg)

    tmean = defaultdict(list)
    for t in times:
        tmean[(t["variant"], t["round"])].append(t["mean_verify_time"])
    for r in agg:
        vals = tmean.get((r["variant"], r["round"]))
        r["mean_verify_time"] = float(np.mean(vals)) if vals else float("nan")
    write_csv(os.path.join(out, "timings.csv"), ("variant", "round", "mean_verify_time"), agg)

    summary = []
    for variant in sorted({r["variant"] for r in agg}):
        dense = next((r for r in agg if r["variant"] == variant and r["round"] == 0), None)
        best = best_round(agg, variant)
        for label, r in (("dense", dense), ("best", best)):
            if r is None:
                continue
            summary.append({"variant": variant, "row": label, "round": r["round"],
                            "remain_ratio": r["remain_ratio"], "std": r["std_acc"],
                            "adv_fgsm": r["adv_acc_fgsm"], "adv_pgd": r["adv_acc_pgd"],
                            "ver": r["verified_acc"], "t": r["mean_verify_time"]})
    write_csv(os.path.join(out, "summary.csv"),
              ("variant", "row", "round", "remain_ratio", "std", "adv_fgsm", "adv_pgd", "ver", "t"), summary)

    _plot(os.path.join(out, "verified_acc.svg"), agg, "verified_acc", "verified accuracy",
          "Verified accuracy vs pruning round")
    _plot(os.path.join(out, "unstable_ratio.svg"), agg, "unstable_ratio", "unstable neuron ratio",
          "Unstable neurons vs pruning round")
    _plot(os.path.join(out, "instability.svg"), agg, "instability_mean", "mean instability (-l*u)",
          "Instability vs pruning round")
    _plot(os.path.join(out, "verify_time.svg"), agg, "mean_verify_time", "mean verify time (s)",
          "Verification time vs pruning round")

    tickets = {}
    for variant in sorted({r["variant"] for r in agg}):
        mean_state = _state_from(agg, variant)
        per_seed = {}
        for seed in sorted({r["seed"] for r in rows if r["variant"] == variant}):
            st = _state_from([r for r in rows if r["seed"] == seed], variant)
            per_seed[str(seed)] = find_certified_tickets(st, delta) if st.dense else []
        tickets[variant] = {"seed_mean": find_certified_tickets(mean_state, delta) if mean_state.dense else [],
                            "per_seed": per_seed}
    _write_json(os.path.join(out, "tickets.json"), {"delta": delta, "tickets": tickets})
    manifest = {}
    mpath = os.path.join(run_dir, "manifest.json")
    if os.path.exists(mpath):
        with open(mpath) as fh:
            manifest = json.load(fh)
    manifest["seeds_reported"] = sorted({r["seed"] for r in rows})
    manifest["variants"] = sorted({r["variant"] for r in rows})
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return {"table": agg, "summary": summary, "tickets": tickets, "dir": out}


def _state_from(rows, variant):
    rs = sorted((r for r in rows if r["variant"] == variant), key=lambda r: r["round"])
    st = PruneState(0.0, "", rounds=[dict(r) for r in rs])
    dense = [r for r in rs if r["round"] == 0]
    st.dense = dict(dense[0]) if dense else {}
    return st


# ---------------------------------------------------------------- oracle conformance


def random_oracle_net(rng, in_dim, spec, seed):
    depth = int(rng.integers(1, spec.max_layers + 1))
    hidden = tuple(int(h) for h in rng.integers(spec.hidden_min, spec.hidden_max + 1, size=depth))
    n_cls = int(rng.integers(2, 4))
    bn = bool(rng.integers(0, 2))
    net = build_network(mlp_arch(in_dim, hidden, n_cls, bn=bn), seed=seed)
    for layer in net.layers:
        if layer.kind in ("affine", "conv"):
            layer.b.data = rng.normal(0, 0.3, layer.b.data.shape).astype(np.float32)
        if layer.kind == "bn":
            c = layer.channels
            layer.gamma.data = rng.uniform(0.5, 1.5, c).astype(np.float32)
            layer.beta.data = rng.normal(0, 0.2, c).astype(np.float32)
            layer.running_mean = rng.normal(0, 0.2, c).astype(np.float32)
            layer.running_var = rng.uniform(0.5, 2.0, c).astype(np.float32)
    return net


def oracle_check(cfg, verifier=None, log=None, n_nets=None, n_queries=None, on_query=None):
    """verify_sample against oracle_bisect on random low-dimensional nets.

    Returns a report with the (verifier, oracle) agreement matrix and every
    discrepancy (with its verifier trace).  A verifier timeout on an
    oracle-conclusive query counts as a discrepancy.  ``on_query(query,
    verdict, oracle_result)`` sees every query, for extra checks.
    """
    split = load_data(cfg) if cfg.dataset.kind == "two-moons" else None
    in_dim = int(np.prod(split.train.X.shape[1:])) if split is not None else None
    if in_dim is None or in_dim > 3:
        raise ValueError("oracle_check needs an input dimension <= 3")
    spec = cfg.oracle
    vcfg = VerifierConfig(time_budget=cfg.verifier.time_budget, max_subdomains=10 ** 7,
                          batch=cfg.verifier.batch, seed=spec.seed)
    verifier = verifier or BaBVerifier(vcfg)
    rng = np.random.default_rng(spec.seed)
    matrix = defaultdict(int)
    discrepancies = []
    n_nets = spec.nets if n_nets is None else n_nets
    n_queries = spec.queries if n_queries is None else n_queries
    for k in range(n_nets):
        net = random_oracle_net(rng, in_dim, spec, seed=spec.seed * 1000 + k)
        lin = linearize(net)
        for q in range(n_queries):
            x = rng.uniform(0, 1, in_dim)
            y = int(lin.forward(x[None]).argmax())
            eps = float(spec.eps[q % len(spec.eps)])
            query = RobustnessQuery(lin, x, y, eps, time_budget=vcfg.time_budget, max_subdomains=vcfg.max_subdomains,
                                    seed=spec.seed + q)
            v = verifier.verify(query)
            o = oracle_bisect(lin, query.box(), build_margin_spec(y, lin.final_W.shape[0],
                                                                  (lin.final_W, lin.final_b)),
                              min_width=spec.min_width)
            matrix[(v.status, o.status)] += 1
            if on_query is not None:
                on_query(query, v, o)
            problem = None
            if v.status == "falsified":
                cex = v.counterexample
                inside = np.all(np.abs(cex - x) <= eps + 1e-12) and np.all((cex >= 0) & (cex <= 1))
                z = lin.forward(cex[None])[0]
                if not inside or not np.any(np.delete(z, y) > z[y]):
                    problem = "invalid witness"
            if o.status != "inconclusive" and v.status != o.status:
                problem = problem or "verdict mismatch"
            if problem:
                lines = []
                type(verifier)(verifier.config, trace=lines.append).verify(query)
                discrepancies.append({"net": k, "query": q, "x": x.tolist(), "label": y, "eps": eps,
                                      "verifier": v.status, "oracle": o.status, "problem": problem,
                                      "trace": lines})
        if log:
            log(f"net {k}: {dict(matrix)}")
    return {"queries": int(sum(matrix.values())),
            "matrix": {f"{a}/{b}": n for (a, b), n in sorted(matrix.items())},
            "discrepancies": discrepancies}
