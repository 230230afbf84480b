"""Bit-exact JSON checkpoints.

Layout (one top-level section per line, in this order)::

    format_version  int
    arch            layer descriptors, input shape, class count, pruning scope
    params          name -> {shape, data}: base64 little-endian float32
    masks           layer index -> {shape, bits}: base64 of np.packbits (row-major,
                    big-endian bit order within a byte, zero-padded)
    snapshot        like params, plus the initial BN running statistics
    bn_running      name -> {shape, data}
    meta            {seed, epoch, prune_round, config_digest}
"""

import base64
import json
from dataclasses import dataclass

import numpy as np

from .network import ArchSpec, Network, _make_layer

FORMAT_VERSION = 1
SECTIONS = ("format_version", "arch", "params", "masks", "snapshot", "bn_running", "meta")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net: Network
    meta: dict


def _enc(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _dec(obj, where):
    try:
        shape = tuple(obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{where}: malformed buffer ({exc})") from None
    n = int(np.prod(shape))
    if len(raw) != 4 * n:
        raise CheckpointError(f"{where}: expected {4 * n} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def _enc_mask(m):
    return {"shape": list(m.shape),
            "bits": base64.b64encode(np.packbits(m.reshape(-1).astype(np.uint8)).tobytes()).decode("ascii")}


def _dec_mask(obj, where):
    try:
        shape = tuple(obj["shape"])
        raw = np.frombuffer(base64.b64decode(obj["bits"], validate=True), dtype=np.uint8)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{where}: malformed mask ({exc})") from None
    n = int(np.prod(shape))
    if raw.size != (n + 7) // 8:
        raise CheckpointError(f"{where}: expected {(n + 7) // 8} mask bytes, got {raw.size}")
    return np.unpackbits(raw)[:n].astype(bool).reshape(shape)


def save_checkpoint(net, meta, path):
    state = net.state_arrays()
    params = {name: _enc(t.data) for name, t in net.named_parameters()}
    running = {k: _enc(v) for k, v in state.items() if k.endswith(("running_mean", "running_var"))}
    arch = net.arch.to_dict()
    arch.update(prune_linear=net.prune_linear, dense_prunable=net.dense_prunable)
    doc = {
        "format_version": FORMAT_VERSION,
        "arch": arch,
        "params": params,
        "masks": {str(i): _enc_mask(m) for i, m in sorted(net.masks.items())},
        "snapshot": {k: _enc(v) for k, v in net.snapshot.items()},
        "bn_running": running,
        "meta": {"seed": int(meta.get("seed", net.seed)), "epoch": int(meta.get("epoch", 0)),
                 "prune_round": int(meta.get("prune_round", 0)),
                 "config_digest": str(meta.get("config_digest", ""))},
    }
    lines = [f"{json.dumps(key)}: {json.dumps(doc[key], sort_keys=True)}" for key in SECTIONS]
    with open(path, "w") as fh:
        fh.write("{\n" + ",\n".join(lines) + "\n}\n")


def _locate_truncation(text, pos):
    present = [k for k in SECTIONS if f'\n"{k}": ' in text[:pos + 1] or text.startswith(f'{{"{k}"')]
    if not present:
        return f"checkpoint truncated before section {SECTIONS[0]!r}"
    last = present[-1]
    missing = [k for k in SECTIONS[SECTIONS.index(last) + 1:]]
    msg = f"checkpoint truncated inside section {last!r}"
    if missing:
        msg += f"; missing sections: {', '.join(missing)}"
    return msg


def load_checkpoint(path):
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(_locate_truncation(text, exc.pos)) from None
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint root must be an object")
    for key in SECTIONS:
        if key not in doc:
            raise CheckpointError(f"missing section {key!r}")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"format_version {doc['format_version']} != supported {FORMAT_VERSION}")
    try:
        arch = ArchSpec.from_dict(doc["arch"])
        arch.shapes()
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"arch: {exc}") from None
    layers = [_make_layer(d) for d in arch.layers]
    net = Network(arch, layers, {}, {}, seed=int(doc["meta"].get("seed", 0)),
                  prune_linear=bool(doc["arch"].get("prune_linear", False)),
                  dense_prunable=int(doc["arch"].get("dense_prunable", 0)))
    for i, layer in enumerate(layers):
        for name, t in layer.params().items():
            key = f"{i}.{name}"
            if key not in doc["params"]:
                raise CheckpointError(f"params.{key}: missing")
            arr = _dec(doc["params"][key], f"params.{key}")
            if arr.shape != t.shape:
                raise CheckpointError(f"params.{key}: shape {arr.shape} != {t.shape}")
            t.data = arr
        if layer.kind == "bn":
            for name in ("running_mean", "running_var"):
                key = f"{i}.{name}"
                if key not in doc["bn_running"]:
                    raise CheckpointError(f"bn_running.{key}: missing")
                setattr(layer, name, _dec(doc["bn_running"][key], f"bn_running.{key}"))
    net.masks = {int(i): _dec_mask(m, f"masks.{i}") for i, m in doc["masks"].items()}
    net.snapshot = {k: _dec(v, f"snapshot.{k}") for k, v in doc["snapshot"].items()}
    expected = set(net.state_arrays())
    if set(net.snapshot) != expected:
        raise CheckpointError(f"snapshot: keys {sorted(set(net.snapshot) ^ expected)} mismatch")
    return Checkpoint(net, dict(doc["meta"]))
