"""Feedforward ReLU networks with pruning masks and an initialization snapshot."""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import Affine, BatchNorm, Conv2d, Flatten, ReLU, layer_forward

LINEAR_KINDS = ("affine", "conv")


@dataclass
class ArchSpec:
    """Ordered layer descriptors plus input shape and class count.

    Descriptors are dicts: ``{"kind": "affine", "in": 2, "out": 32}``,
    ``{"kind": "conv", "in": 3, "out": 32, "kernel": 3, "stride": 1, "padding": 1}``,
    ``{"kind": "bn", "channels": 32}``, ``{"kind": "relu"}``, ``{"kind": "flatten"}``.
    """

    layers: list
    input_shape: tuple
    num_classes: int

    def to_dict(self):
        return {"layers": [dict(d) for d in self.layers],
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d):
        return cls([dict(x) for x in d["layers"]], tuple(d["input_shape"]), int(d["num_classes"]))

    def shapes(self):
        """Output shape (without batch axis) of every layer; validates composition."""
        shape = tuple(self.input_shape)
        out = []
        for i, d in enumerate(self.layers):
            kind = d.get("kind")
            try:
                if kind == "affine":
                    if shape != (d["in"],):
                        raise ValueError(f"expects input ({d['in']},), got {shape}")
                    shape = (d["out"],)
                elif kind == "conv":
                    if len(shape) != 3 or shape[0] != d["in"]:
                        raise ValueError(f"expects {d['in']} input channels, got {shape}")
                    k, s, p = d["kernel"], d.get("stride", 1), d.get("padding", 1)
                    h, w = (shape[1] + 2 * p - k) // s + 1, (shape[2] + 2 * p - k) // s + 1
                    if h <= 0 or w <= 0:
                        raise ValueError(f"empty output for input {shape}")
                    shape = (d["out"], h, w)
                elif kind == "bn":
                    if shape[0] != d["channels"]:
                        raise ValueError(f"expects {d['channels']} channels, got {shape}")
                elif kind == "relu":
                    prev = [x["kind"] for x in self.layers[:i]]
                    if prev and prev[-1] == "bn":
                        prev = prev[:-1]
                    if not prev or prev[-1] not in LINEAR_KINDS:
                        raise ValueError("relu must follow affine/conv (optionally via bn)")
                elif kind == "flatten":
                    shape = (int(np.prod(shape)),)
                else:
                    raise ValueError(f"unknown kind {kind!r}")
            except (KeyError, IndexError) as exc:
                raise ValueError(f"layer {i}: malformed descriptor ({exc})") from None
            except ValueError as exc:
                raise ValueError(f"layer {i} ({kind}): {exc}") from None
            out.append(shape)
        if not self.layers or self.layers[-1]["kind"] != "affine" or shape != (self.num_classes,):
            raise ValueError(f"layer {len(self.layers) - 1}: final layer must be affine with "
                             f"{self.num_classes} outputs")
        return out


def mlp_arch(in_dim=2, hidden=(32, 32, 32), num_classes=2, bn=True):
    layers, prev = [], in_dim
    for h in hidden:
        layers.append({"kind": "affine", "in": prev, "out": h})
        if bn:
            layers.append({"kind": "bn", "channels": h})
        layers.append({"kind": "relu"})
        prev = h
    layers.append({"kind": "affine", "in": prev, "out": num_classes})
    return ArchSpec(layers, (in_dim,), num_classes)


def _conv_block(cin, cout, k, s):
    return [{"kind": "conv", "in": cin, "out": cout, "kernel": k, "stride": s, "padding": 1},
            {"kind": "bn", "channels": cout}, {"kind": "relu"}]


def table3_arch(in_channels=3, size=32, num_classes=10):
    layers = []
    for cin, cout, k, s in [(in_channels, 32, 3, 1), (32, 64, 4, 2), (64, 64, 3, 1),
                            (64, 128, 4, 2), (128, 128, 4, 2)]:
        layers += _conv_block(cin, cout, k, s)
    spec = ArchSpec(layers + [{"kind": "flatten"}], (in_channels, size, size), num_classes)
    flat = spec_flat_features(spec)
    spec.layers += [{"kind": "affine", "in": flat, "out": 100}, {"kind": "relu"},
                    {"kind": "affine", "in": 100, "out": num_classes}]
    return spec


def smallconv_arch(in_channels=1, size=28, num_classes=10, width=8, hidden=32):
    layers = _conv_block(in_channels, width, 4, 2) + _conv_block(width, 2 * width, 4, 2)
    spec = ArchSpec(layers + [{"kind": "flatten"}], (in_channels, size, size), num_classes)
    flat = spec_flat_features(spec)
    spec.layers += [{"kind": "affine", "in": flat, "out": hidden}, {"kind": "relu"},
                    {"kind": "affine", "in": hidden, "out": num_classes}]
    return spec


def spec_flat_features(spec):
    """Feature count produced by the trailing flatten of a partial conv spec."""
    shape = tuple(spec.input_shape)
    for d in spec.layers:
        if d["kind"] == "conv":
            k, s, p = d["kernel"], d.get("stride", 1), d.get("padding", 1)
            shape = (d["out"], (shape[1] + 2 * p - k) // s + 1, (shape[2] + 2 * p - k) // s + 1)
        elif d["kind"] == "flatten":
            shape = (int(np.prod(shape)),)
    return shape[0]


ARCH_PRESETS = {"mlp": mlp_arch, "table3": table3_arch, "smallconv": smallconv_arch}


def _make_layer(d):
    kind = d["kind"]
    if kind == "affine":
        return Affine(d["in"], d["out"])
    if kind == "conv":
        return Conv2d(d["in"], d["out"], d["kernel"], d.get("stride", 1), d.get("padding", 1))
    if kind == "bn":
        return BatchNorm(d["channels"])
    if kind == "relu":
        return ReLU()
    return Flatten()


@dataclass
class Network:
    arch: ArchSpec
    layers: list
    masks: dict  # layer index -> bool array shaped like that layer's W
    snapshot: dict  # state name -> array captured at build time
    seed: int = 0
    prune_linear: bool = False
    dense_prunable: int = 0
    meta: dict = field(default_factory=dict)

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, t in layer.params().items():
                yield f"{i}.{name}", t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_arrays(self):
        """Every parameter and BN running statistic, keyed by name (views)."""
        out = {name: t.data for name, t in self.named_parameters()}
        for i, layer in enumerate(self.layers):
            if layer.kind == "bn":
                out[f"{i}.running_mean"] = layer.running_mean
                out[f"{i}.running_var"] = layer.running_var
        return out

    def load_state(self, arrays):
        for i, layer in enumerate(self.layers):
            for name, t in layer.params().items():
                t.data = np.array(arrays[f"{i}.{name}"], dtype=np.float32)
            if layer.kind == "bn":
                layer.running_mean = np.array(arrays[f"{i}.running_mean"], dtype=np.float32)
                layer.running_var = np.array(arrays[f"{i}.running_var"], dtype=np.float32)

    def prunable_indices(self):
        kinds = LINEAR_KINDS if self.prune_linear else ("conv",)
        return [i for i, layer in enumerate(self.layers) if layer.kind in kinds]

    def relu_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == "relu"]

    def copy(self):
        return copy.deepcopy(self)


def build_network(spec, seed=0, prune_linear=False):
    """Kaiming-uniform (fan-in) weights, zero biases, unit BN; all-ones masks."""
    spec.shapes()
    rng = np.random.default_rng(seed)
    layers = [_make_layer(d) for d in spec.layers]
    for layer in layers:
        if layer.kind in LINEAR_KINDS:
            fan_in = int(np.prod(layer.W.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            layer.W.data = rng.uniform(-bound, bound, size=layer.W.shape).astype(np.float32)
    net = Network(spec, layers, {}, {}, seed=seed, prune_linear=prune_linear)
    net.masks = {i: np.ones(layers[i].W.shape, dtype=bool) for i in net.prunable_indices()}
    net.dense_prunable = int(sum(m.size for m in net.masks.values()))
    net.snapshot = {k: v.copy() for k, v in net.state_arrays().items()}
    return net


def forward_network(net, x, mode="eval", stats=None):
    h = ad.as_tensor(x)
    expected = tuple(net.arch.input_shape)
    if h.shape[1:] != expected:
        raise ValueError(f"network expects input (N, {expected}), got {h.shape}")
    for layer in net.layers:
        h = layer_forward(layer, h, mode, stats)
    return h


def predict(net, x):
    return forward_network(net, np.asarray(x, dtype=np.float32)).data


def apply_masks(net):
    for i, m in net.masks.items():
        w = net.layers[i].W
        w.data = np.where(m, w.data, np.float32(0)).astype(np.float32)
    return net


def rewind(net):
    """Restore every parameter and running statistic from the snapshot, then re-mask."""
    net.load_state(net.snapshot)
    return apply_masks(net)


def remain_ratio(net):
    if not net.dense_prunable:
        return 1.0
    return float(sum(int(m.sum()) for m in net.masks.values())) / net.dense_prunable


def _consumer(net, producer):
    """Index of the next affine/conv layer after ``producer`` and whether a flatten lies between."""
    flat = False
    for j in range(producer + 1, len(net.layers)):
        kind = net.layers[j].kind
        if kind == "flatten":
            flat = True
        elif kind in LINEAR_KINDS:
            return j, flat
    raise ValueError(f"layer {producer} has no consumer; output channels cannot be removed")


def shrink_structured(net, channel_keep):
    """Physically remove channels.

    ``channel_keep`` maps a producing affine/conv layer index to the output
    channel indices to keep.  The producer's rows, a following BN's
    parameters and statistics, and the consumer's input slices are removed,
    in the live parameters, masks, and snapshot alike.
    """
    new = net.copy()
    shapes = net.arch.shapes()
    for p, keep in sorted(channel_keep.items()):
        keep = np.asarray(sorted(set(int(k) for k in keep)), dtype=np.int64)
        layer = new.layers[p]
        if layer.kind not in LINEAR_KINDS:
            raise ValueError(f"layer {p} is not affine/conv")
        if keep.size == 0:
            raise ValueError(f"empty keep set for layer {p}")
        n_out = layer.W.shape[0]
        if keep[-1] >= n_out:
            raise ValueError(f"keep index out of range for layer {p}")
        c, flat = _consumer(new, p)

        def take(name, idx, axis):
            arr = new.snapshot[name]
            new.snapshot[name] = np.take(arr, idx, axis=axis)

        layer.W.data = layer.W.data[keep]
        layer.b.data = layer.b.data[keep]
        take(f"{p}.W", keep, 0)
        take(f"{p}.b", keep, 0)
        if p in new.masks:
            new.masks[p] = new.masks[p][keep]
        desc = new.arch.layers[p]
        desc["out"] = int(keep.size)
        if p + 1 < len(new.layers) and new.layers[p + 1].kind == "bn":
            bn = new.layers[p + 1]
            bn.gamma.data = bn.gamma.data[keep]
            bn.beta.data = bn.beta.data[keep]
            bn.running_mean = bn.running_mean[keep]
            bn.running_var = bn.running_var[keep]
            bn.channels = int(keep.size)
            for name in ("gamma", "beta", "running_mean", "running_var"):
                take(f"{p + 1}.{name}", keep, 0)
            new.arch.layers[p + 1]["channels"] = int(keep.size)
        cons = new.layers[c]
        if flat:
            hw = int(np.prod(shapes[p][1:])) if len(shapes[p]) == 3 else 1
            cols = (keep[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
        else:
            cols = keep
        cons.W.data = np.take(cons.W.data, cols, axis=1)
        take(f"{c}.W", cols, 1)
        if c in new.masks:
            new.masks[c] = np.take(new.masks[c], cols, axis=1)
        if cons.kind == "affine":
            cons.in_features = int(cols.size)
            new.arch.layers[c]["in"] = int(cols.size)
        else:
            cons.in_channels = int(keep.size)
            new.arch.layers[c]["in"] = int(keep.size)
        if layer.kind == "affine":
            layer.out_features = int(keep.size)
        else:
            layer.out_channels = int(keep.size)
    new.arch.shapes()
    return new
