"""Declarative FCNN graphs: validation, initialization, forward and backward."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import ops
from .ops import LayerParams, ShapeError

LAYER_KINDS = ("conv", "relu", "sigmoid", "maxpool2", "upsample2", "concat")
INPUT_ID = "input"


class SpecError(ValueError):
    """Raised for malformed network specifications."""


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple
    filters: int | None = None
    kernel: tuple | None = None

    def to_dict(self):
        d = {"id": self.id, "kind": self.kind, "inputs": list(self.inputs)}
        if self.kind == "conv":
            d["filters"] = self.filters
            d["kernel"] = list(self.kernel)
        return d


@dataclass(frozen=True)
class NetworkSpec:
    """An acyclic graph of layers read from ``input`` to ``output``.

    ``paper_compatible`` enables the multiple-of-4 input policy: the deepest
    input-to-output path crosses exactly two 2x2 pooling stages.
    """

    layers: tuple
    output: str
    in_channels: int = 1
    name: str = "custom"
    paper_compatible: bool = True
    _channels: dict = field(default=None, init=False, repr=False, compare=False)
    _scales: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        channels, scales = _validate(self)
        object.__setattr__(self, "_channels", channels)
        object.__setattr__(self, "_scales", scales)

    @property
    def conv_ids(self):
        return [layer.id for layer in self.layers if layer.kind == "conv"]

    @property
    def downsampling(self):
        """Total down-sampling factor; inputs must be multiples of it."""
        return max(self._scales.values())

    def channels(self, layer_id):
        return self._channels[layer_id]

    def to_dict(self):
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "paper_compatible": self.paper_compatible,
            "output": self.output,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        prev = INPUT_ID
        for item in d["layers"]:
            kind = item["kind"]
            inputs = item.get("inputs", [prev])
            if isinstance(inputs, str):
                inputs = [inputs]
            kernel = None
            if kind == "conv":
                k = item.get("kernel", 3)
                kernel = (int(k), int(k)) if np.isscalar(k) else tuple(int(v) for v in k)
            layers.append(
                LayerSpec(
                    id=str(item["id"]),
                    kind=kind,
                    inputs=tuple(str(i) for i in inputs),
                    filters=int(item["filters"]) if kind == "conv" else None,
                    kernel=kernel,
                )
            )
            prev = str(item["id"])
        return cls(
            layers=tuple(layers),
            output=str(d.get("output", prev)),
            in_channels=int(d.get("in_channels", 1)),
            name=str(d.get("name", "custom")),
            paper_compatible=bool(d.get("paper_compatible", True)),
        )

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_yaml(cls, text):
        return cls.from_dict(yaml.safe_load(text))

    def hash(self):
        """32-byte SHA-256 digest of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()


def load_spec(path):
    with open(path) as fh:
        return NetworkSpec.from_yaml(fh.read())


def _validate(spec):
    channels = {INPUT_ID: spec.in_channels}
    scales = {INPUT_ID: 1}
    pools = {INPUT_ID: {0}}
    if spec.in_channels <= 0:
        raise SpecError("in_channels must be positive")
    for layer in spec.layers:
        if layer.kind not in LAYER_KINDS:
            raise SpecError(f"layer {layer.id!r}: unknown kind {layer.kind!r}")
        if layer.id in channels:
            raise SpecError(f"duplicate layer id {layer.id!r}")
        for src in layer.inputs:
            if src not in channels:
                raise SpecError(
                    f"layer {layer.id!r} reads {src!r}, which is not defined before it"
                )
        n_in = len(layer.inputs)
        if layer.kind == "concat":
            if n_in < 2:
                raise SpecError(f"concat layer {layer.id!r} needs at least two inputs")
            in_scales = {scales[s] for s in layer.inputs}
            if len(in_scales) != 1:
                raise SpecError(f"concat layer {layer.id!r} mixes spatial scales {in_scales}")
            channels[layer.id] = sum(channels[s] for s in layer.inputs)
            scales[layer.id] = in_scales.pop()
            pools[layer.id] = set().union(*(pools[s] for s in layer.inputs))
            continue
        if n_in != 1:
            raise SpecError(f"{layer.kind} layer {layer.id!r} takes exactly one input")
        src = layer.inputs[0]
        channels[layer.id] = channels[src]
        scales[layer.id] = scales[src]
        pools[layer.id] = pools[src]
        if layer.kind == "conv":
            if not layer.filters or layer.filters <= 0:
                raise SpecError(f"conv layer {layer.id!r} needs a positive filter count")
            if any(k % 2 == 0 or k <= 0 for k in layer.kernel):
                raise SpecError(f"conv layer {layer.id!r}: kernel extents must be odd")
            channels[layer.id] = layer.filters
        elif layer.kind == "maxpool2":
            scales[layer.id] = scales[src] * 2
            pools[layer.id] = {p + 1 for p in pools[src]}
        elif layer.kind == "upsample2":
            if scales[src] == 1:
                raise SpecError(f"upsample2 layer {layer.id!r} would exceed input resolution")
            scales[layer.id] = scales[src] // 2
    if spec.output not in channels or spec.output == INPUT_ID:
        raise SpecError(f"output {spec.output!r} is not a layer")
    last = {layer.id: layer for layer in spec.layers}[spec.output]
    if last.kind != "sigmoid" or channels[spec.output] != 1:
        raise SpecError("the output layer must be a sigmoid with one channel")
    if scales[spec.output] != 1:
        raise SpecError("the output must be at input resolution")
    # skip connections bypass pooling, so only the deepest path must pool twice
    if spec.paper_compatible and max(pools[spec.output]) != 2:
        raise SpecError(
            "paper_compatible specs need exactly two maxpool2 stages on the deepest "
            f"input-to-output path, found {max(pools[spec.output])}"
        )
    return channels, scales


def parameter_count(spec):
    total = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            cin = spec.channels(layer.inputs[0])
            kh, kw = layer.kernel
            total += kh * kw * cin * layer.filters + layer.filters
    return total


def receptive_radius(spec):
    """Half-width, in input pixels, of the output's receptive field.

    An output pixel at ``x`` depends only on inputs in ``[x - r, x + r]``
    provided patch offsets are aligned to ``spec.downsampling``. Pooling
    alignment slack is included, so the bound is conservative.
    """
    radius = {INPUT_ID: 0}
    scale = {INPUT_ID: 1}
    for layer in spec.layers:
        src = layer.inputs[0]
        if layer.kind == "concat":
            radius[layer.id] = max(radius[s] for s in layer.inputs)
            scale[layer.id] = scale[src]
        elif layer.kind == "conv":
            radius[layer.id] = radius[src] + (max(layer.kernel) // 2) * scale[src]
            scale[layer.id] = scale[src]
        elif layer.kind == "maxpool2":
            radius[layer.id] = radius[src]
            scale[layer.id] = scale[src] * 2
        elif layer.kind == "upsample2":
            radius[layer.id] = radius[src] + scale[src] // 2
            scale[layer.id] = scale[src] // 2
        else:
            radius[layer.id] = radius[src]
            scale[layer.id] = scale[src]
    return radius[spec.output]


class ParameterSet(dict):
    """Mapping of conv layer id to :class:`LayerParams` (the network's theta)."""

    def __init__(self, params=(), seed=None):
        super().__init__(params)
        self.seed = seed

    def copy(self):
        return ParameterSet({k: v.copy() for k, v in self.items()}, seed=self.seed)

    def astype(self, dtype):
        return ParameterSet({k: v.astype(dtype) for k, v in self.items()}, seed=self.seed)

    def flat(self):
        """All kernels then biases, concatenated in sorted-id order."""
        parts = []
        for key in sorted(self):
            parts += [self[key].kernels.ravel(), self[key].biases.ravel()]
        return np.concatenate(parts) if parts else np.zeros(0)


def check_params(spec, params):
    if set(params) != set(spec.conv_ids):
        missing = set(spec.conv_ids) - set(params)
        extra = set(params) - set(spec.conv_ids)
        raise SpecError(f"parameter keys do not match spec: missing {missing}, extra {extra}")
    for layer in spec.layers:
        if layer.kind != "conv":
            continue
        expected = (layer.filters, spec.channels(layer.inputs[0]), *layer.kernel)
        if params[layer.id].kernels.shape != expected:
            raise ShapeError(
                f"layer {layer.id!r}: kernels {params[layer.id].kernels.shape} != {expected}",
                dim="C",
            )


def init_params(spec, seed=0, dtype=np.float32):
    """He-uniform (fan-in) kernels and zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = ParameterSet(seed=seed)
    for layer in spec.layers:
        if layer.kind != "conv":
            continue
        cin = spec.channels(layer.inputs[0])
        kh, kw = layer.kernel
        fan_in = cin * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        kernels = rng.uniform(-bound, bound, size=(layer.filters, cin, kh, kw))
        params[layer.id] = LayerParams(kernels.astype(dtype), np.zeros(layer.filters, dtype))
    return params


@dataclass
class Tape:
    spec: NetworkSpec
    params: ParameterSet
    cache: dict
    input_shape: tuple


def check_input(spec, x):
    x = ops.check_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"network expects {spec.in_channels} input channels, got {x.shape[1]}", dim="C"
        )
    m = spec.downsampling if spec.paper_compatible else 1
    for axis, dim in ((2, "H"), (3, "W")):
        if x.shape[axis] % m:
            raise ShapeError(
                f"input {dim}={x.shape[axis]} is not a multiple of {m}; resize the image first",
                dim=dim,
            )
    return x


def _last_uses(spec):
    last = {}
    for i, layer in enumerate(spec.layers):
        for src in layer.inputs:
            last[src] = i
    return last


def _consumers(spec):
    count = {}
    for layer in spec.layers:
        for src in layer.inputs:
            count[src] = count.get(src, 0) + 1
    return count


def _concat_chains(spec, last):
    """Map concat id -> (chain root, total channels) for concats that extend
    a concat consumed last by them, so a chain can share one buffer."""
    index = {layer.id: i for i, layer in enumerate(spec.layers)}
    kinds = {layer.id: layer.kind for layer in spec.layers}
    root = {}
    for layer in spec.layers:
        if layer.kind != "concat":
            continue
        head = layer.inputs[0]
        if kinds.get(head) == "concat" and last[head] == index[layer.id] and head != spec.output:
            root[layer.id] = root[head]
        else:
            root[layer.id] = layer.id
    total = {}
    for cid, r in root.items():
        total[r] = max(total.get(r, 0), spec.channels(cid))
    return {cid: (r, total[r]) for cid, r in root.items()}


def forward(spec, params, x, record=False):
    """Run the network. Returns ``(output, tape)``; ``tape`` is ``None`` unless ``record``.

    Without ``record`` a conv feeding only a ReLU is fused with it,
    chained concats write into one shared buffer, and activations are
    released after their last consumer.
    """
    x = check_input(spec, x)
    if not record:
        return _infer(spec, params, x), None
    values = {INPUT_ID: x}
    cache = {}
    for layer in spec.layers:
        src = values[layer.inputs[0]]
        kind = layer.kind
        if kind == "conv":
            out = ops.conv2d_forward(src, params[layer.id])
        elif kind == "relu":
            out = ops.relu(src)
        elif kind == "sigmoid":
            out = ops.sigmoid(src)
        elif kind == "maxpool2":
            out, cache[layer.id] = ops.maxpool2(src)
        elif kind == "upsample2":
            out = ops.upsample2(src)
        else:
            out = np.concatenate([values[s] for s in layer.inputs], axis=1)
        values[layer.id] = out
    for layer in spec.layers:
        if layer.kind in ("conv", "relu"):
            cache[layer.id] = values[layer.inputs[0]]
        elif layer.kind == "sigmoid":
            cache[layer.id] = values[layer.id]
    return values[spec.output], Tape(spec, params, cache, x.shape)


def _infer(spec, params, x):
    last = _last_uses(spec)
    consumers = _consumers(spec)
    chains = _concat_chains(spec, last)
    buffers = {}
    values = {INPUT_ID: x}
    fused = set()
    layers = spec.layers
    for i, layer in enumerate(layers):
        kind = layer.kind
        if layer.id in fused:
            values[layer.id] = values.pop(layer.inputs[0])
        else:
            src = values[layer.inputs[0]]
            if kind == "conv":
                nxt = layers[i + 1] if i + 1 < len(layers) else None
                fuse = (nxt is not None and nxt.kind == "relu" and nxt.inputs[0] == layer.id
                        and consumers.get(layer.id) == 1 and layer.id != spec.output)
                out = ops.conv2d_forward(src, params[layer.id], relu=fuse)
                if fuse:
                    fused.add(nxt.id)
            elif kind == "relu":
                out = ops.relu(src)
            elif kind == "sigmoid":
                out = ops.sigmoid(src)
            elif kind == "maxpool2":
                out = ops.maxpool2(src)[0]
            elif kind == "upsample2":
                out = ops.upsample2(src)
            else:
                out = _chain_concat(layer, values, chains[layer.id], buffers)
            values[layer.id] = out
        for s in layer.inputs:
            if last.get(s) == i and s in values and s != spec.output:
                del values[s]
    return values[spec.output]


def _chain_concat(layer, values, chain, buffers):
    root, total = chain
    if root == layer.id:
        parts = [values[s] for s in layer.inputs]
        n, _, h, w = parts[0].shape
        buf = buffers[root] = np.empty((n, total, h, w), dtype=parts[0].dtype)
        start = 0
    else:
        buf = buffers[root]
        start = values[layer.inputs[0]].shape[1]
        parts = [values[s] for s in layer.inputs[1:]]
    for part in parts:
        c = part.shape[1]
        buf[:, start : start + c] = part
        start += c
    return buf[:, :start]


def backward(tape, grad_out, return_input_grad=False):
    """Reverse pass over a recorded tape.

    Returns a :class:`ParameterSet` of gradients, plus the input gradient when
    ``return_input_grad`` is set.
    """
    if tape is None:
        raise ValueError("no tape recorded; call forward(..., record=True)")
    spec, params, cache = tape.spec, tape.params, tape.cache
    grads = {spec.output: np.asarray(grad_out)}
    param_grads = ParameterSet(seed=params.seed)

    def accumulate(key, g):
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for layer in reversed(spec.layers):
        g = grads.pop(layer.id, None)
        if layer.kind == "conv":
            if g is None:
                p = params[layer.id]
                param_grads[layer.id] = LayerParams(np.zeros_like(p.kernels), np.zeros_like(p.biases))
                continue
            gx, gp = ops.conv2d_backward(cache[layer.id], params[layer.id], g)
            param_grads[layer.id] = gp
            accumulate(layer.inputs[0], gx)
            continue
        if g is None:
            continue
        if layer.kind == "relu":
            accumulate(layer.inputs[0], ops.relu_backward(cache[layer.id], g))
        elif layer.kind == "sigmoid":
            accumulate(layer.inputs[0], ops.sigmoid_backward(cache[layer.id], g))
        elif layer.kind == "maxpool2":
            accumulate(layer.inputs[0], ops.maxpool2_backward(cache[layer.id], g))
        elif layer.kind == "upsample2":
            accumulate(layer.inputs[0], ops.upsample2_backward(g))
        else:
            start = 0
            for src in layer.inputs:
                c = spec.channels(src)
                accumulate(src, g[:, start : start + c])
                start += c
    if return_input_grad:
        gx = grads.get(INPUT_ID)
        if gx is None:
            gx = np.zeros(tape.input_shape)
        return param_grads, gx
    return param_grads


def predict(spec, params, x):
    return forward(spec, params, x)[0]
