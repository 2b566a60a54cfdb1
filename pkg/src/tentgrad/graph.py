"""Declarative model graphs: parse, validate, execute, freeze.

A model is a DAG of layer specs loaded from a JSON manifest (or built by
the constructors in `tentgrad.zoo`). Parsing performs shape inference on
batchless shapes and allocates named parameters; `forward` executes the
layers through the autodiff ops and returns the class probabilities
together with the tape recording the pass.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tg
from .tensor import Tape, Tensor

LAYER_KINDS = frozenset({
    "input", "conv2d", "depthwise_conv2d", "maxpool2d", "dense", "activation",
    "global_avg_pool", "dropout", "batchnorm", "add", "multiply", "flatten",
})

# roles included in the L2 penalty and He-uniform initialization
WEIGHT_ROLES = ("/kernel", "/weights")


@dataclass
class LayerSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)
    # batchless output shape, filled in by shape inference
    out_shape: tuple[int, ...] = ()

    def to_manifest(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "params": dict(self.params),
            "inputs": list(self.inputs),
        }


@dataclass
class Parameter:
    """Named weight array; frozen parameters receive zero optimizer updates."""
    name: str
    value: np.ndarray
    trainable: bool = True


@dataclass
class ForwardPass:
    """Result of one graph execution: probabilities plus the recorded tape."""
    probs: Tensor
    tape: Tape
    params: dict[str, Tensor]  # traced handles for the watched parameters


class ModelGraph:
    """Topologically ordered layers plus their named parameters."""

    def __init__(self, layers: list[LayerSpec], parameters: dict[str, Parameter],
                 class_names: list[str]):
        self.layers = layers
        self.parameters = parameters
        self.class_names = list(class_names)

    @property
    def input_layer(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind == "input")

    @property
    def output_layer(self) -> LayerSpec:
        return self.layers[-1]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters.values() if p.trainable]

    def weight_parameter_names(self) -> list[str]:
        """Names of weight matrices/kernels (L2-penalized roles)."""
        return [n for n in self.parameters if n.endswith(WEIGHT_ROLES)]

    def to_manifest(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "layers": [l.to_manifest() for l in self.layers],
        }

    def to_manifest_text(self) -> str:
        return json.dumps(self.to_manifest(), indent=2)


# ---------------------------------------------------------------------------
# parsing and validation

def _toposort(specs: list[LayerSpec]) -> list[LayerSpec]:
    by_name = {s.name: s for s in specs}
    indeg = {s.name: len(s.inputs) for s in specs}
    children: dict[str, list[str]] = {s.name: [] for s in specs}
    for s in specs:
        for up in s.inputs:
            children[up].append(s.name)
    # stable Kahn: ready set processed in manifest order
    order_index = {s.name: i for i, s in enumerate(specs)}
    ready = sorted((n for n, d in indeg.items() if d == 0), key=order_index.get)
    out: list[LayerSpec] = []
    while ready:
        name = ready.pop(0)
        out.append(by_name[name])
        newly = []
        for ch in children[name]:
            indeg[ch] -= 1
            if indeg[ch] == 0:
                newly.append(ch)
        ready = sorted(ready + newly, key=order_index.get)
    if len(out) != len(specs):
        cyclic = sorted(n for n, d in indeg.items() if d > 0)
        raise ValueError(f"layer graph contains a cycle involving: {cyclic}")
    return out


def _int_pair(v) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _infer_and_allocate(layer: LayerSpec, in_shapes: list[tuple[int, ...]],
                        params: dict[str, Parameter]) -> tuple[int, ...]:
    """Compute the layer's batchless output shape and allocate its parameters."""
    kind, p, name = layer.kind, layer.params, layer.name

    def expect(n: int):
        if len(in_shapes) != n:
            raise ValueError(
                f"layer '{name}' ({kind}) expects {n} input(s), got {len(in_shapes)}"
            )

    def add_param(role: str, shape: tuple[int, ...], trainable: bool = True):
        pname = f"{name}/{role}"
        if pname in params:
            raise ValueError(f"duplicate parameter name '{pname}'")
        params[pname] = Parameter(pname, np.zeros(shape, dtype=np.float32), trainable)

    if kind == "input":
        shape = tuple(int(d) for d in p["shape"])
        if len(shape) != 3 or any(d < 1 for d in shape):
            raise ValueError(
                f"layer '{name}': input shape must be [H, W, C], got {p['shape']}"
            )
        return shape

    if kind == "conv2d":
        expect(1)
        h, w, cin = _require_spatial(name, kind, in_shapes[0])
        kh, kw = _int_pair(p.get("kernel_size", 3))
        stride = int(p.get("stride", 1))
        padding = p.get("padding", "valid")
        filters = int(p["filters"])
        add_param("kernel", (kh, kw, cin, filters))
        if p.get("use_bias", True):
            add_param("bias", (filters,))
        ho = tg.conv_output_size(h, kh, stride, padding)
        wo = tg.conv_output_size(w, kw, stride, padding)
        if ho < 1 or wo < 1:
            raise ValueError(f"layer '{name}': kernel {kh}x{kw} does not fit {h}x{w}")
        return (ho, wo, filters)

    if kind == "depthwise_conv2d":
        expect(1)
        h, w, c = _require_spatial(name, kind, in_shapes[0])
        kh, kw = _int_pair(p.get("kernel_size", 3))
        stride = int(p.get("stride", 1))
        padding = p.get("padding", "valid")
        add_param("kernel", (kh, kw, c, 1))
        ho = tg.conv_output_size(h, kh, stride, padding)
        wo = tg.conv_output_size(w, kw, stride, padding)
        if ho < 1 or wo < 1:
            raise ValueError(f"layer '{name}': kernel {kh}x{kw} does not fit {h}x{w}")
        return (ho, wo, c)

    if kind == "maxpool2d":
        expect(1)
        h, w, c = _require_spatial(name, kind, in_shapes[0])
        window = int(p.get("window", 2))
        stride = int(p.get("stride", window))
        if window > h or window > w:
            raise ValueError(
                f"layer '{name}': pool window {window} larger than input {h}x{w}"
            )
        return ((h - window) // stride + 1, (w - window) // stride + 1, c)

    if kind == "dense":
        expect(1)
        if len(in_shapes[0]) != 1:
            raise ValueError(
                f"layer '{name}': dense needs a flat input, got shape "
                f"{in_shapes[0]} (add a flatten or global_avg_pool layer)"
            )
        din, units = in_shapes[0][0], int(p["units"])
        if units < 1:
            raise ValueError(f"layer '{name}': units must be >= 1, got {units}")
        add_param("weights", (din, units))
        if p.get("use_bias", True):
            add_param("bias", (units,))
        return (units,)

    if kind == "activation":
        expect(1)
        if p.get("kind") not in ("relu", "sigmoid", "swish", "softmax"):
            raise ValueError(
                f"layer '{name}': unknown activation kind {p.get('kind')!r}"
            )
        return in_shapes[0]

    if kind == "global_avg_pool":
        expect(1)
        _, _, c = _require_spatial(name, kind, in_shapes[0])
        return (c,)

    if kind == "dropout":
        expect(1)
        rate = float(p.get("rate", 0.5))
        if not 0 <= rate < 1:
            raise ValueError(f"layer '{name}': dropout rate must be in [0, 1)")
        return in_shapes[0]

    if kind == "batchnorm":
        expect(1)
        _, _, c = _require_spatial(name, kind, in_shapes[0])
        add_param("gamma", (c,))
        add_param("beta", (c,))
        add_param("moving_mean", (c,), trainable=False)
        add_param("moving_var", (c,), trainable=False)
        return in_shapes[0]

    if kind == "flatten":
        expect(1)
        return (int(np.prod(in_shapes[0])),)

    if kind == "add":
        expect(2)
        if in_shapes[0] != in_shapes[1]:
            raise ValueError(
                f"layer '{name}': add inputs differ: {in_shapes[0]} vs {in_shapes[1]}"
            )
        return in_shapes[0]

    if kind == "multiply":
        expect(2)
        a, b = in_shapes
        if a == b:
            return a
        # channel gate: (h, w, c) * (c,)
        if len(a) == 1 and len(b) == 3:
            a, b = b, a
        if len(a) == 3 and len(b) == 1 and a[2] == b[0]:
            return a
        raise ValueError(
            f"layer '{name}': multiply inputs incompatible: {in_shapes[0]} vs "
            f"{in_shapes[1]}"
        )

    raise ValueError(f"layer '{name}': unknown layer kind {kind!r}")


def _require_spatial(name: str, kind: str, shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ValueError(
            f"layer '{name}' ({kind}) needs an (H, W, C) input, got shape {shape}"
        )
    return shape


def build_graph(manifest: dict) -> ModelGraph:
    """Validate a manifest dict and construct the graph with zeroed parameters."""
    if "layers" not in manifest or not manifest["layers"]:
        raise ValueError("manifest has no layers")
    class_names = list(manifest.get("class_names", []))

    specs = []
    seen = set()
    for entry in manifest["layers"]:
        spec = LayerSpec(
            name=str(entry["name"]),
            kind=str(entry["kind"]),
            params=dict(entry.get("params", {})),
            inputs=list(entry.get("inputs", [])),
        )
        if spec.name in seen:
            raise ValueError(f"duplicate layer name '{spec.name}'")
        seen.add(spec.name)
        if spec.kind not in LAYER_KINDS:
            raise ValueError(
                f"layer '{spec.name}': unknown kind {spec.kind!r}; expected one "
                f"of {sorted(LAYER_KINDS)}"
            )
        if spec.kind == "input" and spec.inputs:
            raise ValueError(f"input layer '{spec.name}' must have no inputs")
        specs.append(spec)

    names = {s.name for s in specs}
    for s in specs:
        for up in s.inputs:
            if up not in names:
                raise ValueError(
                    f"layer '{s.name}' references unknown input '{up}'"
                )

    n_inputs = sum(1 for s in specs if s.kind == "input")
    if n_inputs != 1:
        raise ValueError(f"manifest must declare exactly one input layer, got {n_inputs}")

    ordered = _toposort(specs)
    params: dict[str, Parameter] = {}
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in ordered:
        in_shapes = [shapes[n] for n in layer.inputs]
        layer.out_shape = _infer_and_allocate(layer, in_shapes, params)
        shapes[layer.name] = layer.out_shape

    graph = ModelGraph(ordered, params, class_names)
    if class_names:
        out = graph.output_layer
        if out.out_shape != (len(class_names),):
            raise ValueError(
                f"final layer '{out.name}' produces shape {out.out_shape}, "
                f"expected ({len(class_names)},) for {len(class_names)} classes"
            )
        if not (out.kind == "activation" and out.params.get("kind") == "softmax"):
            raise ValueError("a classifier graph must end in a softmax activation")
    return graph


def parse_manifest(manifest_text: str) -> ModelGraph:
    """Parse the JSON manifest format into a validated ModelGraph."""
    try:
        manifest = json.loads(manifest_text)
    except json.JSONDecodeError as e:
        raise ValueError(f"manifest is not valid JSON: {e}") from e
    return build_graph(manifest)


def load_manifest(path) -> ModelGraph:
    with open(path, "r", encoding="utf-8") as f:
        return parse_manifest(f.read())


# ---------------------------------------------------------------------------
# initialization

def _param_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    entropy = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), entropy]))


def init_weights(graph: ModelGraph, seed: int) -> None:
    """He-uniform kernels/weights, zero biases, identity batchnorm.

    Deterministic per (seed, parameter name): reinitializing any subset of
    parameters yields the same values regardless of graph layout.
    """
    kinds = {l.name: l.kind for l in graph.layers}
    for p in graph.parameters.values():
        if p.name.endswith("/kernel") or p.name.endswith("/weights"):
            if p.name.endswith("/weights"):
                fan_in = p.value.shape[0]  # dense (din, dout)
            elif kinds[p.name.rsplit("/", 1)[0]] == "depthwise_conv2d":
                fan_in = p.value.shape[0] * p.value.shape[1]
            else:
                kh, kw, cin, _ = p.value.shape
                fan_in = kh * kw * cin
            bound = float(np.sqrt(6.0 / fan_in))
            rng = _param_rng(seed, p.name)
            p.value = rng.uniform(-bound, bound, size=p.value.shape).astype(np.float32)
        elif p.name.endswith("/bias") or p.name.endswith("/beta") \
                or p.name.endswith("/moving_mean"):
            p.value = np.zeros_like(p.value)
        elif p.name.endswith("/gamma") or p.name.endswith("/moving_var"):
            p.value = np.ones_like(p.value)
        else:
            raise ValueError(f"parameter '{p.name}' has an unknown role suffix")


# ---------------------------------------------------------------------------
# execution

def _fold_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def forward(graph: ModelGraph, batch: Tensor, training: bool = False,
            seed: int = 0) -> ForwardPass:
    """Execute the graph on an NHWC batch; returns probabilities and the tape.

    Trainable parameters are watched on a fresh tape so `backward` can
    produce their gradients; frozen parameters enter as constants. Dropout
    layers are active only when `training` is true, with masks derived from
    (seed, layer position).
    """
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    in_layer = graph.input_layer
    expect = in_layer.out_shape
    if batch.data.ndim != 4 or tuple(batch.data.shape[1:]) != expect:
        raise ValueError(
            f"layer '{in_layer.name}': batch shape {batch.data.shape} does not "
            f"match declared input (N, {expect[0]}, {expect[1]}, {expect[2]})"
        )

    tape = Tape()
    traced: dict[str, Tensor] = {}

    def param(name: str) -> Tensor:
        if name in traced:
            return traced[name]
        p = graph.parameters[name]
        t = Tensor(p.value, dtype=p.value.dtype)
        if p.trainable:
            t = tape.watch(t)
            traced[name] = t
        return t

    values: dict[str, Tensor] = {}
    dropout_ordinal = 0
    for layer in graph.layers:
        ins = [values[n] for n in layer.inputs]
        try:
            values[layer.name] = _run_layer(
                layer, ins, batch, param, training, seed, dropout_ordinal
            )
        except ValueError as e:
            raise ValueError(f"layer '{layer.name}': {e}") from e
        if layer.kind == "dropout":
            dropout_ordinal += 1
    probs = values[graph.output_layer.name]
    return ForwardPass(probs=probs, tape=tape, params=traced)


def _run_layer(layer: LayerSpec, ins: list[Tensor], batch: Tensor, param,
               training: bool, seed: int, dropout_ordinal: int) -> Tensor:
    kind, p, name = layer.kind, layer.params, layer.name
    if kind == "input":
        return batch
    if kind == "conv2d":
        bias = param(f"{name}/bias") if p.get("use_bias", True) else \
            Tensor(np.zeros(int(p["filters"]), dtype=np.float32))
        return tg.conv2d(ins[0], param(f"{name}/kernel"), bias,
                         stride=int(p.get("stride", 1)),
                         padding=p.get("padding", "valid"))
    if kind == "depthwise_conv2d":
        return tg.depthwise_conv2d(ins[0], param(f"{name}/kernel"),
                                   stride=int(p.get("stride", 1)),
                                   padding=p.get("padding", "valid"))
    if kind == "maxpool2d":
        window = int(p.get("window", 2))
        return tg.maxpool2d(ins[0], window, int(p.get("stride", window)))
    if kind == "dense":
        units = int(p["units"])
        bias = param(f"{name}/bias") if p.get("use_bias", True) else \
            Tensor(np.zeros(units, dtype=np.float32))
        return tg.dense(ins[0], param(f"{name}/weights"), bias)
    if kind == "activation":
        return tg.activation(ins[0], p["kind"])
    if kind == "global_avg_pool":
        return tg.global_avg_pool(ins[0])
    if kind == "dropout":
        return tg.dropout(ins[0], float(p.get("rate", 0.5)),
                          seed=_fold_seed(seed, dropout_ordinal),
                          training=training)
    if kind == "batchnorm":
        return tg.batchnorm_inference(
            ins[0], param(f"{name}/moving_mean"), param(f"{name}/moving_var"),
            param(f"{name}/gamma"), param(f"{name}/beta"),
            eps=float(p.get("epsilon", 1e-3)),
        )
    if kind == "flatten":
        return tg.flatten(ins[0])
    if kind == "add":
        return tg.add(ins[0], ins[1])
    if kind == "multiply":
        return tg.multiply(ins[0], ins[1])
    raise ValueError(f"unknown layer kind {kind!r}")


def set_trainable(graph: ModelGraph, name_prefix: str, flag: bool) -> int:
    """Set the trainable flag on every parameter whose name starts with prefix.

    Returns the number of parameters matched; a prefix matching nothing is
    an error (it is almost always a typo).
    """
    matched = [p for n, p in graph.parameters.items() if n.startswith(name_prefix)]
    if not matched:
        raise ValueError(
            f"prefix {name_prefix!r} matches no parameters "
            f"({len(graph.parameters)} exist)"
        )
    for p in matched:
        p.trainable = flag
    return len(matched)
