"""Built-in architectures: the custom CNN, the transfer-model assembler,
and backbone manifests (a tiny test backbone plus an EfficientNetB0-shaped
trunk meant to receive externally converted pretrained weights).
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .graph import ModelGraph, build_graph, init_weights


def _layer(name, kind, params=None, inputs=()):
    return {"name": name, "kind": kind, "params": params or {}, "inputs": list(inputs)}


def _default_names(k: int) -> list[str]:
    return [f"class_{i}" for i in range(k)]


# ---------------------------------------------------------------------------
# custom CNN

def custom_cnn_manifest(input_size=(224, 224), num_classes: int = 6,
                        dropout_rate: float = 0.5,
                        class_names: list[str] | None = None) -> dict:
    """Three conv/pool blocks (32-64-128), a 128-wide head, softmax output."""
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    layers = [_layer("image", "input", {"shape": [h, w, 3]})]
    prev = "image"
    for i, filters in enumerate((32, 64, 128), start=1):
        conv = f"conv{i}"
        layers += [
            _layer(conv, "conv2d",
                   {"filters": filters, "kernel_size": 3, "stride": 1,
                    "padding": "same"}, [prev]),
            _layer(f"{conv}_relu", "activation", {"kind": "relu"}, [conv]),
            _layer(f"pool{i}", "maxpool2d", {"window": 2, "stride": 2},
                   [f"{conv}_relu"]),
        ]
        prev = f"pool{i}"
    layers += [
        _layer("flatten", "flatten", {}, [prev]),
        _layer("fc1", "dense", {"units": 128}, ["flatten"]),
        _layer("fc1_relu", "activation", {"kind": "relu"}, ["fc1"]),
        _layer("head_dropout", "dropout", {"rate": dropout_rate}, ["fc1_relu"]),
        _layer("logits", "dense", {"units": num_classes}, ["head_dropout"]),
        _layer("probs", "activation", {"kind": "softmax"}, ["logits"]),
    ]
    return {
        "class_names": class_names or _default_names(num_classes),
        "layers": layers,
    }


def build_custom_cnn(input_size=(224, 224), num_classes: int = 6,
                     dropout_rate: float = 0.5,
                     class_names: list[str] | None = None,
                     seed: int | None = None) -> ModelGraph:
    """Construct the built-in CNN; pass a seed to initialize weights."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    graph = build_graph(custom_cnn_manifest(input_size, num_classes,
                                            dropout_rate, class_names))
    if seed is not None:
        init_weights(graph, seed)
    return graph


# ---------------------------------------------------------------------------
# backbones

def tinynet_backbone_manifest(input_size=(32, 32)) -> dict:
    """Small four-block trunk used by the test suite.

    Covers every backbone construct: strided and pointwise convolutions,
    depthwise convolution, batchnorm, swish, a residual add, and a
    squeeze-excite channel gate. Output is a 4-D feature map.
    """
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    layers = [
        _layer("image", "input", {"shape": [h, w, 3]}),
        # stem
        _layer("stem_conv", "conv2d",
               {"filters": 8, "kernel_size": 3, "stride": 2, "padding": "same",
                "use_bias": False}, ["image"]),
        _layer("stem_bn", "batchnorm", {"epsilon": 1e-3}, ["stem_conv"]),
        _layer("stem_act", "activation", {"kind": "swish"}, ["stem_bn"]),
        # block1: depthwise + project with residual
        _layer("b1_dw", "depthwise_conv2d",
               {"kernel_size": 3, "stride": 1, "padding": "same"}, ["stem_act"]),
        _layer("b1_dw_bn", "batchnorm", {"epsilon": 1e-3}, ["b1_dw"]),
        _layer("b1_dw_act", "activation", {"kind": "swish"}, ["b1_dw_bn"]),
        _layer("b1_project", "conv2d",
               {"filters": 8, "kernel_size": 1, "use_bias": False}, ["b1_dw_act"]),
        _layer("b1_bn", "batchnorm", {"epsilon": 1e-3}, ["b1_project"]),
        _layer("b1_add", "add", {}, ["b1_bn", "stem_act"]),
        # block2: expand + squeeze-excite gate
        _layer("b2_expand", "conv2d",
               {"filters": 16, "kernel_size": 1, "use_bias": False}, ["b1_add"]),
        _layer("b2_bn", "batchnorm", {"epsilon": 1e-3}, ["b2_expand"]),
        _layer("b2_act", "activation", {"kind": "swish"}, ["b2_bn"]),
        _layer("b2_se_squeeze", "global_avg_pool", {}, ["b2_act"]),
        _layer("b2_se_reduce", "dense", {"units": 4}, ["b2_se_squeeze"]),
        _layer("b2_se_act", "activation", {"kind": "swish"}, ["b2_se_reduce"]),
        _layer("b2_se_expand", "dense", {"units": 16}, ["b2_se_act"]),
        _layer("b2_se_gate", "activation", {"kind": "sigmoid"}, ["b2_se_expand"]),
        _layer("b2_scale", "multiply", {}, ["b2_act", "b2_se_gate"]),
        # block3: strided reduction
        _layer("b3_conv", "conv2d",
               {"filters": 16, "kernel_size": 3, "stride": 2, "padding": "same",
                "use_bias": False}, ["b2_scale"]),
        _layer("b3_bn", "batchnorm", {"epsilon": 1e-3}, ["b3_conv"]),
        _layer("b3_act", "activation", {"kind": "swish"}, ["b3_bn"]),
        # head
        _layer("top_conv", "conv2d",
               {"filters": 24, "kernel_size": 1, "use_bias": False}, ["b3_act"]),
        _layer("top_bn", "batchnorm", {"epsilon": 1e-3}, ["top_conv"]),
        _layer("top_act", "activation", {"kind": "swish"}, ["top_bn"]),
    ]
    return {"class_names": [], "layers": layers}


# EfficientNetB0 stage table: (expand_ratio, channels, repeats, stride, kernel)
_B0_STAGES = [
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
]


def efficientnet_b0_manifest(input_size=(224, 224)) -> dict:
    """EfficientNetB0-shaped trunk (stem, 16 MBConv blocks, 1280-wide top).

    Shipped as data: load pretrained weights from a weight archive whose
    tensor names match this manifest; nothing here trains ImageNet.
    """
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    layers = [
        _layer("image", "input", {"shape": [h, w, 3]}),
        _layer("stem_conv", "conv2d",
               {"filters": 32, "kernel_size": 3, "stride": 2, "padding": "same",
                "use_bias": False}, ["image"]),
        _layer("stem_bn", "batchnorm", {"epsilon": 1e-3}, ["stem_conv"]),
        _layer("stem_act", "activation", {"kind": "swish"}, ["stem_bn"]),
    ]
    prev = "stem_act"
    in_ch = 32
    block_id = 0
    for expand, out_ch, repeats, stride, kernel in _B0_STAGES:
        for rep in range(repeats):
            s = stride if rep == 0 else 1
            prev = _mbconv(layers, f"block{block_id}", prev, in_ch, out_ch,
                           expand, kernel, s)
            in_ch = out_ch
            block_id += 1
    layers += [
        _layer("top_conv", "conv2d",
               {"filters": 1280, "kernel_size": 1, "use_bias": False}, [prev]),
        _layer("top_bn", "batchnorm", {"epsilon": 1e-3}, ["top_conv"]),
        _layer("top_act", "activation", {"kind": "swish"}, ["top_bn"]),
    ]
    return {"class_names": [], "layers": layers}


def _mbconv(layers: list, name: str, prev: str, in_ch: int, out_ch: int,
            expand: int, kernel: int, stride: int, se_ratio: float = 0.25) -> str:
    block_input = prev
    mid = in_ch * expand
    if expand != 1:
        layers += [
            _layer(f"{name}_expand", "conv2d",
                   {"filters": mid, "kernel_size": 1, "use_bias": False}, [prev]),
            _layer(f"{name}_expand_bn", "batchnorm", {"epsilon": 1e-3},
                   [f"{name}_expand"]),
            _layer(f"{name}_expand_act", "activation", {"kind": "swish"},
                   [f"{name}_expand_bn"]),
        ]
        prev = f"{name}_expand_act"
    layers += [
        _layer(f"{name}_dw", "depthwise_conv2d",
               {"kernel_size": kernel, "stride": stride, "padding": "same"}, [prev]),
        _layer(f"{name}_dw_bn", "batchnorm", {"epsilon": 1e-3}, [f"{name}_dw"]),
        _layer(f"{name}_dw_act", "activation", {"kind": "swish"}, [f"{name}_dw_bn"]),
    ]
    prev = f"{name}_dw_act"
    # squeeze-excite on the expanded channels, reduction relative to block input
    se_ch = max(1, int(in_ch * se_ratio))
    layers += [
        _layer(f"{name}_se_squeeze", "global_avg_pool", {}, [prev]),
        _layer(f"{name}_se_reduce", "dense", {"units": se_ch}, [f"{name}_se_squeeze"]),
        _layer(f"{name}_se_reduce_act", "activation", {"kind": "swish"},
               [f"{name}_se_reduce"]),
        _layer(f"{name}_se_expand", "dense", {"units": mid}, [f"{name}_se_reduce_act"]),
        _layer(f"{name}_se_gate", "activation", {"kind": "sigmoid"},
               [f"{name}_se_expand"]),
        _layer(f"{name}_se_scale", "multiply", {}, [prev, f"{name}_se_gate"]),
        _layer(f"{name}_project", "conv2d",
               {"filters": out_ch, "kernel_size": 1, "use_bias": False},
               [f"{name}_se_scale"]),
        _layer(f"{name}_project_bn", "batchnorm", {"epsilon": 1e-3},
               [f"{name}_project"]),
    ]
    prev = f"{name}_project_bn"
    if stride == 1 and in_ch == out_ch:
        layers.append(_layer(f"{name}_add", "add", {}, [prev, block_input]))
        prev = f"{name}_add"
    return prev


# ---------------------------------------------------------------------------
# transfer model

def build_transfer_model(backbone: ModelGraph, num_classes: int,
                         head_width: int = 256, dropout_rate: float = 0.5,
                         seed: int = 0,
                         class_names: list[str] | None = None) -> ModelGraph:
    """Graft a GAP + dense/ReLU/dropout + softmax head onto a backbone.

    Backbone layers and parameters are re-namespaced under ``backbone/`` so a
    single prefix freezes the whole trunk; its weight values are copied in,
    while head parameters are freshly He-initialized from `seed`.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if head_width < 1:
        raise ValueError(f"head_width must be >= 1, got {head_width}")
    final = backbone.layers[-1]
    if len(final.out_shape) != 3:
        raise ValueError(
            f"backbone must end in a 4-D feature map, got batchless shape "
            f"{final.out_shape} from layer '{final.name}'"
        )

    layers = []
    for l in backbone.layers:
        layers.append(_layer(f"backbone/{l.name}", l.kind, dict(l.params),
                             [f"backbone/{n}" for n in l.inputs]))
    top = f"backbone/{final.name}"
    layers += [
        _layer("head_gap", "global_avg_pool", {}, [top]),
        _layer("head_dense", "dense", {"units": head_width}, ["head_gap"]),
        _layer("head_relu", "activation", {"kind": "relu"}, ["head_dense"]),
        _layer("head_dropout", "dropout", {"rate": dropout_rate}, ["head_relu"]),
        _layer("logits", "dense", {"units": num_classes}, ["head_dropout"]),
        _layer("probs", "activation", {"kind": "softmax"}, ["logits"]),
    ]
    manifest = {
        "class_names": class_names or _default_names(num_classes),
        "layers": layers,
    }
    graph = build_graph(manifest)
    # fresh head, copied trunk
    init_weights(graph, seed)
    for name, p in backbone.parameters.items():
        graph.parameters[f"backbone/{name}"].value = p.value.copy()
    return graph


# ---------------------------------------------------------------------------
# shipped manifest fixtures

def manifest_path(name: str):
    """Path to a shipped manifest: custom_cnn, tinynet_backbone, efficientnet_b0."""
    return resources.files("tentgrad").joinpath("manifests", f"{name}.json")
