"""Dense float tensors and the reverse-mode autodiff tape.

Every layer operation the models need (convolution, pooling, dense,
activations, dropout, batchnorm inference, the regularized cross-entropy
loss) lives here as a function that computes its value eagerly and, when
any input is recorded on a `Tape`, appends a node with the matching
backward rule. Image tensors use NHWC layout throughout.

Values are stored as 32-bit floats in the production pipeline; reductions
(matrix products, means, sums) accumulate in 64-bit before rounding back,
which keeps finite-difference gradient checks stable. Ops preserve a
float64 input dtype end to end, so verification code can run the exact
same kernels at full precision.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "conv2d",
    "depthwise_conv2d",
    "maxpool2d",
    "dense",
    "activation",
    "relu",
    "sigmoid",
    "swish",
    "softmax",
    "global_avg_pool",
    "dropout",
    "batchnorm_inference",
    "loss_ce_l2",
    "add",
    "multiply",
    "flatten",
    "reduce_sum",
    "PROB_FLOOR",
]

PROB_FLOOR = 1e-7  # probabilities are clamped to [PROB_FLOOR, 1] before log


class Tensor:
    """Immutable dense n-d float array, optionally recorded on a tape.

    Float inputs keep their dtype (float32 or float64); anything else is
    converted to float32. Images are (batch, height, width, channels).
    """

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.node: Optional[TapeNode] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        traced = "" if self.node is None else ", traced"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{traced})"


class TapeNode:
    __slots__ = ("tape", "op", "parents", "backward_fn", "grad", "shape")

    def __init__(self, tape, op, parents, backward_fn, shape):
        self.tape = tape
        self.op = op
        # (input_position, parent_node) for every traced input
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad: Optional[np.ndarray] = None
        self.shape = shape


class Tape:
    """Records ops in execution order (already topological) for backward.

    A tape is single-threaded by contract; independent tapes may run
    concurrently.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def watch(self, tensor: Tensor) -> Tensor:
        """Return a leaf copy of `tensor` whose gradient this tape tracks."""
        out = Tensor.__new__(Tensor)
        out.data = tensor.data
        out.node = TapeNode(self, "leaf", (), None, tensor.data.shape)
        self.nodes.append(out.node)
        return out

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. `tensor`.

        Tensors the loss never reached (including frozen parameters that
        were not watched) get zeros of the right shape.
        """
        node = tensor.node
        if node is not None and node.tape is self and node.grad is not None:
            return node.grad
        return np.zeros_like(tensor.data)

    def backward(self, loss: Tensor) -> None:
        """Populate gradients for every node reachable from a scalar loss."""
        if loss.node is None or loss.node.tape is not self:
            raise ValueError("loss tensor is not recorded on this tape")
        if loss.data.shape != ():
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        for node in self.nodes:
            node.grad = None
        loss.node.grad = np.ones((), dtype=loss.data.dtype)
        # Nodes were appended in execution order, so the reversed list is a
        # reverse topological order; each node is visited exactly once.
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for pos, parent in node.parents:
                g = grads[pos]
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    """Run the reverse pass on `tape` seeded at the scalar `loss`."""
    tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.node is None:
            continue
        if tape is None:
            tape = t.node.tape
        elif t.node.tape is not tape:
            raise ValueError("op inputs are recorded on different tapes")
    return tape


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.node = None
    tape = _find_tape(inputs)
    if tape is not None:
        parents = tuple(
            (i, t.node) for i, t in enumerate(inputs) if t.node is not None
        )
        out.node = TapeNode(tape, op, parents, backward_fn, out_data.shape)
        tape.nodes.append(out.node)
    return out


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


def _matmul_acc(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    """Matrix product accumulated in float64, rounded back to `dtype`."""
    return (_f64(a) @ _f64(b)).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# padding helpers

def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    """TF-style 'same' padding amounts; the extra row/col goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    before = total // 2
    return before, total - before


def _pad_input(x: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> np.ndarray:
    if padding == "valid":
        return x
    if padding != "same":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    pt, pb = _same_pad(x.shape[1], kh, stride)
    pl, pr = _same_pad(x.shape[2], kw, stride)
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    """Spatial output size of a convolution/pool window."""
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


# ---------------------------------------------------------------------------
# convolution / pooling

def _check_4d(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ValueError(f"{name} must be 4-D NHWC, got shape {t.data.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: str = "valid") -> Tensor:
    """2-D convolution: NHWC input, (kh, kw, cin, cout) kernel, (cout,) bias."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    _check_4d("conv2d input", x)
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D, got shape {kernel.data.shape}")
    kh, kw, cin, cout = kernel.data.shape
    if x.data.shape[3] != cin:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.data.shape} has "
            f"{x.data.shape[3]} channels but kernel shape {kernel.data.shape} "
            f"expects {cin}"
        )
    if bias.data.shape != (cout,):
        raise ValueError(
            f"conv2d bias shape {bias.data.shape} does not match {cout} filters"
        )
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")

    xp = _pad_input(x.data, kh, kw, stride, padding)
    n, hp, wp, _ = xp.shape
    if kh > hp or kw > wp:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (n, ho, wo, cin, kh, kw) -> columns ordered (kh, kw, cin) to match the
    # C-order flattening of the kernel
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * ho * wo, kh * kw * cin
    )
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = _matmul_acc(col, kmat, x.dtype) + bias.data.astype(x.dtype, copy=False)
    out = out.reshape(n, ho, wo, cout)

    pad_t = (hp - x.data.shape[1]) // 2 if padding == "same" else 0
    pad_l = (wp - x.data.shape[2]) // 2 if padding == "same" else 0
    in_h, in_w = x.data.shape[1], x.data.shape[2]

    def backward_fn(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = _matmul_acc(col.T, g2, kernel.dtype).reshape(kernel.data.shape)
        gb = _f64(g2).sum(axis=0).astype(bias.dtype, copy=False)
        gcol = _matmul_acc(g2, kmat.T, x.dtype).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros((n, hp, wp, cin), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                    gcol[:, :, :, i, j, :]
        gx = gxp[:, pad_t:pad_t + in_h, pad_l:pad_l + in_w, :]
        return gx, gk, gb

    return _record("conv2d", out, (x, kernel, bias), backward_fn)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1,
                     padding: str = "valid") -> Tensor:
    """Per-channel convolution; kernel (kh, kw, c, 1), channel count preserved."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_4d("depthwise_conv2d input", x)
    if kernel.data.ndim != 4 or kernel.data.shape[3] != 1:
        raise ValueError(
            f"depthwise kernel must be (kh, kw, c, 1), got {kernel.data.shape}"
        )
    kh, kw, c, _ = kernel.data.shape
    if x.data.shape[3] != c:
        raise ValueError(
            f"depthwise channel mismatch: input shape {x.data.shape} vs "
            f"kernel shape {kernel.data.shape}"
        )
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")

    xp = _pad_input(x.data, kh, kw, stride, padding)
    n, hp, wp, _ = xp.shape
    if kh > hp or kw > wp:
        raise ValueError(
            f"depthwise kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    kplane = kernel.data[:, :, :, 0]
    out = np.einsum("nhwcij,ijc->nhwc", _f64(win), _f64(kplane)).astype(
        x.dtype, copy=False
    )

    pad_t = (hp - x.data.shape[1]) // 2 if padding == "same" else 0
    pad_l = (wp - x.data.shape[2]) // 2 if padding == "same" else 0
    in_h, in_w = x.data.shape[1], x.data.shape[2]

    def backward_fn(g):
        gk = np.einsum("nhwcij,nhwc->ijc", _f64(win), _f64(g)).astype(
            kernel.dtype, copy=False
        )[:, :, :, None]
        gxp = np.zeros((n, hp, wp, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                    g * kplane[i, j, :]
        gx = gxp[:, pad_t:pad_t + in_h, pad_l:pad_l + in_w, :]
        return gx, gk

    return _record("depthwise_conv2d", out, (x, kernel), backward_fn)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max pooling; ties route the gradient to the first max in row-major order."""
    x = _as_tensor(x)
    _check_4d("maxpool2d input", x)
    n, h, w, c = x.data.shape
    if window > h or window > w:
        raise ValueError(
            f"maxpool window {window} larger than input spatial dims {h}x{w}"
        )
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")

    win = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    flat = win.reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)  # first maximum wins ties (row-major in window)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        oh = np.arange(ho)[None, :, None, None] * stride
        ow = np.arange(wo)[None, None, :, None] * stride
        rows = oh + arg // window
        cols = ow + arg % window
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, None, None, :]
        np.add.at(gx, (ni, rows, cols, ci), g)
        return (gx,)

    return _record("maxpool2d", out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (n, h, w, c) -> (n, c)."""
    x = _as_tensor(x)
    _check_4d("global_avg_pool input", x)
    n, h, w, c = x.data.shape
    out = x.data.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype, copy=False)

    def backward_fn(g):
        gx = np.broadcast_to(
            (g / (h * w))[:, None, None, :], x.data.shape
        ).astype(x.dtype, copy=False)
        return (gx,)

    return _record("global_avg_pool", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# dense / activations

def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map (n, din) @ (din, dout) + bias broadcast per row."""
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ValueError(
            f"dense expects 2-D input and weights, got {x.data.shape} and "
            f"{weights.data.shape}"
        )
    if x.data.shape[1] != weights.data.shape[0]:
        raise ValueError(
            f"dense dimension mismatch: input {x.data.shape} vs weights "
            f"{weights.data.shape}"
        )
    dout = weights.data.shape[1]
    if bias.data.shape != (dout,):
        raise ValueError(f"dense bias shape {bias.data.shape} != ({dout},)")

    out = _matmul_acc(x.data, weights.data, x.dtype) + bias.data.astype(x.dtype, copy=False)

    def backward_fn(g):
        gx = _matmul_acc(g, weights.data.T, x.dtype)
        gw = _matmul_acc(x.data.T, g, weights.dtype)
        gb = _f64(g).sum(axis=0).astype(bias.dtype, copy=False)
        return gx, gw, gb

    return _record("dense", out, (x, weights, bias), backward_fn)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        return (g * (x.data > 0),)

    return _record("relu", out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _stable_sigmoid(x.data)

    def backward_fn(g):
        return (g * out * (1 - out),)

    return _record("sigmoid", out, (x,), backward_fn)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)
    out = x.data * s

    def backward_fn(g):
        return (g * (s + x.data * s * (1 - s)),)

    return _record("swish", out, (x,), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    x = _as_tensor(x)
    shifted = _f64(x.data) - _f64(x.data).max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def backward_fn(g):
        dot = _f64(g * out).sum(axis=-1, keepdims=True)
        return ((out * (_f64(g) - dot)).astype(x.dtype, copy=False),)

    return _record("softmax", out, (x,), backward_fn)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "swish": swish, "softmax": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    """Apply one of relu / sigmoid / swish / softmax."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(
            f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(x)


# ---------------------------------------------------------------------------
# regularization / normalization

def dropout(x: Tensor, rate: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors.

    The mask is a pure function of `seed`; callers that invoke dropout more
    than once per forward pass must fold a call index into the seed.
    training=False and rate=0 are exact identities.
    """
    x = _as_tensor(x)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = rng.random(x.data.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    out = np.where(keep, x.data * scale, np.asarray(0, dtype=x.dtype))

    def backward_fn(g):
        return (np.where(keep, g * scale, np.asarray(0, dtype=x.dtype)),)

    return _record("dropout", out, (x,), backward_fn)


def batchnorm_inference(x: Tensor, mean: Tensor, var: Tensor, gamma: Tensor,
                        beta: Tensor, eps: float = 1e-3) -> Tensor:
    """Normalize with stored moving statistics; gamma/beta differentiable.

    Always inference-mode: the statistics are constants, never re-estimated.
    """
    x = _as_tensor(x)
    mean, var = _as_tensor(mean), _as_tensor(var)
    gamma, beta = _as_tensor(gamma), _as_tensor(beta)
    _check_4d("batchnorm input", x)
    c = x.data.shape[3]
    for name, t in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if t.data.shape != (c,):
            raise ValueError(
                f"batchnorm {name} shape {t.data.shape} does not match "
                f"{c} channels"
            )
    if np.any(var.data < 0):
        raise ValueError("batchnorm variance must be non-negative")

    inv = (1.0 / np.sqrt(_f64(var.data) + eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mean.data) * inv
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        gx = g * (gamma.data * inv)
        ggamma = _f64(g * xhat).sum(axis=(0, 1, 2)).astype(gamma.dtype, copy=False)
        gbeta = _f64(g).sum(axis=(0, 1, 2)).astype(beta.dtype, copy=False)
        return gx, None, None, ggamma, gbeta

    return _record("batchnorm", out, (x, mean, var, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# loss

def loss_ce_l2(probs: Tensor, targets, weight_params: Sequence[Tensor] = (),
               l2_lambda: float = 0.0) -> Tensor:
    """Mean categorical cross-entropy plus an L2 penalty on weight tensors.

    Probabilities are clamped to [1e-7, 1] before the log, which bounds the
    loss; `weight_params` should contain only trainable weight matrices and
    kernels (no biases, no batchnorm parameters).
    """
    probs = _as_tensor(probs)
    tdata = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if probs.data.ndim != 2 or tdata.shape != probs.data.shape:
        raise ValueError(
            f"loss_ce_l2 shape mismatch: probs {probs.data.shape} vs targets "
            f"{np.shape(tdata)}"
        )
    weight_params = tuple(_as_tensor(w) for w in weight_params)
    n = probs.data.shape[0]

    clamped = np.clip(_f64(probs.data), PROB_FLOOR, 1.0)
    ce = -(_f64(tdata) * np.log(clamped)).sum() / n
    penalty = 0.0
    if l2_lambda:
        penalty = l2_lambda * sum(float((_f64(w.data) ** 2).sum()) for w in weight_params)
    out = np.asarray(ce + penalty, dtype=probs.dtype)

    in_range = (probs.data >= PROB_FLOOR) & (probs.data <= 1.0)

    def backward_fn(g):
        gp = (-_f64(tdata) / clamped) * in_range * (float(g) / n)
        grads = [gp.astype(probs.dtype, copy=False)]
        for w in weight_params:
            grads.append((2.0 * l2_lambda * float(g)) * w.data)
        return tuple(grads)

    return _record("loss_ce_l2", out, (probs, *weight_params), backward_fn)


# ---------------------------------------------------------------------------
# structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward_fn(g):
        return g, g

    return _record("add", out, (a, b), backward_fn)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; also scales an NHWC map by per-channel (n, c) gates."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape == b.data.shape:
        out = a.data * b.data

        def backward_fn(g):
            return g * b.data, g * a.data

        return _record("multiply", out, (a, b), backward_fn)

    # channel-gate broadcast: (n, h, w, c) * (n, c)
    if a.data.ndim == 2 and b.data.ndim == 4:
        a, b = b, a
        swapped = True
    else:
        swapped = False
    if not (a.data.ndim == 4 and b.data.ndim == 2
            and a.data.shape[0] == b.data.shape[0]
            and a.data.shape[3] == b.data.shape[1]):
        raise ValueError(
            f"multiply shape mismatch: {a.data.shape} vs {b.data.shape}"
        )
    gates = b.data[:, None, None, :]
    out = a.data * gates

    def backward_fn(g):
        ga = g * gates
        gb = _f64(g * a.data).sum(axis=(1, 2)).astype(b.dtype, copy=False)
        return (gb, ga) if swapped else (ga, gb)

    inputs = (b, a) if swapped else (a, b)
    return _record("multiply", out, inputs, backward_fn)


def flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch axes: (n, ...) -> (n, prod)."""
    x = _as_tensor(x)
    n = x.data.shape[0]
    out = x.data.reshape(n, -1)

    def backward_fn(g):
        return (g.reshape(x.data.shape),)

    return _record("flatten", out, (x,), backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum every element to a scalar (float64 accumulation)."""
    x = _as_tensor(x)
    out = np.asarray(_f64(x.data).sum(), dtype=x.dtype)

    def backward_fn(g):
        return (np.full_like(x.data, g),)

    return _record("reduce_sum", out, (x,), backward_fn)
