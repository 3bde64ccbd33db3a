"""Dense tensors and a tape-based reverse-mode differentiation engine.

Only the primitives a pre-activation wide residual network needs are
provided: convolution, batch normalization, ReLU, residual add, global
average pooling, fully connected layers and a few scalar losses.
Every primitive takes an optional :class:`Tape`; when one is passed the
primitive records a backward closure on it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class Tensor:
    """An n-d array of reals plus an optional name (parameters carry one)."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Recording order is a topological order of the computation, so the
    backward sweep simply walks ``nodes`` in reverse.
    """

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)
    inputs: Tensor | None = None
    # False skips weight-gradient products (input-gradient-only tapes, e.g. attacks).
    param_grads: bool = True

    def record(self, op: str, inputs: Iterable[Tensor], output: Tensor, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.nodes)


def gradients(tape: Tape, wrt: str = "params", root: Tensor | None = None):
    """Gradient map of the scalar ``root`` (default: last recorded output).

    ``wrt`` is ``"params"``, ``"input"`` or ``"both"``. Parameter gradients
    are keyed by parameter name; parameters the root does not depend on get
    zeros. With ``"both"`` a pair ``(param_grads, input_grad)`` is returned.
    """
    if wrt not in ("params", "input", "both"):
        raise ValueError(f"wrt must be params|input|both, got {wrt!r}")
    # Leaf grads must survive the pop in backward(): collect them separately.
    leaves = {id(p): name for name, p in tape.params.items()}
    if tape.inputs is not None:
        leaves[id(tape.inputs)] = "__input__"
    grads = backward(tape, root, keep=set(leaves))
    out_params = {}
    if wrt in ("params", "both"):
        for name, p in tape.params.items():
            g = grads.get(id(p))
            out_params[name] = np.zeros_like(p.data) if g is None else g
    out_input = None
    if wrt in ("input", "both"):
        if tape.inputs is None:
            raise ValueError("tape has no recorded input tensor")
        g = grads.get(id(tape.inputs))
        out_input = np.zeros_like(tape.inputs.data) if g is None else g
    if wrt == "params":
        return out_params
    if wrt == "input":
        return out_input
    return out_params, out_input


def backward(tape: Tape, root: Tensor | None = None, keep: Iterable[int] = ()) -> dict[int, np.ndarray]:
    """Sweep the tape in reverse from the scalar ``root``.

    Returns a map ``id(tensor) -> gradient``. Intermediate gradients are
    dropped once consumed unless the tensor id is listed in ``keep``.
    """
    keep = set(keep)
    if not tape.nodes:
        raise ValueError("tape is empty; nothing to differentiate")
    if root is None:
        root = tape.nodes[-1].output
    if root.size != 1:
        raise ValueError(f"tape root must be a scalar loss, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        key_out = id(node.output)
        g = grads.get(key_out) if key_out in keep else grads.pop(key_out, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
    return grads


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_same("add", a, b)
    out = Tensor(a.data + b.data)
    if tape is not None:
        tape.record("add", (a, b), out, lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_same("sub", a, b)
    out = Tensor(a.data - b.data)
    if tape is not None:
        tape.record("sub", (a, b), out, lambda g: (g, -g))
    return out


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data * c)
    if tape is not None:
        tape.record("scale", (a,), out, lambda g: (g * c,))
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    mask = x.data > 0
    out = Tensor(x.data * mask)
    if tape is not None:
        tape.record("relu", (x,), out, lambda g: (g * mask,))
    return out


def reshape(x: Tensor, shape: Sequence[int], tape: Tape | None = None) -> Tensor:
    orig = x.shape
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        tape.record("reshape", (x,), out, lambda g: (g.reshape(orig),))
    return out


def flatten(x: Tensor, tape: Tape | None = None) -> Tensor:
    return reshape(x, (x.shape[0], -1), tape)


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Plain 2-d matrix product ``a @ b``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        A, B = a.data, b.data
        tape.record("matmul", (a, b), out, lambda g: (g @ B.T, A.T @ g))
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, tape: Tape | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, in] and weight [out, in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match out features {weight.shape[0]}")
    X, W = x.data, weight.data
    y = X @ W.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    if tape is not None:

        need_w = tape.param_grads

        def bw(g):
            gx = g @ W
            gw = g.T @ X if need_w else None
            if bias is None:
                return gx, gw
            return gx, gw, (g.sum(axis=0) if need_w else None)

        ins = (x, weight) if bias is None else (x, weight, bias)
        tape.record("linear", ins, out, bw)
    return out


def conv_output_size(m: int, k: int, stride: int, padding: int) -> int:
    return (m + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, tape: Tape | None = None) -> Tensor:
    """Cross-correlation of an NCHW batch with an [out, in, k, k] kernel, no bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}")
    W2 = weight.data.reshape(cout, -1)
    if k == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride != 1 else x.data
        xs = xs[:, :, :ho, :wo]
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _kernels.im2col(xp, k, stride, ho, wo)
    y = (cols @ W2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(y))
    if tape is not None:

        need_w = tape.param_grads

        def bw(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            gw = (g2.T @ cols).reshape(weight.shape) if need_w else None
            dcols = g2 @ W2
            if k == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, : ho * stride : stride, : wo * stride : stride] = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            else:
                hp, wp = h + 2 * padding, w + 2 * padding
                gxp = _kernels.col2im(dcols, n, c, hp, wp, k, stride, ho, wo)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            return gx, gw

        tape.record("conv2d", (x, weight), out, bw)
    return out


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    tape: Tape | None = None,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In train mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as is usual).
    In eval mode the running statistics are used and nothing is mutated.
    """
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape} incompatible with affine params {gamma.shape}")
    X = x.data
    axes = (0, 2, 3)
    if train:
        cnt = X.shape[0] * X.shape[2] * X.shape[3]
        if X.shape[0] < 2:
            raise ShapeError("batchnorm: train mode needs batch size >= 2")
        mean = X.mean(axis=axes)
        xc = X - mean[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * cnt / max(cnt - 1, 1)
    else:
        mean = running_mean.astype(X.dtype, copy=False)
        var = running_var.astype(X.dtype, copy=False)
        xc = X - mean[None, :, None, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    G = gamma.data
    y = xhat * G[None, :, None, None] + beta.data[None, :, None, None]
    out = Tensor(y.astype(X.dtype, copy=False))
    if tape is not None:
        need_w = tape.param_grads
        if train:

            def bw(g):
                gb = g.sum(axis=axes) if need_w else None
                gg = (g * xhat).sum(axis=axes) if need_w else None
                gxhat = g * G[None, :, None, None]
                gx = (inv[None, :, None, None]) * (
                    gxhat
                    - gxhat.mean(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).mean(axis=axes)[None, :, None, None]
                )
                return gx, gg, gb

        else:

            def bw(g):
                return (
                    g * (G * inv)[None, :, None, None],
                    (g * xhat).sum(axis=axes) if need_w else None,
                    g.sum(axis=axes) if need_w else None,
                )

        tape.record("batchnorm", (x, gamma, beta), out, bw)
    return out


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Mean over the full spatial extent: [N, C, H, W] -> [N, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    if tape is not None:
        tape.record(
            "avgpool",
            (x,),
            out,
            lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
        )
    return out


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    s = z - zmax
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} incompatible with labels {labels.shape}")
    n = z.shape[0]
    lsm = log_softmax(z)
    out = Tensor(np.array(-lsm[np.arange(n), labels].mean(), dtype=z.dtype))
    if tape is not None:

        def bw(g):
            p = np.exp(lsm)
            p[np.arange(n), labels] -= 1.0
            return (p * (g / n),)

        tape.record("cross_entropy", (logits,), out, bw)
    return out


def cw_margin(logits: Tensor, labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean of (max_{j != y} z_j - z_y) over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cw_margin: logits {z.shape} incompatible with labels {labels.shape}")
    n = z.shape[0]
    rows = np.arange(n)
    masked = z.copy()
    masked[rows, labels] = -np.inf
    other = masked.argmax(axis=1)
    val = (z[rows, other] - z[rows, labels]).mean()
    out = Tensor(np.array(val, dtype=z.dtype))
    if tape is not None:

        def bw(g):
            gz = np.zeros_like(z)
            gz[rows, other] += g / n
            gz[rows, labels] -= g / n
            return (gz,)

        tape.record("cw_margin", (logits,), out, bw)
    return out


def sum_squares(x: Tensor, tape: Tape | None = None) -> Tensor:
    X = x.data
    out = Tensor(np.array((X * X).sum(), dtype=X.dtype))
    if tape is not None:
        tape.record("sum_squares", (x,), out, lambda g: (2.0 * g * X,))
    return out


def l1_distance(x: Tensor, anchor: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Sum over all elements of |x - anchor|; subgradient 0 where equal."""
    d = x.data - anchor
    out = Tensor(np.array(np.abs(d).sum(), dtype=x.dtype))
    if tape is not None:
        tape.record("l1_distance", (x,), out, lambda g: (g * np.sign(d),))
    return out
