"""Layer set and the sequential network container."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tape, Tensor

MODES = ("train", "eval")


@dataclass
class Context:
    mode: str = "eval"
    tape: Tape | None = None
    block_outputs: list[Tensor] = field(default_factory=list)

    @property
    def train(self) -> bool:
        return self.mode == "train"


class Layer:
    name: str = "layer"
    kind: str = "layer"

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> Iterator[Tensor]:
        return iter(())

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def children(self) -> list["Layer"]:
        return []


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name: str, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int | None = None, dtype=np.float64):
        if k not in (1, 3):
            raise ValueError(f"{name}: kernel must be 1 or 3, got {k}")
        if stride not in (1, 2):
            raise ValueError(f"{name}: stride must be 1 or 2, got {stride}")
        self.name = name
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.padding = (k // 2) if padding is None else padding
        self.weight = Tensor(np.zeros((out_ch, in_ch, k, k), dtype=dtype), name=f"{name}.weight")

    def forward(self, x, ctx):
        if x.data.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name}: expected input [N, {self.in_ch}, H, W], got {list(x.shape)}")
        return T.conv2d(x, self.weight, self.stride, self.padding, ctx.tape)

    def parameters(self):
        yield self.weight


class BatchNorm2d(Layer):
    kind = "bn"

    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.name = name
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def forward(self, x, ctx):
        if x.data.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected input [N, {self.channels}, H, W], got {list(x.shape)}")
        if ctx.train and x.shape[0] < 2:
            raise ShapeError(f"{self.name}: train-mode batchnorm needs batch size >= 2, got {x.shape[0]}")
        return T.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            ctx.train, self.momentum, self.eps, ctx.tape,
        )

    def scale_factors(self) -> np.ndarray:
        """Per-channel eval-mode multiplier gamma / sqrt(running_var + eps)."""
        return self.gamma.data.astype(np.float64) / np.sqrt(self.running_var + self.eps)

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name: str = "relu"):
        self.name = name

    def forward(self, x, ctx):
        return T.relu(x, ctx.tape)


class GlobalAvgPool(Layer):
    kind = "pool"

    def __init__(self, name: str = "pool"):
        self.name = name

    def forward(self, x, ctx):
        return T.global_avg_pool(x, ctx.tape)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name: str = "flatten"):
        self.name = name

    def forward(self, x, ctx):
        return T.flatten(x, ctx.tape)


class Linear(Layer):
    kind = "linear"

    def __init__(self, name: str, in_features: int, out_features: int, bias: bool = True, dtype=np.float64):
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(np.zeros((out_features, in_features), dtype=dtype), name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), name=f"{name}.bias") if bias else None

    def forward(self, x, ctx):
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected input [N, {self.in_features}], got {list(x.shape)}")
        return T.linear(x, self.weight, self.bias, ctx.tape)

    def parameters(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias


class ResidualBlock(Layer):
    """Pre-activation block: BN-ReLU-Conv3x3 twice plus a shortcut.

    The shortcut is the identity when channel count and stride are
    unchanged; otherwise a 1x1 convolution applied to the block's first
    activation.
    """

    kind = "block"

    def __init__(self, name: str, in_ch: int, out_ch: int, stride: int, dtype=np.float64):
        self.name = name
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.bn1 = BatchNorm2d(f"{name}.bn1", in_ch, dtype=dtype)
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride, dtype=dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_ch, dtype=dtype)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, 1, dtype=dtype)
        self.equal_io = in_ch == out_ch and stride == 1
        self.shortcut = None if self.equal_io else Conv2d(f"{name}.shortcut", in_ch, out_ch, 1, stride, dtype=dtype)

    def forward(self, x, ctx):
        tape = ctx.tape
        o = T.relu(self.bn1.forward(x, ctx), tape)
        skip = x if self.equal_io else self.shortcut.forward(o, ctx)
        o = self.conv1.forward(o, ctx)
        o = T.relu(self.bn2.forward(o, ctx), tape)
        o = self.conv2.forward(o, ctx)
        return T.add(skip, o, tape)

    def children(self):
        kids = [self.bn1, self.conv1, self.bn2, self.conv2]
        return kids + ([self.shortcut] if self.shortcut is not None else [])

    def parameters(self):
        for c in self.children():
            yield from c.parameters()

    def buffers(self):
        out = {}
        for c in self.children():
            out.update(c.buffers())
        return out


class Network:
    """An ordered chain of layers with named parameters.

    Residual blocks are composite layers; their outputs are collected in
    order during the forward pass for per-block analysis.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], num_classes: int, spec=None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.spec = spec
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in network")

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def walk(self) -> Iterator[Layer]:
        """Leaf layers in execution order (children of blocks expanded)."""
        for layer in self.layers:
            kids = layer.children()
            if kids:
                yield from kids
            else:
                yield layer

    def blocks(self) -> list[ResidualBlock]:
        return [l for l in self.layers if isinstance(l, ResidualBlock)]

    @property
    def dtype(self):
        ps = self.parameters()
        return ps[0].dtype if ps else np.float64

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def forward(self, x: Tensor, ctx: Context, upto_block: int | None = None) -> Tensor:
        h = x
        seen = 0
        for layer in self.layers:
            h = layer.forward(h, ctx)
            if isinstance(layer, ResidualBlock):
                ctx.block_outputs.append(h)
                if upto_block is not None and seen == upto_block:
                    return h
                seen += 1
        if upto_block is not None:
            raise IndexError(f"block index {upto_block} out of range (network has {seen} blocks)")
        return h

    def __call__(self, x, mode: str = "eval") -> np.ndarray:
        logits, _ = forward_network(self, x, mode, record=False)
        return logits.data


def _as_batch(net: Network, x) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=net.dtype))
    if xt.dtype != net.dtype:
        xt = Tensor(xt.data.astype(net.dtype))
    if xt.data.ndim != len(net.input_shape) + 1 or tuple(xt.shape[1:]) != net.input_shape:
        raise ShapeError(f"network input: expected [N, {', '.join(map(str, net.input_shape))}], got {list(xt.shape)}")
    return xt


def forward_layer(layer: Layer, x: Tensor, mode: str = "eval") -> Tensor:
    """Apply one layer outside any network (no recording)."""
    if mode not in MODES:
        raise ValueError(f"mode must be train|eval, got {mode!r}")
    return layer.forward(x, Context(mode=mode))


def forward_network(
    net: Network, x, mode: str = "eval", record: bool = False, upto_block: int | None = None, param_grads: bool = True
):
    """Run the network on a batch.

    Returns ``(output, tape)``; ``tape`` is ``None`` unless ``record``.
    ``param_grads=False`` records a tape that only supports input gradients.
    With ``upto_block=j`` the pass stops after residual block ``j`` and
    returns that block's output instead of logits.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be train|eval, got {mode!r}")
    xt = _as_batch(net, x)
    tape = None
    if record:
        tape = Tape(params=net.named_parameters() if param_grads else {}, inputs=xt, param_grads=param_grads)
    ctx = Context(mode=mode, tape=tape)
    out = net.forward(xt, ctx, upto_block=upto_block)
    return out, tape


def forward_with_blocks(net: Network, x, mode: str = "eval") -> tuple[Tensor, list[Tensor]]:
    xt = _as_batch(net, x)
    ctx = Context(mode=mode)
    out = net.forward(xt, ctx)
    return out, ctx.block_outputs


def loss_tape(net: Network, x, y, loss: str = "ce", mode: str = "eval", param_grads: bool = True):
    """Forward + scalar loss on a recording tape. Returns (logits, loss, tape)."""
    logits, tape = forward_network(net, x, mode, record=True, param_grads=param_grads)
    if loss in ("ce", "cross-entropy"):
        val = T.cross_entropy(logits, y, tape)
    elif loss in ("cw", "cw-margin"):
        val = T.cw_margin(logits, y, tape)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return logits, val, tape


def linear_model(weight, bias=None) -> Network:
    """Single linear classifier over flattened inputs (used by oracles and tests)."""
    w = np.asarray(weight, dtype=np.float64)
    lin = Linear("fc", w.shape[1], w.shape[0], bias=True)
    lin.weight.data = w.copy()
    if bias is not None:
        lin.bias.data = np.asarray(bias, dtype=np.float64).copy()
    return Network([Flatten(), lin], (w.shape[1],), w.shape[0])
