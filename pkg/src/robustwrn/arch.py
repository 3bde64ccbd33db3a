"""Per-stage configurable wide residual networks.

A network is fully described by an :class:`ArchSpec`: three stages with a
depth (number of residual blocks) and a width multiplier each, a global
width scaling ratio ``gamma``, the class count and the input shape.
Stage ``i`` resolves to ``round_half_even(base[i] * width[i] * gamma)``
channels with ``base = (16, 32, 64)``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .nn import BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Linear, Network, ReLU, ResidualBlock
from .tensor import conv_output_size

BASE_CHANNELS = (16, 32, 64)
STEM_CHANNELS = 16
STAGE_STRIDES = (1, 2, 2)


class ConfigError(ValueError):
    """Malformed architecture notation or an invalid spec."""


def to_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    try:
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a rational number: {value!r}") from exc


def format_rational(q: Fraction) -> str:
    q = to_fraction(q)
    if q.denominator == 1:
        return str(q.numerator)
    d = q.denominator
    while d % 2 == 0:
        d //= 2
    while d % 5 == 0:
        d //= 5
    if d == 1:
        return format(float(q), ".12g")
    return f"{q.numerator}/{q.denominator}"


@dataclass(frozen=True)
class StageConfig:
    depth: int
    width_multiplier: Fraction

    def __post_init__(self):
        if not isinstance(self.depth, (int, np.integer)) or self.depth < 0:
            raise ConfigError(f"stage depth must be a non-negative integer, got {self.depth!r}")
        object.__setattr__(self, "depth", int(self.depth))
        w = to_fraction(self.width_multiplier)
        if w < 0:
            raise ConfigError(f"width multiplier must be >= 0, got {self.width_multiplier!r}")
        object.__setattr__(self, "width_multiplier", w)


@dataclass(frozen=True)
class LayerShape:
    """Geometry of one layer: ``m`` is the input spatial size."""

    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    spatial: int = 1
    name: str = ""

    @property
    def out_spatial(self) -> int:
        if self.kind == "conv":
            return conv_output_size(self.spatial, self.kernel, self.stride, self.kernel // 2)
        if self.kind == "pool":
            return 1
        return self.spatial


@dataclass(frozen=True)
class ArchSpec:
    stages: tuple[StageConfig, StageConfig, StageConfig]
    gamma: Fraction = Fraction(1)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    base_channels: tuple[int, int, int] = field(default=BASE_CHANNELS)
    stem_channels: int = STEM_CHANNELS

    def __post_init__(self):
        if len(self.stages) != 3:
            raise ConfigError(f"exactly 3 stages required, got {len(self.stages)}")
        object.__setattr__(self, "stages", tuple(self.stages))
        g = to_fraction(self.gamma)
        if g <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma!r}")
        object.__setattr__(self, "gamma", g)
        if int(self.num_classes) < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        for i, (st, ch) in enumerate(zip(self.stages, self.channels)):
            if st.depth > 0 and ch < 1:
                raise ConfigError(f"stage {i + 1} resolves to 0 channels with depth {st.depth}")

    @property
    def depths(self) -> tuple[int, int, int]:
        return tuple(s.depth for s in self.stages)

    @property
    def widths(self) -> tuple[Fraction, Fraction, Fraction]:
        return tuple(s.width_multiplier for s in self.stages)

    @property
    def channels(self) -> tuple[int, int, int]:
        # Python's round() on Fraction is round-half-even.
        return tuple(
            int(round(Fraction(b) * s.width_multiplier * self.gamma))
            for b, s in zip(self.base_channels, self.stages)
        )

    @property
    def depth_notation(self) -> str:
        return "d" + "-".join(str(d) for d in self.depths)

    @property
    def width_notation(self) -> str:
        return "w" + "-".join(format_rational(w) for w in self.widths)

    @property
    def notation(self) -> str:
        return f"{self.depth_notation}/{self.width_notation}"

    def to_dict(self) -> dict:
        return {
            "depths": self.depth_notation,
            "widths": self.width_notation,
            "gamma": format_rational(self.gamma),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        unknown = set(d) - {"depths", "widths", "gamma", "num_classes", "input_shape"}
        if unknown:
            raise ConfigError(f"unknown arch keys: {sorted(unknown)}")
        return parse_config(
            d.get("depths", "d5-5-5"),
            d.get("widths", "w10-10-10"),
            d.get("gamma", 1),
            int(d.get("num_classes", 10)),
            tuple(d.get("input_shape", (3, 32, 32))),
        )


_TOKEN = re.compile(r"^(?:\d+(?:\.\d+)?|\d+/\d+)$")


def _parse_notation(text: str, prefix: str, integer: bool) -> list:
    text = str(text).strip()
    if not text.startswith(prefix):
        raise ConfigError(f"notation {text!r} must start with {prefix!r}")
    tokens = text[len(prefix):].split("-")
    if len(tokens) != 3:
        raise ConfigError(f"notation {text!r} must have 3 stage values, got {len(tokens)}")
    out = []
    for tok in tokens:
        if integer and not tok.isdigit():
            raise ConfigError(f"invalid token {tok!r} in {text!r}")
        if not integer and not _TOKEN.match(tok):
            raise ConfigError(f"invalid token {tok!r} in {text!r}")
        out.append(int(tok) if integer else Fraction(tok))
    return out


def parse_config(
    depth_notation: str,
    width_notation: str,
    gamma=1,
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
) -> ArchSpec:
    """Build an ArchSpec from ``"d5-5-5"`` / ``"w10-10-10"`` style notation."""
    depths = _parse_notation(depth_notation, "d", integer=True)
    widths = _parse_notation(width_notation, "w", integer=False)
    stages = tuple(StageConfig(d, w) for d, w in zip(depths, widths))
    return ArchSpec(stages, to_fraction(gamma), int(num_classes), tuple(input_shape))


def scale(spec: ArchSpec, gamma) -> ArchSpec:
    g = to_fraction(gamma)
    if g <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma!r}")
    return replace(spec, gamma=g)


def with_stage(spec: ArchSpec, stage: int, depth: int | None = None, width=None) -> ArchSpec:
    """Copy of ``spec`` with stage ``stage`` (1-based) changed."""
    stages = list(spec.stages)
    old = stages[stage - 1]
    stages[stage - 1] = StageConfig(
        old.depth if depth is None else depth,
        old.width_multiplier if width is None else to_fraction(width),
    )
    return replace(spec, stages=tuple(stages))


# ---------------------------------------------------------------------------
# layer plan
# ---------------------------------------------------------------------------


def layer_plan(spec: ArchSpec) -> list[LayerShape]:
    """Every layer the builder creates, in execution order, with geometry."""
    c_in, m, _ = spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]
    plan = [LayerShape("conv", c_in, spec.stem_channels, 3, 1, m, "stem")]
    cin = spec.stem_channels
    for i, (st, ch) in enumerate(zip(spec.stages, spec.channels)):
        stride = STAGE_STRIDES[i]
        if st.depth == 0:
            if ch >= 1:
                plan.append(LayerShape("conv", cin, ch, 1, stride, m, f"stage{i + 1}.proj"))
                m = conv_output_size(m, 1, stride, 0)
                cin = ch
            continue
        for b in range(st.depth):
            s = stride if b == 0 else 1
            name = f"stage{i + 1}.block{b + 1}"
            m_out = conv_output_size(m, 3, s, 1)
            plan.append(LayerShape("bn", cin, cin, 1, 1, m, f"{name}.bn1"))
            plan.append(LayerShape("relu", cin, cin, 1, 1, m, f"{name}.relu1"))
            if cin != ch or s != 1:
                plan.append(LayerShape("conv", cin, ch, 1, s, m, f"{name}.shortcut"))
            plan.append(LayerShape("conv", cin, ch, 3, s, m, f"{name}.conv1"))
            plan.append(LayerShape("bn", ch, ch, 1, 1, m_out, f"{name}.bn2"))
            plan.append(LayerShape("relu", ch, ch, 1, 1, m_out, f"{name}.relu2"))
            plan.append(LayerShape("conv", ch, ch, 3, 1, m_out, f"{name}.conv2"))
            plan.append(LayerShape("add", ch, ch, 1, 1, m_out, f"{name}.add"))
            m, cin = m_out, ch
    plan.append(LayerShape("bn", cin, cin, 1, 1, m, "final.bn"))
    plan.append(LayerShape("relu", cin, cin, 1, 1, m, "final.relu"))
    plan.append(LayerShape("pool", cin, cin, m, 1, m, "final.pool"))
    plan.append(LayerShape("linear", cin, spec.num_classes, 1, 1, 1, "fc"))
    return plan


def count_params(spec: ArchSpec) -> int:
    """Exact number of learnable scalars of ``build_network(spec)``."""
    total = 0
    for ls in layer_plan(spec):
        if ls.kind == "conv":
            total += ls.in_channels * ls.out_channels * ls.kernel * ls.kernel
        elif ls.kind == "bn":
            total += 2 * ls.in_channels
        elif ls.kind == "linear":
            total += ls.in_channels * ls.out_channels + ls.out_channels
    return total


def count_flops(spec: ArchSpec) -> int:
    """Multiply-accumulates of one forward pass on one input.

    Conv: out_spatial^2 * k^2 * in * out. Linear: in * out + out.
    BN, ReLU, add and pooling count one per output element.
    """
    total = 0
    for ls in layer_plan(spec):
        if ls.kind == "conv":
            total += ls.out_spatial ** 2 * ls.kernel ** 2 * ls.in_channels * ls.out_channels
        elif ls.kind == "linear":
            total += ls.in_channels * ls.out_channels + ls.out_channels
        elif ls.kind == "pool":
            total += ls.out_channels
        else:
            total += ls.out_channels * ls.spatial ** 2
    return total


def format_millions(n: int) -> str:
    return f"{n / 1e6:.2f}M"


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------


def _init_conv(conv: Conv2d, rng: np.random.Generator) -> None:
    # He-normal with fan_out, as in the reference WRN code.
    std = np.sqrt(2.0 / (conv.k * conv.k * conv.out_ch))
    conv.weight.data = rng.normal(0.0, std, conv.weight.shape).astype(conv.weight.dtype)


def build_network(spec: ArchSpec, seed: int = 0, dtype=np.float64) -> Network:
    """Instantiate the network described by ``spec`` with seeded weights."""
    rng = np.random.default_rng(seed)
    c_in = spec.input_shape[0]
    layers = []
    stem = Conv2d("stem", c_in, spec.stem_channels, 3, 1, dtype=dtype)
    layers.append(stem)
    cin = spec.stem_channels
    for i, (st, ch) in enumerate(zip(spec.stages, spec.channels)):
        stride = STAGE_STRIDES[i]
        if st.depth == 0:
            if ch >= 1:
                layers.append(Conv2d(f"stage{i + 1}.proj", cin, ch, 1, stride, dtype=dtype))
                cin = ch
            continue
        for b in range(st.depth):
            layers.append(ResidualBlock(f"stage{i + 1}.block{b + 1}", cin, ch, stride if b == 0 else 1, dtype=dtype))
            cin = ch
    layers += [
        BatchNorm2d("final.bn", cin, dtype=dtype),
        ReLU("final.relu"),
        GlobalAvgPool("final.pool"),
        Flatten("final.flatten"),
        Linear("fc", cin, spec.num_classes, bias=True, dtype=dtype),
    ]
    net = Network(layers, spec.input_shape, spec.num_classes, spec=spec)
    for layer in net.walk():
        if isinstance(layer, Conv2d):
            _init_conv(layer, rng)
        elif isinstance(layer, Linear):
            bound = 1.0 / np.sqrt(layer.in_features)
            layer.weight.data = rng.uniform(-bound, bound, layer.weight.shape).astype(dtype)
            layer.bias.data = np.zeros(layer.out_features, dtype=dtype)
    return net


def block_stage_index(net: Network) -> list[tuple[int, int]]:
    """(stage, position-within-stage) for each residual block, both 1-based."""
    out = []
    for blk in net.blocks():
        stage, pos = blk.name.split(".")
        out.append((int(stage.removeprefix("stage")), int(pos.removeprefix("block"))))
    return out


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def save_spec(spec: ArchSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def load_spec(path) -> ArchSpec:
    data = json.loads(Path(path).read_text())
    if "arch" in data:
        data = data["arch"]
    return ArchSpec.from_dict(data)
