"""Layers and encoder/decoder building blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .autograd import ShapeError, Tensor


class Module:
    """Parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain ``np.ndarray`` attributes; children are ``Module`` attributes or
    lists of modules.  Names follow attribute insertion order, so they are
    stable across builds of the same config.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        """This module and every descendant, depth first."""
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, list) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, dtype)
        self.bias = _zeros(c_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = he_uniform(rng, (c_out, c_in, 1, 1), c_in, dtype)
        self.bias = _zeros(c_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1x1(x, self.weight, self.bias)


class UpConv(Module):
    """2x2 stride-2 transposed convolution."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = he_uniform(rng, (c_in, c_out, 2, 2), c_in, dtype)
        self.bias = _zeros(c_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = _zeros(channels, dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = F.BN_MOMENTUM

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, mode=mode,
                             momentum=self.momentum)


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.c_in = c_in
        self.c_out = c_out
        self.conv = Conv3x3(c_in, c_out, rng, dtype)
        self.bn = BatchNorm2d(c_out, dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return F.relu(self.bn(self.conv(x), mode))


@dataclass(frozen=True)
class PlainBlockSpec:
    in_channels: int
    out_channels: int
    dropout_rate: float = 0.3

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError(f"channel counts must be positive: {self}")


@dataclass(frozen=True)
class DenseBlockSpec:
    """``num_layers`` 3x3 layers; all emit ``growth_filters`` except the last (``final_filters``).

    With ``reuse_input`` (classic DenseNet) every layer also sees the block
    input.  Without it only the first layer does; later layers see the
    concatenation of all earlier layer outputs of the block.
    """

    in_channels: int
    num_layers: int
    growth_filters: int
    final_filters: int
    dropout_rate: float = 0.3
    reuse_input: bool = False

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"dense block needs at least one layer: {self}")
        if min(self.in_channels, self.growth_filters, self.final_filters) <= 0:
            raise ValueError(f"channel counts must be positive: {self}")

    @property
    def out_channels(self) -> int:
        return self.final_filters

    def layer_inputs(self) -> list[int]:
        """Input channel count of each layer, in order."""
        base = self.in_channels if self.reuse_input else 0
        return [self.in_channels] + [base + i * self.growth_filters for i in range(1, self.num_layers)]


def _check_channels(x: Tensor, expected: int, what: str):
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"{what} expects {expected} input channels, got shape {x.shape}")


class PlainBlock(Module):
    """Two conv-BN-ReLU-dropout layers."""

    def __init__(self, spec: PlainBlockSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.layer1 = ConvBNReLU(spec.in_channels, spec.out_channels, rng, dtype)
        self.layer2 = ConvBNReLU(spec.out_channels, spec.out_channels, rng, dtype)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    @property
    def tap_channels(self) -> int:
        return self.spec.out_channels

    def __call__(self, x: Tensor, mode: str, rng=None) -> tuple[Tensor, Tensor]:
        """Returns (block output, first-layer feature maps)."""
        _check_channels(x, self.spec.in_channels, "plain block")
        rate = self.spec.dropout_rate
        first = F.dropout(self.layer1(x, mode), rate, rng, mode)
        out = F.dropout(self.layer2(first, mode), rate, rng, mode)
        return out, first


class DenseBlock(Module):
    """Densely connected 3x3 conv-BN-ReLU layers with a single dropout at the exit."""

    def __init__(self, spec: DenseBlockSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        widths = [spec.growth_filters] * (spec.num_layers - 1) + [spec.final_filters]
        self.layers = [ConvBNReLU(c_in, c_out, rng, dtype) for c_in, c_out in zip(spec.layer_inputs(), widths)]

    @property
    def out_channels(self) -> int:
        return self.spec.final_filters

    @property
    def tap_channels(self) -> int:
        return self.spec.growth_filters if self.spec.num_layers > 1 else self.spec.final_filters

    def __call__(self, x: Tensor, mode: str, rng=None) -> tuple[Tensor, Tensor]:
        """Returns (block output, first-layer feature maps)."""
        _check_channels(x, self.spec.in_channels, "dense block")
        first = out = self.layers[0](x, mode)
        features = [x, first] if self.spec.reuse_input else [first]
        for layer in self.layers[1:]:
            out = layer(features[0] if len(features) == 1 else F.concat(features), mode)
            features.append(out)
        out = F.dropout(out, self.spec.dropout_rate, rng, mode)
        return out, first


def make_block(kind: str, c_in: int, c_out: int, num_layers: int, growth: int, dropout_rate: float,
               rng: np.random.Generator, dtype=np.float32, reuse_input: bool = False) -> PlainBlock | DenseBlock:
    if kind == "plain":
        return PlainBlock(PlainBlockSpec(c_in, c_out, dropout_rate), rng, dtype)
    if kind == "dense":
        spec = DenseBlockSpec(c_in, num_layers, growth, c_out, dropout_rate, reuse_input)
        return DenseBlock(spec, rng, dtype)
    raise ValueError(f"unknown block kind {kind!r}")


class Encoder(Module):
    """block -> stash -> maxpool per level; the last level yields the bottleneck."""

    def __init__(self, in_channels: int, filters: list[int], kind: str, layers: list[int], growth: int,
                 dropout_rate: float, rng: np.random.Generator, dtype=np.float32, reuse_input: bool = False):
        if len(filters) < 2:
            raise ValueError("an encoder needs at least two levels")
        self.blocks = []
        c = in_channels
        for f, n in zip(filters, layers):
            self.blocks.append(make_block(kind, c, f, n, growth, dropout_rate, rng, dtype, reuse_input))
            c = f

    @property
    def levels(self) -> int:
        return len(self.blocks)

    def __call__(self, x: Tensor, mode: str, rng=None) -> tuple[Tensor, list[Tensor]]:
        stash = []
        for i, block in enumerate(self.blocks):
            x, _ = block(x, mode, rng)
            if i < len(self.blocks) - 1:
                if x.shape[2] % 2 or x.shape[3] % 2:
                    raise ShapeError(f"encoder level {i}: spatial size {x.shape[2:]} not divisible by 2")
                stash.append(x)
                x = F.maxpool2(x)
        return x, stash


@dataclass
class DecoderOutputs:
    final: Tensor
    intermediates: list[Tensor]

    @property
    def outputs(self) -> list[Tensor]:
        """Intermediate maps followed by the final map."""
        return [*self.intermediates, self.final]


class Decoder(Module):
    """Upconv -> concat skip -> block per level, then sigmoid heads.

    With ``emit_intermediate`` every block's first-layer feature maps and the
    last block's output are upsampled to full resolution; each gets its own
    1x1 sigmoid head, and their concatenation feeds the final 1x1 sigmoid.
    ``up_keep_channels`` makes the up-convolution preserve its input width
    instead of mapping to the level's filter count.
    """

    def __init__(self, bottleneck_channels: int, filters: list[int], kind: str, layers: list[int], growth: int,
                 dropout_rate: float, emit_intermediate: bool, rng: np.random.Generator, dtype=np.float32,
                 reuse_input: bool = False, up_keep_channels: bool = False):
        # filters/layers are listed top-down, e.g. [256, 128, 64, 32].
        self.emit_intermediate = emit_intermediate
        self.ups = []
        self.blocks = []
        c = bottleneck_channels
        for f, n in zip(filters, layers):
            u = c if up_keep_channels else f
            self.ups.append(UpConv(c, u, rng, dtype))
            self.blocks.append(make_block(kind, u + f, f, n, growth, dropout_rate, rng, dtype, reuse_input))
            c = f
        if emit_intermediate:
            tap_widths = [b.tap_channels for b in self.blocks] + [self.blocks[-1].out_channels]
            self.tap_heads = [Conv1x1(w, 1, rng, dtype) for w in tap_widths]
            self.final_head = Conv1x1(int(np.sum(tap_widths)), 1, rng, dtype)
        else:
            self.tap_heads = []
            self.final_head = Conv1x1(c, 1, rng, dtype)

    @property
    def levels(self) -> int:
        return len(self.blocks)

    def level(self, i: int, x: Tensor, skip: Tensor, mode: str, rng=None) -> tuple[Tensor, Tensor]:
        up = self.ups[i](x)
        if up.shape[0] != skip.shape[0] or up.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"decoder level {i}: upsampled {up.shape} does not match skip {skip.shape}")
        return self.blocks[i](F.concat([up, skip]), mode, rng)

    def head(self, out: Tensor, firsts: list[Tensor]) -> DecoderOutputs:
        if not self.emit_intermediate:
            return DecoderOutputs(F.sigmoid(self.final_head(out)), [])
        full = out.shape[2]
        taps = [F.upsample_nearest(t, full // t.shape[2]) for t in firsts] + [out]
        intermediates = [F.sigmoid(h(t)) for h, t in zip(self.tap_heads, taps)]
        final = F.sigmoid(self.final_head(F.concat(taps)))
        return DecoderOutputs(final, intermediates)

    def __call__(self, x: Tensor, skips: list[Tensor], mode: str, rng=None) -> DecoderOutputs:
        if len(skips) != len(self.blocks):
            raise ShapeError(f"decoder has {len(self.blocks)} levels but got {len(skips)} skips")
        firsts = []
        for i, skip in enumerate(reversed(skips)):
            x, first = self.level(i, x, skip, mode, rng)
            firsts.append(first)
        return self.head(x, firsts)
