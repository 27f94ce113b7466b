"""The five compared networks: plain/dense U-Net and probability/plain/optimal CompNet."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import functional as F
from .autograd import ShapeError, Tensor
from .nn import Conv1x1, Decoder, DecoderOutputs, Encoder, Module

VARIANTS = ("plain-unet", "dense-unet", "prob-compnet", "plain-compnet", "optimal-compnet")
BASE_FILTERS = (32, 64, 128, 256, 512, 1024, 2048)
DENSE_LAYERS = (4, 10, 21, 21, 21)

_BLOCK_KIND = {
    "plain-unet": "plain",
    "dense-unet": "dense",
    "prob-compnet": "plain",
    "plain-compnet": "plain",
    "optimal-compnet": "dense",
}


@dataclass
class NetworkConfig:
    variant: str = "optimal-compnet"
    width_scale: float = 1.0
    levels: int = 5
    growth_filters: int = 12
    dropout_rate: float = 0.3
    emit_intermediate: bool | None = None
    seed: int = 0
    dense_layers: tuple[int, ...] = DENSE_LAYERS
    gate_levels: tuple[bool, ...] | None = None
    dense_reuse_input: bool = False

    def __post_init__(self):
        self.dense_layers = tuple(int(n) for n in self.dense_layers)
        if self.gate_levels is not None:
            self.gate_levels = tuple(bool(g) for g in self.gate_levels)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 2 <= self.levels <= len(BASE_FILTERS):
            raise ValueError(f"levels must be in [2, {len(BASE_FILTERS)}], got {self.levels}")
        if self.block_kind == "dense" and len(self.dense_layers) < self.levels:
            raise ValueError(f"dense_layers {self.dense_layers} too short for {self.levels} levels")
        if self.gate_levels is not None and len(self.gate_levels) != self.levels - 1:
            raise ValueError(f"gate_levels needs {self.levels - 1} entries")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.growth_filters < 1:
            raise ValueError("growth_filters must be positive")
        self.filters()

    @property
    def block_kind(self) -> str:
        return _BLOCK_KIND[self.variant]

    @property
    def intermediates(self) -> bool:
        if self.emit_intermediate is None:
            return self.block_kind == "dense"
        return self.emit_intermediate

    def filters(self) -> list[int]:
        out = []
        for base in BASE_FILTERS[: self.levels]:
            scaled = base * self.width_scale
            if abs(scaled - round(scaled)) > 1e-9 or round(scaled) < 4:
                raise ValueError(f"width_scale {self.width_scale} gives non-integer or <4 channels ({scaled})")
            out.append(int(round(scaled)))
        return out

    def encoder_layers(self) -> list[int]:
        if self.block_kind == "plain":
            return [2] * self.levels
        return list(self.dense_layers[: self.levels])

    def decoder_layers(self) -> list[int]:
        return self.encoder_layers()[:-1][::-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_layers"] = list(self.dense_layers)
        if self.gate_levels is not None:
            d["gate_levels"] = list(self.gate_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutputs:
    seg_final: Tensor
    comp_final: Tensor | None = None
    recon: Tensor | None = None
    seg_intermediates: list[Tensor] = field(default_factory=list)
    comp_intermediates: list[Tensor] = field(default_factory=list)
    recon_intermediates: list[Tensor] = field(default_factory=list)
    recon_input: Tensor | None = None

    @property
    def seg_outputs(self) -> list[Tensor]:
        return [*self.seg_intermediates, self.seg_final]

    @property
    def comp_outputs(self) -> list[Tensor]:
        return [*self.comp_intermediates, self.comp_final] if self.comp_final is not None else []

    @property
    def recon_outputs(self) -> list[Tensor]:
        return [*self.recon_intermediates, self.recon] if self.recon is not None else []


def probability_gate(feat_self: Tensor, feat_other: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Scale ``feat_other`` by ``1 - p`` where ``p = sigmoid(conv1x1(feat_self))``."""
    if feat_self.shape[2:] != feat_other.shape[2:] or feat_self.shape[0] != feat_other.shape[0]:
        raise ShapeError(f"probability gate: {feat_self.shape} vs {feat_other.shape}")
    p = F.sigmoid(F.conv1x1(feat_self, weight, bias))
    return F.mul(feat_other, F.sub(1.0, p))


class _Network(Module):
    config: NetworkConfig

    def _encoder(self, in_channels: int, rng, dtype) -> Encoder:
        c = self.config
        return Encoder(in_channels, c.filters(), c.block_kind, c.encoder_layers(), c.growth_filters,
                       c.dropout_rate, rng, dtype, reuse_input=c.dense_reuse_input)

    def _decoder(self, rng, dtype, emit: bool | None = None) -> Decoder:
        c = self.config
        filters = c.filters()
        # Dense decoders upsample every block-output map; plain ones halve width like U-Net.
        return Decoder(filters[-1], filters[:-1][::-1], c.block_kind, c.decoder_layers(), c.growth_filters,
                       c.dropout_rate, c.intermediates if emit is None else emit, rng, dtype,
                       reuse_input=c.dense_reuse_input, up_keep_channels=c.block_kind == "dense")

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _check_input(self, batch: Tensor):
        if batch.ndim != 4 or batch.shape[1] != 1:
            raise ShapeError(f"expected a [N,1,H,W] batch, got {batch.shape}")
        div = 2 ** (self.config.levels - 1)
        if batch.shape[2] % div or batch.shape[3] % div:
            raise ShapeError(f"spatial size {batch.shape[2:]} not divisible by {div}")

    def __call__(self, batch, mode: str = "eval", rng=None) -> ModelOutputs:
        batch = F.as_tensor(batch)
        if batch.dtype != self.dtype:
            batch = Tensor(batch.data.astype(self.dtype))
        self._check_input(batch)
        return self.forward(batch, mode, rng)

    def forward(self, batch: Tensor, mode: str, rng) -> ModelOutputs:
        raise NotImplementedError


class UNet(_Network):
    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = self._encoder(1, rng, dtype)
        self.decoder = self._decoder(rng, dtype)

    def forward(self, batch, mode, rng):
        bottleneck, stash = self.encoder(batch, mode, rng)
        seg = self.decoder(bottleneck, stash, mode, rng)
        return ModelOutputs(seg.final, seg_intermediates=seg.intermediates)


class CompNet(_Network):
    """Shared encoder, segmentation and complementary decoders, reconstruction U-Net."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = self._encoder(1, rng, dtype)
        self.seg_decoder = self._decoder(rng, dtype)
        self.comp_decoder = self._decoder(rng, dtype)
        if config.intermediates:
            n_outputs = config.levels + 1
            self.recon_mix = Conv1x1(n_outputs, 1, rng, dtype)
        self.recon_encoder = self._encoder(1, rng, dtype)
        self.recon_decoder = self._decoder(rng, dtype)

    def forward(self, batch, mode, rng):
        bottleneck, stash = self.encoder(batch, mode, rng)
        seg = self.seg_decoder(bottleneck, stash, mode, rng)
        comp = self.comp_decoder(bottleneck, stash, mode, rng)
        if self.config.intermediates:
            sums = [F.add(s, c) for s, c in zip(seg.outputs, comp.outputs)]
            recon_input = F.sigmoid(self.recon_mix(F.concat(sums)))
        else:
            recon_input = F.add(seg.final, comp.final)
        r_bottleneck, r_stash = self.recon_encoder(recon_input, mode, rng)
        recon = self.recon_decoder(r_bottleneck, r_stash, mode, rng)
        return ModelOutputs(
            seg.final, comp.final, recon.final,
            seg.intermediates, comp.intermediates, recon.intermediates,
            recon_input,
        )


class ProbabilityCompNet(_Network):
    """Two decoders over a shared encoder, cross-gated at every enabled decoder level."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = self._encoder(1, rng, dtype)
        self.seg_decoder = self._decoder(rng, dtype)
        self.comp_decoder = self._decoder(rng, dtype)
        widths = [b.out_channels for b in self.seg_decoder.blocks]
        self.seg_gates = [Conv1x1(w, 1, rng, dtype) for w in widths]
        self.comp_gates = [Conv1x1(w, 1, rng, dtype) for w in widths]

    @property
    def gate_levels(self) -> tuple[bool, ...]:
        if self.config.gate_levels is None:
            return (True,) * (self.config.levels - 1)
        return self.config.gate_levels

    def forward(self, batch, mode, rng):
        bottleneck, stash = self.encoder(batch, mode, rng)
        s = c = bottleneck
        s_firsts, c_firsts = [], []
        for i, skip in enumerate(reversed(stash)):
            s, s_first = self.seg_decoder.level(i, s, skip, mode, rng)
            c, c_first = self.comp_decoder.level(i, c, skip, mode, rng)
            if self.gate_levels[i]:
                sg, cg = self.seg_gates[i], self.comp_gates[i]
                s, c = (probability_gate(c, s, cg.weight, cg.bias),
                        probability_gate(s, c, sg.weight, sg.bias))
            s_firsts.append(s_first)
            c_firsts.append(c_first)
        seg: DecoderOutputs = self.seg_decoder.head(s, s_firsts)
        comp: DecoderOutputs = self.comp_decoder.head(c, c_firsts)
        return ModelOutputs(seg.final, comp.final, seg_intermediates=seg.intermediates,
                            comp_intermediates=comp.intermediates)


def build_model(config: NetworkConfig, dtype=np.float32) -> _Network:
    """Instantiate the network for ``config.variant`` with seeded He-uniform weights."""
    config.validate()
    if config.variant in ("plain-unet", "dense-unet"):
        return UNet(config, dtype)
    if config.variant == "prob-compnet":
        return ProbabilityCompNet(config, dtype)
    return CompNet(config, dtype)


def count_params(params) -> int:
    """Number of trainable scalars; BN running statistics are not counted."""
    if isinstance(params, Module):
        params = dict(params.named_parameters())
    return int(sum(t.size for t in params.values()))


def plain_unet_param_formula(filters: Sequence[int]) -> int:
    """Closed-form trainable-parameter count of a plain U-Net with the given encoder filters."""

    def block(c_in, c_out):
        return 9 * c_in * c_out + c_out + 9 * c_out * c_out + c_out + 4 * c_out

    total = 0
    c = 1
    for f in filters:
        total += block(c, f)
        c = f
    for f in filters[:-1][::-1]:
        total += 4 * c * f + f  # 2x2 up-convolution
        total += block(2 * f, f)
        c = f
    return total + c + 1  # final 1x1 sigmoid head
