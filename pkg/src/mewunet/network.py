"""Five-stage U-shaped encoder-decoder built from separable convolutions and MEW blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import Module, Pointwise, SeparableConv
from .mew import MEWB, MewConfig
from .tensor import ShapeError, Tensor

DEFAULT_CHANNELS = (32, 64, 128, 256, 512)
DEFAULT_MEWB_COUNTS = (1, 2, 2, 4)


@dataclass
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 2
    height: int = 256
    width: int = 256
    stage_channels: tuple[int, ...] = DEFAULT_CHANNELS
    mewb_counts: tuple[int, ...] = DEFAULT_MEWB_COUNTS
    branches: tuple[bool, bool, bool, bool] = (True, True, True, True)
    norm_kind: str = "group"
    skip_mode: str = "add"
    base_weight_extent: int = 16
    ffn_expansion: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.mewb_counts = tuple(int(c) for c in self.mewb_counts)
        self.branches = tuple(bool(b) for b in self.branches)
        self.validate()

    def validate(self) -> None:
        if len(self.stage_channels) != 5:
            raise ValueError(f"stage_channels needs 5 entries, got {self.stage_channels}")
        if len(self.mewb_counts) != 4:
            raise ValueError(f"mewb_counts needs 4 entries, got {self.mewb_counts}")
        if any(c < 4 or c % 4 for c in self.stage_channels):
            raise ValueError(f"stage channels must be positive multiples of 4, got {self.stage_channels}")
        if any(n < 0 for n in self.mewb_counts):
            raise ValueError(f"mewb_counts must be non-negative, got {self.mewb_counts}")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be positive")
        check_extent(self.height, self.width)
        if self.skip_mode != "add":
            raise ValueError(f"only additive skips are supported, got {self.skip_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["mewb_counts"] = list(self.mewb_counts)
        d["branches"] = list(self.branches)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def mew_config(self, stage: int) -> MewConfig:
        """MEW settings for 1-based encoder ``stage`` (2..5)."""
        scale = 2 ** (stage - 1)
        return MewConfig(
            channels=self.stage_channels[stage - 1],
            height=self.height // scale,
            width=self.width // scale,
            branches=self.branches,
            norm_kind=self.norm_kind,
            base_weight_extent=self.base_weight_extent,
            ffn_expansion=self.ffn_expansion,
        )


def check_extent(height: int, width: int) -> None:
    if height < 16 or width < 16 or height % 16 or width % 16:
        raise ShapeError(f"input extent ({height}, {width}) must be positive multiples of 16")


@dataclass
class StageState:
    """Encoder outputs kept for the skip connections, index 0 = stage 1."""

    encoder: list[Tensor] = field(default_factory=list)
    decoder: list[Tensor] = field(default_factory=list)


class MEWUNet(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        ch = cfg.stage_channels
        norm = cfg.norm_kind
        self.enc_conv = [SeparableConv(cfg.in_channels, ch[0], rng, 1, norm, dtype)]
        self.enc_blocks: list[list[MEWB]] = [[]]
        for s in range(2, 6):
            self.enc_conv.append(SeparableConv(ch[s - 2], ch[s - 1], rng, 2, norm, dtype))
            mcfg = cfg.mew_config(s)
            self.enc_blocks.append([MEWB(mcfg, rng, dtype) for _ in range(cfg.mewb_counts[s - 2])])
        # decoder stages 4..1, each reducing channels from stage s+1 to stage s
        self.dec_conv = []
        self.dec_blocks: list[list[MEWB]] = []
        for s in range(4, 0, -1):
            self.dec_conv.append(SeparableConv(ch[s], ch[s - 1], rng, 1, norm, dtype))
            if s >= 2:
                mcfg = cfg.mew_config(s)
                self.dec_blocks.append([MEWB(mcfg, rng, dtype) for _ in range(cfg.mewb_counts[s - 2])])
            else:
                self.dec_blocks.append([])
        self.head = Pointwise(ch[0], cfg.num_classes, rng, dtype=dtype)

    def _children(self):
        # flatten the nested block lists so parameter names stay stable
        for key, value in vars(self).items():
            if key in ("enc_blocks", "dec_blocks"):
                for i, stage in enumerate(value):
                    for j, block in enumerate(stage):
                        yield f"{key}.{i}.{j}", block
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def forward(self, x: Tensor, state: StageState | None = None,
                probe: Callable[[str, Tensor], None] | None = None) -> Tensor:
        b, c, h, w = x.shape
        if c != self.cfg.in_channels or (h, w) != (self.cfg.height, self.cfg.width):
            raise ShapeError(
                f"network expects (B, {self.cfg.in_channels}, {self.cfg.height}, {self.cfg.width}), got {x.shape}"
            )
        if x.dtype != np.dtype(self.cfg.dtype):
            x = Tensor(x.data.astype(self.cfg.dtype), requires_grad=x.requires_grad)
        feats = []
        for s, (conv, blocks) in enumerate(zip(self.enc_conv, self.enc_blocks), start=1):
            x = conv(x)
            for block in blocks:
                x = block(x)
            feats.append(x)
            if probe is not None:
                probe(f"encoder{s}", x)
        for k, (conv, blocks) in enumerate(zip(self.dec_conv, self.dec_blocks)):
            s = 4 - k
            up = T.bilinear_interpolate(x, x.shape[2] * 2, x.shape[3] * 2)
            x = conv(up) + feats[s - 1]
            for block in blocks:
                x = block(x)
            if probe is not None:
                probe(f"decoder{s}", x)
            if state is not None:
                state.decoder.append(x)
        if state is not None:
            state.encoder.extend(feats)
        return self.head(x)


def build_network(cfg: NetworkConfig, rng_seed: int = 0) -> MEWUNet:
    cfg.validate()
    return MEWUNet(cfg, np.random.default_rng(rng_seed))


def parameter_count(net: Module) -> int:
    return int(sum(p.data.size for p in net.parameters()))
