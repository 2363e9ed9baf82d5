"""Multi-axis external weights: the four-branch mixer, its weight generator and block.

The mixer splits channels into four slices. Three are filtered in the
frequency domain over the (H, W), (C, W) and (C, H) axis pairs with
generated real weights; the fourth goes through a 3x3 depthwise
convolution. The slices are concatenated and the input added back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Depthwise, Module, Pointwise, const_param, make_norm
from .spectral import AxisPair, half_spectrum_shape, spectral_modulate
from .tensor import ShapeError, Tensor

BRANCH_NAMES = ("hw", "cw", "ch", "dw")
SPECTRAL_PAIRS = (AxisPair.HW, AxisPair.CW, AxisPair.CH)


@dataclass
class MewConfig:
    channels: int
    height: int
    width: int
    branches: tuple[bool, bool, bool, bool] = (True, True, True, True)
    norm_kind: str = "group"
    base_weight_extent: int = 16
    ffn_expansion: int = 4
    generator_blocks: int = 3
    ir_expansion: int = 4

    def __post_init__(self):
        self.branches = tuple(bool(b) for b in self.branches)
        if len(self.branches) != 4:
            raise ValueError("branches needs four flags (hw, cw, ch, dw)")
        if self.channels % 4:
            raise ShapeError(f"MEW needs channels divisible by 4, got {self.channels}")
        if self.norm_kind not in ("group", "batch"):
            raise ValueError(f"norm_kind must be 'group' or 'batch', got {self.norm_kind!r}")


def parse_branches(spec: str) -> tuple[bool, bool, bool, bool]:
    """``"hw,cw,dw"`` -> (True, True, False, True)."""
    names = {s.strip().lower() for s in spec.split(",") if s.strip()}
    unknown = names - set(BRANCH_NAMES)
    if unknown:
        raise ValueError(f"unknown branch names {sorted(unknown)}; choose from {BRANCH_NAMES}")
    return tuple(n in names for n in BRANCH_NAMES)


def format_branches(flags) -> str:
    return ",".join(n for n, on in zip(BRANCH_NAMES, flags) if on) or "none"


class InvertedResidual(Module):
    """Expand (1x1) -> GELU -> depthwise -> GELU -> project (1x1) -> + input.

    ``conv_axis`` None gives a 3x3 depthwise kernel; "h" or "w" gives a
    1D kernel of length 3 along that axis, which is the same as folding the
    other spatial axis into the batch.
    """

    def __init__(self, channels: int, rng, conv_axis: str | None = None, expansion: int = 4, dtype=np.float64):
        hidden = channels * expansion
        kernel = {None: (3, 3), "h": (3, 1), "w": (1, 3)}[conv_axis]
        self.conv_axis = conv_axis
        self.expand = Pointwise(channels, hidden, rng, dtype=dtype)
        self.dw = Depthwise(hidden, rng, kernel, bias=True, dtype=dtype)
        self.project = Pointwise(hidden, channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = T.gelu(self.expand(x))
        h = T.gelu(self.dw(h))
        return self.project(h) + x


class ExternalWeight(Module):
    """Learnable base tensor -> bilinear resize -> inverted residual stack.

    The realized weight has the half-spectrum shape of the branch input
    (channels, I', J') for its axis pair. The HW pair uses 2D blocks; CW and
    CH use 1D blocks along the reduced frequency axis.
    """

    def __init__(self, axis_pair: AxisPair, channels: int, target_hw: tuple[int, int], rng,
                 base_extent: int = 16, n_blocks: int = 3, expansion: int = 4, dtype=np.float64):
        self.axis_pair = axis_pair
        self.channels = channels
        # base extent is clamped to the target when the target is smaller
        base_hw = (min(base_extent, target_hw[0]), min(base_extent, target_hw[1]))
        self.base = const_param((1, channels) + base_hw, 1.0, dtype)
        conv_axis = {AxisPair.HW: None, AxisPair.CW: "w", AxisPair.CH: "h"}[axis_pair]
        self.blocks = [InvertedResidual(channels, rng, conv_axis, expansion, dtype) for _ in range(n_blocks)]

    def target_shape(self, branch_shape: tuple[int, ...]) -> tuple[int, int, int]:
        return half_spectrum_shape(branch_shape, self.axis_pair)[1:]

    def forward(self, target_shape: tuple[int, int, int]) -> Tensor:
        c, th, tw = target_shape
        if c != self.channels:
            raise ShapeError(f"external weight built for {self.channels} channels, asked for {c}")
        w = T.bilinear_interpolate(self.base, th, tw)
        for block in self.blocks:
            w = block(w)
        return w.reshape(c, th, tw)


def generate_weight(ew: ExternalWeight, target_shape) -> Tensor:
    return ew(tuple(target_shape))


class MEW(Module):
    def __init__(self, cfg: MewConfig, rng, dtype=np.float64):
        self.cfg = cfg
        part = cfg.channels // 4
        self.generators = []
        for pair, on in zip(SPECTRAL_PAIRS, cfg.branches[:3]):
            if not on:
                self.generators.append(None)
                continue
            _, th, tw = half_spectrum_shape((1, part, cfg.height, cfg.width), pair)[1:]
            self.generators.append(ExternalWeight(
                pair, part, (th, tw), rng, cfg.base_weight_extent, cfg.generator_blocks, cfg.ir_expansion, dtype,
            ))
        self.dw = Depthwise(part, rng, (3, 3), bias=False, dtype=dtype) if cfg.branches[3] else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.channels:
            raise ShapeError(f"MEW expects {self.cfg.channels} channels, got input {x.shape}")
        parts = T.split_channels(x, 4)
        outs = []
        for part, pair, gen in zip(parts[:3], SPECTRAL_PAIRS, self.generators):
            if gen is None:
                outs.append(part)
            else:
                w = gen(gen.target_shape(part.shape))
                outs.append(spectral_modulate(part, w, pair))
        outs.append(self.dw(parts[3]) if self.dw is not None else parts[3])
        return T.concat_channels(outs) + x


def mew_forward(x: Tensor, cfg: MewConfig, weights, dw_kernel: Tensor | None) -> Tensor:
    """Functional form of the mixer with explicitly supplied weights.

    ``weights`` holds three realized spectral weights (or None for disabled
    branches); ``dw_kernel`` is the (C/4, 3, 3) depthwise kernel or None.
    """
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ShapeError(f"MEW expects {cfg.channels} channels, got input {x.shape}")
    parts = T.split_channels(x, 4)
    outs = []
    for part, pair, w, on in zip(parts[:3], SPECTRAL_PAIRS, weights, cfg.branches[:3]):
        outs.append(spectral_modulate(part, w, pair) if on and w is not None else part)
    if cfg.branches[3] and dw_kernel is not None:
        outs.append(T.conv_depthwise(parts[3], dw_kernel, 1, 1))
    else:
        outs.append(parts[3])
    return T.concat_channels(outs) + x


class FFN(Module):
    def __init__(self, channels: int, expansion: int, rng, dtype=np.float64):
        self.fc1 = Pointwise(channels, channels * expansion, rng, dtype=dtype)
        self.fc2 = Pointwise(channels * expansion, channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MEWB(Module):
    """X' = MEW(Norm(X)) + X;  Y = FFN(Norm(X')) + X'."""

    def __init__(self, cfg: MewConfig, rng, dtype=np.float64):
        self.cfg = cfg
        self.norm1 = make_norm(cfg.norm_kind, cfg.channels, dtype)
        self.mew = MEW(cfg, rng, dtype)
        self.norm2 = make_norm(cfg.norm_kind, cfg.channels, dtype)
        self.ffn = FFN(cfg.channels, cfg.ffn_expansion, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.mew(self.norm1(x)) + x
        return self.ffn(self.norm2(x)) + x
