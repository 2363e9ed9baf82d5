"""Fourier transforms over axis pairs of (B, C, H, W) tensors.

Forward transforms are unnormalized; inverses carry the 1/N factor. Real
inputs use a half spectrum: the second transformed axis keeps only
``J // 2 + 1`` bins, the rest being implied by conjugate symmetry. Real
weights applied to a half spectrum therefore always invert to a real signal.

Power-of-two lengths use an iterative radix-2 transform; other lengths go
through Bluestein's chirp-z reformulation on top of it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, _record

__all__ = [
    "AxisPair",
    "HalfSpectrum",
    "dft1d_naive",
    "fft1d",
    "ifft1d",
    "fft_along",
    "rdft2_axes",
    "irdft2_axes",
    "half_spectrum_shape",
    "bin_multiplicity",
    "spectral_modulate",
]


class AxisPair(enum.Enum):
    """Which two of (channel, height, width) a 2D transform acts on.

    The value is (first axis, second axis) in (B, C, H, W) layout; the second
    axis is the one stored as a half spectrum.
    """

    HW = (2, 3)
    CW = (1, 3)
    CH = (1, 2)

    @property
    def axes(self) -> tuple[int, int]:
        return self.value


@dataclass
class HalfSpectrum:
    axis_pair: AxisPair
    extents: tuple[int, int]
    data: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def dft1d_naive(x) -> np.ndarray:
    """Direct O(N^2) DFT, X[k] = sum_n x[n] exp(-2 pi i k n / N)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    if n < 1:
        raise ValueError("dft1d_naive needs at least one sample")
    idx = np.arange(n)
    # reduce k*n mod N first so the phase stays accurate for larger N
    phase = (np.outer(idx, idx) % n) * (-2.0 * np.pi / n)
    return np.exp(1j * phase) @ x


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


def _fft_pow2(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    lead = a.shape[:-1]
    a = a[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size)
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


@lru_cache(maxsize=None)
def _bluestein_tables(n: int) -> tuple[np.ndarray, np.ndarray, int]:
    m = 1 << (2 * n - 2).bit_length()
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    return chirp, _fft_pow2(b), m


def _fft_last(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    if n & (n - 1) == 0:
        return _fft_pow2(a)
    chirp, fb, m = _bluestein_tables(n)
    padded = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    padded[..., :n] = a * chirp
    conv = _ifft_last(_fft_pow2(padded) * fb)
    return conv[..., :n] * chirp


def _ifft_last(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    return np.conj(_fft_last(np.conj(a))) / n


def fft1d(x) -> np.ndarray:
    """Fast DFT of a 1D sequence (any length >= 1)."""
    return _fft_last(np.asarray(x, dtype=np.complex128))


def ifft1d(x) -> np.ndarray:
    return _ifft_last(np.asarray(x, dtype=np.complex128))


def fft_along(a: np.ndarray, axis: int, inverse: bool = False) -> np.ndarray:
    """Transform every 1D fibre of ``a`` along ``axis``."""
    moved = np.moveaxis(np.asarray(a, dtype=np.complex128), axis, -1)
    out = _ifft_last(moved) if inverse else _fft_last(moved)
    return np.moveaxis(out, -1, axis)


def half_spectrum_shape(shape: tuple[int, ...], axes: AxisPair) -> tuple[int, ...]:
    out = list(shape)
    j = axes.axes[1]
    out[j] = shape[j] // 2 + 1
    return tuple(out)


def bin_multiplicity(extent: int) -> np.ndarray:
    """How many full-spectrum bins each retained half-spectrum bin stands for."""
    kept = extent // 2 + 1
    mult = np.full(kept, 2.0)
    mult[0] = 1.0
    if extent % 2 == 0:
        mult[-1] = 1.0
    return mult


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def rdft2_axes(x, axes: AxisPair) -> HalfSpectrum:
    """Real-input 2D DFT over ``axes``; all other axes are carried along."""
    data = _raw(x)
    if data.ndim != 4:
        raise ShapeError(f"rdft2_axes expects a rank-4 tensor, got shape {data.shape}")
    ai, aj = axes.axes
    kept = data.shape[aj] // 2 + 1
    spec = fft_along(data, aj)
    spec = np.take(spec, np.arange(kept), axis=aj)
    spec = fft_along(spec, ai)
    return HalfSpectrum(axes, (data.shape[ai], data.shape[aj]), spec)


def irdft2_axes(s: HalfSpectrum, axes: AxisPair, extents: tuple[int, int]) -> Tensor:
    """Inverse of :func:`rdft2_axes`.

    The full spectrum is rebuilt by conjugate mirroring along the reduced
    axis and the real part of its inverse returned, so spectra that are not
    exactly Hermitian (e.g. after modulation) still map to real signals.
    """
    if s.axis_pair is not axes:
        raise ShapeError(f"spectrum was taken over {s.axis_pair.name}, not {axes.name}")
    ai, aj = axes.axes
    n_i, n_j = extents
    if s.data.shape[ai] != n_i or s.data.shape[aj] != n_j // 2 + 1:
        raise ShapeError(
            f"half spectrum {s.data.shape} does not match extents {extents} on {axes.name}"
        )
    return Tensor(_irdft2(s.data, ai, aj, n_j).real)


def _irdft2(spec: np.ndarray, ai: int, aj: int, n_j: int) -> np.ndarray:
    spec = fft_along(spec, ai, inverse=True)
    kept = spec.shape[aj]
    missing = n_j - kept
    mirror = np.conj(np.flip(np.take(spec, np.arange(1, 1 + missing), axis=aj), axis=aj))
    full = np.concatenate([spec, mirror], axis=aj)
    return fft_along(full, aj, inverse=True)


def spectral_modulate(x: Tensor, w: Tensor, axes: AxisPair) -> Tensor:
    """Filter ``x`` by real per-bin weights ``w`` in the half spectrum over ``axes``.

    ``w`` has the half-spectrum shape of one batch element (batch is shared).
    The map x -> irdft2(w * rdft2(x)) is the real part of a circular
    convolution with an even kernel, hence self-adjoint: the input gradient
    is the same filter applied to the output gradient. The weight gradient
    at a retained bin counts every full-spectrum bin it represents.
    """
    if x.ndim != 4:
        raise ShapeError(f"spectral_modulate expects a rank-4 input, got {x.shape}")
    expected = half_spectrum_shape(x.shape, axes)[1:]
    if w.shape != expected:
        raise ShapeError(
            f"spectral weight shape {w.shape} does not match half spectrum {expected} for {axes.name}"
        )
    ai, aj = axes.axes
    n_i, n_j = x.shape[ai], x.shape[aj]
    spec = rdft2_axes(x.data, axes).data
    wb = w.data[None]
    out = _irdft2(spec * wb, ai, aj, n_j).real.astype(x.dtype, copy=False)

    def back(g):
        gx = gw = None
        gspec = rdft2_axes(g, axes).data
        if x.requires_grad:
            gx = _irdft2(gspec * wb, ai, aj, n_j).real.astype(x.dtype, copy=False)
        if w.requires_grad:
            mult_shape = [1, 1, 1, 1]
            mult_shape[aj] = -1
            mult = bin_multiplicity(n_j).reshape(mult_shape)
            gw = ((np.conj(gspec) * spec).real * mult).sum(axis=0) / (n_i * n_j)
            gw = gw.astype(w.dtype, copy=False)
        return (gx, gw)

    return _record(out, (x, w), back)
