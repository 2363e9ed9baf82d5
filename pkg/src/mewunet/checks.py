"""Independent numerical oracles: finite differences and naive Fourier sums.

Used by the ``gradcheck`` / ``fftcheck`` commands and by the test-suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .mew import FFN, MEWB, ExternalWeight, InvertedResidual, MewConfig
from .network import NetworkConfig, build_network
from .spectral import (
    AxisPair, bin_multiplicity, dft1d_naive, fft1d, half_spectrum_shape, ifft1d, rdft2_axes, spectral_modulate,
)
from .training import bce_dice_loss
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: error {self.error:.3e} (tol {self.tolerance:.0e}, {self.seconds:.2f}s)"


# finite differences ----------------------------------------------------------


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                   max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between autodiff and central differences.

    ``loss_fn`` rebuilds the scalar loss from the current tensor data. At most
    ``max_entries`` randomly chosen entries per tensor are probed.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    with T.no_grad():
        for t, grad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                worst = max(worst, rel_error(grad.reshape(-1)[i], (up - down) / (2 * eps)))
    return worst


def directional_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                      rng: np.random.Generator | None = None) -> float:
    """Compare <grad, v> with a central difference along a random direction v, per tensor."""
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    with T.no_grad():
        for t in tensors:
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            v = rng.uniform(-1, 1, size=t.shape)
            orig = t.data.copy()
            t.data[...] = orig + eps * v
            up = loss_fn().item()
            t.data[...] = orig - eps * v
            down = loss_fn().item()
            t.data[...] = orig
            worst = max(worst, rel_error(float((grad * v).sum()), (up - down) / (2 * eps)))
    return worst


def projected(out: Tensor, probe: np.ndarray) -> Tensor:
    """Scalar <out, probe>; a random probe gives O(1) gradients everywhere."""
    return (out * Tensor(probe)).sum()


# naive Fourier oracles -------------------------------------------------------


def naive_dft2(x: np.ndarray, axes: tuple[int, int], inverse: bool = False) -> np.ndarray:
    out = np.asarray(x, dtype=np.complex128)
    for ax in axes:
        if inverse:
            n = out.shape[ax]
            out = np.conj(np.apply_along_axis(dft1d_naive, ax, np.conj(out))) / n
        else:
            out = np.apply_along_axis(dft1d_naive, ax, out)
    return out


def mirrored_weight(w: np.ndarray, extents: tuple[int, int]) -> np.ndarray:
    """Extend half-spectrum weights (..., I, J//2+1) to the full (..., I, J) grid."""
    n_i, n_j = extents
    kept = n_j // 2 + 1
    full = np.zeros(w.shape[:-1] + (n_j,))
    full[..., :kept] = w
    for j in range(kept, n_j):
        full[..., :, j] = w[..., (-np.arange(n_i)) % n_i, n_j - j]
    return full


def spectral_modulate_naive(x: np.ndarray, w: np.ndarray, axes: AxisPair) -> np.ndarray:
    """Full complex spectrum, Hermitian-mirrored real weights, naive inverse, real part."""
    ai, aj = axes.axes
    n_i, n_j = x.shape[ai], x.shape[aj]
    spec = naive_dft2(x, (ai, aj))
    # move (I, J) to the end so mirroring is index arithmetic on the last two axes
    wb = np.broadcast_to(w[None], half_spectrum_shape(x.shape, axes))
    wm = np.moveaxis(wb, (ai, aj), (-2, -1))
    full = np.moveaxis(mirrored_weight(np.asarray(wm), (n_i, n_j)), (-2, -1), (ai, aj))
    return naive_dft2(spec * full, (ai, aj), inverse=True).real


# suites ----------------------------------------------------------------------


def fft_suite(trials: int = 100, max_length: int = 64, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst_fft = worst_rt = worst_parseval = 0.0
    for n in range(1, max_length + 1):
        for _ in range(trials):
            x = rng.normal(size=n) + 1j * rng.normal(size=n)
            fast = fft1d(x)
            slow = dft1d_naive(x)
            worst_fft = max(worst_fft, np.abs(fast - slow).max() / np.abs(slow).max())
            worst_rt = max(worst_rt, np.abs(ifft1d(fast) - x).max() / np.abs(x).max())
            energy = np.sum(np.abs(x) ** 2)
            worst_parseval = max(worst_parseval, abs(energy - np.sum(np.abs(fast) ** 2) / n) / energy)
    elapsed = time.perf_counter() - start
    results = [
        CheckResult("fft1d vs naive DFT, lengths 1-64", worst_fft, 1e-10, elapsed),
        CheckResult("ifft(fft(x)) round trip", worst_rt, 1e-10),
        CheckResult("Parseval identity", worst_parseval, 1e-10),
    ]
    # half-spectrum energy bookkeeping on real tensors
    worst = 0.0
    for shape in [(1, 4, 6, 6), (2, 3, 5, 7), (1, 2, 8, 8)]:
        x = rng.normal(size=shape)
        for pair in AxisPair:
            s = rdft2_axes(x, pair)
            ai, aj = pair.axes
            mult_shape = [1, 1, 1, 1]
            mult_shape[aj] = -1
            mult = bin_multiplicity(shape[aj]).reshape(mult_shape)
            energy = np.sum(x ** 2)
            spec_energy = np.sum(np.abs(s.data) ** 2 * mult) / (shape[ai] * shape[aj])
            worst = max(worst, abs(energy - spec_energy) / energy)
    results.append(CheckResult("half-spectrum Parseval", worst, 1e-10))
    return results


def spectral_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst_oracle = worst_identity = 0.0
    for shape in [(1, 2, 6, 6), (2, 4, 8, 8)]:
        for pair in AxisPair:
            x = rng.uniform(-1, 1, size=shape)
            w = rng.uniform(-1, 1, size=half_spectrum_shape(shape, pair)[1:])
            fast = spectral_modulate(Tensor(x), Tensor(w), pair).data
            worst_oracle = max(worst_oracle, np.abs(fast - spectral_modulate_naive(x, w, pair)).max())
            ones = Tensor(np.ones(half_spectrum_shape(shape, pair)[1:]))
            worst_identity = max(worst_identity, np.abs(spectral_modulate(Tensor(x), ones, pair).data - x).max())
    elapsed = time.perf_counter() - start
    return [
        CheckResult("spectral_modulate vs naive full-spectrum oracle", worst_oracle, 1e-9, elapsed),
        CheckResult("spectral_modulate with unit weights is identity", worst_identity, 1e-10),
    ]


def _param(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def gradient_suite(seed: int = 0, include_network: bool = True) -> list[CheckResult]:
    """Finite-difference checks for every differentiable op, a MEWB and a toy network."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def run(name, loss_fn, tensors, tol=1e-4, **kw):
        t0 = time.perf_counter()
        err = gradient_check(loss_fn, tensors, rng=rng, **kw)
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))

    x = _param(rng, (2, 4, 5, 5))
    y = _param(rng, (2, 4, 5, 5))
    probe = rng.normal(size=(2, 4, 5, 5))
    run("add", lambda: projected(T.add(x, y), probe), [x, y])
    run("mul", lambda: projected(T.mul(x, y), probe), [x, y])
    run("split/concat", lambda: projected(T.concat_channels(T.split_channels(x, 4)[::-1]), probe), [x])
    k = _param(rng, (4, 3, 3))
    bias = _param(rng, (4,))
    run("conv_depthwise stride 1", lambda: projected(T.conv_depthwise(x, k, 1, 1, bias), probe), [x, k, bias])
    probe2 = rng.normal(size=(2, 4, 3, 3))
    run("conv_depthwise stride 2", lambda: projected(T.conv_depthwise(x, k, 2, 1), probe2), [x, k])
    k1 = _param(rng, (4, 1, 3))
    run("conv_depthwise 1x3", lambda: projected(T.conv_depthwise(x, k1, 1, (0, 1)), probe), [x, k1])
    pk = _param(rng, (3, 4))
    pb = _param(rng, (3,))
    probe3 = rng.normal(size=(2, 3, 5, 5))
    run("conv_pointwise", lambda: projected(T.conv_pointwise(x, pk, pb), probe3), [x, pk, pb])
    gamma = _param(rng, (4,), 0.5, 1.5)
    beta = _param(rng, (4,))
    run("group_norm", lambda: projected(T.group_norm(x, 2, gamma, beta), probe), [x, gamma, beta])
    rm, rv = np.zeros(4), np.ones(4)
    run("batch_norm (train)", lambda: projected(T.batch_norm(x, gamma, beta, rm, rv, True), probe), [x, gamma, beta])
    run("gelu", lambda: projected(T.gelu(x), probe), [x], tol=1e-5)
    run("sigmoid", lambda: projected(T.sigmoid(x), probe), [x])
    run("softmax_channels", lambda: projected(T.softmax_channels(x), probe), [x])
    probe4 = rng.normal(size=(2, 4, 7, 9))
    run("bilinear_interpolate", lambda: projected(T.bilinear_interpolate(x, 7, 9), probe4), [x])
    labels = rng.integers(0, 4, size=(2, 5, 5))
    run("cross_entropy_with_logits", lambda: T.cross_entropy_with_logits(x, labels), [x])
    z = _param(rng, (2, 1, 5, 5))
    run("bce_with_logits", lambda: T.bce_with_logits(z, labels % 2), [z])
    for pair in AxisPair:
        w = _param(rng, half_spectrum_shape(x.shape, pair)[1:])
        run(f"spectral_modulate {pair.name}",
            lambda pair=pair, w=w: projected(spectral_modulate(x, w, pair), probe), [x, w])

    # generator pieces and one block, on toy extents
    block_rng = np.random.default_rng(seed + 1)
    xin = _param(rng, (1, 4, 6, 6))
    probe_in = rng.normal(size=(1, 4, 6, 6))
    for axis in (None, "w", "h"):
        ir = InvertedResidual(4, block_rng, axis, 2)
        run(f"inverted residual ({axis or '2d'})",
            lambda ir=ir: projected(ir(xin), probe_in), [xin] + ir.parameters())
    for pair in AxisPair:
        ew = ExternalWeight(pair, 2, half_spectrum_shape((1, 2, 8, 8), pair)[2:], block_rng, base_extent=3,
                            n_blocks=2, expansion=2)
        target = ew.target_shape((1, 2, 8, 8))
        ew.base.data += block_rng.uniform(-0.5, 0.5, size=ew.base.shape)
        pr = rng.normal(size=target)
        run(f"external weight generator {pair.name}",
            lambda ew=ew, target=target, pr=pr: projected(ew(target), pr), ew.parameters())
    ffn_mod = FFN(4, 2, block_rng)
    run("ffn", lambda: projected(ffn_mod(xin), probe_in), [xin] + ffn_mod.parameters())
    cfg = MewConfig(channels=8, height=6, width=6, base_weight_extent=4)
    block = MEWB(cfg, block_rng)
    for gen in block.mew.generators:
        gen.base.data += block_rng.uniform(-0.5, 0.5, size=gen.base.shape)
    xb = _param(rng, (2, 8, 6, 6))
    probe_b = rng.normal(size=(2, 8, 6, 6))
    run("MEWB end to end (every parameter)", lambda: projected(block(xb), probe_b),
        [xb] + block.parameters(), max_entries=6)

    if include_network:
        net_cfg = NetworkConfig(in_channels=3, num_classes=2, height=16, width=16,
                                stage_channels=(4, 8, 8, 8, 8), mewb_counts=(1, 1, 1, 1), base_weight_extent=4)
        net = build_network(net_cfg, seed)
        xn = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)))
        labels_n = rng.integers(0, 2, size=(2, 16, 16))
        t0 = time.perf_counter()
        err = directional_check(lambda: bce_dice_loss(net(xn), labels_n), net.parameters(), rng=rng)
        results.append(CheckResult("toy MEW-UNet, every parameter tensor (directional)", err, 1e-3,
                                   time.perf_counter() - t0))
    return results
