"""OFDMA baseband synthesis from a grid of modulation-labelled resource blocks.

Grid convention: frequency index ``i`` in ``[0, fft_size)`` is the signed
subcarrier ``k = i - fft_size // 2`` (ascending frequency), so a contiguous
index range is a contiguous band in an fftshifted spectrogram.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._rng import make_rng


class ModClass(enum.IntEnum):
    NoData = 0
    BPSK = 1
    QPSK = 2
    QAM16 = 3
    QAM64 = 4


N_CLASSES = len(ModClass)

BITS_PER_SYMBOL = {
    ModClass.BPSK: 1,
    ModClass.QPSK: 2,
    ModClass.QAM16: 4,
    ModClass.QAM64: 6,
}

# per-block class draw; index = ModClass code
BASE_CLASS_PROBS = (0.1, 0.225, 0.225, 0.225, 0.225)
EXTRA_QAM_CLASS_PROBS = (0.1, 0.0, 0.0, 0.45, 0.45)

P_STOP = 0.3
DEFAULT_MIN_F = 4
DEFAULT_MIN_T = 4

# samples needed for 300 STFT columns with a 256 window and shift 8
SPECTROGRAM_SPAN = 2648


@dataclass(frozen=True)
class FrameSpec:
    fft_size: int = 64
    cp_len: int = 8
    n_symbols: int = 37
    sample_rate: float = 20e6

    def __post_init__(self):
        if self.fft_size < 2:
            raise ValueError(f"fft_size must be >= 2, got {self.fft_size}")
        if self.cp_len < 0:
            raise ValueError(f"cp_len must be >= 0, got {self.cp_len}")
        if self.n_symbols < 1:
            raise ValueError(f"n_symbols must be >= 1, got {self.n_symbols}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def symbol_len(self) -> int:
        return self.fft_size + self.cp_len

    @property
    def n_samples(self) -> int:
        return self.n_symbols * self.symbol_len

    @classmethod
    def covering(cls, fft_size: int, cp_len: int, span: int = SPECTROGRAM_SPAN,
                 sample_rate: float = 20e6) -> "FrameSpec":
        """Smallest frame of this numerology that spans ``span`` samples."""
        n_symbols = -(-span // (fft_size + cp_len))
        return cls(fft_size, cp_len, n_symbols, sample_rate)

    def to_dict(self) -> dict:
        return {"fft_size": self.fft_size, "cp_len": self.cp_len,
                "n_symbols": self.n_symbols, "sample_rate": self.sample_rate}


@dataclass(frozen=True)
class RbAllocation:
    """Block covering subcarrier indices ``[f0, f1)`` and symbols ``[t0, t1)``."""

    f0: int
    f1: int
    t0: int
    t1: int
    mod: ModClass

    @property
    def area(self) -> int:
        return (self.f1 - self.f0) * (self.t1 - self.t0)

    def to_list(self) -> list:
        return [self.f0, self.f1, self.t0, self.t1, int(self.mod)]

    @classmethod
    def from_list(cls, row: Sequence[int]) -> "RbAllocation":
        f0, f1, t0, t1, mod = (int(v) for v in row)
        return cls(f0, f1, t0, t1, ModClass(mod))


@dataclass
class IqSignal:
    samples: np.ndarray
    sample_rate: float = 20e6

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1:
            raise ValueError("IqSignal samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("IqSignal samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2)) if self.samples.size else 0.0


def _pam_levels(bits: np.ndarray) -> np.ndarray:
    """Gray PAM amplitude for bit columns (sign bit first), unnormalized.

    Recursion ``a = (1 - 2 b0) * (2**(m-1) - a_rest)`` gives levels
    {1, 3, ..., 2**m - 1} with bit 0 on the positive side.
    """
    m = bits.shape[1]
    sign = 1 - 2 * bits[:, 0].astype(np.int64)
    if m == 1:
        return sign
    return sign * (2 ** (m - 1) - _pam_levels(bits[:, 1:]))


def map_bits_to_symbols(bits: Sequence[int] | np.ndarray, mod: ModClass) -> np.ndarray:
    """Gray-mapped, unit-average-energy constellation symbols.

    Bit 0 maps to the positive axis. In-phase amplitude uses the even-indexed
    bits of each symbol group, quadrature the odd-indexed ones (the LTE
    QAM convention).
    """
    mod = ModClass(mod)
    if mod == ModClass.NoData:
        raise ValueError("NoData blocks carry no symbols")
    bps = BITS_PER_SYMBOL[mod]
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size % bps:
        raise ValueError(f"{bits.size} bits is not a multiple of {bps} bits per symbol for {mod.name}")
    if np.any(bits > 1):
        raise ValueError("bits must be 0 or 1")
    groups = bits.reshape(-1, bps)
    if mod == ModClass.BPSK:
        return (1.0 - 2.0 * groups[:, 0]).astype(np.complex128)
    i_amp = _pam_levels(groups[:, 0::2])
    q_amp = _pam_levels(groups[:, 1::2])
    m = bps // 2
    # mean squared PAM level per axis is (4**m - 1) / 3
    norm = math.sqrt(2 * (4 ** m - 1) / 3)
    return (i_amp + 1j * q_amp) / norm


def constellation(mod: ModClass) -> tuple[np.ndarray, np.ndarray]:
    """All points of ``mod`` with their bit labels, ordered by integer label."""
    bps = BITS_PER_SYMBOL[ModClass(mod)]
    labels = np.arange(2 ** bps)
    bits = ((labels[:, None] >> np.arange(bps - 1, -1, -1)) & 1).astype(np.uint8)
    return map_bits_to_symbols(bits.ravel(), mod), bits


def partition_grid(fft_size: int, n_symbols: int, min_f: int = DEFAULT_MIN_F,
                   min_t: int = DEFAULT_MIN_T, seed: int = 0,
                   class_probs: Sequence[float] = BASE_CLASS_PROBS,
                   p_stop: float = P_STOP) -> list[RbAllocation]:
    """Random guillotine tiling of the ``fft_size x n_symbols`` grid.

    Splits alternate between the frequency and time axis with depth (falling
    back to the other axis when the preferred one cannot hold two blocks of
    minimum size). Cut points are uniform over the valid cuts. A block stops
    splitting once it is unsplittable, or with probability ``p_stop`` once
    both its sides are at most twice the minimum. Each leaf then gets a class
    drawn from ``class_probs`` (indexed by class code).
    """
    if not (1 <= min_f <= fft_size and 1 <= min_t <= n_symbols):
        raise ValueError(f"minimum block {min_f}x{min_t} does not fit grid {fft_size}x{n_symbols}")
    probs = np.asarray(class_probs, dtype=float)
    if probs.shape != (N_CLASSES,) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0):
        raise ValueError(f"class_probs must be {N_CLASSES} non-negative weights summing to 1")
    rng = make_rng(seed)
    leaves = []
    stack = [(0, fft_size, 0, n_symbols, 0)]
    while stack:
        f0, f1, t0, t1, depth = stack.pop()
        nf, nt = f1 - f0, t1 - t0
        can_f, can_t = nf >= 2 * min_f, nt >= 2 * min_t
        if not (can_f or can_t):
            leaves.append((f0, f1, t0, t1))
            continue
        if nf <= 2 * min_f and nt <= 2 * min_t and rng.random() < p_stop:
            leaves.append((f0, f1, t0, t1))
            continue
        split_f = can_f if depth % 2 == 0 else not can_t
        if split_f:
            cut = f0 + int(rng.integers(min_f, nf - min_f + 1))
            parts = [(f0, cut, t0, t1), (cut, f1, t0, t1)]
        else:
            cut = t0 + int(rng.integers(min_t, nt - min_t + 1))
            parts = [(f0, f1, t0, cut), (f0, f1, cut, t1)]
        # push second half first so the first half is expanded first
        for part in reversed(parts):
            stack.append((*part, depth + 1))
    codes = rng.choice(N_CLASSES, size=len(leaves), p=probs / probs.sum())
    return [RbAllocation(*box, ModClass(int(c))) for box, c in zip(leaves, codes)]


def check_tiling(alloc: Sequence[RbAllocation], fft_size: int, n_symbols: int) -> None:
    """Raise ValueError unless ``alloc`` tiles the grid exactly once."""
    cover = np.zeros((n_symbols, fft_size), dtype=np.int32)
    for a in alloc:
        _check_bounds(a, fft_size, n_symbols)
        cover[a.t0:a.t1, a.f0:a.f1] += 1
    if np.any(cover != 1):
        raise ValueError("allocations overlap or leave grid cells uncovered")


def _check_bounds(a: RbAllocation, fft_size: int, n_symbols: int) -> None:
    if not (0 <= a.f0 < a.f1 <= fft_size and 0 <= a.t0 < a.t1 <= n_symbols):
        raise ValueError(f"allocation {a.to_list()} outside {fft_size}x{n_symbols} grid")


def label_grid(spec: FrameSpec, alloc: Sequence[RbAllocation]) -> np.ndarray:
    """Class code per (symbol, subcarrier index); unallocated cells are NoData."""
    grid = np.zeros((spec.n_symbols, spec.fft_size), dtype=np.uint8)
    for a in alloc:
        _check_bounds(a, spec.fft_size, spec.n_symbols)
        grid[a.t0:a.t1, a.f0:a.f1] = int(a.mod)
    return grid


def resource_grid(spec: FrameSpec, alloc: Sequence[RbAllocation], seed: int) -> np.ndarray:
    """Complex symbols per (symbol, subcarrier index) with i.i.d. uniform bits per block."""
    rng = make_rng(seed)
    grid = np.zeros((spec.n_symbols, spec.fft_size), dtype=np.complex128)
    for a in alloc:
        _check_bounds(a, spec.fft_size, spec.n_symbols)
        if a.mod == ModClass.NoData:
            continue
        n_sym = a.area
        bits = rng.integers(0, 2, size=n_sym * BITS_PER_SYMBOL[a.mod], dtype=np.uint8)
        grid[a.t0:a.t1, a.f0:a.f1] = map_bits_to_symbols(bits, a.mod).reshape(a.t1 - a.t0, a.f1 - a.f0)
    return grid


def modulate_grid(grid: np.ndarray, cp_len: int) -> np.ndarray:
    """Unitary inverse DFT of each symbol row plus cyclic prefix, concatenated."""
    n_symbols, fft_size = grid.shape
    bins = np.fft.ifftshift(grid, axes=1)
    body = np.fft.ifft(bins, axis=1) * math.sqrt(fft_size)
    if cp_len:
        body = np.concatenate([body[:, fft_size - cp_len:], body], axis=1)
    return body.reshape(-1)


def synthesize(spec: FrameSpec, alloc: Sequence[RbAllocation], seed: int) -> IqSignal:
    grid = resource_grid(spec, alloc, seed)
    return IqSignal(modulate_grid(grid, spec.cp_len), spec.sample_rate)
