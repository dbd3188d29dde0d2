"""Rectangular-window STFT, 8-bit I/Q/amplitude image encoding and class masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .waveform import FrameSpec, IqSignal, ModClass, RbAllocation, label_grid

IMAGE_HEIGHT = 256
IMAGE_WIDTH = 300


@dataclass(frozen=True)
class StftConfig:
    fft_len: int = 256
    window_len: int = 256
    window_shift: int = 8
    window: str = "rectangular"

    def __post_init__(self):
        if not 1 <= self.window_len <= self.fft_len:
            raise ValueError("window_len must lie in [1, fft_len]")
        if self.window_shift < 1:
            raise ValueError("window_shift must be >= 1")
        if self.window != "rectangular":
            raise ValueError("only the rectangular window is supported")

    def n_columns(self, signal_len: int) -> int:
        return (signal_len - self.window_len) // self.window_shift + 1

    def span(self, n_columns: int) -> int:
        """Samples needed for ``n_columns`` columns."""
        return (n_columns - 1) * self.window_shift + self.window_len


@dataclass
class Spectrogram:
    """Complex STFT; row 0 is -fs/2, row fft_len//2 is DC."""

    values: np.ndarray
    sample_rate: float
    config: StftConfig = field(default_factory=StftConfig)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class LabeledSample:
    image: np.ndarray            # (3, H, W) uint8: R=Re, G=Im, B=|.|
    mask: np.ndarray | None      # (H, W) uint8 class codes, None for unlabeled captures
    meta: dict


def stft(sig: IqSignal | np.ndarray, cfg: StftConfig = StftConfig(), sample_rate: float | None = None) -> Spectrogram:
    """Column m is the L-point DFT of samples ``[mK, mK + J)``, rows fftshifted."""
    if isinstance(sig, IqSignal):
        x, fs = sig.samples, sig.sample_rate
    else:
        x, fs = np.asarray(sig, dtype=np.complex128), (sample_rate or 20e6)
    if x.size < cfg.window_len:
        raise ValueError(f"signal of {x.size} samples is shorter than the {cfg.window_len}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)[::cfg.window_shift]
    spec = np.fft.fft(frames, n=cfg.fft_len, axis=1)
    return Spectrogram(np.fft.fftshift(spec, axes=1).T.copy(), fs, cfg)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def to_image(spec: Spectrogram | np.ndarray) -> tuple[np.ndarray, float]:
    """Encode as (3, H, W) uint8 with one shared max-abs scale per image."""
    z = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    if not np.all(np.isfinite(z)):
        raise ValueError("spectrogram has non-finite entries")
    s = float(max(np.max(np.abs(z.real), initial=0.0), np.max(np.abs(z.imag), initial=0.0)))
    if s == 0.0:
        s = 1.0
    r = _round_half_up(255.0 * (z.real / s + 1.0) / 2.0)
    g = _round_half_up(255.0 * (z.imag / s + 1.0) / 2.0)
    b = _round_half_up(255.0 * np.abs(z) / (s * math.sqrt(2.0)))
    img = np.stack([r, g, b]).clip(0, 255).astype(np.uint8)
    return img, s


def from_image(image: np.ndarray, scale: float) -> np.ndarray:
    """Approximate complex values back from the R/G channels."""
    img = np.asarray(image, dtype=float)
    return scale * ((2.0 * img[0] / 255.0 - 1.0) + 1j * (2.0 * img[1] / 255.0 - 1.0))


def cfo_row_shift(cfo_hz: float, sample_rate: float, fft_len: int = 256) -> int:
    return int(_round_half_up(np.float64(cfo_hz / (sample_rate / fft_len))))


def make_mask(spec: FrameSpec, alloc: Sequence[RbAllocation], cfo_hz: float = 0.0,
              n_columns: int = IMAGE_WIDTH, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Pixel labels aligned with ``stft`` of the synthesized frame.

    Row r (signed bin b = r - L/2 - cfo shift) belongs to subcarrier
    ``k = floor(b * N / L + 1/2)`` wrapped onto ``[-N/2, N/2)``; with N=64 and
    L=256 subcarrier k covers rows [128 + 4k - 2, 128 + 4k + 2). Column m
    takes the OFDM symbol holding its window-centre sample ``mK + J/2``;
    columns past the frame are NoData.
    """
    L = cfg.fft_len
    N = spec.fft_size
    grid = label_grid(spec, alloc)
    shift = cfo_row_shift(cfo_hz, spec.sample_rate, L)
    b = np.arange(L) - L // 2 - shift
    k = np.floor(b * N / L + 0.5).astype(np.int64)
    sub_idx = np.mod(k + N // 2, N)
    centre = np.arange(n_columns) * cfg.window_shift + cfg.window_len // 2
    sym = centre // spec.symbol_len
    in_frame = sym < spec.n_symbols
    mask = np.full((L, n_columns), int(ModClass.NoData), dtype=np.uint8)
    cols = np.nonzero(in_frame)[0]
    mask[:, cols] = grid[sym[cols]][:, sub_idx].T
    return mask


def spectrogram_image(sig: IqSignal, n_columns: int = IMAGE_WIDTH,
                      cfg: StftConfig = StftConfig()) -> tuple[np.ndarray, float]:
    """Image of the first ``n_columns`` STFT columns (fewer if the record is short)."""
    span = cfg.span(n_columns)
    x = sig.samples[:span]
    return to_image(stft(IqSignal(x, sig.sample_rate), cfg))
