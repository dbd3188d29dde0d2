"""Channel impairments applied in a fixed order: fading, CFO, clock offset, AWGN."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _rng
from .waveform import IqSignal

CFO_LIMIT_HZ = 312_500.0
CLOCK_OFFSET_LIMIT = 0.005
DEFAULT_SNR_DB = 15.0

RESAMPLER_TAPS = 16
RESAMPLER_BETA = 8.0


def tgn_b_taps(sample_rate: float = 20e6, n_paths: int = 9, spacing_s: float = 10e-9,
               decay_db: float = 5.4) -> list[tuple[int, float]]:
    """Tapped-delay-line stand-in for the TGn model-B delay profile.

    Nine paths 10 ns apart with an exponential profile falling ``decay_db``
    per path (the slope of the model-B first cluster), each path binned to
    the nearest integer sample delay and the bins normalised to unit power.
    At 20 MHz this gives delays {0, 1, 2} samples.
    """
    delays = np.rint(np.arange(n_paths) * spacing_s * sample_rate).astype(int)
    powers = 10.0 ** (-decay_db * np.arange(n_paths) / 10.0)
    binned: dict[int, float] = {}
    for d, p in zip(delays, powers):
        binned[int(d)] = binned.get(int(d), 0.0) + float(p)
    total = sum(binned.values())
    return [(d, p / total) for d, p in sorted(binned.items())]


@dataclass
class ImpairmentSpec:
    snr_db: float = DEFAULT_SNR_DB
    cfo_hz: float = 0.0
    clock_offset: float = 0.0
    fading_taps: list = field(default_factory=tgn_b_taps)
    seed: int = 0
    noise: bool = True

    def __post_init__(self):
        self.fading_taps = [(int(d), float(p)) for d, p in self.fading_taps]
        if self.fading_taps:
            total = sum(p for _, p in self.fading_taps)
            if not math.isclose(total, 1.0, rel_tol=1e-9):
                raise ValueError(f"fading tap powers sum to {total}, expected 1")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite; set noise=False to disable AWGN")
        if not abs(self.clock_offset) < 0.01:
            raise ValueError(f"|clock_offset| must be < 0.01, got {self.clock_offset}")

    def to_dict(self) -> dict:
        return {"snr_db": self.snr_db, "cfo_hz": self.cfo_hz, "clock_offset": self.clock_offset,
                "fading_taps": [list(t) for t in self.fading_taps], "seed": self.seed,
                "noise": self.noise}

    @classmethod
    def from_dict(cls, d: dict) -> "ImpairmentSpec":
        return cls(snr_db=d["snr_db"], cfo_hz=d["cfo_hz"], clock_offset=d["clock_offset"],
                   fading_taps=[tuple(t) for t in d["fading_taps"]], seed=d["seed"],
                   noise=d.get("noise", True))


def draw_impairments(seed: int, snr_db: float = DEFAULT_SNR_DB,
                     fading_taps: Sequence[tuple[int, float]] | None = None) -> ImpairmentSpec:
    """Draw CFO and clock offset uniformly from their open intervals."""
    rng = _rng.make_rng(seed, _rng.STAGE_IMPAIR)
    cfo = float(rng.uniform(-CFO_LIMIT_HZ, CFO_LIMIT_HZ))
    delta = float(rng.uniform(-CLOCK_OFFSET_LIMIT, CLOCK_OFFSET_LIMIT))
    taps = tgn_b_taps() if fading_taps is None else list(fading_taps)
    return ImpairmentSpec(snr_db=snr_db, cfo_hz=cfo, clock_offset=delta, fading_taps=taps, seed=seed)


def fading_gains(taps: Sequence[tuple[int, float]], seed: int) -> np.ndarray:
    rng = _rng.make_rng(seed, _rng.STAGE_FADING)
    powers = np.array([p for _, p in taps], dtype=float)
    g = rng.standard_normal(len(taps)) + 1j * rng.standard_normal(len(taps))
    return g * np.sqrt(powers / 2.0)


def apply_fading(sig: IqSignal, taps: Sequence[tuple[int, float]], seed: int) -> IqSignal:
    """Block-fading tapped delay line; output truncated to the input length."""
    if not taps:
        raise ValueError("fading requires at least one tap")
    if any(d < 0 for d, _ in taps):
        raise ValueError("tap delays must be non-negative")
    gains = fading_gains(taps, seed)
    x = sig.samples
    y = np.zeros_like(x)
    for (d, _), g in zip(taps, gains):
        if d < x.size:
            y[d:] += g * x[:x.size - d]
    return IqSignal(y, sig.sample_rate)


def apply_cfo(sig: IqSignal, cfo_hz: float) -> IqSignal:
    if not abs(cfo_hz) < sig.sample_rate / 2:
        raise ValueError(f"|cfo_hz| must be below Nyquist ({sig.sample_rate / 2} Hz)")
    n = np.arange(len(sig))
    return IqSignal(sig.samples * np.exp(2j * np.pi * cfo_hz * n / sig.sample_rate), sig.sample_rate)


def _kaiser(t: np.ndarray, half_width: float, beta: float) -> np.ndarray:
    r = np.clip(t / half_width, -1.0, 1.0)
    return np.i0(beta * np.sqrt(1.0 - r * r)) / np.i0(beta)


def resample(x: np.ndarray, times: np.ndarray, n_taps: int = RESAMPLER_TAPS,
             beta: float = RESAMPLER_BETA) -> np.ndarray:
    """Windowed-sinc interpolation of ``x`` at fractional sample ``times``.

    Each output uses the ``n_taps`` input samples around ``floor(t)``;
    samples outside the record count as zero.
    """
    half = n_taps // 2
    base = np.floor(times).astype(np.int64)
    frac = times - base
    offsets = np.arange(-half + 1, half + 1)
    idx = base[:, None] + offsets[None, :]
    tau = frac[:, None] - offsets[None, :]
    h = np.sinc(tau) * _kaiser(tau, half, beta)
    valid = (idx >= 0) & (idx < x.size)
    xs = np.where(valid, x[np.clip(idx, 0, x.size - 1)], 0.0)
    return np.sum(xs * h, axis=1)


def apply_clock_offset(sig: IqSignal, delta: float) -> IqSignal:
    """Sample the input at instants ``n * (1 + delta)``.

    A tone at f comes out at ``f * (1 + delta)``. The resampled record
    (``floor(len / (1 + delta))`` samples) is zero-padded or truncated back
    to the input length.
    """
    if not abs(delta) < 0.01:
        raise ValueError(f"|delta| must be < 0.01, got {delta}")
    n_in = len(sig)
    n_out = int(math.floor(n_in / (1.0 + delta)))
    times = np.arange(min(n_out, n_in)) * (1.0 + delta)
    y = np.zeros(n_in, dtype=np.complex128)
    y[:times.size] = resample(sig.samples, times)
    return IqSignal(y, sig.sample_rate)


def add_awgn(sig: IqSignal, snr_db: float, seed: int) -> IqSignal:
    """Add circular complex Gaussian noise at ``snr_db`` below the measured power."""
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    p = sig.power()
    if p <= 0:
        raise ValueError("cannot set SNR on an all-zero signal")
    var = p / 10.0 ** (snr_db / 10.0)
    rng = _rng.make_rng(seed, _rng.STAGE_NOISE)
    n = len(sig)
    noise = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * math.sqrt(var / 2.0)
    return IqSignal(sig.samples + noise, sig.sample_rate)


def impair(sig: IqSignal, spec: ImpairmentSpec) -> tuple[IqSignal, dict]:
    """Run fading -> CFO -> clock offset -> AWGN and report the realized draws."""
    out = sig
    gains = None
    if spec.fading_taps:
        gains = fading_gains(spec.fading_taps, spec.seed)
        out = apply_fading(out, spec.fading_taps, spec.seed)
    if spec.cfo_hz:
        out = apply_cfo(out, spec.cfo_hz)
    if spec.clock_offset:
        out = apply_clock_offset(out, spec.clock_offset)
    if spec.noise:
        out = add_awgn(out, spec.snr_db, spec.seed)
    realized = {
        "cfo_hz": spec.cfo_hz,
        "clock_offset": spec.clock_offset,
        "snr_db": spec.snr_db if spec.noise else None,
        "fading_gains": [] if gains is None else [[float(g.real), float(g.imag)] for g in gains],
    }
    return out, realized


def no_impairments(seed: int = 0) -> ImpairmentSpec:
    """Every stage off; ``impair`` is then the identity."""
    return replace(ImpairmentSpec(seed=seed), fading_taps=[], noise=False)
