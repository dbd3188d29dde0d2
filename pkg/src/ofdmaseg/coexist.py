"""Two-network coexistence toy study: path loss, SINR and BER under BPSK interference.

Two links share a channel. Each receiver's noise floor is solved from its
standalone SNR, then the other link's transmitter is added as interference.
``ber_sim`` then measures how a (possibly phase-rotated) QPSK link fares
against a BPSK interferer at a given power ratio.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np

from ._rng import derive_seed, make_rng
from .waveform import ModClass, constellation

DETECTORS = ("naive", "interference-aware")
_Z95 = NormalDist().inv_cdf(0.975)


@dataclass(frozen=True)
class CoexScenario:
    gamma: float = 2.0
    wavelength_m: float = 0.125
    tx_power_mw: float = 100.0
    d_ran1_m: float = 10.0            # RAN1 transmitter -> RAN1 receiver
    d_ran2_m: float = 15.0            # RAN2 transmitter -> RAN2 receiver
    d_ran2tx_ran1rx_m: float = 15.0
    d_ran1tx_ran2rx_m: float = 29.0
    snr1_db: float = 8.0              # standalone SNRs
    snr2_db: float = 4.5
    interferer_gain: float = 1.0      # linear scale on both cross links

    def __post_init__(self):
        for name in ("gamma", "wavelength_m", "tx_power_mw", "d_ran1_m", "d_ran2_m",
                     "d_ran2tx_ran1rx_m", "d_ran1tx_ran2rx_m"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if not (math.isfinite(self.snr1_db) and math.isfinite(self.snr2_db)):
            raise ValueError("standalone SNRs must be finite")
        if not (math.isfinite(self.interferer_gain) and self.interferer_gain >= 0):
            raise ValueError("interferer_gain must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def path_loss_db(d: float, gamma: float = 2.0, wavelength: float = 0.125) -> float:
    """``10 gamma log10(4 pi d / wavelength)``."""
    if not (d > 0 and wavelength > 0 and gamma > 0):
        raise ValueError("distance, wavelength and exponent must be positive")
    return 10.0 * gamma * math.log10(4.0 * math.pi * d / wavelength)


def _dbm(mw: float) -> float:
    return 10.0 * math.log10(mw) if mw > 0 else -math.inf


def _mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def _receiver(scn: CoexScenario, d_sig: float, d_int: float, snr_db: float) -> dict:
    p_dbm = _dbm(scn.tx_power_mw)
    signal = p_dbm - path_loss_db(d_sig, scn.gamma, scn.wavelength_m)
    noise = signal - snr_db
    interference_mw = scn.interferer_gain * _mw(p_dbm - path_loss_db(d_int, scn.gamma, scn.wavelength_m))
    noise_mw = _mw(noise)
    if not noise_mw > 0:
        raise ValueError("standalone SNR implies a non-positive noise power")
    sinr_lin = _mw(signal) / (interference_mw + noise_mw)
    return {
        "signal_dbm": signal,
        "interference_dbm": _dbm(interference_mw),
        "noise_dbm": noise,
        "snr_db": snr_db,
        "sinr_db": 10.0 * math.log10(sinr_lin),
        "interference_to_signal": interference_mw / _mw(signal),
    }


def sinr(scn: CoexScenario = CoexScenario()) -> dict:
    """Standalone SNR and coexistence SINR at both receivers."""
    return {
        "ran1": _receiver(scn, scn.d_ran1_m, scn.d_ran2tx_ran1rx_m, scn.snr1_db),
        "ran2": _receiver(scn, scn.d_ran2_m, scn.d_ran1tx_ran2rx_m, scn.snr2_db),
    }


@dataclass(frozen=True)
class Interferer:
    power_ratio: float                 # interferer / signal symbol power, linear
    phase_rad: float = 0.0
    modulation: ModClass = ModClass.BPSK

    def __post_init__(self):
        if not (math.isfinite(self.power_ratio) and self.power_ratio >= 0):
            raise ValueError("power_ratio must be >= 0")


def scenario_interferer(scn: CoexScenario = CoexScenario(), receiver: str = "ran1") -> Interferer:
    return Interferer(sinr(scn)[receiver]["interference_to_signal"])


def qpsk_ber_closed_form(snr_db: float) -> float:
    """Gray QPSK bit error rate at symbol SNR ``Es/N0``: ``Q(sqrt(Es/N0))``."""
    return 0.5 * math.erfc(math.sqrt(10.0 ** (snr_db / 10.0) / 2.0))


def wilson_interval(errors: int, n: int, z: float = _Z95) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("n must be positive")
    p = errors / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class BerPoint:
    snr_db: float
    ber: float
    ci_low: float
    ci_high: float
    bit_errors: int
    n_bits: int


def _ber_point(args) -> BerPoint:
    mod, rotation, interferer, snr_db, n_symbols, seed, detector = args
    points, labels = constellation(mod)
    points = points * np.exp(1j * rotation)
    rng = make_rng(seed)
    sym = rng.integers(0, points.size, n_symbols)
    rx = points[sym]
    if interferer is not None and interferer.power_ratio > 0:
        ipts, _ = constellation(interferer.modulation)
        ipts = ipts * math.sqrt(interferer.power_ratio) * np.exp(1j * interferer.phase_rad)
        isym = rng.integers(0, ipts.size, n_symbols)
        rx = rx + ipts[isym]
    else:
        ipts = np.zeros(1, dtype=complex)
        # keep the noise stream aligned with the interference branch
        rng.integers(0, 2, n_symbols)
    sigma = math.sqrt(10.0 ** (-snr_db / 10.0) / 2.0)
    rx = rx + sigma * (rng.standard_normal(n_symbols) + 1j * rng.standard_normal(n_symbols))
    det = np.empty(n_symbols, dtype=np.int64)
    n0 = 2.0 * sigma * sigma
    for lo in range(0, n_symbols, 1 << 14):
        r = rx[lo:lo + (1 << 14)]
        if detector == "naive":
            det[lo:lo + r.size] = np.argmin(np.abs(r[:, None] - points[None, :]), axis=1)
        else:
            d2 = np.abs(r[:, None, None] - points[None, :, None] - ipts[None, None, :]) ** 2
            d2 -= d2.min(axis=(1, 2), keepdims=True)
            # likelihood summed over the equiprobable interferer symbols
            det[lo:lo + r.size] = np.argmax(np.exp(-d2 / n0).sum(axis=2), axis=1)
    errors = int(np.sum(labels[sym] != labels[det]))
    n_bits = n_symbols * labels.shape[1]
    lo, hi = wilson_interval(errors, n_bits)
    return BerPoint(float(snr_db), errors / n_bits, lo, hi, errors, n_bits)


def ber_sim(modulation: ModClass = ModClass.QPSK, rotation_rad: float = 0.0, interferer: Interferer | None = None,
            snr_grid: Sequence[float] = tuple(range(0, 13, 2)), n_symbols: int = 100_000, seed: int = 0,
            detector: str = "interference-aware", jobs: int = 1) -> list[BerPoint]:
    """Monte Carlo BER per SNR point (symbol SNR against unit-energy symbols).

    The transmitted constellation is rotated by ``rotation_rad``. The naive
    detector picks the nearest rotated point; the interference-aware one scores
    each signal symbol by its Gaussian likelihood summed over the interferer's
    symbols (the composite constellation marginalized to the signal) and
    picks the best. Point ``i`` uses its own seed derived from
    ``(seed, i)``.
    """
    if detector not in DETECTORS:
        raise ValueError(f"unknown detector {detector!r}; choose from {DETECTORS}")
    if n_symbols < 10_000:
        raise ValueError("need at least 10^4 symbols per point")
    mod = ModClass(modulation)
    if mod == ModClass.NoData:
        raise ValueError("NoData is not a modulation")
    work = [(mod, rotation_rad, interferer, float(s), n_symbols, derive_seed(seed, i), detector)
            for i, s in enumerate(snr_grid)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_ber_point, work))
    return [_ber_point(w) for w in work]


def write_ber_csv(path, curves: dict[str, Sequence[BerPoint]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db", "ber", "ci_low", "ci_high", "config"])
        for tag, pts in curves.items():
            for p in pts:
                w.writerow([repr(p.snr_db), repr(p.ber), repr(p.ci_low), repr(p.ci_high), tag])
