"""Coexistence toy study: SINR at the two receivers and QPSK BER with and without rotation.

Usage: python demos/02_coexistence.py [n_symbols]
"""

import math
import sys

from ofdmaseg import coexist

n = int(sys.argv[1]) if len(sys.argv) > 1 else 100_000
for rx, r in coexist.sinr().items():
    print(f"{rx}: SNR {r['snr_db']:.1f} dB alone, SINR {r['sinr_db']:.2f} dB with the other link on")

intf = coexist.scenario_interferer()
print(f"interferer/signal power ratio at RAN1: {intf.power_ratio:.3f}")
grid = list(range(0, 13, 2))
curves = {
    "no interference": coexist.ber_sim(snr_grid=grid, n_symbols=n),
    "plain QPSK": coexist.ber_sim(rotation_rad=0.0, interferer=intf, snr_grid=grid, n_symbols=n),
    "rotated QPSK": coexist.ber_sim(rotation_rad=-math.pi / 6, interferer=intf, snr_grid=grid, n_symbols=n),
}
print("SNR dB  " + "  ".join(f"{k:>16s}" for k in curves))
for i, snr in enumerate(grid):
    print(f"{snr:6d}  " + "  ".join(f"{curves[k][i].ber:16.5f}" for k in curves))
