"""Synthesize one impaired OFDMA frame, render its spectrogram and mask, save PNGs.

Usage: python demos/01_synth_spectrogram.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from ofdmaseg import dataset, evalkit
from ofdmaseg.waveform import ModClass

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/synth")
out.mkdir(parents=True, exist_ok=True)

record = dataset.sample_record(index=0, root_seed=42, subset="base", domain=dataset.DomainSpec(64, 8))
image, mask, scale, realized = dataset.render_record(record)
print(f"{len(record['allocations'])} resource blocks, CFO {record['impairment']['cfo_hz']:.0f} Hz, "
      f"clock offset {record['impairment']['clock_offset']:.2e}, SNR {record['impairment']['snr_db']} dB")
for code in ModClass:
    print(f"  {code.name:7s} {np.mean(mask == int(code)):6.1%} of pixels")

dataset.write_png_rgb(out / "image.png", image)
dataset.write_png_mask(out / "mask.png", mask)
evalkit.save_overlay(out / "truth_overlay.png", evalkit.overlay(image, mask))
print(f"image scale {scale:.3g}; wrote {out}/image.png, mask.png, truth_overlay.png")
