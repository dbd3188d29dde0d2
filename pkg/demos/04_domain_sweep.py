"""Train on a few FFT sizes, then sweep accuracy over in- and out-of-domain FFT sizes.

Toy scale; the full experiment uses the CLI (`ofdmaseg train` / `ofdmaseg sweep`).

Usage: python demos/04_domain_sweep.py [algo]   (erm, swad or mldg)
"""

import sys
from pathlib import Path

from ofdmaseg import dataset, evalkit, segnet, trainers

algo = sys.argv[1] if len(sys.argv) > 1 else "erm"
root = Path("demo_out/sweep")
train_ffts, test_ffts, cp = [16, 32, 64], [8, 16, 32, 48, 64, 96, 128], 8

train_sets, val_sets = [], []
for i, fft in enumerate(train_ffts):
    m = dataset.build_dataset(12, 12, dataset.DomainSpec(fft, cp), seed=i, out_dir=root / f"train_{fft}")
    train_sets.append(dataset.SplitSource(m, "train"))
    val_sets.append(dataset.SplitSource(m, "train"))  # toy sets are too small for a val split

tests = {}
for fft in test_ffts:
    m = dataset.build_dataset(4, 0, dataset.DomainSpec(fft, cp), seed=100 + fft, out_dir=root / f"test_{fft}",
                              fractions=(0.0, 0.0, 1.0))
    tests[fft] = dataset.SplitSource(m, "test")

cfg = trainers.TrainConfig.dg_protocol(epochs=2, algorithm=algo, swad_switch_epoch=1)
params = segnet.init_params(3, seed=0)
res = trainers.train(params, cfg, train_sets, val_sets, select_sources=list(tests.values()))
rows, summary = evalkit.domain_sweep(res.params, tests, test_ffts, train_ffts, axis="fft")
for r in rows:
    print(f"FFT {r.value:4d} ({r.split:3s}) overall {r.accuracy:.3f}")
print(f"in-domain mean {summary['in_domain']:.3f}; out-of-domain mean {summary['out_of_domain']:.3f}")
evalkit.write_sweep_csv(root / "sweep.csv", rows)
