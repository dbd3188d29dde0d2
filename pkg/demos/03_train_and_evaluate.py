"""Build a small dataset, train the segmentation model with ERM, report per-class recall.

Small by default so it finishes in minutes on one CPU; raise the sizes for
meaningful accuracies.

Usage: python demos/03_train_and_evaluate.py [n_base] [epochs]
"""

import sys
from pathlib import Path

from ofdmaseg import dataset, evalkit, segnet, trainers

n_base = int(sys.argv[1]) if len(sys.argv) > 1 else 40
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 3
root = Path("demo_out/train")

m = dataset.build_dataset(n_base, 2 * n_base, seed=0, out_dir=root / "data")
train, val = dataset.SplitSource(m, "train"), dataset.SplitSource(m, "val")
print(f"dataset: {len(train)} train / {len(val)} val samples")

params = segnet.init_params(3, seed=0)
print(f"model: {segnet.count_params(params)} parameters")
cfg = trainers.TrainConfig.main_protocol(epochs=epochs)
res = trainers.train_erm(params, train, val, cfg, log_path=root / "train_log.csv")
for row in res.history:
    print(f"epoch {row['epoch']}: train {row['train_loss']:.4f}  val {row['val_loss']:.4f}")

report = evalkit.evaluate_source(res.params, val if len(val) else train)
for name, r, ref in zip(evalkit.CLASS_NAMES, report.recall, evalkit.REFERENCE_CLASS_ACCURACY.values()):
    print(f"{name:7s} recall {r:6.3f}   (reference {ref:.3f})")
print(f"overall (class mean) {report.overall:.3f}; pixel accuracy {report.pixel_accuracy:.3f}")
