"""Run every CLI stage at toy scale, then rerun each from its config.lock."""

import hashlib
from pathlib import Path

from ofdmaseg.cli import LOCK_NAME, main


def tree_hash(root, exclude=()) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def toy_stages(base: Path) -> dict:
    """Command lines for each stage; later stages read earlier outputs."""
    d = base / "first"
    return {
        "synth": ["synth", "--out", str(d / "synth"), "--index", "3", "--seed", "2"],
        "dataset": ["dataset", "--out", str(d / "dataset"), "--n-base", "6", "--n-extra", "3", "--seed", "4",
                    "--jobs", "1"],
        "train": ["train", "--out", str(d / "train"), "--data", str(d / "dataset"), "--epochs", "1",
                  "--batch-size", "4", "--jobs", "1"],
        "eval": ["eval", "--out", str(d / "eval"), "--model", str(d / "train" / "model.ckpt"),
                 "--data", str(d / "dataset"), "--split", "train"],
        "sweep": ["sweep", "--out", str(d / "sweep"), "--model", str(d / "train" / "model.ckpt"), "--axis", "cp",
                  "--values", "0,4", "--train-domains", "0", "--n-per-domain", "1", "--jobs", "1"],
        "infer": ["infer", "--out", str(d / "infer"), "--model", str(d / "train" / "model.ckpt"),
                  "--input", str(d / "synth" / "iq.bin")],
        "coexist": ["coexist", "--out", str(d / "coexist"), "--n-symbols", "10000", "--snr-grid", "0,6",
                    "--jobs", "1"],
    }


def run_and_rerun(base: Path) -> dict:
    """Per stage: (exit codes, first hash, rerun hash)."""
    results = {}
    for stage, argv in toy_stages(base).items():
        out = Path(argv[argv.index("--out") + 1])
        code1 = main(argv)
        rerun = base / "rerun" / stage
        code2 = main([stage, "--config", str(out / LOCK_NAME), "--out", str(rerun)])
        results[stage] = ((code1, code2), tree_hash(out), tree_hash(rerun))
    return results
