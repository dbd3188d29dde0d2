"""Reproducible labelled-spectrogram datasets on disk.

Layout::

    out_dir/header.json       global configuration (format version, sizes, class draws)
    out_dir/manifest.jsonl    one JSON record per sample, in sample-index order
    out_dir/img/NNNNNN.png    8-bit RGB spectrogram (R=Re, G=Im, B=|.|)
    out_dir/mask/NNNNNN.png   8-bit greyscale, raw class codes 0..4

Every record carries the seeds, frame numbering, impairment draws and block
allocations, so ``render_record`` can rebuild its two files from the record
alone.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import _rng
from .channel import ImpairmentSpec, draw_impairments, impair
from .spectro import IMAGE_WIDTH, LabeledSample, StftConfig, make_mask, spectrogram_image
from .waveform import (BASE_CLASS_PROBS, DEFAULT_MIN_F, DEFAULT_MIN_T, EXTRA_QAM_CLASS_PROBS, FrameSpec,
                       IqSignal, RbAllocation, partition_grid, synthesize)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.95, 0.04, 0.01)


class DatasetIOError(OSError):
    pass


class MalformedInputError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """OFDM numerology treated as one image domain."""

    fft_size: int = 64
    cp_len: int = 8

    def __post_init__(self):
        if not 8 <= self.fft_size <= 128:
            raise ValueError(f"fft_size must lie in [8, 128], got {self.fft_size}")
        if not 0 <= self.cp_len <= 16:
            raise ValueError(f"cp_len must lie in [0, 16], got {self.cp_len}")

    def frame_spec(self) -> FrameSpec:
        return FrameSpec.covering(self.fft_size, self.cp_len)

    def tag(self) -> str:
        return f"fft{self.fft_size}_cp{self.cp_len}"

    def to_dict(self) -> dict:
        return {"fft_size": self.fft_size, "cp_len": self.cp_len}


def split_counts(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> dict:
    """Validation and test sizes are floored; the remainder goes to training."""
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def assign_splits(n: int, seed: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> list[str]:
    counts = split_counts(n, fractions)
    perm = _rng.make_rng(seed, _rng.STAGE_SPLIT).permutation(n)
    tags = [""] * n
    bounds = np.cumsum([0, counts["train"], counts["val"], counts["test"]])
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        for i in perm[lo:hi]:
            tags[int(i)] = name
    return tags


def sample_record(index: int, root_seed: int, subset: str, domain: DomainSpec,
                  min_block: tuple[int, int] = (DEFAULT_MIN_F, DEFAULT_MIN_T), noise: bool = True) -> dict:
    """Draw everything that defines sample ``index``; no rendering."""
    frame = domain.frame_spec()
    seeds = {
        "partition": _rng.derive_seed(root_seed, index, _rng.STAGE_PARTITION),
        "bits": _rng.derive_seed(root_seed, index, _rng.STAGE_BITS),
        "impairment": _rng.derive_seed(root_seed, index, _rng.STAGE_IMPAIR),
    }
    probs = BASE_CLASS_PROBS if subset == "base" else EXTRA_QAM_CLASS_PROBS
    min_f = min(min_block[0], frame.fft_size)
    min_t = min(min_block[1], frame.n_symbols)
    alloc = partition_grid(frame.fft_size, frame.n_symbols, min_f, min_t, seeds["partition"], probs)
    imp = draw_impairments(seeds["impairment"])
    imp.noise = noise
    return {
        "id": f"{index:06d}",
        "index": index,
        "subset": subset,
        "seeds": seeds,
        "frame": frame.to_dict(),
        "impairment": imp.to_dict(),
        "allocations": [a.to_list() for a in alloc],
        "image": f"img/{index:06d}.png",
        "mask": f"mask/{index:06d}.png",
    }


def record_signal(record: dict) -> tuple[IqSignal, FrameSpec, list[RbAllocation], ImpairmentSpec, dict]:
    """Impaired baseband record plus the frame, blocks and impairments behind it."""
    frame = FrameSpec(**record["frame"])
    alloc = [RbAllocation.from_list(r) for r in record["allocations"]]
    imp = ImpairmentSpec.from_dict(record["impairment"])
    sig = synthesize(frame, alloc, record["seeds"]["bits"])
    if sig.power() == 0.0:
        # all-NoData frame: SNR undefined, keep it silent
        imp.noise = False
    out, realized = impair(sig, imp)
    return out, frame, alloc, imp, realized


def render_record(record: dict) -> tuple[np.ndarray, np.ndarray, float, dict]:
    """Image, mask, normalization scale and realized draws for a record."""
    out, frame, alloc, imp, realized = record_signal(record)
    image, scale = spectrogram_image(out)
    mask = make_mask(frame, alloc, imp.cfo_hz, n_columns=image.shape[2])
    return image, mask, scale, realized


def write_png_rgb(path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image.transpose(1, 2, 0)), mode="RGB").save(path, format="PNG")


def write_png_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(mask.astype(np.uint8)), mode="L").save(path, format="PNG")


def read_png_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"expected an RGB image, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()


def read_png_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"expected a greyscale mask, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def _write_sample(args) -> dict:
    record, out_dir = args
    image, mask, scale, realized = render_record(record)
    write_png_rgb(out_dir / record["image"], image)
    write_png_mask(out_dir / record["mask"], mask)
    return {**record, "scale": scale, "fading_gains": realized["fading_gains"]}


class DatasetManifest:
    def __init__(self, root, header: dict, records: list[dict]):
        self.root = Path(root)
        self.header = header
        self.records = records
        self._by_split = {s: [r["index"] for r in records if r["split"] == s] for s in SPLITS}
        self._by_index = {r["index"]: r for r in records}
        if len(self._by_index) != len(records):
            raise ValueError("duplicate sample indices in manifest")

    def __len__(self) -> int:
        return len(self.records)

    def split_indices(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return self._by_split[split]

    def record(self, index: int) -> dict:
        return self._by_index[index]

    @property
    def domain(self) -> DomainSpec:
        return DomainSpec(**self.header["domain"])

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        try:
            header = json.loads((root / "header.json").read_text(encoding="utf-8"))
            with open(root / "manifest.jsonl", encoding="utf-8") as fh:
                records = [json.loads(line) for line in fh if line.strip()]
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetIOError(f"cannot read dataset at {root}: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetIOError(f"{root}: unsupported dataset format {header.get('format_version')}")
        return cls(root, header, records)

    def check_files(self) -> None:
        for r in self.records:
            for key in ("image", "mask"):
                if not (self.root / r[key]).is_file():
                    raise DatasetIOError(f"sample {r['id']}: missing {key} file {r[key]}")


def build_dataset(n_base: int, n_extra_qam: int, domain: DomainSpec = DomainSpec(), seed: int = 0,
                  out_dir=".", jobs: int = 1, min_block: tuple[int, int] = (DEFAULT_MIN_F, DEFAULT_MIN_T),
                  fractions: Sequence[float] = DEFAULT_FRACTIONS, noise: bool = True) -> DatasetManifest:
    """Generate ``n_base`` four-class samples then ``n_extra_qam`` QAM-only ones.

    Base samples draw block classes with NoData 0.1 and the four modulations
    equally likely; extra samples use only NoData / 16-QAM / 64-QAM.
    """
    if n_base < 0 or n_extra_qam < 0 or n_base + n_extra_qam < 1:
        raise ValueError("need n_base, n_extra_qam >= 0 with at least one sample")
    if not isinstance(domain, DomainSpec):
        raise ValueError("domain must be a DomainSpec")
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    (out / "mask").mkdir(parents=True, exist_ok=True)
    n = n_base + n_extra_qam
    tags = assign_splits(n, seed, fractions)
    records = []
    for i in range(n):
        rec = sample_record(i, seed, "base" if i < n_base else "extra", domain, min_block, noise)
        rec["split"] = tags[i]
        records.append(rec)
    work = [(r, out) for r in records]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_write_sample, work, chunksize=8))
    else:
        records = [_write_sample(w) for w in work]
    header = {
        "format_version": FORMAT_VERSION,
        "n_base": n_base,
        "n_extra_qam": n_extra_qam,
        "seed": seed,
        "domain": domain.to_dict(),
        "frame": domain.frame_spec().to_dict(),
        "class_probs": {"base": list(BASE_CLASS_PROBS), "extra": list(EXTRA_QAM_CLASS_PROBS)},
        "min_block": list(min_block),
        "noise": noise,
        "stft": {"fft_len": 256, "window_len": 256, "window_shift": 8, "window": "rectangular"},
        "image": {"channels": 3, "height": 256, "width": IMAGE_WIDTH},
        "split_counts": split_counts(n, fractions),
    }
    (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")
    return DatasetManifest(out, header, records)


def load_sample(manifest: DatasetManifest, index: int) -> tuple[np.ndarray, np.ndarray]:
    rec = manifest.record(index)
    try:
        return read_png_rgb(manifest.root / rec["image"]), read_png_mask(manifest.root / rec["mask"])
    except (OSError, ValueError, SyntaxError) as exc:
        raise DatasetIOError(f"sample {rec['id']}: unreadable image or mask ({exc})") from exc


def load_batch(manifest: DatasetManifest, split: str, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Images as floats in [0, 1] (n, 3, H, W) and masks (n, H, W) of class codes.

    ``indices`` are sample indices and must all belong to ``split``.
    """
    members = set(manifest.split_indices(split))
    bad = [int(i) for i in indices if int(i) not in members]
    if bad:
        raise ValueError(f"samples {bad} are not in the {split!r} split")
    images, masks = [], []
    for i in indices:
        im, mk = load_sample(manifest, int(i))
        images.append(im)
        masks.append(mk)
    return np.stack(images).astype(np.float64) / 255.0, np.stack(masks).astype(np.int64)


class SplitSource:
    """Training-data view of one split; positions index the split's samples."""

    def __init__(self, manifest: DatasetManifest, split: str):
        self.manifest = manifest
        self.split = split
        self.indices = manifest.split_indices(split)

    def __len__(self) -> int:
        return len(self.indices)

    def batch(self, positions) -> tuple[np.ndarray, np.ndarray]:
        return load_batch(self.manifest, self.split, [self.indices[int(p)] for p in positions])


def export_iq(sig: IqSignal | np.ndarray, path) -> None:
    """Write interleaved little-endian float32 I/Q pairs."""
    x = sig.samples if isinstance(sig, IqSignal) else np.asarray(sig)
    inter = np.empty(2 * x.size, dtype="<f4")
    inter[0::2] = x.real
    inter[1::2] = x.imag
    inter.tofile(path)


def read_iq(path) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 2:
        raise MalformedInputError(f"{path}: odd number of float32 values ({raw.size})")
    if not np.all(np.isfinite(raw)):
        raise MalformedInputError(f"{path}: non-finite sample values")
    return raw[0::2].astype(np.float64) + 1j * raw[1::2].astype(np.float64)


def import_iq(path, sample_rate: float = 20e6, n_columns: int = IMAGE_WIDTH,
              cfg: StftConfig = StftConfig()) -> LabeledSample:
    """Spectrogram image of a raw capture, for inference (no mask)."""
    x = read_iq(path)
    if x.size < cfg.window_len:
        raise MalformedInputError(f"{path}: {x.size} samples is shorter than one {cfg.window_len}-sample window")
    image, scale = spectrogram_image(IqSignal(x, sample_rate), n_columns, cfg)
    return LabeledSample(image, None, {"source": os.fspath(path), "sample_rate": sample_rate,
                                       "n_samples": int(x.size), "scale": scale})
