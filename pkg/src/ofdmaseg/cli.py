"""Command-line entry point: ``ofdmaseg <subcommand> [flags]``.

Settings resolve as flags > ``OFDMASEG_<KEY>`` environment variables >
``--config`` TOML file > built-in defaults. Every run that writes an output
directory also writes ``config.lock`` there; passing it back via
``--config`` reproduces the run.

Exit codes:

    0  success, all outputs written and checked
    2  usage error (unknown flag, missing required setting)
    3  missing or malformed input file
    4  output could not be written
    5  validation or internal failure
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import __version__, autodiff as ad, coexist, dataset as ds, evalkit, segnet, trainers
from ._rng import derive_seed

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_OUTPUT, EXIT_INTERNAL = 0, 2, 3, 4, 5
LOCK_VERSION = 1
LOCK_NAME = "config.lock"
_NOT_LOCKED = {"out", "config"}

# per-command settings; the default's type is the setting's type
COMMANDS: dict[str, dict] = {
    "synth": dict(out="", config="", fft_size=64, cp_len=8, seed=0, index=0, subset="base", snr_db=15.0,
                  noise=True),
    "dataset": dict(out="", config="", n_base=1000, n_extra=-1, fft_size=64, cp_len=8, seed=0, jobs=0),
    "train": dict(out="", config="", algo="erm", domains="64:8", data="", n_base=1000, n_extra=-1, seed=0,
                  epochs=20, lr=0.001, decay=0.8, batch_size=8, micro_batch=4, patience=5,
                  swad_switch_epoch=10, mldg_beta=1.0, mldg_first_order=False, select_domains="", n_select=20,
                  jobs=0),
    "eval": dict(out="", config="", model="", data="", split="test", batch_size=8),
    "sweep": dict(out="", config="", model="", axis="fft", values="", train_domains="", fixed=-1,
                  n_per_domain=20, seed=0, batch_size=8, jobs=0),
    "infer": dict(out="", config="", model="", input="", sample_rate=20e6),
    "coexist": dict(out="", config="", scenario="two-cell", n_symbols=100_000, seed=0, snr_grid="0,2,4,6,8,10,12",
                    rotation=-math.pi / 6, detector="interference-aware", jobs=0),
}
HELP = {
    "synth": "generate one labelled sample (image, mask, metadata, raw I/Q)",
    "dataset": "build a dataset directory",
    "train": "train a segmentation model (erm, swad or mldg)",
    "eval": "evaluate a model on a dataset split",
    "sweep": "accuracy across FFT-size or CP-length domains",
    "infer": "segment a PNG spectrogram or raw I/Q capture",
    "coexist": "coexistence SINR summary and BER curves",
}
REQUIRED = {"eval": ("out", "model", "data"), "sweep": ("out", "model"), "infer": ("out", "model", "input"),
            "synth": ("out",), "dataset": ("out",), "train": ("out",)}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _coerce(key: str, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return low in ("1", "true", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise CliError(EXIT_USAGE, f"setting {key!r}: cannot read {value!r} as {type(default).__name__}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofdmaseg", description="OFDMA modulation segmentation toolkit")
    parser.add_argument("--version", action="store_true", help="print package and artifact format versions")
    sub = parser.add_subparsers(dest="command")
    for name, defaults in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], argument_default=argparse.SUPPRESS)
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction)
            else:
                kind = type(default) if not isinstance(default, str) else str
                p.add_argument(flag, dest=key, type=kind, metavar=key.upper())
    return parser


def resolve_config(command: str, flags: dict, environ=os.environ) -> dict:
    """Defaults, then config file, then environment, then flags."""
    defaults = COMMANDS[command]
    cfg = dict(defaults)
    config_path = flags.get("config") or environ.get("OFDMASEG_CONFIG", "")
    if config_path:
        try:
            with open(config_path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise CliError(EXIT_INPUT, f"config file {config_path} not found")
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise CliError(EXIT_INPUT, f"config file {config_path}: {exc}")
        if isinstance(data.get(command), dict):
            data = data[command]
        elif data.get("command", command) != command:
            raise CliError(EXIT_INPUT, f"config file {config_path} is for {data['command']!r}, not {command!r}")
        for key, value in data.items():
            if key in ("command", "lock_version"):
                continue
            if key not in defaults:
                raise CliError(EXIT_INPUT, f"config file {config_path}: unknown setting {key!r}")
            cfg[key] = _coerce(key, value, defaults[key])
        cfg["config"] = config_path
    for key, default in defaults.items():
        env = environ.get("OFDMASEG_" + key.upper())
        if env is not None and key != "config":
            cfg[key] = _coerce(key, env, default)
    for key, value in flags.items():
        cfg[key] = value
    for key in REQUIRED.get(command, ()):
        if not cfg[key]:
            raise CliError(EXIT_USAGE, f"{command}: --{key.replace('_', '-')} is required")
    return cfg


def write_lock(out: Path, command: str, cfg: dict) -> None:
    body = {"command": command, "lock_version": LOCK_VERSION}
    body.update({k: v for k, v in cfg.items() if k not in _NOT_LOCKED})
    (out / LOCK_NAME).write_bytes(tomli_w.dumps(body).encode("utf-8"))


def _jobs(n: int) -> int:
    return n if n > 0 else (os.cpu_count() or 1)


def _n_extra(cfg) -> int:
    return 2 * cfg["n_base"] if cfg["n_extra"] < 0 else cfg["n_extra"]


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_OUTPUT, f"cannot write to {out}: {exc}")
    return out


def _parse_domains(text: str) -> list[ds.DomainSpec]:
    """``"64:8,32:8"`` -> domains; a bare number keeps the default CP length."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        fft, _, cp = item.partition(":")
        try:
            out.append(ds.DomainSpec(int(fft), int(cp) if cp else 8))
        except ValueError as exc:
            raise CliError(EXIT_USAGE, f"bad domain {item!r}: {exc}")
    if not out:
        raise CliError(EXIT_USAGE, "no domains given")
    return out


def _int_list(text: str, name: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(EXIT_USAGE, f"{name}: expected comma-separated integers, got {text!r}")


def _load_model(path: str):
    try:
        return segnet.arrays_to_params(ad.load_params(path))
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"model checkpoint {path} not found")
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"model checkpoint {path}: {exc}")


def _load_manifest(path: str) -> ds.DatasetManifest:
    try:
        m = ds.DatasetManifest.load(path)
        m.check_files()
    except ds.DatasetIOError as exc:
        raise CliError(EXIT_INPUT, str(exc))
    return m


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def cmd_synth(cfg: dict, out: Path) -> None:
    domain = ds.DomainSpec(cfg["fft_size"], cfg["cp_len"])
    if cfg["subset"] not in ("base", "extra"):
        raise CliError(EXIT_USAGE, "subset must be 'base' or 'extra'")
    record = ds.sample_record(cfg["index"], cfg["seed"], cfg["subset"], domain, noise=cfg["noise"])
    record["impairment"]["snr_db"] = cfg["snr_db"]
    sig = ds.record_signal(record)[0]
    image, mask, scale, realized = ds.render_record(record)
    ds.write_png_rgb(out / "image.png", image)
    ds.write_png_mask(out / "mask.png", mask)
    ds.export_iq(sig, out / "iq.bin")
    _write_json(out / "meta.json", {**record, "scale": scale, "fading_gains": realized["fading_gains"]})
    if not np.array_equal(ds.read_png_mask(out / "mask.png"), mask):
        raise CliError(EXIT_INTERNAL, "mask did not read back identically")


def cmd_dataset(cfg: dict, out: Path) -> None:
    domain = ds.DomainSpec(cfg["fft_size"], cfg["cp_len"])
    m = ds.build_dataset(cfg["n_base"], _n_extra(cfg), domain, cfg["seed"], out, jobs=_jobs(cfg["jobs"]))
    ds.DatasetManifest.load(out).check_files()
    print(f"wrote {len(m)} samples to {out} "
          f"(train {len(m.split_indices('train'))}, val {len(m.split_indices('val'))}, "
          f"test {len(m.split_indices('test'))})")


def _domain_datasets(cfg: dict, out: Path) -> list[ds.DatasetManifest]:
    if cfg["data"]:
        return [_load_manifest(p.strip()) for p in cfg["data"].split(",") if p.strip()]
    manifests = []
    for i, dom in enumerate(_parse_domains(cfg["domains"])):
        seed = derive_seed(cfg["seed"], i) if i else cfg["seed"]
        manifests.append(ds.build_dataset(cfg["n_base"], _n_extra(cfg), dom, seed, out / "data" / dom.tag(),
                                          jobs=_jobs(cfg["jobs"])))
    return manifests


def cmd_train(cfg: dict, out: Path) -> None:
    manifests = _domain_datasets(cfg, out)
    tcfg = trainers.TrainConfig(
        lr0=cfg["lr"], decay=cfg["decay"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        algorithm=cfg["algo"], patience=cfg["patience"] if cfg["patience"] > 0 else None,
        micro_batch=cfg["micro_batch"], swad_switch_epoch=cfg["swad_switch_epoch"],
        mldg_beta=cfg["mldg_beta"], mldg_first_order=cfg["mldg_first_order"])
    train_sets = [ds.SplitSource(m, "train") for m in manifests]
    val_sets = [ds.SplitSource(m, "val") for m in manifests if m.split_indices("val")]
    select = None
    if cfg["select_domains"]:
        select = []
        for i, dom in enumerate(_parse_domains(cfg["select_domains"])):
            m = ds.build_dataset(cfg["n_select"], 0, dom, derive_seed(cfg["seed"], 1000 + i),
                                 out / "data" / ("select_" + dom.tag()), jobs=_jobs(cfg["jobs"]),
                                 fractions=(0.0, 0.0, 1.0))
            select.append(ds.SplitSource(m, "test"))
    if tcfg.algorithm != "mldg":
        train_sets = train_sets if len(train_sets) > 1 else train_sets[0]
    params = segnet.init_params(3, seed=cfg["seed"])
    result = trainers.train(params, tcfg, train_sets, val_sets or None, select, log_path=out / "train_log.csv")
    ad.save_params(out / "model.ckpt", result.params)
    _write_json(out / "train_info.json", _finite({"best_epoch": result.best_epoch, "info": result.info,
                                                  "history": result.history, "config": tcfg.to_dict()}))
    back = ad.load_params(out / "model.ckpt")
    if any(not np.array_equal(back[k], v.data) for k, v in result.params.items()):
        raise CliError(EXIT_INTERNAL, "checkpoint did not read back identically")
    last = result.history[-1] if result.history else {}
    print(f"trained {tcfg.algorithm} for {len(result.history)} epochs; best epoch {result.best_epoch}; "
          f"final train loss {last.get('train_loss', float('nan')):.4f}")


def cmd_eval(cfg: dict, out: Path) -> None:
    params = _load_model(cfg["model"])
    m = _load_manifest(cfg["data"])
    if cfg["split"] not in ds.SPLITS:
        raise CliError(EXIT_USAGE, f"unknown split {cfg['split']!r}")
    src = ds.SplitSource(m, cfg["split"])
    if len(src) == 0:
        raise CliError(EXIT_INPUT, f"split {cfg['split']!r} of {cfg['data']} is empty")
    report = evalkit.evaluate_source(params, src, cfg["batch_size"])
    report.write_json(out / "report.json")
    print(f"overall (class mean) {report.overall:.4f}; pixel accuracy {report.pixel_accuracy:.4f}")


def cmd_sweep(cfg: dict, out: Path) -> None:
    params = _load_model(cfg["model"])
    axis = cfg["axis"]
    if axis == "fft":
        values = _int_list(cfg["values"], "values") or list(evalkit.FFT_TEST_GRID)
        train_dom = _int_list(cfg["train_domains"], "train_domains") or list(evalkit.FFT_TRAIN_DOMAINS)
        fixed = cfg["fixed"] if cfg["fixed"] >= 0 else evalkit.FFT_EXPERIMENT_CP
        make = lambda v: ds.DomainSpec(v, fixed)  # noqa: E731
    elif axis == "cp":
        values = _int_list(cfg["values"], "values") or list(evalkit.CP_TEST_GRID)
        train_dom = _int_list(cfg["train_domains"], "train_domains") or list(evalkit.CP_TRAIN_DOMAINS)
        fixed = cfg["fixed"] if cfg["fixed"] >= 0 else evalkit.CP_EXPERIMENT_FFT
        make = lambda v: ds.DomainSpec(fixed, v)  # noqa: E731
    else:
        raise CliError(EXIT_USAGE, f"axis must be 'fft' or 'cp', got {axis!r}")
    try:
        domains = {v: make(v) for v in values}
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))
    sets = {}
    for v, dom in domains.items():
        m = ds.build_dataset(cfg["n_per_domain"], 0, dom, derive_seed(cfg["seed"], v), out / "data" / dom.tag(),
                             jobs=_jobs(cfg["jobs"]), fractions=(0.0, 0.0, 1.0))
        sets[v] = ds.SplitSource(m, "test")
    rows, summary = evalkit.domain_sweep(params, sets, values, train_dom, axis, cfg["batch_size"])
    evalkit.write_sweep_csv(out / "sweep.csv", rows)
    _write_json(out / "summary.json", _finite({**summary, "axis": axis, "fixed": fixed, "train_domains": train_dom,
                                               "reference": {k[1]: v for k, v in
                                                             evalkit.REFERENCE_DG_ACCURACY.items()
                                                             if k[0] == axis}}))
    print(f"in-domain mean {summary['in_domain']:.4f}; out-of-domain mean {summary['out_of_domain']:.4f}")


def cmd_infer(cfg: dict, out: Path) -> None:
    params = _load_model(cfg["model"])
    path = Path(cfg["input"])
    if not path.is_file():
        raise CliError(EXIT_INPUT, f"input {path} not found")
    try:
        if path.suffix.lower() == ".png":
            image = ds.read_png_rgb(path)
        else:
            image = ds.import_iq(path, cfg["sample_rate"]).image
    except (ds.MalformedInputError, ValueError, OSError) as exc:
        raise CliError(EXIT_INPUT, f"input {path}: {exc}")
    try:
        pred, rgb = evalkit.infer(params, image)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, f"input {path}: {exc}")
    ds.write_png_mask(out / "pred_mask.png", pred)
    evalkit.save_overlay(out / "overlay.png", rgb)
    counts = np.bincount(pred.ravel(), minlength=len(evalkit.CLASS_NAMES))
    _write_json(out / "infer.json", {"input": str(path), "shape": list(pred.shape),
                                     "pixels_per_class": dict(zip(evalkit.CLASS_NAMES, counts.tolist())),
                                     "palette": {n: list(map(int, c)) for n, c in
                                                 zip(evalkit.CLASS_NAMES, evalkit.PALETTE)}})


def cmd_coexist(cfg: dict, out: Path | None) -> None:
    if cfg["scenario"] != "two-cell":
        raise CliError(EXIT_USAGE, f"unknown scenario {cfg['scenario']!r} (only 'two-cell' is built in)")
    scn = coexist.CoexScenario()
    res = coexist.sinr(scn)
    for key, label in (("ran1", "RAN1"), ("ran2", "RAN2")):
        r = res[key]
        print(f"{label} SINR {r['sinr_db']:.1f} dB (standalone SNR {r['snr_db']:.1f} dB; "
              f"signal {r['signal_dbm']:.2f} dBm, interference {r['interference_dbm']:.2f} dBm, "
              f"noise {r['noise_dbm']:.2f} dBm)")
    if out is None:
        return
    grid = [float(s) for s in cfg["snr_grid"].split(",") if s.strip()]
    interferer = coexist.scenario_interferer(scn, "ran1")
    common = dict(snr_grid=grid, n_symbols=cfg["n_symbols"], seed=cfg["seed"], detector=cfg["detector"],
                  jobs=_jobs(cfg["jobs"]))
    try:
        curves = {
            "no-interference": coexist.ber_sim(rotation_rad=0.0, interferer=None, **common),
            "plain": coexist.ber_sim(rotation_rad=0.0, interferer=interferer, **common),
            "rotated": coexist.ber_sim(rotation_rad=cfg["rotation"], interferer=interferer, **common),
        }
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))
    coexist.write_ber_csv(out / "ber.csv", curves)
    _write_json(out / "sinr.json", {"scenario": scn.to_dict(), "receivers": res})


HANDLERS = {"synth": cmd_synth, "dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "infer": cmd_infer, "coexist": cmd_coexist}


def version_text() -> str:
    return (f"ofdmaseg {__version__}\n"
            f"dataset format {ds.FORMAT_VERSION}\n"
            f"checkpoint format {ad.CHECKPOINT_VERSION}\n"
            f"config.lock format {LOCK_VERSION}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.version:
        print(version_text())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "version")}
    try:
        cfg = resolve_config(args.command, flags)
        out = _out_dir(cfg["out"]) if cfg["out"] else None
        HANDLERS[args.command](cfg, out)
        if out is not None:
            write_lock(out, args.command, cfg)
    except CliError as exc:
        print(f"ofdmaseg: {exc}", file=sys.stderr)
        return exc.code
    except (ds.DatasetIOError, ds.MalformedInputError) as exc:
        print(f"ofdmaseg: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"ofdmaseg: write failed: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    except (ValueError, RuntimeError) as exc:
        print(f"ofdmaseg: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
