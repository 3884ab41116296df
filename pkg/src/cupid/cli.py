"""Command-line entry point: ``cupid <subcommand> [--config FILE] [--out DIR] [--key value ...]``.

Every subcommand resolves its configuration (built-in defaults, then the
config file, then flags), writes ``manifest.json`` into the run directory
before doing any work, and leaves all outputs next to it. ``cupid replay DIR``
re-runs a manifest.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
import warnings
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import evaluation as E
from . import preprocessing as pp
from . import wfdb
from .model import ModelConfig, load_model, random_mask, reconstruct, spectrogram_frames
from .synthetic import SynthConfig, generate, generate_mixed
from .training import NumericalError, TrainConfig, train

log = logging.getLogger("cupid")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class CliConfigError(Exception):
    pass


class CliInputError(Exception):
    pass


# -- configuration schemas -------------------------------------------------------------


def _fields(cls, skip=()) -> dict[str, Any]:
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in skip and f.init}


MODEL_KEYS = _fields(ModelConfig)
TRAIN_KEYS = _fields(TrainConfig)
SYNTH_KEYS = _fields(SynthConfig)
# inputs that are files: hashed into the manifest and checked for existence
PATH_KEYS = {"data", "checkpoint", "resume", "mtae", "cupid", "split_file", "grid", "input", "probe_data"}

SCHEMAS: dict[str, dict[str, Any]] = {
    "synth": {**SYNTH_KEYS, "sdnn_levels": "", "af_fraction": 0.0, "output": "windows.cpw1"},
    "preprocess": {"input": "", "channel": 0, "output": "windows.cpw1"},
    "pretrain": {**MODEL_KEYS, **TRAIN_KEYS, "data": "", "resume": ""},
    "probe": {"checkpoint": "", "data": "", "dataset": "data", "l2": 1e-4, "n_folds": 5, "seed": 0,
              "split_file": ""},
    "finetune": {"checkpoint": "", "data": "", "dataset": "data", "lr": 1e-4, "patience": 5,
                 "max_epochs": 50, "batch_size": 32, "l2": 1e-4, "n_folds": 5, "seed": 0, "split_file": ""},
    "reconstruct": {"checkpoint": "", "data": "", "index": 0, "seed": 0},
    "sdnn-report": {"mtae": "", "cupid": "", "data": "", "bins": "0,50,100,inf", "seed": 0},
    "sweep": {**MODEL_KEYS, **TRAIN_KEYS, "grid": "", "data": "", "probe_data": "", "n_folds": 5},
    "spectrogram": {"data": "", "index": 0, "patch_size": 20, "spec_scale": "mag"},
}
REQUIRED = {
    "preprocess": ["input"], "pretrain": ["data"], "probe": ["checkpoint", "data"],
    "finetune": ["checkpoint", "data"], "reconstruct": ["checkpoint", "data"],
    "sdnn-report": ["mtae", "cupid", "data"], "sweep": ["grid", "data", "probe_data"],
    "spectrogram": ["data"],
}
HELP = {
    "synth": "generate a synthetic CPW1 dataset",
    "preprocess": "condition WFDB or raw f32 recordings into CPW1 windows",
    "pretrain": "masked-reconstruction pretraining (variant cupid or mtae)",
    "probe": "linear probe on frozen representations, cross-validated",
    "finetune": "fine-tune encoder and linear head, cross-validated",
    "reconstruct": "ground truth vs reconstruction CSV for one window",
    "sdnn-report": "masked-L1 per SDNN bin for an mtae and a cupid checkpoint",
    "sweep": "pretrain + probe for each cell of a parameter grid",
    "spectrogram": "spectrogram frames of one window as CSV",
}


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes"):
                    return True
                if value.lower() in ("0", "false", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise CliConfigError(f"bad value {value!r} for key {key!r}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    """JSON object or flat ``key = value`` lines (``#`` comments)."""
    path = Path(path)
    if not path.exists():
        raise CliInputError(f"config file not found: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise CliConfigError(f"{path}: expected a JSON object")
        return data
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(command: str, file_values: Mapping[str, Any], flag_values: Mapping[str, Any]) -> dict[str, Any]:
    schema = SCHEMAS[command]
    cfg = dict(schema)
    for source in (file_values, flag_values):
        for key, value in source.items():
            if key not in schema:
                raise CliConfigError(f"unknown key {key!r} for {command}")
            cfg[key] = _coerce(key, value, schema[key])
    for key in REQUIRED.get(command, []):
        if cfg[key] in ("", None):
            raise CliConfigError(f"{command} needs {key!r}")
    return cfg


def _input_paths(cfg: Mapping[str, Any]) -> list[Path]:
    paths = []
    for key in sorted(PATH_KEYS & cfg.keys()):
        value = cfg[key]
        if not value:
            continue
        for part in str(value).split(","):
            part = part.split("=", 1)[-1].strip()
            if key == "input" and not part.endswith(".f32"):
                paths.append(Path(part + ".hea"))
            else:
                paths.append(Path(part))
    return paths


def content_hash(paths: list[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        if not p.exists():
            raise CliInputError(f"input file not found: {p}")
        out[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def write_manifest(run_dir: Path, command: str, cfg: Mapping[str, Any]) -> dict:
    inputs = content_hash(_input_paths(cfg))
    digest = hashlib.sha256(json.dumps(sorted(inputs.items())).encode()).hexdigest()
    manifest = {
        "command": command,
        "config": dict(cfg),
        "seed": cfg.get("seed"),
        "inputs": inputs,
        "input_hash": digest,
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- helpers --------------------------------------------------------------------------------


def _split_config(cfg: Mapping[str, Any]) -> tuple[ModelConfig, TrainConfig]:
    try:
        model = ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})
        tc = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    except ValueError as exc:
        raise CliConfigError(str(exc)) from None
    return model, tc


def _windows(path: str) -> list[pp.EcgWindow]:
    try:
        return pp.read_windows(path)
    except OSError as exc:
        raise CliInputError(str(exc)) from None


def _labelled(windows):
    kept = [w for w in windows if w.label is not None]
    if not kept:
        raise CliConfigError("dataset carries no labels")
    return (np.stack([w.samples for w in kept]), np.array([w.label for w in kept]),
            [w.patient_id or f"w{i}" for i, w in enumerate(kept)])


def _folds(cfg, labels, pids):
    if cfg["split_file"]:
        return E.single_split(pids, E.read_split_file(cfg["split_file"]), seed=cfg["seed"])
    return E.make_folds(pids, cfg["n_folds"], cfg["seed"])


def _write_rows(path: Path, rows, columns):
    E.write_csv(path, rows, columns)
    log.info("wrote %s", path)


def _pick_window(cfg, windows):
    idx = cfg["index"]
    if not 0 <= idx < len(windows):
        raise CliConfigError(f"index {idx} outside dataset of {len(windows)} windows")
    return windows[idx].samples


# -- subcommands ------------------------------------------------------------------------------


def cmd_synth(cfg, run_dir: Path):
    base = SynthConfig(**{k: cfg[k] for k in SYNTH_KEYS})
    levels = [float(v) for v in cfg["sdnn_levels"].split(",") if v.strip()] or [base.sdnn_ms]
    af = cfg["af_fraction"]
    if not 0 <= af <= 1:
        raise CliConfigError("af_fraction must lie in [0, 1]")
    if len(levels) == 1 and af == 0:
        windows = generate(base)
    else:
        parts = [(dataclasses.replace(base, sdnn_ms=s, preset="normal"), (1 - af) / len(levels)) for s in levels]
        if af > 0:
            parts.append((dataclasses.replace(base, preset="af_like"), af))
        windows = generate_mixed([p for p in parts if p[1] > 0], base.n_windows, base.seed)
    out = run_dir / cfg["output"]
    pp.write_windows(out, windows)
    log.info("wrote %d windows to %s", len(windows), out)


def _load_recording(item: str, channel: int):
    if item.endswith(".f32"):
        x, meta = pp.read_raw_f32(item)
        name = Path(item).stem
        return x, float(meta["fs"]), meta.get("patient_id", name), meta.get("record_id", name), None
    stem = Path(item)
    header = wfdb.parse_header(stem.with_suffix(".hea").read_bytes())
    dat = (stem.parent / header.signals[channel].file_name).read_bytes()
    x = wfdb.read_signal(header, dat, channel)
    labels = None
    atr = stem.with_suffix(".atr")
    if atr.exists():
        intervals = wfdb.rhythm_intervals(wfdb.read_annotations(atr.read_bytes()), header.n_samples)
        labels, _ = pp.labels_from_intervals(intervals, header.n_samples)
    return x, header.sampling_frequency, header.record_name, header.record_name, labels


def cmd_preprocess(cfg, run_dir: Path):
    windows = []
    for item in (s.strip() for s in cfg["input"].split(",") if s.strip()):
        try:
            x, fs, pid, rid, labels = _load_recording(item, cfg["channel"])
        except OSError as exc:
            raise CliInputError(str(exc)) from None
        except (wfdb.WfdbError, pp.ConfigError) as exc:
            raise CliConfigError(f"{item}: {exc}") from None
        try:
            windows += pp.preprocess_record(x, fs, patient_id=pid, record_id=rid, labels=labels)
        except pp.FlatLineError:
            log.warning("%s: flat recording skipped", item)
    pp.write_windows(run_dir / cfg["output"], windows)
    log.info("wrote %d windows", len(windows))


def cmd_pretrain(cfg, run_dir: Path):
    model, tc = _split_config(cfg)
    windows = _windows(cfg["data"])
    res = train(windows, model, tc, run_dir=run_dir, resume=cfg["resume"] or None)
    log.info("final loss %.6f after %d iterations", res.losses[-1] if res.losses else math.nan, tc.iterations)


def _report_rows(cfg, variant, report):
    return E.result_rows(cfg["dataset"], variant, report)


def cmd_probe(cfg, run_dir: Path):
    config, params = load_model(cfg["checkpoint"])
    x, y, pids = _labelled(_windows(cfg["data"]))
    from .model import represent

    report = E.linear_probe(represent(params, config, x), y, pids, _folds(cfg, y, pids), cfg["l2"])
    _write_rows(run_dir / "results.csv", _report_rows(cfg, config.variant, report), E.RESULT_COLUMNS)


def cmd_finetune(cfg, run_dir: Path):
    config, params = load_model(cfg["checkpoint"])
    x, y, pids = _labelled(_windows(cfg["data"]))
    report = E.fine_tune(params, config, x, y, pids, _folds(cfg, y, pids), lr=cfg["lr"],
                         patience=cfg["patience"], max_epochs=cfg["max_epochs"],
                         batch_size=cfg["batch_size"], seed=cfg["seed"], l2=cfg["l2"])
    _write_rows(run_dir / "results.csv", _report_rows(cfg, config.variant, report), E.RESULT_COLUMNS)


def cmd_reconstruct(cfg, run_dir: Path):
    config, params = load_model(cfg["checkpoint"])
    x = _pick_window(cfg, _windows(cfg["data"]))
    mask = random_mask(config.n_patches, config.mask_ratio, np.random.default_rng([cfg["seed"], 3]))
    recon = reconstruct(params, config, x[None, :], mask)[0]
    masked = np.repeat(mask.masked[0], config.patch_size)
    with open(run_dir / "reconstruction.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "ground_truth", "reconstruction", "masked"])
        for i in range(len(x)):
            w.writerow([i, repr(float(x[i])), repr(float(recon[i])), int(masked[i])])


def cmd_sdnn_report(cfg, run_dir: Path):
    models = {}
    for variant in ("mtae", "cupid"):
        models[variant] = load_model(cfg[variant])
    try:
        edges = [float(v) for v in cfg["bins"].split(",")]
    except ValueError:
        raise CliConfigError(f"bad bins {cfg['bins']!r}") from None
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise CliConfigError("bins must be at least two increasing edges")
    rows = E.sdnn_stratified_error(models, _windows(cfg["data"]), edges, cfg["seed"])
    _write_rows(run_dir / "sdnn_report.csv", rows, E.SDNN_COLUMNS)


GRID_KEYS = {"patch_size": int, "mask_ratio": float, "iterations": int, "enc_blocks": int}


def read_grid(path: str) -> E.SweepGrid:
    values = read_config_file(path)
    grid = {}
    for key, raw in values.items():
        if key not in GRID_KEYS:
            raise CliConfigError(f"unknown key {key!r} in grid {path}")
        items = raw if isinstance(raw, list) else str(raw).split(",")
        try:
            grid[key] = [GRID_KEYS[key](v) for v in items]
        except ValueError:
            raise CliConfigError(f"bad values for {key!r} in grid {path}") from None
    return E.SweepGrid(**grid)


def cmd_sweep(cfg, run_dir: Path):
    model, tc = _split_config(cfg)
    grid = read_grid(cfg["grid"])
    # defaults for axes the grid leaves out come from the base configuration
    given = read_config_file(cfg["grid"]).keys()
    for key, value in (("patch_size", model.patch_size), ("mask_ratio", model.mask_ratio),
                       ("iterations", tc.iterations), ("enc_blocks", model.enc_blocks)):
        if key not in given:
            setattr(grid, key, [value])
    datasets = {}
    for item in cfg["probe_data"].split(","):
        name, _, path = item.strip().rpartition("=")
        datasets[name or Path(path).stem] = [w for w in _windows(path) if w.label is not None]
    pretrain = lambda ws, mc, t: train(ws, mc, t).params  # noqa: E731
    rows = E.sweep(grid, _windows(cfg["data"]), datasets, model, tc, pretrain, cfg["n_folds"], tc.seed)
    _write_rows(run_dir / "sweep.csv", rows, E.sweep_columns(list(datasets)))


def cmd_spectrogram(cfg, run_dir: Path):
    try:
        config = ModelConfig(patch_size=cfg["patch_size"], spec_scale=cfg["spec_scale"])
    except ValueError as exc:
        raise CliConfigError(str(exc)) from None
    x = _pick_window(cfg, _windows(cfg["data"]))
    frames = spectrogram_frames(x[None, :], dataclasses.replace(config, dtype="float64"))[0]
    n_fft = config.spectrogram.n_fft
    with open(run_dir / "spectrogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "bin", "freq_hz", "value"])
        for i, row in enumerate(frames):
            for k, v in enumerate(row):
                w.writerow([i, k, repr(k * pp.TARGET_HZ / n_fft), repr(float(v))])


COMMANDS: dict[str, Callable] = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "pretrain": cmd_pretrain, "probe": cmd_probe,
    "finetune": cmd_finetune, "reconstruct": cmd_reconstruct, "sdnn-report": cmd_sdnn_report,
    "sweep": cmd_sweep, "spectrogram": cmd_spectrogram,
}


# -- argument parsing ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cupid", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=HELP[name], argument_default=argparse.SUPPRESS,
                           description=f"{HELP[name]}. Config keys: {', '.join(schema)}.")
        p.add_argument("--config", help="key=value or JSON file; flags override it")
        p.add_argument("--out", default=f"runs/{name}", help=f"run directory (default runs/{name})")
        for key, default in schema.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=f"cfg_{key}", metavar=type(default).__name__.upper(),
                           help=f"default: {default!r}" if default != "" else None)
    rp = sub.add_parser("replay", help="re-run a previous run from its manifest")
    rp.add_argument("manifest", help="run directory or manifest.json")
    rp.add_argument("--out", help="new run directory (default: the original one)")
    return parser


def run(command: str, cfg: dict, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir, command, cfg)
    handler = logging.FileHandler(run_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            logging.captureWarnings(True)
            COMMANDS[command](cfg, run_dir)
    finally:
        logging.captureWarnings(False)
        root.removeHandler(handler)
        handler.close()


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            path = Path(args.manifest)
            if path.is_dir():
                path = path / "manifest.json"
            if not path.exists():
                raise CliInputError(f"manifest not found: {path}")
            manifest = json.loads(path.read_text())
            command = manifest["command"]
            cfg = resolve(command, manifest["config"], {})
            run_dir = Path(args.out) if args.out else path.parent
        else:
            command = args.command
            values = vars(args)
            file_values = read_config_file(values["config"]) if values.get("config") else {}
            flags = {k[4:]: v for k, v in values.items() if k.startswith("cfg_")}
            cfg = resolve(command, file_values, flags)
            run_dir = Path(values["out"])
        run(command, cfg, run_dir)
    except CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliInputError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, wfdb.WfdbError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
