"""Command-line entry point: ``smoe {gen-data,train,eval,export-routing,export-experts,gradcheck}``.

Exit codes: 0 ok, 1 IO or other failure, 2 bad config, 3 bad data file, 4 NaN/Inf.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import export
from .checkpoint import load_checkpoint, save_checkpoint
from .heat import PRESETS, DatasetFormatError, generate_preset, load_dataset, save_dataset
from .losses import AuxConfig
from .train import HISTORY_FIELDS, NumericalError, TrainConfig, build_model, evaluate, fit

log = logging.getLogger("smoe")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
OUT_ROOT_ENV = "SMOE_OUT_ROOT"
MODELS = ("smoe", "conv", "lcn")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    """Everything one training run needs: a TrainConfig plus data and model choice."""

    train: TrainConfig = field(default_factory=TrainConfig)
    model: str = "smoe"
    preset: str = "reduced"
    data_seed: int = 0
    out: str = ""

    def to_text(self) -> str:
        lines = [f"model = {self.model}", f"preset = {self.preset}", f"data_seed = {self.data_seed}"]
        if self.out:
            lines.append(f"out = {self.out}")
        for f in dataclasses.fields(TrainConfig):
            if f.name == "aux":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self.train, f.name))}")
        for f in dataclasses.fields(AuxConfig):
            lines.append(f"aux.{f.name} = {_fmt(getattr(self.train.aux, f.name))}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if typ == Optional[bool]:
        return None if raw.lower() == "auto" else _parse_value(raw, bool)
    raise TypeError(f"unsupported field type {typ}")


_TRAIN_TYPES = typing.get_type_hints(TrainConfig)
_AUX_TYPES = typing.get_type_hints(AuxConfig)
_RUN_TYPES = {"model": str, "preset": str, "data_seed": int, "out": str}


def _field_type(key: str):
    if key in _RUN_TYPES:
        return _RUN_TYPES[key]
    if key.startswith("aux."):
        return _AUX_TYPES.get(key[4:])
    if key == "aux":
        return None
    return _TRAIN_TYPES.get(key)


def parse_pairs(pairs: list[tuple[str, str]], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply ``key = value`` pairs on top of ``base``; every problem is collected."""
    base = base or RunConfig()
    run = {"model": base.model, "preset": base.preset, "data_seed": base.data_seed, "out": base.out}
    train = {f.name: getattr(base.train, f.name) for f in dataclasses.fields(TrainConfig) if f.name != "aux"}
    aux = dataclasses.asdict(base.train.aux)
    errors = []
    for key, raw in pairs:
        typ = _field_type(key)
        if typ is None:
            errors.append(f"{key}: unknown key")
            continue
        try:
            val = _parse_value(raw, typ)
        except (ValueError, TypeError) as e:
            errors.append(f"{key}: {e}")
            continue
        if key in run:
            run[key] = val
        elif key.startswith("aux."):
            aux[key[4:]] = val
        else:
            train[key] = val
    if run["model"] not in MODELS:
        errors.append(f"model: must be one of {', '.join(MODELS)}")
    if run["preset"] not in PRESETS:
        errors.append(f"preset: must be one of {', '.join(sorted(PRESETS))}")
    try:
        aux_cfg = AuxConfig(**aux)
    except ValueError as e:
        errors.append(f"aux: {e}")
        aux_cfg = AuxConfig()
    train_cfg = None
    try:
        train_cfg = TrainConfig(aux=aux_cfg, **train)
    except ValueError:
        errors.extend(TrainConfig.validate(_Unchecked(aux=aux_cfg, **train)))
    if errors:
        raise ConfigError(errors)
    return RunConfig(train=train_cfg, **run)


class _Unchecked(TrainConfig):
    """TrainConfig that skips validation on construction, to list every error."""

    def __post_init__(self):
        pass


def read_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {n}: expected 'key = value', got {line!r}"])
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_run_config(path=None, overrides=()) -> RunConfig:
    pairs = read_pairs(Path(path).read_text(encoding="utf-8")) if path else []
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return parse_pairs(pairs)


# ------------------------------------------------------------------ commands

def _summary(ds) -> str:
    rm = ds.region_map
    alphas = ", ".join(f"{a:g}" for a in rm.diffusivities)
    return (
        f"grid {rm.shape[0]}x{rm.shape[1]}, {rm.num_types} types, "
        f"region sizes {rm.region_sizes()}, diffusivities [{alphas}], "
        f"{len(ds)} pairs (splits {list(ds.splits)})"
    )


def cmd_gen_data(args) -> int:
    ds = generate_preset(args.preset, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {_summary(ds)}")
    return EXIT_OK


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _load_or_generate(data: Optional[str], cfg: RunConfig):
    if data:
        return load_dataset(data)
    log.info("no --data given, generating preset %s (seed %d)", cfg.preset, cfg.data_seed)
    return generate_preset(cfg.preset, cfg.data_seed)


def write_history(path: Path, history: list[dict], cfg: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        tc = cfg.train
        fh.write(
            f"# model={cfg.model} rc_enabled={_fmt(tc.rc_enabled)} "
            f"damping_enabled={_fmt(tc.damping_enabled)} weighted={_fmt(tc.is_weighted)} "
            f"q={tc.q} damping_factor={tc.damping_factor} seed={tc.seed}\n"
        )
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)


def train_once(ds, cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    model = build_model(cfg.model, cfg.train, ds.region_map)
    result = fit(ds, model, cfg.train)
    write_history(out / "history.csv", result.history, cfg)
    save_checkpoint(out / "checkpoint.smck", result.model, cfg.train, ds.region_map.shape,
                    {"model": cfg.model})
    test = evaluate(result.model, *ds.split("test"))
    report = {
        "best_val_pct": result.best_val,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "test_pct_within_1": test.pct_within_1,
        "test_mse": test.mse,
        "utilization": test.utilization,
    }
    if cfg.model == "smoe":
        agree, _ = export.best_assignment_agreement(
            result.model.layer.route().selected[0], ds.region_map.grid
        )
        report["routing_agreement"] = agree
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


MATRIX_KEYS = {"rc": "rc_enabled", "damping": "damping_enabled"}


def parse_matrix(items: list[str]) -> list[dict]:
    """``["rc=on,off", "damping=on,off"]`` -> list of override dicts (cartesian product)."""
    axes = []
    for item in items:
        if "=" not in item:
            raise ConfigError([f"matrix: expected name=v1,v2, got {item!r}"])
        name, vals = item.split("=", 1)
        key = MATRIX_KEYS.get(name.strip(), name.strip())
        axes.append([(key, v.strip()) for v in vals.split(",") if v.strip()])
    return [dict(cell) for cell in itertools.product(*axes)]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out = Path(args.out or cfg.out or _out_root() / "train")
    ds = _load_or_generate(args.data, cfg)
    if not args.matrix:
        report = train_once(ds, cfg, out)
        print(
            f"best val {report['best_val_pct']:.3f}% (epoch {report['best_epoch']}), "
            f"test {report['test_pct_within_1']:.3f}% within 1%, mse {report['test_mse']:.4e}"
        )
        return EXIT_OK
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    cells = parse_matrix(args.matrix)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in cells:
        base = [(k, v) for k, v in cell.items()]
        pcts, epochs = [], []
        for seed in seeds:
            run = parse_pairs(base + [("seed", str(seed))], cfg)
            name = "_".join(f"{k}-{v}" for k, v in cell.items()) + f"_seed{seed}"
            rep = train_once(ds, run, out / name)
            pcts.append(rep["test_pct_within_1"])
            epochs.append(rep["best_epoch"])
        row = {**cell, "epochs": float(np.mean(epochs)),
               "pct_mean": float(np.mean(pcts)), "pct_std": float(np.std(pcts)), "n_seeds": len(seeds)}
        rows.append(row)
        print(", ".join(f"{k}={v}" for k, v in cell.items()),
              f"-> {row['pct_mean']:.2f} +- {row['pct_std']:.2f} % within 1%")
    with open(out / "matrix.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    model, _, _ = load_checkpoint(args.checkpoint, ds.region_map)
    rep = evaluate(model, *ds.split(args.split))
    print(f"{args.split}: {rep.pct_within_1:.4f}% within 1%, mse {rep.mse:.6e}")
    return EXIT_OK


def _smoe_layer(path):
    model, _, meta = load_checkpoint(path)
    if meta["kind"] != "smoe":
        raise ConfigError([f"checkpoint holds a {meta['kind']} model, not an SMoE"])
    return model.layer


def cmd_export_routing(args) -> int:
    p = export.export_routing(_smoe_layer(args.checkpoint), args.out)
    print(f"wrote {p}")
    return EXIT_OK


def cmd_export_experts(args) -> int:
    paths = export.export_experts(_smoe_layer(args.checkpoint), args.out)
    print(f"wrote {len(paths)} kernel files to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    errs = run_all(args.seed)
    worst = 0.0
    for name, err in errs.items():
        ok = err < args.tol
        worst = max(worst, err)
        print(f"{name:18s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="smoe", description="Spatial mixture-of-experts experiments on heat diffusion data."
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a heat-diffusion dataset file")
    g.add_argument("--preset", choices=sorted(PRESETS), default="reduced")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (or an ablation matrix)")
    t.add_argument("--config", help="key = value file")
    t.add_argument("--data", help="dataset file; generated from the config preset if omitted")
    t.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/train)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--matrix", nargs="+", metavar="NAME=V1,V2", help="e.g. rc=on,off damping=on,off")
    t.add_argument("--seeds", help="comma-separated seeds for --matrix cells")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("export-routing", help="routing map as .csv or .pgm")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_export_routing)

    x = sub.add_parser("export-experts", help="expert kernels as CSV files")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_experts)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-3)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetFormatError as e:
        print(f"data format error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
