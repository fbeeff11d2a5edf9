"""Command-line entry point: generate, train, eval, sweep, gradcheck.

Config precedence is flag > config file (JSON) > built-in default; the fully
resolved configuration is echoed to run.json in the output directory before
any work starts. All randomness fans out from the single --seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import seeds
from . import autodiff as ad
from .evaluation import SweepSpec, accuracy, emit_tables, run_sweep
from .losses import LossWeights
from .network import Model, ModelConfig
from .synth import (ConfigError, FeatureTable, GenConfig, feature_table,
                    generate_dataset, load_dataset, sample_availability_matrix,
                    save_dataset)
from .training import (Scaler, TrainAbort, TrainConfig, load_checkpoint,
                       predict_logits, save_checkpoint, train)
from .verify import run_gradient_suite

log = logging.getLogger("mmqnet.cli")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("MMQ_LOG", "info").lower()
    if level not in _LOG_LEVELS:
        raise ConfigError(f"MMQ_LOG must be one of {sorted(_LOG_LEVELS)}, got '{level}'")
    logging.basicConfig(level=_LOG_LEVELS[level],
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


DEFAULTS = {
    "seed": 0,
    "out": "out",
    "n": 500,
    "missing_rate": 0.0,
    "artifact_prob": 0.1,
    "class_sep": 1.0,
    "epochs": 300,
    "batch_size": 128,
    "lambda1": 1.0,
    "lambda2": 1.0,
    "lambda3": 0.01,
    "lr": 6e-4,
    "ablation": "full",
    "rates": "0.0,0.1,0.3,0.5,0.7",
    "sweep_seeds": "0,1,2,3,4",
    "train_rate": 0.3,
    "baseline": False,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmqnet",
        description="Masked-query transformer benchmark on synthetic multi-modal signals.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file (flag values win)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")

    g = sub.add_parser("generate", help="synthesize a dataset directory")
    common(g)
    g.add_argument("--n", type=int, help="number of records")
    g.add_argument("--missing-rate", type=float, dest="missing_rate")
    g.add_argument("--artifact-prob", type=float, dest="artifact_prob")
    g.add_argument("--class-sep", type=float, dest="class_sep")

    t = sub.add_parser("train", help="train on a generated dataset directory")
    common(t)
    t.add_argument("--data", type=Path, required=True, help="dataset directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--lambda3", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--ablation", choices=["full", "no-lr", "no-li"])

    e = sub.add_parser("eval", help="score a checkpoint on a dataset's test split")
    common(e)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True,
                   help="checkpoint file or its directory")
    e.add_argument("--missing-rate", type=float, dest="missing_rate",
                   help="fresh test masks at this rate (default: dataset masks)")

    s = sub.add_parser("sweep", help="missing-rate sweep with optional ablations/baseline")
    common(s)
    s.add_argument("--n", type=int)
    s.add_argument("--class-sep", type=float, dest="class_sep")
    s.add_argument("--artifact-prob", type=float, dest="artifact_prob")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.add_argument("--lambda1", type=float)
    s.add_argument("--lambda2", type=float)
    s.add_argument("--lambda3", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--ablation", help="comma list from {full,no-lr,no-li}")
    s.add_argument("--rates", help="comma list of test missing rates")
    s.add_argument("--seeds", dest="sweep_seeds", help="comma list of run seeds")
    s.add_argument("--train-rate", type=float, dest="train_rate")
    s.add_argument("--baseline", action="store_true", default=None,
                   help="include the mean-imputation baseline")

    v = sub.add_parser("gradcheck", help="run all finite-difference suites")
    common(v)
    return parser


def _resolve(args: argparse.Namespace) -> tuple[dict, set[str]]:
    """flag > config file > default; also reports which keys were explicit."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    resolved = {}
    provided = set()
    for key, default in DEFAULTS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
            provided.add(key)
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
            provided.add(key)
        else:
            resolved[key] = default
    resolved["ablation"] = str(resolved["ablation"]).replace("-", "_")
    return resolved, provided


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in str(text).split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"bad numeric list '{text}'") from exc


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in str(text).split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"bad integer list '{text}'") from exc


def _echo_run_config(out_dir: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": {k: (str(v) if isinstance(v, Path) else v)
                                              for k, v in cfg.items()}}
    if extra:
        payload.update(extra)
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _gen_config(cfg: dict) -> GenConfig:
    return GenConfig(n_samples=int(cfg["n"]), missing_rate=float(cfg["missing_rate"]),
                     artifact_prob=float(cfg["artifact_prob"]),
                     class_sep=float(cfg["class_sep"]), seed=int(cfg["seed"]))


def _train_config(cfg: dict) -> TrainConfig:
    weights = LossWeights(float(cfg["lambda1"]), float(cfg["lambda2"]), float(cfg["lambda3"]))
    if cfg["ablation"] == "no_lr":
        weights = replace(weights, lambda1=0.0)
    elif cfg["ablation"] == "no_li":
        weights = replace(weights, lambda3=0.0)
    return TrainConfig(lr=float(cfg["lr"]), epochs=int(cfg["epochs"]),
                       batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]),
                       weights=weights)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: dict) -> int:
    out = Path(cfg["out"])
    _echo_run_config(out, "generate", cfg)
    ds = generate_dataset(_gen_config(cfg))
    save_dataset(ds, out)
    log.info("wrote dataset with %d records to %s", ds.config.n_samples, out)
    return EXIT_OK


def _with_feats(table: FeatureTable, feats: list) -> FeatureTable:
    return FeatureTable(feats=feats, avail=table.avail, labels=table.labels,
                        onehot=table.onehot, split=table.split)


def cmd_train(cfg: dict, data: Path) -> int:
    out = Path(cfg["out"])
    _echo_run_config(out, "train", {**cfg, "data": data})
    ds = load_dataset(data)
    table = feature_table(ds)

    scaler = Scaler.fit(table, table.indices("train"))
    std = _with_feats(table, scaler.transform(table.feats))

    mcfg = ModelConfig(feature_lens=ds.config.feature_lens())
    model = Model(mcfg, seeds.stream(int(cfg["seed"]), seeds.INIT))
    tcfg = _train_config(cfg)
    (out / "meta.json").write_text(json.dumps(
        {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
         "modalities": [list(m) for m in ds.config.modalities]},
        indent=2, sort_keys=True) + "\n")

    history = train(model, std, tcfg, history_path=out / "history.csv",
                    checkpoint_path=out / "params.bin")
    save_checkpoint(out / "params.bin", model, scaler)
    final = history.final
    if final is not None:
        log.info("final epoch: total=%.4f train_acc=%.3f val_acc=%.3f",
                 final.l_total, final.train_acc, final.val_acc)
    return EXIT_OK


def cmd_eval(cfg: dict, data: Path, checkpoint: Path, rate_explicit: bool) -> int:
    out = Path(cfg["out"])
    _echo_run_config(out, "eval", {**cfg, "data": data, "checkpoint": checkpoint})
    ckpt_file = checkpoint / "params.bin" if checkpoint.is_dir() else checkpoint
    meta_file = ckpt_file.parent / "meta.json"
    if not meta_file.exists():
        raise ConfigError(f"missing architecture meta.json next to {ckpt_file}")
    meta = json.loads(meta_file.read_text())
    mcfg = ModelConfig.from_dict(meta["model"])

    ds = load_dataset(data)
    table = feature_table(ds)
    model = Model(mcfg, np.random.default_rng(0))
    scaler = load_checkpoint(ckpt_file, model)
    feats = scaler.transform(table.feats) if scaler is not None else table.feats

    test_idx = table.indices("test")
    rate = float(cfg["missing_rate"])
    if rate_explicit:
        masks = sample_availability_matrix(test_idx.size, table.avail.shape[1],
                                           rate, int(cfg["seed"]),
                                           label=seeds.EVAL, extra=(0,))
    else:
        masks = table.avail[test_idx]
    logits = predict_logits(model, [f[test_idx] for f in feats], masks)
    acc = accuracy(logits, table.labels[test_idx])
    result = {"accuracy": acc, "missing_rate": rate if rate_explicit else None,
              "n_test": int(test_idx.size)}
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"test accuracy: {acc:.4f} ({test_idx.size} records)")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    out = Path(cfg["out"])
    _echo_run_config(out, "sweep", cfg)
    spec = SweepSpec(
        missing_rates=_parse_floats(cfg["rates"]),
        seeds=_parse_ints(cfg["sweep_seeds"]),
        ablations=tuple(a.replace("-", "_") for a in str(cfg["ablation"]).split(",")),
        train_rate=float(cfg["train_rate"]),
        include_baseline=bool(cfg["baseline"]),
    )
    gen_cfg = _gen_config(cfg)
    train_cfg = _train_config({**cfg, "ablation": "full"})
    table = run_sweep(spec, gen_cfg, train_cfg, out_dir=out)
    emit_tables(table, out)
    for cfg_name in table.configs():
        for rate in table.rates(cfg_name):
            print(f"{cfg_name} rate={rate:g}: median accuracy "
                  f"{table.median_accuracy(cfg_name, rate):.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    out = Path(cfg["out"])
    _echo_run_config(out, "gradcheck", cfg)
    reports = run_gradient_suite(int(cfg["seed"]))
    all_ok = True
    lines = []
    for rep in reports:
        status = "PASS" if rep.ok else "FAIL"
        line = f"[{status}] {rep.name}: max relative error {rep.max_rel_err:.3e} " \
               f"(tolerance {rep.tolerance:g})"
        print(line)
        lines.append(line)
        all_ok &= rep.ok
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("gradient suite:", "all checks passed" if all_ok else "FAILURES detected")
    return EXIT_OK if all_ok else EXIT_VERIFY


def main(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        args = _build_parser().parse_args(argv)
        cfg, provided = _resolve(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.data)
        if args.command == "eval":
            return cmd_eval(cfg, args.data, args.checkpoint,
                            rate_explicit="missing_rate" in provided)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        raise ConfigError(f"unknown command {args.command}")
    except (TrainAbort, ad.NumericError, ad.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
