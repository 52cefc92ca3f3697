"""Command-line surface.

Subcommands: synth, label, train, eval, permtest, params.  Runs are driven
by a flat dotted-key config file (`model.heads = 2` style); command-line
`--set key=value` flags override file values.  Every artifact-producing
command writes the exact RunConfig it used into its output directory and
stamps the config hash into checkpoints and reports.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

import argparse
import os
import sys

import numpy as np

from . import configio, evaluation, lob, permtest, training
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    DivergenceError,
)
from .lob import SynthConfig
from .model import AxialLobModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="axial-lob", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic event series")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--events", type=int, default=12000)
    p_synth.add_argument("--signal", type=float, default=1.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--noise", type=float, default=None)
    p_synth.add_argument("--persistence", type=int, default=None)

    p_label = sub.add_parser("label", help="label a series and report class counts")
    p_label.add_argument("--in", dest="infile", required=True)
    p_label.add_argument("--k", type=int, required=True)
    p_label.add_argument("--alpha", type=float, default=0.002)
    p_label.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="train a model from a run config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--set", dest="overrides", action="append", default=[])

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a data file")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--set", dest="overrides", action="append", default=[])

    p_perm = sub.add_parser("permtest", help="input-permutation robustness study")
    p_perm.add_argument("--checkpoint", required=True)
    p_perm.add_argument("--data", required=True)
    p_perm.add_argument("--trials", type=int, default=5)
    p_perm.add_argument("--seed", type=int, default=0)
    p_perm.add_argument("--out", default=None)
    p_perm.add_argument("--set", dest="overrides", action="append", default=[])

    p_params = sub.add_parser("params", help="report the learnable parameter count")
    p_params.add_argument("--config", default=None)
    p_params.add_argument("--set", dest="overrides", action="append", default=[])

    return parser


def _apply_overrides(pairs, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _load_run_config(path, overrides):
    if path is None:
        pairs = {}
    else:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        pairs = configio.load_kv(path)
    return _apply_overrides(pairs, overrides)


def _require_file(path):
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    return path


def _load_series(pairs, path):
    fmt = pairs.get("data.format", "canonical-csv")
    feature_rows = None
    if "fi2010.feature_rows" in pairs:
        feature_rows = [int(x) for x in pairs["fi2010.feature_rows"].split(",")]
    return lob.ingest(_require_file(path), fmt=fmt, feature_rows=feature_rows)


def _write_run_config(out_dir, pairs):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(configio.canonical_text(pairs))
    return configio.config_hash(pairs)


def _datasets_from_pairs(pairs, data_path, stats=None):
    series = _load_series(pairs, data_path)
    k = configio.get_typed(pairs, "data.k", int, 10)
    alpha = configio.get_typed(pairs, "data.alpha", float, 0.002)
    normalize = configio.get_typed(pairs, "data.normalize", bool, True)
    return lob.prepare_datasets(series, k, alpha, normalize=normalize, stats=stats), k, alpha


def cmd_synth(args):
    cfg = SynthConfig(events=args.events, signal_strength=args.signal)
    if args.noise is not None:
        cfg.noise = args.noise
    if args.persistence is not None:
        cfg.persistence = args.persistence
    series = lob.synth_generate(cfg, args.seed)
    lob.export_csv(series, args.out)
    acc = lob.planted_signal_accuracy(series, k=10, alpha=0.002)
    print(f"wrote {len(series)} events to {args.out}")
    print(f"planted signal accuracy (k=10, alpha=0.002): {acc:.4f}")
    return 0


def cmd_label(args):
    series = lob.ingest(_require_file(args.infile))
    anchors, labels = lob.label_series(series, args.k, args.alpha)
    if len(anchors) == 0:
        raise DataError(f"series too short to label with k={args.k}")
    lob.export_labels_csv(anchors, labels, args.k, args.out)
    counts = np.bincount(labels, minlength=3)
    total = counts.sum()
    print(f"wrote {total} labels to {args.out}")
    print("class distribution:")
    for code, name in enumerate(lob.LABEL_NAMES):
        print(f"  {name:>10}: {counts[code]:>8} ({counts[code] / total:.1%})")
    return 0


def cmd_train(args):
    pairs = _load_run_config(args.config, args.overrides)
    model_cfg = ModelConfig.from_pairs(pairs)
    train_cfg = TrainConfig.from_pairs(pairs)
    data_path = configio.get_typed(pairs, "data.path", str)
    if data_path is None:
        raise ConfigError("missing required config key 'data.path'")
    out_dir = pairs.get("run.out_dir", "runs/train")
    cfg_hash = _write_run_config(out_dir, pairs)

    datasets, k, alpha = _datasets_from_pairs(pairs, data_path)
    model = AxialLobModel(model_cfg)
    state = training.train(
        model, datasets.train, datasets.val, train_cfg,
        out_dir=out_dir, log_path=os.path.join(out_dir, "metrics.log"),
    )
    meta = {"run.config_hash": cfg_hash, "data.k": k, "data.alpha": alpha}
    meta.update(train_cfg.to_pairs())
    meta.update(datasets.stats.to_pairs())
    save_checkpoint(model, os.path.join(out_dir, "final.ckpt"), extra_meta=meta)
    report = evaluation.evaluate_model(
        model, datasets.test, metadata={"config_hash": cfg_hash, "split": "test"}
    )
    report.save(os.path.join(out_dir, "test_metrics.txt"))
    print(f"trained {state.epoch + 1} epochs, steps {state.t_cur}, "
          f"best val loss {state.best_val_loss:.6f} at epoch {state.best_epoch}")
    print(f"test macro-F1: {report.macro_f1:.4f}")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_eval(args):
    pairs = _load_run_config(None, args.overrides)
    model, meta = load_checkpoint(_require_file(args.checkpoint))
    merged = dict(meta)
    merged.update(pairs)
    k = configio.get_typed(merged, "data.k", int, 10)
    alpha = configio.get_typed(merged, "data.alpha", float, 0.002)
    stats = lob.FeatureStats.from_pairs(merged)
    series = _load_series(merged, args.data)
    datasets = lob.prepare_datasets(series, k, alpha, stats=stats)
    report = evaluation.evaluate_model(
        model, datasets.test,
        metadata={"checkpoint": args.checkpoint,
                  "config_hash": meta.get("run.config_hash", "unknown")},
    )
    text = report.to_text()
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        _write_run_config(args.out, merged)
        report.save(os.path.join(args.out, "metrics.txt"))
    sys.stdout.write(text)
    return 0


def cmd_permtest(args):
    pairs = _load_run_config(None, args.overrides)
    start_model, meta = load_checkpoint(_require_file(args.checkpoint))
    merged = dict(meta)
    merged.update(pairs)
    train_cfg = TrainConfig.from_pairs(merged)
    stats = lob.FeatureStats.from_pairs(merged)
    series = _load_series(merged, args.data)
    k = configio.get_typed(merged, "data.k", int, 10)
    alpha = configio.get_typed(merged, "data.alpha", float, 0.002)
    datasets = lob.prepare_datasets(series, k, alpha, stats=stats)
    study = permtest.permutation_robustness(
        start_model, datasets, train_cfg, trials=args.trials, seed=args.seed
    )
    csv_text = study.to_csv()
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        _write_run_config(args.out, merged)
        study.save(os.path.join(args.out, "permutation_study.csv"))
    sys.stdout.write(csv_text)
    return 0


def cmd_params(args):
    pairs = _load_run_config(args.config, args.overrides)
    model_cfg = ModelConfig.from_pairs(pairs)
    model = AxialLobModel(model_cfg)
    print(model.parameter_count())
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "permtest": cmd_permtest,
    "params": cmd_params,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except CheckpointFormatError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
