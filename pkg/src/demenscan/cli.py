"""``demenscan`` command line: train, evaluate, kfold, explain, filters.

Every run writes its fully resolved configuration to ``<out-dir>/config.json``;
``demenscan <command> --config <that file>`` replays the run.
Exit codes: 0 success, 1 runtime/pipeline error, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import CLASS_NAMES, DecodeError, LayoutError, decode_image, load_manifest, \
    scan_dataset, stratified_split
from .model import CorruptCheckpointError, checkpoint_load, checkpoint_save, model_forward, \
    softmax
from .tensor import ParameterError, ShapeError
from .training import REFERENCE_TARGETS, TrainConfig, TrainingDiverged, evaluate, kfold_run, \
    train
from .xai import feature_maps, filter_grid, guided_backprop, visualize_filters

log = logging.getLogger("demenscan")


class UsageError(Exception):
    pass


def default_config() -> dict:
    return {
        "command": None,
        "data_dir": None,
        "manifest": None,
        "out_dir": "demenscan-out",
        "model": None,
        "train_fraction": 0.8,
        "subset": "val",
        "folds": 5,
        "image": None,
        "class": None,
        "layer": 1,
        "count": 6,
        "maps": 6,
        "train": TrainConfig().to_dict(),
    }


def _merge(base: dict, update: dict, where: str = ""):
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=S, help="JSON config file (flags override it)")
    common.add_argument("--out-dir", dest="out_dir", default=S, help="directory for all outputs")
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data-dir", dest="data_dir", default=S,
                      help="corpus root with one directory per class")
    data.add_argument("--manifest", default=S, help="JSON list of {path, label}")
    data.add_argument("--train-fraction", dest="train_fraction", type=float, default=S)

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--epochs", type=int, default=S)
    hyper.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    hyper.add_argument("--lr", type=float, default=S)
    hyper.add_argument("--image-size", dest="image_size", type=int, default=S,
                       help="square input side (multiple of 16)")
    hyper.add_argument("--filters", type=_int_list, default=S, help="e.g. 32,64,128,64")
    hyper.add_argument("--fc-widths", dest="fc_widths", type=_int_list, default=S)
    hyper.add_argument("--dropout", type=float, default=S)

    parser = argparse.ArgumentParser(prog="demenscan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common, data, hyper], help="train and save a checkpoint")
    p.add_argument("--out", dest="model", default=S, help="checkpoint path")

    p = sub.add_parser("evaluate", parents=[common, data], help="confusion matrix on a subset")
    p.add_argument("--model", default=S)
    p.add_argument("--subset", choices=("val", "train", "all"), default=S)

    p = sub.add_parser("kfold", parents=[common, data, hyper], help="stratified K-fold CV")
    p.add_argument("--folds", type=int, default=S)

    p = sub.add_parser("explain", parents=[common], help="prediction + saliency + feature maps")
    p.add_argument("--image", default=S)
    p.add_argument("--model", default=S)
    p.add_argument("--class", dest="class", type=int, default=S)
    p.add_argument("--maps", type=int, default=S, help="feature maps per layer")

    p = sub.add_parser("filters", parents=[common], help="render conv filter planes")
    p.add_argument("--model", default=S)
    p.add_argument("--layer", type=int, default=S)
    p.add_argument("--count", type=int, default=S)
    return parser


_TRAIN_FLAGS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate",
                "seed": "seed"}
_PATH_KEYS = ("data_dir", "manifest", "out_dir", "model", "image")


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    flags = vars(args)
    if "config" in flags:
        try:
            loaded = json.loads(Path(flags["config"]).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {flags['config']}: {exc}")
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        if loaded.get("command") not in (None, args.command):
            raise UsageError(f"config was written by {loaded['command']!r}, not {args.command!r}")
        _merge(cfg, loaded)
    for key in ("data_dir", "manifest", "out_dir", "model", "train_fraction", "subset",
                "folds", "image", "class", "layer", "count", "maps"):
        if key in flags:
            cfg[key] = flags[key]
    if args.command == "train" and "model" in flags and "out_dir" not in flags:
        cfg["out_dir"] = str(Path(flags["model"]).parent)
    for flag, key in _TRAIN_FLAGS.items():
        if flag in flags:
            cfg["train"][key] = flags[flag]
    spec = cfg["train"]["spec"]
    if "image_size" in flags:
        spec["input_size"] = [flags["image_size"], flags["image_size"], spec["input_size"][2]]
    if "filters" in flags:
        spec["filters"] = flags["filters"]
    if "fc_widths" in flags:
        spec["fc_widths"] = flags["fc_widths"]
    if "dropout" in flags:
        spec["dropout_rate"] = flags["dropout"]
    for key in _PATH_KEYS:
        if cfg[key] is not None:
            cfg[key] = str(Path(cfg[key]).resolve())
    cfg["command"] = args.command
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (ParameterError, TypeError) as exc:
        raise UsageError(f"invalid training config: {exc}")


def _load_index(cfg: dict):
    if cfg["manifest"]:
        return load_manifest(cfg["manifest"])
    if not cfg["data_dir"]:
        raise UsageError("--data-dir (or --manifest) is required")
    if not Path(cfg["data_dir"]).is_dir():
        raise UsageError(f"data directory {cfg['data_dir']} does not exist")
    return scan_dataset(cfg["data_dir"])


def _require(cfg: dict, *keys):
    for key in keys:
        if cfg[key] is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="L").save(path, format="PNG")


def _metrics_lines(metrics) -> str:
    return "".join(json.dumps(vars(em), sort_keys=True) + "\n" for em in metrics.epochs)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    return out


def cmd_train(cfg: dict) -> int:
    config = _train_config(cfg)
    if not 0 < cfg["train_fraction"] < 1:
        raise UsageError("--train-fraction must be in (0, 1)")
    index = _load_index(cfg)
    out = _out_dir(cfg)
    ckpt = Path(cfg["model"]) if cfg["model"] else out / "model.ckpt"
    train_idx, val_idx = stratified_split(index, cfg["train_fraction"], config.seed)
    log.info("training on %d samples %s, validating on %d %s", len(train_idx),
             train_idx.per_class_counts, len(val_idx), val_idx.per_class_counts)
    metrics_path = out / "metrics.ndjson"
    metrics_path.write_text("")

    def append(em):
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(vars(em), sort_keys=True) + "\n")

    params, metrics = train(config, train_idx, val_idx, on_epoch=append)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(config.spec, params, ckpt)
    f = metrics.final
    print(f"train accuracy {f.train_acc:.4f} loss {f.train_loss:.4f}")
    print(f"val accuracy {f.val_acc:.4f} loss {f.val_loss:.4f}")
    print(f"checkpoint written to {ckpt}")
    return 0


def confusion_csv(cm: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = [CLASS_NAMES[i] for i in range(cm.shape[0])]
    writer.writerow(["true\\predicted", *names])
    for name, row in zip(names, cm):
        writer.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "model")
    spec, params = checkpoint_load(cfg["model"])
    index = _load_index(cfg)
    if cfg["subset"] != "all":
        seed = cfg["train"]["seed"]
        train_idx, val_idx = stratified_split(index, cfg["train_fraction"], seed)
        index = val_idx if cfg["subset"] == "val" else train_idx
    out = _out_dir(cfg)
    result = evaluate(spec, params, index)
    (out / "confusion.csv").write_text(confusion_csv(result.confusion))
    per_class = dict(zip(CLASS_NAMES, result.per_class_accuracy()))
    _write_json(out / "per_class_accuracy.json", per_class)
    _write_json(out / "evaluation.json", {"accuracy": result.accuracy, "loss": result.loss,
                                          "samples": len(index), "subset": cfg["subset"]})
    print(f"accuracy {result.accuracy:.4f} loss {result.loss:.4f} on {len(index)} samples")
    for name, acc in per_class.items():
        print(f"  {name:<17} {'n/a' if acc is None else f'{acc:.4f}'}")
    return 0


def cmd_kfold(cfg: dict) -> int:
    config = _train_config(cfg)
    if cfg["folds"] < 2:
        raise UsageError("--folds must be >= 2")
    index = _load_index(cfg)
    out = _out_dir(cfg)

    def save_fold(f, metrics):
        d = out / f"fold_{f + 1}"
        d.mkdir(exist_ok=True)
        (d / "metrics.ndjson").write_text(_metrics_lines(metrics))

    try:
        report = kfold_run(config, index, cfg["folds"], on_fold=save_fold)
    except ParameterError as exc:
        raise UsageError(str(exc))
    folds = [{"fold": i + 1, "val_accuracy": m.final.val_acc, "val_loss": m.final.val_loss,
              "train_accuracy": m.final.train_acc, "train_loss": m.final.train_loss}
             for i, m in enumerate(report.fold_metrics)]
    _write_json(out / "kfold_report.json", {
        "folds": folds, "mean": report.mean, "std": report.std,
        "reference": {"mean": REFERENCE_TARGETS["kfold_mean"],
                      "std": REFERENCE_TARGETS["kfold_std"]}})
    print(f"{cfg['folds']}-fold validation accuracy: mean {report.mean:.4f} "
          f"std {report.std:.4f}")
    return 0


def cmd_explain(cfg: dict) -> int:
    _require(cfg, "model", "image")
    spec, params = checkpoint_load(cfg["model"])
    x = decode_image(cfg["image"], spec.input_size)
    logits = model_forward(spec, params, x, "eval").logits
    probs = softmax(logits.astype(np.float64))
    predicted = int(np.argmax(logits))
    target = predicted if cfg["class"] is None else cfg["class"]
    if not 0 <= target < spec.num_classes:
        raise UsageError(f"--class must be in 0..{spec.num_classes - 1}")
    if not 1 <= cfg["maps"] <= min(spec.filters):
        raise UsageError(f"--maps must be in 1..{min(spec.filters)}")
    out = _out_dir(cfg)
    index = {}
    sal = guided_backprop(spec, params, x, target)
    _write_png(out / "saliency.png", sal.image)
    index["saliency.png"] = {"class": target, "class_name": CLASS_NAMES[target]}
    for layer in range(1, 5):
        fm = feature_maps(spec, params, x, layer, cfg["maps"])
        for j, img in enumerate(fm.images):
            name = f"feature_maps/layer{layer}/filter{j}.png"
            _write_png(out / name, img)
            index[name] = {"layer": layer, "filter": j}
    _write_json(out / "index.json", index)
    _write_json(out / "prediction.json", {
        "class_index": predicted, "class_name": CLASS_NAMES[predicted],
        "probabilities": probs.tolist(),
        "target_class_index": target, "target_class_name": CLASS_NAMES[target]})
    print(f"prediction: {CLASS_NAMES[predicted]} (p={probs[predicted]:.4f}); "
          f"saliency for {CLASS_NAMES[target]} in {out}")
    return 0


def cmd_filters(cfg: dict) -> int:
    _require(cfg, "model")
    spec, params = checkpoint_load(cfg["model"])
    layer, count = cfg["layer"], cfg["count"]
    if layer not in (1, 2, 3, 4):
        raise UsageError("--layer must be in 1..4")
    if not 1 <= count <= spec.filters[layer - 1]:
        raise UsageError(f"--count must be in 1..{spec.filters[layer - 1]} for layer {layer}")
    out = _out_dir(cfg)
    images = visualize_filters(params, layer, count)
    _write_png(out / "grid.png", filter_grid(images))
    index = {"grid.png": {"layer": layer, "rows": count, "columns": images[-1].channel + 1}}
    for im in images:
        name = f"cells/filter{im.filter}_channel{im.channel}.png"
        _write_png(out / name, im.image)
        index[name] = {"layer": layer, "filter": im.filter, "channel": im.channel}
    _write_json(out / "index.json", index)
    print(f"{count} x {images[-1].channel + 1} filter grid written to {out / 'grid.png'}")
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "kfold": cmd_kfold,
            "explain": cmd_explain, "filters": cmd_filters}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"demenscan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LayoutError, DecodeError, CorruptCheckpointError, TrainingDiverged, ShapeError,
            ParameterError, OSError) as exc:
        print(f"demenscan {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
