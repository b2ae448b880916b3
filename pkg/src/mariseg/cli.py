"""Operator command line: synth, train, eval, profile, analyze.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Flag defaults can be pre-set from a JSON config file via ``--config``;
explicit flags override it.  Every report embeds the resolved settings and
the package version.
"""

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import __version__, checkpoint
from .data import load_dataset, synth_generate
from .errors import ConfigError, DatasetError, ShapeError
from .evaluation import EvalConfig, aggregate, evaluate_frame
from .losses import LossConfig
from .models import ModelConfig, build, summary
from .profiling import (channel_weight_diversity, full_report, rank_by_imu_weight,
                        replacement_sweep)
from .train import TrainConfig, batch_tensors, fit

USAGE_ERRORS = (ConfigError, DatasetError, ShapeError, FileNotFoundError, NotADirectoryError)


def _write_json(path, payload, resolved):
    payload = dict(payload)
    payload.setdefault("config", resolved)
    payload.setdefault("version", __version__)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _resolved(args, skip=("func", "config")):
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _model_config(args, input_size):
    return ModelConfig(variant=args.variant, backbone=args.backbone,
                       input_size=input_size)


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise DatasetError(f"{what} directory not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    out = Path(args.out)
    stems = synth_generate(args.seed, args.count, args.height, args.width, out)
    manifest = json.loads((out / "dataset.json").read_text())
    manifest["config"] = _resolved(args)
    manifest["version"] = __version__
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(stems)} scenes to {out}")
    return 0


def _load_model_for(args, dataset):
    sample = dataset[0]
    input_size = tuple(sample.label.shape)
    if args.checkpoint:
        _, meta = checkpoint.load(args.checkpoint)
        if "model_config" in meta:
            cfg = ModelConfig.from_dict(meta["model_config"])
        else:
            cfg = _model_config(args, input_size)
        model = build(cfg)
        checkpoint.load_into(model, args.checkpoint)
    else:
        torch.manual_seed(args.seed)
        model = build(_model_config(args, input_size))
    return model


def cmd_train(args):
    train_dir = _require_dir(args.dataset, "training dataset")
    train_set = load_dataset(train_dir)
    val_set = load_dataset(_require_dir(args.val_dataset, "validation dataset")) \
        if args.val_dataset else train_set
    if not train_set:
        raise DatasetError(f"no samples in {train_dir}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    input_size = tuple(train_set[0].label.shape)
    model_cfg = _model_config(args, input_size)
    train_cfg = TrainConfig(lr_backbone=args.lr_backbone, lr_decoder=args.lr_decoder,
                            batch_size=args.batch_size, max_epochs=args.max_epochs,
                            patience=args.patience, seed=args.seed)
    loss_cfg = LossConfig(separation_weight=args.separation_weight,
                          weight_decay=args.weight_decay)

    torch.manual_seed(args.seed)
    start_epoch = 0
    model = build(model_cfg)
    if args.resume:
        meta = checkpoint.load_into(model, args.resume)
        start_epoch = int(meta.get("epoch", -1)) + 1

    result = fit(model, train_set, val_set, train_cfg, loss_cfg,
                 log_path=out / "train_log.ndjson", start_epoch=start_epoch)

    ckpt_path = out / "checkpoint.npz"
    checkpoint.save(model, ckpt_path, meta={
        "epoch": result.best_epoch, "val_loss": result.best_val_loss,
        "model_config": model_cfg.to_dict(), "version": __version__,
        "config": _resolved(args)})
    _write_json(out / "train_summary.json", {
        "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
        "stopped_epoch": result.stopped_epoch, "epochs_run": len(result.log),
        "final_train_pixel_acc": result.log[-1]["train_pixel_acc"] if result.log else None,
        "checkpoint": str(ckpt_path)}, _resolved(args))
    print(f"best epoch {result.best_epoch} val loss {result.best_val_loss:.6f} "
          f"-> {ckpt_path}")
    return 0


def _predict_masks(model, dataset):
    model.eval()
    masks = []
    with torch.no_grad():
        for start in range(0, len(dataset), 8):
            chunk = dataset[start:start + 8]
            images, _, imus = batch_tensors(chunk)
            probs, _ = model(images, imus)
            masks.extend(p for p in probs.argmax(dim=1).cpu().numpy().astype(np.uint8))
    return masks


def _load_prediction_masks(pred_dir, dataset):
    from PIL import Image
    pred_dir = _require_dir(pred_dir, "predictions")
    masks = []
    missing = []
    for sample in dataset:
        path = pred_dir / f"{sample.stem}.png"
        if not path.is_file():
            missing.append(str(path))
            continue
        masks.append(np.asarray(Image.open(path).convert("L")))
    if missing:
        raise DatasetError("missing prediction masks:\n" + "\n".join(missing))
    return masks


def cmd_eval(args):
    dataset = load_dataset(_require_dir(args.dataset, "evaluation dataset"))
    missing = [s.stem for s in dataset if s.annotation is None]
    if missing:
        raise DatasetError(f"samples without annotations: {missing[:8]}")
    if not args.oracle and not args.checkpoint and not args.predictions:
        raise ConfigError("eval needs --checkpoint, --predictions, or --oracle")

    if args.oracle:
        masks = [s.label for s in dataset]
    elif args.predictions:
        masks = _load_prediction_masks(args.predictions, dataset)
    else:
        model = _load_model_for(args, dataset)
        masks = _predict_masks(model, dataset)

    eval_cfg = EvalConfig(coverage_threshold=args.coverage_threshold,
                          min_blob_area=args.min_blob_area)
    frames = [evaluate_frame(mask, sample.annotation, eval_cfg, stem=sample.stem)
              for mask, sample in zip(masks, dataset)]
    report = aggregate(frames, eval_cfg,
                       metadata={"config": _resolved(args), "version": __version__})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    header = "we_rmse\tprecision\trecall\tf1\tdanger_precision\tdanger_recall\tdanger_f1"
    (out / "metrics.tsv").write_text(header + "\n" + report.summary_row() + "\n")
    print(header)
    print(report.summary_row())
    return 0


def cmd_profile(args):
    cfg = ModelConfig(variant=args.variant, backbone=args.backbone,
                      input_size=(args.height, args.width))
    reference = None
    if args.targets:
        reference = json.loads(Path(args.targets).read_text())
    if args.repeats:
        torch.manual_seed(args.seed)
        model = build(cfg)
    else:
        with torch.device("meta"):
            model = build(cfg)
    report = full_report(model, (args.height, args.width), repeats=args.repeats,
                         reference=reference)
    report.metadata["config"] = _resolved(args)

    payload = report.to_dict()
    schema = json.loads(resources.files("mariseg.schemas")
                        .joinpath("cost_report.schema.json").read_text())
    jsonschema.validate(payload, schema)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cost_report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "cost_report.txt").write_text(report.to_table() + "\n")
    (out / "model_summary.txt").write_text(summary(model) + "\n")
    print(report.to_table())

    if args.sweep:
        if cfg.variant == "ewasr":
            raise ConfigError("--sweep applies to wasr variants only")
        sweep = replacement_sweep(cfg, (args.height, args.width))
        sweep["config"] = _resolved(args)
        (out / "replacement_sweep.json").write_text(
            json.dumps(sweep, indent=2, sort_keys=True) + "\n")
        for row in sweep["replacements"]:
            print(f"-{row['replaced_block']:<8s} flops delta {row['flops_delta']:+,}")
    return 0


def cmd_analyze(args):
    dataset = load_dataset(_require_dir(args.dataset, "analysis dataset"))
    if not dataset:
        raise DatasetError(f"no samples in {args.dataset}")
    model = _load_model_for(args, dataset)

    diversity = channel_weight_diversity(model, dataset, bins=args.bins)
    ranking = rank_by_imu_weight(model, dataset)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "gate_diversity.json",
                {"gates": diversity, "n_samples": len(dataset)}, _resolved(args))
    _write_json(out / "imu_weight_ranking.json",
                {"ranking": ranking, "n_samples": len(dataset)}, _resolved(args))
    shown = [r["stem"] for r in ranking[:3]]
    print(f"analyzed {len(dataset)} samples, {len(diversity)} channel gates; "
          f"top IMU-weight stems: {shown}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="mariseg",
                                     description="maritime obstacle-detection toolkit")
    parser.add_argument("--config", help="JSON file with default flag values")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    p = subparsers["synth"] = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = subparsers["train"] = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="ewasr")
    p.add_argument("--backbone", default="resnet18")
    p.add_argument("--lr-backbone", type=float, default=1e-6)
    p.add_argument("--lr-decoder", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--separation-weight", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = subparsers["eval"] = sub.add_parser("eval", help="detection-benchmark evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true",
                   help="score ground-truth masks as predictions")
    p.add_argument("--predictions",
                   help="directory of predicted label masks (<stem>.png) to score")
    p.add_argument("--variant", default="ewasr")
    p.add_argument("--backbone", default="resnet18")
    p.add_argument("--coverage-threshold", type=float, default=0.5)
    p.add_argument("--min-blob-area", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = subparsers["profile"] = sub.add_parser("profile", help="per-block parameter/FLOP/time report")
    p.add_argument("--variant", default="ewasr")
    p.add_argument("--backbone", default="resnet18")
    p.add_argument("--height", type=int, default=384)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--repeats", type=int, default=0,
                   help="timing repeats (0 disables wall-time measurement)")
    p.add_argument("--sweep", action="store_true",
                   help="also emit per-block conv1x1-replacement FLOP deltas")
    p.add_argument("--targets", help="JSON file of reference values to echo in the report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = subparsers["analyze"] = sub.add_parser("analyze", help="gate diversity and IMU-weight ranking")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="wasr_light")
    p.add_argument("--backbone", default="resnet18")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)
    return parser, subparsers


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre_args, _ = pre.parse_known_args(argv)
    parser, subparsers = build_parser()
    if pre_args.config:
        path = Path(pre_args.config)
        if not path.is_file():
            print(f"error: config file not found: {path}", file=sys.stderr)
            return 2
        defaults = json.loads(path.read_text())
        known = {a.dest for sp in subparsers.values() for a in sp._actions}
        unknown = set(defaults) - known
        if unknown:
            print(f"error: unknown config keys: {sorted(unknown)}", file=sys.stderr)
            return 2
        for sp in subparsers.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in defaults.items() if k in dests})
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
