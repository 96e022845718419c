"""Command-line entry point: ``threeet <subcommand> [flags]``.

Every subcommand writes its outputs into a directory given by ``--out``
together with a ``manifest.txt`` recording the resolved configuration, so a
run can be repeated with ``threeet rerun --manifest DIR/manifest.txt``.

Exit codes: 0 success, 2 usage error, 3 invalid data or weights,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .cells import CHANGE_BASED, VANILLA
from .errors import DatasetError, NumericalError, WeightFileError
from .events import (
    DEFAULT_DELTA_T_US,
    SyntheticSceneConfig,
    _atomic_write,
    make_synthetic_dataset,
    read_dataset,
    write_dataset,
)
from .metrics import count_dense_macs, detection_rates, pretty_table, to_csv
from .model import ModelConfig, build_model, load_weights, save_weights
from .sweeps import (
    LAYER_COLUMNS,
    SEQLEN_COLUMNS,
    THETA_COLUMNS,
    evaluate_with_stats,
    sweep_sequence_length,
    sweep_theta,
)
from .tensor import OpsCounter
from .training import TrainConfig, evaluate_streams, prepare_streams, sub_seed, train

log = logging.getLogger("threeet")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

EVAL_COLUMNS = [
    "region", "frames", "p3", "p5", "p10", "inp_sp", "hid_sp", "tot_sp", "net_tot_sp",
    "dense_macs_per_frame", "effective_macs_per_frame", "conv_effective_macs_per_frame",
]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output {out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path, text):
    _atomic_write(Path(path), text.encode())


def _write_manifest(out, args, extra, started):
    items = {"tool": "threeet", "version": __version__, "command": args.command}
    for k, v in sorted(vars(args).items()):
        if k in ("command", "func"):
            continue
        items[f"arg.{k}"] = ",".join(map(str, v)) if isinstance(v, (list, tuple)) else v
    items.update(extra)
    items["started"] = started
    items["finished"] = _now()
    _write_text(Path(out) / "manifest.txt", "".join(f"{k}={v}\n" for k, v in items.items()))


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_data(dirs):
    return [read_dataset(d) for d in dirs]


def _train_config(args):
    return TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        seq_len=args.seq_len,
        split=args.split,
        theta=args.theta,
        seed=args.seed,
        stride=args.stride,
        clips_per_epoch=args.clips_per_epoch,
    )


def _model_config(args, datasets):
    ds = datasets[0]
    return ModelConfig(
        width=ds.width, height=ds.height, cell=args.cell, theta=args.theta, seq_len=args.seq_len
    )


def _config_items(prefix, cfg):
    return {f"{prefix}.{f.name}": getattr(cfg, f.name) for f in fields(cfg)}


def _rescale(preds, labels, model_cfg, eval_size):
    if eval_size is None:
        return preds, labels
    s = np.array(eval_size, dtype=np.float64) / [model_cfg.width, model_cfg.height]
    return preds * s, labels * s


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    started = _now()
    out = _prepare_out(args.out, args.force)
    scene = SyntheticSceneConfig(width=args.width, height=args.height, seed=args.seed)
    duration_us = int(round(args.duration_s * 1e6))
    ds = make_synthetic_dataset(scene, duration_us, args.delta_t_us)
    write_dataset(out, ds)
    log.info("wrote %d events, %d frames to %s", len(ds.events), ds.num_frames, out)
    extra = _config_items("scene", scene)
    extra.update({"seed.generation": args.seed, "frames": ds.num_frames, "events": len(ds.events)})
    _write_manifest(out, args, extra, started)


def cmd_train(args):
    started = _now()
    datasets = _load_data(args.data)
    out = _prepare_out(args.out, args.force)
    mcfg = _model_config(args, datasets)
    tcfg = _train_config(args)
    model = build_model(mcfg, sub_seed(args.seed, "init"))
    _, report = train(model, datasets, tcfg)
    save_weights(model, out / "weights.bin")
    _write_text(out / "report.csv", report.to_csv())
    extra = {**_config_items("model", mcfg), **_config_items("train", tcfg)}
    extra.update({"seed.init": sub_seed(args.seed, "init"), "seed.shuffle": sub_seed(args.seed, "shuffle")})
    _write_manifest(out, args, extra, started)


def _eval_model(args):
    model = load_weights(args.weights)
    cfg = model.config
    if args.cell is not None or args.theta is not None:
        model = model.with_cell(args.cell, args.theta)
    return model, args.seq_len or cfg.seq_len


def cmd_eval(args):
    started = _now()
    datasets = _load_data(args.data)
    model, seq_len = _eval_model(args)
    out = _prepare_out(args.out, args.force)
    streams = prepare_streams(datasets, args.split, model.config.np_dtype)
    rows, layer_rows = [], []
    regions = ["train", "val"] if args.region == "both" else [args.region]
    for region in regions:
        row, summary, preds = evaluate_with_stats(model, streams, seq_len, region)
        if args.eval_size is not None:
            labels = np.concatenate([
                s.labels[s.val_range[0]:] if region == "val" else s.labels[: s.train_end] for s in streams
            ])
            row.update(detection_rates(*_rescale(preds, labels, model.config, args.eval_size)))
        rows.append({"region": region, "frames": len(preds), **row})
        layer_rows += [{"region": region, **r} for r in summary["layers"]]
    _write_text(out / "metrics.csv", to_csv(rows, EVAL_COLUMNS))
    _write_text(out / "layers.csv", to_csv(layer_rows, ["region"] + LAYER_COLUMNS[1:]))
    print(pretty_table(rows, EVAL_COLUMNS[:5] + ["hid_sp", "tot_sp"]))
    extra = _config_items("model", model.config)
    extra["eval.seq_len"] = seq_len
    _write_manifest(out, args, extra, started)


def cmd_sweep_theta(args):
    started = _now()
    datasets = _load_data(args.data)
    model = load_weights(args.weights)
    out = _prepare_out(args.out, args.force)
    rows, layer_rows = sweep_theta(model, datasets, args.thetas, args.seq_len, args.region, args.split)
    _write_text(out / "theta.csv", to_csv(rows, THETA_COLUMNS))
    _write_text(out / "theta_layers.csv", to_csv(layer_rows, LAYER_COLUMNS))
    print(pretty_table(rows, ["theta", "p3", "p5", "p10", "hid_sp", "tot_sp", "effective_macs_per_frame"]))
    _write_manifest(out, args, _config_items("model", model.config), started)


def cmd_sweep_seqlen(args):
    started = _now()
    datasets = _load_data(args.data)
    out = _prepare_out(args.out, args.force)
    mcfg = _model_config(args, datasets)
    tcfg = _train_config(args)
    rows = sweep_sequence_length(
        datasets, args.seq_lens, tcfg, mcfg, progress=lambda r: log.info("seq_len %s", r)
    )
    _write_text(out / "seqlen.csv", to_csv(rows, SEQLEN_COLUMNS))
    print(pretty_table(rows, SEQLEN_COLUMNS))
    extra = {**_config_items("model", mcfg), **_config_items("train", tcfg)}
    _write_manifest(out, args, extra, started)


def cmd_count_ops(args):
    started = _now()
    out = _prepare_out(args.out, args.force)
    if args.weights is None and args.data:
        raise UsageError("count-ops with --data also needs --weights")
    if args.weights is not None:
        model, seq_len = _eval_model(args)
        cfg = model.config
    else:
        cfg = ModelConfig(width=args.width, height=args.height, cell=args.cell or VANILLA,
                          theta=args.theta or 0.0)
    dense = count_dense_macs(cfg)
    rows = [
        {"layer": layer, "path": path, "dense_macs_per_frame": macs}
        for (layer, path), macs in dense.items()
    ]
    if args.data:
        datasets = _load_data(args.data)
        streams = prepare_streams(datasets, args.split, cfg.np_dtype)
        counter = OpsCounter()
        preds, _ = evaluate_streams(model, streams, seq_len, args.region, counter=counter)
        for row in rows:
            d, e = counter.per_layer[(row["layer"], row["path"])]
            row["effective_macs_per_frame"] = e / len(preds)
            row["sparsity"] = 1.0 - e / d
    conv = sum(v for k, v in dense.items() if k[0].startswith("layer"))
    total = {"layer": "conv_total", "path": "", "dense_macs_per_frame": conv}
    if args.data:
        total["effective_macs_per_frame"] = sum(
            r["effective_macs_per_frame"] for r in rows if r["layer"].startswith("layer")
        )
    rows.append(total)
    columns = ["layer", "path", "dense_macs_per_frame", "effective_macs_per_frame", "sparsity"]
    _write_text(out / "ops.csv", to_csv(rows, columns))
    print(pretty_table(rows, columns if args.data else columns[:3]))
    print(f"conv dense MACs per timestep: {conv:,} ({conv / 1e6:.2f}M)")
    _write_manifest(out, args, _config_items("model", cfg), started)


def cmd_rerun(args):
    items = {}
    for line in Path(args.manifest).read_text().splitlines():
        k, sep, v = line.partition("=")
        if sep:
            items[k] = v
    command = items.get("command")
    if command not in COMMANDS:
        raise UsageError(f"manifest names no runnable command ({command!r})")
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    argv = [command]
    for action in sub._actions:
        if not action.option_strings or action.dest == "help":
            continue
        key = f"arg.{action.dest}"
        if action.dest == "out" and args.out is not None:
            argv += [action.option_strings[0], args.out]
            continue
        if key not in items or items[key] in ("None", ""):
            continue
        value = items[key]
        if isinstance(action, argparse._StoreTrueAction):
            if value == "True":
                argv.append(action.option_strings[0])
        elif action.nargs == "+":
            argv += [action.option_strings[0], *value.split(",")]
        else:
            argv += [action.option_strings[0], value]
    if args.force and "--force" not in argv:
        argv.append("--force")
    log.info("rerun: %s", " ".join(argv))
    return main(argv)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-theta": cmd_sweep_theta,
    "sweep-seqlen": cmd_sweep_seqlen,
    "count-ops": cmd_count_ops,
}


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--data", nargs="+", required=True, help="dataset directories")
    p.add_argument("--cell", choices=[VANILLA, CHANGE_BASED], default=VANILLA)
    p.add_argument("--theta", type=float, default=d.theta, help="threshold active during training")
    p.add_argument("--seq-len", type=int, default=d.seq_len)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--split", type=float, default=d.split)
    p.add_argument("--stride", type=int, default=d.stride, help="clip stride (1 = every frame)")
    p.add_argument("--clips-per-epoch", type=int, default=None,
                   help="train on a seeded random subset of clips each epoch")


def _add_eval_flags(p, data_required=True, regions=("train", "val")):
    p.add_argument("--weights", required=data_required)
    p.add_argument("--data", nargs="+", required=data_required, default=[])
    p.add_argument("--region", choices=list(regions), default="val")
    p.add_argument("--split", type=float, default=TrainConfig().split)
    p.add_argument("--seq-len", type=int, default=None, help="evaluation chunk length")
    p.add_argument("--cell", choices=[VANILLA, CHANGE_BASED], default=None)
    p.add_argument("--theta", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="threeet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"threeet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic event dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-s", type=float, default=20.0)
    p.add_argument("--delta-t-us", type=int, default=DEFAULT_DELTA_T_US)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=60)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="detection rates, sparsity and MACs of trained weights")
    p.add_argument("--out", required=True)
    _add_eval_flags(p, regions=("train", "val", "both"))
    p.add_argument("--eval-size", type=_ints, default=None,
                   help="W,H at which pixel thresholds apply (default: model resolution)")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("sweep-theta", help="evaluate one model at several thresholds")
    p.add_argument("--out", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--thetas", type=_floats, default=[0.0, 0.1, 0.2, 0.5])
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--region", choices=["train", "val"], default="val")
    p.add_argument("--split", type=float, default=TrainConfig().split)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("sweep-seqlen", help="train one model per sequence length")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--seq-lens", type=_ints, default=[2, 40])
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("count-ops", help="dense (and with data, effective) MACs per layer")
    p.add_argument("--out", required=True)
    _add_eval_flags(p, data_required=False)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=60)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="write to a different directory")
    p.add_argument("--force", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"threeet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, WeightFileError, FileNotFoundError) as exc:
        print(f"threeet: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"threeet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"threeet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
