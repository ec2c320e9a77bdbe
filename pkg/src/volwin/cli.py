"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, params, probe-rf. Every
command is deterministic under a fixed --seed, echoes its effective
configuration, and reports failures as a single `error: ...` line with a
nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, parse_config
from .data import SegSample, SyntheticSpec, gen_dataset
from .decoder import SegModel
from .diagnostics import (
    PROBE_FRAGMENTS,
    build_probe_fragment,
    count_params,
    model_grad_check,
    receptive_field_probe,
)
from .encoder import ModelConfig
from .errors import VolwinError
from .metrics import Metrics, dice_ce_loss, dice_score
from .optim import AdamW
from .tensor import Tensor, no_grad


def _dataset_to_arrays(samples) -> dict:
    arrays = {}
    for i, s in enumerate(samples):
        arrays[f"vol_{i}"] = s.volume
        arrays[f"lab_{i}"] = s.labels.astype(np.float32)
    return arrays


def _arrays_to_dataset(arrays: dict) -> list:
    n = sum(1 for k in arrays if k.startswith("vol_"))
    out = []
    for i in range(n):
        vol = arrays[f"vol_{i}"].astype(np.float64)
        lab = np.rint(arrays[f"lab_{i}"]).astype(np.int64)
        out.append(SegSample(volume=vol, labels=lab))
    return out


def _load_or_generate(run: RunConfig, data_dir: str | None):
    if data_dir:
        train = _arrays_to_dataset(ckpt.load_arrays(os.path.join(data_dir, "train.bin")))
        val = _arrays_to_dataset(ckpt.load_arrays(os.path.join(data_dir, "val.bin")))
        return train, val
    spec = run.data
    train = gen_dataset(spec, getattr(spec, "num_train", 24))
    val_spec = SyntheticSpec(**{**vars(spec), "seed": spec.seed + 1})
    val = gen_dataset(val_spec, getattr(spec, "num_val", 8))
    return train, val


def _batch(samples, idx, dtype):
    vols = np.stack([samples[i].volume for i in idx]).astype(dtype)
    labs = np.stack([samples[i].labels for i in idx])
    return Tensor(vols), labs


def evaluate(model: SegModel, samples, num_classes: int, batch_size: int = 2) -> Metrics:
    """Per-volume Dice, averaged per class over the dataset."""
    model.eval()
    scores = []
    dtype = model.config.np_dtype
    with no_grad():
        for start in range(0, len(samples), batch_size):
            idx = range(start, min(start + batch_size, len(samples)))
            x, labs = _batch(samples, idx, dtype)
            pred = np.argmax(model(x).data, axis=1)
            for j in range(pred.shape[0]):
                scores.append(dice_score(pred[j], labs[j], num_classes).per_class)
    model.train()
    return Metrics(per_class=np.mean(scores, axis=0))


def _echo_config(run: RunConfig, out=sys.stdout):
    for line in run.echo_lines():
        print(line, file=out)


def _build_run(args) -> RunConfig:
    overrides = {}
    for dotted in args.set or []:
        if "=" not in dotted:
            raise VolwinError(f"--set expects section.key=value, got {dotted!r}")
        key, value = dotted.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag, dotted in (
        ("ff_kind", "model.ff_kind"),
        ("merge_kind", "model.merge_kind"),
        ("decoder_kind", "model.decoder_kind"),
        ("window", "model.window"),
        ("base_dim", "model.base_dim"),
        ("depths", "model.depths"),
        ("heads", "model.heads"),
        ("mlp_ratio", "model.mlp_ratio"),
        ("num_classes", "model.num_classes"),
        ("steps", "train.steps"),
        ("lr", "train.lr"),
        ("batch_size", "train.batch_size"),
        ("seed", "train.seed"),
        ("dtype", "train.dtype"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[dotted] = val
    return parse_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    run = _build_run(args)
    _echo_config(run)
    os.makedirs(args.out, exist_ok=True)
    spec = run.data
    train = gen_dataset(spec, args.num_train if args.num_train is not None else 24)
    val_spec = SyntheticSpec(**{**vars(spec), "seed": spec.seed + 1})
    val = gen_dataset(val_spec, args.num_val if args.num_val is not None else 8)
    ckpt.save_arrays(os.path.join(args.out, "train.bin"), _dataset_to_arrays(train))
    ckpt.save_arrays(os.path.join(args.out, "val.bin"), _dataset_to_arrays(val))
    print(f"wrote {len(train)} train and {len(val)} val samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _build_run(args)
    _echo_config(run)
    os.makedirs(args.out, exist_ok=True)
    train_set, val_set = _load_or_generate(run, args.data)
    model = SegModel(run.model, seed=run.train.seed)
    if args.init_from:
        report = ckpt.load_model(args.init_from, model, strict=not args.non_strict)
        for line in report.lines():
            print(line)
    opt = AdamW(model.params(), lr=run.train.lr, weight_decay=run.train.weight_decay)
    num_classes = run.model.num_classes
    dtype = run.model.np_dtype
    bs = run.train.batch_size
    rows = []
    order = np.arange(len(train_set))
    t_start = time.time()
    for step in range(1, run.train.steps + 1):
        lo = ((step - 1) * bs) % len(order)
        idx = [order[(lo + j) % len(order)] for j in range(bs)]
        x, labs = _batch(train_set, idx, dtype)
        loss = dice_ce_loss(model(x), labs)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % run.train.eval_every == 0 or step == run.train.steps:
            metrics = evaluate(model, val_set, num_classes, bs)
            row = [step, f"{loss.item():.8g}", f"{metrics.mean_foreground:.8g}"]
            row += [f"{metrics.per_class[c]:.8g}" for c in range(1, num_classes)]
            rows.append(row)
            print(f"step {step}: loss={loss.item():.5f} dice_mean={metrics.mean_foreground:.4f}")
            if args.stop_dice is not None and metrics.mean_foreground >= args.stop_dice:
                break
    print(f"trained {rows[-1][0] if rows else 0} steps in {time.time() - t_start:.1f}s")
    header = ["step", "loss", "dice_mean"] + [f"dice_c{c}" for c in range(1, num_classes)]
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    ckpt.save_model(os.path.join(args.out, "checkpoint.bin"), model)
    print(f"wrote {os.path.join(args.out, 'metrics.csv')} and checkpoint.bin")
    return 0


def cmd_eval(args) -> int:
    run = _build_run(args)
    _echo_config(run)
    _, val_set = _load_or_generate(run, args.data)
    model = SegModel(run.model, seed=run.train.seed)
    report = ckpt.load_model(args.checkpoint, model, strict=not args.non_strict)
    for line in report.lines():
        print(line)
    metrics = evaluate(model, val_set, run.model.num_classes, run.train.batch_size)
    for c in range(1, run.model.num_classes):
        print(f"dice_c{c} = {metrics.per_class[c]:.6f}")
    print(f"dice_mean = {metrics.mean_foreground:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "dice"])
            for c in range(1, run.model.num_classes):
                writer.writerow([f"c{c}", f"{metrics.per_class[c]:.8g}"])
            writer.writerow(["mean", f"{metrics.mean_foreground:.8g}"])
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import operation_grad_checks

    failures = 0
    t0 = time.time()
    for report in operation_grad_checks(quick=args.quick):
        for line in report.lines():
            print(line)
        failures += 0 if report.passed else 1
    if not args.skip_model:
        report = model_grad_check()
        for line in report.lines():
            print(line)
        failures += 0 if report.passed else 1
    print(f"gradcheck finished in {time.time() - t0:.1f}s")
    if failures:
        print(f"error: {failures} gradient checks failed", file=sys.stderr)
        return 1
    return 0


_ABLATION_ROWS = (
    ("mlp", "postmerge", "linear", 4.0),
    ("mlp", "postmerge", "linear", 7.0),
    ("inception", "postmerge", "linear", 4.0),
    ("mlp", "postmerge", "conv", 7.0),
    ("inception", "postmerge", "conv", 4.0),
    ("mlp", "premerge", "linear", 4.0),
    ("mlp", "premerge", "linear", 7.0),
    ("inception", "premerge", "linear", 4.0),
    ("mlp", "premerge", "conv", 7.0),
    ("inception", "premerge", "conv", 4.0),
)


def cmd_params(args) -> int:
    run = _build_run(args)
    _echo_config(run)
    total, breakdown = count_params(run.model)
    print(f"total parameters: {total} ({total / 1e6:.2f}M)")
    for part, count in breakdown.items():
        print(f"  {part:8s} {count:12d} ({count / 1e6:.2f}M)")
    if args.compare:
        print()
        print(f"{'Encoder':10s} {'Decoder':10s} {'Patch-Merging':14s} {'MLP-ratio':9s} {'Params':>10s}")
        base = vars(run.model).copy()
        for ff, dec, merge, ratio in _ABLATION_ROWS:
            cfg = ModelConfig(**{**base, "ff_kind": ff, "decoder_kind": dec, "merge_kind": merge, "mlp_ratio": ratio})
            t, _ = count_params(cfg)
            print(f"{ff:10s} {dec:10s} {merge:14s} {ratio:<9.1f} {t / 1e6:9.1f}M")
    return 0


def cmd_probe_rf(args) -> int:
    fragment, shape, source = build_probe_fragment(args.fragment, window=args.window, seed=args.seed or 0)
    result = receptive_field_probe(fragment, shape, source=source, seed=args.seed or 0)
    print(f"fragment: {args.fragment}")
    print(f"input shape: {shape}, probed output voxel: {result.source}")
    print(f"influence radius (Chebyshev): {result.radius}")
    print(f"influenced voxels: {int(result.mask.sum())}")
    if args.fragment in ("attn_inception", "two_blocks", "w_mhsa", "w_mhsa_shifted"):
        print(f"escapes probe window ({args.window}): {result.escapes(args.window)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volwin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, train_flags=False):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--ff-kind", dest="ff_kind", choices=("inception", "mlp", "depthwise"), default=None)
        p.add_argument("--merge-kind", dest="merge_kind", choices=("linear", "conv"), default=None)
        p.add_argument("--decoder-kind", dest="decoder_kind", choices=("premerge", "postmerge"), default=None)
        p.add_argument("--window", type=int, default=None)
        p.add_argument("--base-dim", dest="base_dim", type=int, default=None)
        p.add_argument("--depths", default=None)
        p.add_argument("--heads", default=None)
        p.add_argument("--mlp-ratio", dest="mlp_ratio", type=float, default=None)
        p.add_argument("--num-classes", dest="num_classes", type=int, default=None)
        if train_flags:
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--lr", type=float, default=None)
            p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
            p.add_argument("--dtype", choices=("float32", "float64"), default=None)

    p = sub.add_parser("gen-data", help="write synthetic train/val dataset containers")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-train", type=int, default=None)
    p.add_argument("--num-val", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, writing metrics CSV and checkpoint")
    common(p, train_flags=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="directory from gen-data; generated on the fly if absent")
    p.add_argument("--init-from", default=None, help="checkpoint to initialize from")
    p.add_argument("--non-strict", action="store_true", help="skip mismatched checkpoint entries")
    p.add_argument("--stop-dice", type=float, default=None, help="stop early at this held-out mean Dice")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--non-strict", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every operation and the toy model")
    p.add_argument("--quick", action="store_true", help="fewer coordinates per tensor")
    p.add_argument("--skip-model", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="analytic parameter count; --compare prints the ablation table")
    common(p)
    p.add_argument("--compare", action="store_true")
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("probe-rf", help="Jacobian influence radius of a named fragment")
    p.add_argument("--fragment", required=True, choices=PROBE_FRAGMENTS)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_probe_rf)

    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except VolwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
