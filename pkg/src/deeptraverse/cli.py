"""Command-line entry point: train, eval, count, gradcheck.

Exit codes: 0 success, 1 failed verification (gradcheck), 2 usage or
configuration error, 3 numerical abort. The DT_DATA_DIR environment
variable supplies a default dataset directory.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import accounting, data, network, train, verification
from .config import RunConfig, config_hash, load_config, serialize_config
from .errors import ConfigError, FormatError, InputError, NumericalError
from .tensor import set_default_dtype


def _limit_threads(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    try:
        import numba

        numba.set_num_threads(n)
    except Exception:
        pass
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    except ImportError:
        os.environ["OPENBLAS_NUM_THREADS"] = str(n)
        return contextlib.nullcontext()


def _data_dir(args) -> str | None:
    return args.data or os.environ.get("DT_DATA_DIR")


def _load_datasets(cfg: RunConfig, data_dir: str | None, seed: int):
    t = cfg.train
    if t.dataset == "blobs":
        shape = (cfg.model.input_channels, t.blob_resolution, t.blob_resolution)
        train_ds = data.synthetic_blobs(t.blob_train_size, cfg.model.num_classes, shape,
                                        seed=1000 + seed, split="train")
        test_ds = data.synthetic_blobs(t.blob_test_size, cfg.model.num_classes, shape,
                                       seed=2000 + seed, split="test")
    else:
        if data_dir is None:
            raise ConfigError("no dataset directory given (use --data or DT_DATA_DIR)")
        loader = {"cifar10": data.load_cifar10, "cifar100": data.load_cifar100,
                  "mnist": data.load_mnist}[t.dataset]
        train_ds = loader(data_dir, "train")
        test_ds = loader(data_dir, "test")
    expected_c = train_ds.images.shape[1]
    if cfg.model.input_channels != expected_c:
        raise ConfigError(
            f"input_channels = {cfg.model.input_channels} but dataset {t.dataset!r} has {expected_c} channels"
        )
    if cfg.model.num_classes != train_ds.num_classes:
        raise ConfigError(
            f"num_classes = {cfg.model.num_classes} but dataset {t.dataset!r} has {train_ds.num_classes}"
        )
    mean, std = data.compute_channel_stats(train_ds)
    return data.normalize(train_ds, mean, std), data.normalize(test_ds, mean, std)


def _write_manifest(out: Path, args, cfg: RunConfig, extra: dict) -> None:
    lines = ["# deeptraverse run manifest"]
    lines.append(f"created_utc = {datetime.now(timezone.utc).isoformat()}")
    lines.append(f"command = {args.command}")
    lines.append(f"seed = {args.seed}")
    lines.append(f"config_hash = {config_hash(cfg)}")
    lines.append(f"out_dir = {out}")
    for key, value in extra.items():
        lines.append(f"{key} = {value}")
    lines.append("")
    lines.append("# resolved configuration")
    lines.append(serialize_config(cfg).rstrip())
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if args.lr is not None:
        cfg.train.lr = args.lr
    if args.augment is not None:
        cfg.train.augment = args.augment
    cfg.validate()
    set_default_dtype(args.dtype)

    out = Path(args.out)
    if (out / "manifest.txt").exists():
        raise ConfigError(f"run directory {out} was already used; pick a fresh one")
    out.mkdir(parents=True, exist_ok=True)

    with _limit_threads(args.threads):
        train_ds, test_ds = _load_datasets(cfg, _data_dir(args), args.seed)
        mean = np.array2string(train_ds.mean, precision=6, separator=", ")
        std = np.array2string(train_ds.std, precision=6, separator=", ")
        print(f"normalization: mean {mean} std {std}")
        _write_manifest(out, args, cfg, {
            "data_dir": _data_dir(args) or "(synthetic)",
            "dtype": args.dtype,
            "threads": args.threads if args.threads is not None else "default",
            "train_mean": mean,
            "train_std": std,
        })

        model = network.build_model(cfg.model, args.seed)
        h, w = train_ds.images.shape[2], train_ds.images.shape[3]
        report = accounting.cost_report(model, (h, w), method=Path(args.config).stem)
        _, csv_text = accounting.emit_cost_table([report])
        (out / "cost.csv").write_text(csv_text, encoding="utf-8")

        optim = train.make_optimizer(model, cfg.train.lr, cfg.train.momentum,
                                     cfg.train.weight_decay, cfg.train.schedule, cfg.train.epochs)
        rng = np.random.default_rng([args.seed, 1])
        history: list[train.MetricRow] = []
        metrics_path = out / "metrics.csv"
        metrics_path.write_text(train.METRICS_HEADER + "\n", encoding="utf-8")
        best_top1 = -1.0
        try:
            for epoch in range(cfg.train.epochs):
                train_loss, train_acc = train.train_epoch(
                    model, train_ds, optim, rng, epoch, cfg.train.batch_size, cfg.train.augment
                )
                top1, top5, test_loss = train.evaluate(model, test_ds)
                row = train.MetricRow(epoch, optim.lr, train_loss, train_acc, test_loss, top1, top5)
                history.append(row)
                with open(metrics_path, "a", encoding="utf-8") as fh:
                    fh.write(row.csv() + "\n")
                ckpt = train.checkpoint_from(model, optim, rng, epoch + 1, history, cfg)
                train.save_checkpoint(out / "last.ckpt", ckpt)
                if top1 > best_top1:
                    best_top1 = top1
                    train.save_checkpoint(out / "best.ckpt", ckpt)
                print(
                    f"epoch {epoch}: lr {optim.lr:.5f} train_loss {train_loss:.4f} "
                    f"train_acc {train_acc * 100:.2f}% test_top1 {top1 * 100:.2f}%"
                )
        except NumericalError as exc:
            last = out / "last.ckpt"
            hint = f"; last good checkpoint: {last}" if last.exists() else ""
            print(f"numerical abort: {exc}{hint}", file=sys.stderr)
            return 3
    return 0


def cmd_eval(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    set_default_dtype(args.dtype)
    with _limit_threads(args.threads):
        model = train.restore_model(ckpt)
        cfg = ckpt.config
        train_ds, test_ds = _load_datasets(cfg, _data_dir(args), args.seed)
        ds = test_ds if args.split == "test" else train_ds
        top1, top5, loss = train.evaluate(model, ds, args.batch_size)
    print(f"RESULT top1={top1 * 100:.2f} top5={top5 * 100:.2f} loss={loss:.6f}")
    return 0


def cmd_count(args) -> int:
    cfg = load_config(args.config)
    if args.recursion is not None:
        cfg.model.recursion = args.recursion
        for stage in cfg.model.stages:
            stage.recursion_override = None
        cfg.model.validate()
    model = network.build_model(cfg.model, seed=0)
    report = accounting.cost_report(model, (args.height, args.width), method=Path(args.config).stem)
    text, csv_text = accounting.emit_cost_table([report])
    print(text, end="")
    print(csv_text, end="")
    if args.csv_out:
        Path(args.csv_out).write_text(csv_text, encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    set_default_dtype(args.dtype)
    verification.require_float64()
    with _limit_threads(args.threads):
        reports = verification.full_suite(args.seed)
    ok = True
    for name, report in reports.items():
        status = "PASS" if report.passed else "FAIL"
        print(f"{name}: max rel err {report.max_rel_err:.3e} [{status}]")
        ok = ok and report.passed
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deeptraverse")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None, help="cap thread pools (1 = deterministic test mode)")
        p.add_argument("--dtype", choices=("float64", "float32"), default="float64")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="dataset directory (default: DT_DATA_DIR)")
    p.add_argument("--out", required=True, help="fresh run directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--augment", choices=("none", "standard"), default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--batch-size", type=int, default=256)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="print the parameter/FLOP cost table")
    p.add_argument("--config", required=True)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--recursion", type=int, default=None, help="override recursion depth everywhere")
    p.add_argument("--csv-out", default=None)
    common(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all backward passes")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
