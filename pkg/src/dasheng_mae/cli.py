"""Command-line entry point: ``dasheng <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical abort.
Diagnostics go to stderr; results are written only to the paths given in flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, _accel
from .errors import ContractError, DomainError, FormatError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

PRESETS = ("base", "0.6b", "1.2b", "tiny")

log = logging.getLogger("dasheng_mae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit_config(name: str, cfg: dict) -> None:
    print(f"[{name}] " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import TrainConfig, load_manifest, train

    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                base = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(base, dict):
            raise FormatError(f"{args.config}: expected a JSON object")
    overrides = {
        "preset": args.preset,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "batches_per_epoch": args.batches_per_epoch,
        "seed": args.seed,
        "peak_lr": args.lr,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.preset is not None:
        base.pop("model", None)
    try:
        cfg = TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad training config: {exc}") from None
    resolved = cfg.to_dict()
    resolved["resolved_model"] = cfg.model_config().to_dict()
    _emit_config("train", resolved)
    train_m = load_manifest(args.train)
    val_m = load_manifest(args.val) if args.val else None
    report = train(cfg, train_m, val_m, args.out, resume=args.resume)
    last = report.epochs[-1] if report.epochs else {}
    print(f"done: checkpoint {report.checkpoint}; last epoch {json.dumps(last, sort_keys=True)}", file=sys.stderr)
    return EXIT_OK


def cmd_embed(args) -> int:
    from .checkpoint import load_checkpoint
    from .embedder import embed_batch
    from .trainer import load_manifest, model_from_checkpoint

    _emit_config("embed", {"ckpt": args.ckpt, "manifest": args.manifest, "out": args.out, "pooled": args.pooled})
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    summary = embed_batch(load_manifest(args.manifest), model, args.out, pooled=args.pooled)
    print(f"embedded {len(summary.written)} clips, skipped {len(summary.skipped)}", file=sys.stderr)
    for cid, reason in summary.skipped:
        print(f"  skipped {cid}: {reason}", file=sys.stderr)
    return EXIT_OK


def _load_labeled(archive: str, labels: str, class_names=None):
    from .embedder import read_archive
    from .evaluate import labeled_from_records, read_labels

    return labeled_from_records(read_archive(archive), read_labels(labels), class_names)


def _eval_inputs(args):
    """Train/test sets sharing one class list; with ``--folds`` the two are pooled."""
    from .evaluate import LabeledEmbeddings, read_labels

    if (args.test is None) != (args.test_labels is None):
        raise UsageError("--test and --test-labels must be given together")
    if args.test is None and not args.folds:
        raise UsageError("either --test/--test-labels or --folds is required")
    names = set(read_labels(args.train_labels).values())
    if args.test_labels:
        names |= set(read_labels(args.test_labels).values())
    classes = sorted(names)
    train = _load_labeled(args.train, args.train_labels, classes)
    test = _load_labeled(args.test, args.test_labels, classes) if args.test else None
    if args.folds and test is not None:
        train = LabeledEmbeddings(
            np.concatenate([train.vectors, test.vectors]), np.concatenate([train.labels, test.labels]), classes
        )
        test = None
    return train, test


def _finish_eval(args, reports) -> int:
    from .evaluate import summarize_folds

    if len(reports) == 1 and reports[0].fold is None:
        out = reports[0].to_dict()
        msg = f"accuracy {reports[0].accuracy:.4f} on {reports[0].n} clips"
    else:
        out = summarize_folds(reports)
        msg = f"mean accuracy {out['mean_accuracy']:.4f} over {len(reports)} folds"
    print(msg, file=sys.stderr)
    if args.out:
        _write_json(args.out, out)
    return EXIT_OK


def cmd_eval_knn(args) -> int:
    from .evaluate import cross_validate, knn_classify

    _emit_config("eval-knn", vars_of(args))
    if args.k < 1:
        raise UsageError("--k must be positive")
    train, test = _eval_inputs(args)
    if test is None:
        reports = cross_validate(train, args.folds, args.seed, lambda tr, te, f: knn_classify(tr, te, args.k, fold=f))
    else:
        reports = [knn_classify(train, test, args.k)]
    return _finish_eval(args, reports)


def cmd_eval_probe(args) -> int:
    from .evaluate import ProbeSpec, cross_validate, probe_train

    _emit_config("eval-probe", vars_of(args))
    spec = ProbeSpec(kind=args.kind, epochs=args.epochs, lr=args.lr, seed=args.seed)
    train, test = _eval_inputs(args)

    def run(tr, te, fold=None):
        rep = probe_train(tr, te, spec)[1]
        rep.fold = fold
        return rep

    reports = cross_validate(train, args.folds, args.seed, run) if test is None else [run(train, test)]
    return _finish_eval(args, reports)


def cmd_features(args) -> int:
    from .audio import expected_frames, logmel, read_audio, resample
    from .checkpoint import Checkpoint, save_checkpoint

    _emit_config("features", {"in": args.input, "out": args.out, "raw_rate": args.raw_rate})
    w = read_audio(args.input, raw_rate=args.raw_rate)
    w16 = resample(w)
    mel = logmel(w16)
    meta = {
        "source": os.path.basename(args.input),
        "source_rate": w.sample_rate,
        "n_samples": len(w16),
        "n_frames": mel.n_frames,
        "expected_frames": expected_frames(len(w16)),
        "frame_rate": mel.frame_rate,
    }
    save_checkpoint(args.out, Checkpoint(meta, {"logmel": mel.values}))
    print(f"{mel.n_frames} frames x {mel.n_bins} bins", file=sys.stderr)
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    print(json.dumps(ckpt.metadata, indent=2, sort_keys=True), file=sys.stderr)
    total = 0
    for name, arr in ckpt.tensors.items():
        total += arr.size
        print(f"{name:48s} {str(arr.dtype):8s} {'x'.join(map(str, arr.shape)) or 'scalar'}", file=sys.stderr)
    print(f"{len(ckpt.tensors)} tensors, {total} values", file=sys.stderr)
    return EXIT_OK


def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _eval_flags(p) -> None:
    p.add_argument("--train", required=True, help="embedding archive for training/reference clips")
    p.add_argument("--train-labels", required=True, help="JSONL of {id, label}")
    p.add_argument("--test", help="embedding archive for test clips")
    p.add_argument("--test-labels", help="JSONL of {id, label}")
    p.add_argument("--folds", type=int, default=0, help="k-fold cross-validation over all given clips")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dasheng", description="Masked-autoencoder audio pretraining, embedding and evaluation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="pretrain a model")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--preset", choices=PRESETS, help="model size (overrides the config's model)")
    p.add_argument("--train", required=True, help="training manifest (JSONL)")
    p.add_argument("--val", help="validation manifest (JSONL)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed clips with a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="embedding archive")
    p.add_argument("--pooled", action="store_true", help="store one mean-pooled vector per clip")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval-knn", help="cosine k-NN accuracy")
    _eval_flags(p)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_eval_knn)

    p = sub.add_parser("eval-probe", help="linear or MLP probe accuracy")
    _eval_flags(p)
    p.add_argument("--kind", choices=("linear", "mlp"), default="mlp")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_eval_probe)

    p = sub.add_parser("features", help="dump the log-Mel features of one file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="DSHG1 file holding a 'logmel' tensor")
    p.add_argument("--raw-rate", type=int, help="sample rate for headerless 16-bit PCM input")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint metadata and tensor table")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    threads = os.environ.get("DASHENG_THREADS")
    if threads:
        try:
            _accel.set_num_threads(int(threads))
        except ValueError:
            print(f"dasheng: ignoring DASHENG_THREADS={threads!r}", file=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dasheng {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dasheng: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, DomainError, ContractError, OSError) as exc:
        print(f"dasheng: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
