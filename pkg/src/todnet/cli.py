"""Command-line entry point: gen-data | train | eval | ablate | roundtrip-check.

Exit status: 0 success, 2 usage error, 3 malformed input file, 4 failed
verification, 1 any other library error.
"""

from __future__ import annotations

import argparse
import hashlib
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from todnet.checkpoint import load_checkpoint, save_checkpoint
from todnet.core_types import Condition, DeformerKind, Split
from todnet.data import SyntheticConfig, generate_synthetic, read_embeddings, write_embeddings
from todnet.errors import ParseError, TodNetError, UsageError, VerificationError
from todnet.evaluation import REPORT_HEADER, evaluate_split, format_table, run_ablation
from todnet.flow import FlowParams
from todnet.training import LOG_HEADER, TrainConfig, train
from todnet.verify import fd_gradient_check, random_pairs, roundtrip_errors

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_VERIFY = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    """Flat key=value record of one command invocation."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.start = datetime.now(timezone.utc).isoformat()

    def add_input(self, path):
        self.inputs[str(path)] = _sha256(path)

    def write(self, path):
        lines = [f"command={self.command}"]
        for key, value in sorted(vars(self.args).items()):
            if key in ("func", "command"):
                continue
            lines.append(f"config.{key}={value}")
        lines.append(f"seed={getattr(self.args, 'seed', '')}")
        for p, digest in self.inputs.items():
            lines.append(f"input.{p}=sha256:{digest}")
        for p in self.outputs:
            lines.append(f"output={p}")
        lines.append(f"start={self.start}")
        lines.append(f"end={datetime.now(timezone.utc).isoformat()}")
        Path(path).write_text("\n".join(lines) + "\n")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--layers", type=int, default=3, help="coupling layers")
    p.add_argument("--hidden-layers", type=int, default=2, help="hidden layers per conditioner")
    p.add_argument("--hidden-units", type=int, default=None, help="hidden units (default 2d)")
    p.add_argument("--mlp-hidden-layers", type=int, default=4, help="hidden layers of the MLP deformer")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--lr-decay-epoch", type=int, default=15)
    p.add_argument("--lr-decay-factor", type=float, default=0.1)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--batch-size", type=int, default=128, help="groups per mini-batch")
    p.add_argument("--condition", choices=[c.value for c in Condition], default="target")
    p.add_argument("--deformer", choices=[k.value for k in DeformerKind], default="realnvp")
    p.add_argument("--raw-condition", action="store_true", help="do not L2-normalize the condition")
    p.add_argument("--val-folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        margin=args.margin,
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr=args.lr,
        lr_decay_epoch=args.lr_decay_epoch,
        lr_decay_factor=args.lr_decay_factor,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.eps,
        seed=args.seed,
        condition=Condition(args.condition),
        deformer=DeformerKind(args.deformer),
        n_layers=args.layers,
        n_hidden_layers=args.hidden_layers,
        hidden_units=args.hidden_units,
        mlp_hidden_layers=args.mlp_hidden_layers,
        condition_normalized=not args.raw_condition,
        val_folds=args.val_folds,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="todnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic train/val/test embedding files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--groups", type=int, default=500, help="training groups")
    p.add_argument("--val-groups", type=int, default=100)
    p.add_argument("--test-groups", type=int, default=100)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--aspects", type=int, default=4)
    p.add_argument("--captions", type=int, default=5, help="captions per image")
    p.add_argument("--aspect-signal", type=float, default=SyntheticConfig.aspect_signal)
    p.add_argument("--shared-signal", type=float, default=SyntheticConfig.shared_signal)
    p.add_argument("--noise", type=float, default=SyntheticConfig.noise)
    p.add_argument("--vocab", type=int, default=SyntheticConfig.aspect_vocab, help="values per aspect")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a deformer on frozen embeddings")
    p.add_argument("--train", required=True, help="training TDE1 file")
    p.add_argument("--val", required=True, help="validation TDE1 file")
    p.add_argument("--out", required=True, help="checkpoint path (best validation mR)")
    p.add_argument("--log", default=None, help="epoch log path (default <out>.log)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics on an embedding file")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", action="store_true", help="plain cosine, no deformer")
    p.add_argument("--condition", choices=[c.value for c in Condition], default="target")
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--name", default=None, help="model column of the report row")
    p.add_argument("--out", default=None, help="also write the report to this file")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every ablation cell")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="ablation table path")
    p.add_argument("--folds", type=int, default=1, help="test folds")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("roundtrip-check", help="verify bijectivity and gradients of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--grad-samples", type=int, default=3, help="(v, c) pairs for the gradient check")
    p.add_argument("--grad-coords", type=int, default=200, help="parameter coordinates sampled per pair")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--grad-tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_roundtrip_check)
    return parser


_GEN_FLAGS = {
    "train_groups": "--groups",
    "val_groups": "--val-groups",
    "test_groups": "--test-groups",
    "d": "--dim",
    "n_aspects": "--aspects",
    "captions_per_image": "--captions",
    "aspect_signal": "--aspect-signal",
    "shared_signal": "--shared-signal",
    "noise": "--noise",
    "aspect_vocab": "--vocab",
}


def cmd_gen_data(args, out) -> int:
    cfg = SyntheticConfig(
        train_groups=args.groups,
        val_groups=args.val_groups,
        test_groups=args.test_groups,
        d=args.dim,
        n_aspects=args.aspects,
        captions_per_image=args.captions,
        aspect_signal=args.aspect_signal,
        shared_signal=args.shared_signal,
        noise=args.noise,
        aspect_vocab=args.vocab,
        seed=args.seed,
    )
    try:
        cfg.validate()
    except UsageError as exc:
        msg = str(exc)
        for field_name, flag in _GEN_FLAGS.items():
            msg = re.sub(rf"\b{field_name}\b", flag, msg)
        raise UsageError(msg) from None
    manifest = Manifest("gen-data", args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for split, dataset in generate_synthetic(cfg).items():
        path = outdir / f"{split.value}.tde"
        write_embeddings(dataset, path)
        manifest.outputs.append(str(path))
        print(f"{split.value}\t{path}\t{len(dataset)} records", file=out)
    manifest.write(outdir / "manifest.txt")
    return EXIT_OK


def cmd_train(args, out) -> int:
    config = _train_config(args)
    manifest = Manifest("train", args)
    train_set = read_embeddings(args.train, Split.TRAIN)
    val_set = read_embeddings(args.val, Split.VAL)
    manifest.add_input(args.train)
    manifest.add_input(args.val)
    if train_set.dimension != val_set.dimension:
        raise UsageError(f"train d={train_set.dimension} but val d={val_set.dimension}")
    log_path = args.log or f"{args.out}.log"
    with open(log_path, "w") as log_fh:
        log_fh.write(LOG_HEADER + "\n")

        def log(line):
            log_fh.write(line + "\n")
            log_fh.flush()
            print(line, file=out)

        result = train(train_set, val_set, config, log=log)
    save_checkpoint(result.best, args.out)
    manifest.outputs += [args.out, log_path]
    manifest.write(f"{args.out}.manifest")
    print(f"best epoch {result.best_epoch}\tval mR {100 * result.best_mr:.2f}\t{args.out}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    if args.checkpoint is None and not args.baseline:
        raise UsageError("eval needs --checkpoint or --baseline")
    if args.checkpoint is not None and args.baseline:
        raise UsageError("--checkpoint and --baseline are mutually exclusive")
    manifest = Manifest("eval", args)
    dataset = read_embeddings(args.data, Split.TEST)
    manifest.add_input(args.data)
    deformer = None
    if args.checkpoint is not None:
        deformer = load_checkpoint(args.checkpoint)
        manifest.add_input(args.checkpoint)
        if deformer.dimension != dataset.dimension:
            raise UsageError(f"checkpoint d={deformer.dimension} but data d={dataset.dimension}")
    condition = Condition(args.condition)
    report = evaluate_split(dataset, deformer, condition, args.folds)
    if args.name:
        name = args.name
    elif deformer is None:
        name = "none"
    else:
        name = "realnvp" if isinstance(deformer, FlowParams) else "mlp"
    text = REPORT_HEADER + "\n" + report.to_row(name, "-" if deformer is None else condition.value) + "\n"
    out.write(text)
    if args.out:
        Path(args.out).write_text(text)
        manifest.outputs.append(args.out)
    manifest.write(args.manifest or (f"{args.out}.manifest" if args.out else "todnet-eval.manifest"))
    return EXIT_OK


def cmd_ablate(args, out) -> int:
    config = _train_config(args)
    manifest = Manifest("ablate", args)
    sets = {}
    for split, path in ((Split.TRAIN, args.train), (Split.VAL, args.val), (Split.TEST, args.test)):
        sets[split] = read_embeddings(path, split)
        manifest.add_input(path)
    rows = run_ablation(sets[Split.TRAIN], sets[Split.VAL], sets[Split.TEST], config, folds=args.folds)
    table = format_table(rows)
    Path(args.out).write_text(table)
    out.write(table)
    manifest.outputs.append(args.out)
    manifest.write(f"{args.out}.manifest")
    return EXIT_OK


def cmd_roundtrip_check(args, out) -> int:
    manifest = Manifest("roundtrip-check", args)
    try:
        flow = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    manifest.add_input(args.checkpoint)
    if not isinstance(flow, FlowParams):
        raise UsageError("roundtrip-check needs a Real-NVP checkpoint; the MLP deformer is not invertible")
    v, c = random_pairs(flow.dimension, args.samples, args.seed)
    rt = roundtrip_errors(flow, v, c)
    rng = np.random.default_rng(args.seed + 1)
    worst_grad, checked = 0.0, 0
    for k in range(min(args.grad_samples, args.samples)):
        upstream = rng.standard_normal(flow.dimension)
        rep = fd_gradient_check(flow, v[k], c[k], upstream, args.grad_coords, seed=args.seed + k)
        worst_grad = max(worst_grad, rep.max_rel_error)
        checked += rep.n_checked
    ok = rt.forward_inverse <= args.tol and rt.inverse_forward <= args.tol and worst_grad <= args.grad_tol
    print(f"samples\t{args.samples}", file=out)
    print(f"max_forward_inverse_error\t{rt.forward_inverse:.3e}", file=out)
    print(f"max_inverse_forward_error\t{rt.inverse_forward:.3e}", file=out)
    print(f"gradient_coordinates_checked\t{checked}", file=out)
    print(f"max_gradient_relative_error\t{worst_grad:.3e}", file=out)
    print(f"status\t{'PASS' if ok else 'FAIL'}", file=out)
    manifest.write(args.manifest or "todnet-roundtrip-check.manifest")
    if not ok:
        raise VerificationError("round-trip or gradient tolerance exceeded")
    return EXIT_OK


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, out)
    except UsageError as exc:
        print(f"todnet: usage error: {exc}", file=err)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"todnet: {type(exc).__name__}: {exc}", file=err)
        return EXIT_PARSE
    except VerificationError as exc:
        print(f"todnet: verification failed: {exc}", file=err)
        return EXIT_VERIFY
    except TodNetError as exc:
        print(f"todnet: {type(exc).__name__}: {exc}", file=err)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        print(f"todnet: usage error: {exc}", file=err)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
