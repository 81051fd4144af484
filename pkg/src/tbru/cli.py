"""Command-line entry point.

Metrics and other machine-readable records go to stdout as one JSON object
per line; progress and human-readable text go to stderr. Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .data import FormatError, Sentence, build_vocabs, format_conll, gen_synthetic_compression, \
    gen_synthetic_trees, read_conll
from .engine import EngineError, Model, export_trace, has_gold, run_pipeline
from .experiments import gradcheck_pipeline
from .pipelines import ABLATION_ROWS, PRESETS, ConfigError, dump_config, resolve_pipeline
from .training import (CheckpointError, TrainConfig, Trainer, TrainingError, evaluate,
                       load_checkpoint, load_into, model_from_checkpoint)
from .transitions import TransitionError

log = logging.getLogger("tbru")

MAX_GRADCHECK_LEN = 5


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _task_dist(text: str | None) -> dict[str, float] | None:
    if not text:
        return None
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"--task-dist entries look like task=prob, got {part!r}")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"bad probability {v!r} in --task-dist") from None
    return out


def _pretrain(text: str | None, supervised: Sequence[str]) -> list[tuple[str, int]]:
    """'N' pretrains the first supervised unit; 'task=N,task=N' is explicit."""
    if not text:
        return []
    out = []
    for part in text.split(","):
        task, _, count = part.rpartition("=")
        task = task.strip() or (supervised[0] if supervised else "")
        try:
            out.append((task, int(count)))
        except ValueError:
            raise UsageError(f"bad step count {count!r} in --pretrain-steps") from None
    return out


def _load_corpus(path: str, what: str):
    p = Path(path)
    if not p.is_file():
        raise RuntimeFailure(f"{what} file not found: {path}")
    corpus = read_conll(p)
    if not len(corpus):
        raise RuntimeFailure(f"{what} corpus {path} is empty")
    return corpus


def _require_gold(model: Model, corpus, what: str) -> None:
    for u in model.units:
        if u.supervised and not any(has_gold(u, s) for s in corpus):
            raise RuntimeFailure(f"{what} corpus has no gold annotation for supervised unit {u.name}")


# -- subcommands ----------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_pipeline(args.pipeline, args.hidden_dim, args.embed_dim)
    train = _load_corpus(args.train, "training")
    dev = _load_corpus(args.dev, "dev") if args.dev else None
    model = Model(cfg.units, build_vocabs(train), args.seed)
    _require_gold(model, train, "training")
    supervised = cfg.supervised
    config = TrainConfig(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                         task_dist=_task_dist(args.task_dist),
                         pretrain=_pretrain(args.pretrain_steps, supervised),
                         max_steps=args.steps, seed=args.seed, upstream=args.upstream,
                         workers=args.workers)
    try:
        trainer = Trainer(model, config, dump_config(cfg))
    except ValueError as e:
        raise UsageError(str(e)) from None
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    log.info("training %s (%d parameters) on %d sentences for %d steps",
             cfg.name, model.num_parameters(), len(train), args.steps)

    with open(metrics_path, "w", encoding="utf-8") as mf:
        def out(record):
            record["upstream"] = config.upstream
            records.append(record)
            emit(record)
            mf.write(json.dumps(record, sort_keys=True) + "\n")

        def evaluate_dev():
            if dev is None:
                return
            for m in evaluate(model, dev, with_loss=True).values():
                out(m.record(trainer.step, "dev"))

        window: dict[str, list] = {}

        def on_step(r):
            window.setdefault(r.task, []).append(r.loss)
            if r.step % args.log_every == 0 or r.step == args.steps:
                for task, losses in window.items():
                    out({"step": r.step, "split": "train", "task": task,
                         "loss": sum(losses) / len(losses), "grad_norm": r.grad_norm})
                window.clear()
            if args.eval_every and r.step % args.eval_every == 0 and r.step != args.steps:
                evaluate_dev()

        trainer.fit(train, args.steps, on_step)
        evaluate_dev()
    trainer.save(args.out)
    for r in records:
        if r["split"] == "dev" and r["step"] == trainer.step:
            scores = " ".join(f"{k}={r[k]:.4f}" for k in ("uas", "las", "acc", "f1")
                              if r.get(k) is not None)
            log.info("final dev %s: %s", r["task"], scores)
    if args.figure:
        from .plotting import learning_curve
        learning_curve(records, args.figure, title=cfg.name)
        log.info("wrote %s", args.figure)
    log.info("wrote checkpoint %s", args.out)
    return 0


def _model_for(args, ck):
    if args.pipeline:
        cfg = resolve_pipeline(args.pipeline, args.hidden_dim, args.embed_dim)
        model = Model(cfg.units, ck.vocabs)
        load_into(model, ck.params)
        return model
    return model_from_checkpoint(ck)


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = _model_for(args, ck)
    corpus = _load_corpus(args.data, "evaluation")
    _require_gold(model, corpus, "evaluation")
    for m in evaluate(model, corpus, with_loss=True).values():
        emit(m.record(ck.step, args.split))
    return 0


def cmd_trace(args) -> int:
    tokens = tuple(args.sentence.split())
    if not tokens:
        raise UsageError("--sentence must contain at least one token")
    sentence = Sentence(tokens)
    if args.ckpt:
        model = _model_for(args, load_checkpoint(args.ckpt))
    else:
        if not args.pipeline:
            raise UsageError("trace needs --pipeline or --ckpt")
        cfg = resolve_pipeline(args.pipeline, args.hidden_dim, args.embed_dim)
        model = Model(cfg.units, build_vocabs([sentence]), args.seed)
    graph = run_pipeline(model, sentence)
    sys.stdout.write(export_trace(graph, model, decisions=bool(args.ckpt)))
    log.info("%d steps, %d edges", graph.alpha, sum(len(e) for e in graph.edges))
    return 0


def cmd_gen_data(args) -> int:
    if args.kind == "trees":
        corpus = gen_synthetic_trees(args.n, max_len=args.max_len, seed=args.seed)
    else:
        corpus = gen_synthetic_compression(args.n, seed=args.seed, max_len=args.max_len,
                                           min_len=min(3, args.max_len))
    text = format_conll(corpus)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
        log.info("wrote %d sentences to %s", len(corpus), args.out)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    if not 1 <= args.len <= MAX_GRADCHECK_LEN:
        raise UsageError(f"--len must be between 1 and {MAX_GRADCHECK_LEN}")
    def corrupt(grads):
        first = next(iter(grads))
        grads[first].reshape(-1)[0] += 1.0
    report = gradcheck_pipeline(args.pipeline, args.len, args.tol, args.hidden_dim or 3,
                                args.embed_dim or 2, args.seed,
                                corrupt if args.corrupt_gradient else None)
    width = max(len(e.name) for e in report.entries)
    for e in report.entries:
        ok = e.max_rel_error < args.tol
        emit({"param": e.name, "max_rel_error": e.max_rel_error, "passed": ok})
        print(f"{e.name:<{width}}  {e.max_rel_error:.3e}  {'ok' if ok else 'FAIL'}", file=sys.stderr)
    if not report.passed:
        w = report.worst
        raise RuntimeFailure(f"gradient check failed: {w.name}{list(w.worst_index)} "
                             f"analytic {w.analytic:.6g} numeric {w.numeric:.6g} "
                             f"relative error {w.max_rel_error:.3e} >= {args.tol}")
    log.info("gradient check passed (worst %.3e)", report.worst.max_rel_error)
    return 0


def cmd_presets(args) -> int:
    for name in PRESETS:
        print(name)
    for inp, rec in ABLATION_ROWS:
        print(f"parser_ablation({inp},{rec})")
    return 0


# -- argument parsing -----------------------------------------------------

def _dims(p) -> None:
    p.add_argument("--hidden-dim", type=int, default=None, help="override hidden size")
    p.add_argument("--embed-dim", type=int, default=None, help="override embedding size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbru", description="Transition-based recurrent unit pipelines.")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a pipeline and write a checkpoint")
    p.add_argument("--pipeline", required=True, help="preset name or config file")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--task-dist", help="e.g. parser=0.5,keep_drop=0.5")
    p.add_argument("--pretrain-steps", help="N, or task=N[,task=N]")
    p.add_argument("--metrics", help="metrics file (default: <out>.metrics.jsonl)")
    p.add_argument("--figure", help="write a learning-curve PNG here")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--upstream", choices=("gold", "predicted"), default="gold")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--eval-every", type=int, default=0, help="0 evaluates only at the end")
    _dims(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--pipeline", help="defaults to the pipeline stored in the checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval", help="label for the metrics records")
    _dims(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="print the unrolled graph for one sentence")
    p.add_argument("--pipeline")
    p.add_argument("--ckpt")
    p.add_argument("--sentence", required=True)
    p.add_argument("--format", choices=("dot",), default="dot")
    p.add_argument("--seed", type=int, default=0)
    _dims(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--kind", choices=("trees", "compression"), required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="finite-difference check of a pipeline's gradients")
    p.add_argument("--pipeline", required=True)
    p.add_argument("--len", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    _dims(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("presets", help="list preset pipeline names")
    p.set_defaults(func=cmd_presets)
    return parser


RUNTIME_ERRORS = (RuntimeFailure, FormatError, ConfigError, EngineError, CheckpointError,
                  TrainingError, TransitionError, OSError, ValueError, FloatingPointError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"tbru {args.command}: error: {e}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as e:
        print(f"tbru {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
