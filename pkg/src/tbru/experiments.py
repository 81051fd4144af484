"""Desk-scale experiments: gradient checks and the two accuracy trends.

These are the runs behind the acceptance suite and the ``gradcheck`` command.
Everything is seeded, so repeated calls give identical numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Corpus, build_vocabs, gen_synthetic_compression, gen_synthetic_trees
from .engine import Model
from .pipelines import PipelineConfig, resolve_pipeline, preset
from .training import TrainConfig, Trainer, evaluate, joint_loss

GRADCHECK_PRESETS = (
    "tagger_rnn", "feedforward_parser", "encoder_decoder_tagger", "bilstm_tagger",
    "compositional_parser", "multitask_stackprop", "summarizer_stackprop", "deep_stacked_parser",
)


def gradcheck_sentence(length: int, seed: int = 0):
    """A fully annotated synthetic sentence of exactly ``length`` tokens."""
    return gen_synthetic_compression(1, seed=seed, max_len=length, min_len=length).sentences[0]


def gradcheck_pipeline(pipeline: str | PipelineConfig, length: int = 3, tol: float = 1e-4,
                       hidden_dim: int = 3, embed_dim: int = 2, seed: int = 0,
                       corrupt: Callable[[dict], None] | None = None) -> ad.GradCheckReport:
    """Finite-difference check of the joint teacher-forced loss of a shrunken
    pipeline on one sentence. Vocabularies come from that sentence only, so
    every embedding row is exercised."""
    cfg = pipeline if isinstance(pipeline, PipelineConfig) else resolve_pipeline(pipeline)
    cfg = cfg.with_dims(hidden_dim, embed_dim)
    sentence = gradcheck_sentence(length, seed)
    model = Model(cfg.units, build_vocabs([sentence]), seed)
    # biases start at constants; nudge them so no gradient is trivially symmetric
    rng = np.random.default_rng(seed + 1)
    for k, v in model.params.items():
        v += rng.normal(0.0, 0.1, size=v.shape)
    params = {k: v.copy() for k, v in model.params.items()}
    return ad.finite_diff_check(lambda P: joint_loss(model, sentence, P), params,
                                tol=tol, corrupt=corrupt)


@dataclass
class TrendResult:
    """Held-out score per model, plus the learning curve it was read from."""

    metric: str
    final: dict[str, float] = field(default_factory=dict)
    curves: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)


def _train_curve(cfg: PipelineConfig, train: Corpus, dev: Corpus, target: str, metric: str,
                 config: TrainConfig, steps: int, eval_every: int, seed: int, start: int = 0):
    model = Model(cfg.units, build_vocabs(train), seed)
    trainer = Trainer(model, config)
    curve = []
    if start:
        trainer.fit(train, start)
    while trainer.step < steps:
        trainer.fit(train, min(eval_every, steps - trainer.step))
        curve.append((trainer.step, getattr(evaluate(model, dev)[target], metric)))
    return curve


def parser_ablation_trend(rows: Sequence[tuple[str, str]] = (
        ("input", "subtree"), ("input", "previous_step"), ("final_state", "previous_step")),
        n_train: int = 1000, n_dev: int = 200, max_len: int = 15, steps: int = 4000,
        eval_every: int = 1000, hidden_dim: int = 64, embed_dim: int = 32,
        seed: int = 0, learning_rate: float = 0.05) -> TrendResult:
    """Train each parser ablation row on the synthetic treebank; report dev UAS.

    The reported score per row is the final evaluation, not the best one.
    """
    train = gen_synthetic_trees(n_train, max_len=max_len, seed=seed + 11)
    dev = gen_synthetic_trees(n_dev, max_len=max_len, seed=seed + 12)
    out = TrendResult("uas")
    for inp, rec in rows:
        name = f"{inp}+{rec}"
        cfg = preset(f"parser_ablation({inp},{rec})", hidden_dim, embed_dim)
        t0 = time.perf_counter()
        curve = _train_curve(cfg, train, dev, "parser", "uas",
                             TrainConfig(learning_rate=learning_rate, seed=seed),
                             steps, eval_every, seed)
        out.seconds[name] = time.perf_counter() - t0
        out.curves[name] = curve
        out.final[name] = curve[-1][1]
    return out


def compression_trend(n_train: int = 150, n_dev: int = 200, max_len: int = 15,
                      n_treebank: int = 1000,
                      steps: int = 3000, pretrain_steps: int = 1000, eval_every: int = 1000,
                      hidden_dim: int = 32, embed_dim: int = 16, seed: int = 0,
                      learning_rate: float = 0.05,
                      models: Sequence[str] = ("summarizer_stackprop", "summarizer_baseline")
                      ) -> TrendResult:
    """Keep/drop F1 of the stack-propagated summarizer against the single-task
    tagger. Multi-task models pretrain the parser, then split updates evenly.

    ``steps`` counts keep/drop updates, so every model sees the same number of
    them: a multi-task run lasts ``pretrain_steps + 2 * steps`` updates in all.
    Parser updates also draw from ``n_treebank`` extra sentences that carry
    trees but no keep/drop labels, so the parser is not limited to the small
    compression corpus.
    """
    compressed = gen_synthetic_compression(n_train, seed=seed + 21, max_len=max_len)
    treebank = [replace(s, keep_drop=None) for s in
                gen_synthetic_compression(n_treebank, seed=seed + 23, max_len=max_len)]
    train = Corpus(list(compressed) + treebank)
    dev = gen_synthetic_compression(n_dev, seed=seed + 22, max_len=max_len)
    out = TrendResult("f1")
    for name in models:
        cfg = preset(name, hidden_dim, embed_dim)
        if len(cfg.supervised) > 1:
            config = TrainConfig(learning_rate=learning_rate, seed=seed,
                                 task_dist={"parser": 0.5, "keep_drop": 0.5},
                                 pretrain=[("parser", pretrain_steps)])
            total, every, offset = pretrain_steps + 2 * steps, 2 * eval_every, pretrain_steps
        else:
            config = TrainConfig(learning_rate=learning_rate, seed=seed)
            total, every, offset = steps, eval_every, 0
        t0 = time.perf_counter()
        curve = _train_curve(cfg, train, dev, "keep_drop", "f1", config, total, every, seed,
                             start=offset)
        # x axis in (approximate) keep/drop updates
        curve = [((s - offset) // (2 if offset else 1), v) for s, v in curve]
        out.seconds[name] = time.perf_counter() - t0
        out.curves[name] = curve
        out.final[name] = curve[-1][1]
    return out
