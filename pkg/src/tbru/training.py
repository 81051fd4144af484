"""Locally normalized training, multi-task scheduling, evaluation, checkpoints."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import KEEP, ROOT_LABEL, Sentence, Vocabs
from .engine import GREEDY, TEACHER_FORCED, GlobalGraph, Model, has_gold, run_pipeline
from .pipelines import PipelineConfig, load_config

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 4
    task_dist: dict[str, float] | None = None   # None: uniform over supervised units
    pretrain: list[tuple[str, int]] = field(default_factory=list)
    max_steps: int = 1000
    seed: int = 0
    clip_norm: float = 5.0
    upstream: str = "gold"                      # or "predicted"
    workers: int = 1

    def tasks(self, supervised: Sequence[str]) -> tuple[list[str], np.ndarray]:
        if self.task_dist is None:
            return list(supervised), np.full(len(supervised), 1.0 / len(supervised))
        names = list(self.task_dist)
        unknown = [t for t in names if t not in supervised]
        if unknown:
            raise ValueError(f"task distribution names unsupervised units {unknown}")
        return names, np.array([self.task_dist[t] for t in names], dtype=float)

    def validate(self, supervised: Sequence[str]) -> None:
        if not supervised:
            raise ValueError("pipeline has no supervised unit to train")
        names, p = self.tasks(supervised)
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("task distribution must be non-negative and sum to 1")
        for task, count in self.pretrain:
            if count < 0:
                raise ValueError("pretraining step counts must be >= 0")
            if task not in supervised:
                raise ValueError(f"pretraining task {task} is not a supervised unit")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.upstream not in ("gold", "predicted"):
            raise ValueError("upstream must be gold or predicted")


# -- objective ------------------------------------------------------------

def loss(graph: GlobalGraph, target: str, gold: Sequence[int] | None = None) -> ad.Tensor:
    """Negative log-likelihood of the gold decisions of ``target``."""
    steps = graph.steps_of(target)
    if gold is None:
        if not all(graph.forced[s - 1] for s in steps):
            raise TrainingError(f"{target} was not unrolled in teacher-forced mode")
        gold = [graph.decisions[s - 1] for s in steps]
    if len(gold) != len(steps):
        raise TrainingError(f"{len(gold)} gold decisions for {len(steps)} steps of {target}")
    # units with a single decision have no output layer; their log-prob is 0
    picks = [ad.pick(graph.log_probs[s - 1], d) for s, d in zip(steps, gold)
             if graph.log_probs[s - 1] is not None]
    if not picks:
        return graph.hidden[steps[0] - 1].tape.constant(0.0)
    return ad.scale(ad.add_n(picks), -1.0)


def reference_loss(graph: GlobalGraph, target: str) -> float:
    """Same quantity recomputed from the raw recorded logits with numpy."""
    total = 0.0
    for s in graph.steps_of(target):
        if graph.logits[s - 1] is None:
            continue
        z = graph.logits[s - 1].value
        mask = graph.masks[s - 1]
        za = z[mask]
        lse = za.max() + math.log(np.exp(za - za.max()).sum())
        total -= z[graph.decisions[s - 1]] - lse
    return total


def example_loss(model: Model, sentence: Sentence, target: str, scope,
                 upstream: str = "gold") -> ad.Tensor:
    names = [u.name for u in model.units]
    predicted = names[:names.index(target)] if upstream == "predicted" else ()
    graph = run_pipeline(model, sentence, TEACHER_FORCED, scope, upto=target, predicted=predicted)
    return ad.scale(loss(graph, target), model.by_name[target].loss_weight)


def joint_loss(model: Model, sentence: Sentence, scope) -> ad.Tensor:
    """Sum of every supervised unit's loss over one teacher-forced unroll."""
    graph = run_pipeline(model, sentence, TEACHER_FORCED, scope)
    parts = [ad.scale(loss(graph, u.name), u.loss_weight) for u in model.units if u.supervised]
    return ad.add_n(parts)


# -- schedule -------------------------------------------------------------

def multitask_schedule(config: TrainConfig, tasks: Sequence[str], rng: np.random.Generator,
                       step: int) -> int:
    """Task index for update ``step``: pretraining windows first, in order,
    then samples from the task distribution."""
    names, p = config.tasks(tasks)
    offset = 0
    for task, count in config.pretrain:
        if step < offset + count:
            return list(tasks).index(task)
        offset += count
    k = int(rng.choice(len(names), p=p))
    return list(tasks).index(names[k])


# -- optimisation ---------------------------------------------------------

@dataclass
class StepResult:
    step: int
    task: str
    loss: float
    grad_norm: float


class Trainer:
    """Momentum SGD over a model; owns the RNG and momentum buffers."""

    def __init__(self, model: Model, config: TrainConfig, config_text: str = ""):
        self.model = model
        self.config = config
        self.tasks = [u.name for u in model.units if u.supervised]
        config.validate(self.tasks)
        self.rng = np.random.default_rng(config.seed)
        self.momentum = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.step = 0
        self.config_text = config_text

    def gradients(self, batch: Sequence[Sentence], task: str) -> tuple[float, dict[str, np.ndarray]]:
        def one(sentence):
            tape = ad.Tape()
            scope = tape.watch(self.model.params)
            L = example_loss(self.model, sentence, task, scope, self.config.upstream)
            value = float(L.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} on task {task} for {' '.join(sentence.tokens)}")
            return value, tape.backward(L).for_leaves()

        if self.config.workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(self.config.workers) as pool:
                results = list(pool.map(one, batch))
        else:
            results = [one(s) for s in batch]
        # summed in batch order, so the result does not depend on worker timing
        total = {k: np.zeros_like(v) for k, v in self.model.params.items()}
        values = []
        for value, grads in results:
            values.append(value)
            for k, g in grads.items():
                total[k] += g
        for g in total.values():
            g /= len(batch)
        return float(np.mean(values)), total

    def apply(self, grads: dict[str, np.ndarray]) -> float:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        c = self.config
        factor = c.clip_norm / norm if c.clip_norm and norm > c.clip_norm else 1.0
        for k, p in self.model.params.items():
            v = self.momentum[k]
            v *= c.momentum
            v += factor * grads[k]
            p -= c.learning_rate * v
        return norm

    def train_step(self, corpus: Sequence[Sentence]) -> StepResult:
        if not len(corpus):
            raise TrainingError("empty training corpus")
        task = self.tasks[multitask_schedule(self.config, self.tasks, self.rng, self.step)]
        # partially annotated corpora: each task samples only the sentences it has gold for
        unit = self.model.by_name[task]
        pool = [i for i, s in enumerate(corpus) if has_gold(unit, s)]
        if not pool:
            raise TrainingError(f"no sentence in the training corpus has gold for task {task}")
        size = min(self.config.batch_size, len(pool))
        idx = self.rng.choice(len(pool), size=size, replace=False)
        batch = [corpus[pool[int(i)]] for i in idx]
        value, grads = self.gradients(batch, task)
        norm = self.apply(grads)
        self.step += 1
        return StepResult(self.step, task, value, norm)

    def fit(self, corpus: Sequence[Sentence], steps: int | None = None,
            callback: Callable[[StepResult], None] | None = None) -> list[StepResult]:
        out = []
        target = self.config.max_steps if steps is None else self.step + steps
        while self.step < target:
            r = self.train_step(corpus)
            out.append(r)
            if callback is not None:
                callback(r)
        return out

    # -- persistence --
    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.momentum, self.rng, self.step,
                        self.config_text, self.config)

    def restore(self, path) -> None:
        ck = load_checkpoint(path)
        load_into(self.model, ck.params)
        load_into_arrays(self.momentum, ck.momentum)
        self.rng.bit_generator.state = ck.rng_state
        self.step = ck.step


# -- evaluation -----------------------------------------------------------

@dataclass
class TaskMetrics:
    task: str
    kind: str
    tokens: int = 0
    sentences: int = 0
    loss: float | None = None
    uas: float | None = None
    las: float | None = None
    acc: float | None = None
    f1: float | None = None
    sentence_acc: float | None = None

    def record(self, step: int | None = None, split: str = "dev", **extra) -> dict:
        r = {"step": step, "split": split, "task": self.task, "loss": self.loss, "uas": self.uas,
             "las": self.las, "acc": self.acc, "f1": self.f1, "sentence_acc": self.sentence_acc}
        r.update(extra)
        return r


Metrics = dict[str, TaskMetrics]


def f1_score(pred: Iterable[str], gold: Iterable[str], positive: str = KEEP) -> float:
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        tp += p == positive and g == positive
        fp += p == positive and g != positive
        fn += p != positive and g == positive
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def parse_heads(state, vocabs: Vocabs) -> tuple[list[int], list[str]]:
    """Predicted heads (root = self) and labels from a terminal parser state."""
    root = state.stack[0]
    heads, labels = [], []
    for t in range(1, state.n + 1):
        if t == root:
            heads.append(t)
            labels.append(ROOT_LABEL)
        else:
            heads.append(state.heads[t])
            labels.append(vocabs.labels[state.labels[t]])
    return heads, labels


def attachment_scores(pred_heads, pred_labels, gold_heads, gold_labels) -> tuple[int, int]:
    uas = las = 0
    for ph, pl, gh, gl in zip(pred_heads, pred_labels, gold_heads, gold_labels):
        if ph == gh:
            uas += 1
            las += gold_labels is None or pl == gl
    return uas, las


def evaluate(model: Model, corpus: Sequence[Sentence], with_loss: bool = False) -> Metrics:
    """Greedy decoding of the whole pipeline; one TaskMetrics per supervised unit."""
    acc: dict[str, dict] = {u.name: {"tok": 0, "sent": 0, "ok": 0, "uas": 0, "las": 0,
                                    "exact": 0, "pred": [], "gold": [], "loss": 0.0}
                            for u in model.units if u.supervised}
    for sentence in corpus:
        graph = run_pipeline(model, sentence, GREEDY)
        for u in model.units:
            if not u.supervised or not has_gold(u, sentence):
                continue
            a = acc[u.name]
            n = len(sentence)
            a["tok"] += n
            a["sent"] += 1
            state = graph.final_states[u.name]
            if u.transition == "arc_standard":
                heads, labels = parse_heads(state, model.vocabs)
                uas, las = attachment_scores(heads, labels, sentence.heads, sentence.dep_labels)
                a["uas"] += uas
                a["las"] += las
                a["exact"] += uas == n
            else:
                tagset = model.systems[u.name].decision_vocab
                pred = [tagset[d] for d in state.emitted]
                gold = list(getattr(sentence, u.gold_field))
                a["ok"] += sum(p == g for p, g in zip(pred, gold))
                a["exact"] += pred == gold
                a["pred"].extend(pred)
                a["gold"].extend(gold)
        if with_loss:
            for name in acc:
                tape = ad.Tape()
                a = acc[name]
                a["loss"] += float(example_loss(model, sentence, name, tape.watch(model.params)).value)
    out: Metrics = {}
    for u in model.units:
        if not u.supervised:
            continue
        a = acc[u.name]
        tok = max(a["tok"], 1)
        sent = max(a["sent"], 1)
        if u.transition == "arc_standard":
            m = TaskMetrics(u.name, "parser", a["tok"], a["sent"], uas=a["uas"] / tok,
                            las=a["las"] / tok, sentence_acc=a["exact"] / sent)
        else:
            m = TaskMetrics(u.name, "tagger", a["tok"], a["sent"], acc=a["ok"] / tok,
                            sentence_acc=a["exact"] / sent)
            if u.gold_field == "keep_drop":
                m.f1 = f1_score(a["pred"], a["gold"])
        if with_loss:
            m.loss = a["loss"] / sent
        out[u.name] = m
    return out


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    rng_state: dict
    step: int
    config_text: str
    vocabs: Vocabs
    train_config: dict


def save_checkpoint(path, model: Model, momentum: dict[str, np.ndarray] | None,
                    rng: np.random.Generator | None, step: int, config_text: str,
                    train_config: TrainConfig | None = None) -> None:
    arrays = {f"param::{k}": v for k, v in model.params.items()}
    for k, v in (momentum or {}).items():
        arrays[f"momentum::{k}"] = v
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "config_text": config_text,
        "vocabs": model.vocabs.to_json(),
        "train_config": asdict(train_config) if train_config else {},
    }
    arrays["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            params = {k[len("param::"):]: z[k].copy() for k in z.files if k.startswith("param::")}
            momentum = {k[len("momentum::"):]: z[k].copy() for k in z.files if k.startswith("momentum::")}
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    return Checkpoint(params, momentum, meta["rng_state"], meta["step"], meta["config_text"],
                      Vocabs.from_json(meta["vocabs"]), meta.get("train_config", {}))


def load_into_arrays(target: dict[str, np.ndarray], source: dict[str, np.ndarray]) -> None:
    if set(target) != set(source):
        missing = sorted(set(target) ^ set(source))
        raise CheckpointError(f"parameter names differ: {missing[:5]}")
    for k, v in source.items():
        if target[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {v.shape}, model {target[k].shape}")
    for k, v in source.items():
        target[k][...] = v


def load_into(model: Model, params: dict[str, np.ndarray]) -> None:
    load_into_arrays(model.params, params)


def model_from_checkpoint(ck: Checkpoint, pipeline: PipelineConfig | None = None) -> Model:
    cfg = pipeline if pipeline is not None else load_config(ck.config_text)
    model = Model(cfg.units, ck.vocabs)
    load_into(model, ck.params)
    return model
