"""The TBRU unroller.

A pipeline is an ordered list of ``TBRUSpec``. ``run_pipeline`` executes the
units one after another against a single sentence, advancing one global step
counter. At each step the unit's recurrence links select earlier global steps
whose hidden vectors feed its cell, so the recurrent graph is assembled while
decisions are being made.

Global steps are 1-based: ``graph.hidden[alpha - 1]`` is the vector of step
``alpha``.
"""

from __future__ import annotations

import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import cells
from .autodiff import Tensor
from .data import Sentence, Vocabs
from .transitions import (LEFT_TO_RIGHT, ParserState, TransitionError,
                          TransitionSystem, input_pointer, make_system)


class EngineError(ValueError):
    pass


TEACHER_FORCED = "teacher_forced"
GREEDY = "greedy"

LINK_KINDS = ("previous_step", "final_state", "input_link", "subtree", "token_subtree", "all_of")
INPUT_FNS = ("token_embedding", "reversed_token_embedding", "previous_output_embedding",
             "feature_templates", "empty")
CELLS = ("lstm", "mlp")

DEFAULT_TEMPLATES = (
    "S0.w", "S1.w", "S2.w", "B0.w", "B1.w", "B2.w",
    "S0.p", "S1.p", "S2.p", "B0.p", "B1.p", "B2.p",
    "S0.lc.w", "S0.rc.w", "S1.lc.w", "S1.rc.w",
    "S0.lc.l", "S0.rc.l", "S1.lc.l", "S1.rc.l",
)

_LINK_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([^)]*)\))?\s*$")


@dataclass(frozen=True)
class Link:
    """One recurrence term. ``source`` names an earlier unit or ``self``."""

    kind: str
    source: str = "self"
    aggregation: str = "concat_fixed"

    @property
    def slots(self) -> int | None:
        """Fixed number of vectors contributed, or None if variable."""
        return {"subtree": 2, "all_of": None}.get(self.kind, 1)

    def __str__(self) -> str:
        if self.kind == "previous_step":
            return "previous_step"
        if self.kind == "subtree" and self.source == "self":
            return "subtree"
        if self.kind == "all_of":
            return f"all_of({self.source}, {self.aggregation})"
        return f"{self.kind}({self.source})"

    @classmethod
    def parse(cls, text: str) -> "Link":
        m = _LINK_RE.match(text)
        if not m or m.group(1) not in LINK_KINDS:
            raise ValueError(f"unknown recurrence term {text.strip()!r}")
        kind, args = m.group(1), [a.strip() for a in (m.group(2) or "").split(",") if a.strip()]
        if kind == "previous_step":
            if args:
                raise ValueError("previous_step takes no arguments")
            return cls(kind)
        if kind == "subtree":
            if len(args) > 1:
                raise ValueError("subtree takes at most one argument")
            return cls(kind, args[0] if args else "self")
        if kind == "all_of":
            if len(args) not in (1, 2):
                raise ValueError("all_of takes a component and an optional aggregation")
            agg = args[1] if len(args) == 2 else "attention"
            if agg not in ("mean", "attention"):
                raise ValueError(f"all_of aggregation must be mean or attention, got {agg!r}")
            return cls(kind, args[0], agg)
        if len(args) != 1:
            raise ValueError(f"{kind} takes exactly one component argument")
        return cls(kind, args[0])


def split_links(text: str) -> tuple[Link, ...]:
    """Parse 'a, b(x), all_of(y, mean)' respecting parentheses."""
    terms, depth, cur = [], 0, ""
    for ch in text:
        if ch == "," and depth == 0:
            terms.append(cur)
            cur = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        cur += ch
    if cur.strip():
        terms.append(cur)
    return tuple(Link.parse(t) for t in terms if t.strip())


@dataclass(frozen=True)
class TBRUSpec:
    name: str
    transition: str
    input_fn: str = "token_embedding"
    recurrence: tuple[Link, ...] = ()
    cell: str = "lstm"
    direction: str = LEFT_TO_RIGHT
    gold_field: str | None = None
    supervised: bool = False
    hidden_dim: int = 64
    embed_dim: int = 32
    mlp_layers: tuple[int, ...] = ()
    activation: str = "relu"
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    loss_weight: float = 1.0

    def links_to(self) -> set[str]:
        return {l.source for l in self.recurrence if l.source != "self"}


def validate_pipeline(pipeline: Sequence[TBRUSpec]) -> list[str]:
    """Return a list of problems; empty means valid. Never raises."""
    errors: list[str] = []
    if not pipeline:
        return ["empty pipeline"]
    seen: dict[str, TBRUSpec] = {}
    names = [u.name for u in pipeline]
    for u in pipeline:
        where = f"{u.name}:"
        if u.name in seen:
            errors.append(f"{where} duplicate name")
        if not u.name or not re.match(r"^[A-Za-z_][A-Za-z0-9_]*$", u.name):
            errors.append(f"{where} invalid name")
        if u.transition not in ("shift_only", "tagger", "arc_standard"):
            errors.append(f"{where} unknown transition system {u.transition!r}")
        if u.input_fn not in INPUT_FNS:
            errors.append(f"{where} unknown input function {u.input_fn!r}")
        if u.cell not in CELLS:
            errors.append(f"{where} unknown cell {u.cell!r}")
        if u.activation not in cells.ACTIVATIONS:
            errors.append(f"{where} unknown activation {u.activation!r}")
        if u.hidden_dim < 1 or u.embed_dim < 1 or any(d < 1 for d in u.mlp_layers):
            errors.append(f"{where} dimensions must be positive")
        if u.supervised and u.transition == "shift_only":
            errors.append(f"{where} supervised unit needs a transition system with gold decisions")
        if u.transition == "tagger" and u.gold_field not in ("pos", "keep_drop"):
            errors.append(f"{where} tagger needs gold_field pos or keep_drop")
        if u.input_fn == "feature_templates" and u.transition != "arc_standard":
            errors.append(f"{where} feature_templates needs the arc_standard system")
        if u.input_fn == "feature_templates":
            for t in u.templates:
                if not _valid_template(t):
                    errors.append(f"{where} bad feature template {t!r}")
        if u.input_fn == "previous_output_embedding" and u.transition == "shift_only":
            errors.append(f"{where} previous_output_embedding needs a system with outputs")
        if u.input_fn == "reversed_token_embedding" and u.transition != "shift_only":
            errors.append(f"{where} reversed_token_embedding needs the shift_only system")
        if u.input_fn == "empty" and not u.recurrence:
            errors.append(f"{where} cell has neither input nor recurrences")
        for link in u.recurrence:
            src = link.source
            if src == "self":
                if link.kind not in ("previous_step", "subtree"):
                    errors.append(f"{where} {link.kind} cannot refer to itself")
                elif link.kind == "subtree" and u.transition != "arc_standard":
                    errors.append(f"{where} subtree needs the arc_standard system")
                continue
            if src not in seen:
                if src in names:
                    errors.append(f"{where} forward reference to {src}")
                else:
                    errors.append(f"{where} reference to unknown component {src}")
                continue
            other = seen[src]
            if link.kind in ("subtree", "token_subtree") and other.transition != "arc_standard":
                errors.append(f"{where} {link.kind} source {src} is not an arc_standard unit")
            if link.kind == "subtree" and u.transition != "arc_standard":
                errors.append(f"{where} subtree({src}) needs this unit to have a stack")
            if link.kind == "input_link" and other.transition == "arc_standard":
                errors.append(f"{where} input_link source {src} must be token-aligned")
            if link.kind == "previous_step":
                errors.append(f"{where} previous_step takes no source")
        seen[u.name] = u
    return errors


def _valid_template(t: str) -> bool:
    return re.match(r"^(S[0-2]|B[0-2])(\.(lc|rc))?\.(w|p|l)$", t) is not None and \
        not (t.endswith(".l") and ".lc" not in t and ".rc" not in t)


# -- parameters -----------------------------------------------------------

class Model:
    """Pipeline + vocabularies + named float64 parameter arrays."""

    def __init__(self, pipeline: Sequence[TBRUSpec], vocabs: Vocabs, seed: int = 0):
        errors = validate_pipeline(pipeline)
        if errors:
            raise EngineError("; ".join(errors))
        self.units = tuple(pipeline)
        self.by_name = {u.name: u for u in self.units}
        self.vocabs = vocabs
        self.systems: dict[str, TransitionSystem] = {}
        for u in self.units:
            tags = vocabs.tags(u.gold_field) if u.transition == "tagger" else ()
            self.systems[u.name] = make_system(u.transition, tags=tags, labels=vocabs.labels,
                                               direction=u.direction, field=u.gold_field or "pos")
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        rng = np.random.default_rng(seed)
        for u in self.units:
            self._init_unit(u, rng)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def unit_params(self, name: str) -> list[str]:
        return [k for k in self.params if k.split("/", 1)[0] == name]

    def input_dim(self, u: TBRUSpec) -> int:
        if u.input_fn in ("token_embedding", "reversed_token_embedding", "previous_output_embedding"):
            return u.embed_dim
        if u.input_fn == "feature_templates":
            return u.embed_dim * len(u.templates)
        return 0

    def source_dim(self, u: TBRUSpec, link: Link) -> int:
        src = u if link.source == "self" else self.by_name[link.source]
        return src.hidden_dim

    def _init_unit(self, u: TBRUSpec, rng: np.random.Generator) -> None:
        P = self.params
        name = u.name
        system = self.systems[name]
        E, H = u.embed_dim, u.hidden_dim

        def emb(rows):
            return rng.normal(0.0, 1.0 / np.sqrt(E), size=(rows, E))

        if u.input_fn in ("token_embedding", "reversed_token_embedding"):
            P[f"{name}/words"] = emb(len(self.vocabs.words))
        elif u.input_fn == "previous_output_embedding":
            P[f"{name}/outputs"] = emb(system.num_decisions + 1)
        elif u.input_fn == "feature_templates":
            P[f"{name}/feat_words"] = emb(len(self.vocabs.words) + 1)
            P[f"{name}/feat_pos"] = emb(len(self.vocabs.pos) + 2)
            P[f"{name}/feat_labels"] = emb(len(self.vocabs.labels) + 1)

        in_dim = self.input_dim(u)
        needs_h0 = False
        for j, link in enumerate(u.recurrence):
            d = self.source_dim(u, link)
            in_dim += d * (link.slots or 1)
            if link.kind == "previous_step":
                needs_h0 = True
            elif link.kind == "all_of":
                if link.aggregation == "attention":
                    needs_h0 = True
                    P[f"{name}/att_q{j}"] = cells.xavier(rng, d, H)
                    P[f"{name}/att_k{j}"] = cells.xavier(rng, d, d)
            else:
                for k in range(link.slots):
                    P[f"{name}/null{j}_{k}"] = np.zeros(d)
        if needs_h0:
            P[f"{name}/h0"] = np.zeros(H)

        if u.cell == "lstm":
            P[f"{name}/lstm_w"], P[f"{name}/lstm_b"] = cells.lstm_init(rng, in_dim, H)
        else:
            dims = [in_dim, *u.mlp_layers, H]
            for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                P[f"{name}/mlp_w{k}"] = cells.xavier(rng, b, a)
                P[f"{name}/mlp_b{k}"] = np.zeros(b)
        if system.num_decisions > 1:
            P[f"{name}/out_w"] = cells.xavier(rng, system.num_decisions, H)
            P[f"{name}/out_b"] = np.zeros(system.num_decisions)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


# -- the unrolled graph ---------------------------------------------------

@dataclass
class GlobalGraph:
    hidden: list[Tensor] = field(default_factory=list)
    memory: list[Tensor | None] = field(default_factory=list)
    decisions: list[int] = field(default_factory=list)
    edges: list[tuple[int, ...]] = field(default_factory=list)
    link_arity: list[tuple[int, ...]] = field(default_factory=list)
    units: list[str] = field(default_factory=list)
    logits: list[Tensor | None] = field(default_factory=list)
    log_probs: list[Tensor | None] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    forced: list[bool] = field(default_factory=list)
    component_spans: dict[str, tuple[int, int]] = field(default_factory=dict)
    final_states: dict[str, object] = field(default_factory=dict)
    token_steps: dict[str, dict[int, int]] = field(default_factory=dict)

    @property
    def alpha(self) -> int:
        return len(self.hidden)

    def span(self, name: str) -> range:
        first, last = self.component_spans[name]
        return range(first, last + 1)

    def steps_of(self, name: str) -> list[int]:
        return list(self.span(name))

    def check_acyclic(self) -> bool:
        return all(src < step for step, es in enumerate(self.edges, start=1) for src in es)


@dataclass
class _UnitRun:
    unit: TBRUSpec
    system: TransitionSystem
    scope: Mapping[str, Tensor]
    sentence: Sentence
    word_ids: list[int]
    own_steps: list[int] = field(default_factory=list)


def resolve_recurrence(link: Link, run: _UnitRun, state, graph: GlobalGraph) -> list[int | None]:
    """Global steps selected by one recurrence term; None marks an empty slot."""
    src = run.unit.name if link.source == "self" else link.source
    if link.source != "self" and src not in graph.component_spans:
        raise EngineError(f"{run.unit.name} links to {src}, which has not been executed")
    if link.kind == "previous_step":
        return [run.own_steps[-1] if run.own_steps else None]
    if link.kind == "final_state":
        return [graph.component_spans[src][1]]
    if link.kind == "all_of":
        return graph.steps_of(src)
    if link.kind == "input_link":
        if isinstance(state, ParserState) and state.buffer_empty:
            return [graph.component_spans[src][1]]
        return [graph.token_steps[src][input_pointer(state)]]
    if link.kind == "token_subtree":
        foreign = graph.final_states[src]
        return [foreign.last_modifier_step[input_pointer(state)]]
    if link.kind == "subtree":
        lms = state.last_modifier_step if link.source == "self" \
            else graph.final_states[src].last_modifier_step
        out: list[int | None] = []
        for depth in (1, 2):
            out.append(lms[state.stack[-depth]] if len(state.stack) >= depth else None)
        return out
    raise EngineError(f"unknown recurrence kind {link.kind}")


def resolve_input(run: _UnitRun, state, graph: GlobalGraph, model: Model) -> Tensor | None:
    u = run.unit
    P = run.scope
    fn = u.input_fn
    if fn == "empty":
        return None
    if fn == "token_embedding":
        return ad.row(P[f"{u.name}/words"], run.word_ids[input_pointer(state) - 1])
    if fn == "reversed_token_embedding":
        return ad.row(P[f"{u.name}/words"], run.word_ids[state.n - state.pointer])
    if fn == "previous_output_embedding":
        prev = graph.decisions[run.own_steps[-1] - 1] if run.own_steps else run.system.num_decisions
        return ad.row(P[f"{u.name}/outputs"], prev)
    if fn == "feature_templates":
        parts = [ad.row(P[f"{u.name}/{table}"], idx)
                 for table, idx in (feature_id(t, state, run.sentence, run.word_ids, model)
                                    for t in u.templates)]
        return ad.concat(parts)
    raise EngineError(f"unknown input function {fn}")


def feature_id(template: str, state: ParserState, sentence: Sentence, word_ids, model: Model):
    """(table suffix, row) for one feature template; the last row is NULL."""
    v = model.vocabs
    parts = template.split(".")
    slot, attr = parts[0], parts[-1]
    tok = 0
    k = int(slot[1])
    if slot[0] == "S":
        if len(state.stack) > k:
            tok = state.stack[-1 - k]
    else:
        p = state.buffer_pointer + k
        if p <= state.n:
            tok = state.position(p)
    if tok and len(parts) == 3:
        kids = state.children(tok)
        if not kids:
            tok = 0
        else:
            tok = min(kids) if parts[1] == "lc" else max(kids)
    if attr == "w":
        return "feat_words", word_ids[tok - 1] if tok else len(v.words)
    if attr == "p":
        if not tok:
            return "feat_pos", len(v.pos) + 1
        if sentence.pos is None or sentence.pos[tok - 1] not in v.pos:
            return "feat_pos", len(v.pos)
        return "feat_pos", v.pos.index(sentence.pos[tok - 1])
    return "feat_labels", state.labels[tok] if tok else len(v.labels)


def _unit_step(model: Model, run: _UnitRun, state, graph: GlobalGraph):
    u = run.unit
    P = run.scope
    fixed: list[Tensor] = []
    contexts: list[Tensor] = []
    edges: list[int] = []
    arity: list[int] = []
    c_prev = None
    query_step = run.own_steps[-1] if run.own_steps else None
    for j, link in enumerate(u.recurrence):
        steps = resolve_recurrence(link, run, state, graph)
        got = [s for s in steps if s is not None]
        arity.append(len(got))
        edges.extend(got)
        if link.kind == "all_of":
            vecs = [graph.hidden[s - 1] for s in got]
            if link.aggregation == "attention":
                query = graph.hidden[query_step - 1] if query_step else P[f"{u.name}/h0"]
                if query_step:
                    edges.append(query_step)
                contexts.append(cells.aggregate_recurrent(
                    vecs, "attention", query=query, wq=P[f"{u.name}/att_q{j}"],
                    wk=P[f"{u.name}/att_k{j}"]))
            else:
                contexts.append(cells.aggregate_recurrent(vecs, "mean"))
            continue
        for k, s in enumerate(steps):
            if s is not None:
                fixed.append(graph.hidden[s - 1])
            elif link.kind == "previous_step":
                fixed.append(P[f"{u.name}/h0"])
            else:
                fixed.append(P[f"{u.name}/null{j}_{k}"])
        if link.kind == "previous_step" and steps[0] is not None and u.cell == "lstm":
            c_prev = graph.memory[steps[0] - 1]
    m = resolve_input(run, state, graph, model)
    parts = ([m] if m is not None else []) + contexts
    if fixed:
        parts.append(cells.aggregate_recurrent(fixed, "concat_fixed", slots=len(fixed)))
    if not parts:
        raise EngineError(f"{u.name}: cell received neither input nor recurrences")
    x = ad.concat(parts)
    if u.cell == "lstm":
        h, c = cells.lstm_step(P[f"{u.name}/lstm_w"], P[f"{u.name}/lstm_b"], x, c_prev)
    else:
        layers = [(P[f"{u.name}/mlp_w{k}"], P[f"{u.name}/mlp_b{k}"])
                  for k in range(len(u.mlp_layers) + 1)]
        h, c = cells.mlp_forward(layers, x, u.activation), None
    # duplicates (e.g. an attention query that is also a fixed link) count once
    return h, c, tuple(dict.fromkeys(edges)), tuple(arity)


def run_tbru(model: Model, unit: TBRUSpec, graph: GlobalGraph, sentence: Sentence,
             scope: Mapping[str, Tensor], mode: str = GREEDY,
             word_ids: Sequence[int] | None = None) -> list[int]:
    """Unroll one unit to its terminal state, appending to ``graph``."""
    system = model.systems[unit.name]
    n = len(sentence)
    if word_ids is None:
        word_ids = [model.vocabs.words.id(w) for w in sentence.tokens]
    for src in unit.links_to():
        if src not in graph.component_spans:
            raise EngineError(f"{unit.name} links to {src}, which has not been executed")
    if mode == TEACHER_FORCED and not has_gold(unit, sentence):
        raise EngineError(f"{unit.name}: teacher forcing needs gold annotation")
    run = _UnitRun(unit, system, scope, sentence, list(word_ids))
    state = system.initial_state(n)
    first = graph.alpha + 1
    tokens: dict[int, int] = {}
    decisions = []
    has_output = system.num_decisions > 1
    while not system.is_terminal(state):
        step = graph.alpha + 1
        h, c, edges, arity = _unit_step(model, run, state, graph)
        if has_output:
            logits = cells.decision_logits(scope[f"{unit.name}/out_w"], scope[f"{unit.name}/out_b"], h)
            mask = system.allowed_mask(state)
            logp = ad.masked_log_softmax(logits, mask)
            if mode == TEACHER_FORCED:
                d = system.gold_oracle(state, sentence)
            else:
                d = cells.argmax_allowed(logits.value, mask)
        else:
            logits = logp = mask = None
            d = system.allowed(state)[0]
        if not isinstance(state, ParserState):
            tokens[input_pointer(state)] = step
        graph.hidden.append(h)
        graph.memory.append(c)
        graph.decisions.append(d)
        graph.edges.append(edges)
        graph.link_arity.append(arity)
        graph.units.append(unit.name)
        graph.logits.append(logits)
        graph.log_probs.append(logp)
        graph.masks.append(mask)
        graph.forced.append(mode == TEACHER_FORCED)
        run.own_steps.append(step)
        decisions.append(d)
        state = system.apply(state, d, step)
    if len(decisions) != system.num_steps(n):
        raise EngineError(f"{unit.name}: {len(decisions)} steps, expected {system.num_steps(n)}")
    graph.component_spans[unit.name] = (first, graph.alpha)
    graph.final_states[unit.name] = state
    graph.token_steps[unit.name] = tokens
    return decisions


def has_gold(unit: TBRUSpec, sentence: Sentence) -> bool:
    if unit.transition == "shift_only":
        return True
    if unit.transition == "arc_standard":
        return sentence.heads is not None
    return getattr(sentence, unit.gold_field or "pos") is not None


def run_pipeline(model: Model, sentence: Sentence, mode: str = GREEDY,
                 scope: Mapping[str, Tensor] | None = None, upto: str | None = None,
                 predicted: Iterable[str] = ()) -> GlobalGraph:
    """Execute every unit (or those up to and including ``upto``).

    In teacher-forced mode each supervised unit with gold annotation follows
    its gold decisions, except units named in ``predicted`` which decode
    greedily; unsupervised units and units without gold always decode greedily.
    """
    if mode not in (GREEDY, TEACHER_FORCED):
        raise ValueError(f"unknown mode {mode!r}")
    if len(sentence) < 1:
        raise TransitionError("empty sentence")
    if scope is None:
        scope = ad.Tape().watch(model.params)
    predicted = set(predicted)
    graph = GlobalGraph()
    word_ids = [model.vocabs.words.id(w) for w in sentence.tokens]
    for unit in model.units:
        unit_mode = GREEDY
        if mode == TEACHER_FORCED and unit.supervised and unit.name not in predicted:
            if has_gold(unit, sentence):
                unit_mode = TEACHER_FORCED
            elif unit.name == upto:
                raise EngineError(f"{unit.name}: teacher forcing needs gold annotation")
        run_tbru(model, unit, graph, sentence, scope, unit_mode, word_ids)
        if unit.name == upto:
            break
    return graph


def decision_name(model: Model, unit: str, d: int) -> str:
    return model.systems[unit].decision_vocab[d]


def export_trace(graph: GlobalGraph, model: Model | None = None, decisions: bool = False) -> str:
    """Graphviz DOT text: node ``s<step>`` per global step, one edge per link."""
    lines = ["digraph tbru {", "  rankdir=LR;"]
    for name, (first, last) in graph.component_spans.items():
        lines.append(f"  subgraph cluster_{name} {{ label=\"{name}\";")
        for step in range(first, last + 1):
            label = f"{name} {step - first + 1}"
            if decisions and model is not None:
                label += f"\\n{decision_name(model, name, graph.decisions[step - 1])}"
            lines.append(f"    s{step} [label=\"{label}\"];")
        lines.append("  }")
    for step, srcs in enumerate(graph.edges, start=1):
        for src in srcs:
            lines.append(f"  s{src} -> s{step};")
    lines.append("}")
    return "\n".join(lines) + "\n"
