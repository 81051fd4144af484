"""Corpus ingestion, vocabularies and synthetic desk-scale corpora.

File format: one token per line, tab- or space-separated columns
``index form pos head deplabel keepdrop`` (the last four may be omitted or
``_``), sentences separated by blank lines. Head 0 marks the root; internally
the root's head is its own index.
"""

from __future__ import annotations

import collections
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .transitions import ArcStandardSystem, is_projective, is_tree

log = logging.getLogger(__name__)

ROOT_LABEL = "root"
KEEP, DROP = "KEEP", "DROP"
UNK, START = "<unk>", "<s>"


class FormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    pos: tuple[str, ...] | None = None
    heads: tuple[int, ...] | None = None
    dep_labels: tuple[str, ...] | None = None
    keep_drop: tuple[str, ...] | None = None

    def __post_init__(self):
        n = len(self.tokens)
        for name in ("pos", "heads", "dep_labels", "keep_drop"):
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise ValueError(f"{name} has {len(col)} entries for {n} tokens")
        if self.heads is not None and not is_tree(self.heads):
            raise ValueError("heads do not form a single-rooted tree")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    sentences: list[Sentence] = field(default_factory=list)
    skipped_nonprojective: int = 0

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]


# -- CoNLL-style files ----------------------------------------------------

def _opt(value: str) -> str | None:
    return None if value == "_" else value


def _parse_block(rows: list[tuple[int, list[str]]]) -> Sentence:
    tokens, pos, heads, labels, kd = [], [], [], [], []
    n = len(rows)
    for k, (lineno, cols) in enumerate(rows, start=1):
        if len(cols) < 2 or len(cols) > 6:
            raise FormatError(f"expected 2 to 6 columns, got {len(cols)}", lineno)
        cols = cols + ["_"] * (6 - len(cols))
        try:
            idx = int(cols[0])
        except ValueError:
            raise FormatError(f"bad token index {cols[0]!r}", lineno) from None
        if idx != k:
            raise FormatError(f"token index {idx}, expected {k}", lineno)
        tokens.append(cols[1])
        pos.append(_opt(cols[2]))
        if cols[3] == "_":
            heads.append(None)
        else:
            try:
                h = int(cols[3])
            except ValueError:
                raise FormatError(f"bad head {cols[3]!r}", lineno) from None
            if not 0 <= h <= n:
                raise FormatError(f"head {h} out of range for {n} tokens", lineno)
            heads.append(k if h == 0 else h)
        labels.append(_opt(cols[4]))
        kd.append(_opt(cols[5]))

    def column(values, name):
        present = [v is not None for v in values]
        if all(present):
            return tuple(values)
        if any(present):
            raise FormatError(f"column {name} partially annotated", rows[0][0])
        return None

    heads_t = column(heads, "head")
    try:
        return Sentence(tuple(tokens), column(pos, "pos"), heads_t,
                        column(labels, "deplabel"), column(kd, "keepdrop"))
    except ValueError as e:
        raise FormatError(str(e), rows[0][0]) from None


def parse_conll(text: str) -> Corpus:
    corpus = Corpus()
    block: list[tuple[int, list[str]]] = []

    def flush():
        if not block:
            return
        sent = _parse_block(block)
        if sent.heads is not None and not is_projective(sent.heads):
            corpus.skipped_nonprojective += 1
        else:
            corpus.sentences.append(sent)
        block.clear()

    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            flush()
        elif not line.startswith("#"):
            block.append((lineno, line.split()))
    flush()
    if corpus.skipped_nonprojective:
        log.warning("skipped %d non-projective sentences", corpus.skipped_nonprojective)
    return corpus


def read_conll(path) -> Corpus:
    return parse_conll(Path(path).read_text(encoding="utf-8"))


def format_conll(corpus: Iterable[Sentence]) -> str:
    blocks = []
    for s in corpus:
        lines = []
        for i, tok in enumerate(s.tokens, start=1):
            head = "_" if s.heads is None else str(0 if s.heads[i - 1] == i else s.heads[i - 1])
            cols = [str(i), tok,
                    "_" if s.pos is None else s.pos[i - 1],
                    head,
                    "_" if s.dep_labels is None else s.dep_labels[i - 1],
                    "_" if s.keep_drop is None else s.keep_drop[i - 1]]
            lines.append("\t".join(cols))
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def write_conll(corpus: Iterable[Sentence], path) -> None:
    Path(path).write_text(format_conll(corpus), encoding="utf-8", newline="\n")


# -- vocabularies ---------------------------------------------------------

@dataclass(frozen=True)
class Vocab:
    """Dense string ids; ``<unk>`` is id 0 and ``<s>`` id 1."""

    items: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.items)})

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def start_id(self) -> int:
        return self._index[START]

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, w) -> bool:
        return w in self._index

    def id(self, w: str) -> int:
        return self._index.get(w, self._index[UNK])


def _by_frequency(counts: collections.Counter, min_count: int = 1) -> list[str]:
    return [w for w, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) if c >= min_count]


def build_vocab(corpus: Iterable[Sentence], min_count: int = 1) -> Vocab:
    counts = collections.Counter(w for s in corpus for w in s.tokens)
    return Vocab((UNK, START) + tuple(w for w in _by_frequency(counts, min_count)
                                      if w not in (UNK, START)))


@dataclass(frozen=True)
class Vocabs:
    """Everything a pipeline needs to size its tables and decision sets."""

    words: Vocab
    pos: tuple[str, ...] = ()
    labels: tuple[str, ...] = ()
    keep_drop: tuple[str, ...] = (KEEP, DROP)

    def tags(self, field_name: str) -> tuple[str, ...]:
        return {"pos": self.pos, "keep_drop": self.keep_drop}[field_name]

    def to_json(self) -> dict:
        return {"words": list(self.words.items), "pos": list(self.pos),
                "labels": list(self.labels), "keep_drop": list(self.keep_drop)}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabs":
        return cls(Vocab(tuple(d["words"])), tuple(d["pos"]), tuple(d["labels"]),
                   tuple(d["keep_drop"]))


def build_vocabs(corpus: Sequence[Sentence], min_count: int = 1) -> Vocabs:
    if not len(corpus):
        raise ValueError("cannot build vocabularies from an empty corpus")
    pos = collections.Counter(t for s in corpus if s.pos for t in s.pos)
    labels = collections.Counter(
        l for s in corpus if s.dep_labels and s.heads
        for i, l in enumerate(s.dep_labels, start=1) if s.heads[i - 1] != i)
    return Vocabs(build_vocab(corpus, min_count),
                  tuple(_by_frequency(pos)) or ("_",),
                  tuple(_by_frequency(labels)) or ("dep",))


# -- synthetic corpora ----------------------------------------------------
#
# Word forms encode valency and head direction: "v<L><R><D><lex>" takes
# exactly L left and R right dependents (L, R in 0..2) and finds its head to
# the left (D = "l"), to the right ("r") or is the root ("x"). Valency alone
# leaves about half the trees ambiguous; with the direction, a greedy
# arc-standard parser that sees S0, S1 and how many children each already has
# recovers the tree exactly (see ``greedy_valency_parse``). A fixed window
# does not, once subtrees nest. POS is "V<L><R><D>"; arc labels separate leaf
# dependents ("mod") from phrasal ones ("comp").

LEXEMES = "abc"
SALIENT = "s"


def _random_tree(rng: np.random.Generator, size: int) -> list:
    """Nested (lv, rv, left_children, right_children) tree with ``size`` nodes."""
    if size == 1:
        return [0, 0, [], []]
    options = [(l, r) for l in range(3) for r in range(3) if 1 <= l + r <= size - 1]
    lv, rv = options[rng.integers(len(options))]
    k = lv + rv
    # split size-1 nodes into k positive parts
    cuts = np.sort(rng.choice(np.arange(1, size - 1), size=k - 1, replace=False)) if k > 1 else []
    parts = np.diff(np.concatenate([[0], cuts, [size - 1]])).astype(int).tolist()
    kids = [_random_tree(rng, p) for p in parts]
    return [lv, rv, kids[:lv], kids[lv:]]


def _linearize(node, out: list, head: int) -> int:
    """Appends (lv, rv, head, is_leaf) per token in order; returns own position."""
    lv, rv, left, right = node
    child_slots = []
    for c in left:
        child_slots.append(_linearize(c, out, -1))
    out.append([lv, rv, head, not left and not right])
    me = len(out)
    for c in right:
        child_slots.append(_linearize(c, out, -1))
    for pos in child_slots:
        out[pos - 1][2] = me
    return me


def _tree_sentence(rng: np.random.Generator, length: int, salient_p: float = 0.0) -> Sentence:
    rows: list = []
    root = _linearize(_random_tree(rng, length), rows, -1)
    rows[root - 1][2] = root
    tokens, pos, heads, labels = [], [], [], []
    salient = []
    for i, (lv, rv, head, leaf) in enumerate(rows, start=1):
        lex = LEXEMES[rng.integers(len(LEXEMES))]
        is_sal = salient_p > 0 and rng.random() < salient_p
        salient.append(is_sal)
        d = "x" if head == i else ("l" if head < i else "r")
        tokens.append(f"v{lv}{rv}{d}{SALIENT if is_sal else lex}")
        pos.append(f"V{lv}{rv}{d}")
        heads.append(head)
        labels.append(ROOT_LABEL if head == i else ("mod" if leaf else "comp"))
    kd = None
    if salient_p > 0:
        kd = tuple(compression_labels(heads, salient))
    return Sentence(tuple(tokens), tuple(pos), tuple(heads), tuple(labels), kd)


def gen_synthetic_trees(n_sentences: int, max_len: int, seed: int, min_len: int = 1) -> Corpus:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rng = np.random.default_rng(seed)
    return Corpus([_tree_sentence(rng, int(rng.integers(min_len, max_len + 1)))
                   for _ in range(n_sentences)])


def greedy_valency_parse(tokens: Sequence[str]) -> tuple[int, ...]:
    """Heads of a synthetic sentence read off its word forms with one greedy
    pass over (S0, S1). Returns 1-based heads, the root pointing at itself."""
    want_l = [int(w[1]) for w in tokens]
    want_r = [int(w[2]) for w in tokens]
    side = [w[3] for w in tokens]
    got_l, got_r = [0] * len(tokens), [0] * len(tokens)
    heads = [0] * len(tokens)
    stack: list[int] = []
    b = 0

    def done(t):
        return got_l[t] == want_l[t] and got_r[t] == want_r[t]

    while b < len(tokens) or len(stack) > 1:
        if len(stack) >= 2:
            s1, s0 = stack[-2], stack[-1]
            if done(s0) and side[s0] == "l":
                heads[s0] = s1 + 1
                got_r[s1] += 1
                stack.pop()
                continue
            if done(s1) and side[s1] == "r" and got_l[s0] < want_l[s0]:
                heads[s1] = s0 + 1
                got_l[s0] += 1
                del stack[-2]
                continue
        if b == len(tokens):
            raise ValueError("word forms do not describe a projective tree")
        stack.append(b)
        b += 1
    heads[stack[0]] = stack[0] + 1
    return tuple(heads)


def compression_labels(heads: Sequence[int], salient: Sequence[bool]) -> list[str]:
    """KEEP a token iff its subtree contains a salient token: salient words
    plus the syntactic path that connects them to the root."""
    keep = list(salient)
    for d in range(1, len(heads) + 1):
        if salient[d - 1]:
            t = d
            while heads[t - 1] != t:
                t = heads[t - 1]
                keep[t - 1] = True
    return [KEEP if k else DROP for k in keep]


def gen_synthetic_compression(n_sentences: int, seed: int, max_len: int = 12,
                              min_len: int = 3, salient_p: float = 0.15) -> Corpus:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_sentences:
        s = _tree_sentence(rng, int(rng.integers(min_len, max_len + 1)), salient_p)
        if KEEP in s.keep_drop:
            out.append(s)
    return Corpus(out)


def oracle_ok(sentence: Sentence) -> bool:
    """True if the static arc-standard oracle derives exactly the gold tree."""
    labels = sorted({l for l in (sentence.dep_labels or ())}) or ["dep"]
    system = ArcStandardSystem(labels)
    try:
        state = system.run(len(sentence), system.oracle_sequence(sentence))
    except ValueError:
        return False
    heads = tuple(h if h else state.stack[0] for h in state.heads[1:])
    return heads == sentence.heads
