import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbru.data import (
    DROP, KEEP, Corpus, FormatError, Sentence, Vocabs, build_vocab, build_vocabs,
    compression_labels, format_conll, gen_synthetic_compression, gen_synthetic_trees,
    greedy_valency_parse, oracle_ok, parse_conll, read_conll, write_conll,
)
from tbru.transitions import is_projective


def test_read_two_token_block():
    corpus = parse_conll("1\tHe\t_\t2\tnsubj\t_\n2\tran\t_\t0\troot\t_\n")
    (s,) = corpus.sentences
    assert s.tokens == ("He", "ran")
    assert s.heads == (2, 2)
    assert s.pos is None and s.keep_drop is None
    assert s.dep_labels == ("nsubj", "root")


def test_blank_file_is_empty_corpus(tmp_path):
    p = tmp_path / "empty.conll"
    p.write_text("")
    assert len(read_conll(p)) == 0


def test_head_out_of_range_reports_line():
    with pytest.raises(FormatError) as e:
        parse_conll("# comment\n1\ta\t_\t0\troot\t_\n2\tb\t_\t7\tx\t_\n")
    assert e.value.line == 3


def test_malformed_lines():
    with pytest.raises(FormatError):
        parse_conll("1\ta\t_\t0\troot\t_\textra\n")
    with pytest.raises(FormatError):
        parse_conll("x\ta\n")
    with pytest.raises(FormatError):
        parse_conll("1\ta\t_\t0\n3\tb\t_\t1\n")
    with pytest.raises(FormatError):
        parse_conll("1\ta\t_\t2\n2\tb\t_\t1\n")  # cycle, no root


def test_nonprojective_sentences_are_skipped():
    text = ("1\ta\t_\t3\n2\tb\t_\t4\n3\tc\t_\t0\n4\td\t_\t3\n\n"
            "1\tok\t_\t0\n")
    corpus = parse_conll(text)
    assert corpus.skipped_nonprojective == 1
    assert len(corpus) == 1


def test_write_read_round_trip(tmp_path):
    corpus = gen_synthetic_compression(20, seed=5)
    p = tmp_path / "c.conll"
    write_conll(corpus, p)
    assert p.read_bytes().count(b"\r") == 0
    assert read_conll(p).sentences == corpus.sentences


sentences = st.integers(1, 6).flatmap(lambda n: st.builds(
    Sentence,
    st.lists(st.sampled_from(["a", "b", "élan", "x_y"]), min_size=n, max_size=n).map(tuple),
    st.one_of(st.none(), st.lists(st.sampled_from(["N", "V"]), min_size=n, max_size=n).map(tuple)),
    st.none(), st.none(),
    st.one_of(st.none(), st.lists(st.sampled_from([KEEP, DROP]), min_size=n, max_size=n).map(tuple)),
))


@settings(max_examples=50, deadline=None)
@given(st.lists(sentences, max_size=5))
def test_format_parse_round_trip(sents):
    assert parse_conll(format_conll(sents)).sentences == sents


def test_sentence_validation():
    with pytest.raises(ValueError):
        Sentence(("a", "b"), pos=("N",))
    with pytest.raises(ValueError):
        Sentence(("a", "b"), heads=(1, 2))  # two roots


def test_synthetic_trees_deterministic_and_valid():
    a = gen_synthetic_trees(40, max_len=10, seed=1)
    b = gen_synthetic_trees(40, max_len=10, seed=1)
    assert a.sentences == b.sentences
    assert a.sentences != gen_synthetic_trees(40, max_len=10, seed=2).sentences
    for s in a:
        assert 1 <= len(s) <= 10
        assert is_projective(s.heads)
        assert oracle_ok(s)
    with pytest.raises(ValueError):
        gen_synthetic_trees(1, max_len=0, seed=0)


def test_synthetic_words_encode_valency():
    for s in gen_synthetic_trees(30, max_len=12, seed=4):
        for i, w in enumerate(s.tokens, start=1):
            kids = [d for d, h in enumerate(s.heads, start=1) if h == i and d != i]
            assert int(w[1]) == sum(d < i for d in kids)
            assert int(w[2]) == sum(d > i for d in kids)
            assert w[3] == ("x" if s.heads[i - 1] == i else "l" if s.heads[i - 1] < i else "r")


def test_synthetic_trees_are_determined_by_words():
    for s in gen_synthetic_trees(300, max_len=15, seed=6):
        assert greedy_valency_parse(s.tokens) == s.heads


def test_compression_labels_follow_tree():
    corpus = gen_synthetic_compression(60, seed=3)
    seen = set()
    for s in corpus:
        salient = [w.endswith("s") for w in s.tokens]
        assert list(s.keep_drop) == compression_labels(s.heads, salient)
        seen.update(s.keep_drop)
        assert oracle_ok(s)
    assert seen == {KEEP, DROP}


def test_compression_rule_example():
    # 1 <- 2 -> 3 -> 4 ; salient token 4 keeps its ancestors 3 and 2
    heads = (2, 2, 2, 3)
    assert compression_labels(heads, [False, False, False, True]) == [DROP, KEEP, KEEP, KEEP]
    assert compression_labels(heads, [False] * 4) == [DROP] * 4


def test_vocab_order_and_unknown():
    corpus = Corpus([Sentence(("b", "a", "b")), Sentence(("c", "a", "b"))])
    v = build_vocab(corpus)
    assert v.items == ("<unk>", "<s>", "b", "a", "c")
    assert v.id("zzz") == v.unk_id == 0
    assert build_vocab(corpus, min_count=2).items == ("<unk>", "<s>", "b", "a")


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(12))))
def test_vocab_insensitive_to_order(perm):
    corpus = gen_synthetic_trees(12, max_len=6, seed=9)
    shuffled = Corpus([corpus.sentences[i] for i in perm])
    assert build_vocabs(shuffled) == build_vocabs(corpus)


def test_vocabs_json_round_trip():
    v = build_vocabs(gen_synthetic_compression(10, seed=1))
    assert Vocabs.from_json(v.to_json()) == v
    with pytest.raises(ValueError):
        build_vocabs([])


def test_tree_rule_classifier_is_perfect():
    """The generating rule, run as a classifier on gold trees, scores 100%."""
    corpus = gen_synthetic_compression(100, seed=8)
    pred = np.concatenate([compression_labels(s.heads, [t.endswith("s") for t in s.tokens])
                           for s in corpus])
    gold = np.concatenate([s.keep_drop for s in corpus])
    assert (pred == gold).all()
