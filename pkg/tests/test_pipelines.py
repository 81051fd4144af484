import pytest
from hypothesis import given, settings, strategies as st

from tbru.engine import Link, Model, run_pipeline
from tbru.data import build_vocabs, gen_synthetic_trees
from tbru.pipelines import (
    ABLATION_ROWS, PRESETS, ConfigError, dump_config, load_config, preset, resolve_pipeline,
)


@pytest.mark.parametrize("name", PRESETS + tuple(f"parser_ablation({i},{r})" for i, r in ABLATION_ROWS))
def test_presets_validate_and_round_trip(name):
    cfg = preset(name)
    assert cfg.validate() == []
    again = load_config(dump_config(cfg))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("transformer")
    with pytest.raises(ConfigError):
        preset("parser_ablation(input,stack)")


def test_compositional_parser_shape():
    cfg = preset("compositional_parser")
    enc, parser = cfg.units
    assert enc.transition == "shift_only" and enc.direction == "right_to_left" and not enc.supervised
    assert parser.transition == "arc_standard" and parser.supervised
    assert parser.recurrence == (Link("input_link", "encoder"), Link("subtree"))


def test_bilstm_tagger_shape():
    l2r, r2l, tagger = preset("bilstm_tagger").units
    assert (l2r.direction, r2l.direction) == ("left_to_right", "right_to_left")
    assert tagger.input_fn == "empty"
    assert tagger.recurrence == (Link("input_link", "l2r"), Link("input_link", "r2l"))


def test_seq2seq_ablation_row():
    _, parser = preset("parser_ablation(final_state,previous_step)").units
    assert parser.recurrence == (Link("final_state", "encoder"), Link("previous_step"))


def test_stackprop_is_superset_of_luong():
    luong = preset("multitask_luong").units[-1].recurrence
    stack = preset("multitask_stackprop").units[-1].recurrence
    assert set(luong) < set(stack)
    assert set(stack) - set(luong) == {Link("input_link", "pos_tagger")}


def test_deep_stacked_parser_units():
    cfg = preset("deep_stacked_parser")
    assert [u.transition for u in cfg.units] == ["tagger", "shift_only", "shift_only",
                                                  "arc_standard", "arc_standard"]
    r2l = cfg.units[-1]
    assert r2l.direction == "right_to_left"
    assert Link("subtree", "parser_l2r") in r2l.recurrence


def test_feedforward_parser_templates():
    (unit,) = preset("feedforward_parser").units
    assert unit.cell == "mlp" and unit.recurrence == () and len(unit.templates) == 20


def test_arity_contrast():
    vocabs = build_vocabs(gen_synthetic_trees(20, max_len=8, seed=0))
    s = gen_synthetic_trees(1, max_len=8, min_len=8, seed=5).sentences[0]
    att = run_pipeline(Model(preset("parser_ablation(attention,previous_step)", 4, 3).units, vocabs), s)
    dyn = run_pipeline(Model(preset("parser_ablation(input,subtree)", 4, 3).units, vocabs), s)
    parser_steps = range(9, 9 + 15)
    assert all(att.link_arity[k - 1][0] == 8 for k in parser_steps)
    assert all(sum(dyn.link_arity[k - 1]) <= 3 for k in parser_steps)


def test_forward_reference_in_config():
    text = """format_version = 1
[tbru tagger]
transition = tagger
gold_field = pos
input = empty
recurrence = final_state(encoder)
[tbru encoder]
transition = shift_only
recurrence = previous_step
"""
    with pytest.raises(ConfigError) as e:
        load_config(text)
    assert any("forward reference" in err for err in e.value.errors)


def test_config_parse_errors_carry_line():
    base = "format_version = 1\n[tbru enc]\ntransition = shift_only\n"
    with pytest.raises(ConfigError) as e:
        load_config(base + "recurrence = teleport(enc)\n")
    assert e.value.line == 4
    with pytest.raises(ConfigError) as e:
        load_config(base + "colour = red\n")
    assert e.value.line == 4
    with pytest.raises(ConfigError) as e:
        load_config(base + "just words\n")
    assert e.value.line == 4
    with pytest.raises(ConfigError):
        load_config("[tbru enc]\ntransition = shift_only\n")
    with pytest.raises(ConfigError):
        load_config("format_version = 2\n" + base[len("format_version = 1\n"):])


def test_resolve_pipeline_from_file(tmp_path):
    p = tmp_path / "my.cfg"
    p.write_text(dump_config(preset("tagger_rnn")))
    assert resolve_pipeline(str(p)) == preset("tagger_rnn")
    assert resolve_pipeline(str(p), 8, 4).units[0].hidden_dim == 8
    assert resolve_pipeline("compositional_parser") == preset("compositional_parser")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(PRESETS), st.integers(1, 16), st.integers(1, 16))
def test_with_dims_round_trip(name, h, e):
    cfg = preset(name).with_dims(h, e)
    assert cfg.validate() == []
    assert load_config(cfg.to_text()) == cfg
