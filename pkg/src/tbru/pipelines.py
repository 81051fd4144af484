"""Pipeline presets and the block-structured config format.

Config text looks like::

    format_version = 1
    pipeline = compositional_parser

    [tbru encoder]
    transition = shift_only
    direction = right_to_left
    input = token_embedding
    recurrence = previous_step
    ...

One ``[tbru NAME]`` block per unit, in execution order. ``#`` starts a comment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

from .engine import DEFAULT_TEMPLATES, Link, TBRUSpec, split_links, validate_pipeline
from .transitions import LEFT_TO_RIGHT, RIGHT_TO_LEFT

FORMAT_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, errors: list[str] | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
        self.errors = errors or []


@dataclass(frozen=True)
class PipelineConfig:
    name: str
    units: tuple[TBRUSpec, ...]
    format_version: int = FORMAT_VERSION

    def __iter__(self):
        return iter(self.units)

    def __len__(self) -> int:
        return len(self.units)

    def unit(self, name: str) -> TBRUSpec:
        for u in self.units:
            if u.name == name:
                return u
        raise KeyError(name)

    @property
    def supervised(self) -> list[str]:
        return [u.name for u in self.units if u.supervised]

    def validate(self) -> list[str]:
        return validate_pipeline(self.units)

    def with_dims(self, hidden_dim: int | None = None, embed_dim: int | None = None) -> "PipelineConfig":
        """Same wiring with every unit resized (feed-forward layers follow hidden_dim)."""
        units = []
        for u in self.units:
            h = hidden_dim or u.hidden_dim
            units.append(replace(u, hidden_dim=h, embed_dim=embed_dim or u.embed_dim,
                                 mlp_layers=tuple(h for _ in u.mlp_layers)))
        return replace(self, units=tuple(units))

    def to_text(self) -> str:
        return dump_config(self)


# -- presets --------------------------------------------------------------

def _shift(name, direction=LEFT_TO_RIGHT, extra=(), **dims) -> TBRUSpec:
    return TBRUSpec(name, "shift_only", "token_embedding",
                    (Link("previous_step"),) + tuple(extra), direction=direction, **dims)


def _tagger(name, field, input_fn, links, **dims) -> TBRUSpec:
    return TBRUSpec(name, "tagger", input_fn, tuple(links), gold_field=field, supervised=True, **dims)


def _parser(name, links, direction=LEFT_TO_RIGHT, **dims) -> TBRUSpec:
    return TBRUSpec(name, "arc_standard", "previous_output_embedding", tuple(links),
                    direction=direction, supervised=True, **dims)


ABLATION_INPUTS = {"final_state": "final_state", "attention": "attention", "input": "input",
                   "input_link": "input"}
ABLATION_RECURS = {"previous_step": "previous_step", "subtree": "subtree"}


def _ablation(input_kind: str, recur_kind: str, **dims) -> PipelineConfig:
    try:
        ik, rk = ABLATION_INPUTS[input_kind], ABLATION_RECURS[recur_kind]
    except KeyError:
        raise ConfigError(f"unknown ablation row ({input_kind}, {recur_kind})") from None
    input_link = {"final_state": Link("final_state", "encoder"),
                  "attention": Link("all_of", "encoder", "attention"),
                  "input": Link("input_link", "encoder")}[ik]
    recur = Link("previous_step") if rk == "previous_step" else Link("subtree")
    return PipelineConfig(f"parser_ablation({ik},{rk})", (
        _shift("encoder", RIGHT_TO_LEFT, **dims),
        _parser("parser", (input_link, recur), **dims),
    ))


def _build(name: str, **dims) -> PipelineConfig:
    enc_r2l = _shift("encoder", RIGHT_TO_LEFT, **dims)
    if name == "tagger_rnn":
        return PipelineConfig(name, (
            _tagger("tagger", "pos", "token_embedding", [Link("previous_step")], **dims),))
    if name == "feedforward_parser":
        h = dims.get("hidden_dim", 64)
        return PipelineConfig(name, (
            TBRUSpec("parser", "arc_standard", "feature_templates", (), cell="mlp",
                     mlp_layers=(h,), supervised=True, templates=DEFAULT_TEMPLATES, **dims),))
    if name == "encoder_decoder_tagger":
        return PipelineConfig(name, (
            _shift("encoder", **dims),
            _tagger("tagger", "pos", "previous_output_embedding",
                    [Link("final_state", "encoder"), Link("previous_step")], **dims),
        ))
    bi = (_shift("l2r", **dims), _shift("r2l", RIGHT_TO_LEFT, **dims))
    bi_links = [Link("input_link", "l2r"), Link("input_link", "r2l")]
    if name == "bilstm_tagger":
        return PipelineConfig(name, bi + (_tagger("tagger", "pos", "empty", bi_links, **dims),))
    if name in ("multitask_luong", "multitask_stackprop"):
        extra = [Link("input_link", "pos_tagger")] if name == "multitask_stackprop" else []
        return PipelineConfig(name, bi + (
            _tagger("pos_tagger", "pos", "empty", bi_links, **dims),
            _tagger("keep_drop", "keep_drop", "empty", bi_links + extra, **dims),
        ))
    if name == "compositional_parser":
        return PipelineConfig(name, (
            enc_r2l, _parser("parser", (Link("input_link", "encoder"), Link("subtree")), **dims)))
    summarizer_links = [Link("input_link", "encoder"), Link("previous_step")]
    if name == "summarizer_baseline":
        return PipelineConfig(name, (
            enc_r2l,
            _tagger("keep_drop", "keep_drop", "previous_output_embedding", summarizer_links, **dims)))
    if name in ("summarizer_luong", "summarizer_stackprop"):
        extra = [Link("token_subtree", "parser")] if name == "summarizer_stackprop" else []
        return PipelineConfig(name, (
            enc_r2l,
            _parser("parser", (Link("input_link", "encoder"), Link("subtree")), **dims),
            _tagger("keep_drop", "keep_drop", "previous_output_embedding",
                    summarizer_links + extra, **dims),
        ))
    if name == "deep_stacked_parser":
        pos_link = [Link("input_link", "pos")]
        enc_links = [Link("input_link", "enc_l2r"), Link("input_link", "enc_r2l")]
        return PipelineConfig(name, (
            _tagger("pos", "pos", "token_embedding", [Link("previous_step")], **dims),
            _shift("enc_l2r", LEFT_TO_RIGHT, pos_link, **dims),
            _shift("enc_r2l", RIGHT_TO_LEFT, pos_link, **dims),
            _parser("parser_l2r", enc_links + [Link("subtree")], **dims),
            _parser("parser_r2l", enc_links + [Link("subtree"), Link("subtree", "parser_l2r")],
                    direction=RIGHT_TO_LEFT, **dims),
        ))
    m = re.match(r"^parser_ablation\(\s*(\w+)\s*,\s*(\w+)\s*\)$", name)
    if m:
        return _ablation(m.group(1), m.group(2), **dims)
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = (
    "tagger_rnn", "feedforward_parser", "encoder_decoder_tagger", "bilstm_tagger",
    "multitask_luong", "multitask_stackprop", "compositional_parser",
    "summarizer_baseline", "summarizer_luong", "summarizer_stackprop", "deep_stacked_parser",
)
ABLATION_ROWS = tuple((i, r) for i in ("final_state", "attention", "input")
                      for r in ("previous_step", "subtree"))


def preset(name: str, hidden_dim: int = 64, embed_dim: int = 32) -> PipelineConfig:
    """A named architecture. ``parser_ablation(<input>,<recurrence>)`` selects a
    parser-recurrence variant: input in final_state/attention/input, recurrence
    in previous_step/subtree."""
    cfg = _build(name.replace(" ", ""), hidden_dim=hidden_dim, embed_dim=embed_dim)
    errors = cfg.validate()
    if errors:  # presets are fixed; this guards edits to the table above
        raise ConfigError(f"preset {name} invalid", errors=errors)
    return cfg


# -- text format ----------------------------------------------------------

_DEFAULTS = TBRUSpec("x", "shift_only")
_KEYS = {
    "transition": "transition", "direction": "direction", "gold_field": "gold_field",
    "input": "input_fn", "templates": "templates", "recurrence": "recurrence", "cell": "cell",
    "hidden_dim": "hidden_dim", "embed_dim": "embed_dim", "mlp_layers": "mlp_layers",
    "activation": "activation", "supervised": "supervised", "loss_weight": "loss_weight",
}


def _format_value(attr: str, value) -> str:
    if attr == "recurrence":
        return ", ".join(str(l) for l in value) or "none"
    if attr in ("templates", "mlp_layers"):
        return ", ".join(str(v) for v in value) or "none"
    if attr == "supervised":
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def dump_config(cfg: PipelineConfig) -> str:
    out = [f"format_version = {cfg.format_version}", f"pipeline = {cfg.name}"]
    for u in cfg.units:
        out.append("")
        out.append(f"[tbru {u.name}]")
        for key, attr in _KEYS.items():
            out.append(f"{key} = {_format_value(attr, getattr(u, attr))}")
    return "\n".join(out) + "\n"


def _parse_value(attr: str, raw: str, line: int):
    raw = raw.strip()
    try:
        if attr == "recurrence":
            return () if raw == "none" else split_links(raw)
        if attr == "templates":
            return () if raw == "none" else tuple(t.strip() for t in raw.split(",") if t.strip())
        if attr == "mlp_layers":
            return () if raw == "none" else tuple(int(t) for t in raw.split(",") if t.strip())
        if attr in ("hidden_dim", "embed_dim"):
            return int(raw)
        if attr == "loss_weight":
            return float(raw)
        if attr == "supervised":
            if raw not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw == "true"
        if attr == "gold_field":
            return None if raw == "none" else raw
        return raw
    except ValueError as e:
        raise ConfigError(str(e), line) from None


def load_config(text: str) -> PipelineConfig:
    """Parse and validate config text. Raises ConfigError with a line number on
    syntax problems and with ``errors`` filled on validation failures."""
    header: dict[str, str] = {}
    blocks: list[tuple[str, int, dict]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.match(r"^\[tbru\s+([^\]\s]+)\s*\]$", line)
        if m:
            blocks.append((m.group(1), lineno, {}))
            continue
        if line.startswith("["):
            raise ConfigError(f"malformed block header {line!r}", lineno)
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not blocks:
            if key not in ("format_version", "pipeline"):
                raise ConfigError(f"unknown header key {key!r}", lineno)
            header[key] = value
            continue
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        blocks[-1][2][key] = (_parse_value(_KEYS[key], value, lineno), lineno)

    version = header.get("format_version")
    if version is None:
        raise ConfigError("missing format_version", 1)
    if version != str(FORMAT_VERSION):
        raise ConfigError(f"unsupported format_version {version}", 1)
    units = []
    for name, lineno, kv in blocks:
        if "transition" not in kv:
            raise ConfigError(f"block {name} has no transition", lineno)
        args = {_KEYS[k]: v for k, (v, _) in kv.items()}
        units.append(replace(_DEFAULTS, name=name, **args))
    cfg = PipelineConfig(header.get("pipeline", "custom"), tuple(units))
    errors = cfg.validate()
    if errors:
        raise ConfigError("invalid pipeline: " + "; ".join(errors), errors=errors)
    return cfg


def resolve_pipeline(spec: str, hidden_dim: int | None = None, embed_dim: int | None = None) -> PipelineConfig:
    """Preset name or path to a config file."""
    path = Path(spec)
    if path.suffix and path.exists():
        cfg = load_config(path.read_text(encoding="utf-8"))
        return cfg.with_dims(hidden_dim, embed_dim) if (hidden_dim or embed_dim) else cfg
    return preset(spec, hidden_dim or 64, embed_dim or 32)
