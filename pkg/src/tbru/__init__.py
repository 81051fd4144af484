"""Dynamic recurrent pipelines built from transition-based recurrent units."""

from .data import Corpus, Sentence, Vocabs, build_vocabs, read_conll, write_conll
from .engine import GlobalGraph, Link, Model, TBRUSpec, run_pipeline
from .pipelines import PipelineConfig, load_config, preset
from .training import TrainConfig, Trainer, evaluate

__all__ = [
    "Corpus", "Sentence", "Vocabs", "build_vocabs", "read_conll", "write_conll",
    "GlobalGraph", "Link", "Model", "TBRUSpec", "run_pipeline",
    "PipelineConfig", "load_config", "preset", "TrainConfig", "Trainer", "evaluate",
]
__version__ = "0.1.0"
