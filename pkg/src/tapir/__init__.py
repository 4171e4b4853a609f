"""Incremental sequence labelling with an adaptive WRITE/REVISE policy."""
from .corpus import Corpus, Sentence, Vocab, load_conll
from .engine import PrefixTimeline, TapirModel, run_restart_incremental, run_sentence
from .layers import REVISE, WRITE, Encoder

__all__ = ["Corpus", "Sentence", "Vocab", "load_conll", "PrefixTimeline", "TapirModel",
           "run_restart_incremental", "run_sentence", "Encoder", "WRITE", "REVISE"]
__version__ = "0.1.0"
