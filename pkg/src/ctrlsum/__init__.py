"""Controllable abstractive summarization at desk scale.

A convolutional sequence-to-sequence summarizer conditioned on prepended
control tokens (length bin, entities, source style, read/remainder split),
with the full pipeline around it: BPE tokenization, corpus preprocessing,
Nesterov training, constrained beam search and ROUGE evaluation.
"""

from .autodiff import Parameter, Tape, Tensor, backward
from .corpus import ArticleRecord, ControlSpec, LengthBinner, RemainderExample
from .metrics import RougeScore, rouge_l, rouge_n
from .model import ConvSeq2Seq, ModelConfig
from .summarizer import ControllableSummarizer
from .tokenization import BpeTokenizer, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "ArticleRecord",
    "BpeTokenizer",
    "ControlSpec",
    "ControllableSummarizer",
    "ConvSeq2Seq",
    "LengthBinner",
    "ModelConfig",
    "Parameter",
    "RemainderExample",
    "RougeScore",
    "Tape",
    "Tensor",
    "Vocabulary",
    "backward",
    "rouge_l",
    "rouge_n",
]
