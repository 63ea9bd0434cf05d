"""Desk-scale lab for self-supervised dense retriever training via language modeling."""

__version__ = "0.1.0"

from . import baselines, corpus, evalretrieval, numkernel, retriever, training, transformer
from .numkernel import Tensor, backward, gradcheck, no_grad
from .retriever import Encoder, SimilarityMatrix
from .training import TrainConfig
from .transformer import LanguageModel, ModelConfig

__all__ = [
    "Tensor", "backward", "gradcheck", "no_grad",
    "Encoder", "SimilarityMatrix", "LanguageModel", "ModelConfig", "TrainConfig",
    "baselines", "corpus", "evalretrieval", "numkernel", "retriever",
    "training", "transformer",
]
