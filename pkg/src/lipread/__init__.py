"""Desk-scale 3D-2D-CNN-BLSTM lipreading: CTC training, decoding and hybrid feature preparation."""
from .ctc import Alphabet, beam_decode, build_word_alphabet, char_alphabet, ctc_loss, greedy_decode, spell_correct
from .data import GRID, RenderConfig, VideoSample, load_dataset, render_clip, save_dataset, synthetic_corpus
from .features import FeatureSequence, LdaTransform, hybrid_prep
from .network import Checkpoint, NetworkConfig, build_network, extract_bottleneck, forward
from .tensor import Tensor, precision
from .training import EvalReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Alphabet", "beam_decode", "build_word_alphabet", "char_alphabet", "ctc_loss", "greedy_decode",
    "spell_correct", "GRID", "RenderConfig", "VideoSample", "load_dataset", "render_clip", "save_dataset",
    "synthetic_corpus", "FeatureSequence", "LdaTransform", "hybrid_prep", "Checkpoint", "NetworkConfig",
    "build_network", "extract_bottleneck", "forward", "Tensor", "precision", "EvalReport", "TrainConfig",
    "evaluate", "train",
]
