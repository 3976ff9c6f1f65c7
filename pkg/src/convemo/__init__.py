"""Frame-level conversational emotion recognition with a numpy micro-transformer."""
__version__ = "0.1.0"

from .autograd import Tensor, backward, grad_check, no_grad
from .corpus import CLASS_NAMES, Corpus, Conversation, Emotion, Segment, SynthConfig, load_corpus, synth_corpus
from .model import EmotionTagger, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainerConfig, evaluate, predict_conversation, train

__all__ = [
    "CLASS_NAMES", "Conversation", "Corpus", "Emotion", "EmotionTagger", "ModelConfig", "Segment",
    "SynthConfig", "Tensor", "TrainerConfig", "backward", "evaluate", "grad_check", "load_checkpoint",
    "load_corpus", "no_grad", "predict_conversation", "save_checkpoint", "synth_corpus", "train",
]
