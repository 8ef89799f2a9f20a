"""Tri-modality (vision, audio, language) pretraining at desk scale."""
from .config import EncoderConfig, GeneratorConfig, ModelConfig, TrainConfig, load_config
from .model import Valor
from .trainer import Trainer, finetune, pretrain

__all__ = ["EncoderConfig", "GeneratorConfig", "ModelConfig", "TrainConfig", "Valor", "Trainer",
           "finetune", "load_config", "pretrain"]
__version__ = "0.1.0"
