import numpy as np
import pytest
import torch
from hypothesis import settings

from valor.config import EncoderConfig, GeneratorConfig, ModelConfig, TrainConfig
from valor.data import SyntheticGenerator, collate

torch.set_num_threads(1)
settings.register_profile("valor", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("valor")


def tiny_encoder(**kw) -> EncoderConfig:
    base = dict(vocab_size=16, max_text_len=8, text_hidden=4, vision_hidden=4, audio_hidden=4,
                layers=1, heads=2, ff_mult=1, frame_size=4, channels=1, vision_patch=2,
                spec_bins=4, spec_frames=4, audio_patch_bins=2, audio_patch_frames=2)
    base.update(kw)
    return EncoderConfig(**base)


def tiny_model(**kw) -> ModelConfig:
    enc = kw.pop("encoder", None) or tiny_encoder()
    kw.setdefault("common_dim", 4)
    return ModelConfig(encoder=enc, **kw)


def small_model(**kw) -> ModelConfig:
    enc = EncoderConfig(vocab_size=48, max_text_len=16, text_hidden=16, vision_hidden=16,
                        audio_hidden=16, layers=1, heads=2, ff_mult=2)
    kw.setdefault("common_dim", 16)
    return ModelConfig(encoder=enc, **kw)


def small_train(**kw) -> TrainConfig:
    base = dict(model=small_model(), generator=GeneratorConfig(num_vision_events=4, num_audio_events=4),
                batch_size=8, total_steps=40, warmup_steps=4, eval_every=0, eval_size=16)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def generator():
    return SyntheticGenerator(GeneratorConfig(), max_text_len=16)


@pytest.fixture
def small_batch(generator):
    rng = np.random.default_rng(3)
    return collate([generator.example(rng) for _ in range(6)])
