"""Dataclass configs and the flat ``key = value`` config-file format.

The file format is one assignment per line; ``#`` starts a comment. Values
are typed on read: ``true``/``false``, integers, floats, ``[a, b, c]`` lists
and bare or quoted strings. Nested configs use dotted keys
(``encoder.layers = 2``, ``generator.noise = 0.1``) and datasets use
``dataset.<name>.<field>``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

MGA_GROUPS = ("T-V", "T-A", "T-AV", "V-A", "A-TV", "V-TA")
MGC_GROUPS = ("T-V", "T-A", "T-AV")
FUSION_VARIANTS = (
    "merge-attention",
    "audio-visual-cross",
    "visual-audio-cross",
    "parallel-cross",
    "concatenate-cross",
)

# Pretraining modality-group grids for the alignment and captioning ablations.
MGA_PRESETS = {
    "M1": ("T-V",),
    "M2": ("T-A",),
    "M3": ("T-AV",),
    "M4": ("T-V", "T-AV"),
    "M5": ("T-A", "T-AV"),
    "M6": ("T-V", "T-A", "T-AV"),
    "M7": ("T-V", "T-A", "T-AV", "V-A", "A-TV", "V-TA"),
}
MGC_PRESETS = {
    "C1": ("T-V",),
    "C2": ("T-A",),
    "C3": ("T-AV",),
    "C4": ("T-V", "T-AV"),
    "C5": ("T-A", "T-AV"),
    "C6": ("T-V", "T-A", "T-AV"),
}


@dataclass
class EncoderConfig:
    vocab_size: int = 128
    max_text_len: int = 16
    text_hidden: int = 64
    vision_hidden: int = 64
    audio_hidden: int = 64
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    num_frames: int = 1
    num_clips: int = 1
    frame_size: int = 16
    channels: int = 3
    vision_patch: int = 8
    spec_bins: int = 8
    spec_frames: int = 16
    audio_patch_bins: int = 4
    audio_patch_frames: int = 4

    def __post_init__(self):
        for name in ("text_hidden", "vision_hidden", "audio_hidden"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by heads={self.heads}")
        for name in ("vocab_size", "max_text_len", "num_frames", "num_clips", "layers", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.frame_size % self.vision_patch:
            raise ConfigError(f"frame size {self.frame_size} not divisible by patch {self.vision_patch}")
        if self.spec_bins % self.audio_patch_bins or self.spec_frames % self.audio_patch_frames:
            raise ConfigError(
                f"spectrogram {self.spec_bins}x{self.spec_frames} not divisible by patch "
                f"{self.audio_patch_bins}x{self.audio_patch_frames}"
            )

    @property
    def vision_seq_len(self) -> int:
        return (self.frame_size // self.vision_patch) ** 2

    @property
    def audio_seq_len(self) -> int:
        return (self.spec_bins // self.audio_patch_bins) * (self.spec_frames // self.audio_patch_frames)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    common_dim: int = 64
    fusion_variant: str = "concatenate-cross"
    share_weights: bool = True
    tau_init: float = 0.07
    # alignment variant: fine|coarse, feature|score, weighted|equal, mean|cls
    granularity: str = "fine"
    av_fusion: str = "feature"
    weighting: str = "weighted"
    text_pool: str = "mean"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.fusion_variant!r}")
        _choice("granularity", self.granularity, ("fine", "coarse"))
        _choice("av_fusion", self.av_fusion, ("feature", "score"))
        _choice("weighting", self.weighting, ("weighted", "equal"))
        _choice("text_pool", self.text_pool, ("mean", "cls"))
        if self.tau_init <= 0:
            raise ConfigError("tau_init must be positive")


@dataclass
class GeneratorConfig:
    num_vision_events: int = 8
    num_audio_events: int = 8
    frame_size: int = 16
    channels: int = 3
    spec_bins: int = 8
    spec_frames: int = 16
    frames_per_example: int = 2
    clips_per_example: int = 2
    noise: float = 0.1

    def __post_init__(self):
        if self.num_vision_events < 2 or self.num_audio_events < 2:
            raise ConfigError("need at least 2 vision and 2 audio events")
        if self.num_vision_events > 16 or self.num_audio_events > 16:
            raise ConfigError("at most 16 events per modality")
        if self.frame_size % 4 or self.spec_frames % 2:
            raise ConfigError("frame size must be a multiple of 4, spectrogram frames even")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


@dataclass
class DatasetEntry:
    name: str
    weight: float = 1.0
    has_audio: bool = True
    caption_mode: str = "av"
    size: int = 0  # 0: generate fresh examples every draw

    def __post_init__(self):
        if self.weight < 0:
            raise ConfigError(f"dataset {self.name}: weight must be >= 0")
        _choice("caption_mode", self.caption_mode, ("av", "v", "a"))
        if not self.has_audio and self.caption_mode != "v":
            raise ConfigError(f"dataset {self.name}: audio-free data needs caption_mode 'v'")


def default_datasets() -> tuple[DatasetEntry, ...]:
    return (DatasetEntry("valor-synth"),)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    datasets: tuple = field(default_factory=default_datasets)
    alpha: float = 1.5
    mask_prob: float = 0.6
    mga_groups: tuple = ("T-AV", "T-V", "T-A")
    mgc_groups: tuple = ("T-AV", "T-V", "T-A")
    use_mgc: bool = True
    lr: float = 1e-3
    warmup_steps: int = 50
    total_steps: int = 600
    batch_size: int = 32
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 200
    eval_size: int = 64

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig(**self.generator)
        self.datasets = tuple(DatasetEntry(**d) if isinstance(d, dict) else d for d in self.datasets)
        self.mga_groups = tuple(self.mga_groups)
        self.mgc_groups = tuple(self.mgc_groups)
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0 < self.mask_prob < 1:
            raise ConfigError("mask_prob must lie in (0, 1)")
        if not self.total_steps > self.warmup_steps >= 0:
            raise ConfigError("need total_steps > warmup_steps >= 0")
        if not self.datasets:
            raise ConfigError("at least one dataset required")
        if sum(d.weight for d in self.datasets) <= 0:
            raise ConfigError("dataset weights must not all be zero")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for g in self.mga_groups:
            if g not in MGA_GROUPS:
                raise ConfigError(f"unknown MGA group {g!r}")
        for g in self.mgc_groups:
            if g not in MGC_GROUPS:
                raise ConfigError(f"unknown MGC group {g!r}")
        if not self.mga_groups and self.alpha > 0:
            raise ConfigError("alpha > 0 requires at least one MGA group")
        if self.use_mgc and not self.mgc_groups:
            raise ConfigError("use_mgc requires at least one MGC group")


def _choice(name: str, value: str, options: tuple) -> None:
    if value not in options:
        raise ConfigError(f"{name} must be one of {options}, got {value!r}")


# ---------------------------------------------------------------------------
# flat key=value text format


def parse_value(text: str) -> Any:
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [parse_value(item) for item in inner.split(",")] if inner else []
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_flat(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _typed_fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def config_from_flat(flat: dict[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    """Apply flat dotted overrides on top of ``base`` (defaults if omitted)."""
    base = base or TrainConfig()
    top = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    model = dataclasses.asdict(base.model)
    encoder = model.pop("encoder")
    generator = dataclasses.asdict(base.generator)
    datasets: dict[str, dict] = {}
    replaced_datasets = any(k.startswith("dataset.") for k in flat)
    if not replaced_datasets:
        datasets = {d.name: dataclasses.asdict(d) for d in base.datasets}

    for key, value in flat.items():
        parts = key.split(".")
        if parts[0] == "encoder" and len(parts) == 2 and parts[1] in _typed_fields(EncoderConfig):
            encoder[parts[1]] = value
        elif parts[0] == "model" and len(parts) == 2 and parts[1] in _typed_fields(ModelConfig):
            model[parts[1]] = value
        elif parts[0] == "generator" and len(parts) == 2 and parts[1] in _typed_fields(GeneratorConfig):
            generator[parts[1]] = value
        elif parts[0] == "dataset" and len(parts) == 3 and parts[2] in _typed_fields(DatasetEntry):
            datasets.setdefault(parts[1], {"name": parts[1]})[parts[2]] = value
        elif len(parts) == 1 and key in top and key not in ("model", "generator", "datasets"):
            if isinstance(value, (list, tuple)):
                value = tuple(value)
            elif key in ("mga_groups", "mgc_groups"):
                value = (value,)
            top[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")

    for k in ("weight", "noise", "lr", "alpha", "mask_prob", "tau_init"):
        for d in (top, model, generator, *datasets.values()):
            if k in d and isinstance(d[k], int) and not isinstance(d[k], bool):
                d[k] = float(d[k])
    top["model"] = ModelConfig(encoder=EncoderConfig(**encoder), **model)
    top["generator"] = GeneratorConfig(**generator)
    top["datasets"] = tuple(DatasetEntry(**d) for d in datasets.values())
    return TrainConfig(**top)


def config_to_flat(cfg: TrainConfig) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("model", "generator", "datasets"):
            continue
        flat[f.name] = getattr(cfg, f.name)
    for f in dataclasses.fields(ModelConfig):
        if f.name != "encoder":
            flat[f"model.{f.name}"] = getattr(cfg.model, f.name)
    for f in dataclasses.fields(EncoderConfig):
        flat[f"encoder.{f.name}"] = getattr(cfg.model.encoder, f.name)
    for f in dataclasses.fields(GeneratorConfig):
        flat[f"generator.{f.name}"] = getattr(cfg.generator, f.name)
    for d in cfg.datasets:
        for f in dataclasses.fields(DatasetEntry):
            if f.name != "name":
                flat[f"dataset.{d.name}.{f.name}"] = getattr(d, f.name)
    return flat


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in config_to_flat(cfg).items())


def config_from_text(text: str) -> TrainConfig:
    return config_from_flat(parse_flat(text))


def load_config(path: str | Path | None, **overrides) -> TrainConfig:
    flat = parse_flat(Path(path).read_text(encoding="utf-8")) if path else {}
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_flat(flat)
