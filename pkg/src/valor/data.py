"""Synthetic correlated vision/audio/text triplets and batch assembly.

Each example has a latent vision event and audio event. Vision events are
coloured squares at event-indexed positions of the frame; audio events are
energy bands at event-indexed mel bins. Captions name both events with
disjoint vocabularies, so the vision-only words are recoverable only from
frames and the audio-only words only from spectrograms.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numeric as nm
from .config import DatasetEntry, GeneratorConfig, TrainConfig
from .errors import ConfigError, InputError
from .text import SEP_ID, Vocabulary, tokenize

VISION_ADJECTIVES = ("red", "blue", "green", "yellow", "purple", "orange", "white", "black",
                     "pink", "brown", "gray", "golden", "silver", "violet", "teal", "crimson")
VISION_NOUNS = ("ball", "car", "kite", "boat", "chair", "lamp", "tree", "house",
                "bike", "bird", "horse", "train", "cup", "book", "table", "hat")
AUDIO_SOURCES = ("dog", "bell", "baby", "engine", "man", "water", "wind", "drum",
                 "phone", "crowd", "cat", "horn", "guitar", "rain", "siren", "clock")
AUDIO_VERBS = ("barks", "rings", "cries", "roars", "speaks", "splashes", "howls", "beats",
               "buzzes", "cheers", "meows", "honks", "strums", "patters", "wails", "ticks")
TEMPLATE_WORDS = ("a", "is", "shown", "while", "what", "heard")

QUESTIONS = {"v": "what is shown", "a": "what is heard"}


@dataclass
class TriModalExample:
    caption: str
    token_ids: list[int]
    attention_mask: list[bool]
    frames: np.ndarray                  # [frames, H, W, ch]
    spectrograms: np.ndarray | None     # [clips, bins, frames] or None
    vision_event: int
    audio_event: int                    # -1 when the example has no audio
    has_audio: bool = True


@dataclass
class Batch:
    token_ids: torch.Tensor             # [B, N_t]
    attention_mask: torch.Tensor        # [B, N_t] bool
    frames: torch.Tensor | None         # [B, N_v, H, W, ch]
    spectrograms: torch.Tensor | None   # [B, N_a, F, T]
    vision_events: np.ndarray
    audio_events: np.ndarray
    dataset: str = ""
    captions: list[str] = field(default_factory=list)
    question_lengths: torch.Tensor | None = None   # QA batches only

    def __len__(self):
        return self.token_ids.shape[0]

    @property
    def has_audio(self) -> bool:
        return self.spectrograms is not None

    @property
    def modalities(self) -> set[str]:
        return {"T", "V"} | ({"A"} if self.has_audio else set())

    def supports(self, group: str) -> bool:
        return set(group.replace("-", "")) <= self.modalities

    def active_groups(self, groups) -> tuple[str, ...]:
        return tuple(g for g in groups if self.supports(g))

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        t = torch.as_tensor(idx)
        return Batch(
            self.token_ids[t], self.attention_mask[t],
            None if self.frames is None else self.frames[t],
            None if self.spectrograms is None else self.spectrograms[t],
            self.vision_events[idx], self.audio_events[idx], self.dataset,
            [self.captions[i] for i in idx] if self.captions else [],
            None if self.question_lengths is None else self.question_lengths[t],
        )


class SyntheticGenerator:
    def __init__(self, cfg: GeneratorConfig, max_text_len: int = 16):
        self.cfg = cfg
        self.max_text_len = max_text_len
        words = list(TEMPLATE_WORDS)
        for k in range(cfg.num_vision_events):
            words += [VISION_ADJECTIVES[k], VISION_NOUNS[k]]
        for k in range(cfg.num_audio_events):
            words += [AUDIO_SOURCES[k], AUDIO_VERBS[k]]
        self.vocab = Vocabulary(words)

    # -- text ---------------------------------------------------------------

    def vision_phrase(self, k: int) -> str:
        return f"{VISION_ADJECTIVES[k]} {VISION_NOUNS[k]}"

    def audio_phrase(self, k: int) -> str:
        return f"{AUDIO_SOURCES[k]} {AUDIO_VERBS[k]}"

    def caption(self, vision_event: int, audio_event: int, mode: str = "av") -> str:
        if mode == "v":
            return f"a {self.vision_phrase(vision_event)} is shown"
        if mode == "a":
            return f"a {self.audio_phrase(audio_event)}"
        return f"a {self.vision_phrase(vision_event)} is shown while a {self.audio_phrase(audio_event)}"

    def audio_ontology(self) -> list[str]:
        return [self.audio_phrase(k) for k in range(self.cfg.num_audio_events)]

    def expected_caption_length(self, mode: str = "av") -> float:
        return {"av": 9.0, "v": 5.0, "a": 3.0}[mode]

    # -- motifs -------------------------------------------------------------

    def vision_motif(self, k: int) -> np.ndarray:
        s, ch = self.cfg.frame_size, self.cfg.channels
        block = s // 4
        img = np.zeros((s, s, ch))
        r, c = divmod(k % 16, 4)
        color = np.array([(k >> bit) & 1 for bit in range(ch)], dtype=np.float64)
        color = 0.5 + 0.5 * color   # every channel lit, pattern distinguishes events
        img[r * block:(r + 1) * block, c * block:(c + 1) * block] = color
        return img

    def audio_motif(self, k: int) -> np.ndarray:
        bins, frames = self.cfg.spec_bins, self.cfg.spec_frames
        spec = np.zeros((bins, frames))
        if self.cfg.num_audio_events <= bins:
            spec[k, :] = 1.0
        else:
            half = frames // 2
            spec[k % bins, (k // bins) * half:(k // bins + 1) * half] = 1.0
        return spec

    def render_frames(self, k: int, rng: np.random.Generator) -> np.ndarray:
        motif = self.vision_motif(k)
        n = self.cfg.frames_per_example
        return motif[None] + self.cfg.noise * rng.standard_normal((n, *motif.shape))

    def render_spectrograms(self, k: int, rng: np.random.Generator) -> np.ndarray:
        motif = self.audio_motif(k)
        n = self.cfg.clips_per_example
        return motif[None] + self.cfg.noise * rng.standard_normal((n, *motif.shape))

    # -- examples -----------------------------------------------------------

    def example(self, rng: np.random.Generator, has_audio: bool = True, mode: str = "av",
                vision_event: int | None = None, audio_event: int | None = None) -> TriModalExample:
        if vision_event is None:
            vision_event = int(rng.integers(self.cfg.num_vision_events))
        if audio_event is None:
            audio_event = int(rng.integers(self.cfg.num_audio_events))
        if not has_audio:
            mode = "v"
        caption = self.caption(vision_event, audio_event, mode)
        ids, mask = tokenize(caption, self.vocab, self.max_text_len)
        frames = self.render_frames(vision_event, rng)
        specs = self.render_spectrograms(audio_event, rng) if has_audio else None
        return TriModalExample(caption, ids, mask, frames, specs, vision_event,
                               audio_event if has_audio else -1, has_audio)


def generate_example(rng: np.random.Generator, cfg: GeneratorConfig, max_text_len: int = 16,
                     **kwargs) -> TriModalExample:
    return SyntheticGenerator(cfg, max_text_len).example(rng, **kwargs)


def collate(examples: list[TriModalExample], num_frames: int = 1, num_clips: int = 1,
            rng: np.random.Generator | None = None, dataset: str = "") -> Batch:
    """Stack examples, sampling ``num_frames``/``num_clips`` per example.

    Without ``rng`` the first frames/clips are taken (evaluation).
    """
    def pick(total, n):
        if n > total:
            raise ConfigError(f"asked for {n} of {total} available frames/clips")
        if rng is None:
            return np.arange(n)
        return np.sort(rng.choice(total, size=n, replace=False))

    frames = np.stack([ex.frames[pick(len(ex.frames), num_frames)] for ex in examples])
    has_audio = all(ex.has_audio for ex in examples)
    specs = None
    if has_audio:
        specs = np.stack([ex.spectrograms[pick(len(ex.spectrograms), num_clips)] for ex in examples])
    return Batch(
        torch.as_tensor(np.array([ex.token_ids for ex in examples]), dtype=torch.long),
        torch.as_tensor(np.array([ex.attention_mask for ex in examples]), dtype=torch.bool),
        torch.as_tensor(frames, dtype=nm.DTYPE),
        None if specs is None else torch.as_tensor(specs, dtype=nm.DTYPE),
        np.array([ex.vision_event for ex in examples]),
        np.array([ex.audio_event for ex in examples]),
        dataset,
        [ex.caption for ex in examples],
    )


class DataSource:
    """Weighted mixture of synthetic datasets, fixed pools or fresh draws."""

    def __init__(self, datasets, generator: SyntheticGenerator, seed: int = 0,
                 num_frames: int = 1, num_clips: int = 1):
        self.datasets: tuple[DatasetEntry, ...] = tuple(datasets)
        if not self.datasets:
            raise ConfigError("at least one dataset required")
        weights = np.array([d.weight for d in self.datasets], dtype=np.float64)
        if (weights < 0).any() or weights.sum() <= 0:
            raise ConfigError("dataset weights must be non-negative with a positive sum")
        self.probs = weights / weights.sum()
        self.generator = generator
        self.num_frames = num_frames
        self.num_clips = num_clips
        self.pools: dict[str, list[TriModalExample]] = {}
        for i, d in enumerate(self.datasets):
            if d.size > 0:
                prng = np.random.default_rng([seed, 7919, i])
                self.pools[d.name] = [generator.example(prng, d.has_audio, d.caption_mode)
                                      for _ in range(d.size)]

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "DataSource":
        gen = SyntheticGenerator(cfg.generator, cfg.model.encoder.max_text_len)
        enc = cfg.model.encoder
        return cls(cfg.datasets, gen, cfg.seed, enc.num_frames, enc.num_clips)

    def build_batch(self, rng: np.random.Generator, batch_size: int, groups=None) -> Batch:
        if batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        d = self.datasets[int(rng.choice(len(self.datasets), p=self.probs))]
        if d.name in self.pools:
            pool = self.pools[d.name]
            idx = rng.choice(len(pool), size=batch_size, replace=len(pool) < batch_size)
            examples = [pool[i] for i in idx]
        else:
            examples = [self.generator.example(rng, d.has_audio, d.caption_mode) for _ in range(batch_size)]
        batch = collate(examples, self.num_frames, self.num_clips, rng, d.name)
        if groups is not None:
            missing = [g for g in groups if not batch.supports(g)]
            if missing:
                raise ConfigError(f"dataset {d.name} lacks modalities for groups {missing}")
        return batch

    def build_qa_batch(self, rng: np.random.Generator, batch_size: int):
        """Question/answer batch from audio-bearing datasets; half the questions ask about audio."""
        entries = [(i, d) for i, d in enumerate(self.datasets) if d.has_audio and d.weight > 0]
        if not entries:
            raise ConfigError("QA batches need a weighted dataset with audio")
        probs = np.array([d.weight for _, d in entries])
        _, d = entries[int(rng.choice(len(entries), p=probs / probs.sum()))]
        examples = [self.generator.example(rng, True, d.caption_mode) for _ in range(batch_size)]
        kinds = ["a" if rng.random() < 0.5 else "v" for _ in range(batch_size)]
        batch, eligible, _ = qa_batch(self.generator, examples, kinds, self.num_frames, self.num_clips, rng)
        batch.dataset = d.name
        return batch, eligible


def build_batch(source: DataSource, rng: np.random.Generator, batch_size: int, groups=None) -> Batch:
    return source.build_batch(rng, batch_size, groups)


# ---------------------------------------------------------------------------
# evaluation splits


def retrieval_split(generator: SyntheticGenerator, rng: np.random.Generator, size: int = 64,
                    mode: str = "av") -> list[TriModalExample]:
    """Held-out candidates with distinct latent labels.

    ``av``: distinct (vision, audio) pairs; ``v``/``a``: one example per event
    with a caption naming only that modality.
    """
    kv, ka = generator.cfg.num_vision_events, generator.cfg.num_audio_events
    if mode == "v":
        return [generator.example(rng, True, "v", v, int(rng.integers(ka))) for v in range(kv)]
    if mode == "a":
        return [generator.example(rng, True, "a", int(rng.integers(kv)), a) for a in range(ka)]
    pairs = [(v, a) for v in range(kv) for a in range(ka)]
    if size < len(pairs):
        keep = np.sort(rng.choice(len(pairs), size=size, replace=False))
        pairs = [pairs[i] for i in keep]
    return [generator.example(rng, True, "av", v, a) for v, a in pairs]


def qa_batch(generator: SyntheticGenerator, examples: list[TriModalExample], kinds: list[str],
             num_frames: int = 1, num_clips: int = 1, rng=None):
    """Question/answer sequences ``[CLS] question [SEP] answer [SEP]``.

    Returns the batch (token_ids hold the full sequence), the answer-token
    eligibility mask and the answers as strings.
    """
    vocab, max_len = generator.vocab, generator.max_text_len
    rows, masks, eligible, qlens, answers = [], [], [], [], []
    for ex, kind in zip(examples, kinds):
        if kind == "a" and not ex.has_audio:
            raise ConfigError("audio question on an example without audio")
        question = QUESTIONS[kind]
        answer = generator.vision_phrase(ex.vision_event) if kind == "v" else generator.audio_phrase(ex.audio_event)
        q_ids, _ = tokenize(question, vocab, max_len)
        q_ids = q_ids[: q_ids.index(SEP_ID) + 1]
        a_ids = [vocab.id(w) for w in answer.split()] + [SEP_ID]
        ids = q_ids + a_ids
        if len(ids) > max_len:
            raise InputError("question + answer exceed the maximum text length")
        pad = max_len - len(ids)
        rows.append(ids + [0] * pad)
        masks.append([True] * len(ids) + [False] * pad)
        eligible.append([False] * len(q_ids) + [True] * len(a_ids) + [False] * pad)
        qlens.append(len(q_ids))
        answers.append(answer)
    batch = collate(examples, num_frames, num_clips, rng)
    batch.token_ids = torch.as_tensor(rows, dtype=torch.long)
    batch.attention_mask = torch.as_tensor(masks, dtype=torch.bool)
    batch.question_lengths = torch.as_tensor(qlens, dtype=torch.long)
    batch.captions = answers
    return batch, np.array(eligible, dtype=bool), answers


# ---------------------------------------------------------------------------
# persistence: manifest + little-endian float64 blobs (u32 rank, u32 extents)


def write_array(path: str | Path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype="<f8")
    header = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes(order="C"))


def read_array(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise InputError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + 4 * rank:
        raise InputError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 4)
    offset = 4 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != offset + 8 * count:
        raise InputError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def save_dataset(directory: str | Path, examples: list[TriModalExample], vocab: Vocabulary) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for i, ex in enumerate(examples):
            eid = f"ex{i:06d}"
            write_array(out / f"{eid}.frames.bin", ex.frames)
            if ex.has_audio:
                write_array(out / f"{eid}.audio.bin", ex.spectrograms)
            record = {"id": eid, "vision_event": ex.vision_event, "audio_event": ex.audio_event,
                      "has_audio": ex.has_audio, "caption": ex.caption}
            fh.write(json.dumps(record) + "\n")


def load_dataset(directory: str | Path, max_text_len: int = 16) -> tuple[list[TriModalExample], Vocabulary]:
    root = Path(directory)
    vocab = Vocabulary.load(root / "vocab.txt")
    examples = []
    for line in (root / "manifest.jsonl").read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        ids, mask = tokenize(rec["caption"], vocab, max_text_len)
        specs = read_array(root / f"{rec['id']}.audio.bin") if rec["has_audio"] else None
        examples.append(TriModalExample(rec["caption"], ids, mask, read_array(root / f"{rec['id']}.frames.bin"),
                                        specs, rec["vision_event"], rec["audio_event"], rec["has_audio"]))
    return examples, vocab
