"""Grid runner for the modality-group, fusion and objective ablations.

Every cell pretrains from the same seed with its own optimizer, is evaluated
zero-shot, and is then fine-tuned separately for each benchmark group from the
pretrained state with a fresh optimizer.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import FUSION_VARIANTS, MGA_PRESETS, MGC_PRESETS, TrainConfig, config_from_flat
from .data import AUDIO_SOURCES, AUDIO_VERBS, VISION_ADJECTIVES, VISION_NOUNS
from .downstream import GenerationConfig, caption_example, evaluate_retrieval
from .errors import ConfigError
from .trainer import Trainer, eval_splits, finetune

log = logging.getLogger(__name__)

PHASES = ("zero-shot", "finetune")
TEXT_GROUPS = ("T-V", "T-A", "T-AV")

# Named grids: cell name -> flat overrides applied to the base config.
GRIDS: dict[str, dict[str, dict]] = {
    "mga": {name: {"mga_groups": groups, "use_mgc": False} for name, groups in MGA_PRESETS.items()},
    "mgc": {name: {"mgc_groups": groups} for name, groups in MGC_PRESETS.items()},
    "avr": {
        "coarse-score": {"model.granularity": "coarse", "model.av_fusion": "score", "use_mgc": False},
        "coarse-feature": {"model.granularity": "coarse", "model.av_fusion": "feature", "use_mgc": False},
        "fine-score": {"model.granularity": "fine", "model.av_fusion": "score", "use_mgc": False},
        "fine-feature-equal": {"model.av_fusion": "feature", "model.weighting": "equal", "use_mgc": False},
        "fine-feature-weighted": {"model.av_fusion": "feature", "model.weighting": "weighted", "use_mgc": False},
    },
    "avc": {v: {"model.fusion_variant": v} for v in FUSION_VARIANTS},
    "combine": {
        "mga-only": {"use_mgc": False},
        "alpha=1.0": {"alpha": 1.0},
        "alpha=1.5": {"alpha": 1.5},
        "alpha=1.5,unshared": {"alpha": 1.5, "model.share_weights": False},
    },
}
GRID_TASKS = {"mga": "retrieval", "mgc": "caption", "avr": "retrieval", "avc": "caption",
              "combine": "retrieval"}

# Benchmark group -> held-out split it is scored on.
BENCHMARK_SPLIT = {"T-V": "vr", "T-A": "ar", "T-AV": "avr"}


@dataclass
class AblationTable:
    grid: str
    metric: str
    benchmarks: tuple[str, ...]
    cells: dict[tuple[str, str], dict[str, float | None]] = field(default_factory=dict)

    @property
    def rows(self) -> list[str]:
        return list(dict.fromkeys(r for r, _ in self.cells))

    @property
    def columns(self) -> list[tuple[str, str]]:
        return [(b, p) for b in self.benchmarks for p in PHASES]

    def value(self, row: str, benchmark: str, phase: str) -> float | None:
        return self.cells[(row, benchmark)][phase]

    def format(self) -> str:
        head = ["config"] + [f"{b} {p}" for b, p in self.columns]
        lines = [" | ".join(head), " | ".join("---" for _ in head)]
        for r in self.rows:
            vals = []
            for b, p in self.columns:
                v = self.value(r, b, p)
                vals.append("-" if v is None else f"{100 * v:.1f}")
            lines.append(" | ".join([r] + vals))
        return f"{self.grid} ({self.metric}, x100)\n" + "\n".join(lines)


def cell_config(base: TrainConfig, overrides: dict) -> TrainConfig:
    return config_from_flat(dict(overrides), base=base)


def concept_recall(text: str, vision_event: int, audio_event: int) -> float:
    """Share of the four event words that appear in a generated caption."""
    words = set(text.split())
    targets = [VISION_ADJECTIVES[vision_event], VISION_NOUNS[vision_event]]
    if audio_event >= 0:
        targets += [AUDIO_SOURCES[audio_event], AUDIO_VERBS[audio_event]]
    return sum(t in words for t in targets) / len(targets)


def caption_score(model, vocab, batch, group: str, limit: int) -> float:
    gen_cfg = GenerationConfig(strategy="greedy")
    n = min(limit, len(batch))
    scores = []
    for i in range(n):
        spec = None if batch.spectrograms is None else batch.spectrograms[i]
        out = caption_example(model, batch.frames[i], spec, group, gen_cfg)
        text = " ".join(vocab.token(t) for t in out.tokens)
        scores.append(concept_recall(text, int(batch.vision_events[i]), int(batch.audio_events[i])))
    return float(np.mean(scores))


def score(trainer: Trainer, splits: dict, task: str, benchmark: str, caption_limit: int) -> float:
    model = trainer.model
    model.eval()
    if task == "retrieval":
        split = splits[BENCHMARK_SPLIT.get(benchmark, "avr")]
        metrics, _ = evaluate_retrieval(model, split, (benchmark,), ks=(1,))
        return metrics[f"{benchmark}/R@1"]
    return caption_score(model, trainer.source.generator.vocab, splits["avr"], benchmark, caption_limit)


def run_ablation(grid: str | dict, base: TrainConfig | None = None, *, task: str | None = None,
                 benchmarks=TEXT_GROUPS, steps: int | None = None, finetune_steps: int = 0,
                 finetune_lr: float | None = None, caption_limit: int = 16,
                 rows: list[str] | None = None) -> AblationTable:
    """Train each configuration in ``grid`` and tabulate zero-shot and fine-tuned scores.

    ``grid`` is a key of ``GRIDS`` or a mapping of cell name to overrides.
    Cells with ``finetune_steps == 0`` report ``None`` in the finetune column.
    """
    base = base or TrainConfig()
    if isinstance(grid, str):
        if grid not in GRIDS:
            raise ConfigError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
        name, spec, task = grid, GRIDS[grid], task or GRID_TASKS[grid]
    else:
        name, spec, task = "custom", grid, task or "retrieval"
    if task not in ("retrieval", "caption"):
        raise ConfigError(f"ablation task must be retrieval or caption, got {task!r}")
    if rows is not None:
        missing = set(rows) - set(spec)
        if missing:
            raise ConfigError(f"unknown grid rows {sorted(missing)}")
        spec = {r: spec[r] for r in rows}
    table = AblationTable(name, "R@1" if task == "retrieval" else "concept recall", tuple(benchmarks))
    for row, overrides in spec.items():
        cfg = cell_config(base, overrides)
        if steps is not None:
            cfg = dataclasses.replace(cfg, total_steps=steps, warmup_steps=min(cfg.warmup_steps, steps // 10))
        trainer = Trainer(cfg)
        trainer.fit()
        splits = eval_splits(cfg, trainer.source)
        for bench in benchmarks:
            zs = score(trainer, splits, task, bench, caption_limit)
            ft = None
            if finetune_steps > 0:
                tuned = finetune(trainer, task, bench, finetune_steps, finetune_lr)
                ft = score(tuned, splits, task, bench, caption_limit)
            table.cells[(row, bench)] = {"zero-shot": zs, "finetune": ft}
            log.info("%s/%s %s zero-shot=%s finetune=%s", name, row, bench, zs, ft)
    return table
