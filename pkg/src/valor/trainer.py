"""Optimisation loop, evaluation drivers, checkpoint plumbing and fine-tuning."""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, config_from_flat, config_to_text, parse_flat
from .data import DataSource, collate, retrieval_split
from .downstream import evaluate_retrieval
from .errors import CheckpointShapeError, ConfigError, NumericError
from .model import Valor, make_masked

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
TASKS = ("pretrain", "retrieval", "caption", "qa")


def learning_rate(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``peak`` at ``warmup``, then linear decay to 0 at ``total``."""
    if step < warmup:
        return peak * step / warmup
    return peak * max(0, total - step) / (total - warmup)


class Adam:
    """Adam with bias correction; parameters without a gradient are left untouched."""

    def __init__(self, params: dict[str, torch.nn.Parameter], betas=BETAS, eps=ADAM_EPS):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k].mul_(b1).add_(g, alpha=1 - b1)
            self.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps))

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"m/{k}"] = self.m[k].numpy().copy()
            out[f"v/{k}"] = self.v[k].numpy().copy()
        return out

    def load(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = torch.as_tensor(state[f"m/{k}"]).clone()
            self.v[k] = torch.as_tensor(state[f"v/{k}"]).clone()


class Trainer:
    def __init__(self, cfg: TrainConfig, model: Valor | None = None, task: str = "pretrain"):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        self.cfg = cfg
        self.task = task
        self.source = DataSource.from_config(cfg)
        if len(self.source.generator.vocab) > cfg.model.encoder.vocab_size:
            raise ConfigError(
                f"generator vocabulary ({len(self.source.generator.vocab)}) exceeds "
                f"encoder vocab_size ({cfg.model.encoder.vocab_size})")
        self.model = model if model is not None else Valor(cfg.model, seed=cfg.seed)
        self.params = dict(self.model.named_parameters())
        self.optimizer = Adam(self.params)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0

    # -- one update -----------------------------------------------------------

    def lr(self) -> float:
        return learning_rate(self.step, self.cfg.lr, self.cfg.warmup_steps, self.cfg.total_steps)

    def next_batch(self):
        cfg = self.cfg
        if self.task == "qa":
            return self.source.build_qa_batch(self.rng, cfg.batch_size)
        return self.source.build_batch(self.rng, cfg.batch_size), None

    def loss(self, batch, qa_eligible=None):
        cfg = self.cfg
        mga = batch.active_groups(cfg.mga_groups) if cfg.mga_groups else ()
        mgc = batch.active_groups(cfg.mgc_groups) if cfg.use_mgc else ()
        masked = make_masked(batch, cfg.mask_prob, self.rng, qa_eligible) if mgc else None
        return self.model.joint_loss(batch, cfg.alpha, mga, mgc, masked)

    def train_step(self, batch=None, qa_eligible=None) -> dict[str, float]:
        if batch is None:
            batch, qa_eligible = self.next_batch()
        lr = self.lr()
        loss, comps = self.loss(batch, qa_eligible)
        for name, value in [("loss", loss), *comps.items()]:
            if not torch.isfinite(value):
                raise NumericError(f"non-finite {name} at step {self.step}: {float(value)}")
        loss.backward()
        grads = [p for p in self.params.values() if p.grad is not None]
        if self.cfg.grad_clip > 0 and grads:
            torch.nn.utils.clip_grad_norm_(grads, self.cfg.grad_clip)
        self.optimizer.step(lr)
        for p in self.params.values():
            p.grad = None
        self.step += 1
        out = {"step": self.step, "lr": lr, "loss": float(loss.detach())}
        out.update({k: float(v.detach()) for k, v in comps.items()})
        return out

    def fit(self, steps: int | None = None, callback=None) -> list[dict]:
        steps = self.cfg.total_steps - self.step if steps is None else steps
        history = []
        for _ in range(steps):
            rec = self.train_step()
            history.append(rec)
            if callback is not None:
                callback(self, rec)
        return history

    # -- checkpoints ---------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params={k: p.detach().numpy().copy() for k, p in self.params.items()},
            optimizer=self.optimizer.state(),
            step=self.step,
            config_text=f"task = {self.task}\n" + config_to_text(self.cfg),
            rng_state=self.rng.bit_generator.state,
        )

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path) -> "Trainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        flat = parse_flat(ckpt.config_text)
        task = flat.pop("task", "pretrain")
        cfg = config_from_flat(flat)
        trainer = cls(cfg, task=task)
        trainer.load_state(ckpt)
        return trainer

    def load_state(self, ckpt: Checkpoint) -> None:
        shapes = {k: tuple(p.shape) for k, p in self.params.items()}
        if set(shapes) != set(ckpt.params):
            raise CheckpointShapeError("checkpoint parameter names do not match the model")
        for k, shape in shapes.items():
            if tuple(ckpt.params[k].shape) != shape:
                raise CheckpointShapeError(f"{k}: checkpoint {ckpt.params[k].shape} vs model {shape}")
        with torch.no_grad():
            for k, p in self.params.items():
                p.copy_(torch.as_tensor(ckpt.params[k]))
        if ckpt.optimizer:
            self.optimizer.load(ckpt.optimizer)
        self.step = ckpt.step
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state


# ---------------------------------------------------------------------------
# evaluation


def eval_splits(cfg: TrainConfig, source: DataSource | None = None) -> dict:
    """Held-out retrieval splits, fixed by the run seed and independent of training draws."""
    source = source or DataSource.from_config(cfg)
    gen = source.generator
    rng = np.random.default_rng([cfg.seed, 104729])
    enc = cfg.model.encoder
    return {
        "avr": collate(retrieval_split(gen, rng, cfg.eval_size, "av"), enc.num_frames, enc.num_clips),
        "vr": collate(retrieval_split(gen, rng, mode="v"), enc.num_frames, enc.num_clips),
        "ar": collate(retrieval_split(gen, rng, mode="a"), enc.num_frames, enc.num_clips),
    }


BENCHMARK_GROUPS = {"avr": ("T-AV", "T-V", "T-A"), "vr": ("T-V",), "ar": ("T-A",)}


def evaluate(model: Valor, splits: dict, groups: dict | None = None, use_dsl: bool = False):
    """Retrieval metrics keyed ``<split>/<group>/R@k`` plus per-query records."""
    groups = groups or BENCHMARK_GROUPS
    metrics, records = {}, {}
    was_training = model.training
    model.eval()
    for split, gs in groups.items():
        m, r = evaluate_retrieval(model, splits[split], gs, use_dsl=use_dsl)
        metrics.update({f"{split}/{k}": v for k, v in m.items()})
        records.update({f"{split}/{k}": v for k, v in r.items()})
    model.train(was_training)
    return metrics, records


def pretrain(cfg: TrainConfig, out_dir: str | Path | None = None, steps: int | None = None,
             progress=None) -> tuple[Trainer, list[dict]]:
    """Run the pretraining loop; periodic evaluation goes to ``metrics.jsonl``."""
    trainer = Trainer(cfg)
    splits = eval_splits(cfg, trainer.source)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    metrics_log: list[dict] = []
    window: list[dict] = []

    def record(tr: Trainer, rec: dict):
        window.append(rec)
        last = tr.step == (steps or cfg.total_steps)
        if (cfg.eval_every and tr.step % cfg.eval_every == 0) or last:
            metrics, _ = evaluate(tr.model, splits)
            entry = {"step": tr.step}
            for key in sorted(window[0]):
                if key not in ("step", "lr"):
                    entry[f"train/{key}"] = float(np.mean([w[key] for w in window]))
            entry.update(metrics)
            window.clear()
            metrics_log.append(entry)
            if out:
                with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry) + "\n")
            log.info("step %d %s", tr.step, entry)
        if progress is not None:
            progress(tr, rec)

    trainer.fit(steps, record)
    if out:
        trainer.save(out / "checkpoint.bin")
    return trainer, metrics_log


def finetune_config(cfg: TrainConfig, task: str, group: str, steps: int, lr: float | None = None,
                    warmup: int | None = None) -> TrainConfig:
    if task == "retrieval":
        over = dict(alpha=1.0, mga_groups=(group,), use_mgc=False, mgc_groups=())
    elif task in ("caption", "qa"):
        if group not in ("T-V", "T-A", "T-AV"):
            raise ConfigError(f"{task} fine-tuning needs a T-V/T-A/T-AV group, got {group}")
        over = dict(alpha=0.0, mga_groups=(), use_mgc=True, mgc_groups=(group,))
    else:
        raise ConfigError(f"unknown fine-tuning task {task!r}")
    if "A" in group and not any(d.has_audio and d.weight > 0 for d in cfg.datasets):
        raise ConfigError(f"group {group} needs audio but no weighted dataset has it")
    datasets = cfg.datasets
    if "A" in group:
        datasets = tuple(d for d in cfg.datasets if d.has_audio) or cfg.datasets
    return dataclasses.replace(
        cfg, datasets=datasets, total_steps=steps,
        warmup_steps=min(cfg.warmup_steps, steps // 10) if warmup is None else warmup,
        lr=cfg.lr if lr is None else lr, **over)


def finetune(source: Trainer | Checkpoint | str | Path, task: str, group: str, steps: int,
             lr: float | None = None) -> Trainer:
    """Single-objective adaptation from a pretrained state with a fresh optimizer."""
    base = source if isinstance(source, Trainer) else Trainer.from_checkpoint(source)
    cfg = finetune_config(base.cfg, task, group, steps, lr)
    model = Valor(base.cfg.model)
    model.load_state_dict(base.model.state_dict())
    trainer = Trainer(cfg, model=model, task="qa" if task == "qa" else task)
    trainer.fit()
    return trainer

