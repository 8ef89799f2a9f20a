import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from valor.checkpoint import Checkpoint, decode_rng_state, encode_rng_state, load_checkpoint, save_checkpoint
from valor.config import DatasetEntry
from valor.errors import (CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError,
                          CheckpointVersionError, ConfigError, NumericError)
from valor.trainer import Adam, Trainer, eval_splits, evaluate, finetune, learning_rate, pretrain

from conftest import small_model, small_train


# -- schedule and optimizer -------------------------------------------------------

def test_schedule_endpoints():
    assert learning_rate(0, 1e-3, 100, 1000) == 0.0
    assert learning_rate(100, 1e-3, 100, 1000) == 1e-3
    assert learning_rate(1000, 1e-3, 100, 1000) == 0.0
    assert learning_rate(0, 1e-3, 0, 10) == 1e-3


@given(st.integers(1, 50), st.integers(2, 200), st.data())
def test_schedule_piecewise_linear(warmup, extra, data):
    total = warmup + extra
    s = data.draw(st.integers(1, total - 1))
    lr = [learning_rate(k, 1.0, warmup, total) for k in (s - 1, s, s + 1)]
    if s + 1 <= warmup or s - 1 >= warmup:
        assert lr[1] - lr[0] == pytest.approx(lr[2] - lr[1], abs=1e-12)
    assert max(learning_rate(k, 1.0, warmup, total) for k in range(total + 1)) == 1.0


def test_adam_matches_reference_implementation():
    g = torch.Generator().manual_seed(0)
    p1 = torch.nn.Parameter(torch.randn(3, 4, generator=g, dtype=torch.float64))
    p2 = torch.nn.Parameter(p1.detach().clone())
    ours = Adam({"w": p1})
    ref = torch.optim.Adam([p2], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    for k in range(5):
        target = torch.full((3, 4), float(k), dtype=torch.float64)
        for p in (p1, p2):
            p.grad = None
            ((p - target) ** 2).sum().backward()
        ours.step(1e-2)
        ref.step()
        torch.testing.assert_close(p1, p2, rtol=1e-12, atol=1e-14)


def test_adam_skips_parameters_without_gradient():
    p = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
    opt = Adam({"p": p})
    opt.step(0.1)
    assert torch.equal(p.detach(), torch.ones(2, dtype=torch.float64))


# -- training loop ----------------------------------------------------------------

def test_non_finite_loss_names_component():
    tr = Trainer(small_train())
    with torch.no_grad():
        tr.model.decoder.head_out.bias.fill_(float("inf"))
    with pytest.raises(NumericError, match="mgc"):
        tr.train_step()


def test_vocabulary_must_fit_encoder():
    with pytest.raises(ConfigError):
        Trainer(small_train(model=dataclasses.replace(small_model(), encoder=dataclasses.replace(
            small_model().encoder, vocab_size=20))))


@pytest.mark.slow
def test_smoothed_loss_decreases_on_fixed_set():
    cfg = small_train(datasets=(DatasetEntry("pool", size=32),), batch_size=32, total_steps=200, warmup_steps=20)
    losses = np.array([r["loss"] for r in Trainer(cfg).fit()])
    windows = losses.reshape(10, 20).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


def test_seeded_runs_identical(tmp_path):
    cfg = small_train(total_steps=6, warmup_steps=2, eval_every=3)
    _, log_a = pretrain(cfg, tmp_path / "a")
    _, log_b = pretrain(cfg, tmp_path / "b")
    assert log_a == log_b and len(log_a) == 2
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_alpha_zero_never_touches_alignment_parameters():
    tr = Trainer(small_train(alpha=0.0, total_steps=5, warmup_steps=1))
    before = {k: p.detach().clone() for k, p in tr.params.items() if k.startswith("align.")}
    rec = tr.train_step()
    assert "mga" in rec
    for k, v in before.items():
        assert torch.equal(tr.params[k].detach(), v), k


def test_retrieval_finetune_leaves_decoder_untouched():
    base = Trainer(small_train(total_steps=5, warmup_steps=1))
    before = {k: p.detach().clone() for k, p in base.params.items() if k.startswith("decoder.")}
    tuned = finetune(base, "retrieval", "T-AV", steps=3, lr=1e-3)
    after = dict(tuned.model.named_parameters())
    assert all(torch.equal(after[k].detach(), v) for k, v in before.items())
    assert not torch.equal(after["align.log_tau"].detach(), base.params["align.log_tau"].detach())


def test_caption_finetune_on_vision_ignores_audio():
    base = Trainer(small_train(total_steps=5, warmup_steps=1))
    audio_before = {k: p.detach().clone() for k, p in base.params.items() if k.startswith("audio_encoder.")}
    tuned = finetune(base, "caption", "T-V", steps=3, lr=1e-3)
    params = dict(tuned.model.named_parameters())
    assert all(torch.equal(params[k].detach(), v) for k, v in audio_before.items())
    assert tuned.cfg.mgc_groups == ("T-V",) and not tuned.cfg.mga_groups


def test_incompatible_finetune_group():
    base = Trainer(small_train(datasets=(DatasetEntry("vt", has_audio=False, caption_mode="v"),),
                               mga_groups=("T-V",), mgc_groups=("T-V",)))
    with pytest.raises(ConfigError):
        finetune(base, "retrieval", "T-A", steps=2)
    with pytest.raises(ConfigError):
        finetune(base, "caption", "V-A", steps=2)


@pytest.mark.slow
def test_retrieval_finetune_beats_zero_shot():
    cfg = small_train(total_steps=30, warmup_steps=3, mga_groups=("T-V",), eval_size=16)
    base = Trainer(cfg)
    base.fit()
    splits = eval_splits(cfg, base.source)
    groups = {"avr": ("T-AV",)}
    before = evaluate(base.model, splits, groups)[0]["avr/T-AV/R@1"]
    tuned = finetune(base, "retrieval", "T-AV", steps=60, lr=1e-3)
    after = evaluate(tuned.model, splits, groups)[0]["avr/T-AV/R@1"]
    assert after > before


def test_qa_task_trains():
    tr = Trainer(small_train(alpha=0.0, mga_groups=(), mgc_groups=("T-AV",), total_steps=3, warmup_steps=1),
                 task="qa")
    batch, eligible = tr.next_batch()
    assert batch.question_lengths is not None
    rec = tr.train_step(batch, eligible)
    assert np.isfinite(rec["mgc"])


# -- checkpoints ------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path):
    tr = Trainer(small_train(total_steps=20, warmup_steps=2))
    tr.fit(3)
    path = tmp_path / "ck.bin"
    tr.save(path)
    return tr, path


def test_round_trip_forward_bitwise(trained, small_batch):
    tr, path = trained
    loaded = Trainer.from_checkpoint(path)
    with torch.no_grad():
        a = tr.model.embed(small_batch).text.emb
        b = loaded.model.embed(small_batch).text.emb
    assert torch.equal(a, b)
    assert loaded.step == 3 and loaded.cfg == tr.cfg


def test_resume_trajectory_bitwise(trained):
    tr, path = trained
    resumed = Trainer.from_checkpoint(path)
    a = [r["loss"] for r in tr.fit(4)]
    b = [r["loss"] for r in resumed.fit(4)]
    assert a == b
    assert all(torch.equal(tr.params[k], resumed.params[k]) for k in tr.params)


def test_version_mismatch(trained):
    _, path = trained
    raw = bytearray(path.read_bytes())
    raw[9] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_truncated_and_bad_magic(trained, tmp_path):
    _, path = trained
    raw = path.read_bytes()
    for cut in (5, 20, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.bin").write_bytes(raw[:cut])
        with pytest.raises((CheckpointTruncatedError, CheckpointFormatError)):
            load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "t.bin").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTACKPT!" + raw[9:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "m.bin")


def test_shape_mismatch(trained):
    tr, path = trained
    shapes = {k: tuple(p.shape) for k, p in tr.params.items()}
    shapes["align.log_tau"] = (2,)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path, shapes)
    other = Trainer(small_train(model=small_model(common_dim=8)))
    with pytest.raises(CheckpointShapeError):
        other.load_state(load_checkpoint(path))


def test_rng_state_encoding_exact():
    rng = np.random.default_rng(12345)
    rng.random(7)
    state = rng.bit_generator.state
    assert decode_rng_state(encode_rng_state(state)) == state


def test_scalar_and_empty_records(tmp_path):
    ck = Checkpoint(params={"s": np.array(3.0), "v": np.zeros((0, 2))}, step=4, config_text="x = 1\n")
    save_checkpoint(tmp_path / "c.bin", ck)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.params["s"].shape == () and float(back.params["s"]) == 3.0
    assert back.params["v"].shape == (0, 2) and back.step == 4 and back.config_text == "x = 1\n"
