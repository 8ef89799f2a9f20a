import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from valor import numeric as nm
from valor.downstream import (GenerationConfig, RetrievalIndex, answer_question, build_index, caption_example,
                              dual_softmax, evaluate_retrieval, generate_caption, order_candidates,
                              rank_candidates, rankings_from_scores, recall_at_k, write_report)
from valor.errors import ConfigError, ContractError
from valor.model import Valor
from valor.text import CLS_ID, SEP_ID

from conftest import small_model


@pytest.fixture(scope="module")
def model():
    return Valor(small_model(), seed=0).eval()


def test_ties_break_by_ascending_id():
    assert order_candidates(np.array([0.5, 0.9, 0.5, 0.9]), [10, 7, 3, 8]) == [1, 3, 2, 0]


@given(arrays(np.float64, 6, elements=st.floats(-1, 1)))
def test_order_is_descending(scores):
    order = order_candidates(scores, list(range(6)))
    assert sorted(order) == list(range(6))
    assert all(scores[a] >= scores[b] for a, b in zip(order, order[1:]))


def test_recall_hand_example():
    ranks = [["a", "b", "c"], ["c", "a", "b"], ["b", "c", "a"]]
    gt = ["a", "a", "a"]
    assert recall_at_k(ranks, gt, 1) == pytest.approx(1 / 3)
    assert recall_at_k(ranks, gt, 2) == pytest.approx(2 / 3)
    assert recall_at_k(ranks, gt, 3) == 1.0
    with pytest.raises(ContractError):
        recall_at_k(ranks, gt, 4)


@given(arrays(np.float64, (5, 5), elements=st.floats(-1, 1)))
def test_recall_monotone_in_k(scores):
    ids = list(range(5))
    ranks = rankings_from_scores(scores, ids)
    vals = [recall_at_k(ranks, ids, k) for k in range(1, 6)]
    assert vals == sorted(vals) and vals[-1] == 1.0


def test_dual_softmax_definition_and_range():
    sim = torch.as_tensor(np.random.default_rng(0).uniform(-1, 1, (4, 5)))
    d = dual_softmax(sim, 10.0)
    ref = torch.softmax(10 * sim, dim=1) * torch.softmax(10 * sim, dim=0)
    torch.testing.assert_close(d, ref, rtol=1e-12, atol=0)
    assert ((d >= 0) & (d <= 1)).all()


def test_dual_softmax_suppresses_hub_candidate():
    # candidate 0 scores high for every query; column softmax spreads it
    sim = torch.tensor([[0.9, 0.89, 0.1], [0.9, 0.2, 0.89], [0.9, 0.1, 0.2]], dtype=nm.DTYPE)
    plain = rankings_from_scores(sim.numpy(), [0, 1, 2])
    dsl = rankings_from_scores(dual_softmax(sim, 100.0).numpy(), [0, 1, 2])
    assert [r[0] for r in plain] == [0, 0, 0]
    assert [r[0] for r in dsl] == [1, 2, 0]


def test_duplicate_candidate_ids_rejected(model, small_batch):
    with pytest.raises(ContractError):
        build_index(model, small_batch, ids=[1, 1, 2, 3, 4, 5])


def test_rank_candidates_sorted(model, small_batch):
    index = build_index(model, small_batch, ids=list("abcdef"))
    query = model.embed(small_batch.subset([2]))
    ranked = rank_candidates(model, query, index, "T-AV")
    assert sorted(c for c, _ in ranked) == list("abcdef")
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def test_evaluate_and_report(model, small_batch, tmp_path):
    metrics, records = evaluate_retrieval(model, small_batch, ("T-V", "T-AV"), ks=(1, 5, 10))
    assert set(metrics) == {"T-V/R@1", "T-V/R@5", "T-AV/R@1", "T-AV/R@5"}
    write_report(tmp_path / "r.jsonl", records, metrics)
    lines = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(lines) == 2 * 6 + 1 and "summary" in lines[-1]
    assert len(lines[0]["top10"]) == 6


# -- generation -----------------------------------------------------------------

def test_generation_config_validation():
    with pytest.raises(ConfigError):
        GenerationConfig(strategy="sample")
    with pytest.raises(ConfigError):
        GenerationConfig(beam_size=0)


def test_beam_one_equals_greedy(model, small_batch):
    for i in range(3):
        g = caption_example(model, small_batch.frames[i], small_batch.spectrograms[i], "T-AV",
                            GenerationConfig("greedy", max_length=6))
        b = caption_example(model, small_batch.frames[i], small_batch.spectrograms[i], "T-AV",
                            GenerationConfig("beam", beam_size=1, max_length=6))
        assert g.tokens == b.tokens and g.log_prob == b.log_prob


def test_generation_respects_max_length(model, small_batch):
    out = caption_example(model, small_batch.frames[0], small_batch.spectrograms[0], "T-V",
                          GenerationConfig("beam", beam_size=3, max_length=4))
    assert len(out.tokens) <= 4
    assert out.log_prob <= 0


def test_text_only_generation_needs_a_condition(model):
    with pytest.raises(ConfigError):
        generate_caption(model, None, None, "T-AV")


def test_question_format_checked(model, small_batch):
    v = model.vision_encoder(small_batch.frames[:1])
    with pytest.raises(ContractError):
        answer_question(model, [CLS_ID, SEP_ID], v, None, "T-V")
    out = answer_question(model, [CLS_ID, 6, 7, SEP_ID], v, None, "T-V", GenerationConfig(max_length=3))
    assert len(out.tokens) <= 3
