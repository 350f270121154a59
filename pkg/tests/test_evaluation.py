import dataclasses

import numpy as np
import pytest

import evomoe.backend as backend
from evomoe.compression import GroupAssignment, apply_genome, identity_genome, random_pruning_genome
from evomoe.evaluation import (ExpertStats, collect_expert_stats, fitness, make_task,
                               score_final_logits, stats_from_selections, write_stats_csv)
from evomoe.model import ModelConfig, gen_random_model

from oracles import uniform_selection_correlation


def test_make_task_deterministic(tiny_model):
    a = make_task(tiny_model, "label_accuracy", 16, 8, seed=4)
    b = make_task(tiny_model, "label_accuracy", 16, 8, seed=4)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.teacher_labels, b.teacher_labels)
    assert np.array_equal(a.teacher_logits, b.teacher_logits)
    c = make_task(tiny_model, "label_accuracy", 16, 8, seed=5)
    assert not np.array_equal(a.tokens, c.tokens)


def test_labels_in_vocab_range(tiny_model):
    task = make_task(tiny_model, "label_accuracy", 32, 8, seed=1)
    assert task.teacher_labels.min() >= 0
    assert task.teacher_labels.max() < 64


def test_unknown_kind_rejected(tiny_model):
    with pytest.raises(ValueError):
        make_task(tiny_model, "perplexity", 4, 4, seed=0)


def test_self_fitness_is_perfect(tiny_model):
    acc = make_task(tiny_model, "label_accuracy", 32, 8, seed=2)
    assert fitness(tiny_model, acc) == 1.0
    mse = make_task(tiny_model, "logit_match", 32, 8, seed=2)
    assert fitness(tiny_model, mse) == 0.0


def test_identity_compressed_fitness_equal(tiny_model):
    task = make_task(tiny_model, "logit_match", 16, 8, seed=3)
    compressed = apply_genome(tiny_model, identity_genome(tiny_model.config,
                                                          GroupAssignment.uniform(2, 2)))
    assert abs(fitness(compressed, task) - fitness(tiny_model, task)) <= 1e-12


def test_zero_model_logit_match_formula(tiny_model):
    task = make_task(tiny_model, "logit_match", 16, 8, seed=4)
    zero = dataclasses.replace(tiny_model, embedding=np.zeros_like(tiny_model.embedding))
    # zero embedding + no biases => logits are exactly zero everywhere
    expected = -float(np.mean(task.teacher_logits ** 2))
    assert fitness(zero, task) == pytest.approx(expected, abs=1e-15)


def test_score_final_logits_shape_check(tiny_model):
    task = make_task(tiny_model, "label_accuracy", 8, 4, seed=5)
    with pytest.raises(ValueError):
        score_final_logits(task, np.zeros((8, 63)))


def _counts_ok(stats: ExpertStats):
    for ls in stats.layers:
        assert int(ls.counts.sum()) == stats.n_tokens * stats.k
        assert np.all(ls.weight_mass >= 0)
        assert abs(ls.weight_mass.sum() - stats.n_tokens) <= 1e-9
        assert np.allclose(ls.correlation, ls.correlation.T, atol=1e-12)
        assert np.array_equal(ls.defined, ls.defined.T)
        for i in range(len(ls.counts)):
            if ls.defined[i, i]:
                assert ls.correlation[i, i] == 1.0
            else:
                assert ls.correlation[i, i] == 0.0


def test_collect_stats_full_model(tiny_model, tiny_tokens):
    stats = collect_expert_stats(tiny_model, tiny_tokens)
    assert stats.n_tokens == 64 and stats.k == 2
    _counts_ok(stats)


def test_collect_stats_compressed_model(tiny_model, tiny_tokens):
    genome = random_pruning_genome(tiny_model.config, GroupAssignment.uniform(2, 2), 2,
                                   np.random.default_rng(0))
    stats = collect_expert_stats(apply_genome(tiny_model, genome), tiny_tokens)
    _counts_ok(stats)
    # only 2 experts exist, k=2 => both always active => all indicators constant
    for ls in stats.layers:
        assert len(ls.counts) == 2
        assert not ls.defined.any()


def test_always_selected_expert_is_masked():
    cfg = ModelConfig(d_model=8, d_ffn=16, n_layers=1, n_experts=4, top_k=2,
                      vocab_size=32, max_seq_len=16)
    model = gen_random_model(cfg, seed=1)
    # a zero router ties every logit; the stable top-k then always picks {0, 1}
    model.blocks[0].w_router = np.zeros((8, 4))
    tokens = np.random.default_rng(2).integers(0, 32, size=(8, 8))
    stats = collect_expert_stats(model, tokens)
    ls = stats.layers[0]
    assert ls.counts[0] == stats.n_tokens and ls.counts[1] == stats.n_tokens
    assert ls.counts[2] == 0 and ls.counts[3] == 0
    # every selection indicator is constant, so no correlation is defined
    assert not ls.defined.any()
    assert np.all(ls.correlation == 0.0)


def test_uniform_subset_simulation_matches_closed_form():
    rng = np.random.default_rng(3)
    n, k, t = 4, 2, 10000
    sel = np.stack([rng.choice(n, size=k, replace=False) for _ in range(t)])
    weights = np.full((t, k), 1.0 / k)
    ls = stats_from_selections(sel, weights, n)
    expected = uniform_selection_correlation(n, k)
    assert expected == pytest.approx(-1 / 3)
    off = ls.correlation[~np.eye(n, dtype=bool)]
    assert np.all(np.abs(off - expected) <= 0.05)
    assert int(ls.counts.sum()) == t * k


def test_stats_csv_round_shape(tiny_model, tiny_tokens, tmp_path):
    stats = collect_expert_stats(tiny_model, tiny_tokens)
    path = tmp_path / "stats.csv"
    write_stats_csv(stats, path)
    lines = path.read_text().strip().splitlines()
    # header + per layer: counts + mass + 4 corr rows + 4 mask rows
    assert len(lines) == 1 + 2 * (1 + 1 + 4 + 4)
    assert lines[0] == "layer,record,row,e0,e1,e2,e3"
