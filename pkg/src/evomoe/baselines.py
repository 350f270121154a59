"""Comparison pruning methods and the exhaustive certification oracle.

All baselines emit per-layer-group pruning genomes (n_groups = L), since each
method makes an independent choice in every layer. The brute-force oracle
enumerates every group-shared pruning pattern and is the ground truth the
evolutionary search is certified against on small instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .compression import Genome, GroupAssignment, PHASE_PRUNE, apply_genome, one_hot_pattern, random_pruning_genome
from .evaluation import Task, fitness
from .model import ModelConfig, SMoEBlock, SMoEModel

NAEE_ENUM_GUARD = 20000


class GuardError(RuntimeError):
    """A combinatorial enumeration guard was exceeded."""


@dataclass
class CalibrationBatch:
    """Probe tokens plus full-model per-layer caches.

    layer_inputs[l] is the MoE input (post-attention residual), layer_gates[l]
    the pre-top-k router softmax flattened to (tokens, E), layer_moe_out[l]
    the full model's MoE output — the reconstruction target for NAEE.
    """
    tokens: np.ndarray
    layer_inputs: list[np.ndarray]
    layer_gates: list[np.ndarray]
    layer_moe_out: list[np.ndarray]


def make_calibration_batch(model: SMoEModel, n_sequences: int = 64,
                           seq_len: int = 16, seed: int = 0) -> CalibrationBatch:
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, model.config.vocab_size, size=(n_sequences, seq_len), dtype=np.int64)
    trace = backend.forward_trace(model, tokens)
    return CalibrationBatch(
        tokens=tokens,
        layer_inputs=[lt.y for lt in trace.layers],
        layer_gates=[lt.router_probs for lt in trace.layers],
        layer_moe_out=[lt.moe_out for lt in trace.layers])


def _per_layer_groups(config: ModelConfig) -> GroupAssignment:
    return GroupAssignment.uniform(config.n_layers, config.n_layers)


def random_prune(config: ModelConfig, retained: int, seed: int) -> Genome:
    """Uniformly random expert subset in every layer."""
    rng = np.random.default_rng(seed)
    return random_pruning_genome(config, _per_layer_groups(config), retained, rng)


def _subset_genome(config: ModelConfig, subsets: list[tuple[int, ...]]) -> Genome:
    return Genome(phase=PHASE_PRUNE, retained=len(subsets[0]),
                  groups=_per_layer_groups(config),
                  patterns=[one_hot_pattern(sorted(s), config.n_experts) for s in subsets])


def _rank_and_keep(score_per_expert: np.ndarray, retained: int) -> tuple[int, ...]:
    """Highest-score experts, ties toward the lower index, reported ascending."""
    order = sorted(range(len(score_per_expert)), key=lambda e: (-score_per_expert[e], e))
    return tuple(sorted(order[:retained]))


def frequency_prune(model: SMoEModel, calib: CalibrationBatch, retained: int) -> Genome:
    """Keep the most often top-k-activated experts in each layer."""
    if calib.tokens.size == 0:
        raise ValueError("empty calibration batch")
    cfg = model.config
    subsets = []
    for gates in calib.layer_gates:
        sel, _ = backend.select_topk(gates, cfg.top_k)
        counts = np.bincount(sel.ravel(), minlength=cfg.n_experts)
        subsets.append(_rank_and_keep(counts, retained))
    return _subset_genome(cfg, subsets)


def soft_activation_prune(model: SMoEModel, calib: CalibrationBatch, retained: int) -> Genome:
    """Keep the experts with the largest accumulated pre-top-k softmax mass."""
    if calib.tokens.size == 0:
        raise ValueError("empty calibration batch")
    cfg = model.config
    subsets = [_rank_and_keep(gates.sum(axis=0), retained) for gates in calib.layer_gates]
    return _subset_genome(cfg, subsets)


def _subset_block(block: SMoEBlock, subset: tuple[int, ...]) -> SMoEBlock:
    """Literal expert deletion: gathered experts and router columns, no map."""
    return SMoEBlock(
        wq=block.wq, wk=block.wk, wv=block.wv, wo=block.wo,
        w_router=block.w_router[:, list(subset)],
        experts=[block.experts[e] for e in subset])


@dataclass
class NaeeRecord:
    layer: int
    subset: tuple[int, ...]
    mse: float
    chosen: bool


def _candidate_subsets(n_experts: int, retained: int, subsample: int | None,
                       seed: int) -> list[tuple[int, ...]]:
    total = math.comb(n_experts, retained)
    if total <= NAEE_ENUM_GUARD:
        return list(itertools.combinations(range(n_experts), retained))
    if subsample is None:
        raise GuardError(
            f"C({n_experts},{retained}) = {total} exceeds the per-layer guard "
            f"of {NAEE_ENUM_GUARD}; pass subsample= to sample candidates")
    rng = np.random.default_rng(seed)
    seen: dict[tuple[int, ...], None] = {}
    attempts = 0
    while len(seen) < subsample and attempts < 20 * subsample:
        s = tuple(sorted(rng.choice(n_experts, size=retained, replace=False).tolist()))
        seen.setdefault(s, None)
        attempts += 1
    return list(seen.keys())


def naee_prune(model: SMoEModel, calib: CalibrationBatch, retained: int,
               subsample: int | None = None, seed: int = 0,
               ) -> tuple[Genome, list[NaeeRecord]]:
    """Greedy front-to-back per-layer subset enumeration.

    For each layer in depth order, with earlier layers already pruned, pick
    the expert subset whose MoE output has the lowest mean squared error
    against the full model's MoE output at that layer. Returns the genome and
    the full audit table.
    """
    cfg = model.config
    if not cfg.top_k <= retained <= cfg.n_experts:
        raise ValueError(f"retained={retained} out of range [{cfg.top_k}, {cfg.n_experts}]")
    candidates = _candidate_subsets(cfg.n_experts, retained, subsample, seed)
    current_blocks = list(model.blocks)
    audit: list[NaeeRecord] = []
    chosen_subsets: list[tuple[int, ...]] = []
    n_tok = calib.tokens.shape[0] * calib.tokens.shape[1]
    for layer in range(cfg.n_layers):
        hybrid = SMoEModel(config=cfg, embedding=model.embedding,
                           blocks=current_blocks, head=model.head)
        trace = backend.forward_trace(hybrid, calib.tokens, want_expert_outputs=True)
        lt = trace.layers[layer]
        probs = lt.router_probs                       # (T, E) — layer still unpruned
        expert_out = lt.expert_out                    # (E, T, d)
        target = calib.layer_moe_out[layer].reshape(n_tok, -1)
        best_subset = None
        best_mse = math.inf
        start = len(audit)
        for subset in candidates:
            sub = np.asarray(subset)
            sel, w = backend.select_topk(probs[:, sub], cfg.top_k)
            h = np.zeros_like(target)
            for slot in range(cfg.top_k):
                h += w[:, slot, None] * expert_out[sub[sel[:, slot]], np.arange(n_tok)]
            mse = float(np.mean((h - target) ** 2))
            audit.append(NaeeRecord(layer=layer, subset=subset, mse=mse, chosen=False))
            if mse < best_mse:
                best_mse = mse
                best_subset = subset
        for rec in audit[start:]:
            if rec.subset == best_subset:
                rec.chosen = True
                break
        chosen_subsets.append(best_subset)
        current_blocks[layer] = _subset_block(model.blocks[layer], best_subset)
    return _subset_genome(cfg, chosen_subsets), audit


def dynamic_skip_calibrate(model: SMoEModel, probe_tokens) -> np.ndarray:
    """Per-layer median of (second-largest / largest) routing-weight ratios."""
    if model.config.top_k != 2:
        raise ValueError("dynamic skipping calibration is defined for top_k=2 models")
    trace = backend.forward_trace(model, probe_tokens)
    thresholds = []
    for lt in trace.layers:
        # renormalized weights keep the raw ratio: the scale factor cancels
        ratio = lt.sel_w[:, 1] / lt.sel_w[:, 0]
        thresholds.append(float(np.median(ratio)))
    return np.asarray(thresholds)


def dynamic_skip_forward(model: SMoEModel, thresholds, tokens) -> tuple[np.ndarray, float]:
    """Forward with second-expert skipping; returns (final logits, avg active)."""
    trace = backend.forward_trace(model, tokens, thresholds=thresholds)
    return trace.final_logits, trace.avg_active


@dataclass
class OracleRow:
    pattern_id: int
    subsets: tuple[tuple[int, ...], ...]  # one subset per group
    fitness: float


def brute_force_oracle(model: SMoEModel, task: Task, retained: int,
                       groups: GroupAssignment, max_patterns: int = 100000,
                       ) -> tuple[Genome, list[OracleRow]]:
    """Fitness of every group-shared pruning pattern; argmax plus full table."""
    cfg = model.config
    per_group = math.comb(cfg.n_experts, retained)
    total = per_group ** groups.n_groups
    if total > max_patterns:
        raise GuardError(f"{total} patterns exceed the oracle guard of {max_patterns}")
    combos = list(itertools.combinations(range(cfg.n_experts), retained))
    table: list[OracleRow] = []
    best_genome = None
    best_fitness = -math.inf
    for pid, assignment in enumerate(itertools.product(combos, repeat=groups.n_groups)):
        genome = Genome(phase=PHASE_PRUNE, retained=retained, groups=groups,
                        patterns=[one_hot_pattern(s, cfg.n_experts) for s in assignment])
        score = fitness(apply_genome(model, genome), task)
        table.append(OracleRow(pattern_id=pid, subsets=assignment, fitness=score))
        if score > best_fitness:
            best_fitness = score
            best_genome = genome
    return best_genome, table
