"""Compression patterns: router-mapping plus expert-merging matrices.

A genome holds, per layer group, a pair of E'xE matrices:

* ``w_rm`` (router map) — applied to the full router softmax, producing
  routing weights over the E' retained experts;
* ``w_em`` (expert merge) — row j builds new expert j as the linear
  combination sum_i w_em[j, i] * (original expert i's weights), blockwise
  over w1/w2/w3.

In the pruning phase both matrices are equal with distinct one-hot rows
(pure subset retention); in the merging phase they are decoupled,
unconstrained real matrices. Layers share patterns through a contiguous
by-depth group partition.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ExpertWeights, ModelConfig, SMoEBlock, SMoEModel
from .serialize import FormatError, dump_json, load_json, matrix_from_json, matrix_to_json

GENOME_VERSION = 1
PHASE_PRUNE = "prune"
PHASE_MERGE = "merge"


@dataclass(frozen=True)
class GroupAssignment:
    n_groups: int
    layer_to_group: tuple[int, ...]

    @staticmethod
    def uniform(n_layers: int, n_groups: int) -> "GroupAssignment":
        """Contiguous by-depth partition: layer l belongs to group l*G//L."""
        if not 1 <= n_groups <= n_layers:
            raise ValueError(f"n_groups={n_groups} out of range for {n_layers} layers")
        return GroupAssignment(
            n_groups=n_groups,
            layer_to_group=tuple(l * n_groups // n_layers for l in range(n_layers)))


@dataclass
class GroupPattern:
    w_rm: np.ndarray  # (retained, n_experts)
    w_em: np.ndarray  # (retained, n_experts)


@dataclass
class Genome:
    phase: str  # PHASE_PRUNE or PHASE_MERGE
    retained: int
    groups: GroupAssignment
    patterns: list[GroupPattern]

    def copy(self) -> "Genome":
        return Genome(
            phase=self.phase, retained=self.retained, groups=self.groups,
            patterns=[GroupPattern(p.w_rm.copy(), p.w_em.copy()) for p in self.patterns])


def one_hot_pattern(subset, n_experts: int) -> GroupPattern:
    """One-hot rows selecting ``subset`` (row order = given order)."""
    w = np.zeros((len(subset), n_experts))
    for j, e in enumerate(subset):
        w[j, e] = 1.0
    return GroupPattern(w_rm=w, w_em=w.copy())


def selected_experts(pattern: GroupPattern) -> list[int]:
    """Per-row selected expert of a one-hot pattern."""
    return [int(np.argmax(row)) for row in pattern.w_rm]


def identity_genome(config: ModelConfig, groups: GroupAssignment) -> Genome:
    eye = np.eye(config.n_experts)
    return Genome(
        phase=PHASE_MERGE, retained=config.n_experts, groups=groups,
        patterns=[GroupPattern(w_rm=eye.copy(), w_em=eye.copy()) for _ in range(groups.n_groups)])


def random_pruning_genome(config: ModelConfig, groups: GroupAssignment,
                          retained: int, rng: np.random.Generator) -> Genome:
    if not config.top_k <= retained <= config.n_experts:
        raise ValueError(
            f"retained={retained} out of range [{config.top_k}, {config.n_experts}]")
    patterns = []
    for _ in range(groups.n_groups):
        subset = sorted(rng.choice(config.n_experts, size=retained, replace=False).tolist())
        patterns.append(one_hot_pattern(subset, config.n_experts))
    return Genome(phase=PHASE_PRUNE, retained=retained, groups=groups, patterns=patterns)


def validate_genome(genome: Genome, config: ModelConfig) -> str | None:
    """Return None when valid, else a description of the first violation."""
    if genome.phase not in (PHASE_PRUNE, PHASE_MERGE):
        return f"unknown phase {genome.phase!r}"
    e, ep = config.n_experts, genome.retained
    if not 1 <= ep <= e:
        return f"retained={ep} out of range for {e} experts"
    if ep < config.top_k:
        return f"retained={ep} smaller than top_k={config.top_k}"
    g = genome.groups
    if not 1 <= g.n_groups <= config.n_layers:
        return f"n_groups={g.n_groups} out of range for {config.n_layers} layers"
    if g != GroupAssignment.uniform(config.n_layers, g.n_groups):
        return "group assignment is not the contiguous uniform partition by depth"
    if len(genome.patterns) != g.n_groups:
        return f"{len(genome.patterns)} patterns for {g.n_groups} groups"
    for gi, pat in enumerate(genome.patterns):
        for name, m in (("w_rm", pat.w_rm), ("w_em", pat.w_em)):
            if m.shape != (ep, e):
                return f"group {gi}: {name} shape {m.shape}, expected {(ep, e)}"
            if not np.all(np.isfinite(m)):
                return f"group {gi}: non-finite entry in {name}"
        if genome.phase == PHASE_PRUNE:
            if not np.array_equal(pat.w_rm, pat.w_em):
                return f"group {gi}: pruning phase requires w_rm == w_em"
            seen = set()
            for row_i, row in enumerate(pat.w_rm):
                hot = np.nonzero(row)[0]
                if hot.size != 1 or row[hot[0]] != 1.0:
                    return f"group {gi} row {row_i}: not one-hot"
                if int(hot[0]) in seen:
                    return f"group {gi} row {row_i}: duplicate expert {int(hot[0])}"
                seen.add(int(hot[0]))
    return None


def apply_genome(model: SMoEModel, genome: Genome) -> SMoEModel:
    """Build the compressed model (E' experts per block).

    New expert weights are exact ordered linear combinations of the
    originals; the router map is stored on each block so routing becomes
    w_rm @ softmax(z @ w_router). Attention weights, embedding, and head are
    shared with the base model (models are treated as immutable).
    """
    for block in model.blocks:
        if block.router_map is not None:
            raise ValueError("model is already compressed (router_map present)")
    violation = validate_genome(genome, model.config)
    if violation is not None:
        raise ValueError(f"invalid genome: {violation}")
    if len(genome.groups.layer_to_group) != model.config.n_layers:
        raise ValueError("genome layer count does not match model")
    cfg = replace(model.config, n_experts=genome.retained)
    blocks = []
    for layer, block in enumerate(model.blocks):
        pat = genome.patterns[genome.groups.layer_to_group[layer]]
        experts = []
        for j in range(genome.retained):
            w1 = np.zeros_like(block.experts[0].w1)
            w2 = np.zeros_like(block.experts[0].w2)
            w3 = np.zeros_like(block.experts[0].w3)
            # ordered accumulation over source experts keeps results
            # bit-reproducible across runs and thread counts
            for i in range(model.config.n_experts):
                c = pat.w_em[j, i]
                w1 += c * block.experts[i].w1
                w2 += c * block.experts[i].w2
                w3 += c * block.experts[i].w3
            experts.append(ExpertWeights(w1=w1, w2=w2, w3=w3))
        blocks.append(SMoEBlock(
            wq=block.wq, wk=block.wk, wv=block.wv, wo=block.wo,
            w_router=block.w_router, experts=experts, router_map=pat.w_rm.copy()))
    return SMoEModel(config=cfg, embedding=model.embedding, blocks=blocks, head=model.head)


def save_genome(genome: Genome, path) -> None:
    dump_json({
        "format_version": GENOME_VERSION,
        "phase": genome.phase,
        "retained": genome.retained,
        "n_groups": genome.groups.n_groups,
        "layer_to_group": list(genome.groups.layer_to_group),
        "patterns": [
            {"w_rm": matrix_to_json(p.w_rm), "w_em": matrix_to_json(p.w_em)}
            for p in genome.patterns
        ],
    }, path)


def load_genome(path) -> Genome:
    doc = load_json(path)
    if not isinstance(doc, dict) or doc.get("format_version") != GENOME_VERSION:
        raise FormatError(f"unsupported genome format in {path}")
    try:
        phase = doc["phase"]
        if phase not in (PHASE_PRUNE, PHASE_MERGE):
            raise FormatError(f"unknown phase {phase!r}")
        retained = int(doc["retained"])
        groups = GroupAssignment(
            n_groups=int(doc["n_groups"]),
            layer_to_group=tuple(int(v) for v in doc["layer_to_group"]))
        patterns = []
        for pd in doc["patterns"]:
            w_rm = matrix_from_json(pd["w_rm"])
            w_em = matrix_from_json(pd["w_em"], w_rm.shape)
            if w_rm.shape[0] != retained:
                raise FormatError(f"pattern rows {w_rm.shape[0]} != retained {retained}")
            patterns.append(GroupPattern(w_rm=w_rm, w_em=w_em))
        if len(patterns) != groups.n_groups:
            raise FormatError(f"{len(patterns)} patterns for {groups.n_groups} groups")
        return Genome(phase=phase, retained=retained, groups=groups, patterns=patterns)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed genome {path}: {exc}") from exc
