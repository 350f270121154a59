"""Two-phase evolutionary search over compression genomes.

Phase one searches one-hot pruning patterns; the best one is promoted
(router-map and expert-merge matrices decoupled) and phase two refines both
with continuous Gaussian mutations. Selection is elitist: parents are drawn
uniformly from the current top-m_cp individuals, children are appended, and
the best individual ever evaluated is returned.

Determinism: every stochastic step pulls from a child-scoped generator built
as SeedSequence(entropy=seed, spawn_key=(stage, iteration, child)), and
children are constructed serially before being evaluated by an
order-preserving worker pool — so results are identical for any thread count.
"""

from __future__ import annotations

import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .compression import (Genome, GroupAssignment, PHASE_MERGE, PHASE_PRUNE, apply_genome,
                          identity_genome, random_pruning_genome, selected_experts)
from .evaluation import Task, fitness
from .model import SMoEModel

P_WHOLE = 0.25          # probability of copying one parent outright
_DUP_RETRIES = 8        # source re-draws before falling back to a random unused expert

_STAGE_INIT, _STAGE_PRUNE, _STAGE_RESEED, _STAGE_MERGE = 0, 1, 2, 3


@dataclass
class Individual:
    genome: Genome
    fitness: float
    uid: int


@dataclass
class SearchConfig:
    retained: int
    n_groups: int
    prune_iters: int = 40
    merge_iters: int = 160
    epochs_per_iter: int = 16
    m_cp: int = 8
    init_population: int = 32
    mutation_sigma: float = 0.05
    prune_mutation_rate: float = 0.3
    seed: int = 0
    # fine-tuning mode: skip pruning, seed merging from the identity genome
    merge_only: bool = False
    # k' override applied to every fitness evaluation
    active_experts: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.retained < 1:
            raise ValueError("retained must be >= 1")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if self.prune_iters < 0 or self.merge_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        for name in ("epochs_per_iter", "m_cp", "init_population", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.mutation_sigma > 0:
            raise ValueError("mutation_sigma must be > 0")
        if not 0 <= self.prune_mutation_rate <= 1:
            raise ValueError("prune_mutation_rate must be in [0, 1]")


@dataclass
class TraceRow:
    iteration: int
    phase: str
    best_fitness: float
    evaluations: int


@dataclass
class SearchTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def last_of_phase(self, phase: str) -> TraceRow | None:
        hit = None
        for row in self.rows:
            if row.phase == phase:
                hit = row
        return hit


def write_trace_csv(trace: SearchTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("iteration,phase,best_fitness,evaluations\n")
        for r in trace.rows:
            fh.write(f"{r.iteration},{r.phase},{r.best_fitness!r},{r.evaluations}\n")


def _child_rng(seed: int, stage: int, iteration: int, child: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stage, iteration, child)))


def _check_same_structure(a: Genome, b: Genome) -> None:
    if a.phase != b.phase or a.retained != b.retained or a.groups != b.groups:
        raise ValueError("parents differ in phase, retained count, or group structure")


def crossover(father: Genome, mother: Genome, rng: np.random.Generator) -> Genome:
    """Recombine two parents.

    With probability P_WHOLE one parent is copied outright; otherwise each
    retained-expert row (w_rm and w_em jointly) is inherited from a uniformly
    chosen parent, per group. In the pruning phase a child row that would
    duplicate an already-selected expert re-draws its source a few times,
    then falls back to a uniformly random unused expert.
    """
    _check_same_structure(father, mother)
    if rng.random() < P_WHOLE:
        return (father if rng.integers(2) == 0 else mother).copy()
    child = father.copy()
    n_experts = father.patterns[0].w_rm.shape[1]
    for gi, (pf, pm, pc) in enumerate(zip(father.patterns, mother.patterns, child.patterns)):
        sources = rng.integers(2, size=father.retained)
        for j, src in enumerate(sources):
            parent = pf if src == 0 else pm
            pc.w_rm[j] = parent.w_rm[j]
            pc.w_em[j] = parent.w_em[j]
        if father.phase != PHASE_PRUNE:
            continue
        used: set[int] = set()
        for j in range(father.retained):
            expert = int(np.argmax(pc.w_rm[j]))
            for _ in range(_DUP_RETRIES):
                if expert not in used:
                    break
                parent = pf if rng.integers(2) == 0 else pm
                expert = int(np.argmax(parent.w_rm[j]))
            if expert in used:
                unused = sorted(set(range(n_experts)) - used)
                expert = unused[rng.integers(len(unused))]
            used.add(expert)
            pc.w_rm[j] = 0.0
            pc.w_rm[j, expert] = 1.0
            pc.w_em[j] = pc.w_rm[j]
    return child


def mutate(genome: Genome, cfg: SearchConfig, rng: np.random.Generator) -> Genome:
    """Pruning phase: per-row expert replacement with prob prune_mutation_rate.
    Merging phase: i.i.d. Gaussian(0, sigma^2) noise on every matrix entry."""
    out = genome.copy()
    if genome.phase == PHASE_PRUNE:
        n_experts = genome.patterns[0].w_rm.shape[1]
        for pat in out.patterns:
            selected = set(selected_experts(pat))
            for j in range(genome.retained):
                if rng.random() >= cfg.prune_mutation_rate:
                    continue
                unselected = sorted(set(range(n_experts)) - selected)
                if not unselected:
                    continue
                new = unselected[rng.integers(len(unselected))]
                old = int(np.argmax(pat.w_rm[j]))
                selected.discard(old)
                selected.add(new)
                pat.w_rm[j] = 0.0
                pat.w_rm[j, new] = 1.0
                pat.w_em[j] = pat.w_rm[j]
    else:
        for pat in out.patterns:
            pat.w_rm += rng.normal(0.0, cfg.mutation_sigma, size=pat.w_rm.shape)
            pat.w_em += rng.normal(0.0, cfg.mutation_sigma, size=pat.w_em.shape)
    return out


def promote_to_merging(best_pruning: Genome) -> Genome:
    """Switch phase and decouple w_rm from w_em (values initially identical)."""
    if best_pruning.phase != PHASE_PRUNE:
        raise ValueError(f"can only promote a pruning-phase genome, got {best_pruning.phase!r}")
    out = best_pruning.copy()
    out.phase = PHASE_MERGE
    return out


def search(model: SMoEModel, task: Task, cfg: SearchConfig,
           ) -> tuple[Individual, SearchTrace]:
    """Run the two-phase search; returns the best individual ever evaluated
    and the per-iteration trace (row 0 covers the initial population)."""
    config = model.config
    if cfg.merge_only:
        if cfg.retained != config.n_experts:
            raise ValueError("merge_only search requires retained == n_experts")
    elif not config.top_k <= cfg.retained <= config.n_experts:
        raise ValueError(
            f"retained={cfg.retained} out of range [{config.top_k}, {config.n_experts}]")
    if cfg.active_experts is not None and not 1 <= cfg.active_experts <= cfg.retained:
        raise ValueError("active_experts out of range for retained expert count")
    groups = GroupAssignment.uniform(config.n_layers, cfg.n_groups)

    def eval_one(genome: Genome) -> float:
        score = fitness(apply_genome(model, genome), task, cfg.active_experts)
        # a degenerate merged router can zero out the selected gate mass;
        # such children are kept but can never win
        return score if math.isfinite(score) else -sys.float_info.max

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    evaluations = 0

    def eval_many(genomes: list[Genome]) -> list[float]:
        nonlocal evaluations
        evaluations += len(genomes)
        if pool is not None:
            return list(pool.map(eval_one, genomes))
        return [eval_one(g) for g in genomes]

    try:
        population: list[Individual] = []
        next_uid = 0

        def admit(genomes: list[Genome], scores: list[float]) -> None:
            nonlocal next_uid, best
            for g, s in zip(genomes, scores):
                ind = Individual(genome=g, fitness=s, uid=next_uid)
                next_uid += 1
                population.append(ind)
                if best is None or s > best.fitness:
                    best = ind

        best: Individual | None = None
        if cfg.merge_only:
            base = identity_genome(config, groups)
            seeds = [base] + [mutate(base, cfg, _child_rng(cfg.seed, _STAGE_INIT, 0, i))
                              for i in range(1, cfg.init_population)]
        else:
            seeds = [random_pruning_genome(config, groups, cfg.retained,
                                           _child_rng(cfg.seed, _STAGE_INIT, 0, i))
                     for i in range(cfg.init_population)]
        admit(seeds, eval_many(seeds))

        trace = SearchTrace()
        trace.rows.append(TraceRow(0, "init", best.fitness, evaluations))

        phases = []
        if not cfg.merge_only:
            phases.append((PHASE_PRUNE, cfg.prune_iters, _STAGE_PRUNE))
        phases.append((PHASE_MERGE, cfg.merge_iters, _STAGE_MERGE))
        iteration = 0
        for phase, iters, stage in phases:
            if iters == 0:
                continue
            if phase == PHASE_MERGE and not cfg.merge_only:
                # promote the pruning optimum and rebuild the population
                # around it: the carried-over elite plus sigma-mutants
                promoted = promote_to_merging(best.genome)
                mutants = [mutate(promoted, cfg, _child_rng(cfg.seed, _STAGE_RESEED, 0, i))
                           for i in range(cfg.init_population - 1)]
                scores = eval_many(mutants)
                population = []
                elite = Individual(genome=promoted, fitness=best.fitness, uid=next_uid)
                next_uid += 1
                population.append(elite)
                best = elite
                admit(mutants, scores)
            for t in range(1, iters + 1):
                iteration += 1
                by_rank = sorted(population, key=lambda ind: (-ind.fitness, ind.uid))
                cp = by_rank[:min(cfg.m_cp, len(by_rank))]
                children = []
                for c in range(cfg.epochs_per_iter):
                    rng = _child_rng(cfg.seed, stage, t, c)
                    father = cp[rng.integers(len(cp))]
                    mother = cp[rng.integers(len(cp))]
                    children.append(mutate(crossover(father.genome, mother.genome, rng), cfg, rng))
                admit(children, eval_many(children))
                trace.rows.append(TraceRow(iteration, phase, best.fitness, evaluations))
        return best, trace
    finally:
        if pool is not None:
            pool.shutdown()
