"""Fitness tasks and expert-activation statistics.

Tasks are teacher-derived: probe token sequences are drawn uniformly from the
vocabulary and the *uncompressed* model's final-position outputs become the
targets. A compressed model that still matches the teacher on every probe is
behaviorally equivalent on that distribution, which is exactly what the
search is asked to preserve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import backend
from .model import SMoEModel

TASK_LABEL = "label_accuracy"
TASK_LOGIT = "logit_match"
TASK_KINDS = (TASK_LABEL, TASK_LOGIT)


@dataclass
class Task:
    kind: str
    tokens: np.ndarray          # (B, N) probe sequences
    teacher_labels: np.ndarray  # (B,) argmax of teacher final-position logits
    teacher_logits: np.ndarray  # (B, vocab) teacher final-position logits


def make_task(model: SMoEModel, kind: str, n_sequences: int, seq_len: int, seed: int) -> Task:
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    if n_sequences < 1 or seq_len < 1:
        raise ValueError("task needs at least one sequence of at least one token")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, model.config.vocab_size, size=(n_sequences, seq_len), dtype=np.int64)
    logits = backend.forward_final_logits(model, tokens)
    return Task(kind=kind, tokens=tokens,
                teacher_labels=np.argmax(logits, axis=1), teacher_logits=logits)


def score_final_logits(task: Task, logits: np.ndarray) -> float:
    """Score already-computed final-position logits against the teacher.

    label_accuracy: fraction of probes whose argmax matches the teacher
    label. logit_match: negative mean squared logit error.
    """
    if logits.shape != task.teacher_logits.shape:
        raise ValueError(f"logits shape {logits.shape} != teacher {task.teacher_logits.shape}")
    if task.kind == TASK_LABEL:
        return float(np.mean(np.argmax(logits, axis=1) == task.teacher_labels))
    diff = logits - task.teacher_logits
    return float(-np.mean(diff * diff))


def fitness(model: SMoEModel, task: Task, active_experts: int | None = None) -> float:
    """Task score of a (possibly compressed) model; higher is better.
    ``active_experts`` overrides the routed expert count k'."""
    return score_final_logits(
        task, backend.forward_final_logits(model, task.tokens, k=active_experts))


@dataclass
class LayerStats:
    counts: np.ndarray       # (E,) times each expert was in the top-k
    weight_mass: np.ndarray  # (E,) accumulated post-renormalization weight
    correlation: np.ndarray  # (E, E) Pearson correlation of 0/1 activation
    defined: np.ndarray      # (E, E) False where an indicator had zero variance


@dataclass
class ExpertStats:
    n_tokens: int
    k: int
    layers: list[LayerStats]


def stats_from_selections(sel: np.ndarray, weights: np.ndarray, n_experts: int) -> LayerStats:
    """Accumulate counts, weight mass, and activation correlation.

    ``sel`` (T, k) holds per-token selected expert indices, ``weights`` the
    matching renormalized routing weights. Correlation is the Pearson
    correlation of the per-token 0/1 activation indicators; pairs involving a
    zero-variance indicator (an always- or never-selected expert) are
    reported as 0 and masked in ``defined``.
    """
    sel = np.asarray(sel, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    t = sel.shape[0]
    counts = np.bincount(sel.ravel(), minlength=n_experts)
    mass = np.zeros(n_experts)
    np.add.at(mass, sel.ravel(), weights.ravel())
    ind = np.zeros((t, n_experts))
    ind[np.arange(t)[:, None], sel] = 1.0
    centered = ind - ind.mean(axis=0)
    cov = centered.T @ centered / t
    std = np.sqrt(np.diag(cov))
    defined = np.outer(std > 0, std > 0)
    corr = np.zeros((n_experts, n_experts))
    with np.errstate(divide="ignore", invalid="ignore"):
        np.divide(cov, np.outer(std, std), out=corr, where=defined)
    corr[np.diag_indices(n_experts)] = np.where(std > 0, 1.0, 0.0)
    return LayerStats(counts=counts, weight_mass=mass, correlation=corr, defined=defined)


def collect_expert_stats(model: SMoEModel, tokens, k: int | None = None) -> ExpertStats:
    """Per-layer activation statistics over a probe batch."""
    trace = backend.forward_trace(model, tokens, k=k)
    if k is None:
        k = model.config.top_k
    layers = [
        stats_from_selections(lt.sel, lt.sel_w, lt.gates.shape[1])
        for lt in trace.layers
    ]
    n_tokens = trace.layers[0].sel.shape[0] if trace.layers else 0
    return ExpertStats(n_tokens=n_tokens, k=k, layers=layers)


def write_stats_csv(stats: ExpertStats, path) -> None:
    """One CSV: counts row, weight-mass row, then the correlation block
    (and its defined-mask block) per layer."""
    n_experts = len(stats.layers[0].counts) if stats.layers else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "record", "row"] + [f"e{i}" for i in range(n_experts)])
        for li, ls in enumerate(stats.layers):
            writer.writerow([li, "counts", ""] + [int(c) for c in ls.counts])
            writer.writerow([li, "weight_mass", ""] + [repr(float(v)) for v in ls.weight_mass])
            for r in range(n_experts):
                writer.writerow([li, "correlation", r] + [repr(float(v)) for v in ls.correlation[r]])
            for r in range(n_experts):
                writer.writerow([li, "correlation_defined", r] + [int(v) for v in ls.defined[r]])
