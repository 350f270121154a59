"""Batched forward passes and execution-lane selection.

Two lanes compute the same forward pass:

* ``numpy`` — vectorized batched implementation used everywhere, and the only
  lane that can record per-layer instrumentation (router traces, expert
  outputs) or apply dynamic second-expert skipping.
* ``compiled`` — a fused Cython kernel (``evomoe._fastpath``) for the hot
  path: plain batch-of-sequences forward to final-position logits, which is
  what fitness evaluation hammers thousands of times during search.

The compiled lane is optional; import failure silently falls back to numpy.
``set_backend`` pins a lane explicitly (used by tests and the benchmark).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, silu, softmax_rows
from .model import SMoEModel

try:
    from . import _fastpath
except ImportError:  # pragma: no cover - build without the extension
    _fastpath = None

_BACKEND = "auto"


def available_backends() -> list[str]:
    lanes = ["numpy"]
    if _fastpath is not None:
        lanes.insert(0, "compiled")
    return lanes


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("auto", "compiled", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and _fastpath is None:
        raise RuntimeError("compiled backend requested but evomoe._fastpath is not built")
    _BACKEND = name


def active_backend() -> str:
    if _BACKEND == "auto":
        return "compiled" if _fastpath is not None else "numpy"
    return _BACKEND


def _check_tokens(model: SMoEModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"token batch must be 2-D (batch, seq), got shape {tokens.shape}")
    if tokens.shape[1] > model.config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise ValueError("token id out of range")
    return tokens


def _softmax_last(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=-1, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=-1, keepdims=True)


def _attention_batch(block, x: np.ndarray) -> np.ndarray:
    """Causal self-attention over a (B, N, d) batch."""
    d = block.wq.shape[0]
    q = x @ block.wq
    k = x @ block.wk
    v = x @ block.wv
    scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(d)
    n = x.shape[1]
    scores[:, np.triu(np.ones((n, n), dtype=bool), k=1)] = -np.inf
    return (_softmax_last(scores) @ v) @ block.wo


def _router_batch(block, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(routing weights over effective experts, raw softmax over originals)."""
    probs = softmax_rows(z @ block.w_router)
    if block.router_map is not None:
        return probs @ block.router_map.T, probs
    return probs, probs


def select_topk(g: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized top-k with the same tie rule as linalg.top_k."""
    idx = np.argsort(-g, axis=1, kind="stable")[:, :k]
    raw = np.take_along_axis(g, idx, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = raw / raw.sum(axis=1, keepdims=True)
    return idx, w


def _expert_mix(block, z: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Sum of selected experts' SwiGLU outputs, weighted per token."""
    out = np.zeros_like(z)
    for e in range(block.n_experts):
        hit = idx == e
        rows = hit.any(axis=1).nonzero()[0]
        if rows.size == 0:
            continue
        ex = block.experts[e]
        zr = z[rows]
        h = (silu(zr @ ex.w1) * (zr @ ex.w3)) @ ex.w2
        # each row selects a given expert at most once, so boolean pick
        # yields exactly one coefficient per hit row, in row order
        out[rows] += w[hit][:, None] * h
    return out


def forward_final_logits(model: SMoEModel, tokens, k: int | None = None) -> np.ndarray:
    """Final-position logits, shape (B, vocab). Dispatches to the active lane."""
    tokens = _check_tokens(model, tokens)
    if k is None:
        k = model.config.top_k
    if k < 1 or (model.blocks and k > model.blocks[0].n_experts):
        raise ShapeError(f"active expert count k={k} out of range")
    if active_backend() == "compiled":
        return _forward_compiled(model, tokens, k)
    return _forward_numpy(model, tokens, k)


def _forward_numpy(model: SMoEModel, tokens: np.ndarray, k: int) -> np.ndarray:
    b, n = tokens.shape
    d = model.config.d_model
    x = model.embedding[tokens]
    for block in model.blocks:
        y = x + _attention_batch(block, x)
        flat = y.reshape(b * n, d)
        g, _ = _router_batch(block, flat)
        idx, w = select_topk(g, k)
        x = y + _expert_mix(block, flat, idx, w).reshape(b, n, d)
    return x[:, -1, :] @ model.head


def _forward_compiled(model: SMoEModel, tokens: np.ndarray, k: int) -> np.ndarray:
    x = np.ascontiguousarray(model.embedding[tokens])
    for block in model.blocks:
        w1s = np.ascontiguousarray(np.stack([e.w1 for e in block.experts]))
        w2s = np.ascontiguousarray(np.stack([e.w2 for e in block.experts]))
        w3s = np.ascontiguousarray(np.stack([e.w3 for e in block.experts]))
        rm = block.router_map
        _fastpath.block_forward_inplace(
            x,
            np.ascontiguousarray(block.wq), np.ascontiguousarray(block.wk),
            np.ascontiguousarray(block.wv), np.ascontiguousarray(block.wo),
            np.ascontiguousarray(block.w_router),
            None if rm is None else np.ascontiguousarray(rm),
            w1s, w2s, w3s, k)
    return x[:, -1, :] @ model.head


@dataclass
class LayerTrace:
    """Per-layer instrumentation from one batched forward."""
    y: np.ndarray                     # (B, N, d) MoE input (post-attention residual)
    router_probs: np.ndarray          # (T, E_orig) softmax before any router map
    gates: np.ndarray                 # (T, E_eff) routing weights fed to top-k
    sel: np.ndarray                   # (T, k) selected expert indices
    sel_w: np.ndarray                 # (T, k) renormalized weights (0 in skipped slot)
    active: np.ndarray                # (T,) experts actually used per token
    moe_out: np.ndarray               # (B, N, d)
    expert_out: np.ndarray | None     # (E_eff, T, d) every expert on every token


@dataclass
class ForwardTrace:
    final_logits: np.ndarray          # (B, vocab)
    layers: list[LayerTrace]

    @property
    def avg_active(self) -> float:
        total = sum(int(lt.active.sum()) for lt in self.layers)
        tokens = sum(lt.active.size for lt in self.layers)
        return total / tokens


def forward_trace(model: SMoEModel, tokens, k: int | None = None,
                  thresholds=None, want_expert_outputs: bool = False) -> ForwardTrace:
    """Instrumented numpy forward.

    ``thresholds`` (one per layer) enables dynamic second-expert skipping for
    k=2 routing: when the gate ratio second/largest falls below the layer's
    threshold, the second expert is dropped and the kept weight becomes 1.
    """
    tokens = _check_tokens(model, tokens)
    if k is None:
        k = model.config.top_k
    if thresholds is not None:
        thresholds = np.asarray(thresholds, dtype=np.float64)
        if k != 2:
            raise ValueError("dynamic skipping is defined for k=2 routing only")
        if thresholds.shape != (len(model.blocks),):
            raise ShapeError(f"need one threshold per layer, got shape {thresholds.shape}")
    b, n = tokens.shape
    d = model.config.d_model
    x = model.embedding[tokens]
    layers = []
    for li, block in enumerate(model.blocks):
        y = x + _attention_batch(block, x)
        flat = y.reshape(b * n, d)
        g, probs = _router_batch(block, flat)
        idx, w = select_topk(g, k)
        active = np.full(b * n, k, dtype=np.int64)
        if thresholds is not None:
            raw = np.take_along_axis(g, idx, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = raw[:, 1] / raw[:, 0]
            skip = ratio < thresholds[li]
            w = w.copy()
            w[skip, 0] = 1.0
            w[skip, 1] = 0.0
            active[skip] = 1
        moe = _expert_mix(block, flat, idx, w)
        expert_out = None
        if want_expert_outputs:
            expert_out = np.empty((block.n_experts, b * n, d))
            for e, ex in enumerate(block.experts):
                expert_out[e] = (silu(flat @ ex.w1) * (flat @ ex.w3)) @ ex.w2
        layers.append(LayerTrace(y=y, router_probs=probs, gates=g, sel=idx, sel_w=w,
                                 active=active, moe_out=moe.reshape(b, n, d),
                                 expert_out=expert_out))
        x = y + moe.reshape(b, n, d)
    return ForwardTrace(final_logits=x[:, -1, :] @ model.head, layers=layers)
