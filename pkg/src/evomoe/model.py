"""Toy decoder-style sparse Mixture-of-Experts transformer.

A model is embedding -> L blocks -> readout head. Each block is single-head
causal self-attention plus a top-k routed bank of SwiGLU experts, wired with
residual connections and no normalization layers or biases.

A block produced by expert compression keeps the original router weights and
carries an extra ``router_map`` matrix that linearly maps the full softmax
router output onto the reduced expert bank (one-hot rows reproduce plain
subset pruning; general rows realize merged routing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError, matmul, softmax_rows, swiglu, top_k
from .serialize import FormatError, dump_json, load_json, matrix_from_json, matrix_to_json

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    d_ffn: int
    n_layers: int
    n_experts: int
    top_k: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        for name in ("d_model", "d_ffn", "n_layers", "n_experts", "top_k", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model < 2 or self.d_ffn < 2:
            raise ValueError("d_model and d_ffn must be >= 2")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")

    def to_json(self) -> dict:
        return {
            "d_model": self.d_model,
            "d_ffn": self.d_ffn,
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        try:
            return cls(**{k: int(obj[k]) for k in (
                "d_model", "d_ffn", "n_layers", "n_experts", "top_k", "vocab_size", "max_seq_len")})
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad model config: {exc}") from exc


@dataclass
class ExpertWeights:
    w1: np.ndarray  # (d_model, d_ffn)
    w2: np.ndarray  # (d_ffn, d_model)
    w3: np.ndarray  # (d_model, d_ffn)


@dataclass
class SMoEBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_router: np.ndarray          # (d_model, n original experts)
    experts: list[ExpertWeights]
    # Set on compressed blocks: (len(experts), w_router.shape[1]). Maps the
    # softmax over the original experts onto the reduced bank.
    router_map: np.ndarray | None = None

    @property
    def n_experts(self) -> int:
        return len(self.experts)


@dataclass
class SMoEModel:
    config: ModelConfig
    embedding: np.ndarray  # (vocab_size, d_model)
    blocks: list[SMoEBlock]
    head: np.ndarray       # (d_model, vocab_size)


def attention_forward(block: SMoEBlock, x: np.ndarray) -> np.ndarray:
    """Single-head causal self-attention: softmax(mask(QK^T/sqrt(d))) V Wo."""
    x = np.asarray(x, dtype=np.float64)
    d = block.wq.shape[0]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"attention input shape {x.shape} incompatible with d_model={d}")
    q = matmul(x, block.wq)
    k = matmul(x, block.wk)
    v = matmul(x, block.wv)
    scores = matmul(q, k.T) / math.sqrt(d)
    n = x.shape[0]
    scores[np.triu(np.ones((n, n), dtype=bool), k=1)] = -np.inf
    return matmul(matmul(softmax_rows(scores), v), block.wo)


def router_forward(block: SMoEBlock, z: np.ndarray) -> np.ndarray:
    """Per-token routing weights over the block's (effective) experts.

    Uncompressed: softmax(z @ w_router), rows sum to 1. Compressed: the same
    softmax left-multiplied by the router map, so rows need not sum to 1 and
    entries may be negative for merged routing.
    """
    g = softmax_rows(matmul(z, block.w_router))
    if block.router_map is not None:
        if block.router_map.shape != (block.n_experts, block.w_router.shape[1]):
            raise ShapeError(
                f"router_map shape {block.router_map.shape} inconsistent with "
                f"{block.n_experts} experts over {block.w_router.shape[1]} columns")
        g = g @ block.router_map.T
    return g


def moe_forward(block: SMoEBlock, g: np.ndarray, z: np.ndarray, k: int) -> np.ndarray:
    """Top-k routed expert mixture.

    Per token: select the k largest routing weights, renormalize them to sum
    to 1, and average the selected experts' SwiGLU outputs with those weights.
    """
    if not 1 <= k <= block.n_experts:
        raise ShapeError(f"moe_forward: k={k} out of range for {block.n_experts} experts")
    if g.shape != (z.shape[0], block.n_experts):
        raise ShapeError(f"gate shape {g.shape} incompatible with input {z.shape}")
    out = np.zeros_like(z)
    for j in range(z.shape[0]):
        sel = top_k(g[j], k)
        weights = g[j, sel]
        weights = weights / weights.sum()
        zj = z[j:j + 1]
        for w, e in zip(weights, sel):
            expert = block.experts[e]
            out[j] += w * matmul(swiglu(zj, expert.w1, expert.w3), expert.w2)[0]
    return out


def block_forward(block: SMoEBlock, x: np.ndarray, k: int) -> np.ndarray:
    y = x + attention_forward(block, x)
    return y + moe_forward(block, router_forward(block, y), y, k)


def model_forward(model: SMoEModel, token_ids, k: int | None = None) -> np.ndarray:
    """Logits for one token sequence, shape (len(token_ids), vocab_size).

    ``k`` overrides the configured number of active experts (used for the
    reduced-active-experts use case); default is config.top_k.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"token ids must be 1-D, got shape {ids.shape}")
    if ids.size > model.config.max_seq_len:
        raise ValueError(f"sequence length {ids.size} exceeds max_seq_len={model.config.max_seq_len}")
    if ids.size == 0:
        raise ValueError("empty token sequence")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ValueError(f"token id out of range [0, {model.config.vocab_size})")
    if k is None:
        k = model.config.top_k
    x = model.embedding[ids]
    for block in model.blocks:
        x = block_forward(block, x, k)
    return matmul(x, model.head)


def gen_random_model(config: ModelConfig, seed: int) -> SMoEModel:
    """Seeded Gaussian model; std 1/sqrt(fan-in) keeps activations O(1)."""
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ffn
    s_d = 1.0 / math.sqrt(d)
    s_f = 1.0 / math.sqrt(f)

    def mat(rows, cols, std):
        return rng.normal(0.0, std, size=(rows, cols))

    blocks = []
    for _ in range(config.n_layers):
        experts = [
            ExpertWeights(w1=mat(d, f, s_d), w2=mat(f, d, s_f), w3=mat(d, f, s_d))
            for _ in range(config.n_experts)
        ]
        blocks.append(SMoEBlock(
            wq=mat(d, d, s_d), wk=mat(d, d, s_d), wv=mat(d, d, s_d), wo=mat(d, d, s_d),
            w_router=mat(d, config.n_experts, s_d), experts=experts))
    return SMoEModel(
        config=config,
        embedding=mat(config.vocab_size, d, s_d),
        blocks=blocks,
        head=mat(d, config.vocab_size, s_d))


def save_model(model: SMoEModel, path) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "embedding": matrix_to_json(model.embedding),
        "blocks": [
            {
                "wq": matrix_to_json(b.wq),
                "wk": matrix_to_json(b.wk),
                "wv": matrix_to_json(b.wv),
                "wo": matrix_to_json(b.wo),
                "w_router": matrix_to_json(b.w_router),
                "router_map": None if b.router_map is None else matrix_to_json(b.router_map),
                "experts": [
                    {"w1": matrix_to_json(e.w1), "w2": matrix_to_json(e.w2), "w3": matrix_to_json(e.w3)}
                    for e in b.experts
                ],
            }
            for b in model.blocks
        ],
        "head": matrix_to_json(model.head),
    }
    dump_json(doc, path)


def load_model(path) -> SMoEModel:
    doc = load_json(path)
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format in {path}")
    config = ModelConfig.from_json(doc.get("config", {}))
    d, f = config.d_model, config.d_ffn
    try:
        blocks_doc = doc["blocks"]
        if len(blocks_doc) != config.n_layers:
            raise FormatError(f"expected {config.n_layers} blocks, found {len(blocks_doc)}")
        blocks = []
        for bd in blocks_doc:
            experts = [
                ExpertWeights(
                    w1=matrix_from_json(ed["w1"], (d, f)),
                    w2=matrix_from_json(ed["w2"], (f, d)),
                    w3=matrix_from_json(ed["w3"], (d, f)),
                )
                for ed in bd["experts"]
            ]
            if len(experts) != config.n_experts:
                raise FormatError(f"expected {config.n_experts} experts, found {len(experts)}")
            w_router = matrix_from_json(bd["w_router"])
            if w_router.shape[0] != d:
                raise FormatError(f"router rows {w_router.shape[0]} != d_model {d}")
            router_map = None
            if bd.get("router_map") is not None:
                router_map = matrix_from_json(bd["router_map"], (len(experts), w_router.shape[1]))
            elif w_router.shape[1] != config.n_experts:
                raise FormatError("router columns do not match expert count on an uncompressed block")
            blocks.append(SMoEBlock(
                wq=matrix_from_json(bd["wq"], (d, d)),
                wk=matrix_from_json(bd["wk"], (d, d)),
                wv=matrix_from_json(bd["wv"], (d, d)),
                wo=matrix_from_json(bd["wo"], (d, d)),
                w_router=w_router,
                experts=experts,
                router_map=router_map,
            ))
        return SMoEModel(
            config=config,
            embedding=matrix_from_json(doc["embedding"], (config.vocab_size, d)),
            blocks=blocks,
            head=matrix_from_json(doc["head"], (d, config.vocab_size)),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint {path}: {exc}") from exc
