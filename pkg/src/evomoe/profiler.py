"""Analytic parameter, memory, and FLOP accounting.

Counts follow the block structure: per layer, E experts of three d x d_ffn
matrices (w2 transposed), four attention projections, one router column per
expert; plus untied embedding and readout head. The FLOP model covers weight
matmuls only (2 FLOPs per multiply-accumulate) and the speedup estimate is a
FLOP ratio — an upper-bound proxy, not a latency prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig, SMoEModel


@dataclass
class ParamReport:
    expert_params: int
    attention_params: int
    router_params: int
    embedding_params: int
    total_params: int
    expert_fraction: float


@dataclass
class CostReport:
    params_after: int
    param_reduction_fraction: float
    memory_bytes: int
    flops_per_token_prefill: int
    estimated_moe_speedup: float


def count_params(config: ModelConfig) -> ParamReport:
    d, f = config.d_model, config.d_ffn
    expert = config.n_layers * config.n_experts * 3 * d * f
    attention = config.n_layers * 4 * d * d
    router = config.n_layers * d * config.n_experts
    embedding = 2 * config.vocab_size * d
    total = expert + attention + router + embedding
    return ParamReport(expert_params=expert, attention_params=attention,
                       router_params=router, embedding_params=embedding,
                       total_params=total, expert_fraction=expert / total)


def count_model_params(model: SMoEModel) -> int:
    """Enumerated element count of a constructed model.

    Router maps on compressed blocks are bookkeeping for the original router
    and are excluded, so a compressed model's count matches the analytic
    params_after for its (E', config).
    """
    total = model.embedding.size + model.head.size
    for b in model.blocks:
        total += b.wq.size + b.wk.size + b.wv.size + b.wo.size + b.w_router.size
        total += sum(e.w1.size + e.w2.size + e.w3.size for e in b.experts)
    return int(total)


def compression_cost(config: ModelConfig, retained_total: int,
                     active: int | None = None, dtype_bytes: int = 2) -> CostReport:
    """Cost of keeping E'=retained_total experts and routing k'=active of them."""
    if not 1 <= retained_total <= config.n_experts:
        raise ValueError(f"retained_total={retained_total} out of range")
    if active is None:
        active = min(config.top_k, retained_total)
    if not 1 <= active <= retained_total:
        raise ValueError(f"active={active} out of range for {retained_total} retained experts")
    d, f, layers = config.d_model, config.d_ffn, config.n_layers
    full = count_params(config)
    removed = (config.n_experts - retained_total) * layers * 3 * d * f
    params_after = full.total_params - removed
    attn_flops = layers * 4 * d * d * 2
    expert_flops = layers * 3 * d * f * 2          # per active expert
    router_flops = layers * d * config.n_experts * 2
    head_flops = d * config.vocab_size * 2
    return CostReport(
        params_after=params_after,
        param_reduction_fraction=removed / full.total_params,
        memory_bytes=params_after * dtype_bytes,
        flops_per_token_prefill=attn_flops + active * expert_flops + router_flops + head_flops,
        estimated_moe_speedup=(attn_flops + config.top_k * expert_flops)
                              / (attn_flops + active * expert_flops))


def mixtral_8x7b_config() -> ModelConfig:
    """Published Mixtral 8x7B dimensions, for profiler cross-checks."""
    return ModelConfig(d_model=4096, d_ffn=14336, n_layers=32, n_experts=8,
                       top_k=2, vocab_size=32000, max_seq_len=32768)
