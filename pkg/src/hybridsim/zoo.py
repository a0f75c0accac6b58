"""Builders for transformer-style ModelSpecs (fp32 byte counts)."""

from __future__ import annotations

from .ir import LayerSpec, ModelSpec

BYTES = 4


def transformer_block(name: str, hidden: int, seq_len: int) -> LayerSpec:
    params = 12 * hidden * hidden + 13 * hidden
    fwd = 24 * seq_len * hidden * hidden + 4 * seq_len * seq_len * hidden
    return LayerSpec(
        name=name,
        op_kind="transformer_block",
        param_bytes=params * BYTES,
        fwd_flops=float(fwd),
        bwd_flops=float(2 * fwd),
        output_activation_bytes=seq_len * hidden * BYTES,
        input_shape=(seq_len, hidden),
    )


def embedding(name: str, hidden: int, seq_len: int, vocab: int) -> LayerSpec:
    # token + position + segment tables and one layer norm
    params = (vocab + seq_len + 2) * hidden + 2 * hidden
    return LayerSpec(
        name=name,
        op_kind="embedding",
        param_bytes=params * BYTES,
        fwd_flops=float(4 * seq_len * hidden),
        bwd_flops=float(8 * seq_len * hidden),
        output_activation_bytes=seq_len * hidden * BYTES,
        input_shape=(seq_len, hidden),
    )


def transformer(
    name: str,
    num_layers: int,
    hidden: int,
    seq_len: int,
    global_batch_size: int,
    vocab: int | None = None,
) -> ModelSpec:
    layers = []
    if vocab:
        layers.append(embedding("embeddings", hidden, seq_len, vocab))
    layers.extend(transformer_block(f"block{i}", hidden, seq_len) for i in range(num_layers))
    return ModelSpec(name, tuple(layers), global_batch_size)


def bert_large(global_batch_size: int = 16) -> ModelSpec:
    return transformer("bert-large", 24, 1024, 512, global_batch_size, vocab=30522)


def bert_exlarge(global_batch_size: int = 16) -> ModelSpec:
    """48 transformer blocks, no embedding layer so every pp in {1..16} divides evenly."""
    return transformer("bert-exlarge", 48, 1024, 512, global_batch_size)
