"""Query-centric cognition.

Fuses the query vector into the audio-visual stream, derives temporal and
channel relevance gates from the fused context, filters the audio-visual
representation by their outer product, and injects the self-attended query
context back in through a residual sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from quag.layers import LinearLayer, MultiHeadAttention
from quag.tensor import (
    ShapeError,
    Tensor,
    concat_last,
    matmul,
    mean_axis,
    reshape,
    sigmoid,
)

__all__ = [
    "Qc2Params",
    "GatePair",
    "fuse_query_context",
    "compute_gates",
    "apply_filtration",
    "build_query_centric_repr",
]


class Qc2Params:
    """Fusion projection, the two gate linears, and the injection attention."""

    def __init__(self, fuse: LinearLayer, gate_temporal: LinearLayer,
                 gate_channel: LinearLayer, inject: MultiHeadAttention):
        if gate_temporal.in_dim != 1 or gate_temporal.out_dim != 1:
            raise ShapeError("temporal gate must map one scalar per frame to one scalar")
        self.fuse = fuse
        self.gate_temporal = gate_temporal
        self.gate_channel = gate_channel
        self.inject = inject

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, n_heads: int) -> "Qc2Params":
        return cls(
            LinearLayer.create(rng, 2 * dim, dim),
            LinearLayer.create(rng, 1, 1),
            LinearLayer.create(rng, dim, dim),
            MultiHeadAttention.create(rng, dim, n_heads),
        )

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.fuse.named_params(f"{prefix}.fuse")
        yield from self.gate_temporal.named_params(f"{prefix}.gate_temporal")
        yield from self.gate_channel.named_params(f"{prefix}.gate_channel")
        yield from self.inject.named_params(f"{prefix}.inject")


@dataclass
class GatePair:
    temporal: Tensor  # [N_v x 1]
    channel: Tensor   # [1 x D]
    combined: Tensor  # [N_v x D], outer broadcast product


def fuse_query_context(fused_av: Tensor, query: Tensor, params: Qc2Params) -> Tensor:
    """Tile the query over frames, concatenate channel-wise, project 2D -> D."""
    n_frames, dim = fused_av.shape
    if query.ndim != 1 or query.shape[0] != dim:
        raise ShapeError(
            f"query shape {query.shape} does not match stream channel dim {dim}"
        )
    tiled = matmul(Tensor(np.ones((n_frames, 1), dtype=np.float32)),
                   reshape(query, (1, dim)))
    return params.fuse(concat_last(fused_av, tiled))


def compute_gates(query_context: Tensor, params: Qc2Params) -> GatePair:
    """Per-frame and per-channel relevance gates from the fused context.

    The temporal gate squeezes channels to one scalar per frame and passes it
    through the 1x1 linear; the channel gate squeezes frames to one vector and
    passes it through the DxD linear. Both end in a sigmoid, so every entry of
    the combined outer product lies strictly inside (0, 1).
    """
    n_frames, dim = query_context.shape
    temporal_in = reshape(mean_axis(query_context, 1), (n_frames, 1))
    temporal = sigmoid(params.gate_temporal(temporal_in))
    channel_in = reshape(mean_axis(query_context, 0), (1, dim))
    channel = sigmoid(params.gate_channel(channel_in))
    return GatePair(temporal=temporal, channel=channel, combined=temporal * channel)


def apply_filtration(fused_av: Tensor, gates: GatePair) -> Tensor:
    """Scale the stream elementwise by the combined gate."""
    if gates.combined.shape != fused_av.shape:
        raise ShapeError(
            f"filtration gate shape {gates.combined.shape} != stream shape {fused_av.shape}"
        )
    return gates.combined * fused_av


def build_query_centric_repr(filtered_av: Tensor, query_context: Tensor,
                             params: Qc2Params) -> Tensor:
    """Residual sum of the filtered stream and the self-attended context."""
    if filtered_av.shape != query_context.shape:
        raise ShapeError(
            f"shape mismatch: {filtered_av.shape} vs {query_context.shape}"
        )
    return filtered_av + params.inject(query_context, query_context, query_context)
