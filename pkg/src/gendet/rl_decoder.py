"""Region-language decoder: joint refinement of object queries and text slots.

Each layer performs four steps: (1) a region-aware update of the queries
(self-attention, cross-attention over the image features, FFN_r); (2) per
query, the refined query vector is prepended to that query's text slots;
(3) the joint (1 + K)-token sequence goes through self-attention — reusing
step 1's self-attention parameters — and a separate FFN_c; (4) the query
slot is dropped, leaving the updated text slots. Only the step-1 queries
propagate to the next layer, so text never feeds back into the query path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import (
    AttentionParams,
    ConfigError,
    DiffArray,
    FeedForwardParams,
    LayerNormParams,
    attn_sublayer,
    ffn_sublayer,
)


@dataclass
class DecoderLayerParams:
    """One decoder layer. ``self_attn`` is deliberately a single parameter
    set serving both the query self-attention and the query/text fusion;
    ``ffn_r`` and ``ffn_c`` are distinct storage."""

    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn_r: FeedForwardParams
    ffn_c: FeedForwardParams
    ln_query_self: LayerNormParams
    ln_query_cross: LayerNormParams
    ln_query_ffn: LayerNormParams
    ln_text_attn: LayerNormParams
    ln_text_ffn: LayerNormParams

    @staticmethod
    def create(rng, d, hidden, dtype=np.float32):
        # every residual branch starts as the identity (zeroed output
        # projections) so query identity survives the stack at init
        return DecoderLayerParams(
            self_attn=AttentionParams.create(rng, d, dtype=dtype, zero_out=True),
            cross_attn=AttentionParams.create(
                rng, d, dtype=dtype, zero_out=True, identity_qk=True
            ),
            ffn_r=FeedForwardParams.create(rng, d, hidden, dtype=dtype, zero_out=True),
            ffn_c=FeedForwardParams.create(rng, d, hidden, dtype=dtype, zero_out=True),
            ln_query_self=LayerNormParams.create(d, dtype=dtype),
            ln_query_cross=LayerNormParams.create(d, dtype=dtype),
            ln_query_ffn=LayerNormParams.create(d, dtype=dtype),
            ln_text_attn=LayerNormParams.create(d, dtype=dtype),
            ln_text_ffn=LayerNormParams.create(d, dtype=dtype),
        )


def init_text_state(slot_embeddings, num_queries, batch=None):
    """Tile the K learned slot embeddings across all queries: (N, K, d),
    or (batch, N, K, d) when ``batch`` is given."""
    k, d = slot_embeddings.data.shape
    if batch is None:
        return nc.broadcast_to(nc.reshape(slot_embeddings, (1, k, d)), (num_queries, k, d))
    return nc.broadcast_to(
        nc.reshape(slot_embeddings, (1, 1, k, d)), (batch, num_queries, k, d)
    )


def decoder_layer(queries, text, features, params, heads, query_pos=None):
    """One joint decoding step.

    queries: (..., N, d), text: (..., N, K, d), features: (..., patches, d).
    ``query_pos`` is an optional fixed per-query positional table added to
    the attention queries/keys (never the values) at this layer; without a
    per-layer identity signal the query set collapses under repeated
    attention averaging. Returns the refined queries and text, same shapes.
    """
    n, d = queries.data.shape[-2:]
    if text.data.shape[:-2] != queries.data.shape[:-1] or text.data.shape[-1] != d:
        raise nc.DimensionError(
            f"text state {text.data.shape} does not match queries {queries.data.shape}"
        )
    anchored = queries if query_pos is None else queries + query_pos
    x = params.ln_query_self(
        queries + params.self_attn(anchored, anchored, heads, xv=queries)
    )
    x_anchored = x if query_pos is None else x + query_pos
    x = params.ln_query_cross(x + params.cross_attn(x_anchored, features, heads))
    refined = ffn_sublayer(params.ffn_r, params.ln_query_ffn, x)

    lifted = nc.reshape(refined, refined.data.shape[:-1] + (1, d))
    joint = nc.concat([lifted, text], axis=-2)  # (..., N, 1+K, d)
    joint = attn_sublayer(params.self_attn, params.ln_text_attn, joint, joint, heads)
    joint = ffn_sublayer(params.ffn_c, params.ln_text_ffn, joint)
    return refined, joint[..., 1:, :]


def run_decoder(queries, text, features, layers, heads, query_pos=None):
    """Apply the decoder layers in sequence; at least one layer required."""
    if len(layers) < 1:
        raise ConfigError("decoder needs at least one layer")
    for params in layers:
        queries, text = decoder_layer(
            queries, text, features, params, heads, query_pos=query_pos
        )
    return queries, text
