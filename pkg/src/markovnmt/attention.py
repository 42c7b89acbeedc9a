"""Attention masks and multi-head attention.

The decoder's self-attention comes in two orthogonal choices:

* mask: full causal history, or a band of the last ``k`` positions
  (including the current one), so position i sees j in
  [max(0, i-k+1), i];
* key/value source: the previous layer's hidden states (contextual), or
  the layer-0 static embeddings (so a key row carries information about
  exactly one token, never a mixture smuggled in by earlier layers).

Banded masking alone does not bound the conditioning context in a deep
decoder, because hidden states mix their own windows layer over layer;
banded masking over static keys/values does. Both pieces live here so the
model code can combine them per variant.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .tensor import (
    Tensor,
    concat_last,
    matmul,
    scale,
    slice_last,
    softmax_masked,
    transpose_last,
)

MASK_KINDS = ("none", "causal", "banded")


def build_mask(kind: str, n: int, k: int | None = None) -> np.ndarray:
    """Build an (n, n) boolean allow-matrix for self-attention.

    kind "none" allows everything (encoder), "causal" allows j <= i,
    "banded" allows max(0, i-k+1) <= j <= i. For k >= n a band is the
    same matrix as causal, row for row.
    """
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}")
    if n < 1:
        raise ValueError("mask size must be >= 1")
    if kind == "banded":
        if k is None or k < 1:
            raise ValueError("banded mask needs k >= 1")
    elif k is not None:
        raise ValueError(f"mask kind {kind!r} does not take k")
    if kind == "none":
        return np.ones((n, n), dtype=bool)
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    if kind == "causal":
        return j <= i
    return (j <= i) & (j >= i - k + 1)


def masked_score_count(allow: np.ndarray) -> int:
    """Number of allowed (query, key) score positions in a mask."""
    return int(np.asarray(allow, dtype=bool).sum())


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention block."""

    w_q: Tensor  # (d_model, d_model)
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.heads


def multi_head_attention(
    query_src: Tensor,
    kv_src: Tensor,
    params: AttentionParams,
    allow: np.ndarray | None,
    counts: dict | None = None,
) -> Tensor:
    """Scaled dot-product attention with ``heads`` parallel heads.

    ``query_src`` is (n, d) or (B, n, d); ``kv_src`` is (m, d) or (B, m, d)
    with the same rank. ``allow`` is a boolean array broadcastable to the
    (.., n, m) score shape, or None for all-allowed. When ``counts`` is
    given, counts["self_attn_scores"] accumulates the number of allowed
    score positions actually computed (summed over heads).
    """
    if query_src.data.ndim != kv_src.data.ndim:
        raise ValueError("query and key/value sources must have equal rank")
    d = params.w_q.shape[0]
    dh = params.head_dim()
    if dh * params.heads != d:
        raise ValueError("d_model not divisible by head count")

    q = matmul(query_src, params.w_q)
    k = matmul(kv_src, params.w_k)
    v = matmul(kv_src, params.w_v)

    if counts is not None:
        n, m = q.shape[-2], k.shape[-2]
        batch = q.shape[0] if q.data.ndim == 3 else 1
        if allow is None:
            allowed = batch * n * m
        else:
            shape = (batch, n, m) if q.data.ndim == 3 else (n, m)
            allowed = int(np.broadcast_to(np.asarray(allow, bool), shape).sum())
        counts["self_attn_scores"] = counts.get("self_attn_scores", 0) + allowed * params.heads

    head_outs = []
    inv = 1.0 / sqrt(dh)
    for h in range(params.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_last(q, lo, hi)
        kh = slice_last(k, lo, hi)
        vh = slice_last(v, lo, hi)
        scores = scale(matmul(qh, transpose_last(kh)), inv)
        weights = softmax_masked(scores, allow)
        head_outs.append(matmul(weights, vh))
    ctx = concat_last(head_outs)
    return matmul(ctx, params.w_o)


def transparent_self_attention(
    hidden: Tensor,
    static_emb: Tensor,
    params: AttentionParams,
    allow: np.ndarray | None,
    counts: dict | None = None,
) -> Tensor:
    """Self-attention that reads queries from ``hidden`` but keys AND values
    from the layer-0 static embeddings.

    Shares the exact code path with :func:`multi_head_attention`, so when
    ``hidden is static_emb`` the two are bit-identical.
    """
    return multi_head_attention(hidden, static_emb, params, allow, counts)
