"""Scaled dot-product attention and its multi-head wrapper.

Single attention layers, no residuals, no layer norm, no masking. The
text channel attends to itself; the image and image-text channels are
read through cross-attention with text queries, so every attention
output has the text sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat,
    glorot_uniform,
    matmul,
    narrow,
    softmax_rows,
    transpose_last,
)

__all__ = ["AttentionParams", "scaled_attention", "multi_head"]


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention block.

    Query and key projections share one width so their dot products are
    defined; the output projection maps concatenated head outputs back
    to the model width. There are no bias terms.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        if self.n_heads < 1:
            raise ShapeError(f"attention: n_heads must be positive, got {self.n_heads}")
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)):
            if w.data.ndim != 2:
                raise ShapeError(f"attention: {name} must be 2-d, got {w.data.shape}")
        if self.w_q.data.shape != self.w_k.data.shape:
            raise ShapeError(
                f"attention: query and key projections differ: {self.w_q.data.shape} vs {self.w_k.data.shape}"
            )
        if self.w_v.data.shape[0] != self.w_q.data.shape[0]:
            raise ShapeError(
                f"attention: value projection input {self.w_v.data.shape} does not match query {self.w_q.data.shape}"
            )
        if self.w_q.data.shape[1] % self.n_heads or self.w_v.data.shape[1] % self.n_heads:
            raise ShapeError(
                f"attention: projection widths {self.w_q.data.shape[1]}/{self.w_v.data.shape[1]} "
                f"not divisible by {self.n_heads} heads"
            )
        if self.w_o.data.shape[0] != self.w_v.data.shape[1]:
            raise ShapeError(
                f"attention: output projection {self.w_o.data.shape} does not match value width "
                f"{self.w_v.data.shape[1]}"
            )

    @property
    def d_model(self) -> int:
        return self.w_q.data.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.data.shape[1] // self.n_heads

    @property
    def d_value(self) -> int:
        return self.w_v.data.shape[1] // self.n_heads

    @classmethod
    def create(
        cls,
        d_model: int,
        n_heads: int,
        rng: np.random.Generator,
        dtype=np.float32,
        d_head: int | None = None,
    ) -> "AttentionParams":
        """Glorot-initialized block; head width defaults to d_model / n_heads."""
        if d_head is None:
            if d_model % n_heads:
                raise ShapeError(f"attention: d_model {d_model} not divisible by {n_heads} heads")
            d_head = d_model // n_heads
        inner = n_heads * d_head
        return cls(
            w_q=Tensor(glorot_uniform((d_model, inner), rng, dtype), requires_grad=True),
            w_k=Tensor(glorot_uniform((d_model, inner), rng, dtype), requires_grad=True),
            w_v=Tensor(glorot_uniform((d_model, inner), rng, dtype), requires_grad=True),
            w_o=Tensor(glorot_uniform((inner, d_model), rng, dtype), requires_grad=True),
            n_heads=n_heads,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    q is [..., L_q, d], k is [..., L_k, d], v is [..., L_k, d_v]; the
    output keeps the query length. Rows of the weight matrix sum to one.
    """
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(f"attention: query width {q.data.shape} differs from key width {k.data.shape}")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError(f"attention: key count {k.data.shape} differs from value count {v.data.shape}")
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    logits = matmul(q, transpose_last(k)) * scale
    weights = softmax_rows(logits)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def multi_head(query_src: Tensor, kv_src: Tensor, params: AttentionParams, return_weights: bool = False):
    """Project, attend per head, concatenate, and project back.

    ``query_src`` and ``kv_src`` are [..., L, d_model]; self-attention
    passes the same tensor for both, cross-attention reads another
    channel through text queries.
    """
    for name, t in (("query", query_src), ("key/value", kv_src)):
        if t.data.ndim < 2 or t.data.shape[-1] != params.d_model:
            raise ShapeError(
                f"attention: {name} input shape {t.data.shape} does not match model width {params.d_model}"
            )
    q_all = matmul(query_src, params.w_q)
    k_all = matmul(kv_src, params.w_k)
    v_all = matmul(kv_src, params.w_v)

    outputs = []
    weights = []
    for h in range(params.n_heads):
        q = narrow(q_all, -1, h * params.d_head, params.d_head)
        k = narrow(k_all, -1, h * params.d_head, params.d_head)
        v = narrow(v_all, -1, h * params.d_value, params.d_value)
        if return_weights:
            out, w = scaled_attention(q, k, v, return_weights=True)
            weights.append(w)
        else:
            out = scaled_attention(q, k, v)
        outputs.append(out)

    merged = outputs[0] if len(outputs) == 1 else concat(outputs, axis=-1)
    projected = matmul(merged, params.w_o)
    if return_weights:
        return projected, weights
    return projected
