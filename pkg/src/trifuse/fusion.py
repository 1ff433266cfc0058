"""Fusion of the three feature channels into one vector per sample.

The channels are always ordered text, image, imgtext. The default
strategy runs one self-attention block over text and two cross-attention
blocks that read image and imgtext through text queries, pushes each
branch through a small MLP, mean-pools over the text positions, and
concatenates. The alternatives (early, late, hybrid, tensor outer
product, plain concatenation) exist for comparison runs and ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, multi_head
from .detector import DetectorParams, classify
from .tensor import ShapeError, Tensor, concat, glorot_uniform, linear, relu

__all__ = [
    "CHANNELS",
    "STRATEGIES",
    "FusionConfig",
    "FusionBudgetError",
    "ModalityFeatures",
    "ProjectionParams",
    "MlpParams",
    "FusedVector",
    "mean_pool",
    "project_inputs",
    "tri_transformer_fuse",
    "early_fuse",
    "tensor_fuse",
    "late_fuse_predict",
    "hybrid_fuse_predict",
]

CHANNELS = ("text", "image", "imgtext")

STRATEGIES = ("tri_transformer", "early", "late", "hybrid", "tensor", "concat_only")

DEFAULT_TENSOR_BUDGET = 64 ** 3


class FusionBudgetError(ValueError):
    """The tensor-product feature width would exceed the configured budget."""


@dataclass(frozen=True)
class FusionConfig:
    """Shape of the fusion stage, shared by training and the CLI."""

    strategy: str = "tri_transformer"
    d_model: int = 16
    d_f: int = 16
    n_heads: int = 2
    channel_mask: tuple[bool, bool, bool] = (True, True, True)
    pooling: str = "mean"
    tensor_budget: int = DEFAULT_TENSOR_BUDGET

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.pooling != "mean":
            raise ValueError(f"unsupported pooling {self.pooling!r}; only 'mean' is implemented")
        mask = tuple(bool(m) for m in self.channel_mask)
        if len(mask) != 3:
            raise ValueError("channel_mask needs exactly three entries (text, image, imgtext)")
        if not any(mask):
            raise ValueError("channel_mask disables every channel")
        object.__setattr__(self, "channel_mask", mask)
        for name in ("d_model", "d_f", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by {self.n_heads} heads")
        if self.strategy == "tensor":
            width = (self.d_f + 1) ** 3
            if width > self.tensor_budget:
                raise FusionBudgetError(
                    f"tensor fusion width (d_f+1)^3 = {width} exceeds the budget of {self.tensor_budget}"
                )

    def fused_width(self) -> int:
        if self.strategy == "tri_transformer":
            return 3 * self.d_f
        if self.strategy == "tensor":
            return (self.d_f + 1) ** 3
        return 3 * self.d_model


@dataclass
class ModalityFeatures:
    """Pre-extracted feature blocks for one sample, one 2-d array each."""

    text: np.ndarray
    image: np.ndarray
    imgtext: np.ndarray

    def __post_init__(self):
        for name in CHANNELS:
            block = np.asarray(getattr(self, name), dtype=np.float32)
            if block.ndim != 2:
                raise ShapeError(f"{name} features must be [length, width], got {block.shape}")
            setattr(self, name, block)

    def blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.text, self.image, self.imgtext


@dataclass
class ProjectionParams:
    """Per-channel affine maps from raw feature width to the model width."""

    weights: dict[str, Tensor]
    biases: dict[str, Tensor]

    @classmethod
    def create(cls, raw_widths: dict[str, int], d_model: int, rng: np.random.Generator, dtype=np.float32):
        weights, biases = {}, {}
        for name in CHANNELS:
            weights[name] = Tensor(glorot_uniform((raw_widths[name], d_model), rng, dtype), requires_grad=True)
            biases[name] = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)
        return cls(weights, biases)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in CHANNELS:
            out[f"{name}.w"] = self.weights[name]
            out[f"{name}.b"] = self.biases[name]
        return out


@dataclass
class MlpParams:
    """Two affine layers with a ReLU between them."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32) -> "MlpParams":
        return cls(
            w1=Tensor(glorot_uniform((d_in, d_out), rng, dtype), requires_grad=True),
            b1=Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
            w2=Tensor(glorot_uniform((d_out, d_out), rng, dtype), requires_grad=True),
            b2=Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def apply(self, x: Tensor) -> Tensor:
        return linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class FusedVector:
    """Fused features [batch, d_fused], plus per-branch pooled outputs
    when the strategy produces them."""

    values: Tensor
    per_branch: dict[str, Tensor] = field(default_factory=dict)


def mean_pool(x: Tensor) -> Tensor:
    """Average over the sequence axis: [..., L, d] -> [..., d]."""
    if x.data.ndim < 2:
        raise ShapeError(f"mean_pool: need [..., length, width], got {x.data.shape}")
    return x.mean(axis=-2)


def project_inputs(
    features: tuple[Tensor, Tensor, Tensor],
    proj: ProjectionParams,
    channel_mask: tuple[bool, bool, bool] = (True, True, True),
) -> tuple[Tensor, Tensor, Tensor]:
    """Map raw channels into the shared model width.

    Masked channels are zeroed after projection, which also kills their
    gradient, so downstream stages keep their shapes but carry no signal
    from a disabled channel.
    """
    projected = []
    for name, block, keep in zip(CHANNELS, features, channel_mask):
        out = linear(block, proj.weights[name], proj.biases[name])
        if not keep:
            out = out * 0.0
        projected.append(out)
    return tuple(projected)


def tri_transformer_fuse(
    text: Tensor,
    image: Tensor,
    imgtext: Tensor,
    attn: dict[str, AttentionParams],
    mlps: dict[str, MlpParams],
) -> FusedVector:
    """Attention branches, branch MLPs, mean pooling, concatenation.

    All three branches use text queries, so each branch output has the
    text sequence length regardless of the image or imgtext lengths. The
    fused vector is [batch, 3 * d_f] in text, image, imgtext order.
    """
    branches = {
        "text": multi_head(text, text, attn["text"]),
        "image": multi_head(text, image, attn["image"]),
        "imgtext": multi_head(text, imgtext, attn["imgtext"]),
    }
    pooled = {name: mean_pool(mlps[name].apply(branch)) for name, branch in branches.items()}
    fused = concat([pooled[name] for name in CHANNELS], axis=-1)
    return FusedVector(values=fused, per_branch=pooled)


def early_fuse(text: Tensor, image: Tensor, imgtext: Tensor) -> FusedVector:
    """Pool each projected channel and concatenate: [batch, 3 * d_model].

    This is also the fusion-off path; with no attention stage the
    channels meet the detector directly.
    """
    pooled = {"text": mean_pool(text), "image": mean_pool(image), "imgtext": mean_pool(imgtext)}
    fused = concat([pooled[name] for name in CHANNELS], axis=-1)
    return FusedVector(values=fused, per_branch=pooled)


def _append_one(x: Tensor) -> Tensor:
    ones = Tensor(np.ones(x.data.shape[:-1] + (1,), dtype=x.data.dtype))
    return concat([x, ones], axis=-1)


def tensor_fuse(
    text: Tensor,
    image: Tensor,
    imgtext: Tensor,
    reducers: dict[str, tuple[Tensor, Tensor]],
    budget: int = DEFAULT_TENSOR_BUDGET,
) -> FusedVector:
    """Trilinear outer product of reduced, 1-appended channel vectors.

    Each pooled channel is reduced to d_f, a constant 1 is appended, and
    the flattened outer product of the three (d_f+1)-vectors is the fused
    vector. The appended ones make every lower-order interaction (pairs,
    singles, constant) a slice of the product.
    """
    pooled = {"text": mean_pool(text), "image": mean_pool(image), "imgtext": mean_pool(imgtext)}
    reduced = {}
    for name in CHANNELS:
        w, b = reducers[name]
        reduced[name] = _append_one(linear(pooled[name], w, b))
    width = reduced["text"].data.shape[-1]
    if width ** 3 > budget:
        raise FusionBudgetError(f"tensor fusion width {width ** 3} exceeds the budget of {budget}")

    lead = reduced["text"].data.shape[:-1]
    a = reduced["text"].reshape(lead + (width, 1, 1))
    b = reduced["image"].reshape(lead + (1, width, 1))
    c = reduced["imgtext"].reshape(lead + (1, 1, width))
    product = a * b * c
    fused = product.reshape(lead + (width ** 3,))
    return FusedVector(values=fused, per_branch=pooled)


def late_fuse_predict(
    text: Tensor,
    image: Tensor,
    imgtext: Tensor,
    heads: dict[str, DetectorParams],
    training: bool,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Average of three per-channel detector probabilities.

    Returns the averaged prediction and the per-channel probabilities so
    training can drive each head with its own loss.
    """
    pooled = {"text": mean_pool(text), "image": mean_pool(image), "imgtext": mean_pool(imgtext)}
    probs = {name: classify(pooled[name], heads[name], training) for name in CHANNELS}
    combined = (probs["text"] + probs["image"] + probs["imgtext"]) * (1.0 / 3.0)
    return combined, probs


def hybrid_fuse_predict(
    text: Tensor,
    image: Tensor,
    imgtext: Tensor,
    early_head: DetectorParams,
    late_heads: dict[str, DetectorParams],
    training: bool,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Equal-weight blend of the early-fusion and late-fusion predictions."""
    early_prob = classify(early_fuse(text, image, imgtext).values, early_head, training)
    late_prob, probs = late_fuse_predict(text, image, imgtext, late_heads, training)
    combined = (early_prob + late_prob) * 0.5
    parts = dict(probs)
    parts["early"] = early_prob
    return combined, parts
