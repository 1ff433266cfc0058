"""Binary classification head and its loss.

Three linear layers with batch norm and ReLU after the first two, then a
logistic output. Label 1 means fake, label 0 means real.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    BatchNormState,
    Tensor,
    batch_norm,
    clamp,
    glorot_uniform,
    linear,
    log,
    relu,
    sigmoid,
)

__all__ = ["DetectorParams", "classify", "bce_loss", "EPS"]

# Predictions are clamped to [EPS, 1 - EPS] before the log.
EPS = 1e-7


@dataclass
class DetectorParams:
    w1: Tensor
    b1: Tensor
    gamma1: Tensor
    beta1: Tensor
    bn1: BatchNormState
    w2: Tensor
    b2: Tensor
    gamma2: Tensor
    beta2: Tensor
    bn2: BatchNormState
    w3: Tensor
    b3: Tensor

    @classmethod
    def create(
        cls,
        d_in: int,
        rng: np.random.Generator,
        hidden1: int = 64,
        hidden2: int = 32,
        dtype=np.float32,
    ) -> "DetectorParams":
        def lin(fan_in, fan_out):
            w = Tensor(glorot_uniform((fan_in, fan_out), rng, dtype), requires_grad=True)
            b = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
            return w, b

        w1, b1 = lin(d_in, hidden1)
        w2, b2 = lin(hidden1, hidden2)
        w3, b3 = lin(hidden2, 1)
        ones = lambda n: Tensor(np.ones(n, dtype=dtype), requires_grad=True)
        zeros = lambda n: Tensor(np.zeros(n, dtype=dtype), requires_grad=True)
        return cls(
            w1=w1, b1=b1, gamma1=ones(hidden1), beta1=zeros(hidden1), bn1=BatchNormState.initial(hidden1, dtype),
            w2=w2, b2=b2, gamma2=ones(hidden2), beta2=zeros(hidden2), bn2=BatchNormState.initial(hidden2, dtype),
            w3=w3, b3=b3,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            "w1": self.w1, "b1": self.b1, "gamma1": self.gamma1, "beta1": self.beta1,
            "w2": self.w2, "b2": self.b2, "gamma2": self.gamma2, "beta2": self.beta2,
            "w3": self.w3, "b3": self.b3,
        }

    def states(self) -> dict[str, BatchNormState]:
        return {"bn1": self.bn1, "bn2": self.bn2}


def classify(fused: Tensor, params: DetectorParams, training: bool) -> Tensor:
    """Map fused vectors [batch, d] to fake probabilities [batch].

    Train mode uses batch statistics in the norm layers and therefore
    needs at least two rows; eval mode uses running statistics and
    treats every row independently.
    """
    h = relu(batch_norm(linear(fused, params.w1, params.b1), params.gamma1, params.beta1, params.bn1, training))
    h = relu(batch_norm(linear(h, params.w2, params.b2), params.gamma2, params.beta2, params.bn2, training))
    logits = linear(h, params.w3, params.b3)
    return sigmoid(logits).reshape(-1)


def bce_loss(preds: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 labels."""
    labels = np.asarray(labels)
    if labels.shape != preds.data.shape:
        raise ValueError(f"bce_loss: {preds.data.shape} predictions vs {labels.shape} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("bce_loss: labels must be 0 (real) or 1 (fake)")
    y = Tensor(labels.astype(preds.data.dtype))
    p = clamp(preds, EPS, 1.0 - EPS)
    term = y * log(p) + (1.0 - y) * log(1.0 - p)
    return -term.mean()
