"""Central-difference verification of every differentiable operation.

Each check builds a small double-precision instance of one operation,
reduces its output to a scalar with a fixed random weighting, and
compares analytic gradients against (f(x+h) - f(x-h)) / 2h for every
input element. The fault hook scales one op's analytic gradients so the
harness can be shown to catch a planted error without touching kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionParams, multi_head, scaled_attention
from .detector import DetectorParams, bce_loss, classify
from .fusion import FusionConfig, MlpParams, tri_transformer_fuse
from .model import Model, ModelConfig, ModelDims
from .tensor import BatchNormState, Tensor, backward, batch_norm, linear, matmul, softmax_rows, zero_grad

__all__ = ["GradCheckResult", "run_gradcheck", "DEFAULT_STEP", "DEFAULT_TOLERANCE", "CHECKED_OPS"]

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4

# Relative error uses a floored denominator so finite-difference noise on
# near-zero gradients does not read as failure.
_DENOMINATOR_FLOOR = 1e-3


@dataclass(frozen=True)
class GradCheckResult:
    op: str
    max_rel_error: float
    passed: bool


def _numeric_grad(forward: Callable[[], Tensor], tensor: Tensor, step: float) -> np.ndarray:
    flat = tensor.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        f_plus = forward().item()
        flat[i] = saved - step
        f_minus = forward().item()
        flat[i] = saved
        out[i] = (f_plus - f_minus) / (2.0 * step)
    return out.reshape(tensor.data.shape)


def _max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _DENOMINATOR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weight(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _check_matmul(rng):
    a = _param(rng, 3, 4)
    b = _param(rng, 4, 2)
    r = _weight(rng, (3, 2))

    def forward():
        return (matmul(a, b) * Tensor(r)).sum()

    return {"a": a, "b": b}, forward


def _check_linear(rng):
    x = _param(rng, 3, 5)
    w = _param(rng, 5, 4)
    b = _param(rng, 4)
    r = _weight(rng, (3, 4))

    def forward():
        return (linear(x, w, b) * Tensor(r)).sum()

    return {"x": x, "w": w, "b": b}, forward


def _check_batchnorm(rng):
    x = _param(rng, 6, 4)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    beta = _param(rng, 4)
    state = BatchNormState.initial(4, np.float64)
    r = _weight(rng, (6, 4))

    def forward():
        return (batch_norm(x, gamma, beta, state, training=True) * Tensor(r)).sum()

    return {"x": x, "gamma": gamma, "beta": beta}, forward


def _check_softmax(rng):
    x = _param(rng, 3, 7)
    r = _weight(rng, (3, 7))

    def forward():
        return (softmax_rows(x) * Tensor(r)).sum()

    return {"x": x}, forward


def _check_scaled_attention(rng):
    q = _param(rng, 2, 3, 4)
    k = _param(rng, 2, 5, 4)
    v = _param(rng, 2, 5, 4)
    r = _weight(rng, (2, 3, 4))

    def forward():
        return (scaled_attention(q, k, v) * Tensor(r)).sum()

    return {"q": q, "k": k, "v": v}, forward


def _check_multi_head(rng):
    query = _param(rng, 2, 3, 6)
    kv = _param(rng, 2, 4, 6)
    params = AttentionParams.create(6, 2, rng, np.float64)
    r = _weight(rng, (2, 3, 6))

    def forward():
        return (multi_head(query, kv, params) * Tensor(r)).sum()

    checked = {"query": query, "kv": kv}
    checked.update(params.parameters())
    return checked, forward


def _check_tri_fuse(rng):
    channels = {name: _param(rng, 2, 2, 4) for name in ("text", "image", "imgtext")}
    attn = {name: AttentionParams.create(4, 1, rng, np.float64) for name in channels}
    mlps = {name: MlpParams.create(4, 3, rng, np.float64) for name in channels}
    r = _weight(rng, (2, 9))

    def forward():
        fused = tri_transformer_fuse(channels["text"], channels["image"], channels["imgtext"], attn, mlps)
        return (fused.values * Tensor(r)).sum()

    checked = dict(channels)
    for name in channels:
        for key, p in attn[name].parameters().items():
            checked[f"attn.{name}.{key}"] = p
        for key, p in mlps[name].parameters().items():
            checked[f"mlp.{name}.{key}"] = p
    return checked, forward


def _check_classify(rng):
    x = _param(rng, 4, 6)
    head = DetectorParams.create(6, rng, hidden1=8, hidden2=4, dtype=np.float64)
    r = _weight(rng, 4)

    def forward():
        return (classify(x, head, training=True) * Tensor(r)).sum()

    checked = {"x": x}
    checked.update(head.parameters())
    return checked, forward


def _check_bce(rng):
    preds = Tensor(rng.uniform(0.15, 0.85, size=5), requires_grad=True)
    labels = rng.integers(0, 2, size=5)

    def forward():
        return bce_loss(preds, labels)

    return {"preds": preds}, forward


def _check_full_model(rng):
    config = ModelConfig(
        fusion=FusionConfig(strategy="tri_transformer", d_model=4, d_f=3, n_heads=1),
        dims=ModelDims(2, 5, 3, 5, 2, 5),
        hidden1=8,
        hidden2=4,
        precision="double",
    )
    model = Model(config, seed=int(rng.integers(0, 2 ** 31)))
    feats = (
        rng.standard_normal((3, 2, 5)),
        rng.standard_normal((3, 3, 5)),
        rng.standard_normal((3, 2, 5)),
    )
    labels = np.array([1, 0, 1])

    def forward():
        loss, _ = model.training_loss(feats, labels)
        return loss

    return dict(model.parameters()), forward


_CHECKS: tuple[tuple[str, Callable], ...] = (
    ("matmul", _check_matmul),
    ("linear", _check_linear),
    ("batchnorm", _check_batchnorm),
    ("softmax", _check_softmax),
    ("scaled_attention", _check_scaled_attention),
    ("multi_head", _check_multi_head),
    ("tri_transformer_fuse", _check_tri_fuse),
    ("classify", _check_classify),
    ("bce_loss", _check_bce),
    ("full_model", _check_full_model),
)

CHECKED_OPS = tuple(name for name, _ in _CHECKS)


def run_gradcheck(
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    fault_op: str | None = None,
) -> list[GradCheckResult]:
    """Check every operation; ``fault_op`` plants a gradient error in one."""
    if fault_op is not None and fault_op not in CHECKED_OPS:
        raise ValueError(f"unknown op {fault_op!r}; checked ops are {', '.join(CHECKED_OPS)}")
    results = []
    for index, (name, build) in enumerate(_CHECKS):
        rng = np.random.default_rng([seed, index])
        tensors, forward = build(rng)
        zero_grad(tensors)
        backward(forward())
        worst = 0.0
        for tensor in tensors.values():
            analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            if name == fault_op:
                analytic = analytic * 1.02
            numeric = _numeric_grad(forward, tensor, step)
            worst = max(worst, _max_rel_error(analytic, numeric))
        results.append(GradCheckResult(name, worst, worst < tolerance))
    return results
