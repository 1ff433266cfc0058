"""Classifier assembly: parameters, forward paths, and model files.

A model is a named registry of parameter tensors plus batch-norm state,
built deterministically from a seed. The fusion strategy decides which
blocks exist. Model files are written with a fixed binary layout so the
same model always serializes to the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionParams
from .detector import DetectorParams, bce_loss, classify
from .fusion import (
    CHANNELS,
    FusedVector,
    FusionConfig,
    MlpParams,
    ProjectionParams,
    early_fuse,
    hybrid_fuse_predict,
    late_fuse_predict,
    project_inputs,
    tensor_fuse,
    tri_transformer_fuse,
)
from .tensor import BatchNormState, Precision, Tensor, glorot_uniform

__all__ = ["ModelDims", "ModelConfig", "Model", "ModelFormatError", "save_model", "load_model"]

MODEL_MAGIC = b"TTBM"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """A model file is malformed or inconsistent with its header."""


@dataclass(frozen=True)
class ModelDims:
    """Sequence lengths and raw feature widths of the three channels."""

    l_text: int
    d_text: int
    l_image: int
    d_image: int
    l_imgtext: int
    d_imgtext: int

    def raw_widths(self) -> dict[str, int]:
        return {"text": self.d_text, "image": self.d_image, "imgtext": self.d_imgtext}


@dataclass(frozen=True)
class ModelConfig:
    fusion: FusionConfig
    dims: ModelDims
    hidden1: int = 64
    hidden2: int = 32
    precision: str = "single"

    def to_json_dict(self) -> dict:
        out = asdict(self)
        out["fusion"]["channel_mask"] = list(self.fusion.channel_mask)
        return out

    @classmethod
    def from_json_dict(cls, raw: dict) -> "ModelConfig":
        fusion = dict(raw["fusion"])
        fusion["channel_mask"] = tuple(fusion["channel_mask"])
        return cls(
            fusion=FusionConfig(**fusion),
            dims=ModelDims(**raw["dims"]),
            hidden1=raw["hidden1"],
            hidden2=raw["hidden2"],
            precision=raw["precision"],
        )


class Model:
    """One classifier: projections, a fusion stage, and detector heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.dtype = Precision.from_name(config.precision).dtype
        rng = np.random.default_rng(seed)

        self._params: dict[str, Tensor] = {}
        self._states: dict[str, BatchNormState] = {}
        self.proj = ProjectionParams.create(config.dims.raw_widths(), config.fusion.d_model, rng, self.dtype)
        self._register("proj", self.proj.parameters())

        strategy = config.fusion.strategy
        self.attn: dict[str, AttentionParams] = {}
        self.mlps: dict[str, MlpParams] = {}
        self.reducers: dict[str, tuple[Tensor, Tensor]] = {}
        self.heads: dict[str, DetectorParams] = {}

        if strategy == "tri_transformer":
            for name in CHANNELS:
                self.attn[name] = AttentionParams.create(
                    config.fusion.d_model, config.fusion.n_heads, rng, self.dtype
                )
                self._register(f"attn.{name}", self.attn[name].parameters())
            for name in CHANNELS:
                self.mlps[name] = MlpParams.create(config.fusion.d_model, config.fusion.d_f, rng, self.dtype)
                self._register(f"mlp.{name}", self.mlps[name].parameters())
        elif strategy == "tensor":
            for name in CHANNELS:
                w = Tensor(glorot_uniform((config.fusion.d_model, config.fusion.d_f), rng, self.dtype),
                           requires_grad=True)
                b = Tensor(np.zeros(config.fusion.d_f, dtype=self.dtype), requires_grad=True)
                self.reducers[name] = (w, b)
                self._register(f"reduce.{name}", {"w": w, "b": b})

        if strategy == "late":
            head_names = list(CHANNELS)
        elif strategy == "hybrid":
            head_names = ["early", *CHANNELS]
        else:
            head_names = ["main"]
        for name in head_names:
            width = config.fusion.d_model if name in CHANNELS else config.fusion.fused_width()
            head = DetectorParams.create(width, rng, config.hidden1, config.hidden2, self.dtype)
            self.heads[name] = head
            self._register(f"head.{name}", head.parameters())
            for state_name, state in head.states().items():
                self._states[f"head.{name}.{state_name}"] = state

    def _register(self, prefix: str, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            self._params[f"{prefix}.{name}"] = p

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def states(self) -> dict[str, BatchNormState]:
        return self._states

    def parameter_count(self, prefix: str = "") -> int:
        return sum(p.data.size for name, p in self._params.items() if name.startswith(prefix))

    def attention_parameter_count(self) -> int:
        return self.parameter_count("attn.")

    def _projected(self, feats) -> tuple[Tensor, Tensor, Tensor]:
        blocks = tuple(Tensor(np.asarray(b, dtype=self.dtype)) for b in feats)
        return project_inputs(blocks, self.proj, self.config.fusion.channel_mask)

    def _fuse(self, feats) -> FusedVector:
        t, i, m = self._projected(feats)
        strategy = self.config.fusion.strategy
        if strategy == "tri_transformer":
            return tri_transformer_fuse(t, i, m, self.attn, self.mlps)
        if strategy == "tensor":
            return tensor_fuse(t, i, m, self.reducers, self.config.fusion.tensor_budget)
        # early, concat_only, and the shared trunk for late/hybrid exports
        return early_fuse(t, i, m)

    def _predict_components(self, feats, training: bool) -> tuple[Tensor, dict[str, Tensor]]:
        strategy = self.config.fusion.strategy
        t, i, m = self._projected(feats)
        if strategy == "late":
            combined, probs = late_fuse_predict(t, i, m, self.heads, training)
            return combined, probs
        if strategy == "hybrid":
            late_heads = {name: self.heads[name] for name in CHANNELS}
            return hybrid_fuse_predict(t, i, m, self.heads["early"], late_heads, training)
        if strategy == "tri_transformer":
            fused = tri_transformer_fuse(t, i, m, self.attn, self.mlps)
        elif strategy == "tensor":
            fused = tensor_fuse(t, i, m, self.reducers, self.config.fusion.tensor_budget)
        else:
            fused = early_fuse(t, i, m)
        prob = classify(fused.values, self.heads["main"], training)
        return prob, {"main": prob}

    def predict_proba(self, feats, training: bool = False) -> Tensor:
        """Fake probability per sample; feats is a (text, image, imgtext)
        triple of [batch, length, width] arrays."""
        prob, _ = self._predict_components(feats, training)
        return prob

    def training_loss(self, feats, labels: np.ndarray) -> tuple[Tensor, Tensor]:
        """Strategy loss and the combined prediction, in train mode.

        Late fusion averages the per-channel head losses; hybrid gives
        the early head and the late trio equal weight, matching how the
        prediction is blended.
        """
        combined, parts = self._predict_components(feats, training=True)
        strategy = self.config.fusion.strategy
        if strategy == "late":
            losses = [bce_loss(parts[name], labels) for name in CHANNELS]
            loss = (losses[0] + losses[1] + losses[2]) * (1.0 / 3.0)
        elif strategy == "hybrid":
            late = [bce_loss(parts[name], labels) for name in CHANNELS]
            loss = bce_loss(parts["early"], labels) * 0.5 + (late[0] + late[1] + late[2]) * (0.5 / 3.0)
        else:
            loss = bce_loss(combined, labels)
        return loss, combined

    def fused_vector(self, feats) -> np.ndarray:
        """Fused features for export, eval mode.

        Late and hybrid keep no single fused vector, so they export the
        shared trunk: the pooled projected channels, concatenated.
        """
        return self._fuse(feats).values.data


def save_model(model: Model, path) -> None:
    """Write the model to ``path`` with a stable byte layout."""
    entries = []
    blob = bytearray()

    def put(name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": len(blob)})
        blob.extend(arr.tobytes())

    for name, p in model.parameters().items():
        put(name, p.data)
    for name, state in model.states().items():
        put(f"state:{name}:mean", state.mean)
        put(f"state:{name}:var", state.var)

    header = {
        "version": MODEL_VERSION,
        "config": model.config.to_json_dict(),
        "seed": model.seed,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = bytearray()
    payload.extend(MODEL_MAGIC)
    payload.extend(len(header_bytes).to_bytes(4, "little"))
    payload.extend(header_bytes)
    payload.extend(blob)

    from .data import atomic_write_bytes

    atomic_write_bytes(path, bytes(payload))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {raw[:4]!r}")
    header_len = int.from_bytes(raw[4:8], "little")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable model header: {exc}") from None
    if header.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {header.get('version')}")

    config = ModelConfig.from_json_dict(header["config"])
    model = Model(config, seed=header.get("seed", 0))
    blob = raw[8 + header_len:]

    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise ModelFormatError(f"model blob truncated at tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape).copy()

    params = model.parameters()
    expected = set(params)
    for name, state in model.states().items():
        expected.add(f"state:{name}:mean")
        expected.add(f"state:{name}:var")
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise ModelFormatError(f"model tensors do not match config (missing {missing}, extra {extra})")

    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise ModelFormatError(f"tensor {name!r} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].astype(p.data.dtype)
    for name, state in model.states().items():
        state.mean[...] = arrays[f"state:{name}:mean"]
        state.var[...] = arrays[f"state:{name}:var"]
    return model
