"""Tri-modal fake news classification over pre-extracted features.

The pipeline: three feature channels per sample (text, image, and an
image-text pairing signal) are projected to a shared width, fused, and
classified by a small detector head with a logistic output. The default
fusion runs one self-attention block over text and two cross-attention
blocks that read the other channels through text queries; alternative
strategies (early, late, hybrid, tensor outer product, plain
concatenation) exist for comparisons and ablations.

Layout:

- ``tensor``: numpy-backed tensors with tape-based reverse mode
- ``attention``: scaled dot-product and multi-head attention
- ``fusion``: channel projection and the fusion strategies
- ``detector``: the classification head and its loss
- ``model``: parameter registry, forward paths, model files
- ``data``: the TTBF feature file format, synthetic data, batching
- ``train``: Adam, the training loop, metrics, sweeps
- ``gradcheck``: finite-difference verification of every operation
- ``cli``: the ``trifuse`` command
"""

from .attention import AttentionParams, multi_head, scaled_attention
from .data import (
    DatasetFormatError,
    DatasetHeader,
    FeatureRecord,
    batches,
    read_dataset,
    split,
    stack_features,
    synth_generate,
    write_dataset,
)
from .detector import DetectorParams, bce_loss, classify
from .fusion import (
    CHANNELS,
    STRATEGIES,
    FusedVector,
    FusionConfig,
    ModalityFeatures,
    early_fuse,
    late_fuse_predict,
    tensor_fuse,
    tri_transformer_fuse,
)
from .gradcheck import run_gradcheck
from .model import Model, ModelConfig, ModelDims, load_model, save_model
from .tensor import Precision, Tensor, backward, zero_grad
from .train import (
    Adam,
    Metrics,
    TrainConfig,
    compare_fusions,
    evaluate,
    run_ablation,
    train,
)

__version__ = "0.1.0"
