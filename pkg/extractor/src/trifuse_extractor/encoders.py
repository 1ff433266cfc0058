"""Encoder backends for the extraction adapter.

Two families share one interface. The hashed backend is the default: a
parameter-free stand-in that derives every feature block from a content
hash, so it runs offline, needs no model weights, and preserves the
properties the adapter contract cares about (fixed shapes, bitwise
determinism, sensitivity to every input, and the zero-image / dummy-text
conventions). The pretrained backend wires the same interface to real
text, image, and joint encoders; it imports its heavyweight dependencies
lazily and only works where those model weights are available.

All backends return token-level final-layer features as [tokens, width]
float32 arrays; that choice is recorded in the output sidecar.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "ZERO_IMAGE",
    "DUMMY_TEXT",
    "AdapterDependencyError",
    "HashedEncoder",
    "PretrainedEncoder",
    "load_backend",
    "BACKENDS",
]


class _ZeroImage:
    """Sentinel for the all-zeros image fed to the joint encoder when no
    real image belongs in the pair. It is never read from disk."""

    def __repr__(self) -> str:
        return "ZERO_IMAGE"


ZERO_IMAGE = _ZeroImage()

# The fixed stand-in string used when the joint encoder needs a text
# input but the record contributes only an image. Recorded in the
# sidecar so downstream consumers can audit it.
DUMMY_TEXT = " "


class AdapterDependencyError(RuntimeError):
    """A backend's optional dependencies are not installed."""


def _digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
    return h.digest()


class HashedEncoder:
    """Deterministic offline encoder family keyed by content hashes.

    Each block is standard normal noise seeded by a domain-separated
    SHA-256 of the inputs, so equal inputs give bitwise equal blocks and
    any change to an input changes the whole block.
    """

    def __init__(self, native_tokens: int = 16, native_width: int = 32):
        if native_tokens < 1 or native_width < 1:
            raise ValueError("native encoder dims must be positive")
        self.native_tokens = native_tokens
        self.native_width = native_width

    @property
    def version(self) -> str:
        return f"hashed/1(tokens={self.native_tokens},width={self.native_width})"

    def _block(self, digest: bytes) -> np.ndarray:
        seed = np.frombuffer(digest, dtype="<u4")
        rng = np.random.default_rng(seed.tolist())
        return rng.standard_normal((self.native_tokens, self.native_width)).astype(np.float32)

    @staticmethod
    def _image_bytes(image) -> bytes:
        if image is ZERO_IMAGE:
            return b"\x00zero-image\x00"
        if not isinstance(image, bytes):
            raise TypeError(f"image must be raw bytes or ZERO_IMAGE, got {type(image).__name__}")
        return image

    def encode_text(self, text: str) -> np.ndarray:
        return self._block(_digest(b"text", text.encode("utf-8")))

    def encode_image(self, image: bytes) -> np.ndarray:
        return self._block(_digest(b"image", self._image_bytes(image)))

    def encode_multimodal(self, image, text: str) -> np.ndarray:
        return self._block(_digest(b"joint", self._image_bytes(image), text.encode("utf-8")))


class PretrainedEncoder:
    """Real encoder stack behind the same interface.

    Loads a text encoder, an image encoder, and a joint image-text
    encoder by checkpoint name and returns their final-layer token
    features. Requires torch, transformers, and Pillow plus downloaded
    (or locally cached) weights, so it is constructed lazily and is not
    exercised by the offline test suite.
    """

    def __init__(
        self,
        text_model: str = "bert-base-uncased",
        joint_model: str = "Salesforce/blip-image-captioning-base",
        image_size: int = 224,
    ):
        try:
            import torch
            from PIL import Image
            from transformers import AutoModel, AutoTokenizer, BlipForConditionalGeneration
        except ImportError as exc:
            raise AdapterDependencyError(
                "the pretrained backend needs torch, transformers, and Pillow; "
                "install them or use the default hashed backend"
            ) from exc

        self._torch = torch
        self._pil_image = Image
        self.image_size = image_size
        self.text_model_name = text_model
        self.joint_model_name = joint_model
        self._tokenizer = AutoTokenizer.from_pretrained(text_model)
        self._text_model = AutoModel.from_pretrained(text_model).eval()
        self._joint_model = BlipForConditionalGeneration.from_pretrained(joint_model).eval()

    @property
    def version(self) -> str:
        return f"pretrained/1(text={self.text_model_name},joint={self.joint_model_name})"

    def _zeros_image(self):
        return self._torch.zeros(1, 3, self.image_size, self.image_size)

    def _pixels(self, image) -> "object":
        if image is ZERO_IMAGE:
            return self._zeros_image()
        import io

        with self._pil_image.open(io.BytesIO(image)) as img:
            img = img.convert("RGB").resize((self.image_size, self.image_size))
            array = np.asarray(img, dtype=np.float32) / 255.0
        return self._torch.from_numpy(array).permute(2, 0, 1).unsqueeze(0)

    def encode_text(self, text: str) -> np.ndarray:
        with self._torch.no_grad():
            tokens = self._tokenizer(text, return_tensors="pt", truncation=True)
            out = self._text_model(**tokens).last_hidden_state
        return out[0].numpy().astype(np.float32)

    def encode_image(self, image: bytes) -> np.ndarray:
        with self._torch.no_grad():
            out = self._joint_model.vision_model(pixel_values=self._pixels(image)).last_hidden_state
        return out[0].numpy().astype(np.float32)

    def encode_multimodal(self, image, text: str) -> np.ndarray:
        with self._torch.no_grad():
            tokens = self._tokenizer(text, return_tensors="pt", truncation=True)
            vision = self._joint_model.vision_model(pixel_values=self._pixels(image)).last_hidden_state
            out = self._joint_model.text_decoder.bert(
                input_ids=tokens["input_ids"],
                attention_mask=tokens["attention_mask"],
                encoder_hidden_states=vision,
            ).last_hidden_state
        return out[0].numpy().astype(np.float32)


BACKENDS = ("hashed", "pretrained")


def load_backend(name: str, **kwargs):
    """Build a backend by name; the pretrained family imports lazily."""
    if name == "hashed":
        return HashedEncoder(**kwargs)
    if name == "pretrained":
        return PretrainedEncoder(**kwargs)
    raise ValueError(f"unknown backend {name!r}; choices are {', '.join(BACKENDS)}")
