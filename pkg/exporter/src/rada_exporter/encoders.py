"""Image/text encoder backends.

``SwatchProjectionEncoder`` is a fully deterministic stand-in for a
pretrained dual encoder: images run through a fixed random projection of
their downsampled pixels, and a class prompt is encoded by rendering a
deterministic swatch image for the prompt text and projecting it the same
way. The two modalities are therefore aligned by construction (the same
role CLIP pretraining plays), which is what makes zero-shot evaluation of
exported files meaningful without network access or model weights.

``ClipEncoder`` wraps a locally available CLIP checkpoint when one exists.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

from .format import ExportError

_THUMB = 16  # images are pooled to 16x16 RGB before projection


def _name_rng(text: str) -> np.random.Generator:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))


def render_swatch(text: str, size: int = 32) -> Image.Image:
    """Deterministic image for a piece of text: base color plus rectangles."""
    rng = _name_rng(text)
    base = tuple(int(c) for c in rng.integers(0, 256, size=3))
    img = Image.new("RGB", (size, size), base)
    pixels = img.load()
    for _ in range(4):
        x0, y0 = rng.integers(0, size - 4, size=2)
        w, h = rng.integers(2, size // 2, size=2)
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        for x in range(int(x0), min(size, int(x0 + w))):
            for y in range(int(y0), min(size, int(y0 + h))):
                pixels[x, y] = color
    return img


class SwatchProjectionEncoder:
    """Fixed-projection encoder; float32 outputs like a real checkpoint."""

    name = "swatch-projection"

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise ExportError(f"embedding width must be >= 2, got {dim}")
        self.dim = dim
        rng = np.random.default_rng((seed, 0x5EED))
        self._projection = rng.standard_normal((_THUMB * _THUMB * 3, dim)).astype(np.float32)
        self._projection /= np.sqrt(_THUMB * _THUMB * 3)

    def encode_image(self, image: Image.Image) -> np.ndarray:
        thumb = image.convert("RGB").resize((_THUMB, _THUMB), Image.BILINEAR)
        flat = np.asarray(thumb, dtype=np.float32).reshape(-1) / 255.0
        flat = flat - flat.mean()
        vec = flat @ self._projection
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise ExportError("image projected to the zero vector")
        return (vec / norm).astype(np.float32)

    def encode_text(self, text: str) -> np.ndarray:
        return self.encode_image(render_swatch(text))


class ClipEncoder:
    """Locally cached CLIP checkpoint via transformers; no downloads."""

    name = "clip"

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ExportError(f"clip backend needs torch+transformers: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_name, local_files_only=True)
            self._processor = CLIPProcessor.from_pretrained(model_name, local_files_only=True)
        except Exception as exc:
            raise ExportError(f"could not load pretrained model {model_name!r}: {exc}") from exc
        self._model.eval()
        self.dim = int(self._model.config.projection_dim)

    def encode_image(self, image: Image.Image) -> np.ndarray:
        import torch

        inputs = self._processor(images=image.convert("RGB"), return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)[0]
        vec = feats.cpu().numpy().astype(np.float32)
        return vec / np.linalg.norm(vec)

    def encode_text(self, text: str) -> np.ndarray:
        import torch

        inputs = self._processor(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)[0]
        vec = feats.cpu().numpy().astype(np.float32)
        return vec / np.linalg.norm(vec)


def make_encoder(backend: str, dim: int = 64, model: str | None = None):
    if backend == "swatch-projection":
        return SwatchProjectionEncoder(dim=dim)
    if backend == "clip":
        return ClipEncoder(model or "openai/clip-vit-base-patch32")
    raise ExportError(f"unknown backend {backend!r}")
