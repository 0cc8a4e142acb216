"""Encoder interfaces, projection heads and the small CPU-scale toy encoders.

Any ``nn.Module`` honouring :class:`ImageEncoder` / :class:`TextEncoder` can
be registered with :func:`register_encoder` and built from a model spec;
large pretrained backbones plug in the same way.
"""

from __future__ import annotations

import re
import zlib
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import ShapeMismatch, ValidationError, ZeroVector
from .losses import Temperature

ZERO_NORM = 1e-12


class ImageEncoder(nn.Module):
    """Maps ``(B, 1, H, W)`` images in [0, 1] to a feature map and a pooled vector."""

    out_channels: int
    input_size: tuple[int, int] | None = None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def feature_hw(self, h: int, w: int) -> tuple[int, int]:
        raise NotImplementedError

    def feature_geometry(self) -> tuple[float, float] | None:
        """``(stride, offset)``: feature cell ``i`` is centred on input pixel
        ``offset + stride * i``.  ``None`` means unknown (plain resize is used)."""
        return None


class TextEncoder(nn.Module):
    """Maps a list of strings to ``(B, out_dim)``."""

    out_dim: int

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError


class ToyImageEncoder(ImageEncoder):
    """Three 3x3 stride-2 conv blocks with ReLU, then global pooling.

    ``pool`` is ``"avg"``, ``"max"`` or ``"avgmax"`` (both, concatenated).
    Inputs are multiplied by ``input_scale`` before the first convolution.
    """

    def __init__(self, widths=(8, 16, 32), in_channels: int = 1, pool: str = "avg", input_scale: float = 1.0):
        super().__init__()
        if pool not in ("avg", "max", "avgmax"):
            raise ValueError(f"unknown pool {pool!r}")
        self.widths = tuple(int(w) for w in widths)
        self.pool, self.input_scale = pool, float(input_scale)
        layers, c = [], in_channels
        for w in self.widths:
            layers += [nn.Conv2d(c, w, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            c = w
        self.body = nn.Sequential(*layers)
        self.channels = c
        self.out_channels = 2 * c if pool == "avgmax" else c

    def forward(self, x):
        fmap = self.body(x * self.input_scale)
        if self.pool == "avg":
            pooled = fmap.mean(dim=(2, 3))
        elif self.pool == "max":
            pooled = fmap.amax(dim=(2, 3))
        else:
            pooled = torch.cat([fmap.mean(dim=(2, 3)), fmap.amax(dim=(2, 3))], dim=1)
        return fmap, pooled

    def feature_hw(self, h, w):
        for _ in self.widths:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    def feature_geometry(self):
        # a 3x3, stride 2, pad 1 conv centres output o on input 2o
        return float(2 ** len(self.widths)), 0.0


_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class HashedBagOfWords(TextEncoder):
    """Token ids by CRC32 hashing into ``vocab_size`` buckets, then mean pooling.

    With ``ngram=2`` adjacent-word bigrams are added as extra tokens.
    """

    def __init__(self, vocab_size: int = 1024, dim: int = 64, ngram: int = 1):
        super().__init__()
        if ngram not in (1, 2):
            raise ValueError("ngram must be 1 or 2")
        self.vocab_size, self.out_dim, self.ngram = vocab_size, dim, ngram
        self.embedding = nn.EmbeddingBag(vocab_size, dim, mode="mean")

    def token_ids(self, text: str) -> list[int]:
        words = tokenize(text)
        if self.ngram == 2:
            words = words + [f"{a}_{b}" for a, b in zip(words, words[1:])]
        if not words:
            raise ValidationError(f"text has no tokens: {text!r}")
        return [zlib.crc32(w.encode()) % self.vocab_size for w in words]

    def forward(self, texts):
        ids = [self.token_ids(t) for t in texts]
        flat = torch.tensor([i for row in ids for i in row], dtype=torch.long)
        offsets = torch.tensor(np.cumsum([0] + [len(r) for r in ids[:-1]]), dtype=torch.long)
        return self.embedding(flat, offsets)


class ProjectionHead(nn.Module):
    """Linear map into the joint space followed by L2 normalization."""

    def __init__(self, in_dim: int, out_dim: int = 64, bias: bool = True):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim, bias=bias)

    def forward(self, v):
        out = self.linear(v)
        norm = out.norm(dim=-1, keepdim=True)
        if bool((norm < ZERO_NORM).any()):
            raise ZeroVector("projection has (near) zero norm")
        return out / norm


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack 2-D [0, 255] arrays into a ``(B, 1, H, W)`` tensor in [0, 1]."""
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return torch.as_tensor(arr / 255.0, dtype=dtype).unsqueeze(1)


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def encode_image(encoder: ImageEncoder, img) -> tuple[torch.Tensor, torch.Tensor]:
    """Feature map ``(C, h, w)`` and pooled vector of a single 2-D image."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D image, got shape {arr.shape}")
    if encoder.input_size is not None and tuple(arr.shape) != tuple(encoder.input_size):
        raise ShapeMismatch(f"encoder expects {encoder.input_size}, got {arr.shape}")
    fmap, pooled = encoder(images_to_tensor([arr], _dtype(encoder)))
    return fmap[0], pooled[0]


def encode_text(encoder: TextEncoder, text: str) -> torch.Tensor:
    if not text or not text.strip():
        raise ValidationError("text must be non-empty")
    return encoder([text])[0]


def project_normalize(head: ProjectionHead, v: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(v).all()):
        raise ValidationError("input vector is not finite")
    return head(v.unsqueeze(0))[0] if v.ndim == 1 else head(v)


_IMAGE_ENCODERS: dict[str, Callable[..., ImageEncoder]] = {"toy": ToyImageEncoder}
_TEXT_ENCODERS: dict[str, Callable[..., TextEncoder]] = {"hashed_bow": HashedBagOfWords}


def register_encoder(kind: str, name: str, factory: Callable[..., nn.Module]) -> None:
    """Make an encoder constructible from a model spec (``kind`` is 'image' or 'text')."""
    {"image": _IMAGE_ENCODERS, "text": _TEXT_ENCODERS}[kind][name] = factory


DEFAULT_MODEL_SPEC = {
    "image": {"type": "toy", "widths": [8, 16, 32], "pool": "avgmax", "input_scale": 4.0},
    "text": {"type": "hashed_bow", "vocab_size": 1024, "dim": 64, "ngram": 1},
    "embed_dim": 64,
    "tau_init": 0.07,
}


class DualEncoder(nn.Module):
    """Image/text encoders, their projection heads and the shared temperature."""

    def __init__(self, image_encoder: ImageEncoder, text_encoder: TextEncoder,
                 embed_dim: int = 64, tau_init: float = 0.07, spec: dict | None = None):
        super().__init__()
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.image_head = ProjectionHead(image_encoder.out_channels, embed_dim)
        self.text_head = ProjectionHead(text_encoder.out_dim, embed_dim)
        self.temperature = Temperature(tau_init)
        self.spec = spec

    @classmethod
    def from_spec(cls, spec: dict | None = None) -> "DualEncoder":
        spec = _merge(DEFAULT_MODEL_SPEC, spec or {})
        img_kw = dict(spec["image"])
        txt_kw = dict(spec["text"])
        image_encoder = _IMAGE_ENCODERS[img_kw.pop("type")](**img_kw)
        text_encoder = _TEXT_ENCODERS[txt_kw.pop("type")](**txt_kw)
        return cls(image_encoder, text_encoder, spec["embed_dim"], spec["tau_init"], spec=spec)

    @property
    def dtype(self) -> torch.dtype:
        return _dtype(self)

    def image_features(self, images) -> tuple[torch.Tensor, torch.Tensor]:
        x = images if isinstance(images, torch.Tensor) else images_to_tensor(images, self.dtype)
        return self.image_encoder(x)

    def embed_images(self, images) -> torch.Tensor:
        return self.image_head(self.image_features(images)[1])

    def embed_texts(self, texts: Sequence[str]) -> torch.Tensor:
        return self.text_head(self.text_encoder(list(texts)))


def _merge(base: dict, override: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            # switching encoder type discards the default's type-specific options
            out[k] = dict(v) if v.get("type", out[k].get("type")) != out[k].get("type") else {**out[k], **v}
        else:
            out[k] = v
    return out
