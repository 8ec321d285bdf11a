"""Style phrases to prompt embeddings, plus joint image/text embedders."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, TemplateError

PLACEHOLDER = "{}"
SOURCE_TEXT = "a Photo"


def default_templates() -> list[str]:
    text = resources.files("pointstyle").joinpath("data/templates.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def read_templates(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line for line in lines if line.strip()]


def expand_templates(style_text: str, templates) -> list[str]:
    out = []
    for tpl in templates:
        if tpl.count(PLACEHOLDER) != 1:
            raise TemplateError(f"template must contain exactly one '{{}}': {tpl!r}")
        out.append(tpl.replace(PLACEHOLDER, style_text))
    return out


@dataclass(frozen=True, eq=False)
class StyleEmbedding:
    style_text: str
    prompts: tuple
    vectors: np.ndarray  # (M, E) float64
    mean: np.ndarray  # (E,)

    def to_json(self) -> dict:
        return {
            "style_text": self.style_text,
            "prompts": list(self.prompts),
            "vectors": self.vectors.tolist(),
            "mean": self.mean.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "StyleEmbedding":
        return cls(data["style_text"], tuple(data["prompts"]),
                   np.asarray(data["vectors"], dtype=np.float64), np.asarray(data["mean"], dtype=np.float64))


def embed_style(style_text: str, embedder, templates=None) -> StyleEmbedding:
    templates = default_templates() if templates is None else templates
    prompts = expand_templates(style_text, templates)
    vectors = np.asarray(embedder.embed_text(prompts), dtype=np.float64).reshape(len(prompts), -1)
    return StyleEmbedding(style_text, tuple(prompts), vectors, vectors.mean(axis=0))


def text_direction(embedder, text: str, templates=None) -> np.ndarray:
    """Template-mean text embedding, the form every loss uses for E_T."""
    return embed_style(text, embedder, templates).mean


def embed_images(embedder, images: torch.Tensor) -> torch.Tensor:
    """Resize a (B, 3, H, W) batch to the embedder's input size and embed it."""
    size = embedder.input_size
    if images.shape[-2:] != (size, size):
        images = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
    return embedder.embed_image(images)


# -- stub embedder -----------------------------------------------------------


def _hash_seed(seed: int, text: str) -> int:
    digest = hashlib.blake2b(f"{seed}\x1f{text}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def soft_color_histogram(images: torch.Tensor, bins: int = 4) -> torch.Tensor:
    """(B, 3, H, W) -> (B, bins**3) histogram with linear (triangular) binning.

    Differentiable almost everywhere and invariant to pixel permutations.
    """
    x = images.clamp(0.0, 1.0)
    centers = torch.linspace(0.0, 1.0, bins, dtype=x.dtype)
    # (B, 3, P, bins) channel-wise bin weights, each row sums to 1
    w = torch.relu(1.0 - (x.flatten(2).unsqueeze(-1) - centers).abs() * (bins - 1))
    r, g, b = w[:, 0], w[:, 1], w[:, 2]
    joint = torch.einsum("bpi,bpj,bpk->bijk", r, g, b) / x.shape[-1] / x.shape[-2]
    return joint.reshape(x.shape[0], -1)


class StubEmbedder:
    """Deterministic offline stand-in for a joint image/text model.

    Text: normalised sum of hashed token vectors plus a hashed whole-string
    vector, so prompts sharing words share directions but distinct strings
    stay distinct.  Images: normalised fixed Gaussian map of a 64-bin color
    histogram.
    """

    def __init__(self, seed: int = 0, dim: int = 512, input_size: int = 224):
        if dim < 8:
            raise ConfigError(f"stub embedding width must be >= 8, got {dim}")
        self.seed = int(seed)
        self.dim = int(dim)
        self.input_size = int(input_size)
        rng = np.random.default_rng(_hash_seed(self.seed, "\x00image-map"))
        self.image_map = torch.from_numpy(rng.normal(size=(64, self.dim)))

    @lru_cache(maxsize=4096)
    def _vector(self, key: str) -> np.ndarray:
        return np.random.default_rng(_hash_seed(self.seed, key)).normal(size=self.dim)

    def _text_one(self, text: str) -> np.ndarray:
        v = 0.5 * self._vector("\x00seq:" + text)
        for tok in re.findall(r"[a-z0-9]+", text.lower()):
            v = v + self._vector("tok:" + tok)
        return v / np.linalg.norm(v)

    def embed_text(self, texts) -> np.ndarray:
        if isinstance(texts, str):
            return self._text_one(texts)
        return np.stack([self._text_one(t) for t in texts])

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        hist = soft_color_histogram(images)
        z = hist @ self.image_map.to(hist.dtype)
        return z / z.norm(dim=1, keepdim=True)


class ExportedEmbedder:
    """Adapter over TorchScript encoders exported from a real joint model.

    Directory layout: ``text_encoder.pt`` (List[str] -> (B, E)),
    ``image_encoder.pt`` ((B, 3, S, S) -> (B, E)), optional ``meta.json``
    with ``{"input_size": S}`` (default 224).
    """

    def __init__(self, path):
        root = Path(path)
        for name in ("text_encoder.pt", "image_encoder.pt"):
            if not (root / name).is_file():
                raise ConfigError(f"missing {root / name}")
        self.text_encoder = torch.jit.load(str(root / "text_encoder.pt"), map_location="cpu").eval()
        self.image_encoder = torch.jit.load(str(root / "image_encoder.pt"), map_location="cpu").eval()
        meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").is_file() else {}
        self.input_size = int(meta.get("input_size", 224))

    def embed_text(self, texts) -> np.ndarray:
        single = isinstance(texts, str)
        with torch.no_grad():
            out = self.text_encoder([texts] if single else list(texts))
        out = out.double().numpy()
        return out[0] if single else out

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(images)


def load_embedder(spec: str, input_size: int | None = None):
    """``stub:SEED`` (optionally ``stub:SEED:DIM``) or ``export:PATH``."""
    kind, _, rest = spec.partition(":")
    if kind == "stub":
        parts = rest.split(":") if rest else ["0"]
        dim = int(parts[1]) if len(parts) > 1 else 512
        return StubEmbedder(int(parts[0]), dim, input_size or 224)
    if kind == "export":
        return ExportedEmbedder(rest)
    raise ConfigError(f"unknown embedder spec {spec!r} (expected stub:SEED or export:PATH)")
