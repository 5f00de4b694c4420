"""Deterministic stand-ins for the frozen networks.

The toy denoiser is affine in both the latent and the embeddings,
``eps_hat = slope * z_t + sum_k (P v_k) * field_k``, so round trips and
gradients have closed forms. Its cross-attention is a token softmax over
fixed per-word spatial fields.
"""
from __future__ import annotations

import hashlib
import zlib
from typing import Mapping

import numpy as np

from anyword.embedopt import EmbeddingSet, LowRankAdapter
from anyword.errors import AdapterFormatError
from anyword.textgraph import lexicon


def gaussian_field(center_rc: tuple[float, float], sigma: float, shape=(16, 16)) -> np.ndarray:
    """Unit-peak Gaussian evaluated at cell centres; ``center_rc`` in cell units."""
    rows = np.arange(shape[0]) + 0.5
    cols = np.arange(shape[1]) + 0.5
    r, c = np.meshgrid(rows, cols, indexing="ij")
    return np.exp(-((r - center_rc[0]) ** 2 + (c - center_rc[1]) ** 2) / (2.0 * sigma**2))


class ToyDenoiser:
    def __init__(
        self,
        fields: Mapping[str, np.ndarray] | None = None,
        channels: int = 4,
        width: int = 32,
        slope: float = 0.1,
        strength: float = 8.0,
        proj_scale: float = 1.0,
        seed: int = 0,
        resolution: tuple[int, int] = (16, 16),
        num_steps: int | None = None,
    ):
        self.fields = {k.lower(): np.asarray(v, dtype=np.float64) for k, v in (fields or {}).items()}
        for k, v in self.fields.items():
            if v.shape != tuple(resolution):
                raise ValueError(f"field for {k!r} has shape {v.shape}, expected {resolution}")
        self.channels = channels
        self.width = width
        self.slope = slope
        self.strength = strength
        self.attention_resolution = tuple(resolution)
        self.latent_shape = (channels, *resolution)
        self.num_steps = num_steps
        rng = np.random.default_rng(seed)
        self.P = rng.standard_normal((channels, width)) * (proj_scale / np.sqrt(width))
        self._cache: dict[tuple[str, ...], np.ndarray] = {}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for word in sorted(self.fields):
            h.update(word.encode() + b"\x00")
            h.update(np.ascontiguousarray(self.fields[word], dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.P, dtype="<f8").tobytes())
        h.update(repr((self.slope, self.strength)).encode())
        return h.hexdigest()

    def token_fields(self, V: EmbeddingSet) -> np.ndarray:
        key = tuple(s.lower() for s in V.surfaces)
        G = self._cache.get(key)
        if G is None:
            zero = np.zeros(self.attention_resolution)
            G = np.stack([self.fields.get(s, zero) for s in key])
            self._cache[key] = G
        return G

    def _bias(self, V: EmbeddingSet) -> np.ndarray:
        G = self.token_fields(V)
        coef = V.vectors @ self.P.T  # (tokens, channels)
        return np.einsum("kc,khw->chw", coef, G)

    def noise(self, z: np.ndarray, ts, V: EmbeddingSet) -> np.ndarray:
        return self.slope * z + self._bias(V)

    def attention(self, V: EmbeddingSet) -> np.ndarray:
        logits = self.strength * self.token_fields(V)
        logits = logits - logits.max(axis=0, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=0, keepdims=True)

    def predict(self, z_t: np.ndarray, t: int, V: EmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
        return self.noise(np.asarray(z_t, dtype=np.float64), t, V), self.attention(V)

    def vjp(self, z: np.ndarray, ts, V: EmbeddingSet, cotangent: np.ndarray) -> np.ndarray:
        """Gradient of ``<cotangent, eps_hat>`` w.r.t. the embedding rows."""
        G = self.token_fields(V)
        cot = cotangent.reshape((-1,) + self.latent_shape).sum(axis=0)
        return np.einsum("chw,khw,cd->kd", cot, G, self.P)


class ConstantNoiseDenoiser:
    """Predicts the same noise everywhere; attention is a fixed fixture."""

    def __init__(self, value: float | np.ndarray, attention: np.ndarray | None = None, num_steps: int | None = None):
        self.value = value
        self.attention_fixture = None if attention is None else np.asarray(attention, dtype=np.float64)
        self.attention_resolution = (16, 16) if attention is None else tuple(self.attention_fixture.shape[-2:])
        self.num_steps = num_steps
        self.calls = 0

    def predict(self, z_t, t, V):
        self.calls += 1
        eps = np.broadcast_to(np.asarray(self.value, dtype=np.float64), np.shape(z_t)).copy()
        if self.attention_fixture is not None:
            attn = self.attention_fixture
        else:
            k = len(V) if V is not None else 1
            attn = np.full((k, *self.attention_resolution), 1.0 / k)
        return eps, attn


class ToyTextEncoder:
    """Hash-seeded embedding table over the builtin lexicon."""

    def __init__(self, dim: int = 32, scale: float = 0.5, seed: int = 0, vocab=None):
        self.dim = dim
        self.scale = scale
        self.seed = seed
        self.vocab = frozenset(w.lower() for w in (vocab if vocab is not None else lexicon()[0]))
        self.adapter: LowRankAdapter | None = None

    def base_embed(self, word: str) -> np.ndarray | None:
        w = word.lower()
        if w not in self.vocab:
            return None
        rng = np.random.default_rng((self.seed * 7919 + zlib.crc32(w.encode())) & 0xFFFFFFFF)
        return rng.standard_normal(self.dim) * self.scale

    def embed(self, word: str) -> np.ndarray | None:
        v = self.base_embed(word)
        if v is None or self.adapter is None:
            return v
        return self.adapter.apply(v[None])[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"toy-encoder:{self.dim}:{self.scale}:{self.seed}".encode())
        h.update("\n".join(sorted(self.vocab)).encode())
        return h.hexdigest()

    def install_adapter(self, adapter: LowRankAdapter | None) -> None:
        if adapter is not None:
            if adapter.width != self.dim:
                raise AdapterFormatError(f"adapter width {adapter.width} != encoder width {self.dim}")
            if adapter.encoder_fingerprint != bytes.fromhex(self.fingerprint()):
                raise AdapterFormatError("adapter was trained for a different encoder")
        self.adapter = adapter

    @property
    def has_adapter(self) -> bool:
        return self.adapter is not None


class ToyImageEncoder:
    """Block-average an image down to the latent grid."""

    def __init__(self, latent_shape: tuple[int, int, int] = (4, 16, 16)):
        self.latent_shape = latent_shape

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        c, h, w = self.latent_shape
        H, W = img.shape
        if H % h or W % w:
            from skimage.transform import resize

            pooled = resize(img, (h, w), anti_aliasing=True, order=1)
        else:
            pooled = img.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
        chans = [pooled, pooled**2, 1.0 - pooled, pooled - pooled.mean()]
        while len(chans) < c:
            chans.append(np.roll(pooled, len(chans), axis=1))
        return np.stack(chans[:c])
