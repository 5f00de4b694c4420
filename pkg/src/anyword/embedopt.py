"""Test-time optimisation of concept-token embeddings.

Only the vectors of entity roots, attribute nouns and their adjectives are
trained; every other row of the embedding set is carried through untouched.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from anyword.diffusion import NoiseSchedule
from anyword.errors import (
    AdapterFormatError,
    BackendFailure,
    BackendUnavailable,
    EmptySampleSet,
    EncoderUnavailable,
    NonFiniteLoss,
)
from anyword.textgraph import ParsedExpression, parse_expression

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    surfaces: tuple[str, ...]
    vectors: np.ndarray  # (tokens, width)
    trainable: np.ndarray  # (tokens,) bool

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.surfaces) or self.trainable.shape != (len(self.surfaces),):
            raise ValueError("surfaces, vectors and trainable mask disagree on token count")

    def __len__(self) -> int:
        return len(self.surfaces)

    def with_vectors(self, vectors: np.ndarray) -> EmbeddingSet:
        return replace(self, vectors=vectors)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.surfaces).encode())
        h.update(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())
        h.update(self.trainable.astype(np.uint8).tobytes())
        return h.hexdigest()


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.005
    steps: int = 1100
    fast_steps: int = 50
    batch_size: int = 8
    tau: float = 0.3
    gamma: float = 0.00075
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if self.steps < 0 or self.fast_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def _word_seed(seed: int, word: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(word.lower().encode())) & 0xFFFFFFFF


def init_embeddings(parsed: ParsedExpression, encoder, seed: int = 0) -> EmbeddingSet:
    """Look each token up in ``encoder``; unknown words get a seeded Gaussian."""
    if encoder is None:
        raise EncoderUnavailable("no text encoder configured")
    if not parsed.tokens:
        raise ValueError("empty parse")
    rows = []
    try:
        for tok in parsed.tokens:
            vec = encoder.embed(tok.surface)
            if vec is None:
                rng = np.random.default_rng(_word_seed(seed, tok.surface))
                vec = rng.standard_normal(encoder.dim) * encoder.scale
            rows.append(np.asarray(vec, dtype=np.float64))
    except (AttributeError, TypeError) as exc:
        raise EncoderUnavailable(f"encoder cannot embed tokens: {exc}") from exc
    trainable = np.zeros(len(parsed.tokens), dtype=bool)
    trainable[list(parsed.concept_indices)] = True
    return EmbeddingSet(tuple(t.surface for t in parsed.tokens), np.stack(rows), trainable)


def _noise_batch(backend, z: np.ndarray, ts: np.ndarray, V: EmbeddingSet) -> np.ndarray:
    fast = getattr(backend, "noise", None)
    if fast is not None:
        return fast(z, ts, V)
    return np.stack([np.asarray(backend.predict(z[b], int(ts[b]), V)[0]) for b in range(len(ts))])


def dm_loss(backend, z0, V: EmbeddingSet, schedule: NoiseSchedule, ts, eps) -> float:
    """Batch mean of ``||eps - eps_hat(z_t, t, V)||^2``."""
    z = _noised(z0, schedule, ts, eps)
    r = _noise_batch(backend, z, ts, V) - eps
    return float(np.sum(r * r) / len(ts))


def _noised(z0, schedule: NoiseSchedule, ts, eps) -> np.ndarray:
    a = np.sqrt(np.array([schedule.alpha(int(t)) for t in ts]))
    s = np.array([schedule.sigma(int(t)) for t in ts])
    shape = (-1,) + (1,) * np.ndim(z0)
    return a.reshape(shape) * z0[None] + s.reshape(shape) * eps


def dm_loss_grad(backend, z0, V: EmbeddingSet, schedule: NoiseSchedule, ts, eps) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. every row of ``V`` (mask not applied)."""
    z = _noised(z0, schedule, ts, eps)
    r = _noise_batch(backend, z, ts, V) - eps
    B = len(ts)
    loss = float(np.sum(r * r) / B)
    vjp = getattr(backend, "vjp", None)
    if vjp is not None:
        return loss, np.asarray(vjp(z, ts, V, 2.0 * r / B))
    return loss, _fd_grad(backend, z0, V, schedule, ts, eps)


def _fd_grad(backend, z0, V: EmbeddingSet, schedule, ts, eps, h: float = 1e-5) -> np.ndarray:
    # fallback for non-differentiable backends; trainable rows only
    grad = np.zeros_like(V.vectors)
    base = V.vectors
    for k in np.flatnonzero(V.trainable):
        for d in range(base.shape[1]):
            plus, minus = base.copy(), base.copy()
            plus[k, d] += h
            minus[k, d] -= h
            lp = dm_loss(backend, z0, V.with_vectors(plus), schedule, ts, eps)
            lm = dm_loss(backend, z0, V.with_vectors(minus), schedule, ts, eps)
            grad[k, d] = (lp - lm) / (2 * h)
    return grad


def optimize_embeddings(
    z0: np.ndarray,
    V: EmbeddingSet,
    schedule: NoiseSchedule,
    backend,
    cfg: OptimizerConfig,
    steps: int | None = None,
    history: list[float] | None = None,
) -> EmbeddingSet:
    """Plain SGD on the denoising loss over the trainable rows of ``V``.

    Each step draws ``cfg.batch_size`` pairs ``(t, eps)`` with ``t`` uniform
    in ``1..T``. Three consecutive non-finite evaluations abort with
    :class:`NonFiniteLoss`, which carries the last finite embedding set.
    """
    steps = cfg.steps if steps is None else steps
    if steps == 0:
        return V
    z0 = np.asarray(z0, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    vecs = V.vectors.astype(np.float64, copy=True)
    mask = V.trainable
    velocity = np.zeros_like(vecs)
    last_good = vecs.copy()
    bad = 0
    aux = getattr(backend, "auxiliary_grad", None)
    for step in range(steps):
        ts = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + z0.shape)
        cur = V.with_vectors(vecs)
        try:
            loss, grad = dm_loss_grad(backend, z0, cur, schedule, ts, eps)
            if aux is not None:
                aux_loss, aux_grad = aux(cur, cfg.tau, cfg.gamma)
                loss, grad = loss + aux_loss, grad + aux_grad
        except FloatingPointError:
            loss, grad = float("nan"), None
        except Exception as exc:
            raise BackendFailure(f"denoiser failed during optimisation step {step}: {exc}") from exc
        if not np.isfinite(loss) or grad is None or not np.all(np.isfinite(grad[mask])):
            bad += 1
            log.warning("non-finite loss at step %d (%d in a row)", step, bad)
            if bad >= 3:
                raise NonFiniteLoss(step, last_finite=V.with_vectors(last_good))
            vecs = last_good.copy()
            continue
        bad = 0
        last_good = vecs.copy()
        if history is not None:
            history.append(loss)
        velocity[mask] = cfg.momentum * velocity[mask] + grad[mask]
        vecs[mask] -= cfg.learning_rate * velocity[mask]
    return V.with_vectors(vecs)


# ---------------------------------------------------------------------------
# low-rank text-encoder adaptation

ADAPTER_MAGIC = b"AWLORA\x00\x01"
ADAPTER_VERSION = 1
_HEADER = struct.Struct("<8sHHI32s")


@dataclass(eq=False)
class LowRankAdapter:
    """``v -> v + up @ (down @ v)`` applied to every encoder output."""

    up: np.ndarray  # (width, rank) float32
    down: np.ndarray  # (rank, width) float32
    encoder_fingerprint: bytes = field(default=b"\x00" * 32)

    @property
    def rank(self) -> int:
        return int(self.down.shape[0])

    @property
    def width(self) -> int:
        return int(self.down.shape[1])

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        up, down = self.up.astype(np.float64), self.down.astype(np.float64)
        return vectors + vectors @ down.T @ up.T

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(ADAPTER_MAGIC, ADAPTER_VERSION, self.rank, self.width, self.encoder_fingerprint)
        return header + self.up.astype("<f4").tobytes() + self.down.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> LowRankAdapter:
        if len(blob) < _HEADER.size:
            raise AdapterFormatError("adapter file truncated")
        magic, version, rank, width, fp = _HEADER.unpack_from(blob)
        if magic != ADAPTER_MAGIC:
            raise AdapterFormatError("not an adapter file")
        if version != ADAPTER_VERSION:
            raise AdapterFormatError(f"unsupported adapter version {version}")
        n = rank * width
        payload = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
        if payload.size != 2 * n:
            raise AdapterFormatError("adapter payload size does not match header")
        up = payload[:n].reshape(width, rank).astype(np.float32)
        down = payload[n:].reshape(rank, width).astype(np.float32)
        return cls(up, down, fp)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> LowRankAdapter:
        return cls.from_bytes(Path(path).read_bytes())


def fast_adapt_text_encoder(
    samples: Sequence[tuple[object, str]],
    encoder,
    backend_for: Callable[[object, str], object],
    image_encoder: Callable[[object], np.ndarray],
    schedule: NoiseSchedule,
    rank: int = 16,
    steps: int = 1100,
    learning_rate: float = 0.005,
    seed: int = 0,
) -> LowRankAdapter:
    """Fit a rank-``rank`` adapter on the encoder output under the denoising loss.

    ``backend_for(image, text)`` returns the (differentiable) denoiser for a
    sample; ``image_encoder`` maps the image to its latent.
    """
    if not samples:
        raise EmptySampleSet("fast adaptation needs at least one image-text pair")
    base = getattr(encoder, "base_embed", None)
    if base is None or not hasattr(encoder, "fingerprint"):
        raise BackendUnavailable("encoder does not support low-rank adapters")
    rng = np.random.default_rng(seed)
    width = encoder.dim
    up = np.zeros((width, rank))
    down = rng.standard_normal((rank, width)) / np.sqrt(width)

    prepared = []
    for image, text in samples:
        parsed = parse_expression(text)
        vecs = []
        for tok in parsed.tokens:
            v = base(tok.surface)
            if v is None:
                r = np.random.default_rng(_word_seed(seed, tok.surface))
                v = r.standard_normal(width) * encoder.scale
            vecs.append(v)
        E = np.stack(vecs).astype(np.float64)
        trainable = np.ones(len(parsed.tokens), dtype=bool)
        V = EmbeddingSet(tuple(t.surface for t in parsed.tokens), E, trainable)
        prepared.append((np.asarray(image_encoder(image), dtype=np.float64), V, backend_for(image, text)))

    for step in range(steps):
        z0, V, backend = prepared[int(rng.integers(len(prepared)))]
        E = V.vectors
        adapted = E + E @ down.T @ up.T
        ts = rng.integers(1, schedule.T + 1, size=1)
        eps = rng.standard_normal((1,) + z0.shape)
        loss, G = dm_loss_grad(backend, z0, V.with_vectors(adapted), schedule, ts, eps)
        if not np.isfinite(loss):
            raise NonFiniteLoss(step)
        g_up = G.T @ (E @ down.T)
        g_down = up.T @ G.T @ E
        up -= learning_rate * g_up
        down -= learning_rate * g_down
    fp = bytes.fromhex(encoder.fingerprint())
    return LowRankAdapter(up.astype(np.float32), down.astype(np.float32), fp)
