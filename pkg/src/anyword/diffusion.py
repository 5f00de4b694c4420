"""Latent inversion, denoising replay and cross-attention collection.

Latents are plain float64 numpy arrays of shape ``(channels, h, w)``.
Time indices run ``0..T``; ``alpha(0)`` is the clean end of the chain.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Protocol, Sequence, runtime_checkable

import numpy as np

from anyword.errors import (
    BackendFailure,
    IndexOutOfRange,
    NonFiniteLatent,
    ScheduleMismatch,
    ShapeMismatch,
)

if TYPE_CHECKING:
    from anyword.embedopt import EmbeddingSet

log = logging.getLogger(__name__)

Latent = np.ndarray


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alphas: np.ndarray  # alpha_1..alpha_T
    sigmas: np.ndarray
    alpha0: float = 1.0

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "sigmas", sigmas)
        if alphas.ndim != 1 or alphas.shape != sigmas.shape or alphas.size == 0:
            raise ValueError("alphas and sigmas must be 1-d arrays of equal, non-zero length")
        full = np.concatenate([[self.alpha0], alphas])
        if np.any(full <= 0) or np.any(full > 1) or not np.all(np.isfinite(full)):
            raise ValueError("alphas must lie in (0, 1]")
        if np.any(np.diff(full) > 0):
            raise ValueError("alphas must be non-increasing")
        if np.any(sigmas < 0):
            raise ValueError("sigmas must be non-negative")

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    def alpha(self, t: int) -> float:
        if t == 0:
            return float(self.alpha0)
        return float(self.alphas[t - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[t - 1])

    @classmethod
    def from_alphas(cls, alphas: Sequence[float], alpha0: float = 1.0) -> NoiseSchedule:
        a = np.asarray(alphas, dtype=np.float64)
        return cls(a, np.sqrt(1.0 - a), alpha0)

    @classmethod
    def linear(cls, T: int = 50, beta_start: float = 0.00085, beta_end: float = 0.012) -> NoiseSchedule:
        """Scaled-linear beta schedule subsampled to ``T`` steps (latent-diffusion default)."""
        betas = np.linspace(beta_start**0.5, beta_end**0.5, 1000) ** 2
        cum = np.cumprod(1.0 - betas)
        idx = np.linspace(0, 999, T + 1).round().astype(int)[1:]
        return cls.from_alphas(cum[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.float64(self.alpha0).tobytes())
        h.update(self.alphas.astype("<f8").tobytes())
        h.update(self.sigmas.astype("<f8").tobytes())
        return h.hexdigest()


@runtime_checkable
class DenoiserBackend(Protocol):
    """Noise predictor that also exposes its token cross-attention.

    ``predict`` returns ``(eps, attn)`` with ``attn`` shaped ``(tokens, h, w)``
    or ``(layers, tokens, h, w)``; at every spatial position the token axis is
    a softmax and sums to one. Differentiable backends additionally provide
    ``vjp(z_t, t, V, cotangent) -> dV``. ``num_steps`` (or None) pins the
    schedule length the backend was built for.
    """

    attention_resolution: tuple[int, int]

    def predict(self, z_t: Latent, t: int, V: EmbeddingSet) -> tuple[Latent, np.ndarray]: ...


def step_coefficients(alpha_prev: float, alpha_t: float) -> tuple[float, float]:
    """Coefficients ``(scale, noise)`` with ``z_t = scale * z_prev + noise * eps``."""
    scale = np.sqrt(alpha_t) / np.sqrt(alpha_prev)
    # max(0, .) keeps alpha == 1 exact instead of a tiny negative under the root
    noise = np.sqrt(alpha_t) * (np.sqrt(max(1.0 / alpha_t - 1.0, 0.0)) - np.sqrt(max(1.0 / alpha_prev - 1.0, 0.0)))
    return float(scale), float(noise)


def _check(backend, schedule: NoiseSchedule) -> None:
    steps = getattr(backend, "num_steps", None)
    if steps is not None and steps != schedule.T:
        raise ScheduleMismatch(f"backend built for {steps} steps, schedule has {schedule.T}")


def _call(backend, z: Latent, t: int, V) -> tuple[Latent, np.ndarray]:
    try:
        eps, attn = backend.predict(z, t, V)
    except (ScheduleMismatch, ShapeMismatch):
        raise
    except Exception as exc:
        raise BackendFailure(f"denoiser failed at t={t}: {exc}") from exc
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z.shape:
        raise ShapeMismatch(f"noise prediction shape {eps.shape} != latent shape {z.shape}")
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim == 4:
        attn = attn.mean(axis=0)  # same-resolution layers are mean-pooled
    return eps, attn


def invert(z0: Latent, schedule: NoiseSchedule, V, backend) -> list[Latent]:
    """Run the deterministic inversion chain and return ``[z*_1, ..., z*_T]``."""
    _check(backend, schedule)
    z = np.asarray(z0, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteLatent("z0 has non-finite entries")
    out = []
    for t in range(1, schedule.T + 1):
        eps, _ = _call(backend, z, t - 1, V)
        scale, noise = step_coefficients(schedule.alpha(t - 1), schedule.alpha(t))
        z = scale * z + noise * eps
        if not np.all(np.isfinite(z)):
            raise NonFiniteLatent(f"inverted latent at t={t} is non-finite")
        out.append(z)
    return out


def denoise_step(z_t: Latent, t: int, eps: Latent, schedule: NoiseSchedule) -> Latent:
    """Exact algebraic inverse of one inversion step, given a noise estimate."""
    scale, noise = step_coefficients(schedule.alpha(t - 1), schedule.alpha(t))
    return (z_t - noise * eps) / scale


def direct_inversion_offsets(inverted: Sequence[Latent], denoised: Sequence[Latent]) -> list[Latent]:
    """Per-step corrections ``inverted[k] - denoised[k]``."""
    if len(inverted) != len(denoised):
        raise ShapeMismatch(f"chain lengths differ: {len(inverted)} vs {len(denoised)}")
    out = []
    for a, b in zip(inverted, denoised):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeMismatch(f"latent shapes differ: {a.shape} vs {b.shape}")
        out.append(a - b)
    return out


def one_step_predictions(inverted: Sequence[Latent], schedule: NoiseSchedule, V, backend) -> list[Latent]:
    """``zhat_{t-1}`` obtained by one denoising step from each ``z*_t``.

    Element ``k`` is the prediction for time ``k`` (so index 0 targets ``z0``).
    """
    _check(backend, schedule)
    preds = []
    for t in range(1, schedule.T + 1):
        eps, _ = _call(backend, inverted[t - 1], t, V)
        preds.append(denoise_step(inverted[t - 1], t, eps, schedule))
    return preds


def reconstruction_offsets(z0: Latent, inverted: Sequence[Latent], schedule: NoiseSchedule, V, backend) -> list[Latent]:
    """Offsets that pin the denoising replay onto the inverted chain."""
    targets = [np.asarray(z0, dtype=np.float64), *inverted[:-1]]
    return direct_inversion_offsets(targets, one_step_predictions(inverted, schedule, V, backend))


class Normalization(str, Enum):
    RAW = "raw"
    MINMAX = "minmax"


@dataclass(frozen=True, eq=False)
class AttentionStack:
    maps: np.ndarray  # (T, tokens, h, w), row k is the step recorded k-th (t = T - k)
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return int(self.maps.shape[0])

    @property
    def token_count(self) -> int:
        return int(self.maps.shape[1])

    def __add__(self, other: AttentionStack) -> AttentionStack:
        return AttentionStack(self.maps + other.maps, self.timesteps)


@dataclass(frozen=True, eq=False)
class AveragedAttentionMap:
    token_index: int
    grid: np.ndarray
    normalization: Normalization = Normalization.MINMAX


def denoise_collect(
    zT: Latent,
    V,
    schedule: NoiseSchedule,
    backend,
    offsets: Sequence[Latent] | None = None,
) -> tuple[Latent, AttentionStack]:
    """Denoise from ``zT`` down to time 0, recording every token's attention.

    With ``offsets`` (from :func:`reconstruction_offsets`) the running latent
    is corrected after each step, so the replay tracks the inverted chain.
    """
    _check(backend, schedule)
    if offsets is not None and len(offsets) != schedule.T:
        raise ShapeMismatch(f"{len(offsets)} offsets for {schedule.T} steps")
    z = np.asarray(zT, dtype=np.float64)
    maps, steps = [], []
    for t in range(schedule.T, 0, -1):
        eps, attn = _call(backend, z, t, V)
        if maps and attn.shape != maps[0].shape:
            raise ShapeMismatch(f"attention shape changed at t={t}: {attn.shape}")
        maps.append(attn)
        steps.append(t)
        z = denoise_step(z, t, eps, schedule)
        if offsets is not None:
            z = z + offsets[t - 1]
        if not np.all(np.isfinite(z)):
            raise NonFiniteLatent(f"denoised latent at t={t - 1} is non-finite")
    return z, AttentionStack(np.stack(maps), np.asarray(steps))


def minmax(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi <= lo:
        return np.zeros_like(grid, dtype=np.float64)
    return (grid - lo) / (hi - lo)


def average_attention(
    stack: AttentionStack,
    token_index: int,
    normalization: Normalization | str = Normalization.MINMAX,
) -> AveragedAttentionMap:
    if not 0 <= token_index < stack.token_count:
        raise IndexOutOfRange(f"token {token_index} not in stack of {stack.token_count} tokens")
    normalization = Normalization(normalization)
    grid = stack.maps[:, token_index].mean(axis=0)
    if normalization == Normalization.MINMAX:
        grid = minmax(grid)
    return AveragedAttentionMap(token_index, grid, normalization)
