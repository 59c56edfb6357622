"""Privatized gradient computation with virtual batching across simulated devices.

Each example contributes ``clip_C(mean of its K augmentation gradients) / C``,
a vector of norm at most one. Contributions are averaged per device and
accumulation step, every device adds the *same* Gaussian sample for that
step, device averages are synchronized, and accumulation steps are merged
with a running (Welford) mean. The result equals

    (1/B) * sum of contributions + (sigma / B) * xi,   xi ~ N(0, I).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from dpsgd.errors import ConfigurationError, NumericError, PartitionError, SensitivityError

NORM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class PrivatizationConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    total_batch: int = 1
    local_batch: int = 1
    accumulation_steps: int = 1
    devices: int = 1
    augmult: int = 1

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigurationError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise ConfigurationError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        for name in ("total_batch", "local_batch", "accumulation_steps", "devices", "augmult"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value}")
        if self.local_batch * self.devices * self.accumulation_steps != self.total_batch:
            raise ConfigurationError(
                f"total_batch ({self.total_batch}) must equal local_batch * devices * "
                f"accumulation_steps ({self.local_batch} * {self.devices} * {self.accumulation_steps})"
            )

    @classmethod
    def single_device(cls, batch_size: int, accumulation_steps: int = 1, **kwargs):
        if batch_size % accumulation_steps:
            raise ConfigurationError(
                f"batch size {batch_size} is not divisible by {accumulation_steps} accumulation steps"
            )
        return cls(
            total_batch=batch_size,
            local_batch=batch_size // accumulation_steps,
            accumulation_steps=accumulation_steps,
            devices=1,
            **kwargs,
        )

    @property
    def geometry(self) -> tuple:
        """Shape prefix (devices, accumulation_steps, local_batch) of a contribution set."""
        return (self.devices, self.accumulation_steps, self.local_batch)

    def with_devices(self, devices: int) -> "PrivatizationConfig":
        """Same total batch and accumulation steps spread over ``devices`` devices."""
        per_step = self.total_batch // self.accumulation_steps
        if per_step % devices:
            raise ConfigurationError(f"{per_step} examples per step cannot be split over {devices} devices")
        return PrivatizationConfig(
            clip_norm=self.clip_norm,
            noise_multiplier=self.noise_multiplier,
            total_batch=self.total_batch,
            local_batch=per_step // devices,
            accumulation_steps=self.accumulation_steps,
            devices=devices,
            augmult=self.augmult,
        )


@dataclass(frozen=True)
class NoiseKey:
    """Address of one standard Gaussian draw; identical on every device."""

    seed: int
    step_index: int
    accumulation_index: int = 0

    def at(self, accumulation_index: int) -> "NoiseKey":
        return NoiseKey(self.seed, self.step_index, accumulation_index)

    def normal(self, size: int) -> np.ndarray:
        seq = np.random.SeedSequence(
            int(self.seed), spawn_key=(int(self.step_index), int(self.accumulation_index))
        )
        return np.random.default_rng(seq).standard_normal(size)


def _check_finite(v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise NumericError("gradient contains non-finite entries")


def clip_and_normalize(v, clip_norm: float) -> np.ndarray:
    """Returns ``min(1, C/||v||) * v / C``, which has norm at most one.

    Accepts a single vector or a matrix, in which case each row is treated
    independently.
    """
    if not clip_norm > 0:
        raise ConfigurationError(f"clip_norm must be > 0, got {clip_norm}")
    v = np.asarray(v, dtype=np.float64)
    _check_finite(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.divide(clip_norm, norms, out=np.ones_like(norms), where=norms > clip_norm)
    return v * (scale / clip_norm)


def contribution_from_augmentations(grads, clip_norm: float) -> np.ndarray:
    """Clipped, normalized contribution of one example from its K augmentation gradients.

    ``grads`` has shape (K, P); a leading batch axis (n, K, P) is also
    accepted and yields an (n, P) array of contributions.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim < 2 or grads.shape[-2] == 0:
        raise ValueError("need at least one augmentation gradient per example")
    return clip_and_normalize(grads.mean(axis=-2), clip_norm)


def welford_mean(stream: Iterable) -> np.ndarray:
    """Running mean ``g <- g + (x - g) / s`` over a non-empty stream."""
    mean = None
    count = 0
    for x in stream:
        count += 1
        x = np.asarray(x, dtype=np.float64)
        if mean is None:
            mean = x.copy()
        else:
            mean += (x - mean) / count
    if mean is None:
        raise ValueError("welford_mean needs a non-empty stream")
    return mean


def privatize_step(contributions, config: PrivatizationConfig, key: NoiseKey) -> np.ndarray:
    """Noisy average of unit-bounded contributions, simulated over devices.

    Args:
      contributions: array of shape (devices, accumulation_steps, local_batch, P),
        entry [d, s, i] being the contribution of local example i on device d at
        accumulation step s. Every row must have l2 norm <= 1.
      config: batch geometry and noise multiplier.
      key: noise key for this training step; accumulation step s draws from
        ``key.at(s)``, shared by all devices.

    Returns:
      The privatized gradient, a length-P vector held identically by every device.
    """
    c = np.asarray(contributions, dtype=np.float64)
    if c.ndim != 4 or c.shape[:3] != config.geometry:
        raise PartitionError(
            f"contributions of shape {c.shape} do not match geometry "
            f"(devices, accumulation_steps, local_batch) = {config.geometry}"
        )
    _check_finite(c)
    norms = np.linalg.norm(c, axis=-1)
    if norms.size and norms.max() > 1 + NORM_TOLERANCE:
        raise SensitivityError(f"contribution norm {norms.max():.12g} exceeds 1")

    n_dev, n_acc, _ = config.geometry
    noise_scale = config.noise_multiplier * math.sqrt(n_acc) / config.total_batch
    dim = c.shape[-1]

    def synchronized(s: int) -> np.ndarray:
        xi = key.at(s).normal(dim) if noise_scale else 0.0
        noisy = [c[d, s].mean(axis=0) + noise_scale * xi for d in range(n_dev)]
        return np.mean(noisy, axis=0)

    return welford_mean(synchronized(s) for s in range(n_acc))


def to_geometry(contributions, config: PrivatizationConfig) -> np.ndarray:
    """Arranges a flat (B, P) batch into (devices, accumulation_steps, local_batch, P).

    Example b goes to accumulation step ``b // (devices * local_batch)``, then
    device, then local slot, the canonical order used by the trainer.
    """
    c = np.asarray(contributions, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != config.total_batch:
        raise PartitionError(f"expected {config.total_batch} contributions, got shape {c.shape}")
    n_dev, n_acc, b_local = config.geometry
    return c.reshape(n_acc, n_dev, b_local, -1).transpose(1, 0, 2, 3)
