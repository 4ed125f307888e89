"""Latent bottlenecks: finite scalar quantization and a variational head.

FSQ squashes each latent dimension into a bounded interval, rounds it onto a
small integer grid (straight-through gradient), and packs the per-dimension
grid positions into one mixed-radix code.  The variational head splits the
encoder output into mean/log-variance and reparameterizes.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import QuantizationError, ShapeError
from .tensor import Tensor, exp, ste_round, tanh

_BOUND_EPS = 1e-3


class FSQ:
    """Finite scalar quantizer over a fixed per-dimension level list."""

    def __init__(self, levels):
        self.levels = np.asarray(levels, dtype=np.int64)
        if self.levels.size == 0 or (self.levels < 2).any():
            raise ShapeError("FSQ needs at least one dimension with >= 2 levels")
        self.dim = int(self.levels.size)
        self.codebook_size = int(math.prod(int(v) for v in self.levels))
        self.basis = np.concatenate([[1], np.cumprod(self.levels[:-1])]).astype(np.int64)
        self.half_width = (self.levels // 2).astype(np.float64)
        self._half_l = (self.levels - 1) * (1 - _BOUND_EPS) / 2
        self._offset = np.where(self.levels % 2 == 0, 0.5, 0.0)
        self._shift = np.arctanh(self._offset / self._half_l)

    @property
    def null_code(self) -> int:
        """Reserved index marking dropped positions; outside the codebook."""
        return self.codebook_size

    def _bound(self, z: Tensor) -> Tensor:
        dt = z.dtype
        return tanh(z + self._shift.astype(dt)) * self._half_l.astype(dt) - self._offset.astype(dt)

    def quantize(self, z: Tensor) -> tuple[Tensor, np.ndarray]:
        """(..., dim) latents -> ((..., dim) grid values in [-1, 1], (...,) codes).

        Gradient passes straight through the rounding.  `dequantize` of the
        returned codes reproduces the grid values exactly.
        """
        if not isinstance(z, Tensor):
            z = Tensor(z)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"latent dim {z.shape[-1]} != FSQ dims {self.dim}")
        if not np.isfinite(z.data).all():
            raise QuantizationError("non-finite latent input to FSQ")
        bounded = self._bound(z)
        rounded = ste_round(bounded)
        quantized = rounded / self.half_width.astype(z.dtype)
        digits = (rounded.data + self.half_width).astype(np.int64)
        indices = (digits * self.basis).sum(axis=-1)
        return quantized, indices

    def dequantize(self, indices: np.ndarray, dtype=np.float32) -> np.ndarray:
        """Codes -> grid values in [-1, 1]; exact inverse of `quantize` codes."""
        idx = np.asarray(indices)
        if (idx < 0).any() or (idx >= self.codebook_size).any():
            raise QuantizationError(
                f"code index outside [0, {self.codebook_size}): "
                f"min {idx.min() if idx.size else '-'} max {idx.max() if idx.size else '-'}")
        digits = (idx[..., None] // self.basis) % self.levels
        # same dtype and operand order as `quantize`, so values match bit-exactly
        rounded = (digits - self.levels // 2).astype(dtype)
        return rounded / self.half_width.astype(dtype)


def vae_split(latent_params: Tensor) -> tuple[Tensor, Tensor]:
    """Encoder head output (..., 2*D) -> mean (..., D), log-variance (..., D)."""
    d2 = latent_params.shape[-1]
    if d2 % 2:
        raise ShapeError(f"variational head needs an even output dim, got {d2}")
    d = d2 // 2
    return latent_params[..., :d], latent_params[..., d:]


def vae_bottleneck(
    latent_params: Tensor,
    mode: str = "sample",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Reparameterized sample (or the mean) plus the analytic unit-prior KL.

    KL is summed over latent dimensions and averaged over tokens.  `mode`
    "mean" ignores the generator entirely, so repeated calls are bit-equal.
    """
    mean, logvar = vae_split(latent_params)
    if mode == "sample":
        if rng is None:
            raise ShapeError("sample mode needs a random generator")
        noise = rng.standard_normal(mean.shape).astype(mean.dtype)
        z = mean + exp(logvar * 0.5) * Tensor(noise)
    elif mode == "mean":
        z = mean
    else:
        raise ShapeError(f"unknown bottleneck mode '{mode}'")
    kl_per_token = (mean * mean + exp(logvar) - 1.0 - logvar).sum(axis=-1) * 0.5
    kl = kl_per_token.mean()
    return z, kl
