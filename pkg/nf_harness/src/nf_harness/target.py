"""Bimodal Gaussian target and the three base distributions.

The target is w* N(mu*, I) + (1 - w*) N(-mu*, I) with mu* = (R, 0, ...).
Base distributions: centered N(0, I); shifted N(mu, I) with a random
direction of norm R; multimodal w* N(mu, I) + (1 - w*) N(-mu, I).
"""

from __future__ import annotations

import math

import torch

LOG_2PI = math.log(2.0 * math.pi)


def _gauss_log_prob(x: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
    d = x.shape[-1]
    return -0.5 * ((x - mean) ** 2).sum(dim=-1) - 0.5 * d * LOG_2PI


class GaussianBase:
    def __init__(self, d: int, mean=None, dtype=torch.float64):
        self.d = d
        self.mean = torch.zeros(d, dtype=dtype) if mean is None else mean.to(dtype)
        self.dtype = dtype

    def log_prob(self, x):
        return _gauss_log_prob(x, self.mean)

    def sample(self, n, generator=None):
        z = torch.randn(n, self.d, generator=generator, dtype=self.dtype)
        return z + self.mean


class BimodalMixture:
    """Two isotropic Gaussians at +-mu with weights (w, 1-w)."""

    def __init__(self, mu: torch.Tensor, w: float, dtype=torch.float64):
        self.mu = mu.to(dtype)
        self.w = float(w)
        self.d = mu.numel()
        self.dtype = dtype

    def log_prob(self, x):
        a = math.log(self.w) + _gauss_log_prob(x, self.mu)
        b = math.log1p(-self.w) + _gauss_log_prob(x, -self.mu)
        return torch.logsumexp(torch.stack([a, b]), dim=0)

    def sample(self, n, generator=None):
        z = torch.randn(n, self.d, generator=generator, dtype=self.dtype)
        pick = torch.rand(n, generator=generator, dtype=self.dtype) < self.w
        signs = torch.where(pick, 1.0, -1.0).to(self.dtype)
        return z + signs[:, None] * self.mu


def target_mean(d: int, R: float, dtype=torch.float64) -> torch.Tensor:
    mu = torch.zeros(d, dtype=dtype)
    mu[0] = R
    return mu


def make_target(d: int, R: float, w_star: float, dtype=torch.float64) -> BimodalMixture:
    return BimodalMixture(target_mean(d, R, dtype), w_star, dtype)


def random_shift(d: int, R: float, generator, dtype=torch.float64) -> torch.Tensor:
    """A direction of norm R, drawn once per seed."""
    v = torch.randn(d, generator=generator, dtype=dtype)
    return R * v / v.norm()


def make_prior(kind: str, d: int, R: float, w_star: float, generator,
               dtype=torch.float64):
    if kind == "centered":
        return GaussianBase(d, dtype=dtype)
    if kind == "shifted":
        return GaussianBase(d, mean=random_shift(d, R, generator, dtype), dtype=dtype)
    if kind == "multimodal":
        return BimodalMixture(random_shift(d, R, generator, dtype), w_star, dtype)
    raise ValueError(f"unknown prior {kind!r}")
