"""RealNVP flow: stacked affine coupling layers with alternating masks.

Each layer splits coordinates by a binary mask b and maps

    y = b*x + (1-b) * (x * exp(s(b*x)) + t(b*x))

with an exact inverse and a triangular Jacobian whose log-determinant is
the sum of the scale outputs on the unmasked coordinates.  The scale and
translation networks are small MLPs whose final layers start at zero, so
the flow begins as the identity.
"""

from __future__ import annotations

import torch
from torch import nn

SCALE_CLIP = 10.0  # |s| cap; guards exp overflow, mildly limits expressivity


def alternating_masks(d: int, n_layers: int) -> torch.Tensor:
    """Even/odd coordinate masks, flipped between consecutive layers."""
    base = torch.arange(d) % 2
    masks = [base if k % 2 == 0 else 1 - base for k in range(n_layers)]
    return torch.stack(masks).to(torch.get_default_dtype())


def _mlp(d: int, width: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = d
    for _ in range(depth):
        layers += [nn.Linear(prev, width), nn.Tanh()]
        prev = width
    out = nn.Linear(prev, d)
    # identity initialization: the coupling transform starts as y = x
    nn.init.zeros_(out.weight)
    nn.init.zeros_(out.bias)
    layers.append(out)
    return nn.Sequential(*layers)


class CouplingLayer(nn.Module):
    def __init__(self, d: int, mask: torch.Tensor, width: int = 16, depth: int = 3):
        super().__init__()
        self.register_buffer("mask", mask)
        self.scale_net = _mlp(d, width, depth)
        self.shift_net = _mlp(d, width, depth)
        self.clip_events = 0

    def _s_t(self, x_masked: torch.Tensor):
        s = self.scale_net(x_masked)
        clipped = (s.abs() > SCALE_CLIP).sum().item()
        if clipped:
            self.clip_events += int(clipped)
        s = torch.clamp(s, -SCALE_CLIP, SCALE_CLIP)
        return s, self.shift_net(x_masked)

    def forward(self, x: torch.Tensor):
        """Returns (y, log|det dy/dx|) per sample."""
        b = self.mask
        s, t = self._s_t(b * x)
        y = b * x + (1 - b) * (x * torch.exp(s) + t)
        log_det = ((1 - b) * s).sum(dim=-1)
        return y, log_det

    def inverse(self, y: torch.Tensor):
        b = self.mask
        s, t = self._s_t(b * y)
        x = b * y + (1 - b) * (y - t) * torch.exp(-s)
        log_det = -((1 - b) * s).sum(dim=-1)
        return x, log_det


class RealNVP(nn.Module):
    """Composition of coupling layers over a given base distribution."""

    def __init__(self, d: int, prior, n_layers: int = 6, width: int = 16, depth: int = 3):
        super().__init__()
        self.d = d
        self.prior = prior
        masks = alternating_masks(d, n_layers)
        self.layers = nn.ModuleList(
            CouplingLayer(d, masks[k], width, depth) for k in range(n_layers)
        )

    def forward(self, z: torch.Tensor):
        """Base-to-data map with accumulated log|det|."""
        log_det = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        x = z
        for layer in self.layers:
            x, ld = layer(x)
            log_det = log_det + ld
        return x, log_det

    def inverse(self, x: torch.Tensor):
        log_det = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        z = x
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z)
            log_det = log_det + ld
        return z, log_det

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        z, inv_log_det = self.inverse(x)
        return self.prior.log_prob(z) + inv_log_det

    @torch.no_grad()
    def sample(self, n: int, generator=None) -> torch.Tensor:
        z = self.prior.sample(n, generator=generator)
        x, _ = self.forward(z)
        return x

    @property
    def clip_events(self) -> int:
        return sum(layer.clip_events for layer in self.layers)
