"""Verification helpers consumed by the test suites."""

from __future__ import annotations

import math

import torch

from .realnvp import RealNVP
from .target import BimodalMixture, GaussianBase, make_target, target_mean
from .train import reverse_kl_loss


def _trained_toy_model(d: int, seed: int) -> RealNVP:
    """A small model pushed away from the identity with random-ish data,
    so invertibility is exercised at non-trivial parameters."""
    torch.manual_seed(seed)
    model = RealNVP(d, GaussianBase(d), n_layers=6).to(torch.float64)
    opt = torch.optim.Adam(model.parameters(), lr=5e-3)
    gen = torch.Generator().manual_seed(seed)
    target = make_target(d, 1.5, 2.0 / 3.0)
    for _ in range(200):
        opt.zero_grad()
        loss = reverse_kl_loss(model, target, 128, generator=gen)
        loss.backward()
        opt.step()
    return model


def invertibility_report(d: int = 8, seed: int = 0, n: int = 256) -> dict:
    """Forward-inverse round-trip and log-det errors of a trained model.

    The log-det check compares the analytic value against the numerical
    Jacobian determinant at a handful of points in dimension <= 4 and
    against the inverse-pass log-det everywhere.
    """
    model = _trained_toy_model(d, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(n, d, generator=gen, dtype=torch.float64)
    y, fwd_ld = model.forward(x)
    back, inv_ld = model.inverse(y)
    inverse_error = float((back - x).abs().max())
    consistency_error = float((fwd_ld + inv_ld).abs().max())

    d_small = min(d, 4)
    small = RealNVP(d_small, GaussianBase(d_small), n_layers=6).to(torch.float64)
    torch.manual_seed(seed + 2)
    small = _trained_toy_model(d_small, seed + 2)
    xs = torch.randn(8, d_small, generator=gen, dtype=torch.float64)
    _, lds = small.forward(xs)
    jac_err = 0.0
    for k in range(xs.shape[0]):
        J = torch.autograd.functional.jacobian(lambda v: small.forward(v[None, :])[0][0], xs[k])
        num_ld = float(torch.logdet(J))
        jac_err = max(jac_err, abs(num_ld - float(lds[k])))
    return {
        "max_inverse_error": inverse_error,
        "max_logdet_error": max(consistency_error, jac_err),
        "numerical_jacobian_error": jac_err,
    }


def identity_multimodal_loss(d: int, R: float, w_star: float, seed: int,
                             batch: int = 4096) -> tuple[float, float]:
    """Reverse KL of an identity-initialized model whose multimodal prior
    matches the target exactly: zero up to Monte Carlo error.

    Returns (estimate, standard error).
    """
    torch.manual_seed(seed)
    prior = BimodalMixture(target_mean(d, R), w_star)
    model = RealNVP(d, prior).to(torch.float64)
    target = make_target(d, R, w_star)
    gen = torch.Generator().manual_seed(seed)
    z = prior.sample(batch, generator=gen)
    x, log_det = model.forward(z)
    vals = prior.log_prob(z) - log_det - target.log_prob(x)
    est = float(vals.mean())
    se = float(vals.std(unbiased=True) / math.sqrt(batch))
    return est, se


def density_normalization_1d(seed: int = 0, grid: int = 4001, span: float = 12.0) -> float:
    """Integral of the model density over a 1-D grid (trapezoid rule)."""
    model = _trained_toy_model(1, seed)
    xs = torch.linspace(-span, span, grid, dtype=torch.float64)[:, None]
    with torch.no_grad():
        dens = torch.exp(model.log_prob(xs))
    return float(torch.trapz(dens.squeeze(), xs.squeeze()))
