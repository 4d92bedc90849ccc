"""Reverse-KL training loop and the half-space collapse statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

from .realnvp import RealNVP
from .target import make_prior, make_target, target_mean

log = logging.getLogger(__name__)

BATCH = 128
LEARNING_RATE = 1e-3
STABILITY_WINDOW = 500       # iterations
DEFAULT_BUDGET = 4000
EVAL_EVERY = 50
EVAL_SAMPLES = 10_000
DIVERGENCE = 1e6

# stability thresholds for the tracked statistics over the trailing window
LOSS_EPS = 0.05
STAT_EPS = 0.02


@dataclass
class HalfSpaceStats:
    """Sample statistics on the two half-spaces split by sign(x_1).

    m_plus/m_minus and s are unnormalized overlaps mu_pm . mu_star and
    mu_plus . mu_minus; the collapse criterion only uses their signs.
    """

    w_plus: float
    w_minus: float
    mu_plus: torch.Tensor
    mu_minus: torch.Tensor
    m_plus: float
    m_minus: float
    s: float


def half_space_stats(model: RealNVP, R: float, n: int = EVAL_SAMPLES,
                     generator=None) -> HalfSpaceStats:
    x = model.sample(n, generator=generator)
    mu_star = target_mean(model.d, R, dtype=x.dtype)
    plus = x[:, 0] > 0
    w_plus = float(plus.to(x.dtype).mean())
    mu_p = x[plus].mean(dim=0) if int(plus.sum()) else torch.zeros_like(mu_star)
    mu_m = x[~plus].mean(dim=0) if int((~plus).sum()) else torch.zeros_like(mu_star)
    return HalfSpaceStats(
        w_plus=w_plus, w_minus=1.0 - w_plus, mu_plus=mu_p, mu_minus=mu_m,
        m_plus=float(mu_p @ mu_star), m_minus=float(mu_m @ mu_star),
        s=float(mu_p @ mu_m),
    )


def reverse_kl_loss(model: RealNVP, target, batch: int,
                    generator=None) -> torch.Tensor:
    """Monte Carlo reverse KL via the reparametrization through the base.

    E[log p_z(z) - log|det df/dz| - log p(f(z))] over base draws; samples
    with non-finite target log-density are rejected (more than 1% aborts).
    """
    z = model.prior.sample(batch, generator=generator)
    x, log_det = model.forward(z)
    log_p = target.log_prob(x)
    finite = torch.isfinite(log_p) & torch.isfinite(log_det)
    n_bad = int(batch - finite.sum())
    if n_bad:
        log.warning("rejected %d/%d samples with non-finite log-density", n_bad, batch)
        if n_bad > 0.01 * batch:
            raise FloatingPointError(f"more than 1% non-finite samples ({n_bad}/{batch})")
        z, x, log_det, log_p = z[finite], x[finite], log_det[finite], log_p[finite]
    return (model.prior.log_prob(z) - log_det - log_p).mean()


@dataclass
class TrainRecord:
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    stats: list[HalfSpaceStats] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False

    @property
    def final(self) -> HalfSpaceStats:
        return self.stats[-1]


def train(
    d: int,
    R: float,
    prior: str,
    seed: int,
    w_star: float = 2.0 / 3.0,
    budget: int = DEFAULT_BUDGET,
    batch: int = BATCH,
    lr: float = LEARNING_RATE,
    dtype=torch.float64,
    n_layers: int = 6,
    width: int = 16,
    depth: int = 3,
) -> tuple[RealNVP, TrainRecord]:
    """Train a RealNVP by reverse KL against the bimodal target.

    Stops when the loss and the half-space statistics are stable over the
    trailing 500 iterations, on divergence, or at the budget.  Fully
    deterministic for a fixed seed.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed * 9973 + 17)
    prior_dist = make_prior(prior, d, R, w_star, gen, dtype=dtype)
    target = make_target(d, R, w_star, dtype=dtype)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = RealNVP(d, prior_dist, n_layers=n_layers, width=width, depth=depth).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=lr)

    record = TrainRecord()
    window: list[tuple] = []
    window_span = max(STABILITY_WINDOW // EVAL_EVERY, 2)
    for it in range(budget + 1):
        if it % EVAL_EVERY == 0 or it == budget:
            stats = half_space_stats(model, R, generator=gen)
            with torch.no_grad():
                loss_val = float(reverse_kl_loss(model, target, 1024, generator=gen))
            record.iterations.append(it)
            record.losses.append(loss_val)
            record.stats.append(stats)
            if loss_val > DIVERGENCE or not math.isfinite(loss_val):
                record.diverged = True
                log.warning("training diverged at iteration %d (loss %.3g)", it, loss_val)
                break
            window.append((loss_val, stats.w_plus, stats.m_plus, stats.m_minus, stats.s))
            if len(window) > window_span:
                window.pop(0)
                arr = torch.tensor(window, dtype=torch.float64)
                ranges = (arr.max(dim=0).values - arr.min(dim=0).values)
                scale = torch.tensor([LOSS_EPS, STAT_EPS,
                                      STAT_EPS * max(R * R, 1.0),
                                      STAT_EPS * max(R * R, 1.0),
                                      STAT_EPS * max(R * R, 1.0)], dtype=torch.float64)
                if bool((ranges <= scale).all()):
                    record.converged = True
                    break
        if it == budget:
            break
        opt.zero_grad()
        loss = reverse_kl_loss(model, target, batch, generator=gen)
        loss.backward()
        opt.step()
    return model, record


def collapse_verdict(stats: HalfSpaceStats) -> tuple[bool, str]:
    """Mode collapse: s > 0, or one of the half-space weights below 0.01."""
    if stats.s > 0.0:
        return True, "mean_alignment"
    if min(stats.w_plus, stats.w_minus) < 0.01:
        return True, "weight_vanishing"
    return False, "none"
