"""Exact low-dimensional reduction of the KL gradient flow.

For a two-component isotropic Gaussian-mixture variational family fitted
to a symmetric bimodal Gaussian target, the spherical gradient flow on
the means closes exactly in three overlaps

    m1 = mu1 . mu_star / R^2,  m2 = mu2 . mu_star / R^2,  s = mu1 . mu2 / R^2

plus the mixture weights.  This module implements the auxiliary
functions f and g, the flow right-hand sides for means and weights, the
closed-form population loss in summary statistics, trajectory
integration, and the quasi-collapse asymptotic predictors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigurationError, IntegrationError, NumericalDomainError
from .quadrature import QuadratureRule, default_rule

W_MIN = 1e-12          # weight clamp; keeps log(w1/w2) finite
S_OVER_TOL = 1e-9      # s in (1, 1+tol] is clamped to 1; beyond is an error
COLLAPSE_WEIGHT = 0.01  # operational weight-vanishing threshold


class WeightClampWarning(RuntimeWarning):
    """A weight sat at the clamp boundary; log(w1/w2) is saturated."""


@dataclass(frozen=True)
class ProblemSpec:
    """Target mixture and variational-family settings.

    R is the target mean norm, w_star the weight of the +mu_star target
    component.  d only matters for the high-dimensional simulator and
    initialization statistics; the reduced dynamics require K = 2.
    """

    R: float
    w_star: float
    d: int = 10
    K: int = 2

    def __post_init__(self):
        if not self.R > 0:
            raise ConfigurationError(f"R must be positive, got {self.R}")
        if not 0.0 < self.w_star < 1.0:
            raise ConfigurationError(f"w_star must be in (0,1), got {self.w_star}")
        if self.d < 1:
            raise ConfigurationError(f"d must be >= 1, got {self.d}")
        if self.K < 2:
            raise ConfigurationError(f"K must be >= 2, got {self.K}")

    @property
    def gamma(self) -> float:
        """Ratio of target weights w_star / (1 - w_star)."""
        return self.w_star / (1.0 - self.w_star)

    @property
    def log_gamma(self) -> float:
        return math.log(self.w_star) - math.log1p(-self.w_star)


@dataclass(frozen=True)
class SummaryState:
    """Sufficient statistics (m1, m2, s) plus the mixture weights."""

    m1: float
    m2: float
    s: float
    w1: float
    w2: float

    def __post_init__(self):
        for name in ("m1", "m2", "s"):
            v = getattr(self, name)
            if not np.isfinite(v) or abs(v) > 1.0 + 1e-6:
                raise ConfigurationError(f"{name} must lie in [-1, 1], got {v}")
            object.__setattr__(self, name, float(np.clip(v, -1.0, 1.0)))
        if abs(self.w1 + self.w2 - 1.0) > 1e-12:
            raise ConfigurationError(f"weights must sum to 1, got {self.w1} + {self.w2}")
        for name in ("w1", "w2"):
            v = getattr(self, name)
            # slack: 1 - (1 - W_MIN) rounds slightly below W_MIN in floats
            if not 0.99 * W_MIN <= v <= 1.0 - 0.99 * W_MIN:
                raise ConfigurationError(f"{name} must lie in [{W_MIN}, 1-{W_MIN}], got {v}")

    @classmethod
    def from_w1(cls, m1: float, m2: float, s: float, w1: float) -> "SummaryState":
        return cls(m1=m1, m2=m2, s=s, w1=w1, w2=1.0 - w1)

    def det_p(self) -> float:
        return det_p(self)

    def validate_gram(self, tol_psd: float = 1e-9) -> None:
        """Check positive semidefiniteness of the overlap Gram matrix.

        Not enforced at construction: basin maps deliberately scan
        initial conditions over the full square, where det P < 0.
        """
        d = self.det_p()
        if d < -tol_psd:
            raise ConfigurationError(f"Gram matrix is not PSD: det P = {d}")


@dataclass(frozen=True)
class FlowConfig:
    """Integration settings for the reduced flow."""

    eta: float = 0.05
    max_steps: int = 10**6
    integrator: str = "euler"          # euler | rk4
    weight_mode: str = "fixed"         # fixed | reparametrized | projected
    stop_grad_norm: float = 1e-8
    record_every: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.integrator not in ("euler", "rk4"):
            raise ConfigurationError(f"unknown integrator {self.integrator!r}")
        if self.weight_mode not in ("fixed", "reparametrized", "projected"):
            raise ConfigurationError(f"unknown weight_mode {self.weight_mode!r}")
        if not self.stop_grad_norm > 0:
            raise ConfigurationError("stop_grad_norm must be positive")
        if self.record_every < 1:
            raise ConfigurationError("record_every must be >= 1")


@dataclass(frozen=True)
class CollapseVerdict:
    """Operational mode-collapse classification of a final state."""

    collapsed: bool
    reason: str                 # none | mean_alignment | weight_vanishing
    final_state: SummaryState


@dataclass
class TrajectoryRecord:
    """Recorded time series of a flow or simulation run.

    Stored columnwise; ``states`` materializes SummaryState objects on
    demand.
    """

    times: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    s: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    detP_series: np.ndarray
    rhs_norm_series: np.ndarray
    verdict: CollapseVerdict
    converged: bool = True
    loss_estimate: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.times)
        for name in ("m1", "m2", "s", "w1", "w2", "detP_series", "rhs_norm_series"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"series {name} length mismatch")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def states(self) -> list[SummaryState]:
        return [self.state_at(i) for i in range(len(self))]

    def state_at(self, i: int) -> SummaryState:
        w1 = float(np.clip(self.w1[i], W_MIN, 1.0 - W_MIN))
        return SummaryState(
            m1=float(self.m1[i]), m2=float(self.m2[i]), s=float(self.s[i]),
            w1=w1, w2=1.0 - w1,
        )

    @property
    def final_state(self) -> SummaryState:
        return self.state_at(len(self) - 1)


def det_p(state: SummaryState) -> float:
    """det of the (mu_star, mu1, mu2) overlap Gram matrix."""
    return float(_det_p(state.m1, state.m2, state.s))


def _det_p(m1, m2, s):
    return 1.0 + 2.0 * m1 * m2 * s - m1 * m1 - m2 * m2 - s * s


def make_verdict(state: SummaryState) -> CollapseVerdict:
    """Collapse iff final s > 0 or a weight fell below 0.01."""
    if state.s > 0.0:
        return CollapseVerdict(True, "mean_alignment", state)
    if min(state.w1, state.w2) < COLLAPSE_WEIGHT:
        return CollapseVerdict(True, "weight_vanishing", state)
    return CollapseVerdict(False, "none", state)


# ---------------------------------------------------------------------------
# auxiliary functions f and g
# ---------------------------------------------------------------------------

def _clip_s(s):
    """Clamp s marginally above 1; reject anything further out."""
    s = np.asarray(s, dtype=float)
    if np.any(s > 1.0 + S_OVER_TOL):
        bad = float(np.max(s))
        raise NumericalDomainError(f"s = {bad} exceeds 1 beyond tolerance", value=bad)
    return np.minimum(s, 1.0)


def _f(s, R, w1, w2, rule: QuadratureRule):
    """f(s) = E[w1 sig(R^2(s-1) + zR sqrt(2(1-s)) - log(w1/w2))^2 + (1<->2)]."""
    s = _clip_s(s)
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    arg0 = R * R * (s - 1.0)
    width = R * np.sqrt(2.0 * (1.0 - s))
    ell = np.log(w1) - np.log(w2)
    z = rule.nodes
    base = arg0[..., None] + width[..., None] * z
    vals = w1[..., None] * expit(base - ell[..., None]) ** 2 \
        + w2[..., None] * expit(base + ell[..., None]) ** 2
    return vals @ rule.weights


def _g(m, R, log_gamma, rule: QuadratureRule):
    """g(m) = 1 - 2 E[sig(2 R^2 m + 2 R z + log gamma)]."""
    m = np.asarray(m, dtype=float)
    z = rule.nodes
    arg = 2.0 * R * R * m[..., None] + 2.0 * R * z + log_gamma
    return 1.0 - 2.0 * (expit(arg) @ rule.weights)


def f_aux(s: float, spec: ProblemSpec, w1: float, rule: QuadratureRule | None = None) -> float:
    """Component-repulsion kernel of the mean flow; strictly positive.

    At s = 1 (or R = 0) the Gaussian term vanishes and f reduces to
    w1 * w2 exactly.
    """
    rule = rule or default_rule()
    w1a = np.asarray(w1, dtype=float)
    out = _f(np.asarray(s, dtype=float), spec.R, w1a, 1.0 - w1a, rule)
    return float(out)


def g_aux(m: float, spec: ProblemSpec, rule: QuadratureRule | None = None) -> float:
    """Target-attraction kernel; strictly decreasing in m for R > 0."""
    rule = rule or default_rule()
    return float(_g(np.asarray(m, dtype=float), spec.R, spec.log_gamma, rule))


def g_root(spec: ProblemSpec, rule: QuadratureRule | None = None, tol: float = 1e-12) -> float:
    """Unique root of g on [-1, 1], by bisection (g is decreasing)."""
    rule = rule or default_rule()
    lo, hi = -1.0, 1.0
    glo = g_aux(lo, spec, rule)
    ghi = g_aux(hi, spec, rule)
    if glo < 0 or ghi > 0:
        # g has no sign change on [-1,1]; can only happen at extreme gamma
        raise NumericalDomainError("g has no root in [-1, 1]", value=(glo, ghi))
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g_aux(mid, spec, rule) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# mean flow
# ---------------------------------------------------------------------------

def _mean_rhs(m1, m2, s, w1, w2, R, log_gamma, rule):
    f = _f(s, R, w1, w2, rule)
    g1 = _g(m1, R, log_gamma, rule)
    g2 = _g(m2, R, log_gamma, rule)
    dm1 = -((m2 - m1 * s) * f + w1 * (1.0 - m1 * m1) * g1)
    dm2 = -((m1 - m2 * s) * f + w2 * (1.0 - m2 * m2) * g2)
    ds = -(2.0 * (1.0 - s * s) * f
           + w1 * (m2 - m1 * s) * g1
           + w2 * (m1 - m2 * s) * g2)
    return dm1, dm2, ds


def mean_flow_rhs(
    state: SummaryState, spec: ProblemSpec, rule: QuadratureRule | None = None
) -> tuple[float, float, float]:
    """Right-hand sides (dm1/dt, dm2/dt, ds/dt) of the descent flow."""
    rule = rule or default_rule()
    out = _mean_rhs(
        np.float64(state.m1), np.float64(state.m2), np.float64(state.s),
        np.float64(state.w1), np.float64(state.w2), spec.R, spec.log_gamma, rule,
    )
    return tuple(float(v) for v in out)


def mean_flow_rhs_raw(
    m1: float, m2: float, s: float, w1: float, spec: ProblemSpec,
    rule: QuadratureRule | None = None,
) -> tuple[float, float, float]:
    """mean_flow_rhs on raw coordinates, bypassing SummaryState bounds.

    Finite-difference Jacobians need to evaluate marginally outside
    [-1, 1]; the formulas extend smoothly everywhere except s > 1.
    """
    rule = rule or default_rule()
    out = _mean_rhs(
        np.float64(m1), np.float64(m2), np.float64(s),
        np.float64(w1), np.float64(1.0 - w1), spec.R, spec.log_gamma, rule,
    )
    return tuple(float(v) for v in out)


# ---------------------------------------------------------------------------
# weight gradients and flows
# ---------------------------------------------------------------------------

def _weight_grads(m1, m2, s, w1, w2, R, log_gamma, w_star, rule):
    s = _clip_s(s)
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    A = R * R * (1.0 - s)
    width = R * np.sqrt(2.0 * (1.0 - s))
    ell = np.log(w1) - np.log(w2)
    z = rule.nodes
    u = A[..., None] + width[..., None] * z

    arg1 = u + ell[..., None]
    arg2 = u - ell[..., None]
    t1 = 2.0 * R * R * m1[..., None] + 2.0 * R * z + log_gamma
    t2 = -2.0 * R * R * m2[..., None] + 2.0 * R * z - log_gamma

    d1 = (
        expit(arg1) @ rule.weights
        + (w2 / w1) * (expit(-2.0 * A[..., None] + arg1) @ rule.weights)
        - log_expit(arg1) @ rule.weights
        + log_expit(t1) @ rule.weights
        + np.log(w1) - math.log(w_star)
        + R * R * (1.0 - m1)
    )
    d2 = (
        expit(arg2) @ rule.weights
        + (w1 / w2) * (expit(-2.0 * A[..., None] + arg2) @ rule.weights)
        - log_expit(arg2) @ rule.weights
        + log_expit(t2) @ rule.weights
        + np.log(w2) - math.log1p(-w_star)
        + R * R * (1.0 + m2)
    )
    return d1, d2


def weight_grads(
    state: SummaryState, spec: ProblemSpec, rule: QuadratureRule | None = None
) -> tuple[float, float]:
    """Partial derivatives of the KL objective w.r.t. (w1, w2).

    The weights are treated as free (unnormalized) coordinates, which is
    what both constrained flows consume.
    """
    rule = rule or default_rule()
    if state.w1 <= W_MIN or state.w1 >= 1.0 - W_MIN:
        warnings.warn(
            "weight at clamp boundary; log(w1/w2) is saturated",
            WeightClampWarning, stacklevel=2,
        )
    d1, d2 = _weight_grads(
        np.float64(state.m1), np.float64(state.m2), np.float64(state.s),
        np.float64(state.w1), np.float64(state.w2),
        spec.R, spec.log_gamma, spec.w_star, rule,
    )
    return float(d1), float(d2)


def reparam_weight_rhs(
    state: SummaryState, spec: ProblemSpec, rule: QuadratureRule | None = None
) -> float:
    """dw1/dt of the normalization-preserving reparametrized flow."""
    d1, d2 = weight_grads(state, spec, rule)
    return -(state.w1**2 + state.w2**2) * (d1 - d2)


def projected_weight_rhs(
    state: SummaryState, spec: ProblemSpec, rule: QuadratureRule | None = None
) -> float:
    """dw1/dt of the step-then-normalize (projected) flow."""
    d1, d2 = weight_grads(state, spec, rule)
    return -(state.w2 * d1 - state.w1 * d2)


def reduced_loss(
    state: SummaryState, spec: ProblemSpec, rule: QuadratureRule | None = None,
    w1: float | None = None, w2: float | None = None,
) -> float:
    """Population KL objective expressed through the summary statistics.

    Exact for means on the sphere of radius R; zero at the global
    minimum.  ``w1``/``w2`` may override the state's weights with
    unnormalized values, which is what finite-difference checks of
    weight_grads need.
    """
    rule = rule or default_rule()
    R, lg = spec.R, spec.log_gamma
    w1 = state.w1 if w1 is None else w1
    w2 = state.w2 if w2 is None else w2
    s = _clip_s(np.float64(state.s))
    A = R * R * (1.0 - s)
    width = R * np.sqrt(2.0 * (1.0 - s))
    ell = math.log(w1) - math.log(w2)
    u = A + width * rule.nodes
    m1, m2 = state.m1, state.m2
    part1 = (
        R * R * (1.0 - m1) + math.log(w1) - math.log(spec.w_star)
        - log_expit(u + ell) @ rule.weights
        + log_expit(2 * R * R * m1 + 2 * R * rule.nodes + lg) @ rule.weights
    )
    part2 = (
        R * R * (1.0 + m2) + math.log(w2) - math.log1p(-spec.w_star)
        - log_expit(u - ell) @ rule.weights
        + log_expit(-2 * R * R * m2 + 2 * R * rule.nodes - lg) @ rule.weights
    )
    return float(w1 * part1 + w2 * part2)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def _gd_scalars(m1, m2, s, w1, w2, f, g1, g2):
    """Inner products needed by the exact discrete spherical-GD map.

    With G_i the projected gradient of mu_i, returns (in units of R^2)
    a_i = mu_star.G_i, b_ij = mu_j.G_i, n_i = |G_i|^2, c = G_1.G_2.
    """
    r1 = m2 - m1 * s
    r2 = m1 - m2 * s
    q1 = 1.0 - m1 * m1
    q2 = 1.0 - m2 * m2
    qs = 1.0 - s * s
    a1 = r1 * f + w1 * q1 * g1
    a2 = r2 * f + w2 * q2 * g2
    b12 = qs * f + w1 * r1 * g1
    b21 = qs * f + w2 * r2 * g2
    n1 = qs * f * f + 2.0 * w1 * r1 * g1 * f + w1 * w1 * q1 * g1 * g1
    n2 = qs * f * f + 2.0 * w2 * r2 * g2 * f + w2 * w2 * q2 * g2 * g2
    c = (-s * qs * f * f
         + f * w2 * g2 * s * (s * m2 - m1)
         + f * w1 * g1 * s * (s * m1 - m2)
         + w1 * w2 * g1 * g2 * (1.0 - m1 * m1 - m2 * m2 + m1 * m2 * s))
    return a1, a2, b12, b21, n1, n2, c


def _euler_mean_step(m1, m2, s, eta, scalars):
    """One spherical gradient-descent step (retraction included), exactly
    mapped to summary statistics."""
    a1, a2, b12, b21, n1, n2, c = scalars
    rho1 = 1.0 / np.sqrt(1.0 + eta * eta * n1)
    rho2 = 1.0 / np.sqrt(1.0 + eta * eta * n2)
    m1n = rho1 * (m1 - eta * a1)
    m2n = rho2 * (m2 - eta * a2)
    sn = rho1 * rho2 * (s - eta * (b12 + b21) + eta * eta * c)
    return m1n, m2n, sn


def _discrete_weight_step(w1, w2, d1, d2, eta, mode):
    """Mirror of the simulator's normalization-preserving weight updates."""
    if mode == "reparametrized":
        dv1 = w2 * (d1 - d2)
        dv2 = w1 * (d2 - d1)
        v1 = w1 - eta * dv1
        v2 = w2 - eta * dv2
    else:  # projected
        v1 = w1 - eta * d1
        v2 = w2 - eta * d2
    tot = v1 + v2
    if tot <= 0 or not np.isfinite(tot):
        # pathological step; pin to the clamp on the side that survived
        return (1.0 - W_MIN, W_MIN) if v1 >= v2 else (W_MIN, 1.0 - W_MIN)
    w1n = v1 / tot
    w1n = min(max(w1n, W_MIN), 1.0 - W_MIN)
    return w1n, 1.0 - w1n


def integrate(
    state0: SummaryState,
    spec: ProblemSpec,
    config: FlowConfig,
    rule: QuadratureRule | None = None,
) -> TrajectoryRecord:
    """Integrate the reduced flow from ``state0``.

    The default euler integrator is the exact summary-statistic image of
    spherical gradient descent at learning rate eta (step, then retract
    to the sphere), so population-gradient simulator runs and reduced
    runs coincide to rounding.  rk4 integrates the continuous flow and
    serves as a reference.  Stops when the continuous RHS norm falls
    below ``stop_grad_norm`` or after ``max_steps``.
    """
    rule = rule or default_rule()
    R, lg, ws = spec.R, spec.log_gamma, spec.w_star
    eta = config.eta
    mode = config.weight_mode
    m1, m2, s = state0.m1, state0.m2, state0.s
    w1, w2 = state0.w1, state0.w2

    times: list[float] = []
    cols: list[tuple] = []

    def fg(m1, m2, s, w1, w2):
        f = _f(np.float64(s), R, np.float64(w1), np.float64(w2), rule)
        g1 = _g(np.float64(m1), R, lg, rule)
        g2 = _g(np.float64(m2), R, lg, rule)
        return float(f), float(g1), float(g2)

    def weight_rhs(m1, m2, s, w1, w2):
        d1, d2 = _weight_grads(
            np.float64(m1), np.float64(m2), np.float64(s),
            np.float64(w1), np.float64(w2), R, lg, ws, rule,
        )
        return float(d1), float(d2)

    converged = False
    step = 0
    while True:
        f, g1, g2 = fg(m1, m2, s, w1, w2)
        scal = _gd_scalars(m1, m2, s, w1, w2, f, g1, g2)
        a1, a2, b12, b21 = scal[0], scal[1], scal[2], scal[3]
        rhs = [-a1, -a2, -(b12 + b21)]
        d1 = d2 = 0.0
        if mode != "fixed":
            d1, d2 = weight_rhs(m1, m2, s, w1, w2)
            if mode == "reparametrized":
                dw1 = -(w1 * w1 + w2 * w2) * (d1 - d2)
            else:
                dw1 = -(w2 * d1 - w1 * d2)
            rhs.append(dw1)
        rhs_norm = float(np.sqrt(np.sum(np.square(rhs))))

        if step % config.record_every == 0 or rhs_norm < config.stop_grad_norm or step == config.max_steps:
            times.append(step * eta)
            cols.append((m1, m2, s, w1, w2, _det_p(m1, m2, s), rhs_norm))
        if rhs_norm < config.stop_grad_norm:
            converged = True
            break
        if step == config.max_steps:
            break

        if config.integrator == "euler":
            m1n, m2n, sn = _euler_mean_step(m1, m2, s, eta, scal)
            if mode != "fixed":
                w1n, w2n = _discrete_weight_step(w1, w2, d1, d2, eta, mode)
            else:
                w1n, w2n = w1, w2
        else:
            m1n, m2n, sn, w1n, w2n = _rk4_step(
                m1, m2, s, w1, w2, eta, mode, fg, weight_rhs
            )
        m1 = float(np.clip(m1n, -1.0, 1.0))
        m2 = float(np.clip(m2n, -1.0, 1.0))
        s = float(np.clip(sn, -1.0, 1.0))
        w1 = float(np.clip(w1n, W_MIN, 1.0 - W_MIN))
        w2 = 1.0 - w1
        step += 1

        if not all(np.isfinite((m1, m2, s, w1))):
            record = _build_record(times, cols, converged=False)
            raise IntegrationError(f"non-finite state at step {step}", record=record)
        if mode != "fixed" and min(w1, w2) <= W_MIN:
            # weight at the clamp: report as weight-collapsed, stop evolving
            times.append(step * eta)
            cols.append((m1, m2, s, w1, w2, _det_p(m1, m2, s), float("nan")))
            converged = True
            break

    return _build_record(times, cols, converged=converged)


def _rk4_step(m1, m2, s, w1, w2, eta, mode, fg, weight_rhs):
    def rhs(y):
        m1, m2, s, w1 = y
        w2 = 1.0 - w1
        f, g1, g2 = fg(m1, m2, s, w1, w2)
        a1, a2, b12, b21, *_ = _gd_scalars(m1, m2, s, w1, w2, f, g1, g2)
        dw1 = 0.0
        if mode != "fixed":
            d1, d2 = weight_rhs(m1, m2, s, w1, w2)
            if mode == "reparametrized":
                dw1 = -(w1 * w1 + w2 * w2) * (d1 - d2)
            else:
                dw1 = -(w2 * d1 - w1 * d2)
        return np.array([-a1, -a2, -(b12 + b21), dw1])

    y = np.array([m1, m2, s, w1])
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * eta * k1)
    k3 = rhs(y + 0.5 * eta * k2)
    k4 = rhs(y + eta * k3)
    yn = y + (eta / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return yn[0], yn[1], yn[2], yn[3], 1.0 - yn[3]


def _build_record(times, cols, converged):
    arr = np.asarray(cols, dtype=float)
    times = np.asarray(times, dtype=float)
    w1f = float(np.clip(arr[-1, 3], W_MIN, 1.0 - W_MIN))
    final = SummaryState(
        m1=float(arr[-1, 0]), m2=float(arr[-1, 1]), s=float(arr[-1, 2]),
        w1=w1f, w2=1.0 - w1f,
    )
    return TrajectoryRecord(
        times=times,
        m1=arr[:, 0], m2=arr[:, 1], s=arr[:, 2],
        w1=arr[:, 3], w2=arr[:, 4],
        detP_series=arr[:, 5], rhs_norm_series=arr[:, 6],
        verdict=make_verdict(final),
        converged=converged,
    )


def integrate_batch(
    m1: np.ndarray,
    m2: np.ndarray,
    s: np.ndarray,
    w1: float,
    spec: ProblemSpec,
    config: FlowConfig,
    rule: QuadratureRule | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized fixed-weight euler integration of many initial states.

    Returns (m1, m2, s, converged) final arrays.  Used by basin maps,
    where thousands of cells evolve under identical settings.
    """
    if config.weight_mode != "fixed":
        raise ConfigurationError("integrate_batch supports fixed weights only")
    rule = rule or default_rule()
    R, lg = spec.R, spec.log_gamma
    eta = config.eta
    m1 = np.array(m1, dtype=float).ravel().copy()
    m2 = np.array(m2, dtype=float).ravel().copy()
    s = np.array(s, dtype=float).ravel().copy()
    n = m1.size
    w1a = np.full(n, float(w1))
    w2a = 1.0 - w1a
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)

    for _ in range(config.max_steps):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        am1, am2, as_ = m1[idx], m2[idx], s[idx]
        aw1, aw2 = w1a[idx], w2a[idx]
        f = _f(as_, R, aw1, aw2, rule)
        g1 = _g(am1, R, lg, rule)
        g2 = _g(am2, R, lg, rule)
        scal = _gd_scalars(am1, am2, as_, aw1, aw2, f, g1, g2)
        a1, a2, b12, b21 = scal[0], scal[1], scal[2], scal[3]
        rhs_norm = np.sqrt(a1**2 + a2**2 + (b12 + b21) ** 2)
        done = rhs_norm < config.stop_grad_norm
        if np.any(done):
            converged[idx[done]] = True
            active[idx[done]] = False
        move = ~done
        if np.any(move):
            j = idx[move]
            sub = tuple(v[move] for v in scal)
            m1n, m2n, sn = _euler_mean_step(am1[move], am2[move], as_[move], eta, sub)
            m1[j] = np.clip(m1n, -1.0, 1.0)
            m2[j] = np.clip(m2n, -1.0, 1.0)
            s[j] = np.clip(sn, -1.0, 1.0)
    return m1, m2, s, converged


# ---------------------------------------------------------------------------
# quasi-collapse asymptotics
# ---------------------------------------------------------------------------

def quasi_predictors(
    spec: ProblemSpec, s: float
) -> tuple[float, float, Callable[[float], float]]:
    """Large-R asymptotic predictors of the quasi-collapse regime.

    Returns (log_w_eq, T_quasi, s_of_t): the equilibrium log-weight
    plateau -R^2 (1 + s) (additive constant absorbed), the e^{R^2}
    trapping-time scale, and the closed-form slow trajectory
    s(t) = -1 + log(e^{R^2} - t) / R^2.
    """
    if spec.R < 1.0:
        raise ConfigurationError("asymptotic predictors assume R >= 1")
    # s = -1 is admitted: the plateau formula is exactly 0 there
    if not -1.0 <= s < 1.0:
        raise ConfigurationError(f"s must lie in [-1, 1), got {s}")
    R2 = spec.R * spec.R
    log_w_eq = -R2 * (1.0 + s)
    t_quasi = math.exp(R2)

    def s_of_t(t: float) -> float:
        if t >= math.exp(R2):
            raise NumericalDomainError("t beyond the recovery time", value=t)
        return -1.0 + math.log(math.exp(R2) - t) / R2

    return log_w_eq, t_quasi, s_of_t


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

TRAJECTORY_HEADER = "t,m1,m2,s,w1,w2,detP,rhs_norm"


def trajectory_to_csv(record: TrajectoryRecord, path=None) -> str:
    """CSV serialization; floats at 17 significant digits round-trip."""
    header = TRAJECTORY_HEADER
    columns = [record.times, record.m1, record.m2, record.s,
               record.w1, record.w2, record.detP_series, record.rhs_norm_series]
    if record.loss_estimate is not None:
        header += ",loss_estimate"
        columns.append(record.loss_estimate)
    lines = [header]
    for i in range(len(record)):
        lines.append(",".join("%.17g" % c[i] for c in columns))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
