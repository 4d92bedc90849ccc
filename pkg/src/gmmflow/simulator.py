"""Full high-dimensional gradient descent on the KL objective.

Monte Carlo (finite-batch) and quadrature-exact population gradients for
the K-component Gaussian-mixture variational family against the bimodal
target, with spherical or Euclidean geometry and the three weight-update
modes.  For K = 2 spherical population runs the recorded summary
trajectory coincides with the reduced integration to rounding, which is
the reduction-exactness contract.

The target mean is fixed to mu_star = (R, 0, ..., 0).
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .errors import ConfigurationError, NumericalError
from .quadrature import QuadratureRule, default_rule, gaussian_stream
from .reduced import (
    W_MIN,
    CollapseVerdict,
    FlowConfig,
    ProblemSpec,
    SummaryState,
    TrajectoryRecord,
    _det_p,
    _euler_mean_step,
    _gd_scalars,
    _weight_grads,
    make_verdict,
    mean_flow_rhs,
    reduced_loss,
)

log = logging.getLogger(__name__)

# stream ids carved out of the per-seed Philox key space
_INIT_STREAM = 1
_STEP_STREAM_BASE = 16


@dataclass
class HighDimState:
    """Explicit variational means and weights."""

    means: np.ndarray            # (K, d)
    weights: np.ndarray          # (K,), sums to 1
    geometry: str = "spherical"  # spherical | euclidean

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.geometry not in ("spherical", "euclidean"):
            raise ConfigurationError(f"unknown geometry {self.geometry!r}")
        if self.weights.ndim != 1 or self.weights.size != self.means.shape[0]:
            raise ConfigurationError("weights must be one per mean")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigurationError("weights must sum to 1 within 1e-12")
        if np.any(self.weights <= 0) or np.any(self.weights >= 1):
            raise ConfigurationError("weights must lie strictly inside (0, 1)")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def check_norms(self, R: float, tol: float = 1e-9) -> None:
        norms = np.linalg.norm(self.means, axis=1)
        if np.max(np.abs(norms - R)) > tol:
            raise ConfigurationError(f"spherical state has |mu| != R: {norms}")


@dataclass(frozen=True)
class SimConfig:
    spec: ProblemSpec
    flow: FlowConfig = field(default_factory=FlowConfig)
    batch_size: int = 1000
    seed: int = 0
    gradient_mode: str = "stochastic"   # stochastic | population
    init: str = "uniform_sphere"        # uniform_sphere | explicit
    explicit_means: np.ndarray | None = None
    explicit_weights: np.ndarray | None = None
    geometry: str = "spherical"
    optimizer: str = "gd"               # gd | adam (experiment parity only)
    adam_lr: float = 1e-3
    stability_window: int = 200         # recorded steps; 0 disables the check
    stability_eps: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.gradient_mode not in ("stochastic", "population"):
            raise ConfigurationError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.geometry not in ("spherical", "euclidean"):
            raise ConfigurationError(f"unknown geometry {self.geometry!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("uniform_sphere", "explicit"):
            raise ConfigurationError(f"unknown init {self.init!r}")
        if self.gradient_mode == "population" and (
            self.spec.K != 2 or self.geometry != "spherical"
        ):
            raise ConfigurationError("population mode requires K=2 and spherical geometry")


def target_mean(spec: ProblemSpec) -> np.ndarray:
    mu = np.zeros(spec.d)
    mu[0] = spec.R
    return mu


def init_state(config: SimConfig) -> HighDimState:
    """Means i.i.d. uniform on the radius-R sphere (or explicit); weights
    (w_star, 1 - w_star) for K = 2, uniform otherwise."""
    spec = config.spec
    if config.init == "explicit":
        if config.explicit_means is None:
            raise ConfigurationError("explicit init requires explicit_means")
        means = np.array(config.explicit_means, dtype=float)
        weights = (
            np.array(config.explicit_weights, dtype=float)
            if config.explicit_weights is not None
            else _default_weights(spec)
        )
    else:
        rng = gaussian_stream(config.seed, _INIT_STREAM)
        raw = rng.standard_normal((spec.K, spec.d))
        means = spec.R * raw / np.linalg.norm(raw, axis=1, keepdims=True)
        weights = _default_weights(spec)
    return HighDimState(means=means, weights=weights, geometry=config.geometry)


def _default_weights(spec: ProblemSpec) -> np.ndarray:
    if spec.K == 2:
        return np.array([spec.w_star, 1.0 - spec.w_star])
    return np.full(spec.K, 1.0 / spec.K)


def summarize(state: HighDimState, spec: ProblemSpec) -> SummaryState:
    """(m1, m2, s) overlaps normalized by R^2, with the stored weights."""
    if state.K != 2:
        raise ConfigurationError("summarize requires K = 2; use summarize_general")
    m1, m2, s = _summary_raw(state, spec)
    w1 = float(np.clip(state.weights[0], W_MIN, 1.0 - W_MIN))
    return SummaryState(m1=m1, m2=m2, s=s, w1=w1, w2=1.0 - w1)


def _summary_raw(state: HighDimState, spec: ProblemSpec) -> tuple[float, float, float]:
    R2 = spec.R * spec.R
    mu_s = target_mean(spec)
    m1 = float(state.means[0] @ mu_s / R2)
    m2 = float(state.means[1] @ mu_s / R2)
    s = float(state.means[0] @ state.means[1] / R2)
    return m1, m2, s


def summarize_general(state: HighDimState, spec: ProblemSpec):
    """Overlap vector m (K,) and matrix S (K,K), normalized by R^2."""
    R2 = spec.R * spec.R
    m = state.means @ target_mean(spec) / R2
    S = state.means @ state.means.T / R2
    return m, S


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

class GradEstimate(NamedTuple):
    mean_grads: np.ndarray    # (K, d)
    weight_grads: np.ndarray  # (K,)
    loss_estimate: float
    n_rejected: int


def _log_q_tilde_logits(X, means, weights):
    """log of w_j exp(mu_j.x - |mu_j|^2/2) per sample and component."""
    half_sq = 0.5 * np.sum(means * means, axis=1)
    return X @ means.T - half_sq + np.log(weights)


def _loss_integrand(X, means, weights, spec):
    """Per-sample log q - log p; the Gaussian normalizations cancel."""
    logits_q = _log_q_tilde_logits(X, means, weights)
    t_star = X @ target_mean(spec)
    log_p = logsumexp(
        np.stack([math.log(spec.w_star) + t_star, math.log1p(-spec.w_star) - t_star], axis=1),
        axis=1,
    ) - 0.5 * spec.R**2
    return logsumexp(logits_q, axis=1) - log_p, logits_q, t_star


def _project_sphere(grads, means, R):
    coef = np.sum(grads * means, axis=1, keepdims=True) / (R * R)
    return grads - coef * means


def stochastic_grad(
    state: HighDimState, spec: ProblemSpec, B: int, seed: int, step: int = 0
) -> GradEstimate:
    """Unbiased Monte Carlo estimate of the KL gradient.

    Samples x = z + mu_c with the component index c drawn from the
    weights (component-then-Gaussian decomposition of q) on the
    deterministic per-(seed, step) stream.  Per-sample gradients are the
    analytic derivatives of the loss integrand, including the
    sampling-path terms, so both mean and weight gradients are unbiased.
    Spherical geometry returns tangent-projected mean gradients.
    """
    rng = gaussian_stream(seed, _STEP_STREAM_BASE + step)
    K, d = state.K, state.d
    weights = state.weights
    c = np.searchsorted(np.cumsum(weights), rng.random(B), side="right")
    c = np.minimum(c, K - 1)
    Z = rng.standard_normal((B, d))
    X = Z + state.means[c]

    ell, logits_q, t_star = _loss_integrand(X, state.means, weights, spec)
    r = np.exp(logits_q - logsumexp(logits_q, axis=1, keepdims=True))
    T = 2.0 * expit(2.0 * t_star + spec.log_gamma) - 1.0

    finite = np.isfinite(ell) & np.all(np.isfinite(r), axis=1) & np.isfinite(T)
    n_rej = int(B - finite.sum())
    if n_rej:
        log.warning("rejected %d/%d non-finite samples", n_rej, B)
        if n_rej > 0.01 * B:
            raise NumericalError(f"more than 1% non-finite samples ({n_rej}/{B})")
        X, Z, c, ell, r, T = X[finite], Z[finite], c[finite], ell[finite], r[finite], T[finite]
    n = X.shape[0]

    mu_s = target_mean(spec)
    mean_grads = np.empty((K, d))
    r_sum = r.sum(axis=0)
    rX = r.T @ X                                  # (K, d)
    mix = r @ state.means                         # (B, d): sum_j r_j mu_j
    path = mix - T[:, None] * mu_s                # d/dx of the integrand
    for i in range(K):
        sel = c == i
        mean_grads[i] = rX[i] - r_sum[i] * state.means[i] + path[sel].sum(axis=0)
    mean_grads /= n

    # Weight gradients are Rao-Blackwellized over the component index:
    # dL/dw_i = sum_k w_k E[r_i(z+mu_k)]/w_i + E[l(z+mu_i)], with every z
    # of the batch evaluated at every center.  The naive per-sample form
    # carries a delta_{c,i} l(x)/w_i term whose variance blows up like
    # 1/w_i, which destroys the small-weight plateaus this package
    # studies; the analytic component average is unbiased and tame.
    center_resp = np.empty((K, K))   # [k, i] = mean_b of r_i(z_b + mu_k)
    center_ell = np.empty(K)         # [k] = mean_b of l(z_b + mu_k)
    for k in range(K):
        ell_k, logits_k, _ = _loss_integrand(Z + state.means[k], state.means, weights, spec)
        center_resp[k] = np.exp(logits_k - logsumexp(logits_k, axis=1, keepdims=True)).mean(axis=0)
        center_ell[k] = ell_k.mean()
    weight_grads = (weights @ center_resp) / weights + center_ell

    if state.geometry == "spherical":
        mean_grads = _project_sphere(mean_grads, state.means, spec.R)
    return GradEstimate(mean_grads, weight_grads, float(ell.mean()), n_rej)


def _expect_affine(h, a, b, rule):
    """E[h(a + b z)] by quadrature; a, b broadcastable scalars."""
    vals = h(np.asarray(a, dtype=float)[..., None] + np.asarray(b, dtype=float)[..., None] * rule.nodes)
    return vals @ rule.weights


def population_grad(
    state: HighDimState, spec: ProblemSpec, rule: QuadratureRule | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature-exact KL gradient for K = 2.

    Spherical geometry returns the tangent-projected closed form
    (mu2 - s mu1) f(s) + w1 (mu_star - m1 mu1) g(m1) and its mirror;
    Euclidean geometry returns the unprojected gradient, valid for means
    off the sphere.  Weight gradients are exact in both cases.
    """
    rule = rule or default_rule()
    if state.K != 2:
        raise ConfigurationError("population gradients require K = 2")
    R, lg = spec.R, spec.log_gamma
    mu1, mu2 = state.means
    w1, w2 = state.weights
    mu_s = target_mean(spec)

    if state.geometry == "spherical":
        summ = summarize(state, spec)
        m1, m2, s = summ.m1, summ.m2, summ.s
        from .reduced import _f, _g  # local to avoid polluting module surface

        f = float(_f(np.float64(s), R, np.float64(w1), np.float64(w2), rule))
        g1 = float(_g(np.float64(m1), R, lg, rule))
        g2 = float(_g(np.float64(m2), R, lg, rule))
        G1 = (mu2 - s * mu1) * f + w1 * (mu_s - m1 * mu1) * g1
        G2 = (mu1 - s * mu2) * f + w2 * (mu_s - m2 * mu2) * g2
        d1, d2 = _weight_grads(
            np.float64(m1), np.float64(m2), np.float64(s),
            np.float64(w1), np.float64(w2), R, lg, spec.w_star, rule,
        )
        return np.stack([G1, G2]), np.array([float(d1), float(d2)])

    # Euclidean: means may sit off the sphere
    delta = mu1 - mu2
    v = float(np.linalg.norm(delta))
    sq1, sq2 = float(mu1 @ mu1), float(mu2 @ mu2)
    ell_w = math.log(w1) - math.log(w2)
    shift = 0.5 * (sq2 - sq1) + ell_w
    a1 = float(delta @ mu1) + shift     # A(z + mu1) ~ N(a1, v^2)
    a2 = float(delta @ mu2) + shift
    c1 = float(mu_s @ mu1)              # target overlaps, unnormalized
    c2 = float(mu_s @ mu2)

    sig = expit
    E1a = float(_expect_affine(lambda t: sig(t) * (2.0 - sig(t)), a1, v, rule))
    E1b = float(_expect_affine(lambda t: sig(-t) ** 2, a1, v, rule))
    E2a = float(_expect_affine(lambda t: sig(t) ** 2, a2, v, rule))
    E2b = float(_expect_affine(lambda t: sig(-t) * (2.0 - sig(-t)), a2, v, rule))
    g1 = float(1.0 - 2.0 * _expect_affine(sig, 2.0 * c1 + lg, 2.0 * R, rule))
    g2 = float(1.0 - 2.0 * _expect_affine(sig, 2.0 * c2 + lg, 2.0 * R, rule))

    G1 = w1 * (mu1 * E1a + mu2 * E1b + mu_s * g1) + w2 * (mu2 - mu1) * E2a
    G2 = w2 * (mu2 * E2b + mu1 * E2a) + w2 * mu_s * g2 + w1 * (mu1 - mu2) * E1b

    # weight gradients: dL/dw_i = E[l(z + mu_i)] + sum_k w_k E[r_i(z+mu_k)] / w_i
    Es1 = float(_expect_affine(sig, a1, v, rule))      # E[r1] on component-1 samples
    Es2 = float(_expect_affine(sig, a2, v, rule))      # E[r1] on component-2 samples
    l1 = _pop_loss_center(mu1, mu1, sq1, c1, w1, spec, a1, v, rule)
    l2 = _pop_loss_center(mu2, mu1, sq1, c2, w1, spec, a2, v, rule)
    dw1 = l1 + (w1 * Es1 + w2 * Es2) / w1
    dw2 = l2 + (w1 * (1.0 - Es1) + w2 * (1.0 - Es2)) / w2
    return np.stack([G1, G2]), np.array([dw1, dw2])


def _pop_loss_center(mu_i, mu1, sq1, c_i, w1, spec, a_i, v, rule):
    """E[log q - log p] over x = z + mu_i, via 1-D quadratures."""
    R, lg = spec.R, spec.log_gamma
    log_q = float(mu1 @ mu_i) - 0.5 * sq1 + math.log(w1) \
        - float(_expect_affine(log_expit, a_i, v, rule))
    log_p = -0.5 * R * R + math.log(spec.w_star) + c_i \
        - float(_expect_affine(log_expit, 2.0 * c_i + lg, 2.0 * R, rule))
    return log_q - log_p


def population_loss(
    state: HighDimState, spec: ProblemSpec, rule: QuadratureRule | None = None,
    weights: np.ndarray | None = None,
) -> float:
    """Exact population KL for K = 2 (any mean norms).

    ``weights`` may override the state's weights with unnormalized
    values; that is what finite-difference oracles of the weight
    gradients differentiate.
    """
    rule = rule or default_rule()
    if state.K != 2:
        raise ConfigurationError("population loss requires K = 2")
    mu1, mu2 = state.means
    w1, w2 = state.weights if weights is None else np.asarray(weights, dtype=float)
    mu_s = target_mean(spec)
    delta = mu1 - mu2
    v = float(np.linalg.norm(delta))
    sq1, sq2 = float(mu1 @ mu1), float(mu2 @ mu2)
    ell_w = math.log(w1) - math.log(w2)
    shift = 0.5 * (sq2 - sq1) + ell_w
    a1 = float(delta @ mu1) + shift
    a2 = float(delta @ mu2) + shift
    l1 = _pop_loss_center(mu1, mu1, sq1, float(mu_s @ mu1), w1, spec, a1, v, rule)
    l2 = _pop_loss_center(mu2, mu1, sq1, float(mu_s @ mu2), w1, spec, a2, v, rule)
    return float(w1 * l1 + w2 * l2)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def _step_weights(weights, wgrads, eta, mode):
    if mode == "fixed":
        return weights
    if mode == "reparametrized":
        # v-parametrization: dL/dv_i = dL/dw_i - sum_j w_j dL/dw_j when sum v = 1
        dv = wgrads - float(weights @ wgrads)
        v = weights - eta * dv
    else:  # projected: plain step, then renormalize
        v = weights - eta * wgrads
    tot = v.sum()
    if tot <= 0 or not np.isfinite(tot):
        v = np.where(v == v.max(), 1.0, W_MIN)
        tot = v.sum()
    if weights.size == 2:
        # same arithmetic as the reduced integrator, so population runs match it
        w1 = min(max(v[0] / tot, W_MIN), 1.0 - W_MIN)
        return np.array([w1, 1.0 - w1])
    w = np.clip(v / tot, W_MIN, 1.0 - W_MIN)
    return w / w.sum()


def gd_step(state: HighDimState, grads, config: SimConfig) -> HighDimState:
    """One gradient-descent step: means by -eta * grad (with spherical
    retraction), weights by the configured mode, clamped to the simplex."""
    mean_grads, weight_grads = grads[0], grads[1]
    eta = config.flow.eta
    means = state.means - eta * np.asarray(mean_grads)
    if state.geometry == "spherical":
        norms = np.linalg.norm(means, axis=1, keepdims=True)
        means = config.spec.R * means / norms
    weights = _step_weights(state.weights, np.asarray(weight_grads), eta, config.flow.weight_mode)
    return HighDimState(means=means, weights=weights, geometry=state.geometry)


def detect_collapse(record: TrajectoryRecord) -> CollapseVerdict:
    """Final s > 0 (mean alignment, takes precedence) or min weight
    < 0.01 (weight vanishing)."""
    if len(record) == 0:
        raise ConfigurationError("empty trajectory record")
    return make_verdict(record.final_state)


class _Adam:
    """Minimal Adam, used only for experiment parity (never in oracles)."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, grad):
        grad = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class GeneralTrajectoryRecord:
    """Wide-format record for K > 2 runs: full overlap matrix per step."""

    times: np.ndarray
    m: np.ndarray          # (n, K)
    S: np.ndarray          # (n, K, K)
    weights: np.ndarray    # (n, K)
    loss_estimate: np.ndarray
    converged: bool
    collapsed: bool        # weight-vanishing only; alignment is K=2 notion

    def to_csv(self, path=None) -> str:
        K = self.m.shape[1]
        header = ["t"] + [f"m_{i+1}" for i in range(K)]
        header += [f"s_{i+1}{j+1}" for i in range(K) for j in range(i + 1, K)]
        header += [f"w_{i+1}" for i in range(K)] + ["loss_estimate"]
        lines = [",".join(header)]
        for n in range(len(self.times)):
            row = [self.times[n], *self.m[n]]
            row += [self.S[n, i, j] for i in range(K) for j in range(i + 1, K)]
            row += [*self.weights[n], self.loss_estimate[n]]
            lines.append(",".join("%.17g" % v for v in row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def run_simulation(config: SimConfig, rule: QuadratureRule | None = None):
    """init -> gradient -> step loop with convergence detection.

    Convergence: every recorded statistic varies by less than
    ``stability_eps`` over the trailing ``stability_window`` steps (the
    published protocol), or, for population gradients, the gradient norm
    falls below ``flow.stop_grad_norm``.  Attaches a CollapseVerdict;
    non-stable runs are flagged ``converged=False``.
    """
    rule = rule or default_rule()
    spec = config.spec
    state = init_state(config)
    if config.geometry == "spherical":
        state.check_norms(spec.R, tol=1e-6)
    K = state.K
    if config.gradient_mode == "population":
        return _run_population(config, state, rule)

    eta = config.flow.eta
    window = deque(maxlen=config.stability_window if config.stability_window else 1)
    rows = []
    times = []
    adam = _Adam(config.adam_lr) if config.optimizer == "adam" else None
    converged = False
    n_steps = config.flow.max_steps
    for step in range(n_steps + 1):
        est = stochastic_grad(state, spec, config.batch_size, config.seed, step)
        if K == 2:
            m1, m2, s = _summary_raw(state, spec)
            stats = (m1, m2, s, state.weights[0], state.weights[1])
            rhs_norm = float(np.sqrt(np.sum(est.mean_grads**2)))
            if step % config.flow.record_every == 0 or step == n_steps:
                times.append(step * eta)
                rows.append((*stats, _det_p(m1, m2, s), rhs_norm, est.loss_estimate))
        else:
            m, S = summarize_general(state, spec)
            stats = (*m, *state.weights)
            if step % config.flow.record_every == 0 or step == n_steps:
                times.append(step * eta)
                rows.append((m.copy(), S.copy(), state.weights.copy(), est.loss_estimate))
        window.append(stats)
        if config.stability_window and len(window) == config.stability_window:
            arr = np.asarray(window)
            if float(np.max(arr.max(axis=0) - arr.min(axis=0))) < config.stability_eps:
                converged = True
                break
        if step == n_steps:
            break
        if adam is not None:
            # precondition the whole gradient; gd_step re-applies eta, so
            # divide it back out to leave the Adam step size in charge
            flat = adam.step(np.concatenate([est.mean_grads.ravel(), est.weight_grads]))
            d = est.mean_grads.size
            grads = (flat[:d].reshape(est.mean_grads.shape) / eta, flat[d:] / eta)
        else:
            grads = (est.mean_grads, est.weight_grads)
        state = gd_step(state, grads, config)
        if config.flow.weight_mode != "fixed" and state.weights.min() <= W_MIN:
            # a weight at the clamp is reported as collapsed, not evolved
            converged = True
            if K == 2:
                m1, m2, s = _summary_raw(state, spec)
                times.append((step + 1) * eta)
                rows.append((m1, m2, s, state.weights[0], state.weights[1],
                             _det_p(m1, m2, s), float("nan"), est.loss_estimate))
            else:
                m, S = summarize_general(state, spec)
                times.append((step + 1) * eta)
                rows.append((m.copy(), S.copy(), state.weights.copy(), est.loss_estimate))
            break

    if not converged:
        log.info("run did not meet the stability criterion within %d steps", n_steps)
    if K == 2:
        return _rows_to_record(times, rows, converged)
    m_arr = np.array([r[0] for r in rows])
    S_arr = np.array([r[1] for r in rows])
    w_arr = np.array([r[2] for r in rows])
    l_arr = np.array([r[3] for r in rows])
    return GeneralTrajectoryRecord(
        times=np.asarray(times), m=m_arr, S=S_arr, weights=w_arr,
        loss_estimate=l_arr, converged=converged,
        collapsed=bool(w_arr[-1].min() < 0.01),
    )


def _rows_to_record(times, rows, converged) -> TrajectoryRecord:
    arr = np.asarray(rows, dtype=float)
    w1f = float(np.clip(arr[-1, 3], W_MIN, 1.0 - W_MIN))
    final = SummaryState(
        m1=float(np.clip(arr[-1, 0], -1, 1)), m2=float(np.clip(arr[-1, 1], -1, 1)),
        s=float(np.clip(arr[-1, 2], -1, 1)), w1=w1f, w2=1.0 - w1f,
    )
    return TrajectoryRecord(
        times=np.asarray(times, dtype=float),
        m1=arr[:, 0], m2=arr[:, 1], s=arr[:, 2], w1=arr[:, 3], w2=arr[:, 4],
        detP_series=arr[:, 5], rhs_norm_series=arr[:, 6],
        verdict=make_verdict(final), converged=converged,
        loss_estimate=arr[:, 7],
    )


def _run_population(config: SimConfig, state: HighDimState, rule: QuadratureRule):
    """Population-gradient loop (K = 2, spherical).

    The mean update is the retraction step of gd_step; its recorded
    summary trajectory is the exact-discrete euler map of the reduced
    module, which the reduction-exactness suite asserts.
    """
    spec = config.spec
    eta = config.flow.eta
    window = deque(maxlen=config.stability_window if config.stability_window else 1)
    rows, times = [], []
    converged = False
    n_steps = config.flow.max_steps
    for step in range(n_steps + 1):
        mean_grads, wgrads = population_grad(state, spec, rule)
        m1, m2, s = _summary_raw(state, spec)
        w1 = state.weights[0]
        rhs = [float(np.sum(mean_grads**2))]
        if config.flow.weight_mode == "reparametrized":
            dw1 = -(w1**2 + (1 - w1) ** 2) * (wgrads[0] - wgrads[1])
            rhs.append(dw1**2)
        elif config.flow.weight_mode == "projected":
            dw1 = -((1 - w1) * wgrads[0] - w1 * wgrads[1])
            rhs.append(dw1**2)
        rhs_norm = float(np.sqrt(np.sum(rhs)))
        stats = (m1, m2, s, state.weights[0], state.weights[1])
        if step % config.flow.record_every == 0 or step == n_steps:
            loss = reduced_loss(
                SummaryState.from_w1(
                    float(np.clip(m1, -1, 1)), float(np.clip(m2, -1, 1)),
                    float(np.clip(s, -1, 1)), float(np.clip(w1, W_MIN, 1 - W_MIN)),
                ),
                spec, rule,
            )
            times.append(step * eta)
            rows.append((*stats, _det_p(m1, m2, s), rhs_norm, loss))
        window.append(stats)
        if rhs_norm < config.flow.stop_grad_norm:
            converged = True
            break
        if config.stability_window and len(window) == config.stability_window:
            arr = np.asarray(window)
            if float(np.max(arr.max(axis=0) - arr.min(axis=0))) < config.stability_eps:
                converged = True
                break
        if step == n_steps:
            break
        state = gd_step(state, (mean_grads, wgrads), config)
        if config.flow.weight_mode != "fixed" and state.weights.min() <= W_MIN:
            converged = True
            m1, m2, s = _summary_raw(state, spec)
            times.append((step + 1) * eta)
            rows.append((m1, m2, s, state.weights[0], state.weights[1],
                         _det_p(m1, m2, s), float("nan"),
                         rows[-1][7] if rows else float("nan")))
            break
    return _rows_to_record(times, rows, converged)
