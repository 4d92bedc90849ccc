import numpy as np
import pytest
from scipy.special import expit

from gmmflow import (
    ConfigurationError,
    FlowConfig,
    HighDimState,
    NumericalDomainError,
    ProblemSpec,
    SummaryState,
    WeightClampWarning,
    det_p,
    f_aux,
    g_aux,
    g_root,
    gd_step,
    integrate,
    mc_expect,
    mean_flow_rhs,
    population_grad,
    population_loss,
    quasi_predictors,
    reduced_loss,
    reparam_weight_rhs,
    projected_weight_rhs,
    trajectory_to_csv,
    weight_grads,
)
from gmmflow.simulator import SimConfig, target_mean
from conftest import random_realizable_state


def state(m1, m2, s, w1):
    return SummaryState.from_w1(m1, m2, s, w1)


# ---------------------------------------------------------------------------
# f and g
# ---------------------------------------------------------------------------

def test_f_at_unit_overlap_balanced(rule):
    spec = ProblemSpec(R=3.0, w_star=0.5)
    assert f_aux(1.0, spec, 0.5, rule) == pytest.approx(0.25, abs=1e-12)


def test_f_at_unit_overlap_unbalanced(rule):
    spec = ProblemSpec(R=2.0, w_star=2 / 3)
    assert f_aux(1.0, spec, 2 / 3, rule) == pytest.approx(2 / 9, abs=1e-12)


def test_f_at_zero_radius(rule):
    spec = ProblemSpec(R=1e-12, w_star=2 / 3)
    assert f_aux(0.3, spec, 2 / 3, rule) == pytest.approx(2 / 9, abs=1e-12)


def test_f_clamps_marginal_overshoot(rule, spec2):
    assert f_aux(1.0 + 1e-12, spec2, 0.5, rule) == pytest.approx(0.25, abs=1e-12)


def test_f_rejects_large_overshoot(rule, spec2):
    with pytest.raises(NumericalDomainError):
        f_aux(1.0 + 1e-6, spec2, 0.5, rule)


def test_f_positive(rule, spec2):
    for s in np.linspace(-1, 1, 21):
        assert f_aux(float(s), spec2, 2 / 3, rule) > 0.0


def test_f_matches_mc_oracle(rule, spec2):
    R, w1, w2 = 2.0, 2 / 3, 1 / 3
    ell = np.log(w1 / w2)

    def integrand(z, s=0.0):
        base = R * R * (s - 1) + z * R * np.sqrt(2 * (1 - s))
        return w1 * expit(base - ell) ** 2 + w2 * expit(base + ell) ** 2

    est, se = mc_expect(integrand, 10**7, seed=42)
    assert abs(f_aux(0.0, spec2, w1, rule) - est) <= 3 * se


def test_g_at_zero_radius(rule):
    spec = ProblemSpec(R=1e-12, w_star=2 / 3)
    assert g_aux(0.0, spec, rule) == pytest.approx(-1 / 3, abs=1e-12)


def test_g_odd_symmetry_balanced(rule):
    spec = ProblemSpec(R=2.0, w_star=0.5)
    assert abs(g_aux(0.0, spec, rule)) <= 1e-14


def test_g_matches_mc_oracle(rule, spec2):
    R, lg = 2.0, np.log(2.0)
    integrand = lambda z: 1 - 2 * expit(2 * R * R * 0.5 + 2 * R * z + lg)
    est, se = mc_expect(integrand, 10**7, seed=43)
    assert abs(g_aux(0.5, spec2, rule) - est) <= 3 * se


def test_g_strictly_decreasing(rule):
    spec = ProblemSpec(R=1.5, w_star=2 / 3)
    grid = np.linspace(-1, 1, 41)
    vals = [g_aux(float(m), spec, rule) for m in grid]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_g_root_balanced_weights(rule):
    spec = ProblemSpec(R=2.0, w_star=0.5)
    assert abs(g_root(spec, rule)) <= 1e-12


def test_g_root_unbalanced(rule, spec2):
    mh = g_root(spec2, rule)
    assert mh < 0.0  # g(0) < 0 when w_star > 1/2
    assert abs(g_aux(mh, spec2, rule)) <= 1e-11


# ---------------------------------------------------------------------------
# mean flow
# ---------------------------------------------------------------------------

def test_rhs_zero_at_global_minimum(rule, spec2):
    rhs = mean_flow_rhs(state(1.0, -1.0, -1.0, 2 / 3), spec2, rule)
    assert rhs == (0.0, 0.0, 0.0)


def test_rhs_zero_at_g_root_alignment(rule, spec2):
    mh = g_root(spec2, rule)
    rhs = mean_flow_rhs(state(mh, mh, 1.0, 2 / 3), spec2, rule)
    assert np.linalg.norm(rhs) <= 1e-10


def test_rhs_matches_highdim_projection(rule):
    # the reduction is exact: the RHS equals minus the spherical
    # projection of the population gradient at any realizable state
    spec = ProblemSpec(R=2.0, w_star=2 / 3, d=1000)
    m1, m2, s = 0.3, -0.2, 0.1
    R = spec.R
    e = np.eye(spec.d)
    mu1 = R * (m1 * e[0] + np.sqrt(1 - m1 * m1) * e[1])
    alpha = (s - m1 * m2) / np.sqrt(1 - m1 * m1)
    mu2 = R * (m2 * e[0] + alpha * e[1] + np.sqrt(1 - m2 * m2 - alpha * alpha) * e[2])
    hd = HighDimState(means=np.stack([mu1, mu2]), weights=[2 / 3, 1 / 3])
    G, _ = population_grad(hd, spec, rule)
    mu_s = target_mean(spec)
    projected = (
        -float(mu_s @ G[0]) / R**2,
        -float(mu_s @ G[1]) / R**2,
        -float(mu2 @ G[0] + mu1 @ G[1]) / R**2,
    )
    rhs = mean_flow_rhs(state(m1, m2, s, 2 / 3), spec, rule)
    np.testing.assert_allclose(rhs, projected, atol=1e-6)


# ---------------------------------------------------------------------------
# weight gradients and flows
# ---------------------------------------------------------------------------

def test_weight_grads_small_radius(rule):
    spec = ProblemSpec(R=1e-6, w_star=2 / 3)
    d1, d2 = weight_grads(state(0.3, -0.2, 0.1, 0.55), spec, rule)
    assert d1 == pytest.approx(1.0, abs=1e-9)
    assert d2 == pytest.approx(1.0, abs=1e-9)


def test_weight_grads_stationary_at_global_minimum(rule512):
    spec = ProblemSpec(R=3.0, w_star=2 / 3)
    d1, d2 = weight_grads(state(1.0, -1.0, -1.0, 2 / 3), spec, rule512)
    assert abs(d1 - d2) <= 1e-8


def test_weight_grads_match_reduced_loss_fd(rule, spec2):
    st = state(0.5, -0.3, 0.2, 0.6)
    d1, d2 = weight_grads(st, spec2, rule)
    h = 1e-6
    fd1 = (reduced_loss(st, spec2, rule, w1=0.6 + h, w2=0.4)
           - reduced_loss(st, spec2, rule, w1=0.6 - h, w2=0.4)) / (2 * h)
    fd2 = (reduced_loss(st, spec2, rule, w1=0.6, w2=0.4 + h)
           - reduced_loss(st, spec2, rule, w1=0.6, w2=0.4 - h)) / (2 * h)
    assert d1 == pytest.approx(fd1, abs=1e-8)
    assert d2 == pytest.approx(fd2, abs=1e-8)


def test_weight_grads_match_simulator_loss_fd(rule):
    # central finite differences of the simulator's population loss
    spec = ProblemSpec(R=2.0, w_star=2 / 3, d=50)
    m1, m2, s = 0.5, -0.3, 0.2
    e = np.eye(50)
    mu1 = spec.R * (m1 * e[0] + np.sqrt(1 - m1 * m1) * e[1])
    alpha = (s - m1 * m2) / np.sqrt(1 - m1 * m1)
    mu2 = spec.R * (m2 * e[0] + alpha * e[1] + np.sqrt(1 - m2 * m2 - alpha**2) * e[2])
    hd = HighDimState(means=np.stack([mu1, mu2]), weights=[0.6, 0.4])
    d1, d2 = weight_grads(state(m1, m2, s, 0.6), spec, rule)
    h = 1e-5
    fd1 = (population_loss(hd, spec, rule, weights=[0.6 + h, 0.4])
           - population_loss(hd, spec, rule, weights=[0.6 - h, 0.4])) / (2 * h)
    fd2 = (population_loss(hd, spec, rule, weights=[0.6, 0.4 + h])
           - population_loss(hd, spec, rule, weights=[0.6, 0.4 - h])) / (2 * h)
    assert d1 == pytest.approx(fd1, abs=1e-5)
    assert d2 == pytest.approx(fd2, abs=1e-5)


def test_weight_grads_clamp_warning(rule, spec2):
    clamped = SummaryState(m1=0.2, m2=-0.1, s=0.0, w1=1e-12, w2=1.0 - 1e-12)
    with pytest.warns(WeightClampWarning):
        weight_grads(clamped, spec2, rule)


def test_reparam_rhs_zero_at_zero_radius(rule):
    spec = ProblemSpec(R=1e-9, w_star=2 / 3)
    assert abs(reparam_weight_rhs(state(0.3, -0.2, 0.1, 0.6), spec, rule)) <= 1e-12


def test_reparam_rhs_stationary_at_global_minimum(rule512):
    spec = ProblemSpec(R=3.0, w_star=2 / 3)
    assert abs(reparam_weight_rhs(state(1.0, -1.0, -1.0, 2 / 3), spec, rule512)) <= 1e-8


def test_projected_rhs_small_radius_expansion(rule):
    # dw1/dt -> w1 - w2 = 2 (w1 - 1/2): the unstable expansion factor 2
    spec = ProblemSpec(R=1e-7, w_star=2 / 3)
    for w1 in (0.3, 0.55, 0.8):
        got = projected_weight_rhs(state(0.1, -0.2, 0.05, w1), spec, rule)
        assert got == pytest.approx(2 * (w1 - 0.5), abs=1e-9)


def test_projected_rhs_balanced_point(rule):
    spec = ProblemSpec(R=1e-7, w_star=2 / 3)
    assert abs(projected_weight_rhs(state(0.1, -0.2, 0.05, 0.5), spec, rule)) <= 1e-9


def test_projected_rhs_matches_simulator_small_step(rule):
    # (w1' - w1)/eta of the simulator's projected update converges to the
    # flow RHS as eta -> 0
    spec = ProblemSpec(R=0.5, w_star=2 / 3, d=12)
    m1, m2, s = random_realizable_state(3, d=12)
    e = np.eye(12)
    mu1 = spec.R * (m1 * e[0] + np.sqrt(1 - m1 * m1) * e[1])
    alpha = (s - m1 * m2) / np.sqrt(1 - m1 * m1)
    mu2 = spec.R * (m2 * e[0] + alpha * e[1] + np.sqrt(1 - m2 * m2 - alpha**2) * e[2])
    hd = HighDimState(means=np.stack([mu1, mu2]), weights=[0.6, 0.4])
    eta = 1e-6
    cfg = SimConfig(
        spec=spec, flow=FlowConfig(eta=eta, weight_mode="projected"),
        gradient_mode="population",
    )
    grads = population_grad(hd, spec, rule)
    stepped = gd_step(hd, grads, cfg)
    fd = (stepped.weights[0] - hd.weights[0]) / eta
    rhs = projected_weight_rhs(state(m1, m2, s, 0.6), spec, rule)
    assert fd == pytest.approx(rhs, abs=1e-4)


def test_reduced_loss_zero_at_global_minimum(rule):
    spec = ProblemSpec(R=3.0, w_star=2 / 3)
    assert abs(reduced_loss(state(1.0, -1.0, -1.0, 2 / 3), spec, rule)) <= 1e-10


def test_reduced_loss_zero_at_zero_radius(rule):
    spec = ProblemSpec(R=1e-12, w_star=0.4)
    assert abs(reduced_loss(state(0.2, 0.6, 0.1, 0.7), spec, rule)) <= 1e-12


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def test_integrate_fixed_point_is_stationary(rule, spec2):
    st0 = state(1.0, -1.0, -1.0, 2 / 3)
    cfg = FlowConfig(eta=0.05, max_steps=500, weight_mode="reparametrized",
                     stop_grad_norm=1e-300, record_every=1)
    rec = integrate(st0, spec2, cfg, rule)
    assert np.all(rec.m1 == 1.0) and np.all(rec.m2 == -1.0) and np.all(rec.s == -1.0)
    # the weight flow sees the ~1e-10 quadrature residual of d1 - d2
    assert np.max(np.abs(rec.w1 - 2 / 3)) <= 1e-12


def test_integrate_recovers_optimum_at_small_radius(rule):
    spec = ProblemSpec(R=1.0, w_star=2 / 3, d=10)
    cfg = FlowConfig(eta=0.05, max_steps=200000, weight_mode="reparametrized",
                     stop_grad_norm=1e-8)
    rec = integrate(state(0.35, 0.2, 0.15, 2 / 3), spec, cfg, rule)
    assert rec.converged and not rec.verdict.collapsed
    final = rec.final_state
    # global minimum or its label swap
    direct = max(abs(final.m1 - 1), abs(final.m2 + 1), abs(final.s + 1), abs(final.w1 - 2 / 3))
    swapped = max(abs(final.m1 + 1), abs(final.m2 - 1), abs(final.s + 1), abs(final.w2 - 2 / 3))
    assert min(direct, swapped) <= 1e-6


def test_integrate_collapse_basin_endpoint(rule):
    spec = ProblemSpec(R=2.5, w_star=2 / 3, d=10)
    cfg = FlowConfig(eta=0.05, max_steps=400000, weight_mode="reparametrized",
                     stop_grad_norm=1e-10)
    rec = integrate(state(0.35, 0.2, 0.15, 2 / 3), spec, cfg, rule)
    assert rec.verdict.collapsed
    assert rec.final_state.s > 0.0
    assert min(rec.final_state.w1, rec.final_state.w2) < 0.01


def test_euler_rk4_agree_at_small_step(rule):
    spec = ProblemSpec(R=1.5, w_star=2 / 3)
    cfg_e = FlowConfig(eta=0.005, max_steps=100000, weight_mode="fixed", stop_grad_norm=1e-9)
    cfg_r = FlowConfig(eta=0.005, max_steps=100000, weight_mode="fixed",
                       stop_grad_norm=1e-9, integrator="rk4")
    st0 = state(0.3, -0.2, 0.1, 2 / 3)
    fe = integrate(st0, spec, cfg_e, rule).final_state
    fr = integrate(st0, spec, cfg_r, rule).final_state
    assert max(abs(fe.m1 - fr.m1), abs(fe.m2 - fr.m2), abs(fe.s - fr.s)) <= 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_det_p_sign_preserved_along_flow(rule, seed):
    # Gram positivity is dynamically respected for realizable starts
    spec = ProblemSpec(R=2.0, w_star=2 / 3, d=6)
    m1, m2, s = random_realizable_state(seed, d=6)
    cfg = FlowConfig(eta=0.05, max_steps=20000, weight_mode="fixed", stop_grad_norm=1e-8)
    rec = integrate(state(m1, m2, s, 2 / 3), spec, cfg, rule)
    assert float(rec.detP_series.min()) >= -1e-6


def test_weight_modes_preserve_normalization(rule):
    spec = ProblemSpec(R=1.5, w_star=2 / 3, d=10)
    for mode in ("reparametrized", "projected"):
        cfg = FlowConfig(eta=0.05, max_steps=300, weight_mode=mode,
                         stop_grad_norm=1e-300, record_every=1)
        rec = integrate(state(0.3, -0.1, 0.05, 0.6), spec, cfg, rule)
        np.testing.assert_array_equal(rec.w1 + rec.w2, np.ones(len(rec)))


# ---------------------------------------------------------------------------
# f smallness
# ---------------------------------------------------------------------------

def test_log_f_decreases_in_r_squared(rule):
    # genuine exponential smallness: log f(0; R) strictly decreasing in R^2
    vals = [f_aux(0.0, ProblemSpec(R=R, w_star=2 / 3), 2 / 3, rule) for R in (1.0, 1.5, 2.0, 2.5, 3.0)]
    logs = np.log(vals)
    assert np.all(np.diff(logs) < 0)


@pytest.mark.xfail(
    strict=True,
    reason="the claimed O(e^{-2(1-s)R^2}) decay rate of f is contradicted by the "
    "lower bound f >= sig(-|log(w1/w2)|)^2 P(argument > 0) ~ e^{-R^2(1-s)/4}; "
    "measured log-f ratio at (R1,R2)=(2,3), s=0 is ~1.5, not 9/4 (see decisions ledger)",
)
def test_log_f_ratio_scales_like_r_squared(rule):
    f2 = f_aux(0.0, ProblemSpec(R=2.0, w_star=2 / 3), 2 / 3, rule)
    f3 = f_aux(0.0, ProblemSpec(R=3.0, w_star=2 / 3), 2 / 3, rule)
    ratio = np.log(f3) / np.log(f2)
    assert abs(ratio / (9 / 4) - 1.0) <= 0.15


# ---------------------------------------------------------------------------
# quasi predictors and serialization
# ---------------------------------------------------------------------------

def test_quasi_predictors_values():
    spec = ProblemSpec(R=2.0, w_star=2 / 3)
    log_w_eq, t_quasi, s_of_t = quasi_predictors(spec, -1.0)
    assert log_w_eq == 0.0
    log_w_eq, t_quasi, s_of_t = quasi_predictors(spec, 0.0)
    assert log_w_eq == pytest.approx(-4.0)
    assert t_quasi == pytest.approx(np.exp(4.0))
    assert s_of_t(0.0) == pytest.approx(0.0)
    assert s_of_t(np.exp(4.0) - 1.0) == pytest.approx(-1.0)


def test_quasi_predictors_domain():
    with pytest.raises(ConfigurationError):
        quasi_predictors(ProblemSpec(R=0.5, w_star=0.5), 0.0)
    with pytest.raises(ConfigurationError):
        quasi_predictors(ProblemSpec(R=2.0, w_star=0.5), 1.0)


def test_det_p_values():
    assert det_p(state(1.0, -1.0, -1.0, 0.5)) == 0.0
    assert det_p(state(0.0, 0.0, 0.0, 0.5)) == 1.0
    assert det_p(state(1.0, 1.0, 1.0, 0.5)) == 0.0


def test_trajectory_csv_roundtrip(rule, spec2):
    cfg = FlowConfig(eta=0.05, max_steps=50, weight_mode="reparametrized",
                     stop_grad_norm=1e-300, record_every=5)
    rec = integrate(state(0.3, -0.2, 0.1, 0.6), spec2, cfg, rule)
    text = trajectory_to_csv(rec)
    lines = text.strip().split("\n")
    assert lines[0] == "t,m1,m2,s,w1,w2,detP,rhs_norm"
    parsed = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    np.testing.assert_array_equal(parsed[:, 1], rec.m1)   # 17 digits round-trip
    np.testing.assert_array_equal(parsed[:, 6], rec.detP_series)
    assert text == trajectory_to_csv(rec)  # deterministic bytes
