import json
import math

import numpy as np
import pytest

from gmmflow import (
    BracketingError,
    ConfigurationError,
    FlowConfig,
    ProblemSpec,
    SimConfig,
    SummaryState,
    TrajectoryRecord,
    analytic_fixed_points,
    integrate,
)
from gmmflow.reduced import make_verdict
from gmmflow.experiments import (
    BasinMap,
    QuasiFit,
    RcSearchResult,
    basin_map,
    classify_run,
    detect_quasi_episode,
    export,
    quasi_sweep,
    rc_binary_search,
)
from gmmflow.simulator import target_mean


def synthetic_record(minw_series, s_series=None, eta=0.05):
    n = len(minw_series)
    w2 = np.asarray(minw_series, dtype=float)
    s = np.asarray(s_series if s_series is not None else np.full(n, -0.5))
    final_w1 = float(np.clip(1 - w2[-1], 1e-12, 1 - 1e-12))
    final = SummaryState(m1=0.9, m2=float(np.clip(s[-1], -1, 1)), s=float(np.clip(s[-1], -1, 1)),
                         w1=final_w1, w2=1 - final_w1)
    return TrajectoryRecord(
        times=np.arange(n) * eta, m1=np.full(n, 0.9), m2=s.copy(), s=s,
        w1=1 - w2, w2=w2, detP_series=np.zeros(n), rhs_norm_series=np.ones(n),
        verdict=make_verdict(final), converged=True,
    )


# ---------------------------------------------------------------------------
# quasi episode detection
# ---------------------------------------------------------------------------

def test_quasi_detection_requires_sustained_dip():
    w = np.concatenate([np.full(100, 0.3), np.full(20, 0.04), np.full(100, 0.3)])
    ep = detect_quasi_episode(synthetic_record(w))
    assert not ep.entered


def test_quasi_detection_episode_and_duration():
    w = np.concatenate([np.full(100, 0.3), np.full(80, 0.04), np.full(100, 0.3)])
    ep = detect_quasi_episode(synthetic_record(w))
    assert ep.entered and ep.recovered
    assert ep.duration == pytest.approx(79 * 0.05, abs=1e-9)


def test_quasi_detection_tolerates_threshold_chatter():
    # oscillation around the 0.05 line still counts while the window
    # never recovers above 0.2
    dip = np.where(np.arange(120) % 2 == 0, 0.045, 0.055)
    w = np.concatenate([np.full(50, 0.3), dip, np.full(50, 0.3)])
    ep = detect_quasi_episode(synthetic_record(w))
    assert ep.entered and ep.recovered


def test_quasi_detection_no_recovery_is_not_quasi():
    w = np.concatenate([np.full(50, 0.3), np.full(200, 0.005)])
    rec = synthetic_record(w)
    ep = detect_quasi_episode(rec)
    assert ep.entered and not ep.recovered
    assert classify_run(rec) == "collapsed"   # final weight below 0.01


def test_classify_recovered():
    rec = synthetic_record(np.full(300, 0.3), s_series=np.full(300, -0.9))
    assert classify_run(rec) == "recovered"


# ---------------------------------------------------------------------------
# basin maps
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def basin_r1():
    return basin_map(ProblemSpec(R=1.0, w_star=2 / 3), 2 / 3, grid_n=32, s0=0.0)


def test_basin_no_collapse_below_threshold(basin_r1):
    counts = basin_r1.counts()
    assert counts.get("collapse", 0) == 0
    assert counts.get("undecided", 0) == 0


def test_basin_near_optimum_cell(basin_r1):
    i = int(np.argmin(np.abs(basin_r1.m1_grid - 0.9)))
    j = int(np.argmin(np.abs(basin_r1.m2_grid + 0.9)))
    assert basin_r1.labels[i, j] in ("global_min", "flipped")


def test_basin_grid_validation():
    with pytest.raises(ConfigurationError):
        basin_map(ProblemSpec(R=1.0, w_star=2 / 3), 2 / 3, grid_n=16)


@pytest.mark.slow
def test_basin_collapse_quadrants_at_large_radius():
    bmap = basin_map(ProblemSpec(R=3.0, w_star=2 / 3), 2 / 3, grid_n=32, s0=0.0)
    M1, M2 = np.meshgrid(bmap.m1_grid, bmap.m2_grid, indexing="ij")
    quad = (M1 * M2 > 0) & (np.abs(M1) > 0.1) & (np.abs(M2) > 0.1)
    assert np.mean(bmap.labels[quad] == "collapse") >= 0.9
    assert len(bmap.boundary) >= 1
    # near-optimum initialization still converges to a minimum
    i = int(np.argmin(np.abs(bmap.m1_grid - 0.9)))
    j = int(np.argmin(np.abs(bmap.m2_grid + 0.9)))
    assert bmap.labels[i, j] in ("global_min", "flipped")


@pytest.mark.slow
def test_basin_swap_symmetry_at_balanced_weights():
    bmap = basin_map(ProblemSpec(R=2.0, w_star=0.5), 0.5, grid_n=32, s0=0.0)
    swap = {"global_min": "flipped", "flipped": "global_min",
            "collapse": "collapse", "undecided": "undecided"}
    for i in range(32):
        for j in range(32):
            assert bmap.labels[i, j] == swap[bmap.labels[j, i]]


# ---------------------------------------------------------------------------
# quasi sweep
# ---------------------------------------------------------------------------

def _explicit_means(spec, m1, m2, s):
    e = np.eye(spec.d)
    mu1 = spec.R * (m1 * e[0] + math.sqrt(1 - m1 * m1) * e[1])
    alpha = (s - m1 * m2) / math.sqrt(1 - m1 * m1)
    mu2 = spec.R * (m2 * e[0] + alpha * e[1] + math.sqrt(1 - m2 * m2 - alpha**2) * e[2])
    return np.stack([mu1, mu2])


@pytest.mark.slow
def test_quasi_sweep_deterministic(rule):
    # noise-free population runs from a same-side start: quasi episodes
    # whose trapping time grows with R
    spec = ProblemSpec(R=1.8, w_star=2 / 3, d=10)
    cfg = SimConfig(
        spec=spec, gradient_mode="population", init="explicit",
        explicit_means=_explicit_means(spec, 0.35, 0.20, 0.15),
        flow=FlowConfig(eta=0.05, max_steps=60_000, weight_mode="reparametrized",
                        stop_grad_norm=1e-9, record_every=1),
        stability_window=0,
    )
    records, fit = quasi_sweep([1.8, 2.0], cfg, rule)
    assert fit.verdicts == ["quasi", "quasi"]
    assert fit.t_quasi[1] > fit.t_quasi[0] > 0
    assert np.isfinite(fit.log_t_slope)


def test_quasi_sweep_requires_reparametrized(rule, spec2):
    cfg = SimConfig(spec=spec2, flow=FlowConfig(weight_mode="fixed"))
    with pytest.raises(ConfigurationError):
        quasi_sweep([1.0], cfg, rule)


# ---------------------------------------------------------------------------
# rc binary search (with a synthetic prober: no simulations)
# ---------------------------------------------------------------------------

def fake_prober(thresholds):
    def probe(d, R, seed):
        return R >= thresholds[seed]
    return probe


def test_rc_bisection_contract():
    # per-seed threshold recovered within tol
    truth = {0: 2.3, 1: 1.7, 2: 3.1}
    res = rc_binary_search(8, "gmm", [0, 1, 2], (1.0, 4.0), 0.01, fake_prober(truth))
    assert len(res.per_seed_thresholds) == 3
    for t, seed in zip(res.per_seed_thresholds, [0, 1, 2]):
        assert abs(t - truth[seed]) <= 0.01
    assert res.R_c == pytest.approx(np.median(list(truth.values())), abs=0.01)
    assert res.seeds_never_collapsing == []


def test_rc_never_collapsing_seeds():
    truth = {0: 2.0, 1: 100.0, 2: 2.5}
    res = rc_binary_search(8, "gmm", [0, 1, 2], (1.0, 4.0), 0.01, fake_prober(truth))
    assert res.seeds_never_collapsing == [1]
    assert len(res.per_seed_thresholds) == 2


def test_rc_flagged_below_bracket():
    truth = {0: 0.5, 1: 2.0}
    res = rc_binary_search(8, "gmm", [0, 1], (1.0, 4.0), 0.01, fake_prober(truth))
    assert res.flagged_seeds == [0]
    assert res.per_seed_thresholds[0] == 1.0


def test_rc_bracket_validation():
    with pytest.raises(BracketingError):
        rc_binary_search(8, "gmm", [0], (3.0, 1.0), 0.01, fake_prober({0: 2.0}))
    with pytest.raises(ConfigurationError):
        rc_binary_search(8, "gmm", [0], (1.0, 4.0), -0.1, fake_prober({0: 2.0}))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def test_basin_csv_schema(tmp_path, basin_r1):
    path = tmp_path / "basin.csv"
    export(basin_r1, path, "csv")
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "m1_0,m2_0,label"
    assert len(lines) == 32 * 32 + 1


def test_rc_json_schema(tmp_path):
    res = RcSearchResult(d=8, family="gmm", per_seed_thresholds=[2.0, 2.2],
                         R_c=2.1, seeds_never_collapsing=[5], bracket=(1, 4), tol=0.01)
    path = tmp_path / "rc.json"
    export(res, path, "json")
    payload = json.loads(path.read_text())
    assert set(payload) >= {"d", "family", "R_c", "per_seed_thresholds", "seeds_never_collapsing"}
    assert payload["R_c"] == 2.1


def test_export_deterministic_bytes(tmp_path, basin_r1):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    export(basin_r1, a, "csv")
    export(basin_r1, b, "csv")
    assert a.read_bytes() == b.read_bytes()


def test_export_svg_deterministic(tmp_path, basin_r1):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    export(basin_r1, a, "svg")
    export(basin_r1, b, "svg")
    assert a.read_bytes() == b.read_bytes()


def test_export_trajectory_and_fixed_points(tmp_path, rule, spec2):
    rec = integrate(
        SummaryState.from_w1(0.3, -0.2, 0.1, 2 / 3), spec2,
        FlowConfig(eta=0.05, max_steps=20, weight_mode="fixed",
                   stop_grad_norm=1e-300, record_every=1), rule,
    )
    export(rec, tmp_path / "t.csv", "csv")
    assert (tmp_path / "t.csv").read_text().startswith("t,m1,m2,s,w1,w2,detP,rhs_norm")
    export(rec, tmp_path / "t.svg", "svg")
    reports = analytic_fixed_points(spec2, 2 / 3, rule)
    export(reports, tmp_path / "fp.csv", "csv")
    assert (tmp_path / "fp.csv").read_text().startswith("kind,")


def test_export_quasifit(tmp_path):
    fit = QuasiFit(radii=[1.8, 2.0], verdicts=["quasi", "quasi"], t_quasi=[50.0, 120.0],
                   log_t_slope=0.9, log_t_intercept=1.0,
                   plateau_slopes=[-2.0, -2.4], plateau_ratios=[0.6, 0.6])
    export(fit, tmp_path / "q.json", "json")
    payload = json.loads((tmp_path / "q.json").read_text())
    assert payload["log_t_slope"] == 0.9
    export(fit, tmp_path / "q.csv", "csv")
    export(fit, tmp_path / "q.svg", "svg")


def test_export_unknown_format(tmp_path, basin_r1):
    with pytest.raises(ConfigurationError):
        export(basin_r1, tmp_path / "x.bin", "parquet")
