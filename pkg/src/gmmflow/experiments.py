"""Reproduction drivers: basin maps, quasi-collapse sweeps, critical radius.

Each driver returns a plain result object that ``export`` can serialize
to CSV, JSON, or a static SVG figure.  Grid cells, seeds, and radii are
independent work items; assembly is deterministic.
"""

from __future__ import annotations

import json
import logging
import math
import subprocess
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BracketingError, ConfigurationError, NumericalError
from .quadrature import QuadratureRule, default_rule, gauss_hermite_rule
from .reduced import (
    COLLAPSE_WEIGHT,
    FlowConfig,
    ProblemSpec,
    SummaryState,
    TrajectoryRecord,
    integrate_batch,
    trajectory_to_csv,
)
from .fixed_points import FixedPointReport, reports_to_csv
from .simulator import SimConfig, detect_collapse, run_simulation

log = logging.getLogger(__name__)

LABELS = ("global_min", "flipped", "collapse", "undecided")

# endpoint classification: within this sup-norm radius of a fixed point
ENDPOINT_TOL = 0.05

# quasi-collapse detection: a dip of the smaller weight below QUASI_LOW
# lasting at least QUASI_SUSTAIN steps, later recovering above
# QUASI_RECOVER; thresholds are explicit so T_quasi is measurable
QUASI_LOW = 0.05
QUASI_SUSTAIN = 50
QUASI_RECOVER = 0.2


@dataclass
class BasinMap:
    """Endpoint labels of the fixed-weight reduced flow over an
    (m1_0, m2_0) grid at fixed s_0."""

    m1_grid: np.ndarray          # (n,) cell centers
    m2_grid: np.ndarray
    labels: np.ndarray           # (n, n) strings, [i, j] = (m1_grid[i], m2_grid[j])
    s0: float
    spec: ProblemSpec
    w1: float
    boundary: list[np.ndarray] = field(default_factory=list)  # polylines (k, 2)

    def counts(self) -> dict[str, int]:
        vals, cnt = np.unique(self.labels, return_counts=True)
        return dict(zip(vals.tolist(), cnt.tolist()))


def basin_map(
    spec: ProblemSpec,
    w1: float,
    grid_n: int = 64,
    s0: float = 0.0,
    config: FlowConfig | None = None,
    rule: QuadratureRule | None = None,
) -> BasinMap:
    """Integrate the fixed-weight flow from every grid cell and label the
    endpoint by the nearest fixed point.

    Endpoints within ENDPOINT_TOL (sup-norm) of the global minimum or the
    flipped point get those labels; converged endpoints with s > 0 are
    collapse; runs hitting max_steps are undecided, never silently
    classified.
    """
    if grid_n < 32:
        raise ConfigurationError(f"grid_n must be >= 32, got {grid_n}")
    # classification tolerance is ENDPOINT_TOL, so a loose gradient stop and
    # a lighter rule are plenty (label error << 0.05)
    config = config or FlowConfig(eta=0.05, max_steps=40_000, weight_mode="fixed",
                                  stop_grad_norm=1e-5)
    if config.weight_mode != "fixed":
        raise ConfigurationError("basin maps are defined for the fixed-weight flow")
    rule = rule or gauss_hermite_rule(101)
    ax = np.linspace(-1.0 + 1.0 / grid_n, 1.0 - 1.0 / grid_n, grid_n)
    M1, M2 = np.meshgrid(ax, ax, indexing="ij")
    m1f, m2f, sf, conv = integrate_batch(
        M1.ravel(), M2.ravel(), np.full(M1.size, s0), w1, spec, config, rule
    )
    labels = np.full(M1.size, "undecided", dtype=object)
    near_gm = np.maximum.reduce([np.abs(m1f - 1), np.abs(m2f + 1), np.abs(sf + 1)]) < ENDPOINT_TOL
    near_fl = np.maximum.reduce([np.abs(m1f + 1), np.abs(m2f - 1), np.abs(sf + 1)]) < ENDPOINT_TOL
    labels[conv & near_gm] = "global_min"
    labels[conv & near_fl] = "flipped"
    labels[conv & ~near_gm & ~near_fl & (sf > 0)] = "collapse"
    labels = labels.reshape(grid_n, grid_n)
    bmap = BasinMap(m1_grid=ax, m2_grid=ax, labels=labels, s0=s0, spec=spec, w1=w1)
    bmap.boundary = _collapse_boundary(bmap)
    return bmap


def _collapse_boundary(bmap: BasinMap) -> list[np.ndarray]:
    """Marching-squares 0.5-level contours of the collapse indicator."""
    from contourpy import contour_generator

    z = (bmap.labels == "collapse").astype(float)
    if z.max() == 0.0 or z.min() == 1.0:
        return []
    M2, M1 = np.meshgrid(bmap.m2_grid, bmap.m1_grid)
    cg = contour_generator(x=M1, y=M2, z=z)
    return [np.asarray(line) for line in cg.lines(0.5)]


# ---------------------------------------------------------------------------
# quasi-collapse sweep
# ---------------------------------------------------------------------------

@dataclass
class QuasiEpisode:
    entered: bool
    recovered: bool
    t_enter: float = math.nan
    t_exit: float = math.nan

    @property
    def duration(self) -> float:
        return self.t_exit - self.t_enter


@dataclass
class QuasiFit:
    radii: list[float]
    verdicts: list[str]                 # recovered | quasi | collapsed
    t_quasi: list[float]                # nan where no episode
    log_t_slope: float                  # of log T_quasi vs R^2
    log_t_intercept: float
    plateau_slopes: list[float]         # d log(min w) / d(1+s) on the plateau
    plateau_ratios: list[float]         # plateau_slope / (-R^2)


def detect_quasi_episode(record: TrajectoryRecord) -> QuasiEpisode:
    """First sustained dip of min(w1, w2) below QUASI_LOW that later
    recovers above QUASI_RECOVER.

    The episode runs from the first sub-threshold step to the last step
    before the weight regains QUASI_RECOVER; it counts as quasi-collapse
    when at least QUASI_SUSTAIN steps of it sit below QUASI_LOW.
    """
    minw = np.minimum(record.w1, record.w2)
    below = np.flatnonzero(minw < QUASI_LOW)
    if below.size == 0:
        return QuasiEpisode(False, False)
    i0 = int(below[0])
    rec_idx = np.flatnonzero((minw > QUASI_RECOVER) & (np.arange(minw.size) > i0))
    i1 = int(rec_idx[0]) if rec_idx.size else minw.size
    n_below = int(np.sum(minw[i0:i1] < QUASI_LOW))
    if n_below < QUASI_SUSTAIN:
        return QuasiEpisode(False, False)
    if rec_idx.size == 0:
        return QuasiEpisode(True, False, record.times[i0], record.times[-1])
    return QuasiEpisode(True, True, record.times[i0], record.times[i1 - 1])


def classify_run(record: TrajectoryRecord) -> str:
    episode = detect_quasi_episode(record)
    if record.verdict.collapsed:
        return "collapsed"
    if episode.entered and episode.recovered:
        return "quasi"
    return "recovered"


def _plateau_slope(record: TrajectoryRecord) -> float:
    """Regression of log(min w) against (1 + s) over the plateau samples.

    Restricted to s < 0, where the equilibrium-weight prediction is
    stated, and to the sub-threshold part of the dip.
    """
    minw = np.minimum(record.w1, record.w2)
    sel = (minw < QUASI_LOW) & (record.s < 0.0) & (minw > 0)
    if sel.sum() < 10:
        return math.nan
    A = np.vstack([1.0 + record.s[sel], np.ones(int(sel.sum()))]).T
    slope, _ = np.linalg.lstsq(A, np.log(minw[sel]), rcond=None)[0]
    return float(slope)


def quasi_sweep(
    radii: list[float],
    sim_config: SimConfig,
    rule: QuadratureRule | None = None,
) -> tuple[list[TrajectoryRecord], QuasiFit]:
    """Run one simulation per radius and fit the trapping-time scaling.

    Radii whose run shows no recovered quasi episode are excluded from
    the log T_quasi ~ R^2 fit (and logged).  Requires the reparametrized
    weight mode, where the quasi phenomenon lives.
    """
    if sim_config.flow.weight_mode != "reparametrized":
        raise ConfigurationError("quasi sweeps require weight_mode='reparametrized'")
    rule = rule or default_rule()
    records, verdicts, t_quasi, slopes, ratios = [], [], [], [], []
    for R in radii:
        cfg = replace(sim_config, spec=replace(sim_config.spec, R=float(R)))
        if cfg.init == "explicit" and cfg.explicit_means is not None:
            # keep the directions, rescale onto the probe radius
            means = np.asarray(cfg.explicit_means, dtype=float)
            means = float(R) * means / np.linalg.norm(means, axis=1, keepdims=True)
            cfg = replace(cfg, explicit_means=means)
        rec = run_simulation(cfg, rule)
        records.append(rec)
        verdicts.append(classify_run(rec))
        ep = detect_quasi_episode(rec)
        t_quasi.append(ep.duration if ep.entered and ep.recovered else math.nan)
        sl = _plateau_slope(rec)
        slopes.append(sl)
        ratios.append(sl / (-R * R) if np.isfinite(sl) else math.nan)
    tq = np.asarray(t_quasi)
    ok = np.isfinite(tq) & (tq > 0)
    if ok.sum() >= 2:
        r2 = np.asarray(radii, dtype=float)[ok] ** 2
        A = np.vstack([r2, np.ones(int(ok.sum()))]).T
        slope, icpt = np.linalg.lstsq(A, np.log(tq[ok]), rcond=None)[0]
    else:
        log.warning("fewer than 2 quasi episodes; T_quasi fit undefined")
        slope, icpt = math.nan, math.nan
    excluded = [float(r) for r, good in zip(radii, ok) if not good]
    if excluded:
        log.info("radii without a recovered quasi episode, excluded from fit: %s", excluded)
    fit = QuasiFit(
        radii=[float(r) for r in radii], verdicts=verdicts,
        t_quasi=[float(t) for t in t_quasi],
        log_t_slope=float(slope), log_t_intercept=float(icpt),
        plateau_slopes=[float(s) for s in slopes],
        plateau_ratios=[float(r) for r in ratios],
    )
    return records, fit


# ---------------------------------------------------------------------------
# critical-radius search
# ---------------------------------------------------------------------------

@dataclass
class RcSearchResult:
    d: int
    family: str                      # gmm | nf_centered | nf_shifted | nf_multimodal
    per_seed_thresholds: list[float]
    R_c: float                       # median over collapsing seeds
    seeds_never_collapsing: list[int]
    flagged_seeds: list[int] = field(default_factory=list)
    bracket: tuple[float, float] = (0.0, 0.0)
    tol: float = 0.0


def make_gmm_prober(base_config: SimConfig):
    """Collapse probe for the Gaussian-mixture family.

    Runs the simulator to the published stability criterion; undecided
    (non-stable) runs are retried once with a doubled step budget.
    """

    def probe(d: int, R: float, seed: int) -> bool:
        cfg = replace(
            base_config,
            spec=replace(base_config.spec, R=float(R), d=int(d)),
            seed=int(seed),
        )
        rec = run_simulation(cfg)
        if not rec.converged:
            log.info("non-stable run at d=%d R=%.3f seed=%d; retrying with doubled budget", d, R, seed)
            cfg = replace(cfg, flow=replace(cfg.flow, max_steps=2 * cfg.flow.max_steps))
            rec = run_simulation(cfg)
        return detect_collapse(rec).collapsed

    return probe


def make_nf_prober(prior: str, budget: int = 4000, command: list[str] | None = None):
    """Collapse probe calling the normalizing-flow harness as an external
    process over the JSON stdin/stdout bridge."""
    command = command or [sys.executable, "-m", "nf_harness.bridge"]

    def probe(d: int, R: float, seed: int) -> bool:
        job = {"d": int(d), "R": float(R), "prior": prior, "seed": int(seed), "budget": int(budget)}
        proc = subprocess.run(
            command, input=json.dumps(job), capture_output=True, text=True, timeout=3600
        )
        if proc.returncode != 0:
            raise NumericalError(f"nf bridge failed for {job}: {proc.stderr.strip()}")
        verdict = json.loads(proc.stdout)
        return bool(verdict["collapsed"])

    return probe


def rc_binary_search(
    d: int,
    family: str,
    seeds: list[int],
    bracket: tuple[float, float],
    tol: float,
    sim_factory,
) -> RcSearchResult:
    """Per-seed bisection of the collapse threshold radius.

    ``sim_factory(d, R, seed) -> bool`` decides collapse at convergence.
    Seeds that do not collapse anywhere in the bracket are reported
    separately; seeds already collapsing at the lower edge are flagged
    (threshold at or below the bracket).  The aggregate R_c is the
    median over collapsing seeds.
    """
    R_lo, R_hi = bracket
    if not (0 < R_lo < R_hi):
        raise BracketingError(f"invalid bracket {bracket}")
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    thresholds: list[float] = []
    never: list[int] = []
    flagged: list[int] = []
    for seed in seeds:
        if not sim_factory(d, R_hi, seed):
            never.append(int(seed))
            continue
        if sim_factory(d, R_lo, seed):
            flagged.append(int(seed))
            thresholds.append(float(R_lo))
            continue
        lo, hi = float(R_lo), float(R_hi)
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if sim_factory(d, mid, seed):
                hi = mid
            else:
                lo = mid
        thresholds.append(0.5 * (lo + hi))
    r_c = float(np.median(thresholds)) if thresholds else math.nan
    if not thresholds:
        log.warning("no collapsing seeds for d=%d family=%s in bracket %s", d, family, bracket)
    return RcSearchResult(
        d=int(d), family=family, per_seed_thresholds=[float(t) for t in thresholds],
        R_c=r_c, seeds_never_collapsing=never, flagged_seeds=flagged,
        bracket=(float(R_lo), float(R_hi)), tol=float(tol),
    )


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

BASIN_HEADER = "m1_0,m2_0,label"


def _basin_csv(bmap: BasinMap) -> str:
    lines = [BASIN_HEADER]
    for i, m1 in enumerate(bmap.m1_grid):
        for j, m2 in enumerate(bmap.m2_grid):
            lines.append("%.17g,%.17g,%s" % (m1, m2, bmap.labels[i, j]))
    return "\n".join(lines) + "\n"


def _rc_json(res: RcSearchResult) -> str:
    payload = {
        "d": res.d,
        "family": res.family,
        "R_c": None if math.isnan(res.R_c) else res.R_c,
        "per_seed_thresholds": res.per_seed_thresholds,
        "seeds_never_collapsing": res.seeds_never_collapsing,
        "flagged_seeds": res.flagged_seeds,
        "bracket": list(res.bracket),
        "tol": res.tol,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _quasi_csv(fit: QuasiFit) -> str:
    lines = ["R,verdict,T_quasi,plateau_slope,plateau_ratio"]
    for r, v, t, sl, ra in zip(fit.radii, fit.verdicts, fit.t_quasi,
                               fit.plateau_slopes, fit.plateau_ratios):
        lines.append("%.17g,%s,%.17g,%.17g,%.17g" % (r, v, t, sl, ra))
    return "\n".join(lines) + "\n"


def _quasi_json(fit: QuasiFit) -> str:
    payload = {
        "radii": fit.radii, "verdicts": fit.verdicts, "t_quasi": fit.t_quasi,
        "log_t_slope": fit.log_t_slope, "log_t_intercept": fit.log_t_intercept,
        "plateau_slopes": fit.plateau_slopes, "plateau_ratios": fit.plateau_ratios,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _setup_svg():
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "gmmflow"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    import matplotlib.pyplot as plt
    plt.close(fig)


def _basin_svg(bmap: BasinMap, path):
    plt = _setup_svg()
    code = {"global_min": 0, "flipped": 1, "collapse": 2, "undecided": 3}
    z = np.vectorize(code.get)(bmap.labels)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    extent = [bmap.m2_grid[0], bmap.m2_grid[-1], bmap.m1_grid[0], bmap.m1_grid[-1]]
    im = ax.imshow(z, origin="lower", extent=extent, vmin=0, vmax=3, cmap="viridis")
    for line in bmap.boundary:
        ax.plot(line[:, 1], line[:, 0], "k--", lw=1)
    ax.set_xlabel("m2(0)")
    ax.set_ylabel("m1(0)")
    ax.set_title(f"endpoint basins, R={bmap.spec.R:g}, s0={bmap.s0:g}")
    fig.colorbar(im, ax=ax, ticks=[0, 1, 2, 3])
    _save_svg(fig, path)


def _trajectory_svg(record: TrajectoryRecord, path):
    plt = _setup_svg()
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    ax1.plot(record.times, record.m1, label="m1")
    ax1.plot(record.times, record.m2, label="m2")
    ax1.plot(record.times, record.s, label="s")
    ax1.legend(); ax1.set_ylabel("overlap")
    ax2.semilogy(record.times, np.minimum(record.w1, record.w2), label="min w")
    ax2.legend(); ax2.set_xlabel("t"); ax2.set_ylabel("weight")
    _save_svg(fig, path)


def _quasi_svg(fit: QuasiFit, path):
    plt = _setup_svg()
    fig, ax = plt.subplots(figsize=(5, 4))
    r2 = np.asarray(fit.radii) ** 2
    tq = np.asarray(fit.t_quasi)
    ok = np.isfinite(tq)
    ax.plot(r2[ok], np.log(tq[ok]), "o", label="measured")
    if np.isfinite(fit.log_t_slope):
        xs = np.linspace(r2[ok].min(), r2[ok].max(), 50)
        ax.plot(xs, fit.log_t_slope * xs + fit.log_t_intercept, "-",
                label=f"fit slope {fit.log_t_slope:.2f}")
    ax.set_xlabel("R^2"); ax.set_ylabel("log T_quasi"); ax.legend()
    _save_svg(fig, path)


def _rc_svg(results: list[RcSearchResult], path):
    plt = _setup_svg()
    fig, ax = plt.subplots(figsize=(5, 4))
    by_family: dict[str, list[RcSearchResult]] = {}
    for r in results:
        by_family.setdefault(r.family, []).append(r)
    for fam, rs in sorted(by_family.items()):
        rs = sorted(rs, key=lambda r: r.d)
        ax.plot([r.d for r in rs], [r.R_c for r in rs], "o-", label=fam)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("d"); ax.set_ylabel("R_c"); ax.legend()
    _save_svg(fig, path)


def export(result, path, format: str = "csv") -> None:
    """Serialize a result object; fixed schemas, deterministic bytes."""
    if format not in ("csv", "json", "svg"):
        raise ConfigurationError(f"unknown format {format!r}")
    try:
        if format == "svg":
            if isinstance(result, BasinMap):
                _basin_svg(result, path)
            elif isinstance(result, TrajectoryRecord):
                _trajectory_svg(result, path)
            elif isinstance(result, QuasiFit):
                _quasi_svg(result, path)
            elif isinstance(result, RcSearchResult):
                _rc_svg([result], path)
            elif isinstance(result, list) and all(isinstance(r, RcSearchResult) for r in result):
                _rc_svg(result, path)
            else:
                raise ConfigurationError(f"no svg renderer for {type(result).__name__}")
            return
        if isinstance(result, BasinMap):
            text = _basin_csv(result) if format == "csv" else _basin_json(result)
        elif isinstance(result, TrajectoryRecord):
            if format != "csv":
                raise ConfigurationError("trajectories serialize to csv")
            text = trajectory_to_csv(result)
        elif isinstance(result, RcSearchResult):
            text = _rc_json(result) if format == "json" else _rc_csv(result)
        elif isinstance(result, QuasiFit):
            text = _quasi_json(result) if format == "json" else _quasi_csv(result)
        elif isinstance(result, list) and all(isinstance(r, FixedPointReport) for r in result):
            if format != "csv":
                raise ConfigurationError("fixed-point reports serialize to csv")
            text = reports_to_csv(result)
        else:
            raise ConfigurationError(f"cannot export {type(result).__name__} as {format}")
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise ConfigurationError(f"cannot write {path}: {exc}") from exc


def _basin_json(bmap: BasinMap) -> str:
    payload = {
        "R": bmap.spec.R, "w_star": bmap.spec.w_star, "w1": bmap.w1, "s0": bmap.s0,
        "m1_grid": bmap.m1_grid.tolist(), "m2_grid": bmap.m2_grid.tolist(),
        "labels": bmap.labels.tolist(),
        "counts": bmap.counts(),
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _rc_csv(res: RcSearchResult) -> str:
    lines = ["seed_rank,threshold"]
    for i, t in enumerate(res.per_seed_thresholds):
        lines.append("%d,%.17g" % (i, t))
    return "\n".join(lines) + "\n"
