"""Fixed points of the fixed-weight reduced flow and their stability.

The five analytic points, their closed-form linearization eigenvalues,
a seeded-grid Newton search for interior fixed points, the det P = 0
constraint they satisfy, and bisection for the critical radius at which
a stable mean-alignment attractor appears.

Stability convention: the linearization is d/dt delta = -H delta, and a
point is stable iff every eigenvalue of H has positive real part.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import BracketingError, ConfigurationError, NumericalDomainError
from .quadrature import QuadratureRule, default_rule
from .reduced import (
    ProblemSpec,
    SummaryState,
    det_p,
    f_aux,
    g_aux,
    g_root,
    mean_flow_rhs,
    mean_flow_rhs_raw,
    _det_p,
    _mean_rhs,
)

log = logging.getLogger(__name__)

ANALYTIC_KINDS = ("global_min", "flipped", "align_pp", "align_mm", "align_root")

ANALYTIC_LOCATIONS = {
    "global_min": (1.0, -1.0, -1.0),
    "flipped": (-1.0, 1.0, -1.0),
    "align_pp": (1.0, 1.0, 1.0),
    "align_mm": (-1.0, -1.0, 1.0),
}


@dataclass(frozen=True)
class FixedPointReport:
    """Location, taxonomy label, eigenvalues and stability verdict."""

    location: tuple[float, float, float]
    kind: str                       # one of ANALYTIC_KINDS or "interior"
    eigenvalues: tuple[float, float, float]   # real parts, ascending
    stable: bool
    detP: float


def fd_jacobian(
    point, spec: ProblemSpec, w1: float,
    rule: QuadratureRule | None = None, step: float = 1e-5,
) -> np.ndarray:
    """Second-order finite-difference Jacobian of the mean flow RHS.

    Uses a one-sided inward stencil for the s column when s + step would
    exceed 1 (the flow is only defined for s <= 1); m may safely step
    marginally outside [-1, 1].
    """
    rule = rule or default_rule()
    x0 = np.asarray(point, dtype=float)

    def F(x):
        return np.asarray(mean_flow_rhs_raw(x[0], x[1], x[2], w1, spec, rule))

    J = np.empty((3, 3))
    for j in range(3):
        if j == 2 and x0[2] + step > 1.0:
            x1 = x0.copy(); x1[j] -= step
            x2 = x0.copy(); x2[j] -= 2 * step
            J[:, j] = (3 * F(x0) - 4 * F(x1) + F(x2)) / (2 * step)
        else:
            xp = x0.copy(); xp[j] += step
            xm = x0.copy(); xm[j] -= step
            J[:, j] = (F(xp) - F(xm)) / (2 * step)
    return J


def _g_prime(m: float, spec: ProblemSpec, rule: QuadratureRule, step: float = 1e-5) -> float:
    """5-point central difference of g."""
    g = lambda x: g_aux(x, spec, rule)
    return (-g(m + 2 * step) + 8 * g(m + step) - 8 * g(m - step) + g(m - 2 * step)) / (12 * step)


def hessian_eigenvalues(
    fp: FixedPointReport | str, spec: ProblemSpec, w1: float,
    rule: QuadratureRule | None = None,
) -> tuple[float, float, float]:
    """Closed-form eigenvalues of H at an analytic fixed point, ascending.

    Each analytic point has one explicit eigenvalue plus a pair from a
    deflated 2x2 block:

      global_min : L = 2f(-1) - w1 g(1) + w2 g(-1),
                   L +- sqrt(4 f(-1)^2 + (w1 g(1) + w2 g(-1))^2)
      flipped    : same with w1 <-> w2
      align_pp   : L = -2f(1) - g(1),
                   L +- sqrt(4 f(1)^2 + (w1 - w2)^2 g(1)^2)
      align_mm   : same with g(1) -> -g(-1)
      align_root : -4 f(1)  and  (a1+a2)/2 - f(1)
                   +- sqrt(((a1-a2)/2)^2 + f(1)^2),
                   a_i = w_i (1 - m^2) g'(m) at the g-root m.

    These agree with finite-difference linearization to ~1e-8; note the
    printed discriminants in the source appendix carry typos at the
    alignment points.
    """
    rule = rule or default_rule()
    kind = fp if isinstance(fp, str) else fp.kind
    if kind not in ANALYTIC_KINDS:
        raise ConfigurationError(
            f"no closed-form eigenvalues for kind {kind!r}; use fd_jacobian"
        )
    w2 = 1.0 - w1
    if kind in ("global_min", "flipped"):
        f = f_aux(-1.0, spec, w1, rule)
        g1 = g_aux(1.0, spec, rule)
        gm1 = g_aux(-1.0, spec, rule)
        wa, wb = (w1, w2) if kind == "global_min" else (w2, w1)
        lam = 2.0 * f - wa * g1 + wb * gm1
        disc = np.sqrt(4.0 * f * f + (wa * g1 + wb * gm1) ** 2)
        eigs = (lam, lam - disc, lam + disc)
    elif kind in ("align_pp", "align_mm"):
        f = f_aux(1.0, spec, w1, rule)
        G = g_aux(1.0, spec, rule) if kind == "align_pp" else -g_aux(-1.0, spec, rule)
        lam = -2.0 * f - G
        disc = np.sqrt(4.0 * f * f + (w1 - w2) ** 2 * G * G)
        eigs = (lam, lam - disc, lam + disc)
    else:
        f = f_aux(1.0, spec, w1, rule)
        mh = g_root(spec, rule)
        gp = _g_prime(mh, spec, rule)
        a1 = w1 * (1.0 - mh * mh) * gp
        a2 = w2 * (1.0 - mh * mh) * gp
        mid = 0.5 * (a1 + a2) - f
        disc = np.sqrt(0.25 * (a1 - a2) ** 2 + f * f)
        eigs = (-4.0 * f, mid - disc, mid + disc)
    return tuple(sorted(float(e) for e in eigs))


def _report(location, kind, eigs) -> FixedPointReport:
    eigs = tuple(sorted(float(e) for e in eigs))
    return FixedPointReport(
        location=tuple(float(v) for v in location),
        kind=kind,
        eigenvalues=eigs,
        stable=bool(eigs[0] > 0.0),
        detP=float(_det_p(*location)),
    )


def analytic_fixed_points(
    spec: ProblemSpec, w1: float, rule: QuadratureRule | None = None
) -> list[FixedPointReport]:
    """The analytic fixed points with closed-form eigenvalues.

    Returns the four corner points always, plus the g-root alignment
    point (m, m, 1) whenever g changes sign on [-1, 1].  At small R with
    strongly unbalanced targets, g(-1) < 0 and that fifth point leaves
    the state space.
    """
    rule = rule or default_rule()
    out = []
    for kind, loc in ANALYTIC_LOCATIONS.items():
        out.append(_report(loc, kind, hessian_eigenvalues(kind, spec, w1, rule)))
    try:
        mh = g_root(spec, rule)
    except NumericalDomainError:
        log.info("g has no root in [-1,1] at R=%g, w_star=%g; 4 analytic points", spec.R, spec.w_star)
        return out
    out.append(_report((mh, mh, 1.0), "align_root",
                       hessian_eigenvalues("align_root", spec, w1, rule)))
    return out


# ---------------------------------------------------------------------------
# interior fixed-point search
# ---------------------------------------------------------------------------

def _batched_jacobian(x, w1, spec, rule, step=1e-6):
    """FD Jacobians for a batch of points, shape (n, 3, 3)."""
    n = x.shape[0]
    J = np.empty((n, 3, 3))
    for j in range(3):
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += step
        xm[:, j] -= step
        # keep s inside the domain: shift the stencil down where needed
        if j == 2:
            over = xp[:, 2] > 1.0
            xp[over, 2] -= step
            xm[over, 2] -= step
        fp = np.stack(_mean_rhs(xp[:, 0], xp[:, 1], xp[:, 2], w1, 1 - w1, spec.R, spec.log_gamma, rule), axis=-1)
        fm = np.stack(_mean_rhs(xm[:, 0], xm[:, 1], xm[:, 2], w1, 1 - w1, spec.R, spec.log_gamma, rule), axis=-1)
        J[:, :, j] = (fp - fm) / (2 * step)
    return J


def numeric_fixed_point_search(
    spec: ProblemSpec, w1: float,
    rule: QuadratureRule | None = None,
    grid_n: int = 16,
) -> list[FixedPointReport]:
    """Interior fixed points of the fixed-weight flow.

    Seeds a grid_n^3 uniform grid over (-0.99, 0.99)^3, runs damped
    Newton with finite-difference Jacobians on every seed in parallel,
    keeps converged roots strictly inside (-1, 1)^3, discards those that
    are really one of the analytic points, deduplicates at 1e-6, and
    attaches finite-difference eigenvalues.  Interior points satisfy the
    det P = 0 Gram constraint.
    """
    if grid_n < 8:
        raise ConfigurationError(f"grid_n must be >= 8, got {grid_n}")
    rule = rule or default_rule()
    ax = np.linspace(-0.99, 0.99, grid_n)
    g1, g2, g3 = np.meshgrid(ax, ax, ax, indexing="ij")
    x = np.stack([g1.ravel(), g2.ravel(), g3.ravel()], axis=-1)
    active = np.ones(x.shape[0], dtype=bool)

    for _ in range(60):
        if not np.any(active):
            break
        xa = x[active]
        F = np.stack(_mean_rhs(xa[:, 0], xa[:, 1], xa[:, 2], w1, 1 - w1, spec.R, spec.log_gamma, rule), axis=-1)
        res = np.linalg.norm(F, axis=1)
        done = res < 1e-12
        J = _batched_jacobian(xa, w1, spec, rule)
        J += 1e-14 * np.eye(3)  # ridge so singular Jacobians cannot abort the batch
        delta = np.linalg.solve(J, F[..., None])[..., 0]
        # damp long steps; they mean the quadratic model is untrustworthy
        norms = np.linalg.norm(delta, axis=1)
        scale = np.where(norms > 0.2, 0.2 / np.maximum(norms, 1e-300), 1.0)
        xa = xa - delta * scale[:, None] * (~done[:, None])
        xa[:, 2] = np.minimum(xa[:, 2], 1.0)  # s may not exceed 1
        bad = ~np.all(np.isfinite(xa), axis=1) | (np.max(np.abs(xa), axis=1) > 1.5)
        xa[bad] = np.nan  # diverged seed: parked, dropped from the active set
        x[active] = xa
        still = np.zeros_like(active)
        still[active] = ~(bad | done)
        active = still

    n_diverged = int(np.sum(~np.isfinite(x[:, 0])))
    if n_diverged:
        log.debug("discarded %d diverged Newton seeds", n_diverged)
    ok = np.all(np.isfinite(x), axis=1) & np.all(np.abs(x) < 1.0 - 1e-6, axis=1) & (x[:, 2] <= 1.0)
    x = x[ok]
    if x.shape[0] == 0:
        return []
    F = np.stack(_mean_rhs(x[:, 0], x[:, 1], x[:, 2], w1, 1 - w1, spec.R, spec.log_gamma, rule), axis=-1)
    res = np.linalg.norm(F, axis=1)
    candidates = x[res < 1e-10]

    # deterministic dedup: sort, then greedy cluster at 1e-6
    if candidates.size == 0:
        return []
    order = np.lexsort((candidates[:, 2], candidates[:, 1], candidates[:, 0]))
    candidates = candidates[order]
    unique: list[np.ndarray] = []
    for c in candidates:
        if not any(np.max(np.abs(c - u)) < 1e-6 for u in unique):
            unique.append(c)

    reports = []
    for c in unique:
        H = -fd_jacobian(c, spec, w1, rule, step=1e-6)
        eigs = np.linalg.eigvals(H)
        reports.append(_report(tuple(c), "interior", tuple(np.sort(eigs.real))))
    return reports


def critical_radius_reduced(
    spec_template: ProblemSpec, w1: float,
    R_lo: float, R_hi: float, tol: float,
    rule: QuadratureRule | None = None,
    grid_n: int = 12,
) -> float:
    """Bisect on R for the appearance of a stable interior fixed point
    with s in (0, 1) (the mean-alignment collapse attractor)."""
    if not (0 < R_lo < R_hi):
        raise BracketingError(f"invalid bracket ({R_lo}, {R_hi})")
    rule = rule or default_rule()

    def has_attractor(R: float) -> bool:
        pts = numeric_fixed_point_search(replace(spec_template, R=R), w1, rule, grid_n)
        return any(p.stable and 0.0 < p.location[2] < 1.0 for p in pts)

    if has_attractor(R_lo):
        raise BracketingError(f"stable interior point already present at R_lo={R_lo}")
    if not has_attractor(R_hi):
        raise BracketingError(f"no stable interior point at R_hi={R_hi}")
    lo, hi = R_lo, R_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if has_attractor(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


FIXED_POINT_HEADER = "kind,m1,m2,s,ev1,ev2,ev3,stable,detP"


def reports_to_csv(reports: list[FixedPointReport], path=None) -> str:
    lines = [FIXED_POINT_HEADER]
    for r in reports:
        vals = (*r.location, *r.eigenvalues, r.detP)
        m1, m2, s, e1, e2, e3, dp = ("%.17g" % v for v in vals)
        lines.append(f"{r.kind},{m1},{m2},{s},{e1},{e2},{e3},{str(r.stable).lower()},{dp}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
