"""Numerical probes of the observability inequalities and time thresholds.

The observability constant is estimated from below: the maximum over
random terminal data of the quotient (initial adjoint energy) / (adjoint
energy on the control regions), optionally sharpened by power iteration on
the pair of quadratic forms.  A zero denominator with nonzero numerator is
reported as the infinity sentinel: violated observability is a first-class
outcome that certifies the time condition in the discrete model, not a
numerical overflow.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .adjoint import region_inner, solve_adjoint
from .errors import DomainError
from .forward import control_masks
from .model import ControlMode
from .util import map_parallel

INFINITE_QUOTIENT = math.inf


@dataclass
class ObservabilityReport:
    estimated_constant: float
    quotient_samples: list
    threshold_margin: float
    mode: ControlMode
    diverged: bool
    estimates_by_trace: list = dc_field(default_factory=list)
    trace_spread: float = 0.0
    power_estimate: float = None
    grid_step: float = 0.0
    geometry: object = None


def _energies(model, grid, geom, n_T, l_T, trace):
    adj = solve_adjoint(model, grid, geom, n_T, l_T, trace, mode=geom.mode)
    wa = grid.age_weights()
    mask_m, mask_f = control_masks(grid, geom)
    mode = geom.mode
    num = 0.0
    den = 0.0
    if mode is not ControlMode.FEMALE_ONLY:
        num += float(np.dot(wa, adj.n.values[:, 0] ** 2))
        den += region_inner(grid, mask_m, adj.n_eff, adj.n_eff)
    if mode is not ControlMode.MALE_ONLY:
        num += float(np.dot(wa, adj.l.values[:, 0] ** 2))
        den += region_inner(grid, mask_f, adj.l_eff, adj.l_eff)
    if mode is ControlMode.MALE_ONLY:
        num += float(np.dot(wa, adj.l.values[:, 0] ** 2))
    return num, den


def observability_ratio(model, grid, geom, n_T, l_T, trace):
    """Quotient of initial adjoint energy over control-region energy.

    Returns the infinity sentinel when the terminal datum is invisible from
    the control region but carries initial energy.
    """
    n_arr = np.zeros(grid.num_age_cells + 1) if n_T is None else np.asarray(n_T, float)
    l_arr = np.zeros(grid.num_age_cells + 1) if l_T is None else np.asarray(l_T, float)
    scale = float(np.max(np.abs(n_arr))) + float(np.max(np.abs(l_arr)))
    if scale == 0.0:
        raise DomainError("observability_ratio: terminal data must not vanish")
    num, den = _energies(model, grid, geom, n_arr, l_arr, trace)
    if den <= 1e-300 * max(num, 1.0):
        return INFINITE_QUOTIENT if num > 0 else 0.0
    return num / den


def _probe_data(rng, grid, geom):
    na = grid.num_age_cells
    mode = geom.mode
    n_T = rng.standard_normal(na + 1)
    l_T = rng.standard_normal(na + 1)
    if mode is ControlMode.MALE_ONLY:
        l_T = np.zeros(na + 1)
        if geom.target_min_age > 0:
            n_T = n_T.copy()
            n_T[grid.ages() < geom.target_min_age] = 0.0
    elif mode is ControlMode.FEMALE_ONLY:
        n_T = np.zeros(na + 1)
    return n_T, l_T


def _terminal_basis(grid, geom):
    """Indices of the live terminal degrees of freedom for the mode."""
    na = grid.num_age_cells
    ages = grid.ages()
    if geom.mode is ControlMode.MALE_ONLY:
        live = np.where(ages >= geom.target_min_age)[0] if geom.target_min_age > 0 \
            else np.arange(na + 1)
        return [("n", int(i)) for i in live]
    if geom.mode is ControlMode.FEMALE_ONLY:
        return [("l", int(i)) for i in range(na + 1)]
    return [("n", i) for i in range(na + 1)] + [("l", i) for i in range(na + 1)]


def _power_iteration(model, grid, geom, trace, iters):
    """Generalized Rayleigh maximization on the (numerator, denominator) forms.

    Assembles both quadratic forms by solving the adjoint on every live
    terminal basis vector.  Terminal directions invisible from the control
    regions but carrying initial energy make the quotient unbounded and are
    detected from the denominator's null space; otherwise the quotient is
    maximized by power iteration on the denominator-whitened numerator.
    """
    basis = _terminal_basis(grid, geom)
    dim = len(basis)
    na = grid.num_age_cells
    wa = grid.age_weights()
    mask_m, mask_f = control_masks(grid, geom)
    h = grid.step
    sq_wa = np.sqrt(wa)
    sqw_m = np.sqrt((h * h * mask_m[1:, None]
                     * np.ones(grid.num_time_cells)).ravel())
    sqw_f = np.sqrt((h * h * mask_f[1:, None]
                     * np.ones(grid.num_time_cells)).ravel())

    num_rows = np.zeros((dim, 2 * (na + 1)))
    den_rows = np.zeros((dim, sqw_m.size + sqw_f.size))
    mode = geom.mode
    for k, (slot, i) in enumerate(basis):
        n_T = np.zeros(na + 1)
        l_T = np.zeros(na + 1)
        (n_T if slot == "n" else l_T)[i] = 1.0
        adj = solve_adjoint(model, grid, geom, n_T, l_T, trace, mode=mode)
        nvec = np.zeros(2 * (na + 1))
        if mode is not ControlMode.FEMALE_ONLY:
            nvec[:na + 1] = sq_wa * adj.n.values[:, 0]
        nvec[na + 1:] = sq_wa * adj.l.values[:, 0]
        num_rows[k] = nvec
        dvec = np.zeros(sqw_m.size + sqw_f.size)
        if mode is not ControlMode.FEMALE_ONLY:
            dvec[:sqw_m.size] = sqw_m * adj.n_eff[1:, 1:].ravel()
        if mode is not ControlMode.MALE_ONLY:
            dvec[sqw_m.size:] = sqw_f * adj.l_eff[1:, 1:].ravel()
        den_rows[k] = dvec
    num_form = num_rows @ num_rows.T
    den_form = den_rows @ den_rows.T

    den_vals, den_vecs = np.linalg.eigh(den_form)
    den_scale = max(float(den_vals[-1]), 0.0)
    num_scale = max(float(np.max(np.abs(num_form))), 1e-300)
    null_cut = 1e-12 * max(den_scale, 1e-300)
    null_space = den_vecs[:, den_vals <= null_cut]
    if null_space.size:
        null_energy = float(np.max(np.sum(null_space * (num_form @ null_space),
                                          axis=0)))
        if null_energy > 1e-10 * num_scale:
            return INFINITE_QUOTIENT
    live = den_vals > null_cut
    if not np.any(live):
        return 0.0
    whiten = den_vecs[:, live] / np.sqrt(den_vals[live])
    reduced = whiten.T @ num_form @ whiten
    z = np.ones(reduced.shape[0])
    z /= np.linalg.norm(z)
    best = 0.0
    for _ in range(max(1, iters)):
        z_new = reduced @ z
        norm = np.linalg.norm(z_new)
        if norm == 0.0:
            break
        best = max(best, float(z @ z_new))
        z = z_new / norm
    best = max(best, float(z @ reduced @ z))
    return best


def estimate_observability_constant(model, grid, geom, traces, *, probes=32,
                                    power_iters=0, seed=0):
    """Lower estimate of the observability constant, repeated per frozen trace.

    Probes are paired across traces (same seeds) so the reported spread
    isolates the trace dependence.  The constant is only ever estimated
    from below; divergence (an unobserved direction) is flagged instead of
    chased.
    """
    traces = [np.asarray(t, dtype=float) for t in traces]
    if not traces:
        raise DomainError("estimate_observability_constant needs at least one trace")
    if probes < 1:
        raise DomainError("probes must be >= 1")

    seeds = [seed + 1000 * k for k in range(probes)]
    # deterministic cone-concentrated probes expose unobserved directions
    # that diffuse random data would average away
    cone = unreachable_from_window(grid, geom.male_window
                                   if geom.mode is not ControlMode.MALE_ONLY
                                   else (0.0, geom.male_window[1]), geom.horizon)
    cone_live = cone & (grid.ages() >= geom.horizon)
    if geom.mode is ControlMode.MALE_ONLY and geom.target_min_age > 0:
        cone_live &= grid.ages() >= geom.target_min_age

    estimates = []
    all_samples = []
    diverged = False
    power_best = None
    for trace in traces:
        def one_probe(probe_seed, _trace=trace):
            rng = np.random.default_rng(probe_seed)
            n_T, l_T = _probe_data(rng, grid, geom)
            return observability_ratio(model, grid, geom, n_T, l_T, _trace)

        samples = map_parallel(one_probe, seeds)
        if geom.mode is not ControlMode.FEMALE_ONLY and np.any(cone_live):
            rng = np.random.default_rng(seed + 99)
            n_T = np.where(cone_live, 1.0 + rng.random(cone_live.size), 0.0)
            samples = samples + [observability_ratio(
                model, grid, geom, n_T, np.zeros_like(n_T), trace)]
        finite = [s for s in samples if math.isfinite(s)]
        if len(finite) < len(samples):
            diverged = True
        estimate = max(finite) if finite else INFINITE_QUOTIENT
        if power_iters > 0:
            power = _power_iteration(model, grid, geom, trace, power_iters)
            if math.isfinite(power):
                estimate = max(estimate, power)
                power_best = power if power_best is None else max(power_best, power)
            else:
                diverged = True
                estimate = INFINITE_QUOTIENT
        estimates.append(estimate)
        all_samples.extend(samples)

    finite_estimates = [e for e in estimates if math.isfinite(e)]
    overall = max(estimates) if estimates else 0.0
    spread = 0.0
    if len(finite_estimates) == len(estimates) and len(estimates) > 1:
        spread = max(estimates) / min(estimates) - 1.0
    return ObservabilityReport(
        estimated_constant=overall,
        quotient_samples=all_samples,
        threshold_margin=geom.time_margin(grid.max_age),
        mode=geom.mode,
        diverged=diverged,
        estimates_by_trace=estimates,
        trace_spread=spread,
        power_estimate=power_best,
        grid_step=grid.step,
        geometry=geom,
    )


# ---------------------------------------------------------------------------
# geometric thresholds and characteristic cones


@dataclass
class ThresholdReport:
    margin_pair: float        # horizon - (a1 + A - a2): coupled and female-only
    margin_male: float        # horizon - (A - a2): male-only
    tail_witness: dict        # a0, kappa certifying the tail vanishing
    trace_witness: dict       # a0, kappa certifying the trace-window inequality


def threshold_margins(geom, max_age):
    """Margins of the strict time conditions plus explicit witnesses.

    The witnesses realize the constructions behind the vanishing of the
    male adjoint tail (slack inside (a1, a2), needs horizon > A - a2) and
    the trace-window chain (needs horizon > a1 + A - a2); both are None
    when the corresponding margin is not strictly positive.
    """
    a1, a2 = geom.male_window
    t_hor = geom.horizon
    margin_pair = t_hor - (a1 + max_age - a2)
    margin_male = t_hor - (max_age - a2)
    tail_witness = None
    if margin_male > 0:
        kappa = min(margin_male, a2 - a1) / 2.0
        tail_witness = {"a0": a2 - kappa, "kappa": kappa}
    trace_witness = None
    if margin_pair > 0:
        kappa = min(margin_pair, a2 - a1) / 4.0
        a0 = a2 - kappa
        trace_witness = {"a0": a0, "kappa": kappa,
                         "trace_window": t_hor - (a1 + kappa),
                         "tail_window": max_age - a0}
    return ThresholdReport(margin_pair=margin_pair, margin_male=margin_male,
                           tail_witness=tail_witness, trace_witness=trace_witness)


def unreachable_from_window(grid, window, horizon):
    """Terminal age nodes whose backward characteristic misses an age window.

    These are the ages where the direct control contribution is identically
    zero: characteristics through (a, T) sweep the ages (a - T, a), which
    avoid (lo, hi) exactly when a <= lo or a - T >= hi.
    """
    ages = grid.ages()
    tol = 1e-9 * max(1.0, grid.max_age)
    if window is None:
        return np.ones(ages.size, dtype=bool)
    lo, hi = window
    return (ages <= lo + tol) | (ages - horizon >= hi - tol)


def forced_terminal_mask(model, grid, geom, p_probes=(0.5, 1.0, 5.0)):
    """Age nodes where the terminal male profile is control-independent.

    Computed from the discrete scheme itself: a terminal node is forced
    when every arrival node on its backward characteristic carries zero
    male-control mask weight, and it is not fed by the birth boundary (age
    at least the horizon, or fertility identically zero, or no control can
    shape the female population).  On the returned nodes the controlled
    solve equals the uncontrolled one exactly, for every admissible
    control.
    """
    ages = grid.ages()
    mode = geom.mode
    mask_m, _ = control_masks(grid, geom)
    nt = grid.num_time_cells

    beta_active = False
    for p in p_probes:
        if float(np.max(np.abs(model.fertility(ages, p)))) > 0:
            beta_active = True
            break
    births_shapeable = beta_active and mode in (ControlMode.BOTH, ControlMode.FEMALE_ONLY)

    forced = np.zeros(ages.size, dtype=bool)
    for i in range(ages.size):
        j_lo = max(1, i - nt + 1)
        direct_dead = not np.any(mask_m[j_lo:i + 1] > 0)
        birth_fed = (i <= nt - 1) and births_shapeable
        forced[i] = direct_dead and not birth_fed
    return forced


def forced_set_measure(grid, mask):
    """Quadrature measure of a forced-age node set."""
    return float(np.dot(grid.age_weights(), mask.astype(float)))
