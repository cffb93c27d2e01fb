"""Forward solver for the state system along characteristics.

Each time step transports interior nodes with per-cell survival ratios,
adds the region-masked control as a piecewise-constant source over the
characteristic cell, evaluates the fertile-male integral at the new level,
and closes the step with the nonlocal birth boundary.  The fertility
argument is either the solution's own fertile-male trace (nonlinear mode)
or a supplied frozen trace (the linear auxiliary mode used by the control
machinery).

Step order is explicit because the male weight vanishes at age zero and
fertility vanishes below the onset age; when a scenario violates the
onset cutoff the birth integral gets one extra boundary sweep, which the
adjoint reproduces exactly (the `boundary_factor` below).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, DimensionError, NumericalFailure
from .grid import Field2D, region_mask
from .model import ControlMode


@dataclass
class StateSolution:
    m: Field2D
    f: Field2D
    fertile_male_trace: np.ndarray  # integral of weight * m per time node
    birth_trace: np.ndarray         # integral of fertility * f per time node
    frozen_trace: np.ndarray = None  # trace the fertility was evaluated at, None if nonlinear


def transport_tables(model, grid):
    """Per-cell survival ratios, nodal weights and masks shared by the solvers."""
    ages = grid.ages()
    na = grid.num_age_cells
    s_m = np.zeros(na + 1)
    s_f = np.zeros(na + 1)
    ints_m = model.mortality_integral("male", ages)
    ints_f = model.mortality_integral("female", ages)
    s_m[1:] = np.exp(ints_m[:-1] - ints_m[1:])
    s_f[1:] = np.exp(ints_f[:-1] - ints_f[1:])
    s_m[na] = model.last_cell_survival
    s_f[na] = model.last_cell_survival
    lam = np.asarray(model.male_fertility_weight(ages), dtype=float)
    wa = grid.age_weights()
    return {"ages": ages, "s_m": s_m, "s_f": s_f, "lam": lam, "wa": wa}


def control_masks(grid, geom):
    """Nodal region masks for the (male, female) control supports of the mode."""
    male = female = None
    if geom.mode is ControlMode.BOTH:
        male = region_mask(grid, *geom.male_window)
        female = region_mask(grid, *geom.female_window)
    elif geom.mode is ControlMode.MALE_ONLY:
        male = region_mask(grid, 0.0, geom.male_window[1])
    elif geom.mode is ControlMode.FEMALE_ONLY:
        female = region_mask(grid, *geom.female_window)
    zero = np.zeros(grid.num_age_cells + 1)
    return (male if male is not None else zero, female if female is not None else zero)


def _as_profile(values, grid, name):
    arr = np.asarray(values, dtype=float)
    if arr.shape != (grid.num_age_cells + 1,):
        raise DimensionError(f"{name} has shape {arr.shape}, expected "
                             f"({grid.num_age_cells + 1},)")
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{name} contains non-finite values")
    return arr


def _control_values(v, grid, name):
    if v is None:
        return None
    if isinstance(v, Field2D):
        if v.grid != grid:
            raise ConsistencyError(f"{name} lives on a different grid")
        return v.values
    arr = np.asarray(v, dtype=float)
    if arr.shape != (grid.num_age_cells + 1, grid.num_time_cells + 1):
        raise DimensionError(f"{name} has shape {arr.shape}")
    return arr


def fertile_male_integral(values, model, grid):
    """Trapezoid integral of weight * profile over age (the M of the birth law)."""
    arr = _as_profile(values, grid, "age profile")
    lam = np.asarray(model.male_fertility_weight(grid.ages()), dtype=float)
    return float(np.dot(grid.age_weights(), lam * arr))


def solve_forward(model, grid, geom, v_m, v_f, m0, f0, frozen_trace=None):
    """Solve the state system forward; frozen_trace=None selects nonlinear mode.

    Controls may be None (treated as zero).  Initial data are nodal age
    profiles.  Raises NumericalFailure with the step index if the solution
    stops being finite.
    """
    na, nt = grid.num_age_cells, grid.num_time_cells
    h = grid.step
    tables = transport_tables(model, grid)
    ages, s_m, s_f, lam, wa = (tables[k] for k in ("ages", "s_m", "s_f", "lam", "wa"))
    mask_m, mask_f = control_masks(grid, geom)
    vm = _control_values(v_m, grid, "v_m")
    vf = _control_values(v_f, grid, "v_f")
    m0 = _as_profile(m0, grid, "m0")
    f0 = _as_profile(f0, grid, "f0")
    if frozen_trace is not None:
        frozen_trace = np.asarray(frozen_trace, dtype=float)
        if frozen_trace.shape != (nt + 1,):
            raise DimensionError(f"frozen trace has shape {frozen_trace.shape}, "
                                 f"expected ({nt + 1},)")

    gamma = model.female_fraction
    m = np.zeros((na + 1, nt + 1))
    f = np.zeros((na + 1, nt + 1))
    m[:, 0] = m0
    f[:, 0] = f0
    male_trace = np.zeros(nt + 1)
    birth_trace = np.zeros(nt + 1)
    # interior weights exclude node 0: the male weight and the fertility both
    # contribute nothing there under the standing hypotheses
    wa_int = wa[1:]

    male_trace[0] = float(np.dot(wa, lam * m0))
    p0 = frozen_trace[0] if frozen_trace is not None else male_trace[0]
    beta0 = np.asarray(model.fertility(ages, p0), dtype=float)
    birth0 = float(np.dot(wa[1:], beta0[1:] * f0[1:]))
    birth_trace[0] = (1.0 + gamma * wa[0] * beta0[0]) * birth0

    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(nt):
            mt = s_m[1:] * m[:-1, n]
            ft = s_f[1:] * f[:-1, n]
            if vm is not None:
                mt = mt + h * mask_m[1:] * vm[1:, n + 1]
            if vf is not None:
                ft = ft + h * mask_f[1:] * vf[1:, n + 1]
            if frozen_trace is not None:
                level_p = frozen_trace[n + 1]
            else:
                level_p = float(np.dot(wa_int, lam[1:] * mt))
            beta = np.asarray(model.fertility(ages, level_p), dtype=float)
            births = float(np.dot(wa_int, beta[1:] * ft))
            # one boundary sweep: exact when fertility vanishes at age zero
            births *= 1.0 + gamma * wa[0] * beta[0]
            m[0, n + 1] = (1.0 - gamma) * births
            f[0, n + 1] = gamma * births
            m[1:, n + 1] = mt
            f[1:, n + 1] = ft
            birth_trace[n + 1] = births
            male_trace[n + 1] = float(np.dot(wa, lam * m[:, n + 1]))
            if not (np.isfinite(m[:, n + 1]).all() and np.isfinite(f[:, n + 1]).all()):
                raise NumericalFailure(
                    f"forward solve lost finiteness at step {n + 1}", step=n + 1)

    return StateSolution(
        m=Field2D(grid, m), f=Field2D(grid, f),
        fertile_male_trace=male_trace, birth_trace=birth_trace,
        frozen_trace=None if frozen_trace is None else frozen_trace.copy(),
    )
