"""Penalty-functional control synthesis for the frozen-trace system.

The optimization variable is the control itself, restricted to the nodes
that actually couple to the state (inside the region mask, time levels
1..Nt).  In that space the objective is

    J(v) = 1/2 ||v||^2  +  1/(2 eps) ||m(T)||^2  (+ 1/(2 theta) ||f(T)||^2)

with mode-appropriate terminal terms, its Hessian is identity plus a
positive semidefinite compact part, and plain conjugate gradients converge
without preconditioning.  Gradients come from one adjoint sweep and are
exact for the discrete objective because the adjoint is the exact
transpose of the forward map.

In the single-control modes the lone terminal term is weighted by
``epsilon``; ``theta`` only matters for the coupled mode.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .adjoint import _sweep_from_work
from .errors import ConfigurationError, ConsistencyError
from .forward import control_masks, solve_forward
from .grid import Field2D, region_mask
from .model import ControlMode

FLAG_NON_ADMISSIBLE = "NON_ADMISSIBLE"
FLAG_CONVERGENCE_NOT_REACHED = "CONVERGENCE_NOT_REACHED"
FLAG_TARGET_NOT_REACHED = "TARGET_NOT_REACHED"
FLAG_FIXED_POINT_NOT_REACHED = "FIXED_POINT_NOT_REACHED"


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1e-2
    ratio: float = 10.0
    stages: int = 4

    def values(self):
        return [self.start / self.ratio**k for k in range(self.stages)]


@dataclass
class PenaltyProblem:
    epsilon: float = 1e-2
    theta: float = 1e-2
    target_norm: float = 1e-3
    mode: ControlMode = ControlMode.BOTH
    max_cg_iters: int = 800
    cg_tol: float = 1e-9
    schedule: EpsilonSchedule = dc_field(default_factory=EpsilonSchedule)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.mode is ControlMode.BOTH and self.theta <= 0:
            raise ConfigurationError("theta must be positive in coupled mode")
        if self.target_norm <= 0:
            raise ConfigurationError("target_norm must be positive")


@dataclass
class ControlResult:
    v_m: Field2D
    v_f: Field2D
    terminal_m_norm: float
    terminal_f_norm: float
    J_value: float
    cg_trace: list
    iterations: int
    converged: bool
    flags: list
    epsilon: float
    theta: float
    stage_history: list = dc_field(default_factory=list)

    @property
    def target_norms(self):
        return self.terminal_m_norm, self.terminal_f_norm


class ControlSpace:
    """Active control degrees of freedom over one region mask."""

    def __init__(self, grid, mask):
        self.grid = grid
        self.mask = mask
        idx = np.where(mask > 0)[0]
        self.idx = idx[idx >= 1]  # the age-zero node never couples to the state
        self.wq = (grid.step**2) * mask[self.idx]

    def pack(self, values):
        return values[self.idx, 1:].copy()

    def unpack(self, packed):
        full = np.zeros((self.grid.num_age_cells + 1, self.grid.num_time_cells + 1))
        full[self.idx, 1:] = packed
        return full

    def zeros(self):
        return np.zeros((self.idx.size, self.grid.num_time_cells))

    def inner(self, u, v):
        return float(np.sum(self.wq[:, None] * u * v))


def build_spaces(grid, geom):
    """(male space or None, female space or None) for the geometry's mode."""
    mask_m, mask_f = control_masks(grid, geom)
    male = ControlSpace(grid, mask_m) if geom.mode is not ControlMode.FEMALE_ONLY else None
    female = ControlSpace(grid, mask_f) if geom.mode is not ControlMode.MALE_ONLY else None
    return male, female


def terminal_weights(grid, geom):
    """Quadratic-form weights of the terminal penalty terms (W_m, W_f)."""
    wa = grid.age_weights()
    if geom.mode is ControlMode.BOTH:
        return wa, wa
    if geom.mode is ControlMode.MALE_ONLY:
        if geom.target_min_age > 0:
            wm = grid.step * region_mask(grid, geom.target_min_age, grid.max_age)
        else:
            wm = wa
        return wm, None
    return None, wa


def _check_modes(problem, geom):
    if problem.mode is not geom.mode:
        raise ConsistencyError(
            f"penalty mode {problem.mode} does not match geometry mode {geom.mode}")


class _Workspace:
    """Caches everything reused across CG iterations for one (eps, theta)."""

    def __init__(self, problem, model, grid, geom, trace, m0, f0):
        _check_modes(problem, geom)
        self.problem = problem
        self.model = model
        self.grid = grid
        self.geom = geom
        self.trace = np.asarray(trace, dtype=float)
        self.m0 = np.asarray(m0, dtype=float)
        self.f0 = np.asarray(f0, dtype=float)
        self.male, self.female = build_spaces(grid, geom)
        self.spaces = [s for s in (self.male, self.female) if s is not None]
        self.w_m, self.w_f = terminal_weights(grid, geom)
        self.zero_profile = np.zeros(grid.num_age_cells + 1)

    def fields_from_packed(self, packed):
        i = 0
        vm = vf = None
        if self.male is not None:
            vm = self.male.unpack(packed[i]); i += 1
        if self.female is not None:
            vf = self.female.unpack(packed[i])
        return vm, vf

    def forward(self, packed, with_data):
        vm, vf = self.fields_from_packed(packed)
        m0 = self.m0 if with_data else self.zero_profile
        f0 = self.f0 if with_data else self.zero_profile
        return solve_forward(self.model, self.grid, self.geom,
                             None if vm is None else Field2D(self.grid, vm),
                             None if vf is None else Field2D(self.grid, vf),
                             m0, f0, frozen_trace=self.trace)

    def adjoint_packed(self, m_term, f_term, sign):
        """Pack the adjoint of sign/eps-weighted terminal states onto the spaces."""
        h = self.grid.step
        eps, theta = self.problem.epsilon, self.effective_theta()
        work_n = np.zeros_like(self.zero_profile)
        work_l = np.zeros_like(self.zero_profile)
        if self.w_m is not None:
            work_n = sign * self.w_m * m_term / (h * eps)
        if self.w_f is not None:
            work_l = sign * self.w_f * f_term / (h * theta)
        _, _, n_eff, l_eff = _sweep_from_work(self.model, self.grid,
                                              work_n, work_l, self.trace)
        out = []
        if self.male is not None:
            out.append(n_eff[self.male.idx, 1:])
        if self.female is not None:
            out.append(l_eff[self.female.idx, 1:])
        return out

    def effective_theta(self):
        return self.problem.theta if self.geom.mode is ControlMode.BOTH \
            else self.problem.epsilon

    def apply_hessian(self, packed):
        state = self.forward(packed, with_data=False)
        adj = self.adjoint_packed(state.m.values[:, -1], state.f.values[:, -1], +1.0)
        return [p + a for p, a in zip(packed, adj)]

    def rhs(self):
        state = self.forward([s.zeros() for s in self.spaces], with_data=True)
        return self.adjoint_packed(state.m.values[:, -1], state.f.values[:, -1], -1.0)

    def inner(self, x, y):
        return sum(s.inner(a, b) for s, a, b in zip(self.spaces, x, y))

    def objective(self, packed, state=None):
        if state is None:
            state = self.forward(packed, with_data=True)
        value = 0.5 * self.inner(packed, packed)
        if self.w_m is not None:
            value += 0.5 / self.problem.epsilon * float(
                np.dot(self.w_m, state.m.values[:, -1] ** 2))
        if self.w_f is not None:
            value += 0.5 / self.effective_theta() * float(
                np.dot(self.w_f, state.f.values[:, -1] ** 2))
        return value

    def gradient(self, packed):
        state = self.forward(packed, with_data=True)
        adj = self.adjoint_packed(state.m.values[:, -1], state.f.values[:, -1], -1.0)
        return [p - a for p, a in zip(packed, adj)]

    def terminal_norms(self, state):
        wa = self.grid.age_weights()
        wm = self.w_m if self.w_m is not None else wa
        m_norm = float(np.sqrt(np.dot(wm, state.m.values[:, -1] ** 2)))
        f_norm = float(np.sqrt(np.dot(wa, state.f.values[:, -1] ** 2)))
        return m_norm, f_norm


def evaluate_objective(problem, model, grid, geom, trace, m0, f0, v_m, v_f):
    """Value of the penalty functional at the given controls."""
    ws = _Workspace(problem, model, grid, geom, trace, m0, f0)
    zeros2 = np.zeros((grid.num_age_cells + 1, grid.num_time_cells + 1))
    packed = []
    if ws.male is not None:
        packed.append(ws.male.pack(v_m.values if v_m is not None else zeros2))
    if ws.female is not None:
        packed.append(ws.female.pack(v_f.values if v_f is not None else zeros2))
    return ws.objective(packed)


def objective_gradient(problem, model, grid, geom, trace, m0, f0, v_m, v_f):
    """Exact gradient of the discrete objective, as region-supported fields.

    Returns (g_m, g_f) Field2D, each equal to the control minus the masked
    adjoint state on its region and zero elsewhere; the entry for an
    inactive control mode is None.
    """
    ws = _Workspace(problem, model, grid, geom, trace, m0, f0)
    zeros2 = np.zeros((grid.num_age_cells + 1, grid.num_time_cells + 1))
    packed = []
    if ws.male is not None:
        packed.append(ws.male.pack(v_m.values if v_m is not None else zeros2))
    if ws.female is not None:
        packed.append(ws.female.pack(v_f.values if v_f is not None else zeros2))
    grad = ws.gradient(packed)
    g_m = g_f = None
    i = 0
    if ws.male is not None:
        g_m = Field2D(grid, ws.male.unpack(grad[i])); i += 1
    if ws.female is not None:
        g_f = Field2D(grid, ws.female.unpack(grad[i]))
    return g_m, g_f


def minimize_penalty(problem, model, grid, geom, trace, m0, f0, *, v_init=None,
                     epsilon=None, theta=None):
    """Conjugate-gradient minimization of the penalty functional.

    Stops when the gradient norm falls below cg_tol times the zero-control
    gradient norm, or flags CONVERGENCE_NOT_REACHED after max_cg_iters.
    """
    if epsilon is not None or theta is not None:
        problem = PenaltyProblem(
            epsilon=epsilon if epsilon is not None else problem.epsilon,
            theta=theta if theta is not None else problem.theta,
            target_norm=problem.target_norm, mode=problem.mode,
            max_cg_iters=problem.max_cg_iters, cg_tol=problem.cg_tol,
            schedule=problem.schedule)
    ws = _Workspace(problem, model, grid, geom, trace, m0, f0)
    b = ws.rhs()
    norm_b = np.sqrt(ws.inner(b, b))
    x = [s.zeros() for s in ws.spaces] if v_init is None else [p.copy() for p in v_init]
    if v_init is None:
        r = [bi.copy() for bi in b]
    else:
        hx = ws.apply_hessian(x)
        r = [bi - hi for bi, hi in zip(b, hx)]
    rho = ws.inner(r, r)
    cg_trace = [float(np.sqrt(rho))]
    d = [ri.copy() for ri in r]
    iterations = 0
    tol = problem.cg_tol * norm_b
    while np.sqrt(rho) > tol and iterations < problem.max_cg_iters:
        q = ws.apply_hessian(d)
        dq = ws.inner(d, q)
        if dq <= 0:
            break  # numerically exhausted: Hessian is SPD so this is rounding
        alpha = rho / dq
        x = [xi + alpha * di for xi, di in zip(x, d)]
        r = [ri - alpha * qi for ri, qi in zip(r, q)]
        rho_new = ws.inner(r, r)
        d = [ri + (rho_new / rho) * di for ri, di in zip(r, d)]
        rho = rho_new
        cg_trace.append(float(np.sqrt(rho)))
        iterations += 1
    converged = np.sqrt(rho) <= tol

    state = ws.forward(x, with_data=True)
    m_norm, f_norm = ws.terminal_norms(state)
    flags = []
    if not geom.admissible_time(grid.max_age):
        flags.append(FLAG_NON_ADMISSIBLE)
    if not converged:
        flags.append(FLAG_CONVERGENCE_NOT_REACHED)
    vm, vf = ws.fields_from_packed(x)
    zeros2 = np.zeros((grid.num_age_cells + 1, grid.num_time_cells + 1))
    return ControlResult(
        v_m=Field2D(grid, vm if vm is not None else zeros2),
        v_f=Field2D(grid, vf if vf is not None else zeros2.copy()),
        terminal_m_norm=m_norm, terminal_f_norm=f_norm,
        J_value=ws.objective(x, state=state),
        cg_trace=cg_trace, iterations=iterations, converged=converged,
        flags=flags, epsilon=problem.epsilon, theta=ws.effective_theta(),
    ), x


def target_reached(mode, target_norm, m_norm, f_norm):
    if mode is ControlMode.MALE_ONLY:
        return m_norm <= target_norm
    if mode is ControlMode.FEMALE_ONLY:
        return f_norm <= target_norm
    return m_norm <= target_norm and f_norm <= target_norm


def synthesize_null_control(problem, model, grid, geom, trace, m0, f0):
    """Walk the penalty schedule until the terminal norms meet the target.

    Returns the first successful stage's result, or the last stage flagged
    TARGET_NOT_REACHED.  Stages warm-start from the previous controls.
    """
    history = []
    packed = None
    result = None
    for eps in problem.schedule.values():
        result, packed = minimize_penalty(problem, model, grid, geom, trace, m0, f0,
                                          v_init=packed, epsilon=eps, theta=eps)
        history.append({
            "epsilon": eps,
            "terminal_m_norm": result.terminal_m_norm,
            "terminal_f_norm": result.terminal_f_norm,
            "iterations": result.iterations,
            "J_value": result.J_value,
        })
        result.stage_history = history
        if target_reached(geom.mode, problem.target_norm,
                          result.terminal_m_norm, result.terminal_f_norm):
            return result, packed
    result.flags.append(FLAG_TARGET_NOT_REACHED)
    return result, packed
