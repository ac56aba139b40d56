"""Reduced-order step planner: LIP dynamics, barrier constraint, N-step MPC.

The walking model is a linear inverted pendulum with fixed step duration;
its sagittal step-to-step map is closed-form in hyperbolic functions, and
the planned displacement advances the global CoM along the pre-update
heading. The step planner minimizes weighted tracking error against the
social planner's waypoints (position, heading, sagittal velocity per step)
plus a terminal cost at the goal, subject to per-step state/input boxes
and a discrete control-barrier decay condition against the closest
pedestrian.

Transcription is single shooting over the N controls: inputs and the
state box are enforced by projection inside the differentiable rollout
(feasible by construction), the barrier chain by a quadratic penalty with
escalating weight. Gradients come from the diffmath core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffmath as dm
from . import stl
from .diffmath import Tensor


class InfeasibleStartError(ValueError):
    """The barrier is already violated at the initial state."""


class SolverFailureError(RuntimeError):
    def __init__(self, message, best=None, max_violation=float("nan")):
        super().__init__(message)
        self.best = best
        self.max_violation = max_violation


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = -((-a + math.pi) % (2.0 * math.pi) - math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class LipParams:
    """Pendulum constants; omega = sqrt(g / H)."""

    com_height: float = 0.9
    step_time: float = 0.4
    gravity: float = 9.81

    def __post_init__(self):
        if self.com_height <= 0.0 or self.step_time <= 0.0 or self.gravity <= 0.0:
            raise ValueError("com_height, step_time and gravity must be positive")

    @property
    def omega(self) -> float:
        return math.sqrt(self.gravity / self.com_height)


@dataclass(frozen=True)
class LipState:
    """Global CoM position, heading, and sagittal CoM velocity."""

    x: float
    y: float
    theta: float
    xdot: float

    def __post_init__(self):
        if not all(map(math.isfinite, (self.x, self.y, self.theta, self.xdot))):
            raise ValueError("state components must be finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.xdot])


@dataclass(frozen=True)
class ControlInput:
    """Sagittal foot offset from the CoM and heading change for one step."""

    foot: float
    dtheta: float

    def __post_init__(self):
        if not (math.isfinite(self.foot) and math.isfinite(self.dtheta)):
            raise ValueError("control components must be finite")


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, boxes, barrier decay, and cost weights.

    State bounds apply per planned step to (step displacement, next sagittal
    velocity); input bounds to (foot offset, heading change). w_run weights
    the per-step (x, y, theta, xdot) tracking residual, w_term the terminal
    one. The paper-level defaults mirror the training-time safety bounds.
    """

    horizon: int = 4
    x_lb: tuple[float, float] = (-math.inf, -0.3)
    x_ub: tuple[float, float] = (math.inf, 1.0)
    u_lb: tuple[float, float] = (-0.25, -0.3)
    u_ub: tuple[float, float] = (0.25, 0.3)
    gamma: float = 0.3
    w_run: tuple[float, float, float, float] = (1.0, 1.0, 0.5, 0.5)
    w_term: tuple[float, float, float, float] = (4.0, 4.0, 1.0, 1.0)
    max_iterations: int = 150
    grad_tolerance: float = 1e-7
    constraint_tolerance: float = 1e-6

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        for lb, ub in ((self.x_lb, self.x_ub), (self.u_lb, self.u_ub)):
            if any(l > u for l, u in zip(lb, ub)):
                raise ValueError("bounds must satisfy lb <= ub")
        if min(self.w_run) < 0 or min(self.w_term) < 0:
            raise ValueError("weights must be non-negative")


@dataclass
class MpcSolution:
    controls: list[ControlInput]
    states: list[LipState]  # length horizon + 1, states[0] = s0
    objective: float
    converged: bool
    iterations: int
    max_violation: float
    trace: list[dict] = field(default_factory=list)


def step_dynamics(params: LipParams, state: LipState, u: ControlInput) -> LipState:
    """One walking step of the pendulum.

    The step displacement combines the carried velocity and the foot
    offset through the closed hyperbolic forms and is applied along the
    pre-update heading; the heading then advances by the commanded change.
    """
    w = params.omega
    wt = w * params.step_time
    sinh_wt, cosh_wt = math.sinh(wt), math.cosh(wt)
    disp = sinh_wt / w * state.xdot + (1.0 - cosh_wt) * u.foot
    xdot_next = cosh_wt * state.xdot - w * sinh_wt * u.foot
    return LipState(
        x=state.x + math.cos(state.theta) * disp,
        y=state.y + math.sin(state.theta) * disp,
        theta=wrap_angle(state.theta + u.dtheta),
        xdot=xdot_next,
    )


def cbf_value(state: LipState | np.ndarray, pedestrian) -> float:
    """Barrier h: >= 0 iff the CoM is outside the 0.2 m-scaled unit circle
    around the pedestrian."""
    pos = state.position() if isinstance(state, LipState) else np.asarray(state, float)
    ped = np.asarray(pedestrian, dtype=float)
    return float(math.hypot((pos[0] - ped[0]) / 0.2, (pos[1] - ped[1]) / 0.2) - 1.0)


def running_cost(state: LipState, ref: np.ndarray, w_run) -> float:
    """Weighted squared tracking residual against one reference step
    (x, y, heading, sagittal velocity); the heading residual is wrapped."""
    r = np.asarray(ref, dtype=float)
    res = np.array([state.x - r[0], state.y - r[1],
                    wrap_angle(state.theta - r[2]), state.xdot - r[3]])
    return float(np.dot(np.asarray(w_run), res * res))


def terminal_cost(state: LipState, goal, theta_terminal: float,
                  xdot_terminal: float, w_term) -> float:
    g = np.asarray(goal, dtype=float)
    res = np.array([state.x - g[0], state.y - g[1],
                    wrap_angle(state.theta - theta_terminal),
                    state.xdot - xdot_terminal])
    return float(np.dot(np.asarray(w_term), res * res))


def reference_from_plan(waypoints_world: np.ndarray, theta0: float,
                        dt: float, n_steps: int) -> np.ndarray:
    """Per-step reference rows (x, y, heading, sagittal velocity).

    `waypoints_world` must start at the current position; per-step heading
    and velocity come from the shared signal extractors, so the tracking
    reference and the training-time specifications agree on definitions.
    Row q pairs waypoint q with the heading/velocity of the segment leaving
    it; shorter plans repeat their last row.
    """
    pts = np.asarray(waypoints_world, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least 2 waypoints (current position first)")
    v_sag, _ = stl.velocity_signals(pts, dt, theta0)
    dtheta = stl.heading_change_signal(pts, theta0)
    headings = theta0 + np.cumsum(dtheta.samples.data)
    v = v_sag.samples.data
    rows = [(pts[q, 0], pts[q, 1], wrap_angle(float(headings[q])), float(v[q]))
            for q in range(len(v))]
    while len(rows) < n_steps:
        rows.append(rows[-1])
    return np.asarray(rows[:n_steps], dtype=float)


# ---- solver internals ----

def _clip_t(x: Tensor, lo, hi) -> Tensor:
    """Differentiable clip: lo + relu(x - lo) - relu(x - hi); bounds may be
    tensors or floats."""
    lo = lo if isinstance(lo, Tensor) else Tensor(float(lo))
    hi = hi if isinstance(hi, Tensor) else Tensor(float(hi))
    return lo + (x - lo).relu() - (x - hi).relu()


def _min_t(a: Tensor, b: Tensor) -> Tensor:
    return a - (a - b).relu()


def _max_t(a: Tensor, b: Tensor) -> Tensor:
    return a + (b - a).relu()


def _feasible_foot_interval(params: LipParams, cfg: MpcConfig, xdot: Tensor):
    """Control interval for the foot offset keeping displacement and next
    velocity inside the state box (both are affine in the foot offset)."""
    w = params.omega
    wt = w * params.step_time
    sh, ch = math.sinh(wt), math.cosh(wt)
    lo = Tensor(cfg.u_lb[0])
    hi = Tensor(cfg.u_ub[0])
    # xdot_next = ch * xdot - w*sh * u  (decreasing in u)
    if math.isfinite(cfg.x_ub[1]):
        lo = _max_t(lo, (xdot.scale(ch) - cfg.x_ub[1]).scale(1.0 / (w * sh)))
    if math.isfinite(cfg.x_lb[1]):
        hi = _min_t(hi, (xdot.scale(ch) - cfg.x_lb[1]).scale(1.0 / (w * sh)))
    # disp = sh/w * xdot + (1 - ch) * u, and 1 - ch < 0 (decreasing in u)
    if math.isfinite(cfg.x_ub[0]):
        lo = _max_t(lo, (xdot.scale(sh / w) - cfg.x_ub[0]).scale(1.0 / (ch - 1.0)))
    if math.isfinite(cfg.x_lb[0]):
        hi = _min_t(hi, (xdot.scale(sh / w) - cfg.x_lb[0]).scale(1.0 / (ch - 1.0)))
    if float(hi.data) < float(lo.data) - 1e-12:
        raise SolverFailureError(
            "state box admits no feasible foot offset from the current velocity")
    return lo, hi


def _rollout_tensors(params: LipParams, cfg: MpcConfig, s0: LipState, u: Tensor):
    """Differentiable rollout with in-rollout projection of the controls.

    Returns per-step effective controls and state tensors; the effective
    controls satisfy the input box and keep the state box feasible exactly.
    """
    w = params.omega
    wt = w * params.step_time
    sh, ch = math.sinh(wt), math.cosh(wt)
    x, y = Tensor(s0.x), Tensor(s0.y)
    theta, xdot = Tensor(s0.theta), Tensor(s0.xdot)
    eff_controls, states = [], [(x, y, theta, xdot)]
    # raw decision values outside their feasible interval get no gradient
    # through the clip; this pull-back keeps them attached to the boundary
    mismatch = Tensor(0.0)
    for q in range(cfg.horizon):
        lo, hi = _feasible_foot_interval(params, cfg, xdot)
        foot = _clip_t(u[q, 0], lo, hi)
        dth = _clip_t(u[q, 1], cfg.u_lb[1], cfg.u_ub[1])
        mismatch = mismatch + (u[q, 0] - foot).square() + (u[q, 1] - dth).square()
        disp = xdot.scale(sh / w) + foot.scale(1.0 - ch)
        x = x + theta.cos() * disp
        y = y + theta.sin() * disp
        xdot = xdot.scale(ch) - foot.scale(w * sh)
        theta = theta + dth
        eff_controls.append((foot, dth))
        states.append((x, y, theta, xdot))
    return eff_controls, states, mismatch


def _objective_tensor(cfg: MpcConfig, states, ref: np.ndarray, goal,
                      theta_terminal: float, xdot_terminal: float) -> Tensor:
    total = Tensor(0.0)
    for q in range(cfg.horizon):
        x, y, theta, xdot = states[q]
        rx, ry, rth, rv = ref[q]
        total = total \
            + (x - rx).square().scale(cfg.w_run[0]) \
            + (y - ry).square().scale(cfg.w_run[1]) \
            + _wrapped_residual(theta, rth).square().scale(cfg.w_run[2]) \
            + (xdot - rv).square().scale(cfg.w_run[3])
    x, y, theta, xdot = states[-1]
    total = total \
        + (x - goal[0]).square().scale(cfg.w_term[0]) \
        + (y - goal[1]).square().scale(cfg.w_term[1]) \
        + _wrapped_residual(theta, theta_terminal).square().scale(cfg.w_term[2]) \
        + (xdot - xdot_terminal).square().scale(cfg.w_term[3])
    return total


def _wrapped_residual(theta: Tensor, ref: float) -> Tensor:
    # shift the reference by whole turns so the residual is the wrapped
    # difference; constant offset keeps gradients identical
    delta = wrap_angle(float(theta.data) - ref)
    return theta - (float(theta.data) - delta)


def _barrier_penalty(cfg: MpcConfig, states, ped: np.ndarray, h0: float) -> Tensor:
    """Sum of squared violations of h(next) >= (1 - gamma) h(prev)."""
    def h_t(x, y):
        return (((x - ped[0]).scale(1 / 0.2)).square()
                + ((y - ped[1]).scale(1 / 0.2)).square()).sqrt() - 1.0

    penalty = Tensor(0.0)
    h_prev: Tensor | float = h0
    for q in range(1, len(states)):
        x, y, _, _ = states[q]
        h_cur = h_t(x, y)
        prev_term = h_prev.scale(1.0 - cfg.gamma) if isinstance(h_prev, Tensor) \
            else Tensor(h_prev * (1.0 - cfg.gamma))
        penalty = penalty + (prev_term - h_cur).relu().square()
        h_prev = h_cur
    return penalty


def _rollout_states(params: LipParams, s0: LipState,
                    controls: list[ControlInput]) -> list[LipState]:
    states = [s0]
    for u in controls:
        states.append(step_dynamics(params, states[-1], u))
    return states


def _chain_violation(cfg: MpcConfig, states: list[LipState],
                     ped: np.ndarray | None) -> float:
    if ped is None:
        return 0.0
    worst = 0.0
    h_prev = cbf_value(states[0], ped)
    for s in states[1:]:
        h_cur = cbf_value(s, ped)
        worst = max(worst, (1.0 - cfg.gamma) * h_prev - h_cur)
        h_prev = h_cur
    return worst


def solve(params: LipParams, cfg: MpcConfig, s0: LipState,
          ref_traj: np.ndarray, goal, pedestrian=None,
          keep_trace: bool = False, u_init: np.ndarray | None = None
          ) -> MpcSolution:
    """Plan N steps tracking `ref_traj` toward `goal`, avoiding `pedestrian`.

    ref_traj rows are (x, y, heading, sagittal velocity); fewer than N rows
    are padded by repeating the last. `u_init` warm-starts the search
    (receding-horizon callers pass the previous plan shifted by one step).
    Raises InfeasibleStartError when the barrier is negative at s0 and
    SolverFailureError when no iterate meets the constraint tolerance
    within the iteration cap.
    """
    goal = np.asarray(goal, dtype=float).reshape(2)
    ped = None if pedestrian is None else np.asarray(pedestrian, float).reshape(2)
    if ped is not None:
        h0 = cbf_value(s0, ped)
        if h0 < 0.0:
            raise InfeasibleStartError(
                f"barrier already violated at the initial state (h = {h0:.4f})")
    else:
        h0 = math.inf
    ref = np.asarray(ref_traj, dtype=float)
    if ref.ndim != 2 or ref.shape[1] != 4:
        raise ValueError("ref_traj must be (n, 4): x, y, heading, velocity rows")
    if len(ref) < cfg.horizon:
        ref = np.vstack([ref, np.repeat(ref[-1:], cfg.horizon - len(ref), axis=0)])
    theta_term = math.atan2(goal[1] - s0.y, goal[0] - s0.x) \
        if np.linalg.norm(goal - s0.position()) > 1e-9 else s0.theta
    xdot_term = 0.0

    def evaluate(u_arr: np.ndarray, mu: float):
        u = Tensor(u_arr)
        eff, states, mismatch = _rollout_tensors(params, cfg, s0, u)
        obj = _objective_tensor(cfg, states, ref, goal, theta_term, xdot_term)
        pen = obj + mismatch
        if ped is not None:
            pen = pen + _barrier_penalty(cfg, states, ped, h0).scale(mu)
        return u, eff, obj, pen

    def extract(eff) -> list[ControlInput]:
        return [ControlInput(float(f.data), float(d.data)) for f, d in eff]

    # warm starts: caller's guess, zero controls, a crude reference chaser
    inits = []
    if u_init is not None:
        inits.append(np.asarray(u_init, dtype=float).reshape(cfg.horizon, 2))
    inits.append(np.zeros((cfg.horizon, 2)))
    guess = np.zeros((cfg.horizon, 2))
    desired = math.atan2(ref[0, 1] - s0.y, ref[0, 0] - s0.x) \
        if np.linalg.norm(ref[0, :2] - s0.position()) > 1e-9 else s0.theta
    guess[:, 1] = np.clip(wrap_angle(desired - s0.theta) / cfg.horizon,
                          cfg.u_lb[1], cfg.u_ub[1])
    inits.append(guess)

    best: MpcSolution | None = None
    trace: list[dict] = []
    total_iters = 0
    worst_violation_seen = math.inf
    any_stationary = False
    for u0 in inits:
        u_arr = u0.copy()
        for mu in (1e2, 3e3, 1e5, 3e6, 1e8):
            step = 0.05
            stationary = False
            stalls = 0
            for _ in range(cfg.max_iterations):
                total_iters += 1
                u, eff, obj, pen = evaluate(u_arr, mu)
                dm.backward(pen)
                grad = u.grad.copy()
                controls = extract(eff)
                states = _rollout_states(params, s0, controls)
                violation = _chain_violation(cfg, states, ped)
                worst_violation_seen = min(worst_violation_seen, violation)
                feasible = violation <= cfg.constraint_tolerance
                if feasible and (best is None or float(obj.data) < best.objective):
                    best = MpcSolution(controls, states, float(obj.data),
                                       converged=False, iterations=total_iters,
                                       max_violation=violation)
                if keep_trace:
                    trace.append({
                        "iteration": total_iters, "objective": float(obj.data),
                        "max_violation": violation,
                        "incumbent": best.objective if best else math.inf,
                    })
                gnorm = float(np.linalg.norm(grad))
                if gnorm <= cfg.grad_tolerance:
                    stationary = True
                    break
                # backtracking line search on the penalized objective
                base = float(pen.data)
                improved = False
                while step > 1e-12:
                    cand = u_arr - step * grad
                    _, _, _, pen_c = evaluate(cand, mu)
                    if float(pen_c.data) < base - 1e-4 * step * gnorm * gnorm:
                        u_arr = cand
                        gain = base - float(pen_c.data)
                        stalls = stalls + 1 if gain < 1e-10 * (1.0 + abs(base)) else 0
                        step = min(step * 2.0, 1.0)
                        improved = True
                        break
                    step *= 0.5
                if not improved or stalls >= 3:
                    stationary = True  # no useful descent left at this scale
                    break
            _, eff, obj, _ = evaluate(u_arr, mu)
            controls = extract(eff)
            states = _rollout_states(params, s0, controls)
            violation = _chain_violation(cfg, states, ped)
            if violation <= cfg.constraint_tolerance:
                any_stationary = any_stationary or stationary
                if best is None or float(obj.data) < best.objective:
                    best = MpcSolution(controls, states, float(obj.data),
                                       converged=stationary,
                                       iterations=total_iters,
                                       max_violation=violation)
                break

    if best is None:
        raise SolverFailureError(
            "no feasible iterate within the iteration cap",
            max_violation=worst_violation_seen)
    best.converged = best.converged or any_stationary
    best.iterations = total_iters
    best.trace = trace
    return best
