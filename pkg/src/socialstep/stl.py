"""Signal temporal logic over trajectory signals, with locomotion-safety losses.

Formulas are small immutable trees over named scalar channels. Quantitative
robustness is positive iff the formula holds; the hard semantics use exact
min/max while the smooth semantics swap them for temperature-scaled
log-sum-exp so gradients flow through every time step during training.

Trajectories enter through two signal extractors: sagittal/lateral velocity
(decomposed in the frame of the previous segment's heading) and per-step
heading change. Both are built on diffmath tensors so the safety losses are
differentiable in the trajectory coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

# displacements below this are treated as standing still (heading inherited)
EPS_DISP = 1e-3

CHANNEL_V_SAG = "v_sag"
CHANNEL_V_LAT = "v_lat"
CHANNEL_DTHETA = "dtheta"


class SignalWindowError(IndexError):
    """A temporal window reaches past the end of a signal."""


@dataclass(frozen=True)
class Signal:
    """A named scalar signal sampled at a fixed timestep."""

    name: str
    samples: Tensor  # 1-d
    dt: float = 0.4

    def __post_init__(self):
        if not isinstance(self.samples, Tensor):
            object.__setattr__(self, "samples", Tensor(np.asarray(self.samples, dtype=float)))
        if self.samples.data.ndim != 1 or self.samples.size == 0:
            raise ValueError("signal samples must be a non-empty 1-d sequence")
        if self.dt <= 0.0:
            raise ValueError("signal dt must be positive")

    def __len__(self):
        return self.samples.size


# ---- formula tree ----


@dataclass(frozen=True)
class Pred:
    channel: str
    op: str  # "<=" or ">="
    threshold: float

    def __post_init__(self):
        if self.op not in ("<=", ">="):
            raise ValueError(f"unknown comparator {self.op!r}")


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Always:
    child: "Formula"
    a: int
    b: int

    def __post_init__(self):
        _check_bounds(self.a, self.b)


@dataclass(frozen=True)
class Eventually:
    child: "Formula"
    a: int
    b: int

    def __post_init__(self):
        _check_bounds(self.a, self.b)


Formula = Union[Pred, Not, And, Or, Always, Eventually]


def _check_bounds(a, b):
    if not (isinstance(a, int) and isinstance(b, int)):
        raise ValueError("temporal bounds must be integer step indices")
    if not (0 <= a <= b):
        raise ValueError(f"temporal bounds must satisfy 0 <= a <= b, got [{a}, {b}]")


# ---- robustness semantics ----


def robustness(phi: Formula, signals: Mapping[str, Signal], t: int = 0,
               tau: float | None = None) -> Tensor:
    """Quantitative robustness of `phi` at step `t`.

    tau=None evaluates the exact semantics (min/max); a positive tau swaps
    them for the smooth log-sum-exp relaxation. Raises SignalWindowError
    when a temporal window would read past a signal's end, KeyError for a
    channel missing from `signals`.
    """
    vec = _robustness_vector(phi, signals, tau)
    if t < 0 or t >= vec.size:
        raise SignalWindowError(
            f"robustness at t={t} needs {t + 1} valid steps, have {vec.size}")
    return vec[t]


def _robustness_vector(phi: Formula, signals, tau) -> Tensor:
    """Robustness at every step where the formula's windows fit."""
    if isinstance(phi, Pred):
        if phi.channel not in signals:
            raise KeyError(f"formula references unknown channel {phi.channel!r}")
        s = signals[phi.channel].samples
        if phi.op == ">=":
            return s - phi.threshold
        return (-s) + phi.threshold
    if isinstance(phi, Not):
        return -_robustness_vector(phi.child, signals, tau)
    if isinstance(phi, (And, Or)):
        lv = _robustness_vector(phi.left, signals, tau)
        rv = _robustness_vector(phi.right, signals, tau)
        n = min(lv.size, rv.size)
        pair = dm.concat([lv[0:n].reshape(1, n), rv[0:n].reshape(1, n)], axis=0)
        return _reduce(pair, want_min=isinstance(phi, And), tau=tau, axis=0)
    if isinstance(phi, (Always, Eventually)):
        child = _robustness_vector(phi.child, signals, tau)
        n_out = child.size - phi.b
        if n_out <= 0:
            raise SignalWindowError(
                f"window [{phi.a}, {phi.b}] exceeds signal length {child.size}")
        rows = [_reduce(child[t + phi.a:t + phi.b + 1],
                        want_min=isinstance(phi, Always), tau=tau)
                for t in range(n_out)]
        return dm.stack_scalars(rows)
    raise TypeError(f"not a formula node: {phi!r}")


def _reduce(x: Tensor, want_min: bool, tau, axis: int | None = None) -> Tensor:
    if tau is None:
        return x.min(axis=axis) if want_min else x.max(axis=axis)
    if want_min:
        return -((-x).logsumexp(tau=tau, axis=axis))
    return x.logsumexp(tau=tau, axis=axis)


# ---- trajectory signals ----


def _as_traj_tensor(traj) -> Tensor:
    t = traj if isinstance(traj, Tensor) else Tensor(np.asarray(traj, dtype=float))
    if t.data.ndim != 2 or t.data.shape[1] != 2:
        raise ValueError("trajectory must have shape (n, 2)")
    if t.data.shape[0] < 2:
        raise ValueError("trajectory needs at least 2 points")
    return t


def _segment_geometry(traj: Tensor, theta0: float):
    """Per-segment (dot, cross, |ref|) against the previous segment's heading.

    Segment q runs from point q to q+1; its reference direction is the last
    segment with displacement >= EPS_DISP before it (the heading at theta0
    for segment 0). Returns 1-d tensors of length n-1.
    """
    d = traj[1:, :] - traj[:-1, :]
    norms = np.hypot(d.data[:, 0], d.data[:, 1])
    m = d.data.shape[0]
    ref0 = Tensor(np.array([[math.cos(theta0), math.sin(theta0)]]))
    if m == 1 or np.all(norms[:-1] >= EPS_DISP):
        # fast path: every reference segment is non-degenerate
        u = dm.concat([ref0, d[0:m - 1, :]], axis=0) if m > 1 else ref0
        dot = (u * d).sum(axis=1)
        cross = u[:, 0] * d[:, 1] - u[:, 1] * d[:, 0]
        ref_norm = (u * u).sum(axis=1).sqrt()
        return d, norms, dot, cross, ref_norm
    # slow path: carry the last non-degenerate displacement forward
    ux, uy = ref0[0, 0], ref0[0, 1]
    dots, crosses, ref_norms = [], [], []
    for q in range(m):
        dx, dy = d[q, 0], d[q, 1]
        dots.append(ux * dx + uy * dy)
        crosses.append(ux * dy - uy * dx)
        ref_norms.append((ux.square() + uy.square()).sqrt())
        if norms[q] >= EPS_DISP:
            ux, uy = dx, dy
    return (d, norms, dm.stack_scalars(dots), dm.stack_scalars(crosses),
            dm.stack_scalars(ref_norms))


def velocity_signals(traj, dt: float, theta0: float) -> tuple[Signal, Signal]:
    """Sagittal and lateral velocity of a trajectory, one sample per segment.

    Each displacement is divided by dt and decomposed in the frame whose
    x-axis is the previous segment's heading (theta0 for the first segment).
    """
    traj = _as_traj_tensor(traj)
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    _, _, dot, cross, ref_norm = _segment_geometry(traj, theta0)
    scale = ref_norm.scale(dt)
    return (Signal(CHANNEL_V_SAG, dot / scale, dt),
            Signal(CHANNEL_V_LAT, cross / scale, dt))


def heading_change_signal(traj, theta0: float, dt: float = 0.4) -> Signal:
    """Per-segment heading change, wrapped to (-pi, pi].

    Segment 0 is compared against theta0; a segment shorter than EPS_DISP
    inherits the previous heading and contributes zero change.
    """
    traj = _as_traj_tensor(traj)
    _, norms, dot, cross, _ = _segment_geometry(traj, theta0)
    if np.all(norms >= EPS_DISP):
        return Signal(CHANNEL_DTHETA, dm.atan2(cross, dot), dt)
    parts = []
    for q in range(norms.shape[0]):
        if norms[q] < EPS_DISP:
            parts.append(Tensor(0.0))
        else:
            parts.append(dm.atan2(cross[q], dot[q]))
    return Signal(CHANNEL_DTHETA, dm.stack_scalars(parts), dt)


# ---- safety specification ----


@dataclass(frozen=True)
class SafetyParams:
    """Locomotion-safety bounds and loss weights.

    Velocity bounds are in m/s, the heading-change bound in radians per
    step. Defaults are plausible for a Digit-class biped and fully
    configurable; they are not dataset-derived.
    """

    v_max: float = 1.0
    v_min: float = -0.3
    v_lat: float = 0.5
    dtheta_max: float = 0.3
    alpha1: float = 1.0
    alpha2: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if not self.v_max > self.v_min:
            raise ValueError("require v_max > v_min")
        if self.v_lat <= 0.0 or self.dtheta_max <= 0.0 or self.tau <= 0.0:
            raise ValueError("v_lat, dtheta_max and tau must be positive")
        if self.alpha1 < 0.0 or self.alpha2 < 0.0:
            raise ValueError("loss weights must be non-negative")


def build_safety_formulas(params: SafetyParams, n_steps: int) -> tuple[Formula, Formula]:
    """Velocity and heading-change specifications over an n_steps window.

    Both hold the bound at every step of the window (an Always over the
    conjunction of the channel bounds, evaluated at t=0).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    sag = And(Pred(CHANNEL_V_SAG, "<=", params.v_max),
              Pred(CHANNEL_V_SAG, ">=", params.v_min))
    lat = And(Pred(CHANNEL_V_LAT, "<=", params.v_lat),
              Pred(CHANNEL_V_LAT, ">=", -params.v_lat))
    phi_vel = Always(And(sag, lat), 0, n_steps - 1)
    turn = And(Pred(CHANNEL_DTHETA, "<=", params.dtheta_max),
               Pred(CHANNEL_DTHETA, ">=", -params.dtheta_max))
    phi_dtheta = Always(turn, 0, n_steps - 1)
    return phi_vel, phi_dtheta


def stl_terms(traj, theta0: float, params: SafetyParams, dt: float = 0.4,
              tau: float | None = None) -> tuple[Tensor, Tensor]:
    """Unweighted violation terms (heading, velocity): ReLU(-robustness).

    `traj` must include the current position at index 0 so the first
    velocity and heading-change samples are anchored. Pass tau for the
    smooth training semantics, tau=None for exact evaluation.
    """
    traj = _as_traj_tensor(traj)
    v_sag, v_lat = velocity_signals(traj, dt, theta0)
    dtheta = heading_change_signal(traj, theta0, dt)
    signals = {s.name: s for s in (v_sag, v_lat, dtheta)}
    n_steps = len(dtheta)
    phi_vel, phi_dtheta = build_safety_formulas(params, n_steps)
    loss_dtheta = (-robustness(phi_dtheta, signals, 0, tau)).relu()
    loss_vel = (-robustness(phi_vel, signals, 0, tau)).relu()
    return loss_dtheta, loss_vel


def stl_loss(traj, theta0: float, params: SafetyParams, dt: float = 0.4,
             tau: float | None = None) -> Tensor:
    """Weighted safety loss alpha1 * heading violation + alpha2 * velocity violation."""
    loss_dtheta, loss_vel = stl_terms(traj, theta0, params, dt, tau)
    return loss_dtheta.scale(params.alpha1) + loss_vel.scale(params.alpha2)


def hard_violations(traj, theta0: float, params: SafetyParams,
                    dt: float = 0.4) -> tuple[float, float]:
    """Exact (heading, velocity) violation magnitudes of a numeric trajectory."""
    loss_dtheta, loss_vel = stl_terms(traj, theta0, params, dt, tau=None)
    return float(loss_dtheta.data), float(loss_vel.data)


# ---- prefix-notation serialization ----


def format_formula(phi: Formula) -> str:
    """Human-readable prefix string, e.g. (always 0 7 (<= v_sag 1.0))."""
    if isinstance(phi, Pred):
        return f"({phi.op} {phi.channel} {float(phi.threshold)!r})"
    if isinstance(phi, Not):
        return f"(not {format_formula(phi.child)})"
    if isinstance(phi, And):
        return f"(and {format_formula(phi.left)} {format_formula(phi.right)})"
    if isinstance(phi, Or):
        return f"(or {format_formula(phi.left)} {format_formula(phi.right)})"
    if isinstance(phi, Always):
        return f"(always {phi.a} {phi.b} {format_formula(phi.child)})"
    if isinstance(phi, Eventually):
        return f"(eventually {phi.a} {phi.b} {format_formula(phi.child)})"
    raise TypeError(f"not a formula node: {phi!r}")


def parse_formula(text: str) -> Formula:
    """Inverse of format_formula."""
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    phi, rest = _parse_tokens(tokens)
    if rest:
        raise ValueError(f"trailing tokens after formula: {' '.join(rest)}")
    return phi


def _parse_tokens(tokens: list[str]) -> tuple[Formula, list[str]]:
    if not tokens:
        raise ValueError("unexpected end of formula")
    if tokens[0] != "(":
        raise ValueError(f"expected '(', got {tokens[0]!r}")
    head, rest = tokens[1], tokens[2:]
    if head in ("<=", ">="):
        channel, threshold = rest[0], float(rest[1])
        rest = rest[2:]
        node = Pred(channel, head, threshold)
    elif head == "not":
        child, rest = _parse_tokens(rest)
        node = Not(child)
    elif head in ("and", "or"):
        left, rest = _parse_tokens(rest)
        right, rest = _parse_tokens(rest)
        node = And(left, right) if head == "and" else Or(left, right)
    elif head in ("always", "eventually"):
        a, b = int(rest[0]), int(rest[1])
        child, rest = _parse_tokens(rest[2:])
        node = Always(child, a, b) if head == "always" else Eventually(child, a, b)
    else:
        raise ValueError(f"unknown formula head {head!r}")
    if not rest or rest[0] != ")":
        raise ValueError("expected ')'")
    return node, rest[1:]
