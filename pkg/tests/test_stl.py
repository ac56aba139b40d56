import math

import numpy as np
import pytest

from socialstep import diffmath as dm
from socialstep import stl
from socialstep.diffmath import Tensor
from socialstep.stl import (
    Always, And, Eventually, Not, Or, Pred, SafetyParams, Signal,
    SignalWindowError, build_safety_formulas, format_formula,
    heading_change_signal, parse_formula, robustness, stl_loss, stl_terms,
    velocity_signals,
)


# ---- independent oracle: plain-float recursive semantics ----

def rho_ref(phi, sigs, t):
    if isinstance(phi, Pred):
        v = sigs[phi.channel][t]
        return v - phi.threshold if phi.op == ">=" else phi.threshold - v
    if isinstance(phi, Not):
        return -rho_ref(phi.child, sigs, t)
    if isinstance(phi, And):
        return min(rho_ref(phi.left, sigs, t), rho_ref(phi.right, sigs, t))
    if isinstance(phi, Or):
        return max(rho_ref(phi.left, sigs, t), rho_ref(phi.right, sigs, t))
    vals = [rho_ref(phi.child, sigs, q) for q in range(t + phi.a, t + phi.b + 1)]
    return min(vals) if isinstance(phi, Always) else max(vals)


def sat_ref(phi, sigs, t):
    if isinstance(phi, Pred):
        v = sigs[phi.channel][t]
        return v >= phi.threshold if phi.op == ">=" else v <= phi.threshold
    if isinstance(phi, Not):
        return not sat_ref(phi.child, sigs, t)
    if isinstance(phi, And):
        return sat_ref(phi.left, sigs, t) and sat_ref(phi.right, sigs, t)
    if isinstance(phi, Or):
        return sat_ref(phi.left, sigs, t) or sat_ref(phi.right, sigs, t)
    window = range(t + phi.a, t + phi.b + 1)
    if isinstance(phi, Always):
        return all(sat_ref(phi.child, sigs, q) for q in window)
    return any(sat_ref(phi.child, sigs, q) for q in window)


def horizon(phi):
    if isinstance(phi, Pred):
        return 0
    if isinstance(phi, Not):
        return horizon(phi.child)
    if isinstance(phi, (And, Or)):
        return max(horizon(phi.left), horizon(phi.right))
    return phi.b + horizon(phi.child)


def random_formula(rng, channels, depth, budget):
    """Random tree of depth <= depth whose horizon fits within budget steps."""
    kinds = ["pred"] if depth == 0 else ["pred", "not", "and", "or", "alw", "ev"]
    kind = kinds[rng.integers(len(kinds))]
    if kind == "pred":
        return Pred(channels[rng.integers(len(channels))],
                    "<=" if rng.random() < 0.5 else ">=",
                    float(rng.normal(scale=0.8)))
    if kind == "not":
        return Not(random_formula(rng, channels, depth - 1, budget))
    if kind in ("and", "or"):
        left = random_formula(rng, channels, depth - 1, budget)
        right = random_formula(rng, channels, depth - 1, budget)
        return And(left, right) if kind == "and" else Or(left, right)
    if budget <= 0:
        return Pred(channels[0], "<=", 0.0)
    a = int(rng.integers(0, budget + 1))
    b = int(rng.integers(a, budget + 1))
    child = random_formula(rng, channels, depth - 1, budget - b)
    return Always(child, a, b) if kind == "alw" else Eventually(child, a, b)


def smooth_bound(phi, tau):
    """Recursive per-node bound on |smooth - hard| robustness."""
    if isinstance(phi, Pred):
        return 0.0
    if isinstance(phi, Not):
        return smooth_bound(phi.child, tau)
    if isinstance(phi, (And, Or)):
        return tau * math.log(2) + max(smooth_bound(phi.left, tau),
                                       smooth_bound(phi.right, tau))
    width = phi.b - phi.a + 1
    return tau * math.log(width) + smooth_bound(phi.child, tau)


def widest_and_depth(phi):
    if isinstance(phi, Pred):
        return 1, 0
    if isinstance(phi, Not):
        return widest_and_depth(phi.child)
    if isinstance(phi, (And, Or)):
        wl, dl = widest_and_depth(phi.left)
        wr, dr = widest_and_depth(phi.right)
        return max(2, wl, wr), 1 + max(dl, dr)
    w, d = widest_and_depth(phi.child)
    return max(phi.b - phi.a + 1, w), 1 + d


def make_signals(rng, length):
    vals = {c: rng.normal(scale=1.0, size=length) for c in ("s", "u")}
    sigs = {c: Signal(c, Tensor(v)) for c, v in vals.items()}
    return sigs, {c: list(v) for c, v in vals.items()}


# ---- robustness semantics ----

def test_always_direct_semantics():
    sigs = {"s": Signal("s", Tensor([0.2, 0.5, 0.9]))}
    phi = Always(Pred("s", "<=", 1.0), 0, 2)
    assert float(robustness(phi, sigs).data) == pytest.approx(0.1)


def test_predicate_violation_sign():
    sigs = {"s": Signal("s", Tensor([-0.3]))}
    assert float(robustness(Pred("s", ">=", 0.0), sigs).data) == pytest.approx(-0.3)


def test_nested_and_window():
    sigs = {"s": Signal("s", Tensor([1.2, 0.0]))}
    phi = Always(And(Pred("s", "<=", 1.0), Pred("s", ">=", -1.0)), 0, 1)
    assert float(robustness(phi, sigs).data) == pytest.approx(-0.2)


def test_window_out_of_range():
    sigs = {"s": Signal("s", Tensor([0.1, 0.2]))}
    with pytest.raises(SignalWindowError):
        robustness(Always(Pred("s", "<=", 1.0), 0, 5), sigs)
    with pytest.raises(SignalWindowError):
        robustness(Pred("s", "<=", 1.0), sigs, t=2)


def test_unknown_channel():
    sigs = {"s": Signal("s", Tensor([0.1]))}
    with pytest.raises(KeyError):
        robustness(Pred("other", "<=", 1.0), sigs)


def test_bad_temporal_bounds():
    with pytest.raises(ValueError):
        Always(Pred("s", "<=", 0.0), 2, 1)
    with pytest.raises(ValueError):
        Eventually(Pred("s", "<=", 0.0), -1, 2)


def test_robustness_matches_reference_oracle():
    rng = np.random.default_rng(7)
    for _ in range(300):
        length = int(rng.integers(2, 13))
        sigs, raw = make_signals(rng, length)
        phi = random_formula(rng, ("s", "u"), depth=int(rng.integers(1, 5)),
                             budget=length - 1)
        tmax = length - 1 - horizon(phi)
        if tmax < 0:
            continue
        t = int(rng.integers(0, tmax + 1))
        got = float(robustness(phi, sigs, t).data)
        want = rho_ref(phi, raw, t)
        assert abs(got - want) <= 1e-9


def test_boolean_soundness():
    rng = np.random.default_rng(8)
    for _ in range(300):
        length = int(rng.integers(2, 13))
        sigs, raw = make_signals(rng, length)
        phi = random_formula(rng, ("s", "u"), depth=int(rng.integers(1, 5)),
                             budget=length - 1)
        tmax = length - 1 - horizon(phi)
        if tmax < 0:
            continue
        t = int(rng.integers(0, tmax + 1))
        rho = float(robustness(phi, sigs, t).data)
        if abs(rho) < 1e-9:
            continue
        assert (rho > 0) == sat_ref(phi, raw, t)


def test_smooth_robustness_bound():
    rng = np.random.default_rng(9)
    for _ in range(200):
        length = int(rng.integers(2, 13))
        sigs, _ = make_signals(rng, length)
        phi = random_formula(rng, ("s", "u"), depth=int(rng.integers(1, 5)),
                             budget=length - 1)
        if horizon(phi) > length - 1:
            continue
        tau = float(rng.uniform(0.02, 0.5))
        hard = float(robustness(phi, sigs, 0).data)
        smooth = float(robustness(phi, sigs, 0, tau=tau).data)
        assert abs(smooth - hard) <= smooth_bound(phi, tau) + 1e-12
        w, d = widest_and_depth(phi)
        if d > 0:
            assert abs(smooth - hard) <= tau * math.log(max(w, 2)) * d + 1e-12


# ---- signal extraction ----

def test_velocity_signals_straight_line():
    v_sag, v_lat = velocity_signals([(0, 0), (0.4, 0), (0.8, 0)], dt=0.4, theta0=0.0)
    assert np.allclose(v_sag.samples.data, [1.0, 1.0])
    assert np.allclose(v_lat.samples.data, [0.0, 0.0])


def test_velocity_signals_pure_lateral():
    v_sag, v_lat = velocity_signals([(0, 0), (0, 0.2)], dt=0.4, theta0=0.0)
    assert np.allclose(v_sag.samples.data, [0.0])
    assert np.allclose(v_lat.samples.data, [0.5])


def test_velocity_signals_turn_decomposed_in_previous_frame():
    v_sag, v_lat = velocity_signals([(0, 0), (0.4, 0), (0.4, 0.4)], dt=0.4, theta0=0.0)
    assert np.allclose(v_sag.samples.data, [1.0, 0.0])
    assert np.allclose(v_lat.samples.data, [0.0, 1.0])


def test_velocity_signals_too_short():
    with pytest.raises(ValueError):
        velocity_signals([(0, 0)], dt=0.4, theta0=0.0)


def test_heading_change_basic_turn():
    s = heading_change_signal([(0, 0), (1, 0), (2, 1)], theta0=0.0)
    assert np.allclose(s.samples.data, [0.0, math.pi / 4])


def test_heading_change_straight_line():
    s = heading_change_signal([(0, 0), (1, 0), (2, 0), (3, 0)], theta0=0.0)
    assert np.allclose(s.samples.data, 0.0)


def test_heading_change_degenerate_segment_inherits():
    s = heading_change_signal([(0, 0), (0, 0), (1, 0)], theta0=0.0)
    assert np.allclose(s.samples.data, [0.0, 0.0])


def test_signals_translation_invariant():
    rng = np.random.default_rng(10)
    traj = rng.normal(size=(6, 2)).cumsum(axis=0)
    shift = np.array([13.7, -4.2])
    for extract in (lambda tr: velocity_signals(tr, 0.4, 0.3)[0].samples.data,
                    lambda tr: velocity_signals(tr, 0.4, 0.3)[1].samples.data,
                    lambda tr: heading_change_signal(tr, 0.3).samples.data):
        assert np.allclose(extract(traj), extract(traj + shift))


def test_heading_change_rotation_invariant_with_rotated_theta0():
    rng = np.random.default_rng(11)
    traj = rng.normal(size=(6, 2)).cumsum(axis=0)
    ang = 1.234
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    base = heading_change_signal(traj, theta0=0.5).samples.data
    turned = heading_change_signal(traj @ rot.T, theta0=0.5 + ang).samples.data
    assert np.allclose(base, turned)


# ---- safety formulas and losses ----

def test_build_safety_formulas_structure():
    phi_vel, phi_dtheta = build_safety_formulas(SafetyParams(), n_steps=8)
    assert isinstance(phi_vel, Always) and phi_vel.a == 0 and phi_vel.b == 7

    def count_preds(phi):
        if isinstance(phi, Pred):
            return 1
        if isinstance(phi, (Always, Eventually, Not)):
            return count_preds(phi.child)
        return count_preds(phi.left) + count_preds(phi.right)

    assert count_preds(phi_vel) == 4
    assert count_preds(phi_dtheta) == 2


def test_phi_dtheta_margin_on_zero_signal():
    params = SafetyParams(dtheta_max=0.3)
    _, phi_dtheta = build_safety_formulas(params, n_steps=5)
    sigs = {stl.CHANNEL_DTHETA: Signal(stl.CHANNEL_DTHETA, Tensor(np.zeros(5)))}
    assert float(robustness(phi_dtheta, sigs).data) == pytest.approx(0.3)


def test_phi_vel_violation_magnitude():
    params = SafetyParams(v_max=1.0)
    phi_vel, _ = build_safety_formulas(params, n_steps=3)
    sigs = {
        stl.CHANNEL_V_SAG: Signal(stl.CHANNEL_V_SAG, Tensor([1.2, 0.9, 0.8])),
        stl.CHANNEL_V_LAT: Signal(stl.CHANNEL_V_LAT, Tensor([0.0, 0.0, 0.0])),
    }
    assert float(robustness(phi_vel, sigs).data) == pytest.approx(-0.2)


def test_stl_loss_compliant_trajectory_is_zero():
    # straight slow walk: 0.2 m steps at 0.5 m/s
    traj = np.column_stack([np.arange(6) * 0.2, np.zeros(6)])
    loss = stl_loss(traj, theta0=0.0, params=SafetyParams())
    assert float(loss.data) == 0.0


def test_stl_loss_velocity_violation_hard_value():
    # one step at 1.2 m/s with v_max = 1.0 and compliant heading
    steps = np.array([0.0, 0.4, 0.8, 1.28, 1.68])
    traj = np.column_stack([steps, np.zeros(5)])
    params = SafetyParams(alpha1=1.0, alpha2=1.0)
    loss_dtheta, loss_vel = stl_terms(traj, 0.0, params, tau=None)
    assert float(loss_vel.data) == pytest.approx(0.2)
    assert float(loss_dtheta.data) == 0.0


def test_stl_loss_nonnegative_and_zero_iff_satisfied():
    rng = np.random.default_rng(12)
    params = SafetyParams()
    for _ in range(50):
        traj = rng.normal(scale=0.3, size=(6, 2)).cumsum(axis=0)
        traj[0] = 0.0
        ld, lv = stl_terms(traj, 0.0, params, tau=None)
        assert float(ld.data) >= 0.0 and float(lv.data) >= 0.0
        v_sag, v_lat = velocity_signals(traj, 0.4, 0.0)
        dth = heading_change_signal(traj, 0.0)
        sigs = {s.name: s for s in (v_sag, v_lat, dth)}
        phi_vel, phi_dth = build_safety_formulas(params, len(dth))
        if float(robustness(phi_vel, sigs).data) >= 0 and \
           float(robustness(phi_dth, sigs).data) >= 0:
            assert float(ld.data) == 0.0 and float(lv.data) == 0.0


def test_stl_loss_gradient_matches_finite_diff():
    rng = np.random.default_rng(13)
    params = SafetyParams()
    for _ in range(5):
        base = rng.normal(scale=0.25, size=(5, 2)).cumsum(axis=0) + 0.1

        def f(x):
            return stl_loss(x, theta0=0.2, params=params, tau=0.1)

        err = dm.finite_diff_check(f, Tensor(base))
        assert err < 1e-4


# ---- serialization ----

def test_format_parse_round_trip():
    phi_vel, phi_dtheta = build_safety_formulas(SafetyParams(), n_steps=8)
    for phi in (phi_vel, phi_dtheta,
                Not(Or(Pred("s", "<=", 1.5), Eventually(Pred("u", ">=", -2.0), 1, 3)))):
        assert parse_formula(format_formula(phi)) == phi


def test_format_example_shape():
    phi = Always(And(Pred("v_sag", "<=", 1.0), Pred("v_sag", ">=", -0.3)), 0, 7)
    assert format_formula(phi) == "(always 0 7 (and (<= v_sag 1.0) (>= v_sag -0.3)))"


def test_parse_rejects_garbage():
    for text in ["", "(foo 1 2)", "(and (<= s 1.0))", "(<= s 1.0) junk"]:
        with pytest.raises(ValueError):
            parse_formula(text)


def test_safety_params_validation():
    with pytest.raises(ValueError):
        SafetyParams(v_max=-1.0, v_min=0.0)
    with pytest.raises(ValueError):
        SafetyParams(tau=0.0)
    with pytest.raises(ValueError):
        SafetyParams(alpha1=-0.1)
