import numpy as np
import pytest

from socialstep import diffmath as dm
from socialstep import planner as pl
from socialstep.crowdsets import SocialSample
from socialstep.diffmath import Tensor
from socialstep.planner import (
    LossBreakdown, ModelLoadError, PlannerConfig, PlannerModel,
    SgdMomentum, SocialPathPlanner, TrainingDivergenceError, encode_env,
    evaluate, load_model, predict, save_model, train, train_step,
    training_loss,
)
from socialstep.stl import SafetyParams

TINY = PlannerConfig(
    n_obs=4, n_pred=4, latent_dim=2,
    ped_encoder=(8, 6), goal_encoder=(6, 4), traj_encoder=(8, 6),
    latent_encoder=(8, 4), decoder=(8, 8), batch_size=4, seed=11,
)


def make_sample(rng, n_obs=4, n_pred=4, n_neighbors=2):
    neighbors = [rng.normal(scale=1.5, size=(n_obs, 2)) for _ in range(n_neighbors)]
    future = rng.normal(scale=0.2, size=(n_pred, 2)).cumsum(axis=0) + [0.3, 0.0]
    return SocialSample(
        ego_id=int(rng.integers(1, 50)), t_anchor=int(rng.integers(8, 60)),
        neighbors=neighbors, goal=future[-1].copy(), ego_future=future,
        theta0=float(rng.uniform(-np.pi, np.pi)))


def test_config_invariants_enforced():
    with pytest.raises(ValueError):
        PlannerConfig(latent_dim=4, latent_encoder=(8, 6))  # 6 != 2*4
    with pytest.raises(ValueError):
        PlannerConfig(n_pred=8, decoder=(8, 10))  # 10 != 16


def test_default_config_shapes_consistent():
    cfg = PlannerConfig()
    model = PlannerModel(cfg)
    assert cfg.env_dim == 32
    assert cfg.layer_sizes("latent_encoder")[0] == 48
    assert cfg.layer_sizes("decoder")[0] == 40
    for _, p in model.parameters():
        assert np.all(np.isfinite(p.data))


def test_encode_env_zero_neighbors_zero_block():
    model = PlannerModel(TINY)
    s = make_sample(np.random.default_rng(0), n_neighbors=0)
    env = encode_env(model, s)
    width = TINY.ped_encoder[-1]
    assert np.array_equal(env.data[:width], np.zeros((width, 1)))
    assert not np.allclose(env.data[width:], 0.0)


def test_encode_env_permutation_bitwise():
    model = PlannerModel(TINY)
    rng = np.random.default_rng(1)
    s = make_sample(rng, n_neighbors=4)
    base = encode_env(model, s).data
    for _ in range(5):
        perm = list(np.random.default_rng(2).permutation(4))
        s2 = SocialSample(s.ego_id, s.t_anchor, [s.neighbors[i] for i in perm],
                          s.goal, s.ego_future, s.theta0)
        assert np.array_equal(encode_env(model, s2).data, base)


def test_encode_env_duplicate_neighbor_doubles():
    model = PlannerModel(TINY)
    rng = np.random.default_rng(3)
    nb = rng.normal(size=(4, 2))
    s1 = make_sample(rng, n_neighbors=0)
    one = SocialSample(1, 1, [nb], s1.goal, s1.ego_future, 0.0)
    two = SocialSample(1, 1, [nb, nb.copy()], s1.goal, s1.ego_future, 0.0)
    width = TINY.ped_encoder[-1]
    e1 = encode_env(model, one).data[:width]
    e2 = encode_env(model, two).data[:width]
    assert np.allclose(e2, 2.0 * e1)


def test_kl_closed_forms():
    # mu=0, sigma=1 -> 0 ; mu=1, sigma=1, one dim -> 0.5
    mu = Tensor(np.zeros((3, 1)))
    lv = Tensor(np.zeros((3, 1)))
    kl = (mu.square() + lv.exp() - lv - 1.0).sum(axis=0).scale(0.5)
    assert float(kl.data[0]) == pytest.approx(0.0)
    mu1 = Tensor(np.ones((1, 1)))
    kl1 = (mu1.square() + lv[0:1].exp() - lv[0:1] - 1.0).sum(axis=0).scale(0.5)
    assert float(kl1.data[0]) == pytest.approx(0.5)


def test_training_loss_breakdown_identity():
    rng = np.random.default_rng(4)
    model = PlannerModel(TINY)
    batch = [make_sample(rng) for _ in range(4)]
    noise = rng.standard_normal((TINY.latent_dim, 4))
    _, bd = training_loss(model, batch, noise)
    p = TINY.safety
    recon = ((bd.kl + bd.endpoint) + bd.avg_traj) \
        + bd.stl_dtheta * p.alpha1 + bd.stl_vel * p.alpha2
    assert bd.total == pytest.approx(recon, abs=1e-12)
    assert bd.kl >= 0.0


def test_training_loss_alpha_zero_detaches_stl():
    rng = np.random.default_rng(5)
    cfg = pl.replace(TINY, safety=SafetyParams(alpha1=0.0, alpha2=0.0))
    model = PlannerModel(cfg)
    batch = [make_sample(rng) for _ in range(3)]
    noise = rng.standard_normal((cfg.latent_dim, 3))
    _, bd = training_loss(model, batch, noise)
    assert bd.stl_dtheta == 0.0 and bd.stl_vel == 0.0
    assert bd.total == ((bd.kl + bd.endpoint) + bd.avg_traj)


def test_training_divergence_reports_sample():
    model = PlannerModel(TINY)
    rng = np.random.default_rng(6)
    bad = make_sample(rng)
    bad.ego_future = bad.ego_future.copy()
    bad.ego_future[2, 0] = np.nan
    with pytest.raises(TrainingDivergenceError) as ei:
        training_loss(model, [bad], rng.standard_normal((TINY.latent_dim, 1)))
    assert ei.value.sample_ids


def test_gradients_match_finite_differences_all_groups():
    rng = np.random.default_rng(7)
    model = PlannerModel(TINY)
    batch = [make_sample(rng, n_neighbors=2) for _ in range(2)]
    noise = rng.standard_normal((TINY.latent_dim, 2))
    for net in pl.NET_NAMES:
        for li in range(len(model.nets[net])):
            for slot in (0, 1):

                def f(x, net=net, li=li, slot=slot):
                    layer = list(model.nets[net][li])
                    saved = layer[slot]
                    layer[slot] = x
                    model.nets[net][li] = tuple(layer)
                    try:
                        total, _ = training_loss(model, batch, noise)
                    finally:
                        layer[slot] = saved
                        model.nets[net][li] = tuple(layer)
                    return total

                x0 = Tensor(model.nets[net][li][slot].data.copy())
                err = dm.finite_diff_check(f, x0)
                assert err < 1e-4, f"{net}[{li}][{slot}] grad error {err}"


def test_overfit_single_sample():
    rng = np.random.default_rng(8)
    cfg = pl.replace(TINY, learning_rate=5e-3, batch_size=1, epochs=200, seed=3)
    model = PlannerModel(cfg)
    sample = make_sample(rng, n_neighbors=1)
    history = train(model, [sample])
    assert history[-1].total < 0.1 * history[0].total


def test_train_deterministic_loss_trace():
    rng = np.random.default_rng(9)
    samples = [make_sample(rng) for _ in range(12)]
    cfg = pl.replace(TINY, epochs=3)
    h1 = train(PlannerModel(cfg), samples)
    h2 = train(PlannerModel(cfg), samples)
    assert [b.total for b in h1] == [b.total for b in h2]


def test_predict_modes():
    model = PlannerModel(TINY)
    rng = np.random.default_rng(10)
    s = make_sample(rng)
    a = predict(model, s.neighbors, s.goal, mode="mean")
    b = predict(model, s.neighbors, s.goal, mode="mean")
    assert np.array_equal(a, b)
    assert a.shape == (TINY.n_pred, 2)
    s1 = predict(model, s.neighbors, s.goal, mode="sample", k=3, seed=42)
    s2 = predict(model, s.neighbors, s.goal, mode="sample", k=3, seed=42)
    s3 = predict(model, s.neighbors, s.goal, mode="sample", k=3, seed=43)
    assert np.array_equal(s1, s2)
    assert s1.shape == (3, TINY.n_pred, 2)
    assert not np.array_equal(s1, s3)
    with pytest.raises(ValueError):
        predict(model, s.neighbors, s.goal, mode="sample", k=0)
    with pytest.raises(ValueError):
        predict(model, s.neighbors, s.goal, mode="nope")


def test_predict_permutation_invariant_bitwise():
    model = PlannerModel(TINY)
    rng = np.random.default_rng(11)
    s = make_sample(rng, n_neighbors=5)
    base = predict(model, s.neighbors, s.goal, mode="mean")
    for i in range(10):
        perm = np.random.default_rng(100 + i).permutation(5)
        shuffled = [s.neighbors[j] for j in perm]
        assert np.array_equal(predict(model, shuffled, s.goal, mode="mean"), base)


def test_best_of_beats_or_matches_mean_mostly():
    rng = np.random.default_rng(12)
    model = PlannerModel(TINY)
    samples = [make_sample(rng) for _ in range(40)]
    train(model, samples, epochs=3)

    def worst_robustness(traj, theta0):
        from socialstep import stl
        full = np.vstack([[0.0, 0.0], traj])
        v_sag, v_lat = stl.velocity_signals(full, 0.4, theta0)
        dth = stl.heading_change_signal(full, theta0)
        sigs = {x.name: x for x in (v_sag, v_lat, dth)}
        phi_vel, phi_dth = stl.build_safety_formulas(model.config.safety, len(dth))
        return min(float(stl.robustness(phi_vel, sigs).data),
                   float(stl.robustness(phi_dth, sigs).data))

    wins = 0
    for i, s in enumerate(samples):
        mean_rho = worst_robustness(
            predict(model, s.neighbors, s.goal, mode="mean"), s.theta0)
        best_rho = worst_robustness(
            predict(model, s.neighbors, s.goal, mode="best_of", k=16, seed=i,
                    theta0=s.theta0), s.theta0)
        if best_rho >= mean_rho - 1e-12:
            wins += 1
    assert wins >= 0.9 * len(samples)


def test_evaluate_exact_prediction_zero_error():
    model = PlannerModel(TINY)
    rng = np.random.default_rng(13)
    s = make_sample(rng)
    pred = predict(model, s.neighbors, s.goal, mode="mean")
    aligned = SocialSample(s.ego_id, s.t_anchor, s.neighbors, s.goal,
                           pred.copy(), s.theta0)
    res = evaluate(model, [aligned])
    assert res.ade[0] == pytest.approx(0.0, abs=1e-12)
    assert res.fde[0] == pytest.approx(0.0, abs=1e-12)


def test_evaluate_constant_offset():
    model = PlannerModel(TINY)
    rng = np.random.default_rng(14)
    s = make_sample(rng)
    pred = predict(model, s.neighbors, s.goal, mode="mean")
    shifted = SocialSample(s.ego_id, s.t_anchor, s.neighbors, s.goal,
                           pred + np.array([1.0, 0.0]), s.theta0)
    res = evaluate(model, [shifted])
    assert res.ade[0] == pytest.approx(1.0)
    assert res.fde[0] == pytest.approx(1.0)


def test_evaluate_compliant_prediction_zero_violations():
    model = PlannerModel(TINY)
    # force the decoder to output a slow straight line regardless of input
    for i, (w, b) in enumerate(model.nets["decoder"]):
        model.nets["decoder"][i] = (Tensor(np.zeros_like(w.data)),
                                    Tensor(np.zeros_like(b.data)))
    w_last, b_last = model.nets["decoder"][-1]
    line = np.column_stack([np.arange(1, 5) * 0.2, np.zeros(4)]).ravel()
    model.nets["decoder"][-1] = (w_last, Tensor(line.reshape(-1, 1)))
    s = make_sample(np.random.default_rng(15))
    s.theta0 = 0.0
    res = evaluate(model, [s])
    assert res.heading_violation[0] == 0.0
    assert res.velocity_violation[0] == 0.0


def test_evaluate_empty_set_raises():
    with pytest.raises(ValueError):
        evaluate(PlannerModel(TINY), [])


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    model = PlannerModel(TINY)
    train(model, [make_sample(rng) for _ in range(8)], epochs=2)
    path = tmp_path / "model.npz"
    save_model(model, path)
    back = load_model(path)
    s = make_sample(rng)
    assert np.array_equal(predict(model, s.neighbors, s.goal),
                          predict(back, s.neighbors, s.goal))
    for (n1, p1), (n2, p2) in zip(model.parameters(), back.parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    assert back.meta["epochs_seen"] == 2


def test_load_truncated_file_is_error(tmp_path):
    model = PlannerModel(TINY)
    path = tmp_path / "model.npz"
    save_model(model, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ModelLoadError):
        load_model(path)


def test_load_future_version_is_error(tmp_path):
    path = tmp_path / "future.npz"
    np.savez(path, format_version=np.array(99),
             config_json=np.array("{}"), meta_json=np.array("{}"))
    with pytest.raises(ModelLoadError, match="v99"):
        load_model(path)


def test_estimator_facade():
    rng = np.random.default_rng(17)
    samples = [make_sample(rng) for _ in range(10)]
    est = SocialPathPlanner(config=pl.replace(TINY, epochs=2))
    assert "config" in est.get_params()
    est.set_params(epochs=1)
    assert est.config.epochs == 1
    est.fit(samples)
    out = est.predict(samples[:3])
    assert out.shape == (3, TINY.n_pred, 2)
    assert isinstance(est.score(samples[:3]), float)
    with pytest.raises(RuntimeError):
        SocialPathPlanner(config=TINY).predict(samples[:1])
