import numpy as np
import pytest

from tendonarm import body_image as bi
from tendonarm import learner as ln
from tendonarm import mlp
from tendonarm import plant as pl
from tendonarm.kinematics import muscle_lengths_abs
from tendonarm.plant import SensorFrame

from conftest import interior_postures

P = ln.AugmentationParams()


def _frame(theta, l, T=None, t=0.0):
    return SensorFrame(np.asarray(theta, float), np.asarray(l, float),
                       np.full(10, 20.0) if T is None else np.asarray(T, float), np.full(10, 25.0), t)


def _rec(theta, l, T=None, t=0.0):
    return ln.SampleRecord.from_frame(_frame(theta, l, T, t))


def test_should_sample_rules():
    prev = _rec(np.zeros(5), np.zeros(10), t=0.0)
    assert ln.should_sample(None, _frame(np.zeros(5), np.zeros(10)), P)
    assert not ln.should_sample(prev, _frame(np.zeros(5), np.zeros(10), t=5.0), P)
    moved = np.array([0.2, 0, 0, 0, 0])
    assert ln.should_sample(prev, _frame(moved, np.zeros(10), t=1.0), P)
    assert not ln.should_sample(prev, _frame(moved, np.zeros(10), t=0.1), P)
    assert ln.should_sample(prev, _frame(np.zeros(5), np.full(10, 2.5), t=0.5), P)
    assert not ln.should_sample(prev, _frame(np.full(5, 0.04), np.full(10, 1.9), t=0.5), P)


def test_augmentation_params_must_be_positive():
    with pytest.raises(ValueError, match="N_b"):
        ln.AugmentationParams(N_b=0)


def test_extract_samples_reconstruction(image, rng):
    th, T = rng.uniform(-0.5, 0.5, 5), rng.uniform(10, 150, 10)
    l = rng.normal(0, 20, 10)
    (ti, yi), (tm, Tm, ym) = ln.extract_samples(_frame(th, l, T), image)
    np.testing.assert_allclose(yi + bi.compensation(image, th, T), l, atol=1e-12)
    np.testing.assert_allclose(ym + bi.ideal_lengths(image, th), l, atol=1e-12)
    # self-consistent measurement: targets equal the networks' own outputs
    lp = bi.predict_lengths(image, th, T)
    (_, yi), (_, _, ym) = ln.extract_samples(_frame(th, lp, T), image)
    np.testing.assert_allclose(yi, bi.ideal_lengths(image, th), atol=1e-9)
    np.testing.assert_allclose(ym, bi.compensation(image, th, T), atol=1e-9)


def test_plant_frame_exposes_geometric_gap(image, plant_cfg, model):
    s = pl.make_plant(plant_cfg, model, theta0=[0.3, -0.4, 0.2, -1.0, 0.3], T0=20.0)
    f = pl.sense(s)
    (_, yi), _ = ln.extract_samples(f, image)
    assert np.max(np.abs(yi - bi.ideal_lengths(image, f.theta))) > 1.0


def test_server_uniform_draws_and_fifo():
    srv = ln.DataServer(capacity=100, seed=4)
    for i in range(150):
        srv.push(_rec(np.zeros(5), np.zeros(10), t=float(i)))
    assert len(srv) == 100
    assert srv.records()[0].t == 50.0
    counts = np.zeros(100)
    for r in srv.draw(100000):
        counts[int(r.t) - 50] += 1
    assert np.all(np.abs(counts - 1000) <= 150)
    assert ln.DataServer(5).draw(3) == []
    with pytest.raises(ValueError):
        ln.DataServer(0)


def test_minibatch_sizes(image, model):
    ch = model.chain
    r = np.random.default_rng(1)
    latest = _rec(np.zeros(5), np.zeros(10))
    srv = ln.DataServer(seed=1)
    bi_, bm = ln.build_minibatch(latest, srv, image, P, r, ch.lower, ch.upper)
    assert len(bi_.inputs) == 1 + 0 + 5 + 5
    assert len(bm.inputs) == 1 + 0 + 0 + 5
    for k in range(20):
        srv.push(_rec(np.full(5, 0.01 * k), np.zeros(10)))
    bi_, bm = ln.build_minibatch(latest, srv, image, P, r, ch.lower, ch.upper)
    assert len(bi_.inputs) == 21 and len(bm.inputs) == 21
    # constraint rows pin the ideal map at the zero posture
    np.testing.assert_array_equal(bi_.inputs[11:16], 0.0)
    np.testing.assert_array_equal(bi_.targets[11:16], 0.0)
    # self-distillation rows are the image's own outputs
    np.testing.assert_allclose(mlp.forward(image.ijmm, bi_.inputs[-5:]), bi_.targets[-5:], atol=1e-12)
    np.testing.assert_allclose(mlp.forward(image.mrcm, bm.inputs[-5:]), bm.targets[-5:], atol=1e-12)


def test_slack_muscles_give_no_signal(image, model):
    ch = model.chain
    T = np.full(10, 20.0)
    T[2] = 0.0
    latest = _rec(np.zeros(5), np.full(10, 30.0), T)
    bi_, bm = ln.build_minibatch(latest, ln.DataServer(), image, P, np.random.default_rng(0), ch.lower, ch.upper)
    assert bi_.targets[0, 2] == pytest.approx(bi.ideal_lengths(image, np.zeros(5))[2])
    assert bm.targets[0, 2] == pytest.approx(bi.compensation(image, np.zeros(5), T)[2])


def test_distillation_only_update_is_a_noop(image, model):
    img = image.copy()
    ch = model.chain
    r = np.random.default_rng(3)
    dth = r.uniform(ch.lower, ch.upper, (5, 5))
    dT = r.uniform(0, 200, (5, 10))
    batches = (mlp.TrainBatch(dth, bi.ideal_lengths(img, dth)),
               mlp.TrainBatch(np.hstack([dth, dT]), bi.compensation(img, dth, dT)))
    opts = ln.make_optimizer("sgd", img.ijmm, 1e-3), ln.make_optimizer("sgd", img.mrcm, 1e-3)
    li, lm = ln.online_update(img, batches, *opts)
    assert li < 1e-20 and lm < 1e-20
    np.testing.assert_allclose(img.ijmm.W1, image.ijmm.W1, atol=1e-15)


def test_divergence_halts_and_restores(image):
    img = image.copy()
    bad = (mlp.TrainBatch(np.zeros((1, 5)), np.full((1, 10), 1e5)),
           mlp.TrainBatch(np.zeros((1, 15)), np.zeros((1, 10))))
    opts = ln.make_optimizer("adam", img.ijmm, 1e-3), ln.make_optimizer("adam", img.mrcm, 1e-3)
    with pytest.raises(ln.LearnerHalted) as ei:
        ln.online_update(img, bad, *opts)
    np.testing.assert_array_equal(img.ijmm.W1, image.ijmm.W1)
    np.testing.assert_array_equal(ei.value.snapshot.ijmm.W1, image.ijmm.W1)
    with pytest.raises(ValueError, match="optimizer"):
        ln.make_optimizer("rmsprop", img.ijmm, 1e-3)


def _plant_records(plant_cfg, model, n, seed):
    # measurements the real arm would return: true path minus true stretch
    s = pl.make_plant(plant_cfg, model)
    el = s.elasticity
    r = np.random.default_rng(seed)
    out = []
    for k, th in enumerate(interior_postures(model, n, seed=seed, shrink=0.8)):
        T = r.uniform(10, 150, 10)
        l_abs = muscle_lengths_abs(s.true_model, th)
        l = l_abs - s.motor_zero - pl.elongation(el, l_abs, T) - T / plant_cfg.k_lin
        out.append(ln.SampleRecord(th, T, l, 0.5 * k))
    return out


def test_repeated_updates_reduce_error_at_a_posture(image, plant_cfg, model):
    rec = _plant_records(plant_cfg, model, 1, seed=2)[0]
    learner = ln.OnlineLearner(image.copy(), model.chain.lower, model.chain.upper, seed=1)
    err = []
    for k in range(100):
        learner.learn(ln.SampleRecord(rec.theta, rec.T, rec.l, float(k)))
        err.append(np.linalg.norm(rec.l - bi.predict_lengths(learner.image, rec.theta, rec.T)))
    assert err[-1] < 0.5 * err[0]
    # within noise: no 10-step window ends worse than it started
    assert all(err[i + 10] < err[i] for i in range(0, 90, 10))


def test_anchor_preserved_over_many_updates(image, plant_cfg, model):
    recs = _plant_records(plant_cfg, model, 1000, seed=3)
    learner = ln.OnlineLearner(image.copy(), model.chain.lower, model.chain.upper, seed=2)
    for rec in recs:
        learner.learn(rec)
    assert learner.n_updates == 1000
    assert np.max(np.abs(bi.ideal_lengths(learner.image, np.zeros(5)))) <= 1.0


def test_self_consistent_stream_does_not_drift(image, model):
    ch = model.chain
    learner = ln.OnlineLearner(image.copy(), ch.lower, ch.upper, seed=3)
    r = np.random.default_rng(5)
    probes = interior_postures(model, 100, seed=6, shrink=1.0)
    probe_T = r.uniform(0, 200, (100, 10))
    before = bi.predict_lengths(image, probes, probe_T)
    for k, th in enumerate(interior_postures(model, 1000, seed=7)):
        T = r.uniform(10, 150, 10)
        learner.learn(ln.SampleRecord(th, T, bi.predict_lengths(image, th, T), 0.5 * k))
    after = bi.predict_lengths(learner.image, probes, probe_T)
    assert np.max(np.abs(after - before)) <= 2.0


def test_observe_gates_and_baseline_updates_every_tick(image, model):
    ch = model.chain
    full = ln.OnlineLearner(image.copy(), ch.lower, ch.upper, seed=0)
    base = ln.OnlineLearner(image.copy(), ch.lower, ch.upper, ln.LearnerConfig(baseline=True), seed=0)
    f = _frame(np.zeros(5), np.zeros(10))
    assert full.observe(f) is not None
    assert full.observe(_frame(np.zeros(5), np.zeros(10), t=0.5)) is None
    for k in range(4):
        assert base.observe(_frame(np.zeros(5), np.zeros(10), t=0.5 * k), theta_est=np.full(5, 0.01)) is not None
    assert base.n_updates == 4 and len(base.server) == 0
    # labels alternate between measured and estimated angles
    assert np.array_equal(base.log[0].theta, np.zeros(5))
    assert np.array_equal(base.log[1].theta, np.full(5, 0.01))


def test_sample_log_replay_is_exact(image, plant_cfg, model, tmp_path):
    ch = model.chain
    recs = _plant_records(plant_cfg, model, 30, seed=8)
    live = ln.OnlineLearner(image.copy(), ch.lower, ch.upper, seed=9)
    for rec in recs:
        live.learn(rec)
    path = tmp_path / "samples.csv"
    ln.write_sample_log(live.log, path)
    back = ln.read_sample_log(path)
    replayed = ln.replay_log(image, back, ch.lower, ch.upper, seed=9)
    for a, b in zip(live.image.ijmm.params() + live.image.mrcm.params(),
                    replayed.ijmm.params() + replayed.mrcm.params()):
        assert np.array_equal(a, b)


def test_sample_log_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        ln.read_sample_log(p)
    p.write_text(",".join(ln.LOG_HEADER) + "\n1,2,3\n")
    with pytest.raises(ValueError, match=":2:"):
        ln.read_sample_log(p)
