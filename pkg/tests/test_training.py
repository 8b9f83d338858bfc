import csv
import math

import numpy as np
import pytest

from scatternet.emoracle import IncidentWave, SurfaceCurrentField
from scatternet.nn import tensor as T
from scatternet.training import (
    CompatibilityError,
    DatasetError,
    DivergenceError,
    ShapeSpec,
    TrainConfig,
    angle_grid,
    arm_configs,
    clone_model,
    dataset_loss,
    evaluate,
    finetune_protocol,
    flat_config,
    generate_dataset,
    load_model,
    mse_loss,
    physics_loss,
    regression_metrics,
    save_model,
    split_by_angle,
    train,
)
from scatternet.upinet import UPINet, UPINetConfig

CUBE = ShapeSpec("cube", "cube", {"side": 0.2}, 0.2)
SMALL = UPINetConfig(width=8, heads=2, density_hidden=4, normal_hidden=4)


@pytest.fixture(scope="module")
def samples():
    return generate_dataset([CUBE], angle_grid(0, 180, 30))


def channels_of(field):
    return T.Tensor(field.to_channels())


def test_angle_grid_and_dataset(samples, tmp_path):
    assert len(angle_grid(0, 180, 10)) == 19
    assert len(angle_grid(0, 90, 45, phis=(0, 90))) == 6
    assert [s.sample_id for s in samples][:2] == ["cube_t000.000_p000.000", "cube_t030.000_p000.000"]
    for s in samples:
        assert s.system.residual(s.label.currents) <= 1e-8
    a = generate_dataset([CUBE], angle_grid(0, 60, 30), cache_dir=tmp_path / "a", header_comment="h")
    generate_dataset([CUBE], angle_grid(0, 60, 30), cache_dir=tmp_path / "b", header_comment="h")
    for s in a:
        assert (tmp_path / "a" / f"{s.sample_id}.csv").read_bytes() == (tmp_path / "b" / f"{s.sample_id}.csv").read_bytes()


def test_dataset_size_guard():
    big = ShapeSpec("big", "sphere", {"radius": 2.0}, 0.05)
    with pytest.raises(ValueError, match="oracle limit"):
        generate_dataset([big], [(0.0, 0.0)])
    err = DatasetError("s1", RuntimeError("boom"))
    assert "s1" in str(err)


def test_split_is_seeded_and_disjoint(samples):
    tr, te = split_by_angle(samples, 0.2, 0)
    assert sorted(tr + te) == list(range(len(samples))) and not set(tr) & set(te)
    assert (tr, te) == split_by_angle(samples, 0.2, 0)
    assert len(te) == max(1, round(0.2 * len(samples)))
    with pytest.raises(ValueError):
        split_by_angle(samples, 1.0)


def test_physics_loss_examples(samples):
    s = samples[:2]
    zero = [T.Tensor(np.zeros((x.n_faces, 6))) for x in s]
    ref = np.mean([np.vdot(x.V, x.V).real for x in s])
    assert physics_loss(zero, s, normalize=False).item() == pytest.approx(ref, rel=1e-12)
    assert physics_loss(zero, s).item() == pytest.approx(ref / s[0].n_faces, rel=1e-12)
    exact = [channels_of(x.label) for x in s]
    bound = np.mean([(1e-8 * np.linalg.norm(x.V)) ** 2 for x in s])
    assert physics_loss(exact, s, normalize=False).item() <= bound
    with pytest.raises(ValueError):
        physics_loss([T.Tensor(np.zeros((3, 6)))], s[:1])


def test_physics_loss_gradient_wrt_prediction(samples):
    s = samples[0]
    rng = np.random.default_rng(0)
    x = T.Tensor(s.label.to_channels() + 1e-3 * rng.normal(size=(s.n_faces, 6)), requires_grad=True)
    loss = physics_loss([x], [s])
    loss.backward()
    idx = [(0, 0), (5, 3), (17, 5), (100, 1)]
    for i, j in idx:
        h = 1e-6 * max(1e-3, abs(x.data[i, j]))
        xp, xm = x.data.copy(), x.data.copy()
        xp[i, j] += h
        xm[i, j] -= h
        fd = (physics_loss([T.Tensor(xp)], [s]).item() - physics_loss([T.Tensor(xm)], [s]).item()) / (2 * h)
        assert abs(x.grad[i, j] - fd) <= 1e-4 * max(abs(fd), np.abs(x.grad).max() * 1e-3)


def test_mse_examples():
    rng = np.random.default_rng(1)
    lab = rng.normal(size=(10, 6))
    assert mse_loss([T.Tensor(lab)], [lab]).item() == 0.0
    shifted = lab.copy()
    shifted[:, 2] += 0.5
    assert mse_loss([T.Tensor(shifted)], [lab]).item() == pytest.approx(0.25 / 6, rel=1e-12)
    p = rng.normal(size=(10, 6))
    assert mse_loss([T.Tensor(p)], [lab]).item() == mse_loss([T.Tensor(lab)], [p]).item()
    field = SurfaceCurrentField.from_channels(lab)
    assert mse_loss([T.Tensor(lab)], [field]).item() == 0.0


def test_regression_metrics_identities():
    rng = np.random.default_rng(2)
    y = rng.uniform(size=50)
    assert regression_metrics(y, y) == (0.0, 1.0, 0.0, 0.0)
    rmse, r2, mae, mse = regression_metrics(np.full(50, y.mean()), y)
    assert r2 == pytest.approx(0.0, abs=1e-12)
    rmse, r2, mae, mse = regression_metrics(rng.uniform(size=50), y)
    assert mse == pytest.approx(rmse**2, rel=1e-14) and r2 <= 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="l1")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"steps": 3, "nope": 1})
    c = TrainConfig(steps=7)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_training_deterministic_and_lr_zero(samples, tmp_path):
    cfg = TrainConfig(batch_size=2, steps=4, seed=3)
    a = train(samples, cfg, SMALL)
    b = train(samples, cfg, SMALL)
    assert a.history == b.history and a.final_loss == b.final_loss
    assert [h[0] for h in a.history] == [0, 1, 2, 3]
    frozen = train(samples, TrainConfig(batch_size=2, steps=3, learning_rate=0.0), SMALL)
    init = UPINet(SMALL)
    for k, p in frozen.model.store.items():
        np.testing.assert_array_equal(p.data, init.store[k].data)
    assert frozen.initial_loss == frozen.final_loss
    a.write_history(tmp_path / "h.csv", "config_hash=x")
    rows = list(csv.reader((tmp_path / "h.csv").read_text().splitlines()[1:]))
    assert rows[0] == ["epoch", "loss"] and len(rows) == 1 + len(a.epoch_history())


def test_divergence_guard(samples):
    with pytest.raises(DivergenceError) as exc:
        train(samples[:2], TrainConfig(batch_size=2, steps=40, learning_rate=1e6), SMALL)
    assert exc.value.step >= 0


def test_dataset_loss_leaves_state_untouched(samples):
    m = UPINet(SMALL)
    before = m.store.state()
    dataset_loss(m, samples[:2], TrainConfig())
    after = m.store.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_checkpoint_roundtrip(samples, tmp_path):
    m = UPINet(SMALL)
    save_model(tmp_path / "m.snck", m, {"config_hash": "abc"})
    back, cfg = load_model(tmp_path / "m.snck", SMALL)
    assert cfg["config_hash"] == "abc"
    np.testing.assert_array_equal(back.predict(samples[0].context, samples[0].wave).currents,
                                  m.eval().predict(samples[0].context, samples[0].wave).currents)
    with pytest.raises(CompatibilityError):
        load_model(tmp_path / "m.snck", UPINetConfig(width=16, heads=2))


def test_evaluate_exact_predictions(samples, tmp_path):
    m = UPINet(SMALL)
    rep = evaluate(m, samples[:2], predictions=[s.label for s in samples[:2]], cut_step=30.0)
    assert (rep.rmse, rep.mae, rep.mse, rep.r2) == (0.0, 0.0, 0.0, 1.0)
    assert np.all(rep.rcs_error_db == 0) and np.all(rep.residuals <= 1e-8)
    rep = evaluate(m, samples[:2], cut_step=30.0)
    assert rep.mse == pytest.approx(rep.rmse**2) and rep.r2 <= 1
    rep.write_json(tmp_path / "m.json", "abc")
    rep.write_cdf(tmp_path / "c.csv")
    rep.write_boxplot(tmp_path / "b.csv")
    rep.write_overlay(tmp_path / "o.csv")
    cdf = np.loadtxt(tmp_path / "c.csv", delimiter=",", skiprows=1)
    assert cdf[-1, 1] == 1.0 and np.all(np.diff(cdf[:, 0]) >= 0)
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 3
    assert len((tmp_path / "o.csv").read_text().splitlines()) == 1 + 2 * 7


def test_finetune_protocol(samples):
    base = UPINet(SMALL)
    cfg = TrainConfig(batch_size=2, finetune_steps=2)
    rep, res = finetune_protocol(base, samples, 0.5, cfg)
    assert len(res.train_ids) == math.ceil(0.5 * len(samples))
    assert len(rep.sample_ids) == len(samples) - len(res.train_ids)
    assert not set(rep.sample_ids) & set(res.train_ids)
    rep1, res1 = finetune_protocol(base, samples, 1.0, cfg)
    tr, te = split_by_angle(samples, cfg.test_fraction, cfg.seed)
    assert res1.train_ids == [samples[i].sample_id for i in tr]
    with pytest.raises(ValueError):
        finetune_protocol(base, samples, 0.1, cfg)  # ceil(0.7) = 1 sample
    c = clone_model(base)
    assert all(np.array_equal(c.store[k].data, p.data) for k, p in base.store.items())


def test_arm_configs_differ_by_one_flag():
    arms = arm_configs(SMALL, TrainConfig())
    assert list(arms) == ["full", "physics-loss", "edge", "skip"]
    full = flat_config(*arms["full"])
    for name in ("physics-loss", "edge", "skip"):
        diff = {k for k, v in flat_config(*arms[name]).items() if full[k] != v}
        assert len(diff) == 1, (name, diff)
