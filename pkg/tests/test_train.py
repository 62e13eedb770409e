import numpy as np
import pytest

from smoe.heat import generate_dataset, generate_preset, generate_region_map
from smoe.losses import AuxConfig
from smoe.tensor import make_rng
from smoe.train import (
    HISTORY_FIELDS,
    Adam,
    NumericalError,
    SMoEModel,
    TrainConfig,
    adam_step,
    build_model,
    evaluate,
    fit,
    pct_within_1pct,
    perfect_init,
    train_step,
)


@pytest.fixture(scope="module")
def tiny():
    return generate_preset("tiny", 3)


# Adam


def test_adam_zero_grad():
    p = {"w": np.ones(3, np.float32)}
    st = Adam()
    adam_step(p, {"w": np.zeros(3, np.float32)}, st, 1e-3)
    np.testing.assert_array_equal(p["w"], 1.0)
    assert st.t == 1


def test_adam_first_step_is_lr_sign():
    g = np.array([3.0, -0.02, 1e-4])
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": g}, Adam(), 1e-3)
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-3)


def test_adam_frozen_and_shape():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    st = Adam()
    adam_step(p, {"a": np.ones(2), "b": np.ones(2)}, st, 0.1, frozen={"b"})
    assert p["a"].any() and not p["b"].any()
    assert "b" not in st.m
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.ones(3)}, st, 0.1)


def test_adam_matches_closed_form_two_steps():
    g1, g2 = 0.5, -0.25
    p = {"w": np.zeros(1)}
    st = Adam()
    adam_step(p, {"w": np.array([g1])}, st, 0.01)
    adam_step(p, {"w": np.array([g2])}, st, 0.01)
    m = 0.1 * 0.9 * g1 + 0.1 * g2
    v = 0.001 * 0.999 * g1**2 + 0.001 * g2**2
    step1 = 0.01 * g1 / (abs(g1) + 1e-8)
    step2 = 0.01 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(p["w"], [-step1 - step2], rtol=1e-9)


# metric


def test_pct_examples():
    t = make_rng(0).random((2, 1, 4, 4)) + 0.1
    assert pct_within_1pct(t, t) == 100.0
    assert pct_within_1pct(1.005 * t, t) == 100.0
    assert pct_within_1pct(1.02 * t, t) == 0.0
    z = np.zeros((1, 4))
    assert pct_within_1pct(z + 5e-7, z) == 100.0
    assert pct_within_1pct(z + 2e-6, z) == 0.0
    half = t.copy()
    half[0] *= 2
    assert pct_within_1pct(half, t) == 50.0
    with pytest.raises(ValueError):
        pct_within_1pct(z, np.zeros(4))


# config


def test_config_validation():
    assert TrainConfig().validate() == []
    for bad in (dict(q=1.0), dict(damping_factor=1.5), dict(plateau_patience=0),
                dict(init_gate="great"), dict(select=4)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert not TrainConfig().is_weighted
    assert TrainConfig(rc_enabled=False).is_weighted
    assert not TrainConfig(rc_enabled=False, weighted=False).is_weighted


# model building and perfect init


def test_perfect_init_scores_100(tiny):
    cfg = TrainConfig(init_gate="perfect", init_experts="perfect")
    model = build_model("smoe", cfg, tiny.region_map)
    assert evaluate(model, *tiny.split("test")).pct_within_1 == 100.0


def test_perfect_experts_random_gate_is_wrong(tiny):
    model = build_model("smoe", TrainConfig(init_experts="perfect"), tiny.region_map)
    assert evaluate(model, *tiny.split("test")).pct_within_1 < 90.0


def test_perfect_init_idempotent(tiny):
    model = build_model("smoe", TrainConfig(), tiny.region_map)
    perfect_init(model, tiny.region_map)
    once = {k: v.copy() for k, v in model.params.items()}
    perfect_init(model, tiny.region_map)
    for k, v in model.params.items():
        np.testing.assert_array_equal(v, once[k])


def test_build_model_errors(tiny):
    with pytest.raises(ValueError):
        build_model("mlp", TrainConfig(), tiny.region_map)
    with pytest.raises(ValueError):
        build_model("smoe", TrainConfig(init_gate="perfect"), (16, 16))
    rmap4 = generate_region_map(16, 16, 4, make_rng(0))
    with pytest.raises(ValueError):
        build_model("smoe", TrainConfig(init_gate="perfect"), rmap4)


def test_build_baselines(tiny):
    assert build_model("lcn", TrainConfig(), tiny.region_map).parameter_count() == 16 * 16 * 10
    assert build_model("conv", TrainConfig(conv_layers=1), (16, 16)).parameter_count() == 10


# train step


def _batch(ds, n=8):
    x, y = ds.split("train")
    return x[:n], y[:n]


def test_no_rc_unweighted_gate_never_moves(tiny):
    cfg = TrainConfig(rc_enabled=False, damping_enabled=False, weighted=False)
    model = build_model("smoe", cfg, tiny.region_map)
    d0 = model.layer.D.copy()
    opt = Adam()
    for _ in range(5):
        train_step(_batch(tiny), model, cfg, opt)
    np.testing.assert_array_equal(model.layer.D, d0)


def test_damping_factor_one_equals_no_damping(tiny):
    runs = []
    for cfg in (TrainConfig(damping_enabled=False), TrainConfig(damping_factor=1.0)):
        model = build_model("smoe", cfg, tiny.region_map)
        opt = Adam()
        for _ in range(3):
            train_step(_batch(tiny), model, cfg, opt)
        runs.append(model.layer.kernels.copy())
    np.testing.assert_array_equal(runs[0], runs[1])


def test_rc_updates_only_gate_from_labels(tiny):
    cfg = TrainConfig(freeze_experts=True)
    model = build_model("smoe", cfg, tiny.region_map)
    k0, d0 = model.layer.kernels.copy(), model.layer.D.copy()
    stats = train_step(_batch(tiny), model, cfg, Adam())
    np.testing.assert_array_equal(model.layer.kernels, k0)
    assert not np.array_equal(model.layer.D, d0)
    assert stats.rc_loss > 0 and stats.n_incorrect > 0


@pytest.mark.parametrize("kind", ["smoe", "conv", "lcn"])
def test_step_decreases_mse_on_fixed_batch(tiny, kind):
    cfg = TrainConfig(seed=1)
    model = build_model(kind, cfg, tiny.region_map)
    batch = _batch(tiny)
    opt = Adam()
    first = train_step(batch, model, cfg, opt).mse
    for _ in range(20):
        last = train_step(batch, model, cfg, opt).mse
    assert last < first


def test_aux_losses_run(tiny):
    cfg = TrainConfig(
        rc_enabled=False,
        aux=AuxConfig(use_importance=True, use_load=True, use_spatial_agreement=True, noise_std=1.0),
    )
    model = build_model("smoe", cfg, tiny.region_map)
    d0 = model.layer.D.copy()
    stats = train_step(_batch(tiny), model, cfg, Adam(), rng=make_rng(0))
    assert stats.aux_loss > 0
    assert not np.array_equal(model.layer.D, d0)


# fit


def test_fit_history_and_determinism(tiny):
    cfg = TrainConfig(max_epochs=3, batch_size=16)
    a = fit(tiny, build_model("smoe", cfg, tiny.region_map), cfg)
    b = fit(tiny, build_model("smoe", cfg, tiny.region_map), cfg)
    assert a.history == b.history
    assert len(a.history) == 3 == a.epochs_run
    assert set(HISTORY_FIELDS) <= set(a.history[0])
    assert a.best_val == max(r["val_pct"] for r in a.history)
    for r in a.history:
        assert 0 <= r["val_pct"] <= 100


def test_fit_restores_best(tiny):
    cfg = TrainConfig(max_epochs=4, batch_size=16, seed=2)
    res = fit(tiny, build_model("smoe", cfg, tiny.region_map), cfg)
    assert evaluate(res.model, *tiny.split("val")).pct_within_1 == pytest.approx(res.best_val)


def test_fit_early_stop_and_decay(tiny):
    # a frozen perfect model never improves after epoch 1
    cfg = TrainConfig(init_gate="perfect", init_experts="perfect", freeze_gate=True,
                      freeze_experts=True, max_epochs=20, plateau_patience=2,
                      early_stop_patience=5, batch_size=64)
    res = fit(tiny, build_model("smoe", cfg, tiny.region_map), cfg)
    assert res.epochs_run == 6 and res.best_epoch == 1
    lrs = [r["lr"] for r in res.history]
    assert lrs[0] == 1e-3 and lrs[3] == pytest.approx(1e-4) and lrs[5] == pytest.approx(1e-5)
    assert all(r["routing_changes"] == 0 for r in res.history)


def test_fit_lr_floor(tiny):
    cfg = TrainConfig(init_gate="perfect", init_experts="perfect", freeze_gate=True,
                      freeze_experts=True, max_epochs=12, plateau_patience=1,
                      early_stop_patience=50, batch_size=64)
    res = fit(tiny, build_model("smoe", cfg, tiny.region_map), cfg)
    assert min(r["lr"] for r in res.history) == pytest.approx(1e-6)


def test_fit_needs_splits():
    ds = generate_dataset(generate_region_map(8, 8, 2, make_rng(0)), 1, 3, make_rng(0))
    with pytest.raises(ValueError):
        fit(ds, build_model("smoe", TrainConfig(), ds.region_map), TrainConfig())


def test_fit_nan_aborts(tiny):
    cfg = TrainConfig(max_epochs=1)
    model = build_model("smoe", cfg, tiny.region_map)
    model.layer.kernels[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        fit(tiny, model, cfg)


def test_frozen_perfect_gate_moves_experts_to_stencils(tiny):
    cfg = TrainConfig(init_gate="perfect", freeze_gate=True, lr=0.01)
    model = build_model("smoe", cfg, tiny.region_map)
    truth = np.stack([tiny.region_map.stencil(t) for t in range(3)])
    before = np.abs(model.layer.kernels[:, 0, 0] - truth).mean()
    d0 = model.layer.D.copy()
    x, y = tiny.split("train")
    opt = Adam()
    for i in range(600):
        j = (4 * i) % len(x)
        train_step((x[j : j + 4], y[j : j + 4]), model, cfg, opt)
    assert isinstance(model, SMoEModel)
    np.testing.assert_array_equal(model.layer.D, d0)
    assert np.abs(model.layer.kernels[:, 0, 0] - truth).mean() < 0.5 * before
