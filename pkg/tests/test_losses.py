import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smoe.gradcheck import numeric_grad, rel_error
from smoe.layer import top_e_select
from smoe.losses import (
    AuxConfig,
    build_rc_labels,
    combine_aux,
    importance_loss,
    load_loss,
    load_probabilities,
    mse_loss,
    rc_loss,
    routing_noise,
    slot_error,
    spatial_agreement_loss,
)
from smoe.tensor import make_rng


def routing_for(selected_idx, num_experts):
    """Routing record with the given per-point expert choice (E=1)."""
    sel = np.asarray(selected_idx)
    logits = np.zeros((num_experts,) + sel.shape, np.float32)
    np.put_along_axis(logits, sel[None], 1.0, axis=0)
    return top_e_select(logits, 1)


def label_oracle(mag, selected, num_experts, thr):
    """Point-by-point label rules written out with plain loops."""
    sel_count, h, w = selected.shape
    out = np.zeros((num_experts, h, w))
    for i in range(h):
        for j in range(w):
            chosen = list(selected[:, i, j])
            k = sum(mag[s, i, j] > thr for s in range(sel_count))
            for e in range(num_experts):
                if e in chosen:
                    out[e, i, j] = 0.0 if mag[chosen.index(e), i, j] > thr else 1.0
                else:
                    out[e, i, j] = min(k / (num_experts - sel_count), 1.0)
    return out


# mse


def test_mse_examples():
    x = make_rng(0).standard_normal((2, 1, 3, 3)).astype(np.float32)
    loss, g = mse_loss(x, x.copy())
    assert loss == 0.0 and not g.any()
    loss, g = mse_loss(np.array([2.0]), np.array([0.0]))
    assert loss == 4.0 and g.tolist() == [4.0]
    with pytest.raises(ValueError):
        mse_loss(np.zeros(3), np.zeros(4))


def test_mse_gradient_fd():
    rng = make_rng(1)
    x = rng.standard_normal((2, 2, 3, 3))
    y = rng.standard_normal((2, 2, 3, 3))
    _, g = mse_loss(x, y)
    assert rel_error(g, numeric_grad(lambda: mse_loss(x, y)[0], x)) < 1e-6


# RC labels


def test_rc_single_misroute_example():
    # |experts|=3, E=1; point (0,0) routed to expert 2 with a large error
    rt = routing_for([[2, 0, 0, 1, 1]], 3)
    err = np.zeros((1, 1, 1, 5), np.float32)
    err[0, 0, 0, 0] = 5.0
    lab = build_rc_labels(err, rt, 0.7)
    np.testing.assert_array_equal(lab.labels[:, 0, 0], [0.5, 0.5, 0.0])
    for j in range(1, 5):
        chosen = rt.selected[0, 0, j]
        np.testing.assert_array_equal(lab.labels[:, 0, j], np.eye(3)[chosen])
    assert lab.n_incorrect == 1


def test_rc_zero_error_marks_nothing():
    rt = top_e_select(make_rng(2).standard_normal((4, 3, 3)).astype(np.float32), 2)
    lab = build_rc_labels(np.zeros((2, 2, 3, 3), np.float32), rt, 0.7)
    assert lab.threshold == 0.0 and lab.n_incorrect == 0
    np.testing.assert_array_equal(lab.labels, rt.dense_mask().astype(np.float32))


def test_rc_ten_points_top_three():
    rt = routing_for([list(range(10))], 10)
    mags = make_rng(3).permutation(10).astype(np.float32) + 1
    lab = build_rc_labels(mags.reshape(1, 1, 1, 10), rt, 0.7)
    worst = set(np.argsort(mags)[-3:])
    assert set(np.flatnonzero(lab.incorrect_mask[0, 0])) == worst


def test_rc_averages_channels_and_batch():
    err = np.zeros((2, 2, 1, 2), np.float32)  # N=2, E=1, F=2
    err[0, 0, 0, 0] = 4.0
    err[1, 1, 0, 0] = -4.0
    err[:, :, 0, 1] = 1.5
    np.testing.assert_array_equal(slot_error(err, 1), [[[2.0, 1.5]]])
    np.testing.assert_array_equal(slot_error(err, 1, signed=True), [[[0.0, 1.5]]])
    assert slot_error(err, 1, per_sample=True).shape == (2, 1, 1, 2)
    with pytest.raises(ValueError):
        slot_error(np.zeros((1, 3, 2, 2)), 2)


def test_rc_errors():
    rt = routing_for([[0, 1]], 2)
    err = np.ones((1, 1, 1, 2), np.float32)
    for q in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            build_rc_labels(err, rt, q)
    with pytest.raises(ValueError):
        build_rc_labels(err, rt, 0.5, num_experts=3)
    with pytest.raises(ValueError):
        build_rc_labels(np.ones((1, 1, 2, 2)), rt, 0.5)


@given(
    st.integers(0, 2**32 - 1),
    st.integers(2, 5),
    st.data(),
    st.integers(1, 2),
    st.sampled_from([0.3, 0.5, 0.7, 0.9]),
)
def test_rc_label_invariants(seed, n_exp, data, f, q):
    sel = data.draw(st.integers(1, n_exp - 1))
    rng = make_rng(seed)
    rt = top_e_select(rng.standard_normal((n_exp, 3, 4)).astype(np.float32), sel)
    err = rng.standard_normal((2, sel * f, 3, 4)).astype(np.float32)
    # sprinkle exact ties and zeros
    err[rng.random(err.shape) < 0.2] = 0.0
    lab = build_rc_labels(err, rt, q)
    mag = np.abs(err.astype(np.float64)).reshape(2, sel, f, 3, 4).mean(axis=(0, 2))
    srt = np.sort(mag.ravel())
    thr = srt[max(math.ceil(round(q * srt.size, 9)) - 1, 0)]
    assert lab.threshold == thr
    assert lab.n_incorrect == int(np.sum(srt > thr))
    assert np.all((lab.labels >= 0) & (lab.labels <= 1))
    np.testing.assert_allclose(lab.labels, label_oracle(mag, rt.selected, n_exp, thr), atol=1e-7)


def test_rc_q_monotone():
    rng = make_rng(4)
    rt = top_e_select(rng.standard_normal((3, 6, 6)).astype(np.float32), 1)
    err = rng.standard_normal((4, 1, 6, 6)).astype(np.float32)
    counts = [build_rc_labels(err, rt, q).n_incorrect for q in (0.5, 0.6, 0.7, 0.8, 0.9)]
    assert counts == sorted(counts, reverse=True)


def test_rc_per_sample_mode():
    rt = routing_for([[0, 1, 2]], 3)
    err = np.zeros((2, 1, 1, 3), np.float32)
    err[0, 0, 0, 0] = 9.0  # only sample 0 sees the error at point 0
    lab = build_rc_labels(err, rt, 0.7, per_sample=True)
    assert lab.incorrect_mask.shape == (2, 1, 1, 3)
    # half the batch says incorrect: selected label 0.5, each other expert 0.25
    np.testing.assert_allclose(lab.labels[:, 0, 0], [0.5, 0.25, 0.25])


def test_rc_deterministic():
    rng = make_rng(5)
    rt = top_e_select(rng.standard_normal((3, 4, 4)).astype(np.float32), 1)
    err = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    a, b = build_rc_labels(err, rt, 0.7), build_rc_labels(err, rt, 0.7)
    np.testing.assert_array_equal(a.labels, b.labels)


# BCE


def test_bce_max_entropy():
    loss, g = rc_loss(np.zeros((3, 4, 4), np.float32), np.full((3, 4, 4), 0.5))
    assert abs(loss - math.log(2)) < 1e-6
    assert not g.any()


def test_bce_saturation():
    loss, g = rc_loss(np.full((1, 1, 1), 30.0), np.ones((1, 1, 1)))
    assert loss < 1e-6 and abs(g[0, 0, 0]) < 1e-6
    loss, _ = rc_loss(np.full((1, 1, 1), -100.0), np.ones((1, 1, 1)))
    assert np.isfinite(loss) and abs(loss + math.log(1e-7)) < 1e-6  # clamped


def test_bce_gradient_fd_and_sign():
    rng = make_rng(6)
    z = rng.standard_normal((3, 4, 4))
    lab = rng.random((3, 4, 4))
    _, g = rc_loss(z, lab)
    assert rel_error(g, numeric_grad(lambda: rc_loss(z, lab)[0], z)) < 1e-6
    p = 1 / (1 + np.exp(-z))
    assert np.all(np.sign(g) == np.sign(p - lab))


def test_bce_errors():
    with pytest.raises(ValueError):
        rc_loss(np.zeros((2, 2, 2)), np.full((2, 2, 2), 1.5))
    with pytest.raises(ValueError):
        rc_loss(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


# auxiliary losses


def test_importance_examples():
    s = np.zeros((1, 2, 1, 1))
    s[0, :, 0, 0] = [1.0, 3.0]
    assert importance_loss(s)[0] == 0.25
    assert importance_loss(np.ones((2, 3, 2, 2)))[0] == 0.0
    perm = make_rng(7).random((2, 4, 3, 3))
    assert math.isclose(importance_loss(perm)[0], importance_loss(perm[:, ::-1])[0], rel_tol=1e-12)
    with pytest.raises(ValueError):
        importance_loss(np.ones((1, 1, 2, 2)))


def test_importance_degenerate(caplog):
    with caplog.at_level(logging.WARNING):
        loss, g = importance_loss(np.zeros((1, 3, 2, 2)))
    assert loss == 0.0 and not g.any()
    assert "degenerate" in caplog.text


def test_importance_gradient_fd():
    s = make_rng(8).random((2, 3, 3, 3)) + 0.1
    _, g = importance_loss(s)
    assert rel_error(g, numeric_grad(lambda: importance_loss(s)[0], s)) < 1e-6


def test_load_example():
    rt = top_e_select(np.array([0.0, 1.0])[:, None, None], 1)
    p = load_probabilities(np.array([0.0, 1.0])[:, None, None], rt, 1.0)
    assert abs(p[0, 0, 0] - 0.158655) < 1e-4 and p[1, 0, 0] == 0.5
    loss, _ = load_loss(np.array([0.0, 1.0])[:, None, None], rt, 1.0)
    loads = np.array([0.15865525, 0.5])
    assert abs(loss - loads.var() / loads.mean() ** 2) < 1e-6


def test_load_symmetric_and_errors():
    z = np.zeros((3, 4, 4))
    assert load_loss(z, top_e_select(z, 1), 1.0)[0] == 0.0
    with pytest.raises(ValueError):
        load_probabilities(z, top_e_select(z, 1), 0.0)
    with pytest.raises(ValueError):
        load_loss(z[:1], top_e_select(z[:1], 1), 1.0)


def test_load_gradient_fd():
    rng = make_rng(9)
    z = rng.standard_normal((3, 4, 4))
    rt = top_e_select(z, 1)
    _, g = load_loss(z, rt, 0.7)
    # the threshold comes from the forward routing and is held fixed
    assert rel_error(g, numeric_grad(lambda: load_loss(z, rt, 0.7)[0], z)) < 1e-6


def test_spatial_agreement_examples():
    shared = np.broadcast_to(make_rng(10).random((1, 3, 4, 4)), (5, 3, 4, 4))
    assert spatial_agreement_loss(np.array(shared))[0] == 0.0
    s = np.zeros((2, 1, 2, 3))
    s[0, 0, 1, 1], s[1, 0, 1, 1] = 0.6, -0.6
    assert math.isclose(spatial_agreement_loss(s)[0], 0.6 / 6)
    noisy = make_rng(11).random((3, 2, 3, 3))
    assert math.isclose(
        spatial_agreement_loss(noisy)[0], spatial_agreement_loss(np.concatenate([noisy, noisy]))[0]
    )
    with pytest.raises(ValueError):
        spatial_agreement_loss(np.ones((1, 2, 3, 3)))


def test_spatial_agreement_gradient_fd():
    s = make_rng(12).random((3, 2, 3, 3))
    _, g = spatial_agreement_loss(s)
    assert rel_error(g, numeric_grad(lambda: spatial_agreement_loss(s)[0], s)) < 1e-6


def test_combine_aux():
    cfg = AuxConfig(use_importance=True, use_spatial_agreement=True)
    assert combine_aux([], cfg) == 0.0
    assert math.isclose(combine_aux([0.2, 0.4], cfg), 0.003)
    assert math.isclose(combine_aux([0.7], cfg), 0.007)


def test_aux_config_validation():
    with pytest.raises(ValueError):
        AuxConfig(noise_std=-1.0)
    with pytest.raises(ValueError):
        AuxConfig(use_importance=True, aux_scale=0.0)
    with pytest.raises(ValueError):
        AuxConfig(use_load=True)
    assert not AuxConfig().any_enabled


def test_routing_noise():
    z = make_rng(13).standard_normal((3, 4, 4)).astype(np.float32)
    assert routing_noise(z, 0.0, make_rng(0)) is z
    a = routing_noise(z, 0.5, make_rng(1))
    np.testing.assert_array_equal(a, routing_noise(z, 0.5, make_rng(1)))
    assert a.dtype == np.float32
    big = routing_noise(np.zeros(100_000), 0.8, make_rng(2))
    assert abs(big.std() / 0.8 - 1) < 0.02
    with pytest.raises(ValueError):
        routing_noise(z, -1.0, make_rng(0))
