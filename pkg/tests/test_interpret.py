"""TSCS/NCS/SAM recurrences, Grad-CAM variants and resampling."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spikesam import tensor as tn
from spikesam.interpret import (Heatmap, NcsState, ann_gradcam, bilinear_resize, ncs_advance, ncs_direct,
                                ncs_maps, sam_compute, snn_gradcam, tscs, upsample)
from spikesam.snn import ANN, Conv, Dense, NetworkConfig, SpikeRecord, SpikingNetwork, desk_preset, poisson_encode

T = tn.Tensor


def exp_series(x, terms=40):
    return math.fsum(x ** k / math.factorial(k) for k in range(terms))


def record_from_spikes(spikes):
    """SpikeRecord around a [T, N, C, H, W] array for a single layer."""
    spikes = np.asarray(spikes, dtype=float)
    return SpikeRecord([spikes], [np.zeros_like(spikes)], np.zeros((spikes.shape[1], 2)))


# ---------------------------------------------------------------- TSCS / NCS

def test_tscs_examples():
    assert tscs(4, 4, 0.7) == 1.0
    assert tscs(9, 1, 0.0) == 1.0
    assert tscs(5, 3, 0.5) == pytest.approx(exp_series(-1.0), rel=1e-15)
    assert tscs(5, 3, 0.5) == pytest.approx(0.36787944, abs=1e-8)
    with pytest.raises(ValueError):
        tscs(3, 1, -0.1)
    with pytest.raises(ValueError):
        tscs(1, 3, 0.5)


def advance_through(spike_times, t_query, gamma):
    state = NcsState(0.0, gamma)
    for t in range(1, t_query + 1):
        state = ncs_advance(state, 1.0 if (t - 1) in spike_times else 0.0)
    return state.accumulator


def test_ncs_examples():
    assert advance_through(set(), 6, 0.5) == 0.0
    assert advance_through({1, 2, 3}, 4, 0.0) == 3.0
    expected = math.exp(-1.5) + math.exp(-0.5)
    assert ncs_direct([1, 3], 4, 0.5) == pytest.approx(expected, rel=1e-15)
    assert advance_through({1, 3}, 4, 0.5) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.829661, abs=1e-6)


def test_ncs_state_rejects_negative_gamma():
    with pytest.raises(ValueError):
        NcsState(0.0, -1.0)
    assert NcsState.zeros((2, 3)).accumulator.shape == (2, 3)


@given(st.lists(st.booleans(), min_size=1, max_size=60), st.sampled_from([0.0, 0.25, 0.5, 1.0]))
def test_incremental_ncs_equals_direct_sum(train, gamma):
    times = [t for t, s in enumerate(train) if s]
    state = NcsState(0.0, gamma)
    for t in range(1, len(train) + 1):
        state = ncs_advance(state, train[t - 1])
        assert state.accumulator >= 0
        assert abs(state.accumulator - ncs_direct(times, t, gamma)) < 1e-9


def test_ncs_maps_matches_scalar_recurrence():
    rng = np.random.default_rng(0)
    spikes = (rng.random((12, 3, 4)) < 0.4).astype(float)
    maps = ncs_maps(spikes, 0.3)
    for idx in np.ndindex(3, 4):
        times = list(np.flatnonzero(spikes[(slice(None),) + idx]))
        for t in range(12):
            assert maps[(t,) + idx] == pytest.approx(ncs_direct(times, t, 0.3), abs=1e-12)


# ---------------------------------------------------------------- SAM

def test_sam_zero_spikes_gives_zero_maps():
    maps = sam_compute(record_from_spikes(np.zeros((5, 1, 2, 3, 3))), 0, 0.5)
    assert len(maps) == 5 and all(not m.values.any() for m in maps)


def test_sam_single_pixel_hand_value():
    s = np.zeros((4, 1, 1, 3, 3))
    s[1, 0, 0, 2, 1] = 1
    s[2, 0, 0, 2, 1] = 1
    maps = sam_compute(record_from_spikes(s), 0, 0.25)
    expected = np.zeros((3, 3))
    expected[2, 1] = math.exp(-0.25)
    np.testing.assert_allclose(maps[2].values, expected, rtol=1e-15)
    assert maps[2].values[2, 1] == pytest.approx(0.778800, abs=1e-6)
    assert not maps[1].values.any()  # first spike has no history


def test_sam_channel_duplication_doubles():
    s = (np.random.default_rng(1).random((6, 1, 1, 4, 4)) < 0.5).astype(float)
    single = sam_compute(record_from_spikes(s), 0, 0.5)
    double = sam_compute(record_from_spikes(np.concatenate([s, s], axis=2)), 0, 0.5)
    for a, b in zip(single, double):
        np.testing.assert_array_equal(b.values, 2 * a.values)


@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_sam_gated_nonnegative_and_closed_form(seed, gamma):
    s = (np.random.default_rng(seed).random((7, 1, 3, 4, 4)) < 0.5).astype(float)
    maps = sam_compute(record_from_spikes(s), 0, gamma)
    any_spike = s[:, 0].max(axis=1)
    for t, m in enumerate(maps):
        assert (m.values >= 0).all()
        assert not m.values[any_spike[t] == 0].any()
        assert m.class_id is None and m.time_step == t
    counts = np.cumsum(s[:, 0], axis=0) - s[:, 0]  # spikes strictly before t
    zero_gamma = sam_compute(record_from_spikes(s), 0, 0.0)
    for t, m in enumerate(zero_gamma):
        np.testing.assert_allclose(m.values, (counts[t] * s[t, 0]).sum(axis=0), atol=1e-12)


def test_sam_layer_errors():
    rec = record_from_spikes(np.zeros((2, 1, 1, 2, 2)))
    with pytest.raises(IndexError):
        sam_compute(rec, 3)
    flat = SpikeRecord([np.zeros((2, 1, 5))], [np.zeros((2, 1, 5))], np.zeros((1, 2)))
    with pytest.raises(ValueError, match="not spatial"):
        sam_compute(flat, 0)


# ---------------------------------------------------------------- SNN Grad-CAM

def conv_dense_net(seed=0, lam=0.9, theta=1.0, beta=0.3):
    cfg = NetworkConfig(input_shape=(1, 4, 4), layers=[Conv(2), Dense(3)], num_steps=5,
                        leak=lam, threshold=theta, beta=beta, bntt=False)
    rng = np.random.default_rng(seed)
    return SpikingNetwork(cfg, weights=[T(rng.normal(0, 1.2, (2, 1, 3, 3)), requires_grad=True),
                                        T(rng.normal(0, 1.0, (3, 32)), requires_grad=True)])


def gradcam_alpha_oracle(net, record, c):
    """dy_c/do_t for the only hidden layer: direct readout plus the soft-reset path."""
    th, lam, beta = net.thresholds[0], net.config.leak, net.config.beta
    wc = net.weights[1].data[c].reshape(2, 4, 4)
    spikes, pots = record.spikes[0][:, 0], record.potentials[0][:, 0]
    n_steps = spikes.shape[0]
    sg = lambda u: beta * np.maximum(0, 1 - np.abs(u - th) / th)
    g_o = np.zeros_like(spikes)
    g_u = np.zeros_like(wc)  # dy/du_t
    for t in reversed(range(n_steps)):
        g_o[t] = wc - th * g_u
        u_prev = pots[t - 1] if t else np.zeros_like(wc)
        g_u = lam * g_u + g_o[t] * sg(u_prev)
    return g_o.sum(axis=(0, 2, 3)) / (16 * n_steps)


def test_snn_gradcam_alpha_matches_oracle():
    net = conv_dense_net()
    train = poisson_encode(np.random.default_rng(2).uniform(100, 255, (1, 1, 4, 4)), 5, seed=3)
    rec = net.forward(train, keep_graph=True)
    assert rec.spikes[0].sum() > 0
    for c in range(3):
        maps, alpha = snn_gradcam(rec, 0, c, return_alpha=True)
        np.testing.assert_allclose(alpha, gradcam_alpha_oracle(net, rec, c), rtol=0, atol=1e-10)
        for t, m in enumerate(maps):
            expected = np.maximum(0, np.tensordot(alpha, rec.spikes[0][t, 0], axes=1))
            np.testing.assert_allclose(m.values, expected, atol=1e-15)


def test_snn_gradcam_zero_gradients_give_zero_maps():
    net = conv_dense_net()
    net.weights[1].data[:] = 0.0
    rec = net.forward(poisson_encode(np.full((1, 1, 4, 4), 255.0), 5, seed=0), keep_graph=True)
    maps = snn_gradcam(rec, 0, 1)
    assert all(not m.values.any() for m in maps)


def test_snn_gradcam_single_channel_sign():
    cfg = NetworkConfig(input_shape=(1, 3, 3), layers=[Conv(1), Dense(2)], num_steps=4, leak=1.0,
                        threshold=0.5, bntt=False)
    w_out = np.zeros((2, 9))
    w_out[0] = 1.0
    w_out[1] = -1.0
    net = SpikingNetwork(cfg, weights=[T(np.full((1, 1, 3, 3), 1.0), requires_grad=True),
                                       T(w_out, requires_grad=True)])
    rec = net.forward(poisson_encode(np.full((1, 1, 3, 3), 255.0), 4, seed=0), keep_graph=True)
    pos, a_pos = snn_gradcam(rec, 0, 0, return_alpha=True)
    neg, a_neg = snn_gradcam(rec, 0, 1, return_alpha=True)
    assert a_pos[0] > 0 > a_neg[0]
    for t in range(4):
        np.testing.assert_allclose(pos[t].values, a_pos[0] * rec.spikes[0][t, 0, 0])
        assert not neg[t].values.any()


def test_snn_gradcam_requires_graph():
    net = conv_dense_net()
    with tn.no_grad():
        rec = net.forward(np.zeros((5, 1, 1, 4, 4)))
    with pytest.raises(ValueError):
        snn_gradcam(rec, 0, 0)


# ---------------------------------------------------------------- ANN Grad-CAM

def test_ann_gradcam_closed_form_on_last_hidden_layer():
    cfg = desk_preset(3, 8, widths=(4,), bntt=False)
    cfg = NetworkConfig(input_shape=(1, 8, 8), layers=[Conv(4), Dense(3)], bntt=False)
    ann = ANN(cfg)
    img = np.random.default_rng(0).uniform(0, 255, (1, 8, 8))
    hm, alpha, act, grad = ann_gradcam(ann, img, 0, 2, return_alpha=True)
    # logits are linear in the captured activations, so dy/dA is the weight row
    np.testing.assert_allclose(grad, ann.weights[1].data[2].reshape(4, 8, 8), atol=1e-15)
    np.testing.assert_allclose(alpha, grad.mean(axis=(1, 2)))
    np.testing.assert_allclose(hm.values, np.maximum(0, np.tensordot(alpha, act, axes=1)))
    assert hm.time_step is None and hm.class_id == 2


def test_ann_gradcam_zero_gradient_and_errors():
    ann = ANN(NetworkConfig(input_shape=(1, 4, 4), layers=[Conv(2), Dense(2)], bntt=False))
    ann.weights[1].data[:] = 0
    assert not ann_gradcam(ann, np.full((1, 4, 4), 100.0), 0, 1).values.any()
    with pytest.raises(IndexError):
        ann_gradcam(ann, np.zeros((1, 4, 4)), 0, 5)
    with pytest.raises(IndexError):
        ann_gradcam(ann, np.zeros((1, 4, 4)), 3, 0)


# ---------------------------------------------------------------- heatmaps / resampling

def test_heatmap_validation_and_normalization():
    with pytest.raises(ValueError):
        Heatmap(np.array([[-1.0]]), 0)
    with pytest.raises(ValueError):
        Heatmap(np.zeros(3), 0)
    assert np.all(Heatmap(np.full((2, 2), 3.0), 0).normalized().values == 0.5)
    n = Heatmap(np.array([[1.0, 3.0]]), 0).normalized()
    assert n.values.tolist() == [[0.0, 1.0]] and n.mode == "normalized"


def test_upsample_hand_case():
    up = bilinear_resize(np.array([[0.0, 1.0], [2.0, 3.0]]), (4, 4))
    i, j = np.mgrid[0:4, 0:4]
    np.testing.assert_allclose(up, j / 3 + 2 * i / 3, atol=1e-15)


def test_upsample_identity_and_constant():
    v = np.random.default_rng(0).random((3, 5))
    np.testing.assert_array_equal(bilinear_resize(v, (3, 5)), v)
    np.testing.assert_allclose(bilinear_resize(np.full((2, 3), 4.0), (7, 9)), 4.0)
    with pytest.raises(ValueError):
        bilinear_resize(v, (0, 4))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_upsample_preserves_range(h, w, th, tw, seed):
    v = np.random.default_rng(seed).random((h, w))
    up = upsample(Heatmap(v, 0), (th, tw)).values
    assert up.shape == (th, tw)
    assert up.min() >= 0 and up.min() >= v.min() - 1e-12 and up.max() <= v.max() + 1e-12
