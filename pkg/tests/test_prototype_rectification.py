"""Prototype rectification tests: bias estimator, outlier pairs, de-biasing MC."""

import numpy as np
import pytest

from fscil.config import TrainingConfig, desk_profile
from fscil.errors import ArgumentError
from fscil.numerics import SeededRng, Tensor, grad_check
from fscil.prototype_rectification import (
    OutlierPairs,
    PredictionNet,
    estimate_intra_class_bias,
    merge_pairs,
    pseudo_label,
    rectify_prototype,
    refine_gaussian_stats,
    select_outlier_pairs,
    train_prediction_net,
)
from fscil.task_inference import SharedCovariance, fit_class_stats


# -- intra-class bias ------------------------------------------------------------


def test_bias_zero_when_subset_is_full_set():
    rng = np.random.default_rng(0)
    full = rng.normal(size=(20, 4))
    np.testing.assert_allclose(estimate_intra_class_bias(full, full), np.zeros(4), atol=1e-12)


def test_bias_definition_case():
    full = np.array([[1.0, 1.0], [1.0, 1.0]])
    few = np.array([[0.0, 0.0]])
    np.testing.assert_array_equal(estimate_intra_class_bias(full, few), [1.0, 1.0])


def test_bias_norm_shrinks_with_shot_count():
    # Monte-Carlo oracle: mean ||bias|| over resamples decreases 1 -> 5 -> 25
    rng = np.random.default_rng(1)
    full = rng.normal(size=(2000, 6))
    norms = {}
    for k in (1, 5, 25):
        vals = []
        for _ in range(300):
            idx = rng.choice(len(full), size=k, replace=False)
            vals.append(np.linalg.norm(estimate_intra_class_bias(full, full[idx])))
        norms[k] = np.mean(vals)
    assert norms[1] > norms[5] > norms[25]


def test_bias_empty_inputs_rejected():
    with pytest.raises(ArgumentError):
        estimate_intra_class_bias(np.zeros((0, 3)), np.zeros((1, 3)))


# -- outlier pairs -----------------------------------------------------------------


def test_single_outlier_is_argmax_distance():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(12, 3))
    proto = emb.mean(axis=0)
    pairs = select_outlier_pairs(emb, proto, 1)
    dists = np.linalg.norm(emb - proto, axis=1)
    np.testing.assert_array_equal(pairs.inputs[0], emb[dists.argmax()])
    np.testing.assert_array_equal(pairs.targets[0], proto)


def test_outlier_ranking_matches_full_sort_oracle():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(30, 5))
    proto = rng.normal(size=5)
    pairs = select_outlier_pairs(emb, proto, 7)
    order = np.argsort(-np.linalg.norm(emb - proto, axis=1), kind="stable")[:7]
    np.testing.assert_array_equal(pairs.inputs, emb[order])


def test_outlier_count_defaults_follow_published_settings():
    cfg = TrainingConfig()
    assert cfg.outliers_base == 5 and cfg.outliers_inc == 1


def test_too_many_outliers_strict_and_lenient():
    emb = np.zeros((3, 2))
    with pytest.raises(ArgumentError):
        select_outlier_pairs(emb, np.zeros(2), 5)
    with pytest.warns(UserWarning):
        pairs = select_outlier_pairs(emb, np.zeros(2), 5, lenient=True)
    assert len(pairs) == 3


# -- pseudo labeling ---------------------------------------------------------------


def _blob_stats(rng, n_classes=4, dim=4, spread=6.0):
    means = rng.normal(size=(n_classes, dim)) * spread
    emb = np.concatenate([means[c] + 0.3 * rng.normal(size=(10, dim)) for c in range(n_classes)])
    labels = np.repeat(np.arange(n_classes), 10)
    gaussians, scatter = fit_class_stats(emb, labels, session=0)
    shared = SharedCovariance(matrix=scatter + np.eye(dim), sessions=[0])
    return means, gaussians, shared


def test_pool_point_at_class_mean_gets_that_class():
    rng = np.random.default_rng(4)
    means, gaussians, shared = _blob_stats(rng)
    got = pseudo_label(gaussians[2].mean[None, :], gaussians, shared, "mahalanobis")
    assert got.tolist() == [2]


def test_separated_blobs_pseudo_label_perfectly():
    rng = np.random.default_rng(5)
    means, gaussians, shared = _blob_stats(rng, spread=10.0)
    pool = np.concatenate([means[c] + 0.3 * rng.normal(size=(25, 4)) for c in range(4)])
    truth = np.repeat(np.arange(4), 25)
    got = pseudo_label(pool, gaussians, shared, "mahalanobis")
    assert np.array_equal(got, truth)


def test_empty_pool_returns_empty():
    rng = np.random.default_rng(6)
    _, gaussians, shared = _blob_stats(rng)
    assert len(pseudo_label(np.zeros((0, 4)), gaussians, shared, "euclidean")) == 0


# -- prediction net ------------------------------------------------------------------


def test_identity_pairs_reach_small_mse():
    # the linear variant can represent the identity exactly
    rng = np.random.default_rng(7)
    data = rng.normal(size=(20, 4))
    pairs = OutlierPairs(inputs=data, targets=data.copy(), per_class=0)
    net = PredictionNet(4, 0, SeededRng(0), depth=1)
    cfg = desk_profile(prednet_epochs=400, prednet_batch_size=20, prednet_lr=1e-2)
    train_prediction_net(net, pairs, cfg, SeededRng(1))
    mse = float(((net.apply(data) - data) ** 2).mean())
    assert mse < 1e-4


def test_single_pair_memorized():
    pairs = OutlierPairs(inputs=np.array([[1.0, -2.0]]), targets=np.array([[0.5, 0.5]]), per_class=1)
    net = PredictionNet(2, 0, SeededRng(2), depth=2)
    cfg = desk_profile(prednet_epochs=1200, prednet_batch_size=1, prednet_lr=1e-2)
    train_prediction_net(net, pairs, cfg, SeededRng(3))
    mse = float(((net.apply(pairs.inputs) - pairs.targets) ** 2).mean())
    assert mse < 1e-6


def test_prednet_lr_default():
    assert TrainingConfig().prednet_lr == 1e-3


def test_empty_pairs_rejected():
    net = PredictionNet(2, 0, SeededRng(4))
    with pytest.raises(ArgumentError):
        train_prediction_net(net, OutlierPairs(np.zeros((0, 2)), np.zeros((0, 2)), 0), desk_profile(), SeededRng(5))
    with pytest.raises(ArgumentError):
        merge_pairs([])


def test_linear_variant_and_depth_validation():
    net = PredictionNet(3, 0, SeededRng(6), depth=1)
    assert len(net.layers) == 1
    with pytest.raises(ArgumentError):
        PredictionNet(3, 0, SeededRng(7), depth=5)


def test_prediction_net_gradients():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3))
    t = rng.normal(size=(4, 3))

    def f(w):
        net = PredictionNet(3, 0, SeededRng(9), depth=2)
        net.layers[0].weight = w
        diff = net(Tensor(x)) - Tensor(t)
        return (diff * diff).mean()

    start = PredictionNet(3, 0, SeededRng(9), depth=2).layers[0].weight.data
    assert grad_check(f, Tensor(start.copy()), tol=1e-4).passed


# -- rectification --------------------------------------------------------------------


def test_identity_net_is_exact_fixed_point():
    net = PredictionNet.identity(5)
    mu = np.random.default_rng(10).normal(size=5)
    out = rectify_prototype(net, mu)
    assert np.array_equal(out, mu)


def test_rectify_linear_shift_case():
    # P(mu) = mu + 2b  =>  R(mu) = mu + b
    net = PredictionNet.identity(3)
    b = np.array([0.5, -1.0, 2.0])
    net.layers[0].bias.data = 2.0 * b
    mu = np.array([1.0, 1.0, 1.0])
    np.testing.assert_allclose(rectify_prototype(net, mu), mu + b, atol=1e-12)


def test_rectify_matches_half_sum_oracle():
    rng = np.random.default_rng(11)
    net = PredictionNet(6, 0, SeededRng(12), depth=2)
    for _ in range(20):
        mu = rng.normal(size=6)
        oracle = 0.5 * (net.apply(mu) + mu)
        np.testing.assert_allclose(rectify_prototype(net, mu), oracle, atol=1e-12)


def test_rectify_dim_mismatch():
    with pytest.raises(ArgumentError):
        rectify_prototype(PredictionNet.identity(4), np.zeros(6))


# -- refinement -------------------------------------------------------------------------


def test_refine_with_identity_net_keeps_means_and_scatter():
    rng = np.random.default_rng(13)
    emb = rng.normal(size=(12, 3))
    labels = np.repeat([0, 1], 6)
    gaussians, scatter = fit_class_stats(emb, labels, session=0)
    refined, new_scatter = refine_gaussian_stats(PredictionNet.identity(3), emb, labels, gaussians)
    for g, r in zip(gaussians, refined):
        np.testing.assert_array_equal(g.mean, r.mean)
    np.testing.assert_allclose(new_scatter, scatter, atol=1e-12)


def test_refine_two_point_hand_case():
    emb = np.array([[0.0, 0.0], [2.0, 0.0]])
    labels = np.array([0, 0])
    gaussians, _ = fit_class_stats(emb, labels, session=1)
    net = PredictionNet.identity(2)
    net.layers[0].bias.data = np.array([1.0, 0.0])  # P(x) = x + (1, 0)

    refined, scatter = refine_gaussian_stats(net, emb, labels, gaussians)
    # by hand: mu = (1,0); R(mu) = (mu + P(mu))/2 = (1.5, 0)
    np.testing.assert_allclose(refined[0].mean, [1.5, 0.0], atol=1e-10)
    # P(emb) = {(1,0), (3,0)}; deviations from (1.5,0): (-0.5,0), (1.5,0); pooled over 2
    expected = (np.array([[0.25, 0], [0, 0]]) + np.array([[2.25, 0], [0, 0]])) / 2.0
    np.testing.assert_allclose(scatter, expected, atol=1e-10)


def test_per_session_net_isolation():
    net_a = PredictionNet(3, 0, SeededRng(14), depth=2)
    frozen = net_a.state_bytes()
    pairs = OutlierPairs(inputs=np.random.default_rng(15).normal(size=(6, 3)), targets=np.zeros((6, 3)), per_class=2)
    net_b = PredictionNet(3, 1, SeededRng(16), depth=2)
    train_prediction_net(net_b, pairs, desk_profile(prednet_epochs=20, prednet_batch_size=6), SeededRng(17))
    assert net_a.state_bytes() == frozen


# -- planted-bias de-biasing (Monte Carlo) ------------------------------------------------


def test_planted_bias_debiasing_smoke():
    from mc_helpers import planted_bias_trial

    wins = sum(planted_bias_trial(seed) for seed in range(60))
    assert wins >= 0.8 * 60, f"only {wins}/60 trials improved"
