import numpy as np
import pytest
from scipy.stats import chisquare

from refield.errors import StaleTree, TooFewPoints
from refield.gkdtree import (build_gkdtree, kernel_value, kmeans,
                             parsimony_candidates, parsimony_loss,
                             sample_neighbors, sample_neighbors_batch,
                             smoothness_features, smoothness_loss,
                             smoothness_loss_brute)


class TestBuild:
    def test_two_points(self):
        tree = build_gkdtree(np.array([[0.0, 0.0], [1.0, 1.0]]))
        assert len(tree.left) == 1  # a single root leaf holds both
        assert tree.left[0] == -1

    def test_identical_points_degenerate_boxes(self):
        tree = build_gkdtree(np.zeros((20, 3)))
        assert np.all(tree.box_lo == tree.box_hi)

    def test_structural_containment(self):
        rng = np.random.default_rng(0)
        centers = rng.normal(size=(12, 6)) * 4
        pts = np.concatenate([c + rng.normal(size=(840, 6)) * 0.3
                              for c in centers])
        tree = build_gkdtree(pts)
        for node in range(len(tree.left)):
            members = tree.order[tree.start[node]:tree.end[node]]
            sub = tree.feats[members]
            assert np.all(sub >= tree.box_lo[node] - 1e-12)
            assert np.all(sub <= tree.box_hi[node] + 1e-12)
        # every point in exactly one leaf
        leaf_members = []
        for node in range(len(tree.left)):
            if tree.left[node] == -1:
                leaf_members.extend(
                    tree.order[tree.start[node]:tree.end[node]])
        assert sorted(leaf_members) == list(range(len(pts)))

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            build_gkdtree(np.zeros((1, 3)))


class TestKernel:
    def test_symmetry_identity_range(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(50, 4))
        b = rng.normal(size=(50, 4))
        kab = kernel_value(a, b)
        kba = kernel_value(b, a)
        assert np.allclose(kab, kba)
        assert np.all((kab > 0) & (kab <= 1))
        assert np.allclose(kernel_value(a, a), 1.0)


class TestSampling:
    def test_identical_features_uniform(self):
        n = 40
        tree = build_gkdtree(np.zeros((n, 3)))
        rng = np.random.default_rng(2)
        idx, _, _ = sample_neighbors_batch(tree, np.zeros(10000,
                                                          dtype=np.int64),
                                           1, rng)
        counts = np.bincount(idx.ravel(), minlength=n)
        assert counts[0] == 0  # self excluded
        _, p = chisquare(counts[1:])
        assert p > 0.01

    def test_far_clusters_never_mix(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(64, 3)) * 0.05
        b = rng.normal(size=(64, 3)) * 0.05 + 40.0  # inter-cluster k < 1e-12
        tree = build_gkdtree(np.concatenate([a, b]))
        idx, _, _ = sample_neighbors_batch(
            tree, np.arange(64, dtype=np.int64), 16, rng)
        assert np.all(idx < 64)

    def test_three_point_frequency_ratio(self):
        # query at origin; neighbors at kernel distances k = 1 and e^{-1}
        feats = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        tree = build_gkdtree(feats)
        rng = np.random.default_rng(4)
        idx, kv, pdf = sample_neighbors_batch(
            tree, np.zeros(100000, dtype=np.int64), 1, rng)
        n1 = int(np.sum(idx == 1))
        n2 = int(np.sum(idx == 2))
        ratio = n1 / n2
        assert ratio == pytest.approx(np.e, rel=0.05)
        # exact kernel and proposal values for the drawn neighbors
        assert np.allclose(kv[idx == 1], 1.0)
        assert np.allclose(kv[idx == 2], np.exp(-1.0))

    def test_single_query_api(self):
        rng = np.random.default_rng(5)
        tree = build_gkdtree(rng.normal(size=(100, 4)))
        idx, kv, pdf = sample_neighbors(tree, 17, 8, rng)
        assert idx.shape == (8,)
        assert np.all(idx != 17)
        assert np.all((kv >= 0) & (kv <= 1))
        assert np.all(pdf > 0)

    def test_order_independence(self):
        # permuting the input points leaves the sampling distribution over
        # feature space unchanged (total variation within sampling noise)
        rng = np.random.default_rng(6)
        base = rng.normal(size=(40, 2))
        perm = rng.permutation(40)
        t1 = build_gkdtree(base)
        t2 = build_gkdtree(base[perm])
        q1 = 0
        q2 = int(np.nonzero(perm == 0)[0][0])
        draws = 60000
        i1, _, _ = sample_neighbors_batch(
            t1, np.full(draws, q1, dtype=np.int64), 1,
            np.random.default_rng(7))
        i2, _, _ = sample_neighbors_batch(
            t2, np.full(draws, q2, dtype=np.int64), 1,
            np.random.default_rng(8))
        p1 = np.bincount(i1.ravel(), minlength=40) / draws
        p2 = np.bincount(perm[i2.ravel()], minlength=40) / draws
        assert np.abs(p1 - p2).max() < 0.01
        assert 0.5 * np.abs(p1 - p2).sum() < 0.02


class TestSmoothnessLoss:
    def test_constant_field_zero(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(50, 3))
        tree = build_gkdtree(feats)
        vals = np.full((50, 2), 0.7)
        loss, grad = smoothness_loss(vals, tree, np.arange(50), 4, rng)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_two_point_hand_case(self):
        # two surfels with identical features (k = 1), scalar field 0 and 1
        feats = np.zeros((2, 2))
        tree = build_gkdtree(feats)
        rng = np.random.default_rng(1)
        vals = np.array([0.0, 1.0])
        loss, grad = smoothness_loss(vals, tree, np.array([0]), 1, rng)
        # single draw must pick the other point: k = 1, p = 1 -> loss 1
        assert loss == pytest.approx(1.0)
        assert grad[0] == pytest.approx(-1.0)
        assert grad[1] == pytest.approx(1.0)

    def test_expectation_matches_bruteforce(self):
        rng = np.random.default_rng(10)
        n = 500
        pos = rng.uniform(-1, 1, (n, 3))
        attr = rng.uniform(0, 1, (n, 3))
        feats = smoothness_features(pos, attr, 0.5, 0.3)
        tree = build_gkdtree(feats)
        vals = attr.copy()
        oracle = smoothness_loss_brute(vals, feats)
        trials = 160
        samples = np.empty(trials)
        for t in range(trials):
            loss, _ = smoothness_loss(vals, tree, np.arange(n), 8,
                                      np.random.default_rng(100 + t))
            samples[t] = loss
        mean = samples.mean()
        se = samples.std(ddof=1) / np.sqrt(trials)
        assert abs(mean - oracle) <= 3 * se

    def test_stale_tree_rejected(self):
        rng = np.random.default_rng(2)
        tree = build_gkdtree(rng.normal(size=(20, 3)), epoch=5)
        with pytest.raises(StaleTree):
            smoothness_loss(np.zeros(20), tree, np.arange(5), 2, rng,
                            epoch=7)
        # one epoch of staleness is the designed tolerance
        smoothness_loss(np.zeros(20), tree, np.arange(5), 2, rng, epoch=6)

    def test_gradients_flow_to_both_sides(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(30, 3)) * 0.1
        tree = build_gkdtree(feats)
        vals = rng.uniform(0, 1, 30)
        batch = np.arange(10)
        _, grad = smoothness_loss(vals, tree, batch, 4, rng)
        assert np.any(grad[10:] != 0.0)  # drawn neighbors get gradients too

    def test_l2_norm_option(self):
        rng = np.random.default_rng(4)
        feats = np.zeros((2, 2))
        tree = build_gkdtree(feats)
        vals = np.array([[0.0, 0.0], [3.0, 4.0]])
        loss, grad = smoothness_loss(vals, tree, np.array([0]), 1, rng,
                                     norm="l2")
        assert loss == pytest.approx(5.0)


class TestParsimony:
    def test_two_color_kmeans_separation(self):
        rng = np.random.default_rng(5)
        a = np.tile([0.9, 0.1, 0.1], (60, 1)) + rng.normal(size=(60, 3)) * 0.01
        b = np.tile([0.1, 0.1, 0.9], (40, 1)) + rng.normal(size=(40, 3)) * 0.01
        albedos = np.concatenate([a, b])
        _, labels = kmeans(albedos, 2, rng)
        assert len(np.unique(labels[:60])) == 1
        assert len(np.unique(labels[60:])) == 1
        assert labels[0] != labels[60]

    def test_k1_uniform_subsample(self):
        rng = np.random.default_rng(6)
        albedos = rng.uniform(0, 1, (100, 3))
        cand = parsimony_candidates(albedos, 1, 10, rng)
        assert len(cand) == 10
        assert len(np.unique(cand)) == 10

    def test_identical_albedos_zero_loss(self):
        albedos = np.tile([0.4, 0.5, 0.6], (50, 1))
        cand = parsimony_candidates(albedos, 4, 4, np.random.default_rng(7))
        loss, grad = parsimony_loss(albedos, albedos, np.arange(50), cand)
        assert loss == pytest.approx(0.0)
        assert np.allclose(grad, 0.0)

    def test_loss_pulls_toward_candidates(self):
        albedos = np.tile([0.5, 0.5, 0.5], (20, 1))
        vals = albedos.copy()
        vals[0] = [0.9, 0.5, 0.5]
        cand = np.arange(1, 20)
        loss, grad = parsimony_loss(albedos, vals, np.array([0]), cand)
        assert loss > 0
        assert grad[0, 0] > 0  # pushes the outlier down toward the others
