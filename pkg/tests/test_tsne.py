import logging

import numpy as np
import pytest

from speechstate.errors import ConfigurationError, DimensionError
from speechstate.tsne import (
    _student_q, embed, embedding_csv, embedding_svg, kl_divergence, kl_gradient, perplexity_affinities,
    subsample, tsne_optimize,
)


def silhouette(y, labels):
    d = np.sqrt(((y[:, None] - y[None]) ** 2).sum(-1))
    s = []
    for i in range(len(y)):
        same = labels == labels[i]
        a = d[i, same].sum() / (same.sum() - 1)
        b = d[i, ~same].mean()
        s.append((b - a) / max(a, b))
    return float(np.mean(s))


def two_clusters(rs, n=50, dim=10, sep=6.0):
    x = rs.standard_normal((2 * n, dim))
    x[n:, 0] += sep
    return x, np.r_[np.zeros(n, int), np.ones(n, int)]


def entropy_bits(rows):
    p = np.where(rows > 0, rows, 1.0)
    return -(rows * np.log2(p)).sum(axis=1)


class TestAffinities:
    def test_simplex_equal(self):
        aff = perplexity_affinities(np.eye(6), perplexity=3)
        off = aff.P[~np.eye(6, dtype=bool)]
        assert np.ptp(off) < 1e-10

    def test_entropy_matches_target(self, rs):
        aff = perplexity_affinities(rs.standard_normal((200, 5)), perplexity=30)
        assert np.abs(entropy_bits(aff.conditional) - np.log2(30)).max() < 1e-5

    def test_sum_and_symmetry(self, rs):
        aff = perplexity_affinities(rs.standard_normal((40, 3)), perplexity=10)
        assert aff.P.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(aff.P, aff.P.T)
        assert np.all(np.diag(aff.P) == 0)

    def test_far_clusters_isolated(self, rs):
        x, lab = two_clusters(rs, 30, 5, sep=100.0)
        P = perplexity_affinities(x, perplexity=10).P
        assert P[lab[:, None] != lab[None]].sum() < 1e-6

    def test_duplicates_jittered(self, rs, caplog):
        x = rs.standard_normal((20, 3))
        x[5] = x[4]
        with caplog.at_level(logging.WARNING):
            aff = perplexity_affinities(x, perplexity=5)
        assert "duplicate" in caplog.text
        assert np.all(np.isfinite(aff.P))
        assert np.abs(entropy_bits(aff.conditional) - np.log2(5)).max() < 1e-5

    @pytest.mark.parametrize("perp", [1.0, 20.0])
    def test_bad_perplexity(self, rs, perp):
        with pytest.raises(ConfigurationError):
            perplexity_affinities(rs.standard_normal((20, 2)), perplexity=perp)

    def test_needs_matrix(self, rs):
        with pytest.raises(DimensionError):
            perplexity_affinities(rs.standard_normal(20), perplexity=5)


class TestObjective:
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_finite_differences(self, seed):
        rs = np.random.default_rng(seed)
        P = perplexity_affinities(rs.standard_normal((20, 4)), perplexity=5).P
        y = rs.standard_normal((20, 2))
        g = kl_gradient(P, y)
        num = np.zeros_like(y)
        h = 1e-6
        for idx in np.ndindex(*y.shape):
            yp, ym = y.copy(), y.copy()
            yp[idx] += h
            ym[idx] -= h
            num[idx] = (kl_divergence(P, yp) - kl_divergence(P, ym)) / (2 * h)
        assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-4

    def test_kl_non_negative(self, rs):
        P = perplexity_affinities(rs.standard_normal((15, 3)), perplexity=4).P
        assert all(kl_divergence(P, rs.standard_normal((15, 2))) >= 0 for _ in range(20))

    def test_exact_fit(self, rs):
        y = rs.standard_normal((3, 2))
        P = _student_q(y)[1]
        assert abs(kl_divergence(P, y)) < 1e-6
        assert np.abs(kl_gradient(P, y)).max() < 1e-12


class TestOptimize:
    def test_equilateral(self):
        # start at unit scale: far below it the Student-t kernel is flat and shape is free
        P = (np.ones((3, 3)) - np.eye(3)) / 6
        y = tsne_optimize(P, iters=300, exaggeration_iters=0, init=[[0, 0], [2, 0], [0.5, 1.5]]).Y
        d = [np.linalg.norm(y[i] - y[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
        assert max(d) / min(d) < 1.05

    def test_clusters_separate_and_kl_settles(self, rs):
        x, lab = two_clusters(rs)
        res, keep = embed(x, perplexity=30, iters=1000, seed=2024)
        assert np.array_equal(keep, np.arange(100))
        assert silhouette(res.Y, lab) >= 0.5
        trail = np.convolve(res.kl_history[250:], np.ones(50) / 50, mode="valid")
        assert np.all(np.diff(trail) <= 1e-9)
        assert len(res.kl_history) == 1000 and res.kl == res.kl_history[-1]

    def test_seed_determinism(self, rs):
        aff = perplexity_affinities(rs.standard_normal((30, 3)), perplexity=8)
        a, b = tsne_optimize(aff, iters=100, seed=4), tsne_optimize(aff, iters=100, seed=4)
        assert np.array_equal(a.Y, b.Y)

    def test_permutation_equivariance(self, rs):
        x = rs.standard_normal((30, 4))
        perm = rs.permutation(30)
        init = 1e-2 * rs.standard_normal((30, 2))
        a = tsne_optimize(perplexity_affinities(x, perplexity=8), iters=300, init=init)
        b = tsne_optimize(perplexity_affinities(x[perm], perplexity=8), iters=300, init=init[perm])
        np.testing.assert_allclose(b.Y, a.Y[perm], atol=1e-6)

    def test_bad_affinities(self):
        with pytest.raises(ConfigurationError):
            tsne_optimize(np.array([[0, 0.5], [0.1, 0]]), iters=1)
        with pytest.raises(DimensionError):
            tsne_optimize(np.zeros((3, 3)), iters=1, init=np.zeros((2, 2)))


class TestOutput:
    def test_subsample(self):
        idx = subsample(5000, 2000, seed=1)
        assert idx.size == 2000 and np.all(np.diff(idx) > 0)
        assert np.array_equal(idx, subsample(5000, 2000, seed=1))
        assert np.array_equal(subsample(10, 2000), np.arange(10))

    def test_csv(self):
        text = embedding_csv(np.array([[0.5, -1.0], [2.0, 3.0]]), [1, 0])
        assert text == "x,y,label\n0.5,-1.0,1\n2.0,3.0,0\n"

    def test_svg(self, rs):
        svg = embedding_svg(rs.standard_normal((10, 2)), np.arange(10) % 2, title="a<b")
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert svg.count("<circle") == 12
        assert "speech" in svg and "idle" in svg and "a&lt;b" in svg
