import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pupilkit.errors import DegenerateConfiguration, InsufficientData, MissingData, RescaleError
from pupilkit.scaling import (EMOTIONS, RatingTensor, dissimilarities, double_center,
                              indscal_fit, labels, procrustes_congruence, read_labels,
                              read_ratings, rescale_axis, write_labels, write_ratings)


def tensor(scores):
    P, C, _ = scores.shape
    return RatingTensor(tuple(f"P{i:02d}" for i in range(P)), tuple(f"C{j:02d}" for j in range(C)),
                        scores)


def planted(seed, n_part=8, n_clips=12, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_clips, 2))
    W = rng.uniform(0.3, 1.5, size=(n_part, 2))
    D = []
    for w in W:
        Z = X * np.sqrt(w)
        d = np.linalg.norm(Z[:, None] - Z[None], axis=-1)
        d = d + noise * np.triu(rng.random((n_clips, n_clips)), 1)
        D.append(d + d.T - np.diag(np.diag(d)))
    return X, W, np.array(D)


class TestDissimilarities:
    def test_identical_clips(self, rng):
        s = rng.integers(0, 10, (2, 4, 12)).astype(float)
        s[:, 1] = s[:, 0]
        assert np.all(dissimilarities(tensor(s))[:, 0, 1] == 0)

    def test_single_emotion_difference(self):
        s = np.full((1, 3, 12), 4.0)
        s[0, 2, EMOTIONS.index("sad")] = 7.0
        assert dissimilarities(tensor(s))[0, 0, 2] == 3.0

    def test_brute_force(self, rng):
        s = rng.integers(0, 10, (3, 6, 12)).astype(float)
        d = dissimilarities(tensor(s))
        for k, i, j in itertools.product(range(3), range(6), range(6)):
            ref = sum((s[k, i, e] - s[k, j, e]) ** 2 for e in range(12)) ** 0.5
            assert d[k, i, j] == pytest.approx(ref, rel=1e-12, abs=0)
        assert np.array_equal(d, d.transpose(0, 2, 1))

    def test_missing_rating_named(self, rng):
        s = rng.integers(0, 10, (2, 4, 12)).astype(float)
        s[1, 2, EMOTIONS.index("calm")] = np.nan
        with pytest.raises(MissingData, match="P01.*C02.*calm"):
            dissimilarities(tensor(s))

    def test_too_few_clips(self):
        with pytest.raises(InsufficientData):
            dissimilarities(tensor(np.ones((2, 2, 12))))

    def test_out_of_range(self):
        with pytest.raises(Exception):
            tensor(np.full((1, 3, 12), 10.0))


class TestIndscal:
    def test_double_center_recovers_gram(self, rng):
        X = rng.normal(size=(7, 3))
        X -= X.mean(axis=0)
        d = np.linalg.norm(X[:, None] - X[None], axis=-1)
        np.testing.assert_allclose(double_center(d), X @ X.T, atol=1e-10)

    def test_identical_participants_share_weights(self):
        _, _, D = planted(3, n_part=1)
        space = indscal_fit(np.repeat(D, 4, axis=0))
        np.testing.assert_allclose(space.weights, np.tile(space.weights[0], (4, 1)), rtol=1e-8)

    def test_single_pair_is_degenerate(self):
        with pytest.raises(DegenerateConfiguration):
            indscal_fit(np.array([[[0, 1], [1, 0]]] * 3, dtype=float))

    def test_equal_distances_are_degenerate(self):
        d = 1.0 - np.eye(5)
        with pytest.raises(DegenerateConfiguration):
            indscal_fit(np.stack([d, d]))

    @pytest.mark.parametrize("seed", range(20))
    def test_planted_recovery(self, seed):
        X, _, D = planted(seed, noise=0.05)
        space = indscal_fit(D, seed=seed)
        assert procrustes_congruence(X, space.coords) >= 0.95

    def test_loss_non_increasing(self):
        _, _, D = planted(7, noise=0.3)
        h = np.array(indscal_fit(D).loss_history)
        assert np.all(np.diff(h) <= 1e-10 * h[0])

    def test_weights_nonnegative(self):
        _, _, D = planted(11, noise=0.5)
        assert np.all(indscal_fit(D).weights >= 0)

    def test_participant_order_irrelevant(self):
        _, _, D = planted(5, noise=0.05)
        perm = np.random.default_rng(0).permutation(len(D))
        a, b = indscal_fit(D), indscal_fit(D[perm])
        np.testing.assert_allclose(np.abs(a.coords), np.abs(b.coords), atol=1e-5)
        np.testing.assert_allclose(a.weights[perm], b.weights, atol=1e-5)

    def test_nonconvergence_warns(self):
        _, _, D = planted(2, noise=0.3)
        with pytest.warns(RuntimeWarning, match="converge"):
            space = indscal_fit(D, max_iter=1)
        assert not space.converged

    def test_sign_anchored_on_excited(self, rng):
        s = rng.integers(0, 10, (4, 8, 12)).astype(float)
        r = tensor(s)
        space = indscal_fit(dissimilarities(r), ratings=r)
        top = np.argmax(r.emotion("excited").mean(axis=0))
        assert space.coords[top, 1] > 0

    def test_axes_ordered_by_weight(self):
        _, _, D = planted(9, noise=0.05)
        tot = indscal_fit(D).weights.sum(axis=0)
        assert tot[0] >= tot[1]


class TestLabels:
    def test_symmetric(self):
        assert rescale_axis([-1.0, 0.0, 1.0]).tolist() == [-2.0, 0.0, 2.0]

    def test_two_points(self):
        assert rescale_axis([0.0, 1.0]).tolist() == [-2.0, 2.0]

    def test_zero_variance(self):
        with pytest.raises(RescaleError):
            rescale_axis([0.3, 0.3])

    @given(arrays(float, st.integers(2, 30), elements=st.floats(-1e6, 1e6)))
    def test_bounds_and_order(self, v):
        if np.ptp(v) <= 1e-9 * max(1.0, np.abs(v).max()):
            return
        out = rescale_axis(v)
        assert out.min() == -2.0 and out.max() == 2.0
        assert np.all(np.diff(out[np.argsort(v, kind="stable")]) >= -1e-12)

    def test_space_labels(self):
        _, _, D = planted(1)
        space = indscal_fit(D)
        lab = labels(space)
        assert lab.shape == (12, 2)
        assert np.all(lab.min(axis=0) == -2) and np.all(lab.max(axis=0) == 2)
        ind = labels(space, per_participant=True)
        assert ind.shape == (8, 12, 2) and np.all(np.abs(ind) <= 2)


class TestFiles:
    def test_ratings_round_trip(self, tmp_path, rng):
        r = tensor(rng.integers(0, 10, (3, 4, 12)).astype(float))
        back = read_ratings(write_ratings(tmp_path / "r.csv", r))
        assert back.participants == r.participants and np.array_equal(back.scores, r.scores)

    def test_labels_round_trip(self, tmp_path, rng):
        lab = rng.uniform(-2, 2, (3, 2))
        back = read_labels(write_labels(tmp_path / "l.csv", ["A", "B", "C"], lab))
        assert back["B"] == tuple(lab[1])
