import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pupilkit.adm import (AdmCoefficients, StudyDataset, fit_adm, lopo_evaluate, predict_arousal,
                          read_dataset, write_dataset)
from pupilkit.errors import InvalidInput, NonInvertibleModel


def make_dataset(rng, n_part=8, n_clips=10, a=0.35, b=-0.01, noise=0.0, signal=None):
    parts = np.repeat([f"P{i:02d}" for i in range(n_part)], n_clips)
    clips = np.tile([f"C{j:02d}" for j in range(n_clips)], n_part)
    lab = np.tile(rng.uniform(-2, 2, n_clips), n_part)
    ps = a * lab + b + noise * rng.standard_normal(len(lab)) if signal is None else signal
    return StudyDataset(parts, clips, ps, rng.normal(size=len(lab)), lab, -lab)


class TestFit:
    def test_exact_line(self):
        x = np.array([-2.0, -1.0, 0.5, 1.5, 2.0])
        c = fit_adm(0.3 * x - 0.01, x)
        assert c.a == pytest.approx(0.3, rel=1e-12)
        assert c.b == pytest.approx(-0.01, abs=1e-14)
        assert c.fit_r2 == pytest.approx(1.0, abs=1e-12)

    def test_constant_labels(self):
        with pytest.raises(InvalidInput):
            fit_adm([0.1, 0.2, 0.3], [1.0, 1.0, 1.0])

    def test_flat_slope(self):
        with pytest.raises(NonInvertibleModel):
            fit_adm([0.2, 0.2, 0.2, 0.2], [-1.0, 0.0, 1.0, 2.0])

    def test_monte_carlo_recovery(self):
        # 8 participants x 20 clips pooled, residual sd 0.15 mm
        rng = np.random.default_rng(0)
        slopes = []
        for _ in range(200):
            x = rng.uniform(-2, 2, 160)
            slopes.append(fit_adm(0.35 * x - 0.01 + 0.15 * rng.standard_normal(160), x).a)
        slopes = np.array(slopes)
        se = 0.15 / np.sqrt(160 * 16 / 12)
        assert abs(slopes.mean() - 0.35) < 2 * se / np.sqrt(len(slopes)) * 3
        assert slopes.std() == pytest.approx(se, rel=0.25)
        assert np.mean(np.abs(slopes - 0.35) < 2 * se) > 0.9


class TestPredict:
    def test_intercept_maps_to_zero(self):
        assert predict_arousal(-0.01, AdmCoefficients(0.3, -0.01, 1.0)) == 0.0

    def test_simple(self):
        assert predict_arousal(1.0, AdmCoefficients(0.5, 0.0, 1.0)) == 2.0

    def test_rejects_flat(self):
        with pytest.raises(NonInvertibleModel):
            predict_arousal(1.0, AdmCoefficients(1e-7, 0.0, 1.0))

    @given(st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3), st.floats(-1, 1),
           st.integers(0, 1000))
    def test_round_trip(self, a, b, seed):
        x = np.random.default_rng(seed).uniform(-2, 2, 20)
        c = fit_adm(a * x + b, x)
        np.testing.assert_allclose(predict_arousal(a * x + b, c), x, atol=1e-9)


class TestLopo:
    def test_perfect_linearity(self, rng):
        res = lopo_evaluate(make_dataset(rng, a=0.3, b=-0.01))
        for rep in res.per_participant.values():
            assert rep.r == pytest.approx(1.0, abs=1e-12)
            assert rep.nrmse == pytest.approx(0.0, abs=1e-9)

    def test_null_signal(self):
        rng = np.random.default_rng(1)
        means = []
        for _ in range(20):
            ds = make_dataset(rng, signal=rng.normal(size=80))
            means.append(lopo_evaluate(ds).aggregate.r)
        assert abs(np.mean(means)) < 0.15

    def test_fold_audit(self, rng):
        ds = make_dataset(rng, noise=0.1)
        res = lopo_evaluate(ds)
        assert len(res.folds) == 8
        for f in res.folds:
            assert f["held_out"] not in f["train"]
            assert not set(f["train_rows"]) & set(f["test_rows"])
            assert set(ds.participant[f["test_rows"]]) == {f["held_out"]}
            assert f["held_out"] not in set(ds.participant[f["train_rows"]])

    def test_coefficients_exclude_held_out(self, rng):
        ds = make_dataset(rng, noise=0.1)
        res = lopo_evaluate(ds)
        keep = ds.participant != "P03"
        ref = fit_adm(ds.ps_arousal[keep], ds.arousal[keep])
        assert res.coefficients["P03"] == ref

    def test_permutation_invariant(self, rng):
        ds = make_dataset(rng, noise=0.2)
        perm = rng.permutation(len(ds))
        a, b = lopo_evaluate(ds).aggregate, lopo_evaluate(ds.subset(perm)).aggregate
        assert a.r == pytest.approx(b.r, abs=1e-12)
        assert a.r2 == pytest.approx(b.r2, abs=1e-12)

    def test_flagged_fold(self, rng):
        ds = make_dataset(rng, signal=np.zeros(80))
        with pytest.warns(RuntimeWarning):
            res = lopo_evaluate(ds)
        assert res.aggregate is None and len(res.flagged) == 8

    def test_uncorrected_signal(self, rng):
        ds = make_dataset(rng, noise=0.1)
        ds.ps_measured = ds.ps_arousal * 2 + 1
        assert lopo_evaluate(ds, "uncorrected").aggregate.r == pytest.approx(
            lopo_evaluate(ds, "corrected").aggregate.r, abs=1e-12)

    def test_too_few_participants(self, rng):
        with pytest.raises(InvalidInput):
            lopo_evaluate(make_dataset(rng, n_part=2))


def test_dataset_round_trip(tmp_path, rng):
    ds = make_dataset(rng, noise=0.1)
    back = read_dataset(write_dataset(tmp_path / "d.csv", ds))
    assert np.array_equal(back.ps_arousal, ds.ps_arousal)
    assert back.participant.tolist() == ds.participant.tolist()
