"""Evaluation protocol, sweeps, ECDF and report files."""

import csv

import numpy as np
import pytest

from ris_muxer import channel as ch
from ris_muxer import evaluation as ev
from ris_muxer import fcn
from ris_muxer import training as T
from ris_muxer.evaluation import EvaluationError
from ris_muxer.precoding import LinkBudget

LINK = LinkBudget(1e12)
WEIGHTS = [(0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25), (1.0, 0.0)]


def _train(ds, w, seed=0):
    arch = fcn.ArchSpec(users=2, ris_shape=(4, 4), n_layers=2, kernel=(5, 5), hidden_maps=8, dropout=0.0)
    m = fcn.init_model(arch, seed)
    cfg = T.TrainConfig(lr_phase1=3e-3, lr_phase2=1e-3, epochs_phase1=20, epochs_phase2=10, batch_size=16,
                        rho=LINK.rho, weights=w)
    return T.train_two_phase(m, ds, cfg)[0]


@pytest.fixture(scope="module")
def ds():
    return ch.synthesize_dataset(ch.ChannelSpec(users=2, bs_antennas=4, ris_shape=(4, 4), n_train=48, n_test=16), 11)


@pytest.fixture(scope="module")
def test_split(ds):
    return ds.split("test")


@pytest.fixture(scope="module")
def models(ds):
    return {w: _train(ds, w) for w in WEIGHTS}


class TestEvaluate:
    def test_zero_weight_user_still_recorded(self, test_split):
        rep = ev.evaluate(ev.RandomPhases(1), test_split, (1.0, 0.0), LINK)
        r = rep[0]
        np.testing.assert_allclose(r.wsr, r.rates[:, 0], rtol=0, atol=0)
        assert r.rates.shape == (16, 2)

    def test_deterministic(self, models, test_split):
        a = ev.evaluate(models[(0.5, 0.5)], test_split, (0.5, 0.5), LINK)
        b = ev.evaluate(models[(0.5, 0.5)], test_split, (0.5, 0.5), LINK)
        np.testing.assert_array_equal(a[0].rates, b[0].rates)

    def test_perturbation_seeded(self, models, test_split):
        m = models[(0.5, 0.5)]
        a = ev.evaluate(m, test_split, (0.5, 0.5), LINK, gamma=0.1, seed=3)
        b = ev.evaluate(m, test_split, (0.5, 0.5), LINK, gamma=0.1, seed=3)
        c = ev.evaluate(m, test_split, (0.5, 0.5), LINK, gamma=0.1, seed=4)
        np.testing.assert_array_equal(a[0].rates, b[0].rates)
        assert not np.array_equal(a[0].rates, c[0].rates)

    def test_fcn_beats_random(self, models, test_split):
        w = (0.5, 0.5)
        fcn_wsr = ev.evaluate(models[w], test_split, w, LINK).mean_wsr
        rnd = ev.evaluate(ev.RandomPhases(0), test_split, w, LINK).mean_wsr
        assert fcn_wsr > rnd

    def test_aggregates_from_records(self, models, test_split):
        r = ev.evaluate(models[(0.25, 0.75)], test_split, (0.25, 0.75), LINK)[0]
        recomputed = np.mean(0.25 * r.rates[:, 0] + 0.75 * r.rates[:, 1])
        assert abs(recomputed - r.mean_wsr) < 1e-12
        assert np.all(r.rates >= 0)

    def test_wmmse_not_below_mmse(self, models, test_split):
        for w, m in models.items():
            r = ev.evaluate(m, test_split, w, LINK)[0]
            assert np.all(r.wsr >= r.mmse_wsr - 1e-9)

    def test_rounding(self, models, test_split):
        r = ev.evaluate(models[(0.5, 0.5)], test_split, (0.5, 0.5), LINK, codebook=(0.0, np.pi))
        assert r[0].mean_wsr > 0

    def test_altgrad_baseline(self, test_split):
        src = ev.AlternatingGradient((0.5, 0.5), LINK, steps=5, step_size=0.1)
        rep = ev.evaluate(src, test_split.subset([0, 1]), (0.5, 0.5), LINK)
        assert rep[0].algorithm == "altgrad"

    def test_empty_split(self, test_split):
        with pytest.raises(EvaluationError):
            ev.evaluate(ev.RandomPhases(), test_split.subset(np.array([], dtype=int)), (0.5, 0.5), LINK)

    def test_geometry_mismatch(self, test_split):
        arch = fcn.ArchSpec(users=2, ris_shape=(2, 8), n_layers=4, kernel=(5, 5), hidden_maps=2)
        with pytest.raises(EvaluationError, match="grid"):
            ev.evaluate(fcn.init_model(arch, 0), test_split, (0.5, 0.5), LINK)


class TestRateRegion:
    def test_five_points_and_axes(self, models, test_split):
        rep = ev.rate_region(models, test_split, WEIGHTS, LINK)
        pts = rep.region_points()
        assert len(pts) == 5
        np.testing.assert_array_equal(rep[-1].wsr, rep[-1].rates[:, 0])
        np.testing.assert_array_equal(rep[0].wsr, rep[0].rates[:, 1])

    def test_default_weight_set(self):
        assert ev.DEFAULT_WEIGHT_SET == tuple(WEIGHTS)

    def test_dominates_random(self, models, test_split):
        ours = ev.rate_region(models, test_split, WEIGHTS, LINK).region_points()
        rnd = ev.rate_region({"*": ev.RandomPhases(0)}, test_split, WEIGHTS, LINK).region_points()
        for (a1, a2), (b1, b2) in zip(ours, rnd):
            assert a1 >= b1 and a2 >= b2

    def test_missing_model_lists_keys(self, models, test_split):
        with pytest.raises(EvaluationError, match=r"available: \(0.5, 0.5\)"):
            ev.rate_region({(0.5, 0.5): models[(0.5, 0.5)]}, test_split, WEIGHTS, LINK)


class TestTsnrSweep:
    def test_default_grid(self):
        assert len(ev.DEFAULT_RHOS) == 10
        np.testing.assert_allclose(ev.DEFAULT_RHOS, np.arange(1, 11) * 1e11)

    def test_single_rho_equals_evaluate(self, models, test_split):
        m = models[(0.5, 0.5)]
        sweep = ev.tsnr_sweep(m, test_split, [1e12], (0.5, 0.5))
        plain = ev.evaluate(m, test_split, (0.5, 0.5), LinkBudget(1e12))
        np.testing.assert_array_equal(sweep[0].rates, plain[0].rates)

    def test_doubling_rho_increases_sum_rate(self, models, test_split):
        rep = ev.tsnr_sweep(models[(0.5, 0.5)], test_split, [5e11, 1e12, 2e12], (0.5, 0.5))
        s = [r.mean_sum_rate for r in rep]
        assert s[0] < s[1] < s[2]

    def test_bad_rhos(self, test_split):
        with pytest.raises(EvaluationError):
            ev.tsnr_sweep(ev.RandomPhases(), test_split, [], (0.5, 0.5))
        with pytest.raises(EvaluationError):
            ev.tsnr_sweep(ev.RandomPhases(), test_split, [1.0, -1.0], (0.5, 0.5))


class TestEcdf:
    def test_single_value(self):
        assert ev.ecdf([2.5]) == [(2.5, 0.0), (2.5, 1.0)]

    def test_all_equal_single_step(self):
        assert ev.ecdf([1.0] * 7) == [(1.0, 0.0), (1.0, 1.0)]

    def test_uniform_ks(self):
        vals = np.random.default_rng(0).uniform(0, 1, 1000)
        pts = ev.ecdf(vals)
        xs = np.array([p[0] for p in pts[1:]])
        ys = np.array([p[1] for p in pts[1:]])
        before = np.concatenate([[0.0], ys[:-1]])
        assert max(np.max(np.abs(ys - xs)), np.max(np.abs(before - xs))) < 0.06

    def test_valid_cdf(self, models, test_split):
        pts = ev.ecdf(ev.evaluate(models[(0.5, 0.5)], test_split, (0.5, 0.5), LINK))
        xs, ys = zip(*pts)
        assert list(xs) == sorted(xs) and list(ys) == sorted(ys)
        assert ys[-1] == 1.0 and ys[0] == 0.0

    def test_empty(self):
        with pytest.raises(EvaluationError):
            ev.ecdf([])


class TestRobustness:
    def test_zero_entry_equals_evaluate(self, models, test_split):
        m = models[(0.5, 0.5)]
        rep = ev.robustness_curve(m, test_split, [0.0, 0.1], (0.5, 0.5), LINK, seed=1)
        np.testing.assert_array_equal(rep[0].rates, ev.evaluate(m, test_split, (0.5, 0.5), LINK)[0].rates)

    def test_degradation_non_negative(self, models, test_split):
        rep = ev.robustness_curve(models[(0.5, 0.5)], test_split, [0.0, 0.1, 0.2], (0.5, 0.5), LINK, seed=1)
        assert [r.gamma for r in rep] == [0.0, 0.1, 0.2]
        assert all(d >= -0.02 for d in rep.degradation())

    def test_zero_prepended(self, test_split):
        rep = ev.robustness_curve(ev.RandomPhases(), test_split, [0.2], (0.5, 0.5), LINK)
        assert [r.gamma for r in rep] == [0.0, 0.2]

    def test_negative_gamma(self, test_split):
        with pytest.raises(EvaluationError):
            ev.robustness_curve(ev.RandomPhases(), test_split, [-0.1], (0.5, 0.5), LINK)


class TestReportFiles:
    def test_sample_csv_schema(self, models, test_split, tmp_path):
        rep = ev.evaluate(models[(0.5, 0.5)], test_split, (0.5, 0.5), LINK)
        rep.write_csv(tmp_path / "r.csv")
        rows = list(csv.DictReader(open(tmp_path / "r.csv")))
        assert list(rows[0]) == list(ev.SAMPLE_COLUMNS)
        assert len(rows) == 32
        assert float(rows[1]["rate"]) == rep[0].rates[0, 1]

    def test_summary_csv(self, models, test_split, tmp_path):
        rep = ev.tsnr_sweep(models[(0.5, 0.5)], test_split, [1e11, 1e12], (0.5, 0.5))
        rep.write_summary_csv(tmp_path / "s.csv")
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert list(rows[0]) == list(ev.SUMMARY_COLUMNS)
        assert [float(r["axis_value"]) for r in rows] == [1e11, 1e12]
        assert float(rows[1]["mean_wsr"]) == rep[1].mean_wsr

    def test_antenna_sweep(self, models, test_split):
        rep = ev.antenna_sweep({16: (models[(0.5, 0.5)], test_split)}, (0.5, 0.5), LINK)
        assert rep[0].axis == "ris_elements" and rep[0].axis_value == 16
