"""Objectives, Adam, penalty / rounding, and the training loops."""

import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ris_muxer import channel as ch
from ris_muxer import fcn
from ris_muxer import precoding as P
from ris_muxer import training as T
from ris_muxer.training import DiscretizationError, TrainConfig, TrainingError

from conftest import fcn_grad_check, max_relative_error

GRID = (4, 4)
FAST = dict(lr_phase1=3e-3, lr_phase2=1e-3, epochs_phase1=6, epochs_phase2=12, batch_size=8, rho=1e12)


@pytest.fixture(scope="module")
def ds():
    spec = ch.ChannelSpec(users=2, bs_antennas=4, ris_shape=GRID, n_train=24, n_test=8)
    return ch.synthesize_dataset(spec, 2)


def _model(seed=0, dropout=0.1, users=2, grid=GRID):
    arch = fcn.ArchSpec(users=users, ris_shape=grid, n_layers=2, kernel=(5, 5), hidden_maps=4, dropout=dropout)
    return fcn.init_model(arch, seed)


def _batch(ds, n=4):
    tr = ds.split("train")
    G, D = tr.G[:n], tr.D[:n]
    return G, D, tr.H, ch.build_features_batch(G, D, tr.H, GRID)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr_phase1, cfg.lr_phase2, cfg.epochs_phase1, cfg.epochs_phase2) == (1e-4, 2e-6, 4000, 4000)
        assert (cfg.batch_size, cfg.wmmse_refresh_epochs, cfg.wmmse_inner_iters, cfg.kappa_step) == (256, 10, 5, 0.05)

    def test_rejections(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_phase1=-1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(bogus=1)
        with pytest.raises(ValueError):
            TrainConfig(weights=(0.6, 0.6))


class TestObjectives:
    def test_g_zero_bypasses_ris(self, ds):
        G, D, H, _ = _batch(ds, 1)
        G = np.zeros_like(G)
        feats = ch.build_features_batch(G, D, H, GRID)
        cfg = TrainConfig(rho=1e12)
        b = T.objective_mmse(_model(), G, D, H, feats, cfg, seed=0)
        C = D[0]
        expect = P.wsr(C, P.mmse_precoder(C, cfg.link), cfg.alpha, cfg.rho)
        assert b.value == pytest.approx(expect, rel=1e-12)
        assert all(np.max(np.abs(g)) < 1e-12 * max(1.0, abs(expect)) for g in b.grads)

    def test_identical_batch_equals_single(self, ds):
        G, D, H, feats = _batch(ds, 1)
        cfg = TrainConfig(rho=1e12)
        m = _model(dropout=0.0)
        one = T.objective_mmse(m, G, D, H, feats, cfg, mode="eval")
        rep = T.objective_mmse(m, np.repeat(G, 3, 0), np.repeat(D, 3, 0), H, np.repeat(feats, 3, 0), cfg, mode="eval")
        assert rep.value == pytest.approx(one.value, rel=1e-13)

    def test_mmse_objective_gradient(self, ds):
        G, D, H, feats = _batch(ds, 3)
        head = T.MmseWsrHead(G, D, H, [0.5, 0.5], P.LinkBudget(1e12))
        a, n = fcn_grad_check(_model(seed=3), feats, head, seed=5)
        assert max_relative_error(a, n) < 1e-4

    def test_wmmse_objective_gradient(self, ds):
        G, D, H, feats = _batch(ds, 3)
        C = P.effective_channel_arrays(G, D, H, np.zeros((3, 16)))
        V = P.wmmse_precoder(C, [0.5, 0.5], P.LinkBudget(1e12))
        head = T.FixedPrecoderWsrHead(G, D, H, V, [0.5, 0.5], P.LinkBudget(1e12))
        a, n = fcn_grad_check(_model(seed=4), feats, head, seed=6)
        assert max_relative_error(a, n) < 1e-4

    def test_zero_precoder(self, ds):
        G, D, H, feats = _batch(ds, 2)
        b = T.objective_wmmse(_model(), G, D, H, feats, np.zeros((2, 4, 2), complex), TrainConfig(rho=1e12), seed=0)
        assert b.value == 0.0
        assert all(not np.any(g) for g in b.grads)

    def test_mmse_frozen_value_equality(self, ds):
        G, D, H, feats = _batch(ds, 3)
        cfg = TrainConfig(rho=1e12)
        m = _model()
        psi = fcn.fcn_forward(m, feats, "eval")[0]
        C = P.effective_channel_arrays(G, D, H, psi.reshape(3, -1))
        a = T.objective_mmse(m, G, D, H, feats, cfg, mode="eval")
        b = T.objective_wmmse(m, G, D, H, feats, P.mmse_precoder(C, cfg.link), cfg, mode="eval")
        assert a.value == pytest.approx(b.value, rel=1e-13)
        assert not np.allclose(a.grads[0], b.grads[0])

    def test_missing_precoder(self, ds):
        G, D, H, feats = _batch(ds, 2)
        with pytest.raises(TrainingError):
            T.objective_wmmse(_model(), G, D, H, feats, None, TrainConfig())


class TestAdam:
    def test_first_step_is_signed_lr(self, rng):
        m = _model()
        before = [p.copy() for p in m.params()]
        grads = [rng.standard_normal(p.shape) for p in m.params()]
        st_ = T.AdamState.zeros_like(m)
        T.adam_step(st_, m, grads, 1e-3)
        for p0, p1, g in zip(before, m.params(), grads):
            upd = p1 - p0
            assert np.all(np.abs(upd) <= 1e-3 * (1 + 1e-6))
            assert np.all(np.sign(upd[np.abs(g) > 1e-3]) == np.sign(g[np.abs(g) > 1e-3]))

    def test_zero_gradient(self):
        m = _model()
        before = m.flat_params()
        st_ = T.AdamState.zeros_like(m)
        T.adam_step(st_, m, [np.zeros_like(p) for p in m.params()], 1e-2)
        np.testing.assert_array_equal(m.flat_params(), before)
        assert st_.step == 1

    def test_deterministic(self, rng):
        grads = [rng.standard_normal(p.shape) for p in _model().params()]
        out = []
        for _ in range(2):
            m, s = _model(), T.AdamState.zeros_like(_model())
            for _ in range(3):
                T.adam_step(s, m, grads, 1e-2)
            out.append(m.flat_params())
        np.testing.assert_array_equal(out[0], out[1])

    def test_shape_mismatch(self):
        m = _model()
        with pytest.raises(TrainingError):
            T.adam_step(T.AdamState.zeros_like(m), m, [np.zeros(3)] * len(m.params()), 1e-3)


class TestPenaltyAndRounding:
    def test_in_codebook(self):
        assert T.penalty(np.array([[0.0, np.pi], [np.pi, 0.0]]), (0, np.pi)) == 0.0

    def test_single_term(self):
        assert T.penalty(np.array([[np.pi / 4]]), (0, np.pi)) == pytest.approx(np.pi / 4, abs=1e-15)

    def test_periodic(self):
        assert T.penalty(np.array([[2 * np.pi]]), (0.0,)) == pytest.approx(0.0, abs=1e-15)

    def test_squares_under_root(self):
        assert T.penalty(np.array([[0.3, -0.4]]), (0.0,)) == pytest.approx(0.5, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.integers(-3, 3))
    def test_shift_invariance(self, vals, k):
        psi = np.array(vals).reshape(2, 2)
        assert T.penalty(psi + 2 * np.pi * k, (0, np.pi)) == pytest.approx(T.penalty(psi, (0, np.pi)), abs=1e-9)

    def test_penalty_gradient(self, rng):
        from ris_muxer.numerics import finite_difference_gradient

        psi = rng.uniform(-3, 3, (2, 9))
        _, g = T.penalty_and_grad(psi, (0, np.pi / 2, np.pi))
        fd = finite_difference_gradient(lambda x: float(T.penalty_and_grad(x[None], (0, np.pi / 2, np.pi))[0][0]),
                                        psi[0])
        np.testing.assert_allclose(g[0], fd, atol=1e-7)

    def test_round_exact_and_nearest(self):
        cb = (0.0, np.pi)
        np.testing.assert_array_equal(T.round_phases(np.array([[0.0, np.pi]]), cb), [[0.0, np.pi]])
        assert T.round_phases(np.array([[np.pi / 2 - 0.01]]), cb)[0, 0] == 0.0
        assert T.round_phases(np.array([[np.pi / 2 + 0.01]]), cb)[0, 0] == np.pi

    def test_round_tie_goes_low(self):
        assert T.round_phases(np.array([[np.pi / 2]]), (0.0, np.pi))[0, 0] == 0.0
        assert T.round_phases(np.array([[np.pi / 2]]), (np.pi, 0.0))[0, 0] == 0.0

    def test_round_circular(self):
        assert T.round_phases(np.array([[2 * np.pi - 0.1]]), (0.0, np.pi))[0, 0] == 0.0

    def test_empty_codebook(self):
        with pytest.raises(TrainingError):
            T.penalty(np.zeros((1, 1)), ())


class TestTwoPhase:
    def test_zero_lr_single_epoch(self, ds):
        cfg = TrainConfig.model_construct(**{**TrainConfig(**FAST).model_dump(), "lr_phase1": 0.0,
                                             "epochs_phase1": 1, "epochs_phase2": 0})
        m = _model()
        before = m.flat_params()
        m, trace = T.train_two_phase(m, ds, cfg)
        np.testing.assert_array_equal(m.flat_params(), before)
        assert len(trace) == 1

    def test_trace_and_refresh_cadence(self, ds, tmp_path):
        cfg = TrainConfig(**FAST, wmmse_refresh_epochs=5)
        m, trace = T.train_two_phase(_model(), ds, cfg)
        assert len(trace) == 18
        assert list(trace.column("phase")) == [1] * 6 + [2] * 12
        assert [r.epoch for r in trace.refreshes] == [6, 11, 16]
        trace.write_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["epoch", "phase", "objective", "wsr", "penalty", "kappa", "seconds"]
        assert len(rows) == 19

    def test_improves_train_wsr(self, ds):
        cfg = TrainConfig(**FAST)
        m = _model()
        tr = ds.split("train")
        feats = ch.build_features_batch(tr.G, tr.D, tr.H, GRID)
        T.fit_input_scale(m, feats)

        def mean_wsr(model):
            psi = T.predict_phases(model, feats).reshape(len(tr), -1)
            C = P.effective_channel_arrays(tr.G, tr.D, tr.H, psi)
            return np.mean(P.wsr(C, P.mmse_precoder(C, cfg.link), cfg.alpha, cfg.rho))

        start = mean_wsr(m)
        m, _ = T.train_two_phase(m, ds, cfg)
        assert mean_wsr(m) > start

    def test_bit_identical(self, ds):
        cfg = TrainConfig(**{**FAST, "epochs_phase1": 2, "epochs_phase2": 3})
        a, ta = T.train_two_phase(_model(), ds, cfg)
        b, tb = T.train_two_phase(_model(), ds, cfg)
        np.testing.assert_array_equal(a.flat_params(), b.flat_params())
        np.testing.assert_array_equal(ta.column("wsr"), tb.column("wsr"))

    def test_geometry_mismatch(self, ds):
        with pytest.raises(TrainingError):
            T.train_two_phase(_model(grid=(3, 3)), ds, TrainConfig(**FAST))

    def test_early_stop(self, ds):
        cfg = TrainConfig(**{**FAST, "epochs_phase1": 200, "epochs_phase2": 0, "lr_phase1": 1e-9},
                          early_stop=True, plateau_window=3, plateau_tol=1e-3)
        _, trace = T.train_two_phase(_model(), ds, cfg)
        assert len(trace) < 200


class TestDiscrete:
    def test_already_discrete_stops_at_zero(self, ds):
        m = _model(dropout=0.0)
        for layer in m.layers:
            layer.kernels[:] = 0.0
            layer.biases[:] = 0.0
        cfg = TrainConfig(**FAST, penalty_threshold=0.5)
        _, trace = T.train_discrete(m, ds, cfg, pretrained=True)
        assert len(trace) == 0
        assert [e.kappa for e in trace.kappa_events] == [0.0]

    def test_zero_kappa_step_raises(self, ds):
        m = _model()
        m.layers[-1].biases[:] = np.pi / 2  # far from {0, pi}
        cfg = TrainConfig(**{**FAST, "lr_phase2": 1e-9}, kappa_step=0.0, kappa_epochs_max=2, penalty_threshold=0.1)
        with pytest.raises(DiscretizationError) as exc:
            T.train_discrete(m, ds, cfg, pretrained=True)
        assert exc.value.penalty > 0.1

    def test_reaches_threshold(self, ds):
        # dropout off: train-mode masks make the penalty at increment points noisy
        cfg = TrainConfig(**FAST, kappa_step=0.5, kappa_cap=10.0, penalty_threshold=1.0, kappa_epochs_max=15)
        m, trace = T.train_discrete(_model(dropout=0.0), ds, cfg)
        kappas = [e.kappa for e in trace.kappa_events]
        assert kappas == sorted(kappas)
        assert trace.kappa_events[-1].penalty_test < 1.0
        pens = [e.penalty_train for e in trace.kappa_events[1:]]
        for a, b in zip(pens, pens[1:]):
            assert b <= 1.05 * a
        assert set(trace.column("phase")) <= {1, 3}
