import json

import numpy as np
import pytest

from metasfanc.adaptive import (
    FROZEN,
    FXLMS,
    FXNLMS,
    SILENT,
    AncPlant,
    AnrState,
    AnrTrace,
    ControlFilter,
    FilteredXState,
    Phase,
    anr_series,
    anr_update,
    fxlms_step,
    fxnlms_step,
    run_cancellation,
    settle_time,
    simulate,
    steady_state_anr,
    time_to_threshold,
)
from metasfanc.dsp import FirPath, Signal, tone
from metasfanc.errors import DivergenceError, InvalidArgumentError

PLANT = AncPlant(FirPath([1.5, 1.3, -0.6, -1.2, -1.3, 1.2]), FirPath([1, 1, 1, 0.5]))


def naive_fx(x, plant, L, mu, normalized=False, delta=1e-6):
    """Direct transcription of the filtered-x recursion with explicit sums."""
    p, s, sh = (plant.primary.coefficients, plant.secondary.coefficients,
                plant.secondary_estimate.coefficients)
    N = len(x)
    xp = lambda n: x[n] if n >= 0 else 0.0
    w = np.zeros(L)
    y = np.zeros(N)
    e = np.zeros(N)
    xf = np.array([sum(sh[m] * xp(n - m) for m in range(len(sh))) for n in range(N)])
    for n in range(N):
        d = sum(p[m] * xp(n - m) for m in range(len(p)))
        y[n] = sum(w[k] * xp(n - k) for k in range(L))
        e[n] = d - sum(s[m] * (y[n - m] if n - m >= 0 else 0.0) for m in range(len(s)))
        xv = np.array([xf[n - k] if n - k >= 0 else 0.0 for k in range(L)])
        step = mu / (delta + xv @ xv) if normalized else mu
        w = w + step * e[n] * xv
    return e, w


class TestSteps:
    def test_fxlms_matches_naive_recursion(self):
        x = np.random.default_rng(0).standard_normal(300) * 0.3
        e_ref, w_ref = naive_fx(x, PLANT, 6, 0.01)
        aux = FilteredXState(PLANT, 6)
        w = ControlFilter.zeros(6)
        d = PLANT.disturbance(x)
        es = []
        for n in range(x.size):
            e, w = fxlms_step(w, x[n], d[n], 0.01, aux)
            es.append(e)
        np.testing.assert_allclose(es, e_ref, atol=1e-12)
        np.testing.assert_allclose(w.weights, w_ref, atol=1e-12)

    def test_fxnlms_matches_naive_recursion(self):
        x = np.random.default_rng(1).standard_normal(300) * 0.3
        e_ref, w_ref = naive_fx(x, PLANT, 5, 0.1, normalized=True, delta=0.5)
        aux = FilteredXState(PLANT, 5)
        w = ControlFilter.zeros(5)
        d = PLANT.disturbance(x)
        for n in range(x.size):
            _, w = fxnlms_step(w, x[n], d[n], 0.1, 0.5, aux)
        np.testing.assert_allclose(w.weights, w_ref, atol=1e-12)

    def test_step_does_not_mutate_input(self):
        w = ControlFilter(np.ones(3))
        aux = FilteredXState(PLANT, 3)
        fxlms_step(w, 1.0, 1.0, 0.1, aux)
        np.testing.assert_array_equal(w.weights, np.ones(3))

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            fxlms_step(ControlFilter.zeros(4), 0.0, 0.0, 0.1, FilteredXState(PLANT, 3))

    def test_negative_mu(self):
        with pytest.raises(InvalidArgumentError):
            fxlms_step(ControlFilter.zeros(3), 0.0, 0.0, -0.1, FilteredXState(PLANT, 3))

    def test_guard_trips(self):
        aux = FilteredXState(PLANT, 2)
        with pytest.raises(DivergenceError):
            fxlms_step(ControlFilter(np.zeros(2)), 1e4, 1e4, 1e3, aux)


class TestSimulate:
    @pytest.mark.parametrize("normalized", [False, True])
    def test_kernel_matches_naive(self, normalized):
        x = np.random.default_rng(2).standard_normal(400) * 0.3
        mode = FXNLMS if normalized else FXLMS
        e_ref, w_ref = naive_fx(x, PLANT, 8, 0.02, normalized, delta=1.0)
        res = simulate(x, PLANT, 8, [Phase(0, mode)], mu=0.02, delta=1.0)
        np.testing.assert_allclose(res.e, e_ref, atol=1e-12)
        np.testing.assert_allclose(res.weights, w_ref, atol=1e-12)

    def test_silent_then_frozen(self):
        x = np.random.default_rng(3).standard_normal(500)
        w = np.random.default_rng(4).standard_normal(4)
        res = simulate(x, PLANT, 4, [Phase(0, SILENT), Phase(200, FROZEN, w)], mu=0.5)
        np.testing.assert_array_equal(res.e[:200], res.d[:200])
        np.testing.assert_array_equal(res.weights, w)
        # frozen output equals d - s * (w * x) once the buffers carry real history
        y = np.convolve(x, w)[: x.size]
        y[:200] = 0.0
        anti = np.convolve(y, PLANT.secondary.coefficients)[: x.size]
        np.testing.assert_allclose(res.e[200:], (res.d - anti)[200:], atol=1e-12)

    def test_schedule_validation(self):
        x = np.zeros(10)
        with pytest.raises(InvalidArgumentError):
            simulate(x, PLANT, 2, [Phase(3, FXLMS)])
        with pytest.raises(InvalidArgumentError):
            simulate(x, PLANT, 2, [Phase(0, FXLMS), Phase(0, FROZEN)])
        with pytest.raises(InvalidArgumentError):
            simulate(x, PLANT, 2, [Phase(0, FROZEN, np.zeros(3))])

    def test_fxlms_cancels_a_tone(self):
        trace, w, residual = run_cancellation(
            tone(300, 3.0, amplitude=0.1), PLANT, ControlFilter.zeros(10), "fxlms", mu=0.02
        )
        assert steady_state_anr(trace.anr_db) < -20
        assert len(residual) == len(trace)

    def test_divergence_reports_index(self):
        x = np.random.default_rng(5).standard_normal(5000)
        with pytest.raises(DivergenceError) as info:
            run_cancellation(Signal(x, 16000), PLANT, ControlFilter.zeros(10), "fxlms", mu=5.0)
        assert 0 <= info.value.index < 5000

    def test_unknown_algorithm(self):
        with pytest.raises(InvalidArgumentError):
            run_cancellation(tone(100, 0.1), PLANT, ControlFilter.zeros(3), "rls")


class TestAnr:
    def test_equal_signals_zero_db(self):
        d = np.random.default_rng(6).standard_normal(5000)
        assert np.max(np.abs(anr_series(d, d))) < 0.05

    def test_fixed_ratio_minus_twenty(self):
        d = np.random.default_rng(7).standard_normal(5000)
        np.testing.assert_allclose(anr_series(0.1 * d, d), -20.0, atol=0.05)

    def test_update_matches_series(self):
        rng = np.random.default_rng(8)
        e, d = rng.standard_normal(200), rng.standard_normal(200)
        st = AnrState(0.99)
        seq = [anr_update(st, a, b) for a, b in zip(e, d)]
        np.testing.assert_allclose(seq, anr_series(e, d, 0.99), atol=1e-12)

    def test_undefined_while_quiet(self):
        assert anr_update(AnrState(), 0.0, 0.0) is None
        assert anr_series(np.zeros(3), np.zeros(3)).tolist() == [0.0, 0.0, 0.0]

    def test_lambda_range(self):
        with pytest.raises(InvalidArgumentError):
            AnrState(1.0)

    def test_series_matches_simulation(self):
        x = np.random.default_rng(9).standard_normal(1000)
        res = simulate(x, PLANT, 6, [Phase(0, FXLMS)], mu=0.005)
        np.testing.assert_allclose(anr_series(res.e, res.d), res.anr_db, atol=1e-12)


class TestMetrics:
    ANR = np.array([0, -5, -11, -9, -12, -13, -14], dtype=float)

    def test_time_to_threshold(self):
        assert time_to_threshold(self.ANR, -10) == 2
        assert time_to_threshold(self.ANR, -10, start=3) == 1
        assert time_to_threshold(self.ANR, -20) is None

    def test_settle_time(self):
        assert settle_time(self.ANR, -10) == 4
        assert settle_time(self.ANR, -10, start=4) == 0
        assert settle_time(self.ANR, -13.5) == 6
        assert settle_time(self.ANR, -15) is None

    def test_steady_state(self):
        assert steady_state_anr(np.arange(100.0)) == pytest.approx(94.5)


def test_trace_serialization():
    tr = AnrTrace(np.arange(4), np.array([0.1, -0.2, 0.3, 0.0]),
                  np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, -1.5, -2.25, -3.0]))
    back = AnrTrace.from_json(tr.to_json())
    np.testing.assert_array_equal(back.anr_db, tr.anr_db)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "n,e,d,anr_db"
    assert lines[2] == "1,-0.2,2,-1.5"
    assert len(tr.decimate(2)) == 2
    assert json.loads(tr.to_json())["n"] == [0, 1, 2, 3]
