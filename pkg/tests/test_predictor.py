import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guide.core import WINDOW_TICKS
from guide.data import TickRange, make_split
from guide.fixtures import simulate_subject
from guide.predictor import (
    AutoregressivePredictor,
    Compartments,
    GlucoseForecast,
    NumericFaultError,
    PredictorError,
    PredictorInput,
    SingularFitError,
    SurrogateParams,
    SurrogatePredictor,
    classify_glucose,
    fit_autoregressive,
    surrogate_step,
    trailing_moving_average,
)

PARAMS = SurrogateParams()


def flat_input(glucose=120.0, basal_per_tick=None, **overrides):
    if basal_per_tick is None:
        basal_per_tick = PARAMS.basal_rate / 12.0
    g = np.full(WINDOW_TICKS, float(glucose))
    fields = dict(
        glucose=g,
        carbs=np.zeros(WINDOW_TICKS),
        bolus=np.zeros(WINDOW_TICKS),
        basal=np.full(WINDOW_TICKS, basal_per_tick),
        glucose_class=classify_glucose(g),
        ma200=np.full(WINDOW_TICKS, float(glucose)),
        future_carbs=np.zeros(12),
        future_bolus=np.zeros(12),
    )
    fields.update(overrides)
    if "glucose" in overrides and "glucose_class" not in overrides:
        fields["glucose_class"] = classify_glucose(fields["glucose"])
    return PredictorInput(**fields)


class TestClassify:
    def test_thresholds(self):
        assert classify_glucose(69.9) == 0
        assert classify_glucose(70.0) == 1
        assert classify_glucose(180.0) == 1
        assert classify_glucose(180.1) == 2

    def test_vectorized(self):
        out = classify_glucose([50.0, 120.0, 250.0])
        assert out.tolist() == [0, 1, 2]


class TestMovingAverage:
    def test_constant_series(self):
        out = trailing_moving_average(np.full(300, 100.0))
        assert out.shape == (72,)
        assert np.allclose(out, 100.0)

    def test_partial_history(self):
        # 72 ticks of history: tick k averages values 0..k
        x = np.arange(72, dtype=float)
        out = trailing_moving_average(x)
        assert out[0] == 0.0
        assert out[-1] == pytest.approx(np.mean(x))

    def test_span_bound(self):
        x = np.concatenate([np.full(200, 0.0), np.full(200, 100.0)])
        out = trailing_moving_average(x)
        # final tick averages the last 200 values, all 100
        assert out[-1] == pytest.approx(100.0)

    def test_too_short(self):
        with pytest.raises(PredictorError):
            trailing_moving_average(np.ones(50))


class TestPredictorInput:
    def test_validate_class_consistency(self):
        inp = flat_input()
        inp.validate()
        bad = flat_input(glucose_class=np.full(WINDOW_TICKS, 2, dtype=np.int64))
        with pytest.raises(PredictorError, match="glucose_class"):
            bad.validate()

    def test_shape_checked(self):
        with pytest.raises(PredictorError):
            flat_input(ma200=np.zeros(10))

    def test_from_history_builds_derived_channels(self):
        ext = np.full(250, 90.0)
        inp = PredictorInput.from_history(
            glucose=np.full(WINDOW_TICKS, 90.0),
            carbs=np.zeros(WINDOW_TICKS),
            bolus=np.zeros(WINDOW_TICKS),
            basal=np.full(WINDOW_TICKS, 1 / 12),
            extended_glucose=ext,
        )
        inp.validate()
        assert np.allclose(inp.ma200, 90.0)


class TestForecastClamping:
    def test_values_clamped_unconditionally(self):
        f = GlucoseForecast(np.array([10.0, 700.0] + [100.0] * 10))
        assert f.values[0] == 20.0
        assert f.values[1] == 600.0

    def test_non_finite_rejected(self):
        with pytest.raises(NumericFaultError):
            GlucoseForecast(np.array([np.nan] + [100.0] * 11))


class TestSurrogateStep:
    def test_fixed_point_at_equilibrium(self):
        state = Compartments(glucose=PARAMS.gb)
        for _ in range(50):
            state = surrogate_step(state, 0.0, 0.0, PARAMS.basal_rate, PARAMS)
        assert state.glucose == pytest.approx(PARAMS.gb, abs=1e-9)

    def test_carb_peak_timing(self):
        state = Compartments(glucose=PARAMS.gb)
        state = surrogate_step(state, 15.0, 0.0, PARAMS.basal_rate, PARAMS)
        trace = [state.glucose]
        for _ in range(47):
            state = surrogate_step(state, 0.0, 0.0, PARAMS.basal_rate, PARAMS)
            trace.append(state.glucose)
        peak_min = (int(np.argmax(trace)) + 1) * 5
        assert 30 <= peak_min <= 90

    def test_bolus_lowers_glucose_vs_counterfactual(self):
        with_bolus = Compartments(glucose=250.0)
        without = Compartments(glucose=250.0)
        with_bolus = surrogate_step(with_bolus, 0.0, 5.0, PARAMS.basal_rate, PARAMS)
        without = surrogate_step(without, 0.0, 0.0, PARAMS.basal_rate, PARAMS)
        for _ in range(11):
            with_bolus = surrogate_step(with_bolus, 0.0, 0.0, PARAMS.basal_rate, PARAMS)
            without = surrogate_step(without, 0.0, 0.0, PARAMS.basal_rate, PARAMS)
        assert with_bolus.glucose < without.glucose

    def test_dt_pinned(self):
        with pytest.raises(PredictorError):
            surrogate_step(Compartments(), 0.0, 0.0, 1.0, PARAMS, dt=1.0)

    def test_negative_events_rejected(self):
        with pytest.raises(PredictorError):
            surrogate_step(Compartments(), -1.0, 0.0, 1.0, PARAMS)

    def test_param_sampling_in_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = SurrogateParams.sample(rng)
            for name, (lo, hi) in SurrogateParams.SAMPLE_RANGES.items():
                assert lo <= getattr(p, name) <= hi

    def test_params_round_trip(self):
        p = SurrogateParams.sample(np.random.default_rng(3))
        assert SurrogateParams.from_dict(p.to_dict()) == p


class TestSurrogatePredictor:
    def test_equilibrium_forecast_is_flat(self):
        pred = SurrogatePredictor(PARAMS)
        forecast = pred.predict(flat_input(glucose=PARAMS.gb))
        assert np.abs(forecast.values - PARAMS.gb).max() <= 2.0

    def test_carbs_at_final_history_tick_drive_excursion(self):
        pred = SurrogatePredictor(PARAMS)
        carbs = np.zeros(WINDOW_TICKS)
        carbs[-1] = 60.0
        forecast = pred.predict(flat_input(glucose=PARAMS.gb, carbs=carbs))
        # absorption peaks near the end of the hour: strictly rising for the
        # first half, and the whole horizon sits above fasting glucose
        assert (np.diff(forecast.values[:7]) > 0).all()
        assert (forecast.values > PARAMS.gb).all()

    def test_determinism_bit_identical(self):
        pred = SurrogatePredictor(PARAMS)
        inp = flat_input(glucose=140.0)
        a = pred.predict(inp).values
        b = pred.predict(inp).values
        assert a.tobytes() == b.tobytes()

    @given(bolus=st.floats(0.0, 15.0), carbs=st.floats(0.0, 100.0),
           seed=st.integers(0, 100))
    @settings(max_examples=60, deadline=None)
    def test_monotone_event_response(self, bolus, carbs, seed):
        params = SurrogateParams.sample(np.random.default_rng(seed))
        pred = SurrogatePredictor(params)
        base = flat_input(glucose=150.0, basal_per_tick=params.basal_rate / 12.0)
        fb = np.zeros(12)
        fb[0] = bolus
        fc = np.zeros(12)
        fc[0] = carbs
        plain = pred.predict(base).values
        dosed = pred.predict(flat_input(glucose=150.0,
                                        basal_per_tick=params.basal_rate / 12.0,
                                        future_bolus=fb)).values
        fed = pred.predict(flat_input(glucose=150.0,
                                      basal_per_tick=params.basal_rate / 12.0,
                                      future_carbs=fc)).values
        assert (dosed <= plain + 1e-9).all()
        assert (fed >= plain - 1e-9).all()

    def test_advance_continues_replay(self):
        pred = SurrogatePredictor(PARAMS)
        inp = flat_input(glucose=140.0)
        state = pred.replay(inp.carbs, inp.bolus, inp.basal, 140.0)
        forecast, end_state = pred.advance(state, np.zeros(12), np.zeros(12),
                                           PARAMS.basal_rate)
        assert forecast.values.shape == (12,)
        assert end_state.glucose == pytest.approx(forecast.values[-1], abs=1e-9)


class TestAutoregressive:
    @staticmethod
    def _record(n=1200, glucose=None, carbs=None, bolus=None):
        from datetime import datetime, timedelta

        from guide.data import SubjectRecord

        g = glucose if glucose is not None else np.full(n, 120.0)
        return SubjectRecord(
            subject_id="ar",
            timestamps=[datetime(2024, 1, 1) + timedelta(minutes=5 * k)
                        for k in range(n)],
            glucose=np.asarray(g, dtype=float),
            carbs=np.asarray(carbs if carbs is not None else np.zeros(n), dtype=float),
            bolus=np.asarray(bolus if bolus is not None else np.zeros(n), dtype=float),
            basal=np.ones(n),
            sleep=np.zeros(n),
            filled=np.zeros(n, dtype=bool),
            segments=[(0, n)],
        )

    def test_linear_series_fits_exactly(self):
        n = 1200
        rng = np.random.default_rng(5)
        glucose = 90.0 + 0.02 * np.arange(n)
        carbs = np.where(rng.random(n) < 0.05, rng.uniform(10, 60, n), 0.0)
        bolus = np.where(rng.random(n) < 0.05, rng.uniform(2, 10, n), 0.0)
        record = self._record(n, glucose, carbs, bolus)
        model = fit_autoregressive(record, TickRange(0, n), ridge_lambda=1e-6)
        assert model.train_rmse < 1e-6

    def test_duplicated_features_singular_at_zero_ridge(self):
        n = 800
        rng = np.random.default_rng(6)
        events = np.where(rng.random(n) < 0.1, rng.uniform(5, 50, n), 0.0)
        record = self._record(n, glucose=120 + rng.normal(0, 10, n),
                              carbs=events, bolus=events)
        with pytest.raises(SingularFitError, match="ridge_lambda"):
            fit_autoregressive(record, TickRange(0, n), ridge_lambda=0.0)
        fit_autoregressive(record, TickRange(0, n), ridge_lambda=1.0)

    def test_ridge_shrinks_coefficients(self):
        record = simulate_subject("shrink", days=5, seed=11)
        r = TickRange(0, record.n_ticks)
        loose = fit_autoregressive(record, r, ridge_lambda=0.01)
        tight = fit_autoregressive(record, r, ridge_lambda=1.0)
        assert np.linalg.norm(tight.coef) < np.linalg.norm(loose.coef)

    def test_beats_persistence_on_training_segment(self):
        record = simulate_subject("persist", days=10, seed=21)
        plan = make_split(record)
        model = fit_autoregressive(record, plan.predictor_train, ridge_lambda=1.0)
        # persistence oracle: every future value equals the anchor glucose
        errs_model, errs_persist = [], []
        lo, hi = plan.predictor_train.start, plan.predictor_train.stop
        for t in range(lo + 200, min(lo + 600, hi - 12)):
            inp = PredictorInput.from_history(
                glucose=record.glucose[t - 71:t + 1],
                carbs=record.carbs[t - 71:t + 1],
                bolus=record.bolus[t - 71:t + 1],
                basal=record.basal[t - 71:t + 1] / 12.0,
                extended_glucose=record.glucose[max(0, t + 1 - 200):t + 1],
                future_carbs=record.carbs[t + 1:t + 13],
                future_bolus=record.bolus[t + 1:t + 13],
            )
            truth = record.glucose[t + 1:t + 13]
            errs_model.append(np.mean((model.predict(inp).values - truth) ** 2))
            errs_persist.append(np.mean((record.glucose[t] - truth) ** 2))
        assert np.sqrt(np.mean(errs_model)) < np.sqrt(np.mean(errs_persist))

    def test_range_too_short(self):
        record = self._record(600)
        with pytest.raises(PredictorError, match="500"):
            fit_autoregressive(record, TickRange(0, 400), ridge_lambda=1.0)

    def test_serialization_round_trip_bit_identical(self, tmp_path):
        record = simulate_subject("ser", days=5, seed=31)
        model = fit_autoregressive(record, TickRange(0, record.n_ticks),
                                   ridge_lambda=1.0)
        path = tmp_path / "model.json"
        model.save(path)
        loaded = AutoregressivePredictor.load(path)
        inp = flat_input(glucose=150.0)
        assert loaded.predict(inp).values.tobytes() == \
            model.predict(inp).values.tobytes()
