import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guide.core import ActionType, BehavioralAction, StateWindow, WINDOW_TICKS
from guide.reward import (
    ConfigError,
    GlycemicParams,
    RewardConfig,
    RewardState,
    RuleSpec,
    behavioral_reward,
    default_rule_table,
    glycemic_hour_reward,
    glycemic_point_reward,
    least_squares_slope,
    load_reward_config,
    reward_config_from_dict,
    reward_config_to_dict,
    save_reward_config,
    total_reward,
)

PARAMS = GlycemicParams()
RULES = default_rule_table()


def window(glucose=120.0, sleep=0.0, dmeal=1440.0, dinject=1440.0, hour0=9,
           glucose_tail=None):
    hours = [(hour0 + k // 12) % 24 for k in range(WINDOW_TICKS)]
    g = np.full(WINDOW_TICKS, float(glucose))
    if glucose_tail is not None:
        g[-len(glucose_tail):] = glucose_tail
    return StateWindow(
        hour_of_day=np.array(hours),
        sleep=np.full(WINDOW_TICKS, float(sleep)),
        glucose=g,
        carbs=np.zeros(WINDOW_TICKS),
        bolus=np.zeros(WINDOW_TICKS),
        minutes_since_meal=np.full(WINDOW_TICKS, float(dmeal)),
        minutes_since_inject=np.full(WINDOW_TICKS, float(dinject)),
    )


def act(action_type, carbs=25.0, insulin=5.0, slot=0):
    return BehavioralAction(action_type, carbs, insulin, slot)


class TestGlycemicPointReward:
    def test_target_value(self):
        assert glycemic_point_reward(125.0, PARAMS) == pytest.approx(100.0, abs=1e-12)

    def test_threshold_boundaries_are_zero(self):
        assert glycemic_point_reward(70.0, PARAMS) == pytest.approx(0.0, abs=1e-12)
        assert glycemic_point_reward(180.0, PARAMS) == pytest.approx(0.0, abs=1e-12)

    def test_excursion_slopes(self):
        assert glycemic_point_reward(60.0, PARAMS) == pytest.approx(-70.0, abs=1e-12)
        assert glycemic_point_reward(200.0, PARAMS) == pytest.approx(-40.0, abs=1e-12)

    @pytest.mark.parametrize("threshold", [70.0, 180.0])
    def test_continuity_at_thresholds(self, threshold):
        lam_max = max(PARAMS.lambda_hypo, PARAMS.lambda_hyper,
                      2 * PARAMS.lambda_normal / (PARAMS.t_hyper - PARAMS.t_hypo))
        for eps in (1e-6, 1e-9):
            assert abs(glycemic_point_reward(threshold - eps, PARAMS)) <= lam_max * eps * 1.01
            assert abs(glycemic_point_reward(threshold + eps, PARAMS)) <= lam_max * eps * 1.01

    def test_in_range_maximum_at_target(self):
        grid = np.linspace(70.0, 180.0, 2201)
        vals = [glycemic_point_reward(g, PARAMS) for g in grid]
        assert grid[int(np.argmax(vals))] == pytest.approx(125.0)
        assert max(vals) == pytest.approx(100.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            glycemic_point_reward(float("nan"), PARAMS)

    def test_param_invariants(self):
        with pytest.raises(ConfigError):
            GlycemicParams(t_hypo=130.0)
        with pytest.raises(ConfigError):
            GlycemicParams(lambda_hypo=-1.0)


class TestGlycemicHourReward:
    def test_all_target(self):
        assert glycemic_hour_reward(np.full(12, 125.0), PARAMS) == pytest.approx(1200.0)

    def test_all_boundary(self):
        assert glycemic_hour_reward(np.full(12, 70.0), PARAMS) == pytest.approx(0.0)

    def test_mixed_hand_sum(self):
        forecast = np.array([125.0] * 6 + [200.0] * 6)
        assert glycemic_hour_reward(forecast, PARAMS) == pytest.approx(360.0)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            glycemic_hour_reward(np.full(11, 125.0), PARAMS)


class TestBehavioralRules:
    def test_eat_too_soon_penalty(self):
        state = RewardState(window(glucose=120.0, dmeal=30.0))
        comps = behavioral_reward(state, act(ActionType.EAT), RULES)
        assert comps["meal"] <= -150.0 * (90.0 - 30.0) / 90.0
        assert comps["meal"] >= -150.0

    def test_nothing_stable_gives_only_stability_bonus(self):
        state = RewardState(window(glucose=120.0))
        comps = behavioral_reward(state, act(ActionType.NOTHING), RULES)
        assert comps["stability"] == pytest.approx(50.0)
        for term in ("meal", "insulin", "sleep", "repetition"):
            assert comps[term] == 0.0

    def test_inject_during_sleep_is_penalized(self):
        state = RewardState(window(glucose=140.0, sleep=1.0, hour0=1))
        comps = behavioral_reward(state, act(ActionType.INJECT), RULES)
        assert comps["sleep"] < 0.0

    def test_rescue_eat_during_sleep_exempt(self):
        state = RewardState(window(glucose=60.0, sleep=1.0, hour0=1))
        comps = behavioral_reward(state, act(ActionType.EAT), RULES)
        assert comps["sleep"] == 0.0
        assert comps["meal"] > 0.0  # rescue bonus

    def test_insulin_stacking_penalty(self):
        state = RewardState(window(glucose=220.0, dinject=30.0))
        comps = behavioral_reward(state, act(ActionType.INJECT), RULES)
        assert comps["insulin"] < 0.0

    def test_correction_bonus_when_high_and_clear(self):
        state = RewardState(window(glucose=250.0))
        comps = behavioral_reward(state, act(ActionType.INJECT), RULES)
        assert comps["insulin"] > 0.0

    def test_inject_on_falling_glucose_penalized(self):
        tail = np.array([160.0, 150.0, 140.0, 130.0, 120.0, 110.0])
        state = RewardState(window(glucose=160.0, glucose_tail=tail))
        comps = behavioral_reward(state, act(ActionType.INJECT), RULES)
        assert comps["insulin"] < 0.0

    def test_repeat_type_penalty(self):
        state = RewardState(window(glucose=250.0), prev_action_type=ActionType.INJECT)
        comps = behavioral_reward(state, act(ActionType.INJECT), RULES)
        repeat_free = behavioral_reward(
            RewardState(window(glucose=250.0), prev_action_type=ActionType.EAT),
            act(ActionType.INJECT), RULES)
        assert comps["repetition"] == pytest.approx(-1000.0)
        assert repeat_free["repetition"] == 0.0

    def test_repeating_nothing_is_free(self):
        state = RewardState(window(glucose=120.0), prev_action_type=ActionType.NOTHING)
        comps = behavioral_reward(state, act(ActionType.NOTHING), RULES)
        assert comps["repetition"] == 0.0


@st.composite
def random_fixture(draw):
    g_base = draw(st.floats(40.0, 350.0))
    tail = draw(st.lists(st.floats(40.0, 350.0), min_size=6, max_size=6))
    state = RewardState(
        window(glucose=g_base, glucose_tail=np.array(tail),
               sleep=draw(st.sampled_from([0.0, 1.0])),
               dmeal=draw(st.floats(0.0, 1440.0)),
               dinject=draw(st.floats(0.0, 1440.0))),
        prev_action_type=draw(st.sampled_from([None] + list(ActionType))),
    )
    action = BehavioralAction(
        draw(st.sampled_from(list(ActionType))),
        draw(st.floats(5.0, 50.0)),
        draw(st.floats(2.0, 15.0)),
        draw(st.integers(0, 11)),
    )
    forecast = np.array(draw(st.lists(st.floats(20.0, 600.0), min_size=12, max_size=12)))
    return state, action, forecast


class TestTotalReward:
    def test_composed_example(self):
        state = RewardState(window(glucose=125.0))
        scaled, breakdown = total_reward(state, act(ActionType.NOTHING),
                                         np.full(12, 125.0), RULES, PARAMS)
        assert scaled == pytest.approx(1.25, abs=1e-12)
        assert breakdown["glucose"] == pytest.approx(1200.0)
        assert breakdown["stability"] == pytest.approx(50.0)

    def test_zero_rules_zero_glucose(self):
        state = RewardState(window(glucose=70.0))
        scaled, breakdown = total_reward(state, act(ActionType.NOTHING),
                                         np.full(12, 70.0), (), PARAMS)
        assert scaled == 0.0
        assert sum(breakdown.values()) == 0.0

    @given(random_fixture())
    @settings(max_examples=300, deadline=None)
    def test_breakdown_identity_and_clipping(self, fixture):
        state, action, forecast = fixture
        scaled, breakdown = total_reward(state, action, forecast, RULES, PARAMS)
        total = sum(breakdown.values())
        assert abs(total - 1000.0 * scaled) <= 1e-12 * max(1.0, abs(total))
        # every behavioral component stays within the summed bounds of its rules
        for rule in RULES:
            single = rule.evaluate(state, action)
            assert rule.lower - 1e-12 <= single <= rule.upper + 1e-12


class TestRuleSpecValidation:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError, match="no_such_rule"):
            RuleSpec("no_such_rule", "eat", 100.0, -100.0, 0.0)

    def test_alpha_outside_published_range_rejected(self):
        with pytest.raises(ConfigError, match="alpha"):
            RuleSpec("eat_too_soon", "eat", 500.0, -500.0, 0.0)

    def test_bounds_must_bracket_zero(self):
        with pytest.raises(ConfigError, match="bounds"):
            RuleSpec("eat_too_soon", "eat", 150.0, 10.0, 20.0)


class TestConfigSerialization:
    def test_round_trip(self, tmp_path):
        config = RewardConfig()
        path = tmp_path / "reward.json"
        save_reward_config(config, path)
        loaded = load_reward_config(path)
        assert loaded.glycemic == config.glycemic
        assert loaded.rules == config.rules

    def test_dict_round_trip_preserves_params(self):
        config = RewardConfig()
        d = reward_config_to_dict(config)
        loaded = reward_config_from_dict(d)
        assert loaded.rules[0].params == config.rules[0].params

    def test_malformed_rejected(self):
        with pytest.raises(ConfigError):
            reward_config_from_dict({"rules": [{"kind": "eat_too_soon"}]})


def test_least_squares_slope_on_line():
    assert least_squares_slope(np.array([100, 95, 90, 85, 80, 75.0])) == pytest.approx(-1.0)
    assert least_squares_slope(np.full(6, 120.0)) == pytest.approx(0.0)
