"""Replay buffers, behavior policies, and the training loops."""
import json
from pathlib import Path

import numpy as np
import pytest

from guide.agents import (
    AgentError,
    BufferError,
    HeuristicPolicy,
    NetworkPolicy,
    RandomPolicy,
    ReplayBuffer,
    TrainingDivergedError,
    build_offline_buffer,
    default_config,
    env_policy,
    train,
)
from guide.agents.common import build_actor, build_gaussian_actor
from guide.agents.training import evaluate_policy, load_policy
from guide.approximator import featurize_window, forward
from guide.core import ActionType, StateWindow, decode_action, sleep_flag
from guide.data import build_initial_states, make_split
from guide.env import GlucoseEnv
from guide.fixtures import simulate_subject
from guide.predictor import SurrogateParams, SurrogatePredictor

FEATURE_DIM = 10


@pytest.fixture(scope="module")
def record():
    return simulate_subject("trainsub", days=5, seed=31)


@pytest.fixture(scope="module")
def initials(record):
    split = make_split(record)
    return build_initial_states(record, split.rl_train, count=4)


@pytest.fixture(scope="module")
def params():
    return SurrogateParams()


def fresh_env(params):
    return GlucoseEnv(SurrogatePredictor(params), basal_rate=params.basal_rate)


@pytest.fixture(scope="module")
def small_buffer(initials, params):
    env = fresh_env(params)
    return build_offline_buffer(env, initials, HeuristicPolicy(5), seed=17,
                                target_size=480)


def flat_window(glucose=120.0, minutes_since_inject=1440.0, start_hour=10):
    hours = np.repeat(np.arange(start_hour, start_hour + 6) % 24, 12)
    return StateWindow(
        hour_of_day=hours,
        sleep=np.array([sleep_flag(int(h)) for h in hours]),
        glucose=np.full(72, glucose),
        carbs=np.zeros(72),
        bolus=np.zeros(72),
        minutes_since_meal=np.full(72, 1440.0),
        minutes_since_inject=np.full(72, minutes_since_inject),
    )


class TestReplayBuffer:
    def _filled(self, capacity, n, seed=0):
        buf = ReplayBuffer(capacity, seed=seed)
        rng = np.random.default_rng(9)
        for k in range(n):
            buf.add(rng.normal(size=(72, 7)), rng.uniform(-1, 1, 6),
                    float(k), rng.normal(size=(72, 7)), int(k % 24 == 23))
        return buf

    def test_capacity_validation(self):
        with pytest.raises(BufferError):
            ReplayBuffer(0, seed=1)

    def test_wraps_oldest_first(self):
        buf = ReplayBuffer(5, seed=1)
        for k in range(7):
            buf.add(np.full((72, 7), k), np.zeros(6), float(k),
                    np.zeros((72, 7)), 0)
        assert buf.size == 5
        # entries 5 and 6 overwrote slots 0 and 1
        assert buf.states[0, 0, 0] == 5.0
        assert buf.states[1, 0, 0] == 6.0
        assert buf.states[2, 0, 0] == 2.0

    def test_frozen_rejects_add(self):
        buf = self._filled(10, 3)
        buf.freeze()
        with pytest.raises(BufferError):
            buf.add(np.zeros((72, 7)), np.zeros(6), 0.0, np.zeros((72, 7)), 0)

    def test_sample_shapes_and_dtypes(self):
        buf = self._filled(50, 30)
        batch = buf.sample(16)
        assert batch["states"].shape == (16, 72, 7)
        assert batch["actions"].shape == (16, 6)
        assert batch["rewards"].shape == (16,)
        assert batch["dones"].dtype == np.float64

    def test_sample_empty_raises(self):
        with pytest.raises(BufferError):
            ReplayBuffer(10, seed=0).sample(4)

    def test_checksum_tracks_content(self):
        a = self._filled(50, 30, seed=3)
        b = self._filled(50, 30, seed=4)  # rng seed differs, content equal
        assert a.checksum() == b.checksum()
        b.add(np.ones((72, 7)), np.zeros(6), 1.0, np.zeros((72, 7)), 0)
        assert a.checksum() != b.checksum()

    def test_save_load_round_trip(self, tmp_path):
        buf = self._filled(50, 30)
        buf.subject_id = "roundtrip"
        buf.freeze()
        path = tmp_path / "buffer.bin"
        buf.save(path)
        loaded = ReplayBuffer.load(path)
        assert loaded.size == 30
        assert loaded.capacity == 50
        assert loaded.subject_id == "roundtrip"
        assert loaded.frozen
        assert loaded.checksum() == buf.checksum()
        np.testing.assert_array_equal(loaded.states[:30], buf.states[:30])
        np.testing.assert_array_equal(loaded.dones[:30], buf.dones[:30])

    def test_load_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "not_a_buffer.bin"
        path.write_bytes(b"PNG\x00garbage")
        with pytest.raises(BufferError):
            ReplayBuffer.load(path)

    def test_load_rejects_truncated_file(self, tmp_path):
        buf = self._filled(50, 30)
        path = tmp_path / "buffer.bin"
        buf.save(path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(BufferError):
            ReplayBuffer.load(path)


class TestBuildOfflineBuffer:
    def test_fills_exact_target_and_freezes(self, small_buffer):
        assert small_buffer.size == 480
        assert small_buffer.frozen

    def test_episode_boundaries(self, small_buffer):
        # 480 transitions = 20 whole days, a terminal flag every 24 steps.
        dones = small_buffer.dones[:480]
        assert dones[23::24].all()
        assert dones.sum() == 20

    def test_mid_episode_stop_leaves_tail_unterminated(self, initials, params):
        env = fresh_env(params)
        buf = build_offline_buffer(env, initials, HeuristicPolicy(5), seed=17,
                                   target_size=30)
        assert buf.size == 30
        assert buf.dones[23] == 1
        assert buf.dones[29] == 0

    def test_deterministic_per_seed(self, initials, params, small_buffer):
        env = fresh_env(params)
        again = build_offline_buffer(env, initials, HeuristicPolicy(5),
                                     seed=17, target_size=480)
        assert again.checksum() == small_buffer.checksum()

    def test_seed_changes_content(self, initials, params, small_buffer):
        env = fresh_env(params)
        other = build_offline_buffer(env, initials, HeuristicPolicy(5),
                                     seed=18, target_size=480)
        assert other.checksum() != small_buffer.checksum()

    def test_requires_initial_states(self, params):
        with pytest.raises(BufferError):
            build_offline_buffer(fresh_env(params), [], HeuristicPolicy(5),
                                 seed=1)


class TestPolicies:
    def test_random_policy_in_box_and_deterministic(self):
        w = flat_window()
        a1 = RandomPolicy(3).act(w)
        a2 = RandomPolicy(3).act(w)
        assert a1.shape == (6,)
        assert (np.abs(a1) <= 1.0).all()
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, RandomPolicy(4).act(w))

    def test_heuristic_corrects_high_glucose(self):
        policy = HeuristicPolicy(0, epsilon=0.0, magnitude_noise=0.0)
        action = decode_action(policy.act(flat_window(glucose=300.0)))
        assert action.action_type == ActionType.INJECT
        assert action.insulin_amount == pytest.approx((300.0 - 180.0) / 30.0)
        assert action.slot == 0

    def test_heuristic_correction_dose_is_pen_limited(self):
        # Just above threshold the linear rule would give 0.17 U; the pen
        # floor lifts it to 2.  At the sensor ceiling the dose is 14 U, so
        # the 15 U cap is never exceeded inside the valid glucose range.
        policy = HeuristicPolicy(0, epsilon=0.0, magnitude_noise=0.0)
        low = decode_action(policy.act(flat_window(glucose=185.0)))
        high = decode_action(policy.act(flat_window(glucose=600.0)))
        assert low.insulin_amount == pytest.approx(2.0)
        assert high.insulin_amount == pytest.approx(14.0)

    def test_heuristic_respects_recent_injection(self):
        policy = HeuristicPolicy(0, epsilon=0.0, magnitude_noise=0.0)
        action = decode_action(policy.act(
            flat_window(glucose=300.0, minutes_since_inject=60.0)))
        assert action.action_type == ActionType.NOTHING

    def test_heuristic_feeds_low_glucose(self):
        policy = HeuristicPolicy(0, epsilon=0.0, magnitude_noise=0.0)
        action = decode_action(policy.act(flat_window(glucose=65.0)))
        assert action.action_type == ActionType.EAT
        assert 15.0 <= action.carb_amount <= 25.0

    def test_heuristic_does_nothing_in_range(self):
        policy = HeuristicPolicy(0, epsilon=0.0, magnitude_noise=0.0)
        action = decode_action(policy.act(flat_window(glucose=120.0)))
        assert action.action_type == ActionType.NOTHING

    def test_heuristic_magnitude_noise_stays_in_box(self):
        policy = HeuristicPolicy(0, epsilon=0.0, magnitude_noise=5.0)
        for _ in range(20):
            raw = policy.act(flat_window(glucose=300.0))
            assert (np.abs(raw) <= 1.0).all()

    def test_heuristic_epsilon_validation(self):
        with pytest.raises(AgentError):
            HeuristicPolicy(0, epsilon=1.5)

    def test_heuristic_full_epsilon_is_uniform(self):
        policy = HeuristicPolicy(0, epsilon=1.0)
        w = flat_window(glucose=300.0)
        raws = np.stack([policy.act(w) for _ in range(50)])
        assert (np.abs(raws) <= 1.0).all()
        # deliberate corrections would pin the type channels to +/-1
        assert not np.isin(raws[:, :3], (-1.0, 1.0)).all()

    def test_network_policy_deterministic_head(self):
        actor = build_actor(FEATURE_DIM, (8,), seed=0)
        w = flat_window()
        feats = featurize_window(w, 12)
        actor2 = build_actor(len(feats), (8,), seed=0)
        np.testing.assert_array_equal(
            NetworkPolicy(actor2, stride=12).act(w), forward(actor2, feats))

    def test_network_policy_stochastic_head_squashes_mean(self):
        w = flat_window()
        feats = featurize_window(w, 12)
        actor = build_gaussian_actor(len(feats), (8,), seed=1)
        out = forward(actor, feats)
        np.testing.assert_array_equal(
            NetworkPolicy(actor, stride=12, stochastic_head=True).act(w),
            np.tanh(out[:6]))

    def test_env_policy_adapter(self, initials):
        policy = RandomPolicy(7)
        adapted = env_policy(RandomPolicy(7))

        class FakeState:
            window = initials[0].window

        np.testing.assert_array_equal(adapted(FakeState()),
                                      policy.act(initials[0].window))


class TestConfig:
    def test_published_offline_hyperparameters(self):
        td3 = default_config("td3bc")
        assert (td3.gamma, td3.tau) == (0.98, 0.005)
        assert (td3.alpha_bc, td3.policy_noise, td3.noise_clip) == (1.5, 0.2, 0.5)
        assert (td3.actor_lr, td3.critic_lr) == (3e-4, 1e-4)
        assert (td3.update_steps, td3.batch_size) == (10_000, 256)

        cql = default_config("cqlbc")
        assert (cql.alpha_cql, cql.alpha_bc) == (0.05, 2.5)
        assert (cql.gamma, cql.tau) == (0.98, 0.005)
        assert (cql.actor_lr, cql.critic_lr) == (3e-4, 1e-4)

        sac = default_config("sac_offline")
        assert (sac.gamma, sac.tau, sac.alpha_entropy) == (0.98, 0.005, 0.2)

    def test_published_online_hyperparameters(self):
        sac = default_config("sac_online")
        assert (sac.gamma, sac.alpha_entropy, sac.epochs) == (0.98, 0.2, 20)

        ppo = default_config("ppo")
        assert ppo.gamma == 0.99
        assert ppo.actor_lr == ppo.critic_lr == 3e-4
        assert (ppo.gae_lambda, ppo.clip_ratio) == (0.95, 0.2)
        assert (ppo.entropy_coeff, ppo.value_coeff) == (0.001, 0.5)

    def test_unknown_algorithm_rejected(self):
        with pytest.raises(AgentError):
            default_config("dqn")

    def test_gamma_validation(self):
        with pytest.raises(AgentError):
            default_config("td3bc", gamma=0.0)

    def test_overrides_apply(self):
        cfg = default_config("td3bc", update_steps=50, hidden_sizes=[32, 32])
        assert cfg.update_steps == 50
        assert cfg.hidden_sizes == (32, 32)


def tiny_config(algorithm, **overrides):
    base = dict(update_steps=8, epochs=1, batch_size=32, hidden_sizes=(8,),
                feature_stride=12, eval_every=4, ppo_inner_epochs=2)
    base.update(overrides)
    return default_config(algorithm, **base)


class TestTrainingLoops:
    def test_offline_requires_frozen_buffer(self, params):
        cfg = tiny_config("td3bc")
        with pytest.raises(AgentError):
            train(cfg, buffer=None, seed=0)
        unfrozen = ReplayBuffer(10, seed=0)
        unfrozen.add(np.zeros((72, 7)), np.zeros(6), 0.0, np.zeros((72, 7)), 0)
        with pytest.raises(AgentError):
            train(cfg, buffer=unfrozen, seed=0)

    def test_online_requires_env(self):
        with pytest.raises(AgentError):
            train(tiny_config("ppo"), seed=0)

    @pytest.mark.parametrize("algorithm", ["td3bc", "cqlbc", "sac_offline"])
    def test_offline_curves_and_losses(self, algorithm, small_buffer):
        result = train(tiny_config(algorithm), buffer=small_buffer, seed=3)
        assert len(result.curves) == 2  # snapshots at steps 4 and 8
        assert result.curves[-1]["step"] == 8
        for row in result.curves:
            for key, value in row.items():
                assert np.isfinite(value), key

    def test_offline_training_never_steps_env(self, initials, params):
        env = fresh_env(params)
        buf = build_offline_buffer(env, initials, HeuristicPolicy(5), seed=17,
                                   target_size=96)
        steps_after_collection = env.step_count
        assert steps_after_collection == 96
        train(tiny_config("td3bc"), buffer=buf, env=env, seed=3)
        assert env.step_count == steps_after_collection

    def test_same_seed_reproduces_policy(self, small_buffer, initials):
        cfg = tiny_config("td3bc")
        a = train(cfg, buffer=small_buffer, seed=5)
        b = train(cfg, buffer=small_buffer, seed=5)
        w = initials[0].window
        np.testing.assert_array_equal(a.policy.act(w), b.policy.act(w))
        c = train(cfg, buffer=small_buffer, seed=6)
        assert not np.array_equal(a.policy.act(w), c.policy.act(w))

    def test_evaluation_snapshots_in_curves(self, small_buffer, initials,
                                            params):
        result = train(tiny_config("td3bc"), buffer=small_buffer, seed=3,
                       eval_env=fresh_env(params),
                       eval_initial_states=initials[:1], eval_seeds=(0,))
        assert {"eval_return", "eval_tir"} <= set(result.curves[-1])
        assert 0.0 <= result.curves[-1]["eval_tir"] <= 100.0

    def test_result_saved_to_directory(self, small_buffer, initials, tmp_path):
        cfg = tiny_config("td3bc")
        result = train(cfg, buffer=small_buffer, seed=3, out_dir=tmp_path)
        assert (tmp_path / "curves.csv").exists()
        saved_cfg = json.loads((tmp_path / "config.json").read_text())
        assert saved_cfg["algorithm"] == "td3bc"
        reloaded = load_policy(tmp_path / "policy")
        w = initials[0].window
        np.testing.assert_allclose(reloaded.act(w), result.policy.act(w))

    def test_saved_stochastic_policy_round_trips(self, initials, params,
                                                 tmp_path):
        env = fresh_env(params)
        cfg = tiny_config("ppo")
        result = train(cfg, env=env, initial_states=initials[:1], seed=4,
                       out_dir=tmp_path)
        reloaded = load_policy(tmp_path / "policy")
        w = initials[0].window
        np.testing.assert_allclose(reloaded.act(w), result.policy.act(w))
        assert reloaded.stochastic_head

    def test_divergence_guard_raises_and_checkpoints(self, initials, params,
                                                     tmp_path):
        env = fresh_env(params)
        buf = build_offline_buffer(env, initials, HeuristicPolicy(5), seed=17,
                                   target_size=48)
        poisoned = ReplayBuffer(48, seed=0)
        for k in range(48):
            poisoned.add(buf.states[k], buf.actions[k], 1e200,
                         buf.next_states[k], int(buf.dones[k]))
        poisoned.freeze()
        with pytest.raises(TrainingDivergedError), np.errstate(over="ignore"):
            train(tiny_config("td3bc"), buffer=poisoned, seed=3,
                  out_dir=tmp_path)
        assert (tmp_path / "diverged_checkpoint" / "actor.json").exists()

    def test_sac_online_interacts_with_env(self, initials, params):
        env = fresh_env(params)
        cfg = tiny_config("sac_online", batch_size=16)
        result = train(cfg, env=env, initial_states=initials[:2], seed=5)
        # one epoch over two initial states, 24 decisions each
        assert env.step_count == 48
        assert result.curves[-1]["epoch"] == 0
        assert np.isfinite(result.curves[-1]["critic_loss"])

    def test_ppo_runs_one_epoch_per_curve_row(self, initials, params):
        env = fresh_env(params)
        cfg = tiny_config("ppo", epochs=2, batch_size=24)
        result = train(cfg, env=env, initial_states=initials[:1], seed=5)
        assert len(result.curves) == 2
        assert env.step_count == 48
        assert np.isfinite(result.curves[-1]["policy_loss"])
        assert np.isfinite(result.curves[-1]["value_loss"])

    def test_evaluate_policy_averages_episodes(self, initials, params):
        env = fresh_env(params)
        out = evaluate_policy(env, initials[:1], RandomPolicy(0), seeds=(0, 1))
        assert set(out) == {"eval_return", "eval_tir"}
        assert 0.0 <= out["eval_tir"] <= 100.0
        assert env.step_count == 48
