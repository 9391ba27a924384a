"""Measure how the conservative penalty weight reshapes the critic's view of
out-of-data actions.

For each alpha, trains the same agent (same seed, same batch stream) and
reports the critic's mean Q over uniformly drawn actions against the
alpha=0 twin on the same states.  The relationship is not monotonic: small
weights lower out-of-data Q as intended, but large weights inflate the whole
Q surface through the data-action term faster than the push-down settles,
and the gap flips sign.

    python scripts/conservatism_probe.py --alphas 0.05,0.2,1.0 --steps 4000
"""
import argparse
import time

import numpy as np

from guide.agents import HeuristicPolicy, build_offline_buffer, default_config, train
from guide.agents.common import q_forward
from guide.approximator import featurize_windows
from guide.data import build_initial_states, make_split
from guide.env import GlucoseEnv
from guide.fixtures import simulate_subject
from guide.predictor import SurrogateParams, SurrogatePredictor


def episode_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alphas", default="0.05,0.2,1.0")
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--subject-seed", type=int, default=30)
    ap.add_argument("--states", type=int, default=100)
    ap.add_argument("--action-samples", type=int, default=64)
    ap.add_argument("--stride", type=int, default=12)
    return ap.parse_args()


def main():
    args = parse_args()
    alphas = [float(a) for a in args.alphas.split(",")]

    prng = np.random.default_rng(args.subject_seed)
    params = SurrogateParams.sample(prng)
    record = simulate_subject("A0", days=16,
                              seed=episode_seed(args.subject_seed, 0),
                              params=params)
    split = make_split(record)
    states = build_initial_states(record, split.rl_train, count=10)
    env = GlucoseEnv(SurrogatePredictor(params), basal_rate=params.basal_rate)
    buffer = build_offline_buffer(env, states, HeuristicPolicy(1000),
                                  seed=1000, target_size=4800,
                                  subject_id="A0")

    def config(alpha):
        return default_config("cqlbc", hidden_sizes=(48, 48),
                              feature_stride=args.stride, batch_size=128,
                              cql_action_samples=4, update_steps=args.steps,
                              eval_every=args.steps, alpha_cql=alpha)

    state_rng = np.random.default_rng(4242)
    idx = state_rng.integers(0, buffer.size, args.states)
    feats = featurize_windows(buffer.states[idx], args.stride)
    uniform = np.random.default_rng(777).uniform(
        -1.0, 1.0, (args.states, args.action_samples, 6))
    rep = np.repeat(feats, args.action_samples, axis=0)
    flat = uniform.reshape(-1, 6)
    data_actions = buffer.actions[idx]

    def critic_views(agent):
        q_u = np.minimum(q_forward(agent.critic1, rep, flat),
                         q_forward(agent.critic2, rep, flat))
        q_u = q_u.reshape(args.states, args.action_samples).mean(axis=1)
        q_d = np.minimum(q_forward(agent.critic1, feats, data_actions),
                         q_forward(agent.critic2, feats, data_actions))
        return q_u, q_d

    t0 = time.perf_counter()
    baseline = train(config(0.0), buffer=buffer, seed=args.seed).agent
    base_u, base_d = critic_views(baseline)
    print(f"alpha=0 twin: mean Q uniform {base_u.mean():8.2f}  "
          f"data {base_d.mean():8.2f}  ({time.perf_counter() - t0:.0f}s)\n")

    print(f"{'alpha':>7} {'Q_uniform':>10} {'Q_data':>9} {'gap_vs_twin':>12} "
          f"{'below_twin':>11}")
    for alpha in alphas:
        t0 = time.perf_counter()
        agent = train(config(alpha), buffer=buffer, seed=args.seed).agent
        q_u, q_d = critic_views(agent)
        gap = q_u - base_u
        below = int(np.sum(gap < 0))
        print(f"{alpha:>7.2f} {q_u.mean():>10.2f} {q_d.mean():>9.2f} "
              f"{np.median(gap):>+12.3f} {below:>7}/{args.states} "
              f"({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
