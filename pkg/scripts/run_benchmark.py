"""Desk-scale offline benchmark: synthesize a cohort, fill behavior buffers,
train the offline agents, and compare them against the random and heuristic
baselines with paired signed-rank tests.

Defaults finish in a few minutes on one core.  Results land in
<out>/benchmark.json; the table printed at the end mirrors the JSON.

    python scripts/run_benchmark.py --subjects 3 --seeds 0,1 --steps 4000
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from guide.agents import (
    HeuristicPolicy,
    RandomPolicy,
    build_offline_buffer,
    default_config,
    env_policy,
    train,
)
from guide.data import build_initial_states, make_split
from guide.env import GlucoseEnv, rollout
from guide.fixtures import simulate_subject
from guide.metrics import (
    MetricError,
    glycemic_summary,
    holm_bonferroni,
    wilcoxon_signed_rank,
)
from guide.predictor import SurrogateParams, SurrogatePredictor


def episode_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=3)
    ap.add_argument("--days", type=int, default=16)
    ap.add_argument("--cohort-seed", type=int, default=30)
    ap.add_argument("--seeds", default="0,1",
                    help="comma-separated training seeds")
    ap.add_argument("--algos", default="td3bc,cqlbc")
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--buffer-size", type=int, default=4800)
    ap.add_argument("--hidden", default="48,48")
    ap.add_argument("--stride", type=int, default=12)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--eval-states", type=int, default=2)
    ap.add_argument("--out", default="runs/benchmark")
    return ap.parse_args()


def main():
    args = parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    algos = args.algos.split(",")
    hidden = tuple(int(h) for h in args.hidden.split(","))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    t_start = time.perf_counter()
    prng = np.random.default_rng(args.cohort_seed)
    subjects = []
    for k in range(args.subjects):
        params = SurrogateParams.sample(prng)
        record = simulate_subject(f"A{k}", days=args.days,
                                  seed=episode_seed(args.cohort_seed, k),
                                  params=params)
        split = make_split(record)
        subjects.append({
            "id": f"A{k}",
            "params": params,
            "train_states": build_initial_states(record, split.rl_train,
                                                 count=10),
            "eval_states": build_initial_states(record, split.rl_eval,
                                                count=args.eval_states),
        })
    print(f"cohort of {args.subjects}: {time.perf_counter() - t_start:.0f}s")

    def fresh_env(sub):
        return GlucoseEnv(SurrogatePredictor(sub["params"]),
                          basal_rate=sub["params"].basal_rate)

    buffers = []
    for k, sub in enumerate(subjects):
        buffers.append(build_offline_buffer(
            fresh_env(sub), sub["train_states"], HeuristicPolicy(1000 + k),
            seed=1000 + k, target_size=args.buffer_size,
            subject_id=sub["id"]))
    print(f"buffers ({args.buffer_size} transitions each): "
          f"{time.perf_counter() - t_start:.0f}s")

    policies = {}
    for algo in algos:
        config = default_config(algo, hidden_sizes=hidden,
                                feature_stride=args.stride,
                                batch_size=args.batch,
                                update_steps=args.steps,
                                eval_every=args.steps)
        for k, sub in enumerate(subjects):
            for seed in seeds:
                t0 = time.perf_counter()
                policies[(algo, k, seed)] = train(config, buffer=buffers[k],
                                                  seed=seed).policy
                print(f"  {algo} {sub['id']} seed{seed}: "
                      f"{time.perf_counter() - t0:.0f}s")

    # paired evaluation: every arm sees the same (subject, window, seed) grid
    episodes = [(k, seed, j, episode_seed(args.cohort_seed, k, seed, j))
                for k in range(args.subjects) for seed in seeds
                for j in range(args.eval_states)]
    arms = {algo: [] for algo in algos}
    arms["random"] = []
    arms["heuristic"] = []

    def tir_of(policy, sub, initial, ep_seed):
        results = rollout(fresh_env(sub), initial, ep_seed, env_policy(policy))
        g = np.concatenate([r.forecast.values for r in results])
        return glycemic_summary(g)

    summaries = {name: [] for name in arms}
    for k, seed, j, ep_seed in episodes:
        sub = subjects[k]
        initial = sub["eval_states"][j]
        summaries["random"].append(tir_of(RandomPolicy(ep_seed), sub,
                                          initial, ep_seed))
        summaries["heuristic"].append(tir_of(HeuristicPolicy(ep_seed), sub,
                                             initial, ep_seed))
        for algo in algos:
            summaries[algo].append(tir_of(policies[(algo, k, seed)], sub,
                                          initial, ep_seed))

    random_tir = np.array([s.tir_pct for s in summaries["random"]])
    rows = []
    raw_p = {}
    for name, summ in summaries.items():
        tir = np.array([s.tir_pct for s in summ])
        tbr = np.array([s.tbr_pct for s in summ])
        row = {"arm": name, "episodes": len(summ),
               "tir_mean": float(tir.mean()), "tir_sd": float(tir.std()),
               "tbr_mean": float(tbr.mean()), "tar_mean":
               float(np.mean([s.tar_pct for s in summ]))}
        if name != "random":
            try:
                res = wilcoxon_signed_rank(tir, random_tir,
                                           alternative="greater")
                row["p_vs_random"] = res.p_value
                raw_p[name] = res.p_value
            except MetricError as exc:
                row["p_vs_random"] = None
                row["p_error"] = str(exc)
        rows.append(row)

    if raw_p:
        adjusted = holm_bonferroni(list(raw_p.values()))
        for name, adj in zip(raw_p, adjusted):
            next(r for r in rows if r["arm"] == name)["holm_p"] = float(adj)

    report = {
        "config": {k: v for k, v in vars(args).items()},
        "episodes": len(episodes),
        "arms": rows,
        "runtime_s": time.perf_counter() - t_start,
    }
    out_path = out_dir / "benchmark.json"
    out_path.write_text(json.dumps(report, indent=2))

    print(f"\n{'arm':<12} {'TIR':>8} {'sd':>7} {'TBR':>7} {'TAR':>7} "
          f"{'p_vs_rand':>10} {'holm':>8}")
    for row in rows:
        p = row.get("p_vs_random")
        holm = row.get("holm_p")
        print(f"{row['arm']:<12} {row['tir_mean']:>8.2f} {row['tir_sd']:>7.2f} "
              f"{row['tbr_mean']:>7.2f} {row['tar_mean']:>7.2f} "
              f"{'-' if p is None else format(p, '>10.2e')} "
              f"{'-' if holm is None else format(holm, '>8.2e')}")
    print(f"\nwrote {out_path} ({report['runtime_s']:.0f}s total)")


if __name__ == "__main__":
    main()
