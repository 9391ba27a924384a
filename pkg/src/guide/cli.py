"""Pipeline driver: synthesize data, ingest logs, train and evaluate
policies, and serve the what-if console.

Every command drops its artifacts under ``<out>/<run-id>/``.  The run id
defaults to a digest of the semantically relevant arguments, so rerunning
the same command points at the same directory; an existing non-empty run
directory is refused unless ``--force`` is passed.  All commands except
``serve`` are deterministic given (arguments, config file, seeds).

A JSON config file (``--config``) can supply any long-option value; flags
given on the command line win.  Agent hyperparameter overrides come from
the config file's ``"agent"`` object and/or repeated ``--set key=value``.

Exit codes: 0 success, 1 user error (bad arguments, bad data, missing
paths), 2 internal fault (training divergence, unexpected errors).

Store layouts::

    fixtures run:  S01.csv ... surrogate_params.json
    ingest run:    records/<id>.json  splits/<id>.json  [surrogate_params.json]
    train run:     buffers/<id>.buf
                   checkpoints/<algo>/<id>/seed<k>/{policy/,curves.csv,config.json}
    evaluate run:  reports/<id>.json  cohort_summary.json
                   trajectories/<policy>/<id>.jsonl
                   plots/trajectory_<policy>_<id>.csv  plots/tir_bars.csv
                   compare/wilcoxon_holm.json          (with --compare)
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import shutil
import socket
import sys
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agents import (
    HeuristicPolicy,
    RandomPolicy,
    ReplayBuffer,
    TrainingDivergedError,
    build_offline_buffer,
    default_config,
    train,
)
from .agents.training import OFFLINE_ALGORITHMS, load_policy
from .core import ActionType, decode_action
from .data import (
    DataError,
    SubjectRecord,
    SplitPlan,
    build_initial_states,
    ingest_csv,
    make_split,
)
from .env import GlucoseEnv, step_result_to_dict
from .fixtures import simulate_subject, write_subject_csv
from .metrics import (
    MetricError,
    ProfileEvent,
    behavioral_profile,
    cosine_similarity,
    glycemic_summary,
    holm_bonferroni,
    mean_profile,
    mrd,
    pnd,
    wilcoxon_signed_rank,
)
from .predictor import SurrogateParams, SurrogatePredictor, fit_autoregressive
from .reward import load_reward_config
from .service import PolicyCatalog, SessionStore, SubjectAssets, run_server

EXIT_OK, EXIT_USER, EXIT_FAULT = 0, 1, 2

ALGO_BY_FLAG = {
    "td3-bc": "td3bc",
    "cql-bc": "cqlbc",
    "sac-offline": "sac_offline",
    "sac-online": "sac_online",
    "ppo": "ppo",
    "random": "random",
}
TRAIN_CHOICES = tuple(sorted(ALGO_BY_FLAG))
EVAL_CHOICES = tuple(sorted([*ALGO_BY_FLAG, "heuristic"]))
PREDICTOR_MODES = ("surrogate", "autoregressive")


class CliError(Exception):
    """User-facing failure; message to stderr, exit code 1."""


@dataclass(frozen=True)
class RunConfig:
    """Validated inputs a train or evaluate run operates on."""

    subjects: tuple[str, ...]
    algorithm: str | None
    seeds: tuple[int, ...]
    data_dir: Path
    out_dir: Path
    model_dir: Path | None
    predictor_mode: str
    reward_config_path: Path | None
    agent_overrides: dict

    def validate(self) -> None:
        if not self.seeds:
            raise CliError("seed list is empty")
        if not self.data_dir.is_dir():
            raise CliError(f"data directory not found: {self.data_dir}")
        if not (self.data_dir / "records").is_dir():
            raise CliError(f"{self.data_dir} is not an ingested store "
                           "(no records/ directory); run `guide ingest` first")
        if self.model_dir is not None and not self.model_dir.is_dir():
            raise CliError(f"model directory not found: {self.model_dir}")
        if self.reward_config_path is not None \
                and not self.reward_config_path.is_file():
            raise CliError(
                f"reward config not found: {self.reward_config_path}")
        if self.predictor_mode not in PREDICTOR_MODES:
            raise CliError(f"predictor mode {self.predictor_mode!r} not in "
                           f"{PREDICTOR_MODES}")


# -- small shared helpers -----------------------------------------------------

def parse_seeds(text: str) -> tuple[int, ...]:
    """``0..4`` (inclusive), ``1,3,5``, or any comma mix of both."""
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo_text, hi_text = part.split("..", 1)
            try:
                lo, hi = int(lo_text), int(hi_text)
            except ValueError:
                raise CliError(f"bad seed range {part!r}") from None
            if hi < lo:
                raise CliError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            try:
                seeds.append(int(part))
            except ValueError:
                raise CliError(f"bad seed {part!r}") from None
    if not seeds:
        raise CliError("seed list is empty")
    return tuple(dict.fromkeys(seeds))  # de-dup, order kept


def stable_run_id(command: str, relevant: dict) -> str:
    blob = json.dumps(relevant, sort_keys=True, default=str)
    return f"{command}-{hashlib.sha1(blob.encode()).hexdigest()[:10]}"


def prepare_run_dir(out_base: str, run_id: str, force: bool) -> Path:
    run_dir = Path(out_base) / run_id
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise CliError(f"output directory {run_dir} already has content; "
                           "pass --force to replace it")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def subject_key(name: str) -> int:
    """Stable per-subject integer for seeding behavior policies and
    buffers, independent of process or run."""
    return zlib.crc32(name.encode()) & 0x7FFFFFFF


def episode_seed(eval_seed: int, initial_index: int) -> int:
    return int(np.random.SeedSequence(
        [eval_seed, initial_index]).generate_state(1)[0])


def parse_overrides(pairs, config_agent: dict | None) -> dict:
    """Merge config-file agent settings with --set pairs; --set wins."""
    overrides = dict(config_agent or {})
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set needs key=value, got {pair!r}")
        key, text = pair.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        overrides[key.strip()] = value
    return overrides


# -- data store access ---------------------------------------------------------

def load_subject(data_dir: Path, subject: str):
    record_path = data_dir / "records" / f"{subject}.json"
    if not record_path.is_file():
        raise CliError(f"no record for subject {subject!r} in {data_dir}")
    record = SubjectRecord.load(record_path)
    split_path = data_dir / "splits" / f"{subject}.json"
    if split_path.is_file():
        with open(split_path) as fh:
            split = SplitPlan.from_dict(json.load(fh))
    else:
        split = make_split(record)
    return record, split


def store_subjects(data_dir: Path, requested: str | None) -> tuple[str, ...]:
    available = sorted(p.stem for p in (data_dir / "records").glob("*.json"))
    if not available:
        raise CliError(f"no records in {data_dir}")
    if not requested or requested == "all":
        return tuple(available)
    chosen = tuple(s.strip() for s in requested.split(",") if s.strip())
    missing = [s for s in chosen if s not in available]
    if missing:
        raise CliError(f"unknown subjects {missing}; store has {available}")
    return chosen


def load_params_map(data_dir: Path) -> dict:
    path = data_dir / "surrogate_params.json"
    if not path.is_file():
        return {}
    with open(path) as fh:
        return {name: SurrogateParams.from_dict(d)
                for name, d in json.load(fh).items()}


def build_env(record, split, mode: str, params_map: dict,
              ridge: float, reward_cfg) -> GlucoseEnv:
    if mode == "surrogate":
        params = params_map.get(record.subject_id, SurrogateParams())
        predictor = SurrogatePredictor(params)
        basal = params.basal_rate
    else:
        predictor = fit_autoregressive(record, split.predictor_train, ridge)
        basal = float(np.median(record.basal))
    return GlucoseEnv(predictor, reward=reward_cfg, basal_rate=basal)


def eval_initial_states(record, split, count: int):
    """Evaluation windows come from the held-out tail; short tails (tiny
    fixture records) fall back to the RL training range with a warning."""
    try:
        return build_initial_states(record, split.rl_eval, count)
    except DataError:
        print(f"note: {record.subject_id}: eval range too short for a "
              "window, using the training range", file=sys.stderr)
        return build_initial_states(record, split.rl_train, count)


def load_checkpoint_policy(ckpt_dir: Path, seed: int):
    meta_path = ckpt_dir / "policy" / "meta.json"
    if not meta_path.is_file():
        raise CliError(f"missing checkpoint: {ckpt_dir}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta["algorithm"] == "random":
        return RandomPolicy(seed)
    return load_policy(ckpt_dir / "policy")


# -- fixtures -------------------------------------------------------------------

def cmd_fixtures(args) -> int:
    count, days, seed = args.subjects, args.days, args.seed
    if count < 1:
        raise CliError("need at least one subject")
    run_id = args.run_id or stable_run_id(
        "fixtures", {"subjects": count, "days": days, "seed": seed})
    run_dir = prepare_run_dir(args.out, run_id, args.force)
    params_map = {}
    for k in range(count):
        sid = f"S{k + 1:02d}"
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        params = SurrogateParams.sample(rng)
        rec_seed = int(np.random.SeedSequence([seed, k, 1]).generate_state(1)[0])
        record = simulate_subject(sid, days=days, seed=rec_seed, params=params)
        write_subject_csv(record, run_dir / f"{sid}.csv")
        params_map[sid] = params.to_dict()
    with open(run_dir / "surrogate_params.json", "w") as fh:
        json.dump(params_map, fh, indent=2, sort_keys=True)
    print(f"wrote {count} subject logs ({days} days each) to {run_dir}")
    return EXIT_OK


# -- ingest ---------------------------------------------------------------------

def cmd_ingest(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise CliError(f"data directory not found: {data_dir}")
    csv_paths = sorted(data_dir.glob("*.csv"))
    if not csv_paths:
        raise CliError(f"no CSV files in {data_dir}")
    run_id = args.run_id or stable_run_id(
        "ingest", {"data": str(data_dir), "strict": args.strict})
    run_dir = prepare_run_dir(args.out, run_id, args.force)
    (run_dir / "records").mkdir()
    (run_dir / "splits").mkdir()

    failures = 0
    for path in csv_paths:
        try:
            record = ingest_csv(path, subject_id=path.stem,
                                strict=args.strict)
            split = make_split(record)
        except DataError as exc:
            print(f"{path.name}: {exc}", file=sys.stderr)
            failures += 1
            continue
        record.save(run_dir / "records" / f"{record.subject_id}.json")
        with open(run_dir / "splits" / f"{record.subject_id}.json", "w") as fh:
            json.dump(split.to_dict(), fh, indent=2)

    params_src = data_dir / "surrogate_params.json"
    if params_src.is_file():
        shutil.copy(params_src, run_dir / "surrogate_params.json")

    ok = len(csv_paths) - failures
    print(f"ingested {ok}/{len(csv_paths)} subject logs into {run_dir}")
    return EXIT_USER if failures else EXIT_OK


# -- train ----------------------------------------------------------------------

def _train_job(payload: dict) -> dict:
    """One fully isolated (subject, seed) training job; must stay
    picklable for the process pool."""
    subject, seed = payload["subject"], payload["seed"]
    try:
        data_dir = Path(payload["data_dir"])
        record, split = load_subject(data_dir, subject)
        reward_cfg = (load_reward_config(payload["reward_path"])
                      if payload["reward_path"] else None)
        config = default_config(payload["algorithm"],
                                **payload["overrides"])
        buffer = None
        env = None
        initials = None
        if payload["buffer_path"]:
            buffer = ReplayBuffer.load(payload["buffer_path"])
        else:
            env = build_env(record, split, payload["predictor_mode"],
                            load_params_map(data_dir), payload["ridge"],
                            reward_cfg)
            initials = build_initial_states(record, split.rl_train,
                                            payload["train_states"])
        train(config, buffer=buffer, env=env, initial_states=initials,
              seed=seed, out_dir=payload["ckpt_dir"])
        return {"subject": subject, "seed": seed, "status": "ok"}
    except TrainingDivergedError as exc:
        return {"subject": subject, "seed": seed, "status": "diverged",
                "error": str(exc)}
    except Exception as exc:  # surfaced as an internal fault by the driver
        return {"subject": subject, "seed": seed, "status": "error",
                "error": f"{type(exc).__name__}: {exc}"}


def _write_random_checkpoint(ckpt_dir: Path, seed: int) -> None:
    """The random baseline as a checkpoint artifact, so evaluate and serve
    treat it like any trained policy."""
    policy_dir = ckpt_dir / "policy"
    policy_dir.mkdir(parents=True, exist_ok=True)
    with open(policy_dir / "meta.json", "w") as fh:
        json.dump({"algorithm": "random", "feature_stride": 1,
                   "hidden_sizes": [], "networks": []}, fh, indent=2)
    with open(ckpt_dir / "config.json", "w") as fh:
        json.dump({"algorithm": "random", "seed": seed}, fh, indent=2)
    (ckpt_dir / "curves.csv").write_text("step\n")


def cmd_train(args) -> int:
    seeds = parse_seeds(args.seeds)
    data_dir = Path(args.data)
    run_config = RunConfig(
        subjects=(),  # filled after the store is read
        algorithm=args.algo,
        seeds=seeds,
        data_dir=data_dir,
        out_dir=Path(args.out),
        model_dir=None,
        predictor_mode=args.predictor,
        reward_config_path=Path(args.reward_config)
        if args.reward_config else None,
        agent_overrides=parse_overrides(args.set, args.config_agent),
    )
    run_config.validate()
    subjects = store_subjects(data_dir, args.subject)

    algorithm = ALGO_BY_FLAG[args.algo]
    run_id = args.run_id or stable_run_id("train", {
        "algo": args.algo, "subjects": subjects, "seeds": seeds,
        "data": str(data_dir), "predictor": args.predictor,
        "overrides": run_config.agent_overrides,
        "buffer_size": args.buffer_size, "train_states": args.train_states,
        "reward": args.reward_config, "ridge": args.ridge,
    })
    run_dir = prepare_run_dir(args.out, run_id, args.force)

    if algorithm == "random":
        for subject in subjects:
            for seed in seeds:
                _write_random_checkpoint(
                    run_dir / "checkpoints" / args.algo / subject
                    / f"seed{seed}", seed)
        print(f"wrote {len(subjects) * len(seeds)} random-policy "
              f"checkpoints to {run_dir}")
        return EXIT_OK

    # validate the hyperparameter overrides before any heavy lifting
    default_config(algorithm, **run_config.agent_overrides)

    reward_cfg = (load_reward_config(run_config.reward_config_path)
                  if run_config.reward_config_path else None)
    params_map = load_params_map(data_dir)
    offline = algorithm in OFFLINE_ALGORITHMS

    jobs = []
    for subject in subjects:
        record, split = load_subject(data_dir, subject)
        buffer_path = None
        if offline:
            # One frozen buffer per subject, shared read-only by each
            # seed's job; the behavior policy seed is a fixed function of
            # the subject name so reruns rebuild the same file.
            buffer_path = run_dir / "buffers" / f"{subject}.buf"
            if not buffer_path.exists():
                buffer_path.parent.mkdir(parents=True, exist_ok=True)
                env = build_env(record, split, args.predictor, params_map,
                                args.ridge, reward_cfg)
                initials = build_initial_states(record, split.rl_train,
                                                args.train_states)
                buffer = build_offline_buffer(
                    env, initials, HeuristicPolicy(subject_key(subject)),
                    seed=subject_key(subject) % 100_000,
                    target_size=args.buffer_size, subject_id=subject)
                buffer.save(buffer_path)
        for seed in seeds:
            jobs.append({
                "subject": subject,
                "seed": seed,
                "algorithm": algorithm,
                "overrides": run_config.agent_overrides,
                "data_dir": str(data_dir),
                "predictor_mode": args.predictor,
                "ridge": args.ridge,
                "reward_path": str(run_config.reward_config_path)
                if run_config.reward_config_path else None,
                "buffer_path": str(buffer_path) if buffer_path else None,
                "train_states": args.train_states,
                "ckpt_dir": str(run_dir / "checkpoints" / args.algo
                                / subject / f"seed{seed}"),
            })

    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            outcomes = list(pool.map(_train_job, jobs))
    else:
        outcomes = [_train_job(job) for job in jobs]

    failures = 0
    for outcome in outcomes:
        tag = f"{outcome['subject']}/seed{outcome['seed']}"
        if outcome["status"] == "ok":
            print(f"trained {args.algo} {tag}")
        else:
            failures += 1
            print(f"{outcome['status']}: {tag}: {outcome['error']}",
                  file=sys.stderr)
    print(f"{len(outcomes) - failures}/{len(outcomes)} jobs finished; "
          f"checkpoints under {run_dir / 'checkpoints'}")
    return EXIT_FAULT if failures else EXIT_OK


# -- evaluate -------------------------------------------------------------------

def run_episode(env, initial, policy, seed: int):
    """Roll one 24-decision day; returns (decoded action, StepResult) pairs."""
    state = env.reset(initial, seed)
    steps = []
    while not state.done:
        raw = np.asarray(policy.act(state.window), dtype=np.float64)
        result = env.step(state, raw)
        steps.append((decode_action(raw), result))
        state = result.next_state
    return steps


def episode_glucose(steps) -> np.ndarray:
    return np.concatenate([r.forecast.values for _, r in steps])


def episode_profile(steps):
    events = []
    for k, (action, _) in enumerate(steps):
        when = k + action.slot / 12.0
        if action.action_type == ActionType.EAT:
            events.append(ProfileEvent("carb", when, action.carb_amount))
        elif action.action_type == ActionType.INJECT:
            events.append(ProfileEvent("bolus", when, action.insulin_amount))
    return behavioral_profile(events, days=1.0)


def record_profile(record):
    """The subject's own logged behavior, the reference the agent profile
    is compared against."""
    events = []
    hours = np.arange(record.n_ticks) / 12.0
    for tick in np.flatnonzero(record.carbs > 0):
        events.append(ProfileEvent("carb", float(hours[tick]),
                                   float(record.carbs[tick])))
    for tick in np.flatnonzero(record.bolus > 0):
        events.append(ProfileEvent("bolus", float(hours[tick]),
                                   float(record.bolus[tick])))
    return behavioral_profile(events, days=record.n_ticks / 288.0)


def make_eval_policy(flag: str, seed: int, model_dir: Path | None,
                     subject: str):
    if flag == "random":
        return RandomPolicy(seed)
    if flag == "heuristic":
        return HeuristicPolicy(seed)
    if model_dir is None:
        raise CliError(f"policy {flag!r} needs --models pointing at a "
                       "train run directory")
    return load_checkpoint_policy(
        model_dir / "checkpoints" / flag / subject / f"seed{seed}", seed)


def similarity_block(agent_profile, reference_profile) -> dict:
    a, r = agent_profile.as_vector(), reference_profile.as_vector()
    block = {"cosine": cosine_similarity(a, r)}
    try:
        block["mrd"] = mrd(a, r)
        block["pnd"] = pnd(a, r)
    except MetricError as exc:
        # A reference with no logged meals or boluses cannot anchor the
        # relative measures; surfacing the exclusion beats silently
        # skipping the subject.
        block["mrd"] = None
        block["pnd"] = None
        block["excluded"] = str(exc)
    return block


def write_trajectory_csv(path: Path, steps) -> None:
    """One plot-ready day: per-tick glucose plus event magnitudes."""
    glucose = episode_glucose(steps)
    carbs = np.zeros(glucose.size)
    bolus = np.zeros(glucose.size)
    for k, (_, result) in enumerate(steps):
        for event in result.applied_events:
            tick = 12 * k + event.slot
            if event.kind == "carb":
                carbs[tick] += event.magnitude
            else:
                bolus[tick] += event.magnitude
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tick", "minute", "glucose", "carbs_g", "bolus_u"])
        for t in range(glucose.size):
            writer.writerow([t, 5 * t, f"{glucose[t]:.4f}",
                             f"{carbs[t]:g}", f"{bolus[t]:g}"])


def cmd_evaluate(args) -> int:
    policies = list(args.compare) if args.compare else [args.policy]
    if not policies or policies[0] is None:
        raise CliError("pass --policy NAME or --compare NAME NAME ...")
    unknown = [p for p in policies if p not in EVAL_CHOICES]
    if unknown:
        raise CliError(f"unknown policies {unknown}; choose from "
                       f"{sorted(EVAL_CHOICES)}")
    if len(set(policies)) != len(policies):
        raise CliError("--compare names must be distinct")

    seeds = parse_seeds(args.seeds)
    data_dir = Path(args.data)
    model_dir = Path(args.models) if args.models else None
    run_config = RunConfig(
        subjects=(), algorithm=None, seeds=seeds, data_dir=data_dir,
        out_dir=Path(args.out), model_dir=model_dir,
        predictor_mode=args.predictor,
        reward_config_path=Path(args.reward_config)
        if args.reward_config else None,
        agent_overrides={},
    )
    run_config.validate()
    subjects = store_subjects(data_dir, args.subject)

    run_id = args.run_id or stable_run_id("evaluate", {
        "policies": policies, "subjects": subjects, "seeds": seeds,
        "data": str(data_dir), "models": args.models,
        "initial_states": args.initial_states,
        "predictor": args.predictor, "reward": args.reward_config,
        "ridge": args.ridge,
    })
    run_dir = prepare_run_dir(args.out, run_id, args.force)
    (run_dir / "reports").mkdir()
    (run_dir / "plots").mkdir()

    reward_cfg = (load_reward_config(run_config.reward_config_path)
                  if run_config.reward_config_path else None)
    params_map = load_params_map(data_dir)

    # tir_samples[policy] is ordered by (subject, seed, initial) so the
    # pairwise tests below compare identical episodes.
    tir_samples: dict[str, list[float]] = {p: [] for p in policies}
    metric_samples: dict[str, dict[str, list[float]]] = {
        p: {m: [] for m in ("tir_pct", "tar_pct", "tbr_pct", "cv_pct")}
        for p in policies}
    reports: dict[str, dict] = {
        s: {"schema_version": 1, "subject": s, "policies": {}}
        for s in subjects}
    bars_rows = []

    for subject in subjects:
        record, split = load_subject(data_dir, subject)
        env = build_env(record, split, args.predictor, params_map,
                        args.ridge, reward_cfg)
        initials = eval_initial_states(record, split, args.initial_states)
        reference = record_profile(record)

        for flag in policies:
            traj_dir = run_dir / "trajectories" / flag
            traj_dir.mkdir(parents=True, exist_ok=True)
            profiles = []
            per_metric = {m: [] for m in ("tir_pct", "tar_pct",
                                          "tbr_pct", "cv_pct")}
            first_episode = None
            with open(traj_dir / f"{subject}.jsonl", "w") as traj:
                episode_index = 0
                for seed in seeds:
                    policy = make_eval_policy(flag, seed, model_dir, subject)
                    for i, initial in enumerate(initials):
                        steps = run_episode(env, initial, policy,
                                            episode_seed(seed, i))
                        if first_episode is None:
                            first_episode = steps
                        summary = glycemic_summary(episode_glucose(steps))
                        for m, v in summary.as_dict().items():
                            per_metric[m].append(v)
                        profiles.append(episode_profile(steps))
                        for action, result in steps:
                            line = step_result_to_dict(result)
                            line.update(episode=episode_index,
                                        eval_seed=seed, initial_state=i,
                                        action={
                                            "type": action.action_type.name,
                                            "carbs": action.carb_amount,
                                            "insulin": action.insulin_amount,
                                            "slot": action.slot,
                                        })
                            traj.write(json.dumps(line) + "\n")
                        episode_index += 1

            agent_profile = mean_profile(profiles)
            glycemic = {
                m: {"mean": float(np.mean(vals)), "sd": float(np.std(vals))}
                for m, vals in per_metric.items()}
            reports[subject]["policies"][flag] = {
                "episodes": episode_index,
                "glycemic": glycemic,
                "profile_agent": dict(zip(
                    ("meal_freq", "avg_carbs", "bolus_freq", "avg_bolus",
                     "meal_gap", "bolus_gap"),
                    agent_profile.as_vector().tolist())),
                "profile_reference": dict(zip(
                    ("meal_freq", "avg_carbs", "bolus_freq", "avg_bolus",
                     "meal_gap", "bolus_gap"),
                    reference.as_vector().tolist())),
                "similarity": similarity_block(agent_profile, reference),
            }
            tir_samples[flag].extend(per_metric["tir_pct"])
            for m in per_metric:
                metric_samples[flag][m].extend(per_metric[m])
            bars_rows.append([flag, subject,
                              glycemic["tir_pct"]["mean"],
                              glycemic["tir_pct"]["sd"]])
            write_trajectory_csv(
                run_dir / "plots" / f"trajectory_{flag}_{subject}.csv",
                first_episode)

    for subject in subjects:
        with open(run_dir / "reports" / f"{subject}.json", "w") as fh:
            json.dump(reports[subject], fh, indent=2)

    cohort = {
        "schema_version": 1,
        "episodes_per_policy": len(next(iter(tir_samples.values()))),
        "policies": {
            flag: {m: {"mean": float(np.mean(vals)),
                       "sd": float(np.std(vals))}
                   for m, vals in metric_samples[flag].items()}
            for flag in policies},
    }
    with open(run_dir / "cohort_summary.json", "w") as fh:
        json.dump(cohort, fh, indent=2)

    with open(run_dir / "plots" / "tir_bars.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "subject", "tir_mean", "tir_sd"])
        writer.writerows(bars_rows)

    if len(policies) >= 2:
        write_compare_matrix(run_dir, policies, tir_samples)

    print(f"evaluated {', '.join(policies)} on {len(subjects)} subjects; "
          f"reports under {run_dir}")
    return EXIT_OK


def write_compare_matrix(run_dir: Path, policies, tir_samples) -> None:
    """Pairwise signed-rank tests on per-episode TIR, with the usual
    step-down multiplicity correction across all pairs."""
    pairs = [(a, b) for i, a in enumerate(policies)
             for b in policies[i + 1:]]
    raw_p, rows = [], []
    for a, b in pairs:
        try:
            result = wilcoxon_signed_rank(tir_samples[a], tir_samples[b])
            rows.append({"a": a, "b": b, "statistic": result.statistic,
                         "raw_p": result.p_value, "n_used": result.n_used,
                         "method": result.method})
            raw_p.append(result.p_value)
        except MetricError as exc:
            # identical or too-few paired episodes cannot anchor the test;
            # record why instead of failing the whole report
            rows.append({"a": a, "b": b, "error": str(exc)})
    if raw_p:
        adjusted = iter(holm_bonferroni(raw_p).tolist())
        for row in rows:
            if "raw_p" in row:
                row["holm_p"] = next(adjusted)
    (run_dir / "compare").mkdir(exist_ok=True)
    with open(run_dir / "compare" / "wilcoxon_holm.json", "w") as fh:
        json.dump({"metric": "tir_pct", "policies": list(policies),
                   "pairs": rows}, fh, indent=2)


# -- serve ----------------------------------------------------------------------

def discover_checkpoint_policies(model_dir: Path) -> dict:
    """Every saved actor in a train run, named ``algo:subject:seedK``."""
    trained = {}
    root = model_dir / "checkpoints"
    if not root.is_dir():
        return trained
    for policy_dir in sorted(root.glob("*/*/seed*/policy")):
        seed_dir = policy_dir.parent
        with open(policy_dir / "meta.json") as fh:
            meta = json.load(fh)
        if meta["algorithm"] == "random":
            continue  # served via the baseline instead
        name = (f"{seed_dir.parent.parent.name}:"
                f"{seed_dir.parent.name}:{seed_dir.name}")
        trained[name] = load_policy(policy_dir)
    return trained


def cmd_serve(args) -> int:
    data_dir = Path(args.data)
    if not (data_dir / "records").is_dir():
        raise CliError(f"{data_dir} is not an ingested store")
    subjects = store_subjects(data_dir, args.subject)

    trained = {}
    if args.models:
        model_dir = Path(args.models)
        if not model_dir.is_dir():
            raise CliError(f"model directory not found: {model_dir}")
        trained = discover_checkpoint_policies(model_dir)
    baselines = tuple(args.policy or ())
    if not trained and not baselines:
        raise CliError("nothing to serve: no checkpoints under --models and "
                       "no baseline requested; pass --policy heuristic "
                       "and/or --policy random")

    reward_cfg = (load_reward_config(args.reward_config)
                  if args.reward_config else None)
    params_map = load_params_map(data_dir)
    assets = {}
    for subject in subjects:
        record, split = load_subject(data_dir, subject)
        env = build_env(record, split, args.predictor, params_map,
                        args.ridge, reward_cfg)
        assets[subject] = SubjectAssets(
            subject, env,
            eval_initial_states(record, split, args.initial_states),
            reference_profile=record_profile(record))

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((args.host, args.port))
    except OSError as exc:
        raise CliError(f"cannot bind {args.host}:{args.port}: {exc}") from exc
    finally:
        probe.close()

    session_dir = Path(args.session_dir)
    store = SessionStore(assets, PolicyCatalog(trained, baselines),
                         session_dir=session_dir,
                         idle_timeout=args.idle_timeout)
    print(f"serving {len(assets)} subjects, "
          f"{len(store.catalog.names())} policies on "
          f"{args.host}:{args.port}; sessions under {session_dir}")
    run_server(store, host=args.host, port=args.port)
    print("shut down; sessions flushed")
    return EXIT_OK


# -- argument plumbing ----------------------------------------------------------

class Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad arguments; here that is a user
    error, which the contract maps to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USER)


def add_common(parser, out_default="out"):
    parser.add_argument("--out", default=out_default,
                        help="base output directory (default %(default)s)")
    parser.add_argument("--run-id", default=None,
                        help="run directory name (default: derived from args)")
    parser.add_argument("--force", action="store_true",
                        help="replace an existing run directory")
    parser.add_argument("--config", default=None,
                        help="JSON config file; command-line flags win")


def add_env_options(parser):
    parser.add_argument("--predictor", default="surrogate",
                        choices=PREDICTOR_MODES,
                        help="forecast backend (default %(default)s)")
    parser.add_argument("--ridge", type=float, default=1.0,
                        help="ridge strength for the autoregressive fit")
    parser.add_argument("--reward-config", default=None,
                        help="JSON reward configuration file")


def build_parser() -> Parser:
    parser = Parser(prog="guide",
                    description="glucose decision-support workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", parents=[], help="synthesize subject logs")
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--days", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    add_common(p)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("ingest", help="parse subject CSVs into a record store")
    p.add_argument("--data", required=True, help="directory of subject CSVs")
    p.add_argument("--strict", action="store_true",
                   help="treat any gap over 15 minutes as an error")
    add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one algorithm per (subject, seed)")
    p.add_argument("--algo", required=True, choices=TRAIN_CHOICES)
    p.add_argument("--subject", default="all",
                   help="comma list of subjects, or 'all'")
    p.add_argument("--seeds", default="0..4",
                   help="e.g. 0..4 or 0,2,7 (default %(default)s)")
    p.add_argument("--data", required=True, help="ingested store directory")
    p.add_argument("--buffer-size", type=int, default=4800,
                   help="offline buffer transitions per subject")
    p.add_argument("--train-states", type=int, default=10,
                   help="initial windows drawn from the training range")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="agent hyperparameter override (repeatable)")
    p.add_argument("--parallel", type=int, default=1,
                   help="fan (subject, seed) jobs across N processes")
    add_env_options(p)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="roll evaluation episodes and report")
    p.add_argument("--policy", default=None, choices=EVAL_CHOICES)
    p.add_argument("--compare", nargs="+", default=None, metavar="POLICY",
                   help="evaluate several policies and write pairwise tests")
    p.add_argument("--subject", default="all")
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--initial-states", type=int, default=10)
    p.add_argument("--data", required=True, help="ingested store directory")
    p.add_argument("--models", default=None, help="train run directory")
    add_env_options(p)
    add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="host the what-if console API")
    p.add_argument("--data", required=True, help="ingested store directory")
    p.add_argument("--subject", default="all")
    p.add_argument("--models", default=None, help="train run directory")
    p.add_argument("--policy", action="append", metavar="NAME",
                   choices=PolicyCatalog.BASELINES,
                   help="expose a baseline policy (repeatable)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--initial-states", type=int, default=10)
    p.add_argument("--session-dir", default="guide-sessions")
    p.add_argument("--idle-timeout", type=float, default=3600.0)
    add_env_options(p)
    p.set_defaults(func=cmd_serve)

    return parser


def explicitly_set(argv) -> set[str]:
    """Dests the user actually typed, found by a shadow parse in which
    every option's default is suppressed."""
    shadow = build_parser()
    stack: list[argparse.ArgumentParser] = [shadow]
    while stack:
        p = stack.pop()
        p._defaults.clear()  # noqa: SLF001 - strip set_defaults entries
        for action in p._actions:
            action.default = argparse.SUPPRESS
            if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
                stack.extend(action.choices.values())
    try:
        return set(vars(shadow.parse_args(argv)))
    except SystemExit:
        return set()


def apply_config_file(args, explicit: set[str]) -> None:
    """Fill options the user did not type from the JSON config file."""
    args.config_agent = None
    path = getattr(args, "config", None)
    if not path:
        return
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object")
    for key, value in data.items():
        if key == "agent":
            if not isinstance(value, dict):
                raise CliError("config key 'agent' must be an object")
            args.config_agent = value
            continue
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise CliError(f"config key {key!r} is not an option of "
                           f"`guide {args.command}`")
        if dest not in explicit:
            setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USER
    try:
        apply_config_file(args, explicitly_set(argv))
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_OK
    except Exception:
        traceback.print_exc()
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
