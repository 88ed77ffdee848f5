"""Experiment orchestration: configs, the training loop, ablations and reports.

RNG split for a run seed ``s``: ``SeedSequence(s).spawn(3)`` gives the
simulator stream (one arrival seed per training and eval episode), the learner
stream (network init, exploration, replay sampling) and the context stream
(template draws). The mock chat client is seeded with ``s`` itself.

Log files are CSV with ``#``-prefixed metadata lines ahead of the header;
wall-clock timings go to a separate ``*.timing.csv`` so that logs are
bit-identical across reruns.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

from maestro import analytics
from maestro.architect import (
    Condition,
    ShapingState,
    combine,
    mark_generation,
    regenerate,
    reward_mode,
    should_regenerate,
)
from maestro.curriculum import (
    CurriculumEvent,
    CurriculumMode,
    DifficultyState,
    EventKind,
    generate_context,
    template_context,
    update_difficulty,
)
from maestro.grid_sim import GridNetwork, GridSimulator, TrafficContext, episode_metrics, fixed_time_policy
from maestro.llm import API_KEY_ENV, ChatClient, HttpChatClient, MockChatClient, RecordingClient, ReplayClient
from maestro.maddpg import MADDPG, TrainerConfig
from maestro.reward_lang import FeatureSampler, evaluate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODE_FOR = {Condition.A2: CurriculumMode.LLM_ADAPTIVE, Condition.A7: CurriculumMode.LLM_ADAPTIVE, Condition.A8: CurriculumMode.LLM}
SOURCE_FOR = {Condition.A2: "template", Condition.A7: "shaped", Condition.A8: "template"}
# Axes allowed to differ between conditions of one ablation.
ALLOWED_AXES = {"curriculum_mode", "reward_source"}
# Settings that identify a run rather than define it; excluded from manifests.
RUN_IDENTITY = {"condition", "seeds", "out_dir"}
# Return where the template reward places the midpoint of random and fixed-time
# control at d = 0.5 for this simulator (see the ``calibrate`` command).
CALIBRATED_TARGET = 25.0
FEATURE_RECORD_EVERY = 10
FEATURE_RECORD_KEEP = 2000

LOG_COLUMNS = (
    "episode",
    "seed",
    "condition",
    "difficulty",
    "training_return",
    "shaped_return",
    "eval_return",
    "throughput",
    "mean_travel_time",
    "mean_delay",
    "mean_wait",
    "mean_queue",
    "reward_mode",
    "curriculum_event",
    "regen_trigger",
    "nonfinite_llm",
)


class ConfigError(ValueError):
    pass


class ConfigDivergenceError(ConfigError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    condition: str = "A2"
    seeds: tuple[int, ...] = (200, 300, 400, 500)
    episodes: int = 200
    steps_per_episode: int = 360
    eval_cadence: int = 2
    grid_rows: int = 4
    grid_cols: int = 4
    initial_difficulty: float = 0.5
    target_return: float = CALIBRATED_TARGET
    final_window: tuple[int, int] | None = None
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    llm: str = "mock"
    llm_endpoint: str = ""
    llm_model: str = "mock"
    mock_invalid_rate: float = 0.0
    replay_path: str = ""
    record_path: str = ""
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        try:
            Condition(self.condition)
        except ValueError:
            raise ConfigError(f"condition must be one of A2, A7, A8, got {self.condition!r}") from None
        if self.eval_cadence < 1:
            raise ConfigError("eval_cadence must be >= 1")
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ConfigError("episodes and steps_per_episode must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.llm not in ("mock", "http", "replay"):
            raise ConfigError(f"llm must be mock, http or replay, got {self.llm!r}")
        if self.final_window is not None:
            start, stop = self.final_window
            if not 0 <= start < stop <= self.episodes:
                raise ConfigError(f"final_window {self.final_window} outside [0, {self.episodes}]")

    @property
    def curriculum_mode(self) -> CurriculumMode:
        return MODE_FOR[Condition(self.condition)]

    @property
    def reward_source(self) -> str:
        return SOURCE_FOR[Condition(self.condition)]

    @property
    def window(self) -> tuple[int, int]:
        if self.final_window is not None:
            return tuple(self.final_window)
        span = max(1, self.episodes // 10)
        return (self.episodes - span, self.episodes)

    def network(self) -> GridNetwork:
        return GridNetwork(rows=self.grid_rows, cols=self.grid_cols, episode_steps=self.steps_per_episode)

    @classmethod
    def desk(cls, **overrides) -> "ExperimentConfig":
        """Small profile for tests and smoke runs."""
        base = dict(grid_rows=2, grid_cols=2, episodes=20, trainer=TrainerConfig(batch_size=64))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "trainer" in data:
            try:
                data["trainer"] = TrainerConfig.from_dict(data["trainer"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"trainer: {exc}") from exc
        if "seeds" in data:
            data["seeds"] = tuple(int(s) for s in data["seeds"])
        if data.get("final_window") is not None:
            data["final_window"] = tuple(data["final_window"])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["seeds"] = list(self.seeds)
        out["trainer"] = self.trainer.to_dict()
        out["final_window"] = list(self.final_window) if self.final_window is not None else None
        return out

    def manifest_entry(self) -> dict:
        """Settings that define the experiment, with derived axes made explicit."""
        out = {k: v for k, v in self.to_dict().items() if k not in RUN_IDENTITY}
        out["curriculum_mode"] = self.curriculum_mode.value
        out["reward_source"] = self.reward_source
        return out


def config_hash(entry: Mapping) -> str:
    blob = json.dumps(entry, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def config_diff(a: Mapping, b: Mapping) -> set[str]:
    return {k for k in set(a) | set(b) if a.get(k) != b.get(k)}


def preflight(config: ExperimentConfig) -> None:
    """Fail before any training if the selected chat client cannot work."""
    if config.llm == "http":
        if not os.environ.get(API_KEY_ENV):
            raise ConfigError(f"--llm http needs the {API_KEY_ENV} environment variable")
        if not config.llm_endpoint:
            raise ConfigError("--llm http needs llm_endpoint in the config")
    elif config.llm == "replay" and not Path(config.replay_path).is_file():
        raise ConfigError(f"replay log not found: {config.replay_path!r}")


def make_client(config: ExperimentConfig, seed: int) -> ChatClient:
    if config.llm == "mock":
        client: ChatClient = MockChatClient(seed=seed, invalid_rate=config.mock_invalid_rate)
    elif config.llm == "http":
        client = HttpChatClient(config.llm_endpoint)
    else:
        client = ReplayClient(config.replay_path)
    if config.record_path:
        client = RecordingClient(client, config.record_path)
    return client


# ---------------------------------------------------------------- rollouts


@dataclass
class EpisodeRecord:
    episode: int
    seed: int
    condition: str
    difficulty: float
    training_return: float
    shaped_return: float
    eval_return: float | None
    throughput: int
    mean_travel_time: float | None
    mean_delay: float | None
    mean_wait: float | None
    mean_queue: float
    reward_mode: str
    curriculum_event: str
    regen_trigger: str
    nonfinite_llm: int = 0

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in LOG_COLUMNS]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rollout(
    sim: GridSimulator,
    context: TrafficContext,
    seed: int,
    policy: Callable[[np.ndarray], np.ndarray],
) -> tuple[float, list]:
    """One episode under ``policy``; returns (mean per-agent env return, metrics)."""
    obs = sim.reset(context, seed)
    total = 0.0
    records = []
    done = False
    while not done:
        obs, rewards, metrics, done = sim.step(policy(obs))
        total += float(rewards.mean())
        records.append(metrics)
    return total, records


def random_policy(n_agents: int, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
    return lambda obs: rng.integers(0, 4, n_agents)


def fixed_time(period: int, n_agents: int) -> Callable[[np.ndarray], np.ndarray]:
    it = fixed_time_policy(period, n_agents)
    return lambda obs: next(it)


def train_episode(
    agent: MADDPG,
    sim: GridSimulator,
    context: TrafficContext,
    seed: int,
    *,
    reward_fn: Callable[[np.ndarray, GridSimulator], np.ndarray] | None = None,
    on_step: Callable[[GridSimulator], None] | None = None,
) -> tuple[float, float, list]:
    """Exploring rollout with a learner update per step after warm-up.

    Returns (env return, training-reward return, step metrics), both returns
    as the sum over steps of the mean over agents.
    """
    obs = sim.reset(context, seed)
    env_total = train_total = 0.0
    records = []
    done = False
    while not done:
        actions = agent.select_actions(obs, explore=True)
        next_obs, r_env, metrics, done = sim.step(actions)
        r_train = reward_fn(r_env, sim) if reward_fn is not None else r_env
        agent.observe(obs, actions, r_train, next_obs, done)
        agent.maybe_update()
        if on_step is not None:
            on_step(sim)
        env_total += float(r_env.mean())
        train_total += float(np.mean(r_train))
        records.append(metrics)
        obs = next_obs
    agent.end_episode()
    return env_total, train_total, records


def greedy(agent: MADDPG) -> Callable[[np.ndarray], np.ndarray]:
    return lambda obs: agent.select_actions(obs, explore=False)


def train_fixed_difficulty(
    network: GridNetwork,
    d: float,
    episodes: int,
    seed: int,
    trainer: TrainerConfig | None = None,
) -> MADDPG:
    """Train on template contexts at a constant difficulty (learner sanity runs)."""
    sim_seq, agent_seq, ctx_seq = np.random.SeedSequence(seed).spawn(3)
    ep_seeds = sim_seq.generate_state(episodes)
    ctx_seeds = ctx_seq.generate_state(episodes)
    agent = MADDPG(network.n_agents, network.obs_dim, trainer, seed=int(agent_seq.generate_state(1)[0]))
    sim = GridSimulator(network)
    for ep in range(episodes):
        train_episode(agent, sim, template_context(d, int(ctx_seeds[ep])), int(ep_seeds[ep]))
    return agent


# ---------------------------------------------------------------- run_seed


def _stats(d: float, window_mean: float | None, summary) -> dict:
    out = {"difficulty": float(d)}
    if window_mean is not None:
        out["recent_mean_return"] = float(window_mean)
    if summary is not None:
        out["mean_queue"] = float(summary.mean_queue)
        if summary.mean_delay is not None:
            out["mean_delay"] = float(summary.mean_delay)
    return out


def run_seed(
    config: ExperimentConfig,
    seed: int,
    client: ChatClient | None = None,
    architect_log: list | None = None,
) -> Iterator[EpisodeRecord]:
    """Generate one EpisodeRecord per training episode.

    Reward-generation attempts (source text and validation outcome) are
    appended to ``architect_log`` when given.
    """
    torch.set_num_threads(1)
    condition = Condition(config.condition)
    net = config.network()
    sim = GridSimulator(net)
    eval_sim = GridSimulator(net)
    sim_seq, agent_seq, ctx_seq = np.random.SeedSequence(seed).spawn(3)
    train_seeds = sim_seq.generate_state(config.episodes)
    eval_seeds = sim_seq.spawn(1)[0].generate_state(config.episodes)
    ctx_rng = np.random.default_rng(ctx_seq)
    agent = MADDPG(net.n_agents, net.obs_dim, config.trainer, seed=int(agent_seq.generate_state(1)[0]))
    client = client if client is not None else make_client(config, seed)
    dstate = DifficultyState(d=config.initial_difficulty, target=config.target_return)
    shaping = ShapingState()
    sampler = FeatureSampler(seed=seed)
    context: TrafficContext | None = None
    event: CurriculumEvent | None = None
    last_summary = None

    for ep in range(config.episodes):
        d = dstate.d
        trigger = should_regenerate(shaping, d, ep, event)
        stats = _stats(d, event.window_mean if event else None, last_summary)
        if context is None or trigger is not None or (event is not None and event.kind is not EventKind.NONE):
            context = generate_context(
                d, config.curriculum_mode, stats, client, seed=int(ctx_rng.integers(2**31)), model=config.llm_model
            )
        if trigger is not None:
            if condition is Condition.A7:
                reports = regenerate(client, d, ep, stats, shaping, sampler=sampler, model=config.llm_model)
                if architect_log is not None:
                    architect_log.append(
                        {
                            "episode": ep,
                            "trigger": trigger.value,
                            "difficulty": d,
                            "attempts": [r.to_dict() for r in reports],
                            "env_only_fallback": shaping.env_only_fallback,
                        }
                    )
            else:
                mark_generation(shaping, d, ep)

        mode = reward_mode(condition, shaping)
        nonfinite = 0
        program = shaping.active_program if mode == "shaped" else None

        def shaped(r_env: np.ndarray, s: GridSimulator) -> np.ndarray:
            nonlocal nonfinite
            if program is None:
                return r_env
            out = np.empty_like(r_env)
            for i, fm in enumerate(s.features()):
                r_llm = evaluate(program, fm)
                if not math.isfinite(r_llm):
                    nonfinite += 1
                    r_llm = 0.0
                out[i] = combine(float(r_env[i]), r_llm, d, condition, shaping)
            return out

        def record_features(s: GridSimulator) -> None:
            if s.t % FEATURE_RECORD_EVERY == 0:
                sampler.record(s.features())

        env_ret, train_ret, records = train_episode(
            agent, sim, context, int(train_seeds[ep]), reward_fn=shaped, on_step=record_features
        )
        sampler.trim(FEATURE_RECORD_KEEP)
        summary = episode_metrics(records)

        eval_ret = None
        if ep % config.eval_cadence == 0:
            eval_ret, _ = rollout(eval_sim, context, int(eval_seeds[ep]), greedy(agent))

        event = update_difficulty(dstate, env_ret)
        last_summary = summary
        rec = EpisodeRecord(
            episode=ep,
            seed=seed,
            condition=condition.value,
            difficulty=d,
            training_return=env_ret,
            shaped_return=train_ret,
            eval_return=eval_ret,
            throughput=summary.throughput_total,
            mean_travel_time=summary.mean_travel_time,
            mean_delay=summary.mean_delay,
            mean_wait=summary.mean_wait,
            mean_queue=summary.mean_queue,
            reward_mode=mode,
            curriculum_event=event.kind.value,
            regen_trigger=trigger.value if trigger is not None else "",
            nonfinite_llm=nonfinite,
        )
        yield rec


def log_path(out_dir: str | Path, condition: str, seed: int) -> Path:
    return Path(out_dir) / condition / f"seed_{seed}.csv"


def _header_lines(config: ExperimentConfig, seed: int) -> list[str]:
    start, stop = config.window
    return [
        f"# schema_version={SCHEMA_VERSION}",
        f"# condition={config.condition}",
        f"# seed={seed}",
        f"# target_return={config.target_return!r}",
        f"# final_window={start},{stop}",
        f"# config_sha256={config_hash(config.manifest_entry())}",
    ]


@dataclass(frozen=True)
class SeedOutcome:
    condition: str
    seed: int
    path: Path
    ok: bool
    error: str = ""


def run_and_log(config: ExperimentConfig, seed: int, out_dir: str | Path | None = None) -> SeedOutcome:
    """Run one seed and write its CSV log; errors leave a diagnostic file."""
    out = Path(out_dir or config.out_dir)
    path = log_path(out, config.condition, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    timing = path.with_suffix(".timing.csv")
    err_path = path.with_suffix(".error.txt")
    if err_path.exists():
        err_path.unlink()
    architect_path = path.with_suffix(".architect.jsonl")
    architect_log: list = []
    try:
        with path.open("w", encoding="utf-8", newline="") as fh, timing.open("w", encoding="utf-8", newline="") as th:
            fh.write("\n".join(_header_lines(config, seed)) + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            twriter = csv.writer(th, lineterminator="\n")
            twriter.writerow(["episode", "wall_clock_s"])
            tick = time.perf_counter()
            for rec in run_seed(config, seed, architect_log=architect_log):
                writer.writerow(rec.row())
                now = time.perf_counter()
                twriter.writerow([rec.episode, f"{now - tick:.3f}"])
                tick = now
                fh.flush()
        if architect_log:
            architect_path.write_text(
                "".join(json.dumps(e, sort_keys=True) + "\n" for e in architect_log), encoding="utf-8"
            )
    except Exception as exc:  # one failing seed must not take down the others
        err_path.write_text(
            f"condition={config.condition} seed={seed}\n{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}",
            encoding="utf-8",
        )
        log.error("run %s/%d failed: %s", config.condition, seed, exc)
        return SeedOutcome(config.condition, seed, path, False, f"{type(exc).__name__}: {exc}")
    return SeedOutcome(config.condition, seed, path, True)


# ---------------------------------------------------------------- ablation


def check_controlled(configs: Sequence[ExperimentConfig]) -> dict:
    """Manifest for an ablation; raises if configs differ beyond permitted axes."""
    conditions = [c.condition for c in configs]
    if len(set(conditions)) != len(conditions):
        raise ConfigDivergenceError(f"duplicate conditions in ablation: {conditions}")
    seeds = {tuple(c.seeds) for c in configs}
    if len(seeds) != 1:
        raise ConfigDivergenceError("all conditions must share the same seed list")
    entries = {c.condition: c.manifest_entry() for c in configs}
    names = sorted(entries)
    diffs = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            diff = config_diff(entries[a], entries[b])
            extra = diff - ALLOWED_AXES
            if extra:
                raise ConfigDivergenceError(f"{a} vs {b} differ on non-ablated settings: {sorted(extra)}")
            diffs[f"{a} vs {b}"] = sorted(diff)
    return {
        "schema_version": SCHEMA_VERSION,
        "seeds": list(configs[0].seeds),
        "conditions": {
            name: {"config": entries[name], "sha256": config_hash(entries[name])} for name in names
        },
        "diffs": diffs,
    }


def run_ablation(
    configs: Sequence[ExperimentConfig], out_dir: str | Path, *, progress: Callable[[SeedOutcome], None] | None = None
) -> list[SeedOutcome]:
    """Run every (condition, seed) pair after verifying the ablation is controlled."""
    manifest = check_controlled(configs)
    for cfg in configs:
        preflight(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outcomes = []
    for cfg in sorted(configs, key=lambda c: c.condition):
        for seed in cfg.seeds:
            outcome = run_and_log(cfg, seed, out)
            outcomes.append(outcome)
            if progress is not None:
                progress(outcome)
    return outcomes


def ablation_configs(base: ExperimentConfig) -> list[ExperimentConfig]:
    return [replace(base, condition=c.value) for c in Condition]


# ---------------------------------------------------------------- reports


@dataclass
class SeedLog:
    condition: str
    seed: int
    meta: dict
    rows: list[dict]

    def series(self, column: str) -> dict[int, float]:
        return {int(r["episode"]): float(r[column]) for r in self.rows if r[column] != ""}


def read_log(path: str | Path) -> SeedLog:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        else:
            body.append(line)
    if meta.get("schema_version") != str(SCHEMA_VERSION):
        raise analytics.DataError(f"{path}: unsupported schema version {meta.get('schema_version')!r}")
    rows = list(csv.DictReader(io.StringIO("\n".join(body))))
    if not rows:
        raise analytics.DataError(f"{path}: no episode rows")
    return SeedLog(meta["condition"], int(meta["seed"]), meta, rows)


def read_logs(log_dir: str | Path) -> dict[str, list[SeedLog]]:
    paths = sorted(Path(log_dir).glob("*/seed_*.csv"))
    paths = [p for p in paths if not p.name.endswith(".timing.csv")]
    if not paths:
        raise analytics.DataError(f"no run logs under {log_dir}")
    out: dict[str, list[SeedLog]] = {}
    for p in paths:
        lg = read_log(p)
        out.setdefault(lg.condition, []).append(lg)
    for logs in out.values():
        logs.sort(key=lambda lg: lg.seed)
    return dict(sorted(out.items()))


def _num(x: float | None, digits: int = 2) -> str:
    return "n/a" if x is None else f"{x:.{digits}f}"


def _pct(x: float) -> str:
    return f"{100 * x:.0f}%"


def seed_summaries(logs: Sequence[SeedLog]) -> list[analytics.SeedSummary]:
    out = []
    for lg in logs:
        start, stop = (int(v) for v in lg.meta["final_window"].split(","))
        s = analytics.final_window_stats(lg.series("training_return"), (start, stop), seed=lg.seed)
        evals = lg.series("eval_return")
        if evals:
            eps = sorted(evals)
            ttt, t90 = analytics.learning_efficiency(
                [evals[e] for e in eps], float(lg.meta["target_return"]), s.mean, eps
            )
            s = replace(s, time_to_target=ttt, time_to_90pct=t90)
        out.append(s)
    return out


def emit_report(log_dir: str | Path, out_dir: str | Path | None = None, *, seed: int = 0) -> Path:
    """Write report.md and plot-data CSVs; output is a pure function of the logs."""
    groups = read_logs(log_dir)
    out = Path(out_dir) if out_dir is not None else Path(log_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    summaries = {cond: seed_summaries(logs) for cond, logs in groups.items()}
    baseline_name = "A2" if "A2" in summaries else next(iter(summaries))
    baseline_mean = float(np.mean([s.mean for s in summaries[baseline_name]]))

    lines = ["# Ablation report", "", f"Baseline for SR and risk metrics: {baseline_name}.", ""]
    lines += ["## Condition summary", "", "| Condition | Seeds | Mean ± SD | CV (%) | SR | Best | Worst |", "|---|---|---|---|---|---|---|"]
    cond_summary: dict[str, analytics.ConditionSummary | None] = {}
    for cond, seeds in summaries.items():
        if len(seeds) >= 2:
            cs = analytics.summarize_condition(cond, seeds, baseline_mean)
            cond_summary[cond] = cs
            lines.append(
                f"| {cond} | {len(seeds)} | {cs.mean:.2f} ± {cs.sd:.2f} | {_num(cs.cv_percent)} | "
                f"{_num(cs.sharpe)} | {cs.best:.2f} | {cs.worst:.2f} |"
            )
        else:
            cond_summary[cond] = None
            m = seeds[0].mean
            lines.append(f"| {cond} | 1 | {m:.2f} ± n/a | n/a | n/a | {m:.2f} | {m:.2f} |")

    seed_ids = sorted({s.seed for seeds in summaries.values() for s in seeds})
    lines += ["", "## Per-seed final-window means", ""]
    lines.append("| Condition | " + " | ".join(f"Seed {s}" for s in seed_ids) + " | Mean | SD | Range |")
    lines.append("|---" * (len(seed_ids) + 4) + "|")
    for cond, seeds in summaries.items():
        by_seed = {s.seed: s.mean for s in seeds}
        cells = [f"{by_seed[s]:.2f}" if s in by_seed else "---" for s in seed_ids]
        means = [s.mean for s in seeds]
        sd = _num(float(np.std(means, ddof=1))) if len(means) > 1 else "n/a"
        lines.append(
            f"| {cond} | " + " | ".join(cells) + f" | {np.mean(means):.2f} | {sd} | {max(means) - min(means):.2f} |"
        )

    lines += ["", "## Risk metrics", "", "| Condition | Sortino | VaR (5%) | Max deviation | Success rate |", "|---|---|---|---|---|"]
    for cond, cs in cond_summary.items():
        if cs is None:
            lines.append(f"| {cond} | n/a | n/a | n/a | n/a |")
        else:
            lines.append(
                f"| {cond} | {_num(cs.sortino)} | {cs.var5:.2f} | {cs.max_drawdown:.2f} | {_pct(cs.success_rate)} |"
            )

    lines += ["", "## Learning efficiency", "", "| Condition | Seed | Episodes to target | Episodes to 90% of final |", "|---|---|---|---|"]
    for cond, seeds in summaries.items():
        for s in seeds:
            lines.append(
                f"| {cond} | {s.seed} | {s.time_to_target if s.time_to_target is not None else 'never'} | "
                f"{s.time_to_90pct if s.time_to_90pct is not None else 'never'} |"
            )

    lines += ["", "## Pairwise comparisons", ""]
    names = list(summaries)
    pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1 :]]
    usable = [(a, b) for a, b in pairs if len(summaries[a]) >= 2 and len(summaries[b]) >= 2]
    if not usable:
        lines.append("No pairwise comparisons: fewer than two conditions with at least two seeds.")
    else:
        lines += [
            "| Pair | U | p | p (Bonferroni) | Cohen's d | 95% CI of mean difference |",
            "|---|---|---|---|---|---|",
        ]
        for k, (a, b) in enumerate(usable):
            rep = analytics.compare(
                f"{b} vs {a}",
                [s.mean for s in summaries[b]],
                [s.mean for s in summaries[a]],
                seed=seed + k,
                comparisons=len(usable),
            )
            kind = "exact" if rep.exact else "normal"
            lines.append(
                f"| {rep.label} | {rep.u:.1f} | {rep.p:.4f} ({kind}) | {rep.p_adjusted:.4f} | "
                f"{_num(rep.cohens_d)} | [{rep.ci_low:.2f}, {rep.ci_high:.2f}] |"
            )
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")

    _write_curves(groups, out / "learning_curves.csv", "eval_return")
    _write_curves(groups, out / "difficulty_curves.csv", "difficulty")
    with (out / "difficulty_trajectories.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "seed", "episode", "difficulty", "curriculum_event"])
        for cond, logs in groups.items():
            for lg in logs:
                for r in lg.rows:
                    w.writerow([cond, lg.seed, r["episode"], r["difficulty"], r["curriculum_event"]])
    with (out / "cv.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "cv_percent"])
        for cond, cs in cond_summary.items():
            w.writerow([cond, "" if cs is None or cs.cv_percent is None else f"{cs.cv_percent:.6f}"])
    return out / "report.md"


def _write_curves(groups: Mapping[str, Sequence[SeedLog]], path: Path, column: str) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "episode", "n_seeds", "mean", "band_low", "band_high"])
        for cond, logs in groups.items():
            series = [lg.series(column) for lg in logs]
            episodes = sorted(set.intersection(*(set(s) for s in series)))
            for ep in episodes:
                mean, lo, hi = analytics.mean_band([[s[ep]] for s in series])
                w.writerow([cond, ep, len(series), f"{mean[0]:.6f}", f"{lo[0]:.6f}", f"{hi[0]:.6f}"])


# ---------------------------------------------------------------- calibration


@dataclass(frozen=True)
class Calibration:
    d: float
    random_mean: float
    fixed_time_mean: float

    @property
    def suggested_target(self) -> float:
        return 0.5 * (self.random_mean + self.fixed_time_mean)


def calibrate(network: GridNetwork, d: float = 0.5, seeds: Iterable[int] = range(20), period: int = 10) -> Calibration:
    """Mean returns of random and fixed-time control at difficulty ``d``."""
    sim = GridSimulator(network)
    rand, fixed = [], []
    for s in seeds:
        ctx = template_context(d, s)
        rand.append(rollout(sim, ctx, s, random_policy(network.n_agents, np.random.default_rng(s)))[0])
        fixed.append(rollout(sim, ctx, s, fixed_time(period, network.n_agents))[0])
    return Calibration(d, float(np.mean(rand)), float(np.mean(fixed)))
