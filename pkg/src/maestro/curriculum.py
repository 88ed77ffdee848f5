"""Difficulty state machine and traffic-context generation."""

from __future__ import annotations

import enum
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from maestro.grid_sim import GridNetwork, GridSimulator, TrafficContext, episode_metrics, fixed_time_policy
from maestro.llm import ChatClient, ChatRequest, LLMError
from maestro.prompts import render

log = logging.getLogger(__name__)

D_MIN = 0.3
D_MAX = 1.0
DEFAULT_TARGET = 165.0
WINDOW = 5
PLATEAU_LIMIT = 15
INCREASE = 1.05
DECREASE = 0.90
TEMPLATE_TURNS = (0.6, 0.2, 0.2)
MAX_SCHEMA_RETRIES = 3


def clamp_difficulty(d: float) -> float:
    return min(max(d, D_MIN), D_MAX)


class EventKind(str, enum.Enum):
    NONE = "None"
    INCREASE = "Increase"
    DECREASE = "Decrease"
    PLATEAU_ESCAPE = "PlateauEscape"


class CurriculumMode(str, enum.Enum):
    TEMPLATE = "template"
    LLM_ADAPTIVE = "llm_adaptive"
    LLM = "llm"


@dataclass(frozen=True)
class CurriculumEvent:
    kind: EventKind
    d_before: float
    d_after: float
    episode: int
    window_mean: float | None = None


@dataclass
class DifficultyState:
    d: float = 0.5
    target: float = DEFAULT_TARGET
    plateau_limit: int = PLATEAU_LIMIT
    window: deque = field(default_factory=lambda: deque(maxlen=WINDOW))
    consec_above: int = 0
    episodes_since_change: int = 0
    episode: int = 0

    def __post_init__(self) -> None:
        if not D_MIN <= self.d <= D_MAX:
            raise ValueError(f"initial difficulty {self.d} outside [{D_MIN}, {D_MAX}]")

    @property
    def hi(self) -> float:
        return 1.05 * self.target

    @property
    def lo(self) -> float:
        return 0.95 * self.target


def update_difficulty(state: DifficultyState, episode_return: float) -> CurriculumEvent:
    """Feed one training-episode return into the state machine (mutates ``state``)."""
    if not math.isfinite(episode_return):
        raise ValueError(f"episode return must be finite, got {episode_return}")
    episode = state.episode
    state.episode += 1
    state.window.append(float(episode_return))
    d0 = state.d
    if len(state.window) < state.window.maxlen:
        state.episodes_since_change += 1
        return CurriculumEvent(EventKind.NONE, d0, d0, episode)

    avg = float(np.mean(state.window))
    state.consec_above = state.consec_above + 1 if avg > state.hi else 0
    if state.consec_above >= 2:
        kind, factor = EventKind.INCREASE, INCREASE
    elif avg < state.lo:
        kind, factor = EventKind.DECREASE, DECREASE
    elif state.episodes_since_change >= state.plateau_limit:
        kind, factor = EventKind.PLATEAU_ESCAPE, INCREASE
    else:
        state.episodes_since_change += 1
        return CurriculumEvent(EventKind.NONE, d0, d0, episode, avg)

    state.d = clamp_difficulty(d0 * factor)
    state.consec_above = 0
    state.episodes_since_change = 0
    return CurriculumEvent(kind, d0, state.d, episode, avg)


# ------------------------------------------------------------ context generation


def _balanced_asymmetry(spread: float, rng: np.random.Generator) -> tuple[float, float, float, float]:
    e = rng.uniform(-0.5, 0.5, 4)
    e -= e.mean()
    peak = np.abs(e).max()
    if peak > 0.5:
        e *= 0.5 / peak
    vals = 1.0 + spread * e
    vals *= 4.0 / vals.sum()
    return tuple(float(v) for v in vals)


def template_context(d: float, seed: int) -> TrafficContext:
    """Deterministic context map; imbalance across approaches grows with ``d``."""
    rng = np.random.default_rng(seed)
    return TrafficContext(
        base_arrival_rate=0.02 + d * 0.18,
        approach_asymmetry=_balanced_asymmetry(d, rng),
        turn_probs=TEMPLATE_TURNS,
        speed_factor=1.2 - 0.4 * d,
        difficulty_tag=d,
        noise_seed=seed,
    )


class ContextSchemaError(ValueError):
    pass


def _as_float(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ContextSchemaError(f"{name} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ContextSchemaError(f"{name} must be finite")
    return float(value)


def _normalize(values: Sequence[float], total: float, fallback: Sequence[float]) -> tuple[float, ...]:
    clipped = [max(v, 0.0) for v in values]
    s = sum(clipped)
    if s <= 0:
        return tuple(fallback)
    return tuple(total * v / s for v in clipped)


def extract_json(text: str) -> dict:
    """First JSON object in ``text`` (tolerates code fences and prose around it)."""
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        raise ContextSchemaError("response contains no JSON object")
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError as exc:
        raise ContextSchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ContextSchemaError("top-level JSON value must be an object")
    return obj


def context_from_response(
    text: str, d: float, seed: int, *, strict: bool
) -> TrafficContext:
    """Parse an Architect response into a clamped TrafficContext.

    ``strict`` requires every field to be present; otherwise missing fields
    come from the template map. Out-of-range values are always clamped.
    """
    obj = extract_json(text)
    base = template_context(d, seed)
    required = ("base_arrival_rate", "approach_asymmetry", "turn_probs", "speed_factor")
    missing = [k for k in required if k not in obj]
    if strict and missing:
        raise ContextSchemaError(f"missing fields {missing}")

    rate = _as_float(obj["base_arrival_rate"], "base_arrival_rate") if "base_arrival_rate" in obj else base.base_arrival_rate
    speed = _as_float(obj["speed_factor"], "speed_factor") if "speed_factor" in obj else base.speed_factor
    asym = base.approach_asymmetry
    if "approach_asymmetry" in obj:
        raw = obj["approach_asymmetry"]
        if isinstance(raw, dict):
            raw = [raw.get(k, 1.0) for k in ("N", "E", "S", "W")]
        if not isinstance(raw, list) or len(raw) != 4:
            raise ContextSchemaError("approach_asymmetry must be 4 numbers (N, E, S, W)")
        asym = _normalize([_as_float(v, "approach_asymmetry") for v in raw], 4.0, (1.0, 1.0, 1.0, 1.0))
    turns = base.turn_probs
    if "turn_probs" in obj:
        raw = obj["turn_probs"]
        if isinstance(raw, dict):
            raw = [raw.get(k, 0.0) for k in ("straight", "left", "right")]
        if not isinstance(raw, list) or len(raw) != 3:
            raise ContextSchemaError("turn_probs must be 3 numbers (straight, left, right)")
        turns = _normalize([_as_float(v, "turn_probs") for v in raw], 1.0, TEMPLATE_TURNS)
        # renormalize in float so the sum is 1 to machine precision
        turns = (turns[0], turns[1], 1.0 - turns[0] - turns[1])
        if turns[2] < 0:
            turns = (turns[0], 1.0 - turns[0], 0.0)
    return TrafficContext(
        base_arrival_rate=min(max(rate, 0.0), 0.5),
        approach_asymmetry=asym,
        turn_probs=turns,
        speed_factor=min(max(speed, 0.5), 1.5),
        difficulty_tag=d,
        noise_seed=seed,
    )


def _stats_text(stats: Mapping[str, float] | None) -> str:
    if not stats:
        return "no episodes completed yet"
    return ", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(stats.items()))


def generate_context(
    d: float,
    mode: CurriculumMode | str,
    stats: Mapping[str, float] | None = None,
    client: ChatClient | None = None,
    *,
    seed: int = 0,
    model: str = "mock",
) -> TrafficContext:
    """Produce the context for the next training stage.

    Client failures and unusable responses never abort training: they fall back
    to the template map with a logged warning.
    """
    if not D_MIN <= d <= D_MAX:
        raise ValueError(f"difficulty {d} outside [{D_MIN}, {D_MAX}]")
    mode = CurriculumMode(mode)
    if mode is CurriculumMode.TEMPLATE or client is None:
        return template_context(d, seed)

    strict = mode is CurriculumMode.LLM
    attempts = MAX_SCHEMA_RETRIES + 1 if strict else 1
    last_error = ""
    for attempt in range(1, attempts + 1):
        user = render(
            f"context_{mode.value}_user",
            difficulty=f"{d:.3f}",
            stats=_stats_text(stats),
            attempt=attempt,
            feedback=last_error or "none",
        )
        request = ChatRequest(
            model=model,
            system=render(f"context_{mode.value}_system"),
            user=user,
            temperature=0.7 if strict else 0.2,
        )
        try:
            response = client.chat(request)
        except LLMError as exc:
            log.warning("context generation failed (%s); using template map", exc)
            return template_context(d, seed)
        try:
            return context_from_response(response.text, d, seed, strict=strict)
        except ContextSchemaError as exc:
            last_error = str(exc)
            log.info("context response rejected (attempt %d): %s", attempt, exc)
    log.warning("context schema violated %d times; using template map", attempts)
    return template_context(d, seed)


# --------------------------------------------------------------- monotonicity


@dataclass(frozen=True)
class MonotonicityResult:
    d_grid: tuple[float, ...]
    mean_queue: tuple[float, ...]
    mean_delay: tuple[float, ...]
    rho_queue: float
    rho_delay: float


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation; a constant series gives 0 rather than NaN."""
    if np.ptp(np.asarray(ys, dtype=float)) == 0 or np.ptp(np.asarray(xs, dtype=float)) == 0:
        return 0.0
    return float(spearmanr(xs, ys)[0])


def verify_monotonicity(
    d_grid: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    period: int = 10,
    network: GridNetwork | None = None,
    policy: Callable[[int], Iterator[np.ndarray]] | None = None,
) -> MonotonicityResult:
    """Fixed-time sweep over difficulty; rank correlation of d with queue and delay.

    Each seed uses the same template draw and arrival stream at every ``d``,
    so differences across the grid come from difficulty, not sampling noise.
    """
    d_grid = tuple(float(d) for d in d_grid)
    if len(d_grid) < 4 or list(d_grid) != sorted(d_grid):
        raise ValueError("d_grid must be sorted ascending with at least 4 points")
    net = network or GridNetwork()
    sim = GridSimulator(net)
    queues, delays = [], []
    for d in d_grid:
        q_seed, dl_seed = [], []
        for seed in seeds:
            sim.reset(template_context(d, seed), seed)
            actions = policy(net.n_agents) if policy else fixed_time_policy(period, net.n_agents)
            records = []
            done = False
            while not done:
                _, _, m, done = sim.step(next(actions))
                records.append(m)
            summary = episode_metrics(records)
            q_seed.append(summary.mean_queue)
            if summary.mean_delay is not None:
                dl_seed.append(summary.mean_delay)
        queues.append(float(np.mean(q_seed)))
        delays.append(float(np.mean(dl_seed)) if dl_seed else math.nan)
    return MonotonicityResult(
        d_grid=d_grid,
        mean_queue=tuple(queues),
        mean_delay=tuple(delays),
        rho_queue=spearman(d_grid, queues),
        rho_delay=spearman(d_grid, delays),
    )
