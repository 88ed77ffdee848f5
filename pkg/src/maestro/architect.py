"""Reward-program regeneration, difficulty weighting and reward combination."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

from maestro.curriculum import D_MAX, D_MIN, CurriculumEvent, EventKind
from maestro.llm import ChatClient, ChatRequest, LLMError
from maestro.prompts import render
from maestro.reward_lang import FEATURES, FeatureSampler, RewardProgram, ValidationReport, validate

log = logging.getLogger(__name__)

JUMP_THRESHOLD = 0.15
EPISODE_BUDGET = 20
MAX_FAILURES = 3


class Condition(str, enum.Enum):
    A2 = "A2"
    A7 = "A7"
    A8 = "A8"


class GenerationTrigger(str, enum.Enum):
    DIFFICULTY_JUMP = "DifficultyJump"
    STAGNATION_ESCAPE = "StagnationEscape"
    EPISODE_BUDGET = "EpisodeBudget"


@dataclass
class ShapingState:
    """Architect bookkeeping for one run.

    ``episode_at_last_gen is None`` means nothing has been generated yet, in
    which case the episode-budget trigger is due immediately.
    """

    scale: float = 170.0
    w_min: float = 0.1
    w_max: float = 0.5
    d_min: float = D_MIN
    d_max: float = D_MAX
    active_program: RewardProgram | None = None
    consecutive_failures: int = 0
    d_at_last_gen: float | None = None
    episode_at_last_gen: int | None = None
    env_only_fallback: bool = False
    history: list[ValidationReport] = field(default_factory=list)

    def weight(self, d: float) -> float:
        if not (self.d_min <= d <= self.d_max) or math.isnan(d):
            raise ValueError(f"difficulty {d} outside [{self.d_min}, {self.d_max}]")
        return self.w_min + (d - self.d_min) / (self.d_max - self.d_min) * (self.w_max - self.w_min)

    @property
    def shaping_active(self) -> bool:
        return self.active_program is not None and not self.env_only_fallback


def weight(d: float, state: ShapingState | None = None) -> float:
    """Linear map from difficulty to the auxiliary-reward weight."""
    return (state or ShapingState()).weight(d)


def should_regenerate(
    state: ShapingState, d: float, episode: int, event: CurriculumEvent | None
) -> GenerationTrigger | None:
    """First satisfied trigger in priority order, or None."""
    if state.d_at_last_gen is not None and abs(d - state.d_at_last_gen) >= JUMP_THRESHOLD - 1e-12:
        return GenerationTrigger.DIFFICULTY_JUMP
    if event is not None and event.kind is EventKind.PLATEAU_ESCAPE:
        return GenerationTrigger.STAGNATION_ESCAPE
    if state.episode_at_last_gen is None or episode - state.episode_at_last_gen >= EPISODE_BUDGET:
        return GenerationTrigger.EPISODE_BUDGET
    return None


def mark_generation(state: ShapingState, d: float, episode: int) -> None:
    """Reset the trigger reference point; a new trigger also lifts the fallback."""
    state.d_at_last_gen = d
    state.episode_at_last_gen = episode
    state.env_only_fallback = False
    state.consecutive_failures = 0


def _stats_text(stats: Mapping[str, float] | None) -> str:
    if not stats:
        return "no episodes completed yet"
    return ", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(stats.items()))


def extract_program_text(text: str) -> str:
    """Strip code fences and surrounding prose; keep the first non-empty line."""
    body = text.strip()
    if body.startswith("```"):
        lines = [ln for ln in body.splitlines()[1:] if not ln.startswith("```")]
        body = "\n".join(lines).strip()
    for line in body.splitlines():
        line = line.strip()
        if line:
            return line.removeprefix("reward =").removeprefix("r =").strip()
    return ""


def request_reward_program(
    client: ChatClient,
    d: float,
    stats: Mapping[str, float] | None,
    state: ShapingState,
    *,
    sampler: FeatureSampler | None = None,
    attempt: int = 1,
    feedback: str = "none",
    model: str = "mock",
) -> ValidationReport:
    """One generation attempt: prompt, parse, validate, update ``state``.

    A transport failure counts as a failed generation.
    """
    request = ChatRequest(
        model=model,
        system=render("reward_system"),
        user=render(
            "reward_user",
            difficulty=f"{d:.3f}",
            stats=_stats_text(stats),
            attempt=attempt,
            feedback=feedback,
            features=", ".join(FEATURES),
        ),
    )
    try:
        text = client.chat(request).text
    except LLMError as exc:
        report = ValidationReport(stage="Transport", passed=False, detail=str(exc), source=None)
    else:
        report = validate(extract_program_text(text), sampler)
    state.history.append(report)
    if report.passed:
        state.active_program = report.program
        state.consecutive_failures = 0
        state.env_only_fallback = False
    else:
        state.consecutive_failures += 1
        if state.consecutive_failures >= MAX_FAILURES:
            state.env_only_fallback = True
    return report


def regenerate(
    client: ChatClient,
    d: float,
    episode: int,
    stats: Mapping[str, float] | None,
    state: ShapingState,
    *,
    sampler: FeatureSampler | None = None,
    model: str = "mock",
) -> list[ValidationReport]:
    """Handle a trigger: attempt generation until success or three failures."""
    mark_generation(state, d, episode)
    reports = []
    feedback = "none"
    while True:
        report = request_reward_program(
            client, d, stats, state, sampler=sampler, attempt=len(reports) + 1, feedback=feedback, model=model
        )
        reports.append(report)
        if report.passed or state.env_only_fallback:
            break
        feedback = f"{report.stage} stage rejected the last program: {report.detail}"
    if state.env_only_fallback:
        log.warning("%d consecutive reward generations failed; using environment reward only", MAX_FAILURES)
    return reports


def reward_mode(condition: Condition | str, state: ShapingState) -> str:
    """Label for logs: env, shaped, or fallback."""
    if Condition(condition) is not Condition.A7:
        return "env"
    return "shaped" if state.shaping_active else "fallback"


def combine(r_env: float, r_llm_raw: float, d: float, condition: Condition | str, state: ShapingState) -> float:
    """Per-step training reward for one agent under ``condition``."""
    if not (math.isfinite(r_env) and math.isfinite(r_llm_raw) and math.isfinite(d)):
        raise ValueError(f"combine needs finite inputs, got r_env={r_env}, r_llm={r_llm_raw}, d={d}")
    if Condition(condition) is not Condition.A7 or not state.shaping_active:
        return r_env
    w = state.weight(d)
    r_llm = min(max(r_llm_raw, -1.0), 1.0)
    return (1.0 - w) * r_env + w * state.scale * r_llm
