from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from maestro.architect import (
    Condition,
    GenerationTrigger,
    ShapingState,
    combine,
    extract_program_text,
    mark_generation,
    regenerate,
    request_reward_program,
    reward_mode,
    should_regenerate,
    weight,
)
from maestro.curriculum import CurriculumEvent, EventKind
from maestro.llm import ChatResponse, MockChatClient, TransportError
from maestro.reward_lang import parse

GOLDEN = Path(__file__).parent / "golden" / "reward_mock_seed200_d050.txt"


class Scripted:
    """Chat client that answers from a fixed list."""

    def __init__(self, *texts):
        self.texts = list(texts)
        self.requests = []

    def chat(self, request):
        self.requests.append(request)
        return ChatResponse(self.texts.pop(0))


class Down:
    def chat(self, request):
        raise TransportError("timeout")


def event(kind):
    return CurriculumEvent(kind, 0.5, 0.525, 10)


# ---------------------------------------------------------------- triggers


def test_difficulty_jump():
    s = ShapingState(d_at_last_gen=0.50, episode_at_last_gen=10)
    assert should_regenerate(s, 0.65, 12, None) is GenerationTrigger.DIFFICULTY_JUMP
    assert should_regenerate(s, 0.35, 12, None) is GenerationTrigger.DIFFICULTY_JUMP
    assert should_regenerate(s, 0.64, 12, None) is None


def test_episode_budget():
    s = ShapingState(d_at_last_gen=0.5, episode_at_last_gen=10)
    assert should_regenerate(s, 0.5, 30, None) is GenerationTrigger.EPISODE_BUDGET
    assert should_regenerate(s, 0.5, 29, None) is None


def test_first_generation_is_due():
    assert should_regenerate(ShapingState(), 0.5, 0, None) is GenerationTrigger.EPISODE_BUDGET


def test_no_trigger():
    s = ShapingState(d_at_last_gen=0.5, episode_at_last_gen=10)
    assert should_regenerate(s, 0.5, 15, event(EventKind.NONE)) is None
    assert should_regenerate(s, 0.5, 15, event(EventKind.INCREASE)) is None


def test_stagnation_and_priority():
    s = ShapingState(d_at_last_gen=0.5, episode_at_last_gen=10)
    assert should_regenerate(s, 0.525, 15, event(EventKind.PLATEAU_ESCAPE)) is GenerationTrigger.STAGNATION_ESCAPE
    # jump outranks stagnation, which outranks the budget
    assert should_regenerate(s, 0.7, 40, event(EventKind.PLATEAU_ESCAPE)) is GenerationTrigger.DIFFICULTY_JUMP
    assert should_regenerate(s, 0.5, 40, event(EventKind.PLATEAU_ESCAPE)) is GenerationTrigger.STAGNATION_ESCAPE


# --------------------------------------------------------------- generation


def test_mock_golden_program():
    s = ShapingState()
    report = request_reward_program(MockChatClient(200), 0.5, None, s)
    assert report.passed
    assert report.source == GOLDEN.read_text().strip()
    assert s.active_program == parse(report.source)


def test_invalid_grammar_counts_a_failure():
    s = ShapingState()
    report = request_reward_program(Scripted("queue ** 2"), 0.5, None, s)
    assert report.stage == "Syntax"
    assert s.consecutive_failures == 1 and not s.env_only_fallback
    assert s.active_program is None


def test_transport_error_counts_a_failure():
    s = ShapingState()
    report = request_reward_program(Down(), 0.5, None, s)
    assert report.stage == "Transport" and not report.passed
    assert s.consecutive_failures == 1


def test_success_resets_counter_and_replaces_program():
    s = ShapingState(consecutive_failures=2)
    request_reward_program(Scripted("tanh(queue)"), 0.5, None, s)
    assert s.consecutive_failures == 0
    assert s.active_program.source == "tanh(queue)"


def test_three_failures_fall_back_then_recover_at_next_trigger():
    s = ShapingState()
    client = MockChatClient(200, invalid_rate=1.0)
    reports = regenerate(client, 0.5, 0, None, s)
    assert len(reports) == 3 and client.calls == 3
    assert s.env_only_fallback and s.consecutive_failures == 3
    assert combine(10.0, 0.9, 0.5, "A7", s) == 10.0
    assert reward_mode("A7", s) == "fallback"
    # nothing changes until a trigger fires
    assert should_regenerate(s, 0.5, 5, None) is None
    assert s.env_only_fallback
    reports = regenerate(MockChatClient(200), 0.5, 20, None, s)
    assert reports[0].passed and len(reports) == 1
    assert not s.env_only_fallback and s.consecutive_failures == 0
    assert reward_mode("A7", s) == "shaped"


def test_failed_attempt_feedback_reaches_the_next_prompt():
    client = Scripted("queue ** 2", "tanh(queue)")
    regenerate(client, 0.5, 0, {"mean_return": 12.5}, ShapingState())
    first, second = (r.user for r in client.requests)
    assert "ATTEMPT: 1" in first and "ATTEMPT: 2" in second
    assert "Syntax" in second
    assert "mean_return=12.500" in first


def test_regenerate_marks_the_trigger_point():
    s = ShapingState(env_only_fallback=True, consecutive_failures=3)
    mark_generation(s, 0.6, 40)
    assert (s.d_at_last_gen, s.episode_at_last_gen) == (0.6, 40)
    assert not s.env_only_fallback and s.consecutive_failures == 0


@pytest.mark.parametrize(
    "text,expected",
    [
        ("tanh(queue)", "tanh(queue)"),
        ("```\ntanh(queue)\n```", "tanh(queue)"),
        ("```dsl\nreward = tanh(queue)\n```", "tanh(queue)"),
        ("\n\n  r = queue  \n", "queue"),
        ("", ""),
    ],
)
def test_program_extraction(text, expected):
    assert extract_program_text(text) == expected


# ------------------------------------------------------------- weighting


@pytest.mark.parametrize("d,w", [(0.3, 0.1), (1.0, 0.5), (0.65, 0.3)])
def test_weight_grid(d, w):
    assert weight(d) == pytest.approx(w, abs=1e-12)


@pytest.mark.parametrize("d", [0.29, 1.01, float("nan")])
def test_weight_rejects_out_of_range(d):
    with pytest.raises(ValueError):
        weight(d)


def shaped_state():
    return ShapingState(active_program=parse("tanh(queue)"))


def test_combine_examples():
    s = shaped_state()
    assert combine(100.0, 0.2, 1.0, "A7", s) == pytest.approx(67.0, abs=1e-12)
    assert combine(100.0, 0.0, 0.65, "A7", s) == pytest.approx(70.0, abs=1e-12)
    assert combine(100.0, 5.0, 1.0, "A7", s) == pytest.approx(50.0 + 85.0, abs=1e-12)
    for cond in ("A2", "A8"):
        assert combine(-3.5, 0.9, 0.7, cond, s) == -3.5
        assert reward_mode(cond, s) == "env"


def test_combine_without_program_is_env_only():
    assert combine(4.0, 1.0, 0.5, Condition.A7, ShapingState()) == 4.0


def test_combine_rejects_non_finite():
    with pytest.raises(ValueError):
        combine(float("inf"), 0.0, 0.5, "A7", shaped_state())
    with pytest.raises(ValueError):
        combine(0.0, float("nan"), 0.5, "A2", shaped_state())


finite = st.floats(-1e4, 1e4, allow_nan=False)


@given(finite, finite, st.floats(0.3, 1.0))
def test_combined_reward_bound(r_env, r_llm, d):
    w = weight(d)
    r = combine(r_env, r_llm, d, "A7", shaped_state())
    assert abs(r) <= (1 - w) * abs(r_env) + w * 170.0 + 1e-9


@given(finite, finite, st.floats(0.3, 1.0), st.sampled_from(["A2", "A8"]))
def test_baselines_are_env_only(r_env, r_llm, d, cond):
    assert combine(r_env, r_llm, d, cond, shaped_state()) == r_env
