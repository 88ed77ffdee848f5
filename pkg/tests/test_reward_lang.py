from __future__ import annotations

import ast
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from maestro.reward_lang import (
    FEATURES,
    BinOp,
    Call,
    DSLSyntaxError,
    FeatureSampler,
    MalformedExpressionError,
    Neg,
    Num,
    ProgramTooLargeError,
    UnknownIdentifierError,
    Var,
    evaluate,
    parse,
    synthetic_feature_maps,
    to_source,
    validate,
)


def py_node_count(source: str) -> int:
    """Independent count: expression nodes in CPython's own parse tree."""
    tree = ast.parse(source, mode="eval")
    callee = {id(n.func) for n in ast.walk(tree) if isinstance(n, ast.Call)}
    return sum(isinstance(n, ast.expr) and id(n) not in callee for n in ast.walk(tree))


def py_eval(source: str, fm: dict) -> float:
    """Independent evaluator: CPython on the same text with the five functions bound."""
    env = dict(fm)
    env.update(abs=abs, tanh=math.tanh, min=min, max=max, clip=lambda x, lo, hi: min(max(x, lo), hi))
    return float(eval(compile(source, "<reward>", "eval"), {"__builtins__": {}}, env))


FM = {"queue": 5.0, "wait": 12.0, "pressure": -3.0, "outflow": 2.0, "inflow": 1.0,
      "occupancy": 0.25, "phase_elapsed": 7.0, "throughput": 2.0}


def test_node_count_matches_cpython_parse():
    src = "-(0.6*queue + 0.4*wait)/50"
    prog = parse(src)
    assert prog.node_count == py_node_count(src) == 10


@pytest.mark.parametrize(
    "src",
    ["queue", "-queue", "tanh(outflow - queue)", "max(queue, wait, 3)", "clip(pressure, -1, 1) * 0.5",
     "1 - 2 - 3", "queue / 2 / 4", "abs(-pressure) + min(1, 2)"],
)
def test_node_count_and_value_agree_with_oracle(src):
    prog = parse(src)
    assert prog.node_count == py_node_count(src)
    assert evaluate(prog, FM) == pytest.approx(py_eval(src, FM), rel=1e-12)


def test_clip_example():
    assert evaluate(parse("clip(queue, 0, 1)"), {**FM, "queue": 5.0}) == 1.0


def test_precedence_and_associativity():
    assert evaluate(parse("1 - 2 - 3"), FM) == -4.0
    assert evaluate(parse("2 * 3 + 4"), FM) == 10.0
    assert evaluate(parse("-2 * 3"), FM) == -6.0
    assert evaluate(parse("8 / 4 / 2"), FM) == 1.0


@pytest.mark.parametrize(
    "src,err",
    [
        ("queue ** 2", MalformedExpressionError),
        ("import os", UnknownIdentifierError),
        ("speed * 2", UnknownIdentifierError),
        ("exp(queue)", UnknownIdentifierError),
        ("tanh(queue", MalformedExpressionError),
        ("tanh(queue, wait)", MalformedExpressionError),
        ("clip(queue, 1)", MalformedExpressionError),
        ("min(queue)", MalformedExpressionError),
        ("", MalformedExpressionError),
        ("queue; wait", MalformedExpressionError),
        ("__import__('os')", DSLSyntaxError),
    ],
)
def test_rejected_sources(src, err):
    with pytest.raises(err):
        parse(src)


def test_size_limits():
    with pytest.raises(ProgramTooLargeError):
        parse(" + ".join(["queue"] * 100))
    with pytest.raises(ProgramTooLargeError):
        parse("-" * 40 + "queue")


def test_evaluation_is_total():
    assert math.isnan(evaluate(parse("queue / 0"), FM))
    assert math.isnan(evaluate(parse("clip(queue, 1, 0)"), FM))
    assert math.isinf(evaluate(parse("1e308 * 10"), FM))


@pytest.mark.parametrize(
    "src,stage",
    [
        ("queue/0", "Safety"),
        ("tanh(outflow - queue)", "Passed"),
        ("queue ** 2", "Syntax"),
        ("import os", "Syntax"),
        ("queue * 1e9", "Safety"),
    ],
)
def test_validation_stages(src, stage):
    report = validate(src)
    assert report.stage == stage
    assert report.passed == (stage == "Passed")
    assert report.source == src


def test_division_by_zero_reports_all_non_finite():
    report = validate("queue/0")
    assert report.sampled_outputs.non_finite == 100
    assert report.failing_input is not None


def test_passing_report_keeps_program_and_output_range():
    report = validate("tanh(outflow - queue)")
    assert report.program is not None
    assert -1.0 <= report.sampled_outputs.min <= report.sampled_outputs.max <= 1.0
    assert report.to_dict()["sampled_outputs"]["count"] == 100


def test_sandbox_rejects_incomplete_feature_maps():
    report = validate("queue", [{"queue": 1.0}])
    assert report.stage == "Sandbox"


def test_sampler_prefers_recorded_states():
    sampler = FeatureSampler(k=10)
    assert sampler.sample() == synthetic_feature_maps(10)
    sampler.record([{**FM, "queue": float(i)} for i in range(50)])
    picked = sampler.sample()
    assert len(picked) == 10 and picked[0]["queue"] == 0.0 and picked[-1]["queue"] == 49.0
    sampler.trim(5)
    assert len(sampler) == 5


def test_synthetic_maps_are_deterministic_and_in_range():
    a, b = synthetic_feature_maps(20, seed=3), synthetic_feature_maps(20, seed=3)
    assert a == b
    for fm in a:
        assert set(fm) == set(FEATURES)
        assert 0.0 <= fm["occupancy"] <= 1.0


# ------------------------------------------------------------------ properties

leaves = st.one_of(
    st.floats(0.0, 100.0, allow_nan=False).map(lambda v: Num(round(v, 3))),
    st.sampled_from(FEATURES).map(Var),
)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/"), children, children).map(lambda t: BinOp(*t)),
        st.tuples(st.sampled_from(("abs", "tanh")), children).map(lambda t: Call(t[0], (t[1],))),
        st.tuples(st.sampled_from(("min", "max")), st.lists(children, min_size=2, max_size=3)).map(
            lambda t: Call(t[0], tuple(t[1]))
        ),
        st.tuples(children, children, children).map(lambda t: Call("clip", t)),
    )


trees = st.recursive(leaves, _extend, max_leaves=12)
feature_maps = st.fixed_dictionaries({f: st.floats(-50, 50, allow_nan=False) for f in FEATURES})


@given(trees)
def test_print_parse_round_trip(tree):
    src = to_source(tree)
    prog = parse(src)
    assert prog.ast == tree
    assert to_source(prog.ast) == src


@given(trees, feature_maps)
def test_evaluation_is_total_over_well_formed_programs(tree, fm):
    value = evaluate(parse(to_source(tree)), fm)
    assert isinstance(value, float)


@given(trees, feature_maps)
def test_evaluation_matches_cpython(tree, fm):
    src = to_source(tree)
    mine = evaluate(parse(src), fm)
    try:
        theirs = py_eval(src, fm)
    except (ZeroDivisionError, OverflowError):
        return
    if not math.isfinite(theirs) or "clip" in src:
        # clip with lo > hi is undefined in the language but defined in the oracle lambda
        return
    if math.isfinite(mine):
        assert mine == pytest.approx(theirs, rel=1e-9, abs=1e-9)


@given(trees)
def test_validation_never_raises(tree):
    report = validate(to_source(tree))
    assert report.stage in ("Passed", "Safety", "Sandbox")
    if report.passed:
        outputs = [evaluate(report.program, fm) for fm in synthetic_feature_maps()]
        assert np.all(np.abs(outputs) <= 10.0)


@given(st.text(max_size=40))
def test_arbitrary_text_never_crashes_the_validator(text):
    report = validate(text)
    assert report.stage in ("Syntax", "Sandbox", "Safety", "Passed")
