"""A closed expression language for generated reward programs.

Grammar (``unary > * / > + -``, left associative)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | primary
    primary := NUMBER | FEATURE | FUNC "(" expr ("," expr)* ")" | "(" expr ")"

Features are the eight agent-local quantities in ``FEATURES``. Functions are
``abs`` and ``tanh`` (one argument), ``min`` and ``max`` (two or more) and
``clip(x, lo, hi)``. Nothing else exists in the language, so a parsed program
can only do arithmetic over the features.

Evaluation is total: division by zero returns NaN and float overflow returns
inf. The validation pipeline rejects programs whose sampled outputs are
non-finite or larger than ``SAFETY_BOUND`` in magnitude.
"""

from __future__ import annotations

import dataclasses
import math
import re
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

FEATURES = (
    "queue",
    "wait",
    "pressure",
    "outflow",
    "inflow",
    "occupancy",
    "phase_elapsed",
    "throughput",
)
FUNCTION_ARITY = {"abs": (1, 1), "tanh": (1, 1), "min": (2, None), "max": (2, None), "clip": (3, 3)}

MAX_SOURCE_CHARS = 4096
MAX_NODES = 128
MAX_DEPTH = 16
SAFETY_BOUND = 10.0
VALIDATION_SAMPLES = 100

# Synthetic feature ranges used when no rollout states have been recorded.
SYNTHETIC_RANGES = {
    "queue": (0.0, 80.0),
    "wait": (0.0, 120.0),
    "pressure": (-80.0, 80.0),
    "outflow": (0.0, 8.0),
    "inflow": (0.0, 8.0),
    "occupancy": (0.0, 1.0),
    "phase_elapsed": (0.0, 60.0),
    "throughput": (0.0, 8.0),
}


class DSLSyntaxError(ValueError):
    """Base class for every parse-time rejection."""

    def __init__(self, message: str, position: int | None = None):
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")
        self.position = position


class UnknownIdentifierError(DSLSyntaxError):
    pass


class MalformedExpressionError(DSLSyntaxError):
    pass


class ProgramTooLargeError(DSLSyntaxError):
    pass


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Node", ...]


Node = Union[Num, Var, Neg, BinOp, Call]


def _children(node: Node) -> tuple[Node, ...]:
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Call):
        return node.args
    return ()


def count_nodes(node: Node) -> int:
    return 1 + sum(count_nodes(c) for c in _children(node))


def tree_depth(node: Node) -> int:
    kids = _children(node)
    return 1 + (max(tree_depth(c) for c in kids) if kids else 0)


@dataclass(frozen=True)
class RewardProgram:
    source: str
    ast: Node
    node_count: int
    depth: int

    def __call__(self, features: Mapping[str, float]) -> float:
        return evaluate(self, features)


# ----------------------------------------------------------------------- lexing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/(),])"
    r"|(?P<bad>\S))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:  # only trailing whitespace left
            break
        kind = m.lastgroup
        text = m.group(kind)
        start = m.start(kind)
        if kind == "bad":
            raise MalformedExpressionError(f"unexpected character {text!r}", start)
        if kind == "op" and text == "**":
            raise MalformedExpressionError("operator '**' is not part of the language", start)
        tokens.append((kind, text, start))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> None:
        kind, got, pos = self.take()
        if got != text:
            shown = got or "end of input"
            raise MalformedExpressionError(f"expected {text!r}, found {shown!r}", pos)

    def parse(self) -> Node:
        node = self.expr(1)
        kind, text, pos = self.peek()
        if kind != "end":
            raise MalformedExpressionError(f"unexpected {text!r} after complete expression", pos)
        return node

    # depth is tracked while descending so pathological nesting fails fast
    def _check_depth(self, depth: int) -> None:
        if depth > MAX_DEPTH:
            raise ProgramTooLargeError(f"expression deeper than {MAX_DEPTH} levels", self.peek()[2])

    def expr(self, depth: int) -> Node:
        self._check_depth(depth)
        node = self.term(depth)
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term(depth))
        return node

    def term(self, depth: int) -> Node:
        node = self.unary(depth)
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = BinOp(op, node, self.unary(depth))
        return node

    def unary(self, depth: int) -> Node:
        self._check_depth(depth)
        if self.peek()[1] == "-":
            self.take()
            return Neg(self.unary(depth + 1))
        if self.peek()[1] == "+":
            raise MalformedExpressionError("unary '+' is not part of the language", self.peek()[2])
        return self.primary(depth)

    def primary(self, depth: int) -> Node:
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in FUNCTION_ARITY:
                return self.call(text, pos, depth)
            if text in FEATURES:
                return Var(text)
            raise UnknownIdentifierError(f"identifier {text!r} is not an allowed feature or function", pos)
        if text == "(":
            node = self.expr(depth + 1)
            self.expect(")")
            return node
        shown = text or "end of input"
        raise MalformedExpressionError(f"unexpected {shown!r}", pos)

    def call(self, name: str, pos: int, depth: int) -> Node:
        self.expect("(")
        args = [self.expr(depth + 1)]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr(depth + 1))
        self.expect(")")
        lo, hi = FUNCTION_ARITY[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            want = str(lo) if lo == hi else f"at least {lo}"
            raise MalformedExpressionError(f"{name}() takes {want} arguments, got {len(args)}", pos)
        return Call(name, tuple(args))


def parse(source: str) -> RewardProgram:
    """Parse ``source`` into a RewardProgram or raise a DSLSyntaxError subclass."""
    if not isinstance(source, str) or not source.strip():
        raise MalformedExpressionError("empty program")
    if len(source) > MAX_SOURCE_CHARS:
        raise ProgramTooLargeError(f"source longer than {MAX_SOURCE_CHARS} characters")
    ast = _Parser(source).parse()
    nodes = count_nodes(ast)
    if nodes > MAX_NODES:
        raise ProgramTooLargeError(f"program has {nodes} nodes, limit is {MAX_NODES}")
    depth = tree_depth(ast)
    if depth > MAX_DEPTH:
        raise ProgramTooLargeError(f"program depth {depth} exceeds {MAX_DEPTH}")
    return RewardProgram(source=source, ast=ast, node_count=nodes, depth=depth)


# ------------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(value: float) -> str:
    text = repr(float(value))
    if text in ("inf", "nan"):
        raise ValueError(f"cannot print non-finite literal {text}")
    return text


def to_source(node: Node) -> str:
    """Print an AST with the minimal parentheses that preserve its structure."""
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        if isinstance(node.operand, BinOp):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source(a) for a in node.args)})"
    prec = _PREC[node.op]
    left = to_source(node.left)
    if isinstance(node.left, BinOp) and _PREC[node.left.op] < prec:
        left = f"({left})"
    right = to_source(node.right)
    # right operand of a left-associative operator needs parens at equal precedence
    if isinstance(node.right, BinOp) and _PREC[node.right.op] <= prec:
        right = f"({right})"
    return f"{left} {node.op} {right}"


# ----------------------------------------------------------------- evaluation


def _eval(node: Node, env: Mapping[str, float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return float(env[node.name])
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        op = node.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if b == 0.0 or math.isnan(b):
            return math.nan
        return a / b
    args = [_eval(a, env) for a in node.args]
    f = node.func
    if f == "abs":
        return abs(args[0])
    if f == "tanh":
        return math.tanh(args[0]) if not math.isnan(args[0]) else math.nan
    if any(math.isnan(x) for x in args):
        return math.nan
    if f == "min":
        return min(args)
    if f == "max":
        return max(args)
    x, lo, hi = args
    if lo > hi:
        return math.nan
    return min(max(x, lo), hi)


def evaluate(program: RewardProgram, features: Mapping[str, float]) -> float:
    """Evaluate ``program``; returns NaN (the non-finite sentinel) instead of raising."""
    return float(_eval(program.ast, features))


# ----------------------------------------------------------------- validation

STAGE_SYNTAX = "Syntax"
STAGE_SANDBOX = "Sandbox"
STAGE_SAFETY = "Safety"
STAGE_PASSED = "Passed"


@dataclass(frozen=True)
class OutputSummary:
    min: float
    max: float
    non_finite: int
    count: int


@dataclass(frozen=True)
class ValidationReport:
    stage: str
    passed: bool
    detail: str
    sampled_outputs: OutputSummary | None = None
    failing_input: dict | None = None
    program: RewardProgram | None = None
    source: str | None = None

    def to_dict(self) -> dict:
        out = {"stage": self.stage, "passed": self.passed, "detail": self.detail, "source": self.source}
        if self.sampled_outputs is not None:
            out["sampled_outputs"] = vars(self.sampled_outputs)
        if self.failing_input is not None:
            out["failing_input"] = self.failing_input
        return out


def synthetic_feature_maps(k: int = VALIDATION_SAMPLES, seed: int = 0) -> list[dict[str, float]]:
    """K feature maps drawn uniformly from ``SYNTHETIC_RANGES``, with integer counts."""
    rng = np.random.default_rng(seed)
    maps = []
    for _ in range(k):
        fm = {}
        for name in FEATURES:
            lo, hi = SYNTHETIC_RANGES[name]
            v = rng.uniform(lo, hi)
            if name in ("queue", "outflow", "inflow", "throughput", "phase_elapsed"):
                v = float(np.floor(v))
            fm[name] = float(v)
        maps.append(fm)
    return maps


class FeatureSampler:
    """Source of validation inputs: recorded rollout states first, synthetic otherwise."""

    def __init__(self, k: int = VALIDATION_SAMPLES, seed: int = 0):
        self.k = k
        self.seed = seed
        self._recorded: list[dict[str, float]] = []

    def record(self, maps: Iterable[Mapping[str, float]]) -> None:
        self._recorded.extend(dict(m) for m in maps)

    def clear(self) -> None:
        self._recorded.clear()

    def trim(self, keep: int) -> None:
        """Drop all but the ``keep`` most recent recorded maps."""
        if len(self._recorded) > keep:
            del self._recorded[: len(self._recorded) - keep]

    def __len__(self) -> int:
        return len(self._recorded)

    def sample(self) -> list[dict[str, float]]:
        if len(self._recorded) >= self.k:
            idx = np.linspace(0, len(self._recorded) - 1, self.k).round().astype(int)
            return [self._recorded[i] for i in idx]
        return synthetic_feature_maps(self.k, self.seed)


def validate(
    program: RewardProgram | str,
    sampler: FeatureSampler | Sequence[Mapping[str, float]] | Callable[[], Sequence[Mapping[str, float]]] | None = None,
    *,
    bound: float = SAFETY_BOUND,
    time_budget_s: float = 1.0,
) -> ValidationReport:
    """Run syntax -> sandboxed execution -> safety checks; stop at the first failure."""
    source = program if isinstance(program, str) else program.source
    report = _validate(program, sampler, bound, time_budget_s)
    return dataclasses.replace(report, source=source)


def _validate(program, sampler, bound: float, time_budget_s: float) -> ValidationReport:
    if isinstance(program, str):
        try:
            program = parse(program)
        except DSLSyntaxError as exc:
            return ValidationReport(STAGE_SYNTAX, False, f"{type(exc).__name__}: {exc}")

    if sampler is None:
        maps = synthetic_feature_maps()
    elif isinstance(sampler, FeatureSampler):
        maps = sampler.sample()
    elif callable(sampler):
        maps = list(sampler())
    else:
        maps = list(sampler)

    outputs = []
    deadline = time.perf_counter() + time_budget_s
    for fm in maps:
        missing = [f for f in FEATURES if f not in fm]
        if missing:
            return ValidationReport(
                STAGE_SANDBOX, False, f"feature map missing {missing}", failing_input=dict(fm), program=program
            )
        try:
            outputs.append(evaluate(program, fm))
        except Exception as exc:  # the evaluator is total; anything here is a defect worth reporting
            return ValidationReport(
                STAGE_SANDBOX, False, f"evaluation raised {type(exc).__name__}: {exc}", dict(fm), program=program
            )
        if time.perf_counter() > deadline:
            return ValidationReport(
                STAGE_SANDBOX, False, f"evaluation exceeded {time_budget_s}s budget", failing_input=dict(fm), program=program
            )
    arr = np.asarray(outputs, dtype=float)
    finite = np.isfinite(arr)
    summary = OutputSummary(
        min=float(arr[finite].min()) if finite.any() else math.nan,
        max=float(arr[finite].max()) if finite.any() else math.nan,
        non_finite=int((~finite).sum()),
        count=len(arr),
    )
    if len(arr) == 0:
        return ValidationReport(STAGE_SANDBOX, False, "sampler produced no feature maps", summary, program=program)
    bad = ~finite | (np.abs(np.where(finite, arr, 0.0)) > bound)
    if bad.any():
        first = int(np.argmax(bad))
        why = "non-finite output" if not finite[first] else f"|output| {abs(arr[first]):.4g} > {bound}"
        return ValidationReport(
            STAGE_SAFETY,
            False,
            f"{why}; {summary.non_finite} of {summary.count} outputs non-finite",
            summary,
            dict(maps[first]),
            program,
        )
    return ValidationReport(STAGE_PASSED, True, "all stages passed", summary, program=program)
