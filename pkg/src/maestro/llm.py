"""Chat-client abstraction for the Architect.

``HttpChatClient`` talks to any chat-completion style endpoint. ``MockChatClient``
is a seeded stand-in whose text depends only on (seed, request), which makes
whole training runs reproducible offline. ``RecordingClient`` and
``ReplayClient`` capture real sessions to JSONL and play them back.

Wire format (request body posted by the HTTP client)::

    {"model": str, "messages": [{"role": "system", "content": str},
                                {"role": "user", "content": str}],
     "temperature": float, "max_tokens": int}

The response text is read from ``choices[0].message.content``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

log = logging.getLogger(__name__)

API_KEY_ENV = "MAESTRO_LLM_API_KEY"


class LLMError(RuntimeError):
    """Any failure to obtain a response from a chat client."""


class TransportError(LLMError):
    pass


class ConfigurationError(LLMError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system: str
    user: str
    temperature: float = 0.2
    max_tokens: int = 512
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": self.user},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def wire(self) -> str:
        """Canonical serialization: sorted keys, no insignificant whitespace."""
        return json.dumps(self.payload(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    def key(self) -> str:
        return hashlib.sha256(self.wire().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_s: float = 0.0


class ChatClient(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...


def _approx_tokens(text: str) -> int:
    return len(text.split())


# ------------------------------------------------------------------ HTTP


class HttpChatClient:
    """Chat-completion client with bounded retries on transport failure."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        *,
        retries: int = 2,
        backoff_s: float = 0.5,
        transport=None,
    ):
        import httpx

        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise ConfigurationError(f"HTTP client selected but {API_KEY_ENV} is not set")
        if not endpoint:
            raise ConfigurationError("HTTP client selected but no endpoint URL configured")
        self.endpoint = endpoint
        self.retries = retries
        self.backoff_s = backoff_s
        self._httpx = httpx
        self._client = httpx.Client(
            headers={"Authorization": f"Bearer {key}", "Content-Type": "application/json"},
            transport=transport,
        )

    def chat(self, request: ChatRequest) -> ChatResponse:
        httpx = self._httpx
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            start = time.perf_counter()
            try:
                resp = self._client.post(self.endpoint, content=request.wire(), timeout=request.timeout)
                resp.raise_for_status()
                body = resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError, ValueError) as exc:
                last = exc
                log.info("chat attempt %d failed: %s", attempt + 1, exc)
                continue
            try:
                text = body["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise TransportError(f"malformed chat response: {exc!r}") from exc
            usage = body.get("usage") or {}
            return ChatResponse(
                text=str(text),
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                latency_s=time.perf_counter() - start,
            )
        raise TransportError(f"chat request failed after {self.retries + 1} attempts: {last}")

    def close(self) -> None:
        self._client.close()


# ------------------------------------------------------------------ mock

# Reward programs the mock may return. All valid ones are bounded by tanh or
# clip so they pass the safety stage on any feature values.
VALID_REWARDS = (
    "tanh((outflow - 0.05 * queue) / 2)",
    "-tanh(0.02 * wait + 0.01 * abs(pressure))",
    "clip(0.5 * outflow - 0.1 * queue, -1, 1)",
    "tanh(outflow / 2) - 0.5 * occupancy",
    "-(0.6 * tanh(queue / 20) + 0.4 * tanh(wait / 40))",
    "clip((throughput - 0.02 * abs(pressure)) / 4, -1, 1)",
)
# One program per failing validation stage.
INVALID_REWARDS = (
    "queue ** 2",
    "speed * 2",
    "tanh(queue",
    "queue * 1000",
    "1 / (queue - queue)",
    "wait * wait",
)

_DIFFICULTY = re.compile(r"^DIFFICULTY:\s*([0-9.]+)", re.M)
_MODE = re.compile(r"^MODE:\s*(\w+)", re.M)
_TASK = re.compile(r"^TASK:\s*(\w+)", re.M)


class MockChatClient:
    """Seeded offline Architect.

    The response is a pure function of ``seed`` and the request's wire form.
    With probability ``invalid_rate`` it returns a deliberately broken answer
    (an invalid reward program or a context missing required fields).
    """

    def __init__(self, seed: int = 0, invalid_rate: float = 0.0):
        if not 0.0 <= invalid_rate <= 1.0:
            raise ValueError("invalid_rate must lie in [0, 1]")
        self.seed = int(seed)
        self.invalid_rate = float(invalid_rate)
        self.calls = 0

    def _rng(self, request: ChatRequest) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(request.wire().encode("utf-8"))])

    def chat(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        rng = self._rng(request)
        text = request.user
        task = _TASK.search(text)
        m = _DIFFICULTY.search(text)
        d = float(m.group(1)) if m else 0.5
        broken = rng.random() < self.invalid_rate
        if task and task.group(1) == "reward_program":
            pool = INVALID_REWARDS if broken else VALID_REWARDS
            out = pool[int(rng.integers(len(pool)))]
        elif task and task.group(1) == "traffic_context":
            mode = _MODE.search(text)
            out = self._context(d, mode.group(1) if mode else "llm_adaptive", broken, rng)
        else:
            out = "I can only help with traffic contexts and reward programs."
        return ChatResponse(text=out, prompt_tokens=_approx_tokens(text), completion_tokens=_approx_tokens(out))

    @staticmethod
    def _context(d: float, mode: str, broken: bool, rng: np.random.Generator) -> str:
        # The free mode scatters more widely around the difficulty-implied demand.
        spread = 0.05 if mode == "llm_adaptive" else 0.25
        rate = (0.02 + 0.18 * d) * (1.0 + spread * rng.uniform(-1, 1))
        asym = 1.0 + d * rng.uniform(-0.5, 0.5, 4) * (1.0 + spread)
        asym = 4.0 * asym / asym.sum()
        straight = 0.6 - spread * rng.uniform(0, 0.4)
        left = (1.0 - straight) / 2 + spread * rng.uniform(-0.1, 0.1)
        obj = {
            "base_arrival_rate": round(float(rate), 4),
            "approach_asymmetry": [round(float(a), 4) for a in asym],
            "turn_probs": [round(straight, 4), round(left, 4), round(1.0 - straight - left, 4)],
            "speed_factor": round(float((1.2 - 0.4 * d) * (1.0 + spread * rng.uniform(-0.5, 0.5))), 4),
        }
        if broken:
            obj.pop(sorted(obj)[int(rng.integers(len(obj)))])
        body = json.dumps(obj)
        if mode == "llm":
            return f"Scenario: corridor surge at difficulty {d:.2f}.\n```json\n{body}\n```"
        return body


# ------------------------------------------------------------------ record / replay


class RecordingClient:
    """Wraps a client and appends every exchange to a JSONL file."""

    def __init__(self, inner: ChatClient, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def chat(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.chat(request)
        entry = {"key": request.key(), "request": request.payload(), "response": asdict(response)}
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return response


class ReplayClient:
    """Serves responses recorded by ``RecordingClient``, keyed by request."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._table: dict[str, list[ChatResponse]] = {}
        self._cursor: dict[str, int] = {}
        try:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigurationError(f"cannot read replay log {self.path}: {exc}") from exc
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                self._table.setdefault(entry["key"], []).append(ChatResponse(**entry["response"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigurationError(f"{self.path}:{n}: bad replay entry ({exc})") from exc

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request.key()
        seq = self._table.get(key)
        if not seq:
            raise TransportError(f"no recorded response for request {key[:12]}")
        i = self._cursor.get(key, 0)
        self._cursor[key] = i + 1
        # repeat the last recording once a key's responses are exhausted
        return seq[min(i, len(seq) - 1)]
