from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import pytest

from maestro.llm import (
    API_KEY_ENV,
    INVALID_REWARDS,
    VALID_REWARDS,
    ChatRequest,
    ConfigurationError,
    HttpChatClient,
    MockChatClient,
    RecordingClient,
    ReplayClient,
    TransportError,
)
from maestro.prompts import load, render
from maestro.reward_lang import validate


def reward_request(d=0.5, attempt=1):
    user = render("reward_user", difficulty=f"{d:.3f}", stats="none", attempt=attempt, feedback="none",
                  features="queue")
    return ChatRequest(model="mock", system=render("reward_system"), user=user)


def test_request_wire_is_canonical():
    req = ChatRequest(model="m", system="s", user="u")
    body = json.loads(req.wire())
    assert body["messages"][0] == {"role": "system", "content": "s"}
    assert " " not in req.wire()
    assert req.key() == ChatRequest(model="m", system="s", user="u").key()
    assert req.key() != ChatRequest(model="m", system="s", user="v").key()
    with pytest.raises(ValueError):
        ChatRequest(model="m", system="s", user="u", timeout=0)


def test_prompts_render_and_unknown_name_fails():
    assert "$difficulty" in load("reward_user").template
    assert "DIFFICULTY: 0.500" in reward_request().user
    with pytest.raises(KeyError):
        load("nope")


def test_mock_is_a_pure_function_of_seed_and_request():
    a, b = MockChatClient(200), MockChatClient(200)
    texts_a = [a.chat(reward_request(0.3 + 0.007 * i)).text for i in range(100)]
    texts_b = [b.chat(reward_request(0.3 + 0.007 * i)).text for i in range(100)]
    assert texts_a == texts_b
    assert a.calls == 100
    assert all(t in VALID_REWARDS for t in texts_a)


def test_mock_valid_programs_pass_and_invalid_ones_fail():
    for src in VALID_REWARDS:
        assert validate(src).passed, src
    stages = {validate(src).stage for src in INVALID_REWARDS}
    assert stages == {"Syntax", "Safety"}
    assert not any(validate(src).passed for src in INVALID_REWARDS)


def test_mock_invalid_rate_one_always_breaks():
    client = MockChatClient(5, invalid_rate=1.0)
    for i in range(20):
        assert client.chat(reward_request(attempt=i + 1)).text in INVALID_REWARDS
    with pytest.raises(ValueError):
        MockChatClient(0, invalid_rate=1.5)


def test_mock_off_task_answer():
    out = MockChatClient(0).chat(ChatRequest(model="m", system="s", user="hello")).text
    assert "traffic" in out


# ---------------------------------------------------------------- HTTP client


def ok_body(text="tanh(queue)"):
    return {"choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": 3, "completion_tokens": 2}}


def test_http_client_requires_key(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    with pytest.raises(ConfigurationError, match=API_KEY_ENV):
        HttpChatClient("http://localhost:1/v1/chat")


def test_http_client_requires_endpoint():
    with pytest.raises(ConfigurationError):
        HttpChatClient("", api_key="k")


def test_http_client_reads_key_from_environment(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "env-key")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        return httpx.Response(200, json=ok_body())

    client = HttpChatClient("http://stub/chat", transport=httpx.MockTransport(handler))
    resp = client.chat(ChatRequest(model="m", system="s", user="u"))
    assert resp.text == "tanh(queue)" and resp.prompt_tokens == 3
    assert seen["auth"] == "Bearer env-key"


def test_http_client_retries_transient_failures():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json=ok_body("x"))

    client = HttpChatClient("http://stub/chat", api_key="k", retries=2, backoff_s=0.0,
                            transport=httpx.MockTransport(handler))
    assert client.chat(ChatRequest(model="m", system="s", user="u")).text == "x"
    assert len(calls) == 3


def test_http_client_gives_up_after_retries():
    def handler(request):
        raise httpx.ConnectError("refused")

    client = HttpChatClient("http://stub/chat", api_key="k", retries=1, backoff_s=0.0,
                            transport=httpx.MockTransport(handler))
    with pytest.raises(TransportError, match="2 attempts"):
        client.chat(ChatRequest(model="m", system="s", user="u"))


def test_http_client_rejects_malformed_body():
    client = HttpChatClient("http://stub/chat", api_key="k",
                            transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"nope": 1})))
    with pytest.raises(TransportError, match="malformed"):
        client.chat(ChatRequest(model="m", system="s", user="u"))


class _Stub(BaseHTTPRequestHandler):
    received: list = []

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        _Stub.received.append((self.headers["Authorization"], json.loads(body)))
        out = json.dumps(ok_body("clip(queue, 0, 1)")).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


def test_http_client_against_a_local_server():
    server = HTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        client = HttpChatClient(f"http://127.0.0.1:{server.server_port}/v1/chat", api_key="secret")
        req = ChatRequest(model="m", system="sys", user="usr")
        assert client.chat(req).text == "clip(queue, 0, 1)"
        client.close()
    finally:
        server.shutdown()
    auth, body = _Stub.received[-1]
    assert auth == "Bearer secret"
    assert body == req.payload()


# ------------------------------------------------------------ record / replay


def test_record_then_replay(tmp_path):
    path = tmp_path / "session.jsonl"
    rec = RecordingClient(MockChatClient(200), path)
    reqs = [reward_request(0.5, attempt=k) for k in (1, 2, 3)]
    live = [rec.chat(r).text for r in reqs]
    assert len(path.read_text().splitlines()) == 3
    replay = ReplayClient(path)
    assert [replay.chat(r).text for r in reqs] == live
    # exhausted keys repeat their last recording
    assert replay.chat(reqs[0]).text == live[0]
    with pytest.raises(TransportError):
        replay.chat(reward_request(0.9))


def test_replay_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        ReplayClient(tmp_path / "missing.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json}\n")
    with pytest.raises(ConfigurationError, match="bad.jsonl:1"):
        ReplayClient(bad)


def test_mock_repeats_itself_for_one_request():
    client = MockChatClient(7)
    req = reward_request(0.5)
    assert len({client.chat(req).text for _ in range(100)}) == 1
