import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from bridgelm.forge.client import (
    AuthError,
    ChatClient,
    ClientConfig,
    ClientConfigError,
    MockChatService,
    MockJudge,
    ResponseParseError,
    ServiceError,
    complete_many,
)
from bridgelm.forge.parse import Dialogue, parse_dialogue
from bridgelm.forge.prompts import build_messages, render_amassment
from bridgelm.forge.records import MergedImageContext

CANNED = "Question: What is shown?\nAnswer: A red bus."


class Script:
    """Queue of (status, body) replies; the last entry repeats."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        self.lock = threading.Lock()

    def next(self):
        with self.lock:
            return self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]


def ok_body(text=CANNED):
    return {"id": "req-1", "choices": [{"message": {"role": "assistant", "content": text}}], "usage": {"total_tokens": 12}}


@pytest.fixture
def server():
    script = Script([(200, ok_body())])

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            script.requests.append({"body": body, "auth": self.headers.get("Authorization")})
            status, payload = script.next()
            raw = payload.encode() if isinstance(payload, str) else json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, *args):
            pass

    httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    script.url = f"http://127.0.0.1:{httpd.server_address[1]}/v1/chat/completions"
    yield script
    httpd.shutdown()


def client(script, **kw):
    cfg = ClientConfig(endpoint=script.url, model="test-model", backoff_base=0.001, timeout=5, **kw)
    return ChatClient(cfg, token="secret")


MSGS = [{"role": "user", "content": "hi"}]


def test_echo_verbatim_and_wire_contract(server):
    out = client(server).complete(MSGS)
    assert out.text == CANNED and out.attempts == 1
    assert out.request_id == "req-1" and out.usage == {"total_tokens": 12}
    req = server.requests[0]
    assert req["body"] == {"model": "test-model", "messages": MSGS, "temperature": 0.7}
    assert req["auth"] == "Bearer secret"


def test_rate_limit_then_success(server):
    server.replies = [(429, {"error": "slow down"}), (429, {"error": "slow down"}), (200, ok_body())]
    out = client(server).complete(MSGS)
    assert out.attempts == 3 and out.text == CANNED


def test_persistent_500(server):
    server.replies = [(500, {"error": "boom"})]
    with pytest.raises(ServiceError) as exc:
        client(server).complete(MSGS)
    assert exc.value.attempts == 3 and len(server.requests) == 3


def test_auth_failure_not_retried(server):
    server.replies = [(401, {"error": "bad key"})]
    with pytest.raises(AuthError):
        client(server).complete(MSGS)
    assert len(server.requests) == 1


def test_malformed_body(server, caplog):
    server.replies = [(200, "not json at all")]
    with pytest.raises(ResponseParseError) as exc:
        client(server).complete(MSGS)
    assert exc.value.payload == "not json at all"
    assert "not json at all" in caplog.text


def test_missing_choices(server):
    server.replies = [(200, {"usage": {}})]
    with pytest.raises(ResponseParseError):
        client(server).complete(MSGS)


def test_transport_error_retried():
    cfg = ClientConfig(endpoint="http://127.0.0.1:9/none", backoff_base=0.001, timeout=0.5, max_attempts=2)
    with pytest.raises(ServiceError) as exc:
        ChatClient(cfg, token="t").complete(MSGS)
    assert exc.value.attempts == 2


def test_backoff_is_exponential(server):
    server.replies = [(503, {}), (503, {}), (200, ok_body())]
    sleeps = []
    c = ChatClient(ClientConfig(endpoint=server.url, backoff_base=0.5), token="t", sleep=sleeps.append)
    c.complete(MSGS)
    assert sleeps == [0.5, 1.0]


def test_token_from_env(monkeypatch):
    monkeypatch.delenv("MY_KEY", raising=False)
    cfg = ClientConfig(auth_env="MY_KEY")
    with pytest.raises(ClientConfigError, match="MY_KEY"):
        cfg.token()
    monkeypatch.setenv("MY_KEY", "abc")
    assert cfg.token() == "abc"


def test_bounded_parallelism():
    class Slow:
        def __init__(self):
            self.active = self.peak = 0
            self.lock = threading.Lock()

        def complete(self, messages):
            with self.lock:
                self.active += 1
                self.peak = max(self.peak, self.active)
            time.sleep(0.02)
            with self.lock:
                self.active -= 1
            return MockChatService().complete(messages)

    svc = Slow()
    jobs = [(str(i), [{"role": "user", "content": "[Image statements]\n\n[Conversation]"}]) for i in range(12)]
    results = dict(complete_many(svc, jobs, parallelism=3))
    assert len(results) == 12 and svc.peak <= 3


def test_mock_service_dialogue_parses():
    ctx = MergedImageContext("m", vqav2_qas=[("What color?", "red")], captions=["A red bus."])
    out = MockChatService().complete(build_messages(render_amassment(ctx)))
    d = parse_dialogue(out.text)
    assert isinstance(d, Dialogue) and d.rounds == 2
    assert d.turns[0] == ("user", "Can you describe the image?")


def test_mock_judge_scores_overlap():
    prompt = "[Assistant Response]\nit is red\n\n[Expected Answer]\nred\n\n[Human Answers]\nNone provided."
    assert MockJudge().complete([{"role": "user", "content": prompt}]).text.startswith("5\n")
    prompt = prompt.replace("it is red", "blue")
    assert MockJudge().complete([{"role": "user", "content": prompt}]).text.startswith("1\n")
