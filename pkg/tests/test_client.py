import base64
import copy
import json
import random
from pathlib import Path

import pytest
from helpers import tiny_png

from iclcontrast import client as client_mod
from iclcontrast.abt import Meme, build_prompt
from iclcontrast.client import (
    ChatClient,
    ChatRequest,
    ClientConfig,
    MockTransport,
    TransportFailure,
    backoff_schedule,
    complete,
    detect_media_type,
    file_image_loader,
    render_script,
)
from iclcontrast.errors import InputError, ProtocolError, RequestError, TransportError, ValidationError

GOLDEN = Path(__file__).parent / "golden"


def request(text="hello"):
    return ChatRequest(model="m", messages=[{"role": "user", "content": [{"type": "text", "text": text}]}])


def make_client(transport, **kw):
    sleeps = []
    cfg = ClientConfig(base_url="http://mock.test/v1", **kw)
    return ChatClient(cfg, transport=transport, sleep=sleeps.append, jitter=random.Random(0)), sleeps


def test_verbatim_reply():
    c, _ = make_client(MockTransport(["  Benign.\n"]))
    assert c.complete(request()) == ("  Benign.\n", "stop")
    assert (c.requests, c.retries) == (1, 0)


def test_rate_limit_then_success_counts_retries():
    transport = MockTransport([(429, b"slow down"), (429, b"slow down"), "ok"])
    c, sleeps = make_client(transport, max_retries=3)
    assert c.complete(request())[0] == "ok"
    assert c.retries == 2 and len(transport.calls) == 3
    assert len(sleeps) == 2


def test_server_errors_and_transport_failures_are_retried():
    transport = MockTransport([(503, b"busy"), TransportFailure("reset"), "done"])
    c, _ = make_client(transport, max_retries=2)
    assert c.complete(request())[0] == "done"


def test_invalid_json_is_protocol_error_without_retry():
    transport = MockTransport([(200, b"{not json")])
    c, _ = make_client(transport)
    with pytest.raises(ProtocolError):
        c.complete(request())
    assert len(transport.calls) == 1


def test_missing_choices_is_protocol_error():
    c, _ = make_client(MockTransport([(200, b'{"choices": []}')]))
    with pytest.raises(ProtocolError):
        c.complete(request())


def test_client_error_status_is_not_retried():
    transport = MockTransport([(401, b"bad key")])
    c, _ = make_client(transport)
    with pytest.raises(RequestError) as info:
        c.complete(request())
    assert info.value.status == 401 and "bad key" in info.value.excerpt
    assert len(transport.calls) == 1


def test_exhausted_retries_raise_transport_error():
    transport = MockTransport([(500, b"x")] * 4)
    c, sleeps = make_client(transport, max_retries=3)
    with pytest.raises(TransportError):
        c.complete(request())
    assert len(transport.calls) == 4 and len(sleeps) == 3


def test_backoff_schedule_and_jitter():
    delays = backoff_schedule(5)
    assert delays == [0.5, 1.0, 2.0, 4.0, 8.0]
    assert all(a <= b for a, b in zip(delays, delays[1:]))
    transport = MockTransport([(429, b"")] * 3 + ["ok"])
    c, sleeps = make_client(transport, max_retries=3)
    c.complete(request())
    for base, slept in zip(delays, sleeps):
        assert base <= slept <= 1.25 * base


def test_peak_concurrency_is_bounded():
    from concurrent.futures import ThreadPoolExecutor

    transport = MockTransport(responder=lambda body: "ok", delay_s=0.01)
    c, _ = make_client(transport, max_concurrency=3)
    with ThreadPoolExecutor(max_workers=10) as pool:
        replies = list(pool.map(lambda i: c.complete(request(str(i)))[0], range(30)))
    assert replies == ["ok"] * 30
    assert 1 <= transport.peak_in_flight <= 3


def test_request_is_not_mutated():
    req = request()
    before = copy.deepcopy(req.to_body())
    c, _ = make_client(MockTransport([(429, b""), "ok"]))
    c.complete(req)
    assert req.to_body() == before


def test_bearer_header_from_environment(monkeypatch):
    monkeypatch.setenv("TEST_CHAT_KEY", "sk-test")
    transport = MockTransport(["ok"])
    c, _ = make_client(transport, api_key_env="TEST_CHAT_KEY")
    c.complete(request())
    call = transport.calls[0]
    assert call["headers"]["Authorization"] == "Bearer sk-test"
    assert call["url"] == "http://mock.test/v1/chat/completions"
    monkeypatch.delenv("TEST_CHAT_KEY")
    transport = MockTransport(["ok"])
    c, _ = make_client(transport, api_key_env="TEST_CHAT_KEY")
    c.complete(request())
    assert "Authorization" not in transport.calls[0]["headers"]


def test_module_level_complete():
    assert complete(request(), ClientConfig(base_url="http://x.test"), transport=MockTransport(["hi"]))[0] == "hi"


def test_request_and_config_validation():
    with pytest.raises(ValidationError):
        ChatRequest("m", [{"role": "tool", "content": []}])
    with pytest.raises(ValidationError):
        ChatRequest("m", [{"role": "user", "content": []}, {"role": "system", "content": []}])
    with pytest.raises(ValidationError):
        ChatRequest("m", [], temperature=-1)
    with pytest.raises(ValidationError):
        ClientConfig(base_url="localhost:8000")
    with pytest.raises(ValidationError):
        ClientConfig(max_concurrency=0)


def test_render_inlines_png():
    m = Meme("q", "q.png", "cap", 0)
    req = render_script(build_prompt("zsl", m), image_loader=lambda ref: tiny_png(5))
    assert req.n_images == 1
    url = req.messages[1]["content"][0]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    assert base64.b64decode(url.split(",", 1)[1]) == tiny_png(5)


def test_render_text_only_and_remote_images():
    script = build_prompt("zsl", Meme("q", "https://img.test/q.png", "cap", 0))
    req = render_script(script, image_loader=lambda ref: pytest.fail("remote images are not loaded"))
    assert req.messages[1]["content"][0]["image_url"]["url"] == "https://img.test/q.png"

    class TextOnly:
        turns = [("system", ["be brief"]), ("user", ["hello"])]

    assert render_script(TextOnly()).n_images == 0


def test_render_large_file_passed_by_url(tmp_path, monkeypatch):
    monkeypatch.setattr(client_mod, "INLINE_LIMIT", 16)
    path = tmp_path / "big.png"
    path.write_bytes(tiny_png(9))
    req = render_script(build_prompt("zsl", Meme("q", "big.png", "c", 0)), image_loader=file_image_loader(tmp_path))
    assert req.messages[1]["content"][0]["image_url"]["url"] == path.resolve().as_uri()


def test_render_golden_body():
    img = {"q.png": tiny_png(7)}
    m = Meme("q1", "q.png", "you look lovely today", 0)
    req = render_script(build_prompt("abt", m, anchor="A calm lake."), image_loader=img.__getitem__,
                        model="llava-test")
    assert req.encode() == (GOLDEN / "request_abt.json").read_bytes()
    body = json.loads(req.encode())
    assert [msg["role"] for msg in body["messages"]] == ["system", "user", "assistant", "user"]


def test_media_type_detection_and_loader_errors(tmp_path):
    assert detect_media_type(b"\xff\xd8\xff\xe0rest") == "image/jpeg"
    assert detect_media_type(b"RIFF\x00\x00\x00\x00WEBPVP8 ") == "image/webp"
    with pytest.raises(InputError):
        detect_media_type(b"plain text")
    with pytest.raises(InputError):
        file_image_loader(tmp_path)("missing.png")
