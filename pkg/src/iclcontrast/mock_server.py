"""Scripted chat-completions server for hermetic end-to-end runs.

The script is JSON::

    {"anchor": "A dog on a beach.",
     "replies": {"<caption text>": "Benign."},
     "replies_by_lt": {"abt": {"<caption text>": "hateful"}},
     "default_reply": "benign",
     "fail_first": 0}

Caption requests get ``anchor``. Classification requests are matched on the
caption (the text after the question's line break in the last user turn);
``replies_by_lt`` takes precedence over ``replies``. The first ``fail_first``
requests get HTTP 429.

Run standalone with ``python -m iclcontrast.mock_server script.json --port 8009``.
"""

from __future__ import annotations

import argparse
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .abt import ABT_QUESTION, CAPTION_REQUEST
from .client import chat_response


def _texts(message: dict) -> list[str]:
    content = message.get("content")
    if isinstance(content, str):
        return [content]
    return [p.get("text", "") for p in content or [] if p.get("type") == "text"]


def learning_type(messages: list) -> str:
    if any(m["role"] == "assistant" for m in messages):
        last = " ".join(_texts(messages[-1]))
        return "abt" if last.startswith(ABT_QUESTION) else "icl"
    return "zsl"


def reply_for(script: dict, body: dict) -> str:
    messages = body["messages"]
    last = "\n".join(_texts(messages[-1]))
    if last.strip() == CAPTION_REQUEST:
        return script.get("anchor", "A picture.")
    caption = last.split("\n", 1)[1] if "\n" in last else last
    lt = learning_type(messages)
    by_lt = script.get("replies_by_lt", {}).get(lt, {})
    if caption in by_lt:
        return by_lt[caption]
    return script.get("replies", {}).get(caption, script.get("default_reply", "benign"))


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802
        server = self.server
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        with server.lock:
            server.requests += 1
            fail = server.requests <= server.script.get("fail_first", 0)
        if not self.path.rstrip("/").endswith("/chat/completions"):
            self._send(404, b'{"error": "not found"}')
            return
        if fail:
            self._send(429, b'{"error": "rate limited"}')
            return
        try:
            body = json.loads(raw)
        except ValueError:
            self._send(400, b'{"error": "invalid json"}')
            return
        self._send(200, chat_response(reply_for(server.script, body)))

    def _send(self, status: int, payload: bytes):
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, fmt, *args):
        pass


def serve(script: dict, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start the server on a daemon thread; ``server.server_address`` gives the port."""
    server = ThreadingHTTPServer((host, port), _Handler)
    server.script = script
    server.lock = threading.Lock()
    server.requests = 0
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


def base_url(server: ThreadingHTTPServer) -> str:
    host, port = server.server_address[:2]
    return f"http://{host}:{port}/v1"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("script")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8009)
    args = parser.parse_args(argv)
    with open(args.script) as fh:
        script = json.load(fh)
    server = serve(script, args.host, args.port)
    print(f"serving on {base_url(server)}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.shutdown()


if __name__ == "__main__":
    main()
