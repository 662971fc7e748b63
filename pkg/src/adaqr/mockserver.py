"""In-process stand-in for an OpenAI-compatible chat/embeddings endpoint.

Used by the test suite and handy for dry runs of the ``rewrite`` command::

    with MockLlmServer(reply="R") as srv:
        cfg = LlmEndpointConfig(base_url=srv.base_url, model_name="mock")
"""

from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np


def _hash_vector(text: str, dim: int) -> list[float]:
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return (v / np.linalg.norm(v)).tolist()


class MockLlmServer:
    """Serves ``/chat/completions`` and ``/embeddings`` on 127.0.0.1.

    ``statuses`` is a queue of HTTP status codes returned (with an error body)
    before normal replies resume. ``reply`` may be a string or a callable
    taking the prompt. ``request_count`` counts every POST received.
    """

    def __init__(self, reply="reasoned rewrite", statuses=(), embed_dim=8,
                 embedding=None, usage=(12, 34)):
        self.reply = reply
        self.statuses = list(statuses)
        self.embed_dim = embed_dim
        self.embedding = embedding
        self.usage = usage
        self.request_count = 0
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        self._server = None
        self._thread = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def _handler(self):
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, status, body):
                data = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(n) or b"{}")
                except ValueError:
                    payload = {}
                with mock._lock:
                    mock.request_count += 1
                    mock.requests.append({"path": self.path, "body": payload, "headers": dict(self.headers)})
                    status = mock.statuses.pop(0) if mock.statuses else 200
                if status != 200:
                    self._send(status, {"error": {"message": f"mock status {status}"}})
                    return
                if self.path.endswith("/chat/completions"):
                    prompt = payload.get("messages", [{}])[-1].get("content", "")
                    text = mock.reply(prompt) if callable(mock.reply) else mock.reply
                    self._send(200, {
                        "object": "chat.completion",
                        "model": payload.get("model"),
                        "choices": [{"index": 0, "message": {"role": "assistant", "content": text},
                                     "finish_reason": "stop"}],
                        "usage": {"prompt_tokens": mock.usage[0], "completion_tokens": mock.usage[1],
                                  "total_tokens": sum(mock.usage)},
                    })
                elif self.path.endswith("/embeddings"):
                    text = payload.get("input", "")
                    vec = mock.embedding if mock.embedding is not None else _hash_vector(text, mock.embed_dim)
                    self._send(200, {"object": "list", "data": [{"index": 0, "embedding": list(vec)}]})
                else:
                    self._send(404, {"error": {"message": "not found"}})

        return Handler

    def start(self):
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._thread = threading.Thread(target=self._server.serve_forever, args=(0.05,), daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
