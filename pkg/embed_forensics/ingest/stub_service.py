"""
An in-process stand-in for the embedding service.

Speaks the same wire protocol as a real service::

    POST {base_url}/embed  {"texts": [...]}  ->  {"embeddings": [[...], ...]}

and records every request, which makes it useful for tests and for offline
demonstrations of the ``embed`` command.
"""

import hashlib
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


def hashed_vector(text, dims=4):
    """Deterministic pseudo-embedding of ``text`` with entries in [0, 1]."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [digest[i % len(digest)] / 255.0 for i in range(dims)]


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        stub = self.server.stub
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        status, payload = stub.respond(self.path, dict(self.headers), body)
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format, *args):
        logging.getLogger(StubEmbeddingService.__name__).debug(format, *args)


class StubEmbeddingService:
    """
    Local HTTP server answering ``/embed`` requests.

    Parameters
    ----------
    embed : callable, optional
        ``embed(text) -> vector`` (D floats) or per-token states
        (m x D nested list). Defaults to :func:`hashed_vector`.
    fail_first : int, optional
        Answer the first ``fail_first`` requests with ``fail_status``.
    fail_status : int, optional
    drop_rows : int, optional
        Leave this many rows off the end of every response.
    required_token : str, optional
        Reject requests without ``Authorization: Bearer <token>``.
    """

    def __init__(
        self,
        embed=None,
        *,
        fail_first=0,
        fail_status=503,
        drop_rows=0,
        required_token=None,
        host="127.0.0.1",
        port=0,
    ):
        self.embed = embed or hashed_vector
        self.fail_first = fail_first
        self.fail_status = fail_status
        self.drop_rows = drop_rows
        self.required_token = required_token
        self.requests = []
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer((host, port), _Handler)
        self._server.stub = self
        self._thread = None

    @property
    def url(self):
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def respond(self, path, headers, body):
        with self._lock:
            self.requests.append(body)
            n_seen = len(self.requests)
        if path.rstrip("/") != "/embed":
            return 404, {"error": f"unknown endpoint {path}"}
        if self.required_token is not None:
            if headers.get("Authorization") != f"Bearer {self.required_token}":
                return 401, {"error": "missing or wrong token"}
        if n_seen <= self.fail_first:
            return self.fail_status, {"error": "injected failure"}
        texts = body.get("texts", [])
        embeddings = [self.embed(text) for text in texts]
        if self.drop_rows:
            embeddings = embeddings[: max(0, len(embeddings) - self.drop_rows)]
        return 200, {"embeddings": embeddings}

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()
        self._thread = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        return False
