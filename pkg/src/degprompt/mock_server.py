"""Local stand-in for a caption endpoint, for tests and offline demos.

    with MockCaptionServer(mode="echo") as server:
        fetch_caption(server.url, "img.png", "describe")

``mode="echo"`` returns the instruction as the caption and
``mode="fixed"`` always returns ``caption``. Failures are injected with
``fail_first`` (HTTP 500 for the first N requests) and ``fail_when``, a
callable ``(payload) -> bool``. Every decoded request body is kept in
``requests``.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

__all__ = ["MockCaptionServer"]


class MockCaptionServer:
    def __init__(self, mode="echo", caption="a photo", fail_first=0, fail_when=None,
                 model_id="mock-captioner", delay=0.0):
        self.mode = mode
        self.caption = caption
        self.fail_first = fail_first
        self.fail_when = fail_when
        self.model_id = model_id
        self.delay = delay
        self.requests = []
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._thread = None

    @property
    def url(self):
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/caption"

    def _respond(self, payload):
        with self._lock:
            self.requests.append(payload)
            n = len(self.requests)
        if n <= self.fail_first or (self.fail_when is not None and self.fail_when(payload)):
            return 500, {"error": "injected failure"}
        if self.mode == "fixed":
            return 200, {"caption": self.caption, "model_id": self.model_id}
        return 200, {"caption": payload.get("prompt", ""), "model_id": self.model_id}

    def _handler(self):
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length) or b"{}")
                except ValueError:
                    self._send(400, {"error": "bad json"})
                    return
                if mock.delay:
                    threading.Event().wait(mock.delay)
                self._send(*mock._respond(payload))

            def _send(self, status, body):
                data = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        return Handler

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
