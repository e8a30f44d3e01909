"""Transport-neutral requests and responses, plus a stdlib HTTP adapter.

Handlers take a ``Request`` and return a ``Response``. The simulator calls
them in-process; ``serve`` puts them behind a threaded HTTP server.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qsl, urlsplit

from .errors import MalformedRequest

log = logging.getLogger(__name__)

MAX_BODY = 64 * 1024 * 1024


@dataclass
class Request:
    method: str
    path: str
    query: dict = field(default_factory=dict)
    headers: dict = field(default_factory=dict)  # keys lower-cased
    body: bytes = b""

    @classmethod
    def build(cls, method: str, target: str, headers=None, body: bytes = b"") -> "Request":
        parts = urlsplit(target)
        query = dict(parse_qsl(parts.query, keep_blank_values=True))
        hdrs = {k.lower(): v for k, v in (headers or {}).items()}
        return cls(method.upper(), parts.path or "/", query, hdrs, body)

    def bearer_token(self):
        auth = self.headers.get("authorization", "")
        if auth.startswith("Bearer "):
            return auth[7:].strip() or None
        return None

    def json(self):
        try:
            return json.loads(self.body.decode("utf-8") or "null")
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedRequest(f"body is not valid JSON: {exc}") from None

    def wire_size(self) -> int:
        """Approximate bytes on the wire: request line, auth header, body."""
        target = self.path
        if self.query:
            target += "?" + "&".join(f"{k}={v}" for k, v in self.query.items())
        head = f"{self.method} {target} HTTP/1.1\r\n"
        for k, v in sorted(self.headers.items()):
            head += f"{k}: {v}\r\n"
        return len(head.encode()) + 2 + len(self.body)


@dataclass
class Response:
    status: int
    body: bytes = b""
    content_type: str = "application/json"

    def json(self):
        return json.loads(self.body.decode("utf-8"))

    def wire_size(self) -> int:
        head = f"HTTP/1.1 {self.status}\r\nContent-Type: {self.content_type}\r\n\r\n"
        return len(head.encode()) + len(self.body)


def dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def json_response(status: int, obj) -> Response:
    return Response(status, dumps(obj))


def error_response(exc) -> Response:
    body = {"reason": getattr(exc, "reason", "error"), "error": str(exc)}
    if getattr(exc, "evicted", False):
        body["evicted"] = True
    return json_response(getattr(exc, "status", 500), body)


def make_handler_class(dispatch: Callable[[Request], Response]):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _run(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                resp = json_response(413, {"reason": "too_large"})
            else:
                body = self.rfile.read(length) if length else b""
                req = Request.build(self.command, self.path, dict(self.headers.items()), body)
                resp = dispatch(req)
            self.send_response(resp.status)
            self.send_header("Content-Type", resp.content_type)
            self.send_header("Content-Length", str(len(resp.body)))
            self.end_headers()
            self.wfile.write(resp.body)

        do_GET = do_POST = do_PUT = _run

        def log_message(self, fmt, *args):
            log.info("%s %s", self.address_string(), fmt % args)

    return Handler


def serve(dispatch: Callable[[Request], Response], host: str, port: int) -> ThreadingHTTPServer:
    """Bind a threaded server around ``dispatch``. Caller runs ``serve_forever``."""
    return ThreadingHTTPServer((host, port), make_handler_class(dispatch))


def parse_listen(addr: str) -> tuple:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)
