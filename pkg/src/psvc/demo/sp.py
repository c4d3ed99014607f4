"""Demo service provider: a site that authenticates via a personal service.

Without a valid session cookie, the front page redirects to /login.
When the client announces redirection support (PSvc-Version), /login
answers 311 asking for an authentication service; the resolved handle
comes back on /wp-callback, which answers 312 to invoke the service.
The service runs its dialog with the user and finally auto-POSTs the
result to /result, where a nonce echo is checked, the session cookie is
set, and the browser is sent back to the original page.

Fault switches let scenarios exercise the error paths: a 311 with no
query, a tampered handle, or a forged broker-result redirection.
"""

from __future__ import annotations

import json
import logging
import secrets
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import parse_qs, quote, urlsplit

from ..protocol import (
    BROKER_RESULT,
    H_CALLBACK,
    H_ERROR,
    H_METHOD,
    H_PARAMETERS,
    H_SERVICE,
    H_VERSION,
    REASON_PHRASES,
    SERVICE_CALL,
    WHITE_PAGES,
    YELLOW_PAGES,
    decode_broker_result,
    speaks_version,
)
from ..transcript import SERVE, Transcript

log = logging.getLogger(__name__)

COOKIE_NAME = "psvc_auth"

DEFAULT_WP_QUERY: dict[str, Any] = {
    "Purpose": "authentication",
    "Device": "Portuguese eID",
}

DEFAULT_YP_QUERY: dict[str, Any] = {"Purpose": "authentication"}

FAULT_MALFORMED_311 = "malformed-311"
FAULT_TAMPER_HANDLE = "tamper-handle"
FAULTS = (FAULT_MALFORMED_311, FAULT_TAMPER_HANDLE)


@dataclass
class SPConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    wp_query: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_WP_QUERY))
    yp_query: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_YP_QUERY))
    fault: str | None = None
    evil_location: str | None = None
    # Extra headers/body attached to the 312, carried to the service.
    invoke_extra_headers: tuple[tuple[str, str], ...] = ()
    invoke_extra_body: bytes = b""


@dataclass
class _Session:
    sid: str
    nonce: str
    next_url: str
    error: str | None = None


def _tamper(handle: str) -> str:
    """Flip one character in the middle, staying in the transport alphabet."""
    mid = len(handle) // 2
    swapped = "B" if handle[mid] != "B" else "C"
    return handle[:mid] + swapped + handle[mid + 1 :]


def _page(title: str, body: str) -> bytes:
    return (
        f"<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{title}</title></head>\n<body>{body}</body></html>\n"
    ).encode("utf-8")


class DemoSP:
    """State plus route handlers; the HTTP plumbing lives in _Handler."""

    def __init__(self, config: SPConfig):
        self.config = config
        self.transcript = Transcript.from_env("SP")
        self.sessions: dict[str, _Session] = {}
        self.cookies: dict[str, str] = {}  # token -> user
        self.lock = threading.Lock()
        self._httpd = _SPHTTPServer((config.host, config.port), _Handler)
        self._httpd.sp = self
        self.port = self._httpd.server_address[1]
        self._thread: threading.Thread | None = None

    @property
    def netloc(self) -> str:
        return f"{self.config.host}:{self.port}"

    def absolute(self, path: str) -> str:
        return f"http://{self.netloc}{path}"

    # -- session helpers ---------------------------------------------------

    def new_session(self, next_url: str) -> _Session:
        session = _Session(
            sid=secrets.token_urlsafe(8),
            nonce=secrets.token_urlsafe(12),
            next_url=next_url,
        )
        with self.lock:
            self.sessions[session.sid] = session
        return session

    def session(self, sid: str | None) -> _Session | None:
        with self.lock:
            return self.sessions.get(sid or "")

    def issue_cookie(self, user: str) -> str:
        token = secrets.token_urlsafe(16)
        with self.lock:
            self.cookies[token] = user
        return token

    def user_for_cookie(self, header: str | None) -> str | None:
        if not header:
            return None
        for part in header.split(";"):
            name, _, value = part.strip().partition("=")
            if name == COOKIE_NAME:
                with self.lock:
                    return self.cookies.get(value)
        return None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._thread = threading.Thread(
            target=lambda: self._httpd.serve_forever(poll_interval=0.1), daemon=True
        )
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class _SPHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    sp: DemoSP


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: _SPHTTPServer

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    # -- plumbing ---------------------------------------------------------

    def _finish(
        self,
        status: int,
        headers: list[tuple[str, str]],
        body: bytes = b"",
        **detail,
    ) -> None:
        sp = self.server.sp
        # Log before the bytes leave so transcript order follows causality.
        sp.transcript.emit(
            SERVE,
            self.command,
            self.path,
            status,
            in_err=self.headers.get(H_ERROR),
            **detail,
        )
        self.send_response_only(status, REASON_PHRASES.get(status))
        for key, value in headers:
            self.send_header(key, value)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        self.end_headers()
        if body and self.command != "HEAD":
            self.wfile.write(body)

    def _html(self, status: int, title: str, markup: str, **detail) -> None:
        self._finish(
            status,
            [("Content-Type", "text/html; charset=utf-8")],
            _page(title, markup),
            **detail,
        )

    def _redirect(self, to: str) -> None:
        self._finish(302, [("Location", to)], loc=to)

    def _query(self) -> dict[str, str]:
        parsed = parse_qs(urlsplit(self.path).query, keep_blank_values=True)
        return {k: v[0] for k, v in parsed.items()}

    def _form(self) -> dict[str, str]:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length).decode("utf-8", "replace") if length else ""
        return {k: v[0] for k, v in parse_qs(raw, keep_blank_values=True).items()}

    # -- routes -------------------------------------------------------------

    def do_GET(self) -> None:
        path = urlsplit(self.path).path
        if path == "/":
            self._front()
        elif path == "/login":
            self._login()
        elif path == "/discover":
            self._discover()
        elif path == "/evil313":
            self._evil313()
        else:
            self._html(404, "Not found", "<p>no such page</p>")

    def do_POST(self) -> None:
        path = urlsplit(self.path).path
        if path == "/wp-callback":
            self._wp_callback()
        elif path == "/yp-callback":
            self._yp_callback()
        elif path == "/invoke-error":
            self._invoke_error()
        elif path == "/result":
            self._result()
        else:
            self._html(404, "Not found", "<p>no such page</p>")

    def _front(self) -> None:
        sp = self.server.sp
        user = sp.user_for_cookie(self.headers.get("Cookie"))
        if user is None:
            self._redirect(sp.absolute("/login?next=/"))
            return
        self._html(
            200,
            "Members area",
            f"<h1>Members area</h1><p>authenticated as {user}</p>",
        )

    def _login(self) -> None:
        sp = self.server.sp
        if sp.user_for_cookie(self.headers.get("Cookie")) is not None:
            self._redirect(sp.absolute(self._query().get("next", "/")))
            return
        if not speaks_version(self.headers.get(H_VERSION)):
            self._html(
                200,
                "Sign in",
                "<p>this site signs users in through a personal service, "
                "which your client does not announce</p>",
            )
            return
        session = sp.new_session(self._query().get("next", "/"))
        headers = [(H_CALLBACK, sp.absolute(f"/wp-callback?sid={session.sid}"))]
        if sp.config.fault != FAULT_MALFORMED_311:
            headers.insert(0, (H_SERVICE, json.dumps(sp.config.wp_query)))
        self._finish(WHITE_PAGES, headers, svc="query")

    def _discover(self) -> None:
        sp = self.server.sp
        if not speaks_version(self.headers.get(H_VERSION)):
            self._html(200, "Discovery", "<p>client announces no redirection support</p>")
            return
        headers = [
            (H_SERVICE, json.dumps(sp.config.yp_query)),
            (H_CALLBACK, sp.absolute("/yp-callback")),
        ]
        self._finish(YELLOW_PAGES, headers, svc="query")

    def _evil313(self) -> None:
        sp = self.server.sp
        target = self._query().get("to") or sp.config.evil_location or "http://127.0.0.1:9/"
        self._finish(BROKER_RESULT, [("Location", target), (H_SERVICE, "forged")], loc=target)

    def _wp_callback(self) -> None:
        sp = self.server.sp
        session = sp.session(self._query().get("sid"))
        if session is None:
            self._html(403, "Unknown session", "<p>no such sign-in attempt</p>")
            return
        error = self.headers.get(H_ERROR)
        if error:
            session.error = error
            self._html(
                200,
                "Sign-in unavailable",
                f"<p>authentication unavailable: {error}</p>",
            )
            return
        raw = self.headers.get(H_SERVICE)
        envelope = None
        if raw:
            try:
                envelope = decode_broker_result(raw)
            except ValueError as exc:
                log.warning("unusable broker result: %s", exc)
        if envelope is None or not isinstance(envelope.response, dict):
            session.error = "empty"
            self._html(
                200,
                "Sign-in unavailable",
                "<p>authentication unavailable: no personal service found</p>",
            )
            return

        handle = envelope.response["handle"]
        if sp.config.fault == FAULT_TAMPER_HANDLE:
            handle = _tamper(handle)
        return_url = quote(sp.absolute("/result"), safe="")
        headers = [
            (H_SERVICE, json.dumps({"handle": handle})),
            (H_METHOD, "GET"),
            (
                H_PARAMETERS,
                f"/auth?return={return_url}&sid={session.sid}&nonce={session.nonce}",
            ),
            (H_CALLBACK, sp.absolute(f"/invoke-error?sid={session.sid}")),
        ]
        headers.extend(sp.config.invoke_extra_headers)
        self._finish(SERVICE_CALL, headers, sp.config.invoke_extra_body, svc="handle")

    def _yp_callback(self) -> None:
        raw = self.headers.get(H_SERVICE)
        error = self.headers.get(H_ERROR)
        if error or not raw:
            self._html(200, "Discovery", f"<p>listing failed: {error or 'no result'}</p>")
            return
        try:
            envelope = decode_broker_result(raw)
            names = envelope.response if isinstance(envelope.response, list) else []
        except ValueError:
            names = []
        items = "".join(
            f"<li>{json.dumps(name, ensure_ascii=False)}</li>" for name in names
        )
        self._html(
            200,
            "Discovery",
            f"<p>{len(names)} service(s) available</p><ul>{items}</ul>",
            svc=f"names[{len(names)}]",
        )

    def _invoke_error(self) -> None:
        sp = self.server.sp
        session = sp.session(self._query().get("sid"))
        error = self.headers.get(H_ERROR) or "unknown"
        if session is not None:
            session.error = error
        self._html(
            200,
            "Sign-in failed",
            f"<p>authentication failed: {error}</p>",
        )

    def _result(self) -> None:
        sp = self.server.sp
        form = self._form()
        session = sp.session(form.get("sid"))
        if session is None or form.get("nonce") != session.nonce:
            self._html(403, "Rejected", "<p>result does not match any sign-in attempt</p>")
            return
        user = form.get("user", "someone")
        token = sp.issue_cookie(user)
        self._finish(
            302,
            [
                ("Set-Cookie", f"{COOKIE_NAME}={token}; Path=/"),
                ("Location", sp.absolute(session.next_url)),
            ],
            loc=sp.absolute(session.next_url),
            setcookie=1,
        )
