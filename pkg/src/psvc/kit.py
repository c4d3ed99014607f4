"""Building blocks for writing a personal service.

A personal service is an ordinary loopback HTTP server whose listening
port arrives as the final command-line argument (the broker allocates
it at launch).  The kit turns that convention into a context, spots
proxy-built invocation requests, and renders the page that hands
results back to the SP via an auto-submitting POST form.
"""

from __future__ import annotations

import html
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping, Sequence
from urllib.parse import parse_qs, urlsplit

from .protocol import H_INVOCATION
from .transcript import SERVE, Transcript


class BootstrapError(ValueError):
    """The launch convention was not honored; the service must not start."""


@dataclass(frozen=True)
class ServiceContext:
    """Where this service instance must listen."""

    port: int
    bind_address: str = "127.0.0.1"

    def __post_init__(self) -> None:
        if not self.bind_address.startswith("127."):
            raise BootstrapError("personal services bind loopback addresses only")
        if not 0 < self.port < 65536:
            raise BootstrapError(f"port {self.port} out of range")


def bootstrap(argv: Sequence[str]) -> ServiceContext:
    """Read the broker-assigned port from the end of argv."""
    if not argv:
        raise BootstrapError("no arguments: expected the listening port last")
    last = argv[-1]
    try:
        port = int(last)
    except ValueError:
        raise BootstrapError(f"last argument {last!r} is not a port number") from None
    return ServiceContext(port=port)


def detect_psvc_invocation(headers: Mapping[str, str]) -> bool:
    """True when a request was built by a redirection-aware proxy.

    Such requests carry both a Referer naming the SP and the
    proxy-added invocation marker.
    """
    lowered = {k.lower(): v for k, v in headers.items()}
    return bool(lowered.get("referer")) and lowered.get(H_INVOCATION.lower()) == "1"


_AUTO_FORM = """<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{title}</title></head>
<body onload="document.forms[0].submit()">
<p>{message}</p>
<form method="POST" action="{action}" data-autosubmit="1">
{inputs}
<noscript><button type="submit">Continue</button></noscript>
</form>
</body></html>
"""


def sp_return_page(
    fields: Mapping[str, str],
    sp_callback: str,
    *,
    title: str = "Returning to the service provider",
    message: str = "Handing the result back...",
) -> bytes:
    """HTML that auto-POSTs the given fields to the SP.

    With an empty callback there is nowhere to return to, so a plain
    terminal page is produced instead.
    """
    if not sp_callback:
        return (
            "<!DOCTYPE html><html><body><p>"
            + html.escape(message)
            + "</p></body></html>"
        ).encode("utf-8")
    inputs = "\n".join(
        f'<input type="hidden" name="{html.escape(k, quote=True)}" '
        f'value="{html.escape(str(v), quote=True)}">'
        for k, v in fields.items()
    )
    page = _AUTO_FORM.format(
        title=html.escape(title),
        message=html.escape(message),
        action=html.escape(sp_callback, quote=True),
        inputs=inputs,
    )
    return page.encode("utf-8")


@dataclass(frozen=True)
class KitRequest:
    method: str
    path: str
    query: dict[str, str]
    headers: tuple[tuple[str, str], ...]
    body: bytes

    def header(self, name: str) -> str | None:
        low = name.lower()
        for key, value in self.headers:
            if key.lower() == low:
                return value
        return None

    def form(self) -> dict[str, str]:
        """Decode an application/x-www-form-urlencoded body."""
        parsed = parse_qs(self.body.decode("utf-8", "replace"), keep_blank_values=True)
        return {k: v[0] for k, v in parsed.items()}


@dataclass(frozen=True)
class KitResponse:
    status: int = 200
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""

    @classmethod
    def html(cls, markup: bytes | str, status: int = 200) -> "KitResponse":
        body = markup.encode("utf-8") if isinstance(markup, str) else markup
        return cls(status, (("Content-Type", "text/html; charset=utf-8"),), body)

    @classmethod
    def text(cls, message: str, status: int = 200) -> "KitResponse":
        return cls(
            status,
            (("Content-Type", "text/plain; charset=utf-8"),),
            message.encode("utf-8"),
        )


class ServiceServer:
    """Tiny loopback HTTP server driven by one handler function."""

    def __init__(
        self,
        context: ServiceContext,
        handler: Callable[[KitRequest], KitResponse],
        *,
        actor: str = "Service",
    ):
        self.context = context
        self.handler = handler
        self.transcript = Transcript.from_env(actor)
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt: str, *args) -> None:
                pass

            def _run(self) -> None:
                parts = urlsplit(self.path)
                length = int(self.headers.get("Content-Length") or 0)
                request = KitRequest(
                    method=self.command,
                    path=parts.path,
                    query={k: v[0] for k, v in parse_qs(parts.query).items()},
                    headers=tuple(self.headers.items()),
                    body=self.rfile.read(length) if length else b"",
                )
                response = outer.handler(request)
                outer.transcript.emit(
                    SERVE,
                    request.method,
                    self.path,
                    response.status,
                    in_err=request.header("PSvc-Error"),
                )
                self.send_response_only(response.status)
                for key, value in response.headers:
                    self.send_header(key, value)
                self.send_header("Content-Length", str(len(response.body)))
                self.send_header("Connection", "close")
                self.end_headers()
                if response.body and self.command != "HEAD":
                    self.wfile.write(response.body)

            do_GET = do_POST = do_HEAD = _run

        self._httpd = ThreadingHTTPServer((context.bind_address, context.port), _Handler)
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

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
