"""HTTP surface of the broker.

Callers use HEAD requests; queries, handles, and results travel in
headers, never bodies:

    HEAD /yellow            PSvc-Service: {"Purpose": "authentication"}
                            PSvc-Callback: http://sp:8080/cb
                            Referer: sp:8080
    HEAD /white             same fields, multi-attribute query
    HEAD /resolve?ref=XYZ   PSvc-Service: <handle text>
                            Referer: sp:8080

Every reply is a 313 whose Location is the callback (listings) or
``:<ref>`` (resolution), with PSvc-Service carrying the envelope or
endpoint and PSvc-Error naming any failure.  POST /reload swaps in a
fresh catalog snapshot.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

from ..protocol import (
    BROKER_RESULT,
    ERR_PARAMETERS,
    H_CALLBACK,
    H_ERROR,
    H_SERVICE,
    MalformedDirective,
    REASON_PHRASES,
    decode_white_query,
    decode_yellow_query,
)
from ..transcript import SERVE, SPAWN, Transcript
from .core import Broker, BrokerOptions, BrokerReply, write_endpoint_file
from .runtime import ServiceLauncher

log = logging.getLogger(__name__)


class _BrokerHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    broker: Broker
    transcript: Transcript


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: _BrokerHTTPServer

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def _reply(self, reply: BrokerReply, method: str, path: str, svc_tag: str | None) -> None:
        # Log before the bytes leave: the caller reacts the moment it has
        # them, and transcript order must reflect causality.
        self.server.transcript.emit(
            SERVE,
            method,
            path,
            reply.status,
            loc=reply.location,
            svc=svc_tag if reply.error is None else None,
            err=reply.error,
        )
        self.send_response_only(reply.status, REASON_PHRASES.get(reply.status))
        self.send_header("Location", reply.location)
        if reply.service is not None:
            self.send_header(H_SERVICE, reply.service)
        if reply.error is not None:
            self.send_header(H_ERROR, reply.error)
        self.send_header("Content-Length", "0")
        self.send_header("Connection", "close")
        self.end_headers()

    def _plain(self, status: int, text: str) -> None:
        body = text.encode("utf-8")
        self.send_response_only(status)
        self.send_header("Content-Type", "text/plain; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def do_HEAD(self) -> None:
        parts = urlsplit(self.path)
        broker = self.server.broker
        service = self.headers.get(H_SERVICE)
        callback = self.headers.get(H_CALLBACK)
        sp_host = self.headers.get("Referer")

        if parts.path == "/resolve":
            ref = parse_qs(parts.query).get("ref", [""])[0]
            if not service or not sp_host or not ref:
                self._reply(
                    BrokerReply(location=f":{ref}", error=ERR_PARAMETERS),
                    "HEAD", self.path, None,
                )
                return
            reply = broker.resolve_handle(service, sp_host, ref)
            self._reply(reply, "HEAD", self.path, "endpoint")
            return

        if parts.path in ("/yellow", "/white"):
            if not service or not callback or not sp_host:
                self._reply(
                    BrokerReply(location=callback or ":", error=ERR_PARAMETERS),
                    "HEAD", parts.path, None,
                )
                return
            try:
                if parts.path == "/yellow":
                    query = decode_yellow_query(service)
                    reply = broker.serve_yellow(query, sp_host, callback)
                    names = len(json.loads(reply.service)["response"]) if reply.service else 0
                    self._reply(reply, "HEAD", parts.path, f"names[{names}]")
                else:
                    query = decode_white_query(service)
                    reply = broker.serve_white(query, sp_host, callback)
                    self._reply(reply, "HEAD", parts.path, "handle")
            except MalformedDirective:
                self._reply(
                    BrokerReply(location=callback, error=ERR_PARAMETERS),
                    "HEAD", parts.path, None,
                )
            return

        self._plain(404, "unknown path\n")

    def do_POST(self) -> None:
        if urlsplit(self.path).path == "/reload":
            catalog = self.server.broker.reload_catalog()
            self.server.transcript.emit(SERVE, "POST", "/reload", 200)
            self._plain(200, f"catalog reloaded: {len(catalog)} services\n")
        else:
            self._plain(404, "unknown path\n")

    def do_GET(self) -> None:
        self._plain(405, "use HEAD for broker calls\n")


class BrokerServer:
    """Runs a Broker behind a loopback HTTP endpoint and publishes it."""

    def __init__(
        self,
        ps_dir: Path | str,
        *,
        port: int = 0,
        publish_endpoint: bool = True,
        broker: Broker | None = None,
        options: BrokerOptions | None = None,
    ):
        self.ps_dir = Path(ps_dir)
        self.transcript = Transcript.from_env("Broker")
        if broker is None:
            launcher = ServiceLauncher(on_spawn=self._on_spawn)
            broker = Broker(self.ps_dir, options=options, launcher=launcher)
        self.broker = broker
        self._httpd = _BrokerHTTPServer(("127.0.0.1", port), _Handler)
        self._httpd.broker = self.broker
        self._httpd.transcript = self.transcript
        self.port = self._httpd.server_address[1]
        if publish_endpoint:
            write_endpoint_file(self.ps_dir, self.port)
        self._thread: threading.Thread | None = None

    def _on_spawn(self, descriptor_id: str, port: int, pid: int, count: int) -> None:
        self.transcript.emit(SPAWN, "spawn", descriptor_id, port=port, pid=pid, n=count)

    @property
    def endpoint(self) -> str:
        return f"127.0.0.1:{self.port}"

    def start(self) -> None:
        """Serve in a background thread (tests and embedding)."""
        self._thread = threading.Thread(
            target=lambda: self._httpd.serve_forever(poll_interval=0.1), daemon=True
        )
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self.broker.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
