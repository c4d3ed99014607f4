"""Broker behavior: lookups, handles, access policy, launch-on-demand, HTTP."""

from __future__ import annotations

import json
import random
import threading
import time
from http.client import HTTPConnection
from pathlib import Path

import pytest

from psvc.broker.core import (
    Broker,
    BrokerOptions,
    EndpointFileError,
    read_endpoint_file,
    write_endpoint_file,
)
from psvc.broker.policy import PolicyError, load_policy
from psvc.broker.runtime import ServiceLauncher, SpawnFailure, allocate_port
from psvc.broker.server import BrokerServer
from psvc.protocol import (
    BROKER_RESULT,
    ERR_AMBIGUOUS,
    ERR_HANDLE,
    ERR_PARAMETERS,
    ERR_SERVICE,
    H_CALLBACK,
    H_ERROR,
    H_SERVICE,
    OP_WHITE,
    OP_YELLOW,
    YellowQuery,
    decode_broker_result,
    encode_white_query,
    encode_yellow_query,
)
from psvc.registry import ServiceDescriptor

from conftest import (
    echo_service_cmd,
    header_value,
    http_exchange,
    write_descriptor,
    write_echo_descriptor,
)

CALLBACK = "http://sp.test:8080/cb"
SP = "sp.test:8080"


class FakeLauncher:
    """Hands out a canned endpoint without starting any process."""

    def __init__(self, endpoint: str = "127.0.0.1:45678", fail: bool = False):
        self.endpoint = endpoint
        self.fail = fail
        self.calls: list[str] = []

    def ensure_live(self, desc: ServiceDescriptor) -> str:
        self.calls.append(desc.descriptor_id)
        if self.fail:
            raise SpawnFailure("refused by test double")
        return self.endpoint

    def shutdown(self) -> None:
        pass


@pytest.fixture()
def ps_dir(tmp_path: Path) -> Path:
    # cc and twin collide on Purpose; print stands apart
    write_descriptor(
        tmp_path,
        "cc",
        {"Purpose": "authentication", "Device": "Portuguese eID"},
        cmd=["svc"],
        workdir=str(tmp_path),
    )
    write_descriptor(
        tmp_path,
        "twin",
        {"Purpose": "authentication", "Device": "Other eID"},
        cmd=["svc"],
        workdir=str(tmp_path),
    )
    write_descriptor(
        tmp_path, "print", {"Purpose": "printing"}, cmd=["svc"], workdir=str(tmp_path)
    )
    return tmp_path


def make_broker(ps_dir: Path, **kwargs) -> Broker:
    kwargs.setdefault("launcher", FakeLauncher())
    return Broker(ps_dir, **kwargs)


class TestEndpointFile:
    def test_round_trip(self, tmp_path):
        path = write_endpoint_file(tmp_path, 4321)
        assert path.name == "broker.ept"
        assert read_endpoint_file(tmp_path) == ("127.0.0.1", 4321)

    def test_rewrite_wins(self, tmp_path):
        write_endpoint_file(tmp_path, 1000)
        write_endpoint_file(tmp_path, 2000)
        assert read_endpoint_file(tmp_path)[1] == 2000

    def test_missing_file(self, tmp_path):
        with pytest.raises(EndpointFileError):
            read_endpoint_file(tmp_path)

    @pytest.mark.parametrize("text", ["", "abc", "-5", "12.5", "70000", "0"])
    def test_unusable_contents(self, tmp_path, text):
        (tmp_path / "broker.ept").write_text(text, "ascii")
        with pytest.raises(EndpointFileError):
            read_endpoint_file(tmp_path)


class TestYellowService:
    def test_matches_listed_in_id_order(self, ps_dir):
        broker = make_broker(ps_dir)
        reply = broker.serve_yellow(YellowQuery("purpose", "authentication"), SP, CALLBACK)
        assert reply.status == BROKER_RESULT
        assert reply.location == CALLBACK
        assert reply.error is None
        result = decode_broker_result(reply.service)
        assert result.operation == OP_YELLOW
        assert result.request == {"purpose": "authentication"}
        assert [name["Device"] for name in result.response] == [
            "Portuguese eID",
            "Other eID",
        ]

    def test_no_match_is_empty_list(self, ps_dir):
        broker = make_broker(ps_dir)
        reply = broker.serve_yellow(YellowQuery("Purpose", "time travel"), SP, CALLBACK)
        assert reply.error is None
        assert decode_broker_result(reply.service).response == []


class TestWhiteService:
    def test_unique_match_mints_working_handle(self, ps_dir):
        broker = make_broker(ps_dir)
        query = {"Purpose": "authentication", "Device": "Portuguese eID"}
        reply = broker.serve_white(query, SP, CALLBACK)
        assert reply.location == CALLBACK
        assert reply.error is None
        result = decode_broker_result(reply.service)
        assert result.operation == OP_WHITE
        assert result.request == query
        assert result.response["service"]["Device"] == "Portuguese eID"
        opened = broker.codec.open(result.response["handle"])
        assert opened.descriptor_id == "cc"
        assert opened.requester_host == SP

    def test_ambiguous(self, ps_dir):
        broker = make_broker(ps_dir)
        reply = broker.serve_white({"Purpose": "authentication"}, SP, CALLBACK)
        assert reply.error == ERR_AMBIGUOUS
        assert reply.service is None
        assert reply.location == CALLBACK

    def test_no_match(self, ps_dir):
        broker = make_broker(ps_dir)
        reply = broker.serve_white({"Purpose": "nothing has this"}, SP, CALLBACK)
        assert reply.error == ERR_SERVICE
        assert reply.service is None

    def test_white_is_case_sensitive(self, ps_dir):
        broker = make_broker(ps_dir)
        reply = broker.serve_white({"purpose": "printing"}, SP, CALLBACK)
        assert reply.error == ERR_SERVICE


class TestResolveHandle:
    def mint(self, broker: Broker, sp: str = SP) -> str:
        reply = broker.serve_white(
            {"Purpose": "authentication", "Device": "Portuguese eID"}, sp, CALLBACK
        )
        return decode_broker_result(reply.service).response["handle"]

    def test_live_endpoint_returned(self, ps_dir):
        launcher = FakeLauncher()
        broker = make_broker(ps_dir, launcher=launcher)
        reply = broker.resolve_handle(self.mint(broker), SP, "r7")
        assert reply.location == ":r7"
        assert reply.error is None
        assert reply.service == launcher.endpoint
        assert launcher.calls == ["cc"]

    def test_garbage_handle(self, ps_dir):
        launcher = FakeLauncher()
        broker = make_broker(ps_dir, launcher=launcher)
        reply = broker.resolve_handle("not-a-handle", SP, "r1")
        assert reply.error == ERR_HANDLE
        assert reply.service is None
        assert launcher.calls == []

    def test_tampered_handle(self, ps_dir):
        broker = make_broker(ps_dir)
        handle = self.mint(broker)
        mid = len(handle) // 2
        flipped = "B" if handle[mid] != "B" else "C"
        tampered = handle[:mid] + flipped + handle[mid + 1 :]
        assert broker.resolve_handle(tampered, SP, "r1").error == ERR_HANDLE

    def test_handle_bound_to_requesting_sp(self, ps_dir):
        broker = make_broker(ps_dir)
        handle = self.mint(broker, sp="bank.test:443")
        assert broker.resolve_handle(handle, "shop.test:80", "r1").error == ERR_HANDLE
        assert broker.resolve_handle(handle, "bank.test:443", "r1").error is None

    def test_binding_can_be_disabled(self, ps_dir):
        broker = make_broker(ps_dir, options=BrokerOptions(bind_handles_to_sp=False))
        handle = self.mint(broker, sp="bank.test:443")
        assert broker.resolve_handle(handle, "shop.test:80", "r1").error is None

    def test_handle_for_removed_service(self, ps_dir):
        broker = make_broker(ps_dir)
        handle = self.mint(broker)
        (ps_dir / "cc.psd").unlink()
        broker.reload_catalog()
        assert broker.resolve_handle(handle, SP, "r1").error == ERR_HANDLE

    def test_spawn_failure_reported_as_service(self, ps_dir):
        broker = make_broker(ps_dir, launcher=FakeLauncher(fail=True))
        assert broker.resolve_handle(self.mint(broker), SP, "r1").error == ERR_SERVICE

    def test_expired_handle(self, ps_dir):
        broker = make_broker(ps_dir, options=BrokerOptions(handle_max_age_s=0.05))
        handle = self.mint(broker)
        time.sleep(0.15)
        assert broker.resolve_handle(handle, SP, "r1").error == ERR_HANDLE

    def test_binding_outcomes_random_hosts(self, ps_dir):
        rng = random.Random(0xB20CE)
        broker = make_broker(ps_dir)
        hosts = [f"sp{n}.test:{8000 + n}" for n in range(6)]
        for _ in range(40):
            minted_for = rng.choice(hosts)
            presented_by = rng.choice(hosts)
            handle = self.mint(broker, sp=minted_for)
            reply = broker.resolve_handle(handle, presented_by, "r")
            if presented_by == minted_for:
                assert reply.error is None
            else:
                assert reply.error == ERR_HANDLE


class TestAccessPolicy:
    def test_absent_file_allows_everyone(self, tmp_path):
        policy = load_policy(tmp_path)
        assert policy.allows("anyone.example:80", "cc")

    def test_whitelist_matches_netloc_and_bare_host(self, tmp_path):
        (tmp_path / "policy.json").write_text(
            json.dumps({"mode": "whitelist", "hosts": ["bank.example"]}), "utf-8"
        )
        policy = load_policy(tmp_path)
        assert policy.allows("bank.example:443", "cc")
        assert not policy.allows("ads.example:80", "cc")

    def test_blacklist_with_glob(self, tmp_path):
        (tmp_path / "policy.json").write_text(
            json.dumps({"mode": "blacklist", "hosts": ["ads.*"]}), "utf-8"
        )
        policy = load_policy(tmp_path)
        assert not policy.allows("ads.example:80", "cc")
        assert policy.allows("bank.example:443", "cc")

    def test_override_beats_default(self, tmp_path):
        (tmp_path / "policy.json").write_text(
            json.dumps(
                {
                    "mode": "allow_all",
                    "services": {
                        "cc": {"mode": "whitelist", "hosts": ["bank.example:*"]}
                    },
                }
            ),
            "utf-8",
        )
        policy = load_policy(tmp_path)
        assert policy.allows("shop.example:80", "twin")
        assert not policy.allows("shop.example:80", "cc")
        assert policy.allows("bank.example:443", "cc")

    @pytest.mark.parametrize(
        "doc",
        [
            "[1, 2]",
            "{not json",
            '{"mode": "deny_some"}',
            '{"hosts": "bank.example"}',
            '{"services": []}',
            '{"services": {"cc": "whitelist"}}',
            '{"services": {"cc": {"mode": "nope"}}}',
        ],
    )
    def test_unusable_policy_file(self, tmp_path, doc):
        (tmp_path / "policy.json").write_text(doc, "utf-8")
        with pytest.raises(PolicyError):
            load_policy(tmp_path)


class TestPolicyFiltering:
    def restrict_cc_to_bank(self, ps_dir: Path) -> None:
        (ps_dir / "policy.json").write_text(
            json.dumps(
                {"services": {"cc": {"mode": "whitelist", "hosts": ["bank.test:*"]}}}
            ),
            "utf-8",
        )

    def test_yellow_hides_denied_services(self, ps_dir):
        self.restrict_cc_to_bank(ps_dir)
        broker = make_broker(ps_dir)
        query = YellowQuery("purpose", "authentication")
        from_bank = decode_broker_result(
            broker.serve_yellow(query, "bank.test:443", CALLBACK).service
        )
        from_shop = decode_broker_result(
            broker.serve_yellow(query, "shop.test:80", CALLBACK).service
        )
        assert len(from_bank.response) == 2
        assert [n["Device"] for n in from_shop.response] == ["Other eID"]

    def test_filtering_can_make_white_unique(self, ps_dir):
        # both auth services match, but shop may only see one of them
        self.restrict_cc_to_bank(ps_dir)
        broker = make_broker(ps_dir)
        query = {"Purpose": "authentication"}
        assert broker.serve_white(query, "bank.test:443", CALLBACK).error == ERR_AMBIGUOUS
        reply = broker.serve_white(query, "shop.test:80", CALLBACK)
        assert reply.error is None
        result = decode_broker_result(reply.service)
        assert result.response["service"]["Device"] == "Other eID"

    def test_resolve_respects_policy(self, ps_dir):
        # binding disabled so the policy check is what rejects
        self.restrict_cc_to_bank(ps_dir)
        broker = make_broker(ps_dir, options=BrokerOptions(bind_handles_to_sp=False))
        reply = broker.serve_white(
            {"Device": "Portuguese eID"}, "bank.test:443", CALLBACK
        )
        handle = decode_broker_result(reply.service).response["handle"]
        assert broker.resolve_handle(handle, "shop.test:80", "r1").error == ERR_HANDLE
        assert broker.resolve_handle(handle, "bank.test:443", "r1").error is None


class TestServiceLauncher:
    def local_descriptor(self, tmp_path: Path, stem: str = "svc") -> ServiceDescriptor:
        return ServiceDescriptor(
            stem, {"Purpose": "echo"}, tuple(echo_service_cmd()), None, tmp_path
        )

    def test_launches_then_reuses(self, tmp_path):
        launcher = ServiceLauncher()
        try:
            desc = self.local_descriptor(tmp_path)
            first = launcher.ensure_live(desc)
            status, headers, _ = http_exchange(first, "GET", "/ping")
            assert status == 200
            assert header_value(headers, "X-Echo") == "/ping"
            assert launcher.ensure_live(desc) == first
            assert launcher.record("svc").launch_count == 1
        finally:
            launcher.shutdown()

    def test_concurrent_resolves_spawn_once(self, tmp_path):
        launcher = ServiceLauncher()
        try:
            desc = self.local_descriptor(tmp_path)
            barrier = threading.Barrier(8)
            endpoints: list[str] = []
            failures: list[Exception] = []

            def go():
                barrier.wait()
                try:
                    endpoints.append(launcher.ensure_live(desc))
                except Exception as exc:
                    failures.append(exc)

            threads = [threading.Thread(target=go) for _ in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert not failures
            assert len(set(endpoints)) == 1
            assert launcher.record("svc").launch_count == 1
        finally:
            launcher.shutdown()

    def test_dead_service_is_relaunched(self, tmp_path):
        launcher = ServiceLauncher()
        try:
            desc = self.local_descriptor(tmp_path)
            launcher.ensure_live(desc)
            record = launcher.record("svc")
            record.proc.kill()
            record.proc.wait()
            endpoint = launcher.ensure_live(desc)
            assert launcher.record("svc").launch_count == 2
            assert http_exchange(endpoint, "HEAD", "/")[0] == 200
        finally:
            launcher.shutdown()

    def test_on_spawn_reports_each_launch(self, tmp_path):
        events: list[tuple] = []
        launcher = ServiceLauncher(on_spawn=lambda *args: events.append(args))
        try:
            desc = self.local_descriptor(tmp_path)
            endpoint = launcher.ensure_live(desc)
            port = int(endpoint.rsplit(":", 1)[1])
            record = launcher.record("svc")
            assert events == [("svc", port, record.proc.pid, 1)]
            launcher.ensure_live(desc)
            assert len(events) == 1
        finally:
            launcher.shutdown()

    def test_immediately_exiting_service_fails_fast(self, tmp_path):
        import sys

        launcher = ServiceLauncher()
        desc = ServiceDescriptor(
            "dud", {}, (sys.executable, "-c", "pass"), None, tmp_path
        )
        started = time.monotonic()
        with pytest.raises(SpawnFailure, match="exited"):
            launcher.ensure_live(desc)
        assert time.monotonic() - started < 4

    def test_unlaunchable_binary(self, tmp_path):
        launcher = ServiceLauncher()
        desc = ServiceDescriptor(
            "ghost", {}, ("/no/such/binary-here",), None, tmp_path
        )
        with pytest.raises(SpawnFailure, match="cannot launch"):
            launcher.ensure_live(desc)

    def test_missing_working_directory(self, tmp_path):
        launcher = ServiceLauncher()
        desc = ServiceDescriptor(
            "lost", {}, tuple(echo_service_cmd()), None, tmp_path / "gone"
        )
        with pytest.raises(SpawnFailure, match="working directory"):
            launcher.ensure_live(desc)

    def test_never_listening_service_times_out(self, tmp_path):
        import sys

        launcher = ServiceLauncher(launch_timeout_s=0.5)
        desc = ServiceDescriptor(
            "mute", {}, (sys.executable, "-c", "import time; time.sleep(30)"), None, tmp_path
        )
        with pytest.raises(SpawnFailure, match="not listening"):
            launcher.ensure_live(desc)
        # the stuck child must not be leaked
        assert launcher.record("mute") is None or launcher.record("mute").proc is None

    def test_remote_service_is_probed(self, tmp_path, stub):
        server = stub()
        launcher = ServiceLauncher()
        url = server.url("/svc")
        desc = ServiceDescriptor("far", {}, None, url, tmp_path)
        assert launcher.ensure_live(desc) == url
        assert [(r.method, r.path) for r in server.requests] == [("HEAD", "/svc")]

    def test_unreachable_remote_service(self, tmp_path):
        port = allocate_port()
        launcher = ServiceLauncher(probe_timeout_s=0.5)
        desc = ServiceDescriptor("far", {}, None, f"http://127.0.0.1:{port}/", tmp_path)
        with pytest.raises(SpawnFailure, match="unreachable"):
            launcher.ensure_live(desc)

    def test_shutdown_terminates_children(self, tmp_path):
        launcher = ServiceLauncher()
        launcher.ensure_live(self.local_descriptor(tmp_path))
        proc = launcher.record("svc").proc
        launcher.shutdown()
        assert proc.poll() is not None

    def test_allocate_port_in_range(self):
        seen = {allocate_port() for _ in range(5)}
        assert all(0 < port < 65536 for port in seen)


@pytest.fixture()
def live_broker(tmp_path: Path):
    write_echo_descriptor(
        tmp_path, "auth", {"Purpose": "authentication", "Device": "Portuguese eID"}
    )
    write_echo_descriptor(tmp_path, "mail", {"Purpose": "mailbox"})
    server = BrokerServer(tmp_path, port=0)
    server.start()
    try:
        yield server
    finally:
        server.shutdown()


def broker_head(
    server: BrokerServer,
    target: str,
    *,
    service: str | None = None,
    callback: str | None = None,
    referer: str | None = SP,
):
    headers = []
    if service is not None:
        headers.append((H_SERVICE, service))
    if callback is not None:
        headers.append((H_CALLBACK, callback))
    if referer is not None:
        headers.append(("Referer", referer))
    return http_exchange(server.endpoint, "HEAD", target, headers)


class TestBrokerHTTP:
    def test_publishes_endpoint_file(self, live_broker, tmp_path):
        assert read_endpoint_file(tmp_path) == ("127.0.0.1", live_broker.port)

    def test_reason_phrase_on_313(self, live_broker):
        conn = HTTPConnection("127.0.0.1", live_broker.port, timeout=10)
        try:
            conn.request(
                "HEAD",
                "/yellow",
                headers={
                    H_SERVICE: encode_yellow_query(YellowQuery("Purpose", "mailbox")),
                    H_CALLBACK: CALLBACK,
                    "Referer": SP,
                },
            )
            resp = conn.getresponse()
            assert resp.status == BROKER_RESULT
            assert resp.reason == "Broker Result"
        finally:
            conn.close()

    def test_yellow_round_trip(self, live_broker):
        status, headers, _ = broker_head(
            live_broker,
            "/yellow",
            service=encode_yellow_query(YellowQuery("purpose", "authentication")),
            callback=CALLBACK,
        )
        assert status == BROKER_RESULT
        assert header_value(headers, "Location") == CALLBACK
        assert header_value(headers, H_ERROR) is None
        result = decode_broker_result(header_value(headers, H_SERVICE))
        assert result.operation == OP_YELLOW
        assert [n["Purpose"] for n in result.response] == ["authentication"]

    def test_white_then_resolve_reaches_live_service(self, live_broker):
        status, headers, _ = broker_head(
            live_broker,
            "/white",
            service=encode_white_query(
                {"Purpose": "authentication", "Device": "Portuguese eID"}
            ),
            callback=CALLBACK,
        )
        assert status == BROKER_RESULT
        handle = decode_broker_result(header_value(headers, H_SERVICE)).response["handle"]

        status, headers, _ = broker_head(live_broker, "/resolve?ref=r-42", service=handle)
        assert status == BROKER_RESULT
        assert header_value(headers, "Location") == ":r-42"
        endpoint = header_value(headers, H_SERVICE)
        assert endpoint.startswith("127.0.0.1:")

        status, svc_headers, body = http_exchange(endpoint, "GET", "/auth?sid=1")
        assert status == 200
        assert header_value(svc_headers, "X-Echo") == "/auth?sid=1"
        assert body == b"echo\n"

    def test_resolve_launches_once_across_requests(self, live_broker):
        def resolve() -> str:
            _, headers, _ = broker_head(
                live_broker,
                "/white",
                service=encode_white_query({"Purpose": "mailbox"}),
                callback=CALLBACK,
            )
            handle = decode_broker_result(
                header_value(headers, H_SERVICE)
            ).response["handle"]
            _, headers, _ = broker_head(live_broker, "/resolve?ref=a", service=handle)
            return header_value(headers, H_SERVICE)

        assert resolve() == resolve()
        assert live_broker.broker.launcher.record("mail").launch_count == 1

    def test_tampered_handle_rejected(self, live_broker):
        _, headers, _ = broker_head(
            live_broker,
            "/white",
            service=encode_white_query({"Purpose": "mailbox"}),
            callback=CALLBACK,
        )
        handle = decode_broker_result(header_value(headers, H_SERVICE)).response["handle"]
        mangled = ("A" if handle[0] != "A" else "B") + handle[1:]
        status, headers, _ = broker_head(live_broker, "/resolve?ref=x", service=mangled)
        assert status == BROKER_RESULT
        assert header_value(headers, H_ERROR) == ERR_HANDLE
        assert header_value(headers, H_SERVICE) is None

    def test_handle_presented_by_wrong_sp(self, live_broker):
        _, headers, _ = broker_head(
            live_broker,
            "/white",
            service=encode_white_query({"Purpose": "mailbox"}),
            callback=CALLBACK,
            referer="bank.test:443",
        )
        handle = decode_broker_result(header_value(headers, H_SERVICE)).response["handle"]
        _, headers, _ = broker_head(
            live_broker, "/resolve?ref=x", service=handle, referer="shop.test:80"
        )
        assert header_value(headers, H_ERROR) == ERR_HANDLE

    @pytest.mark.parametrize("path", ["/yellow", "/white"])
    def test_missing_callback_is_parameters_error(self, live_broker, path):
        status, headers, _ = broker_head(
            live_broker, path, service=encode_white_query({"Purpose": "mailbox"})
        )
        assert status == BROKER_RESULT
        assert header_value(headers, H_ERROR) == ERR_PARAMETERS
        # nowhere to send the caller: the location degrades to a bare ref mark
        assert header_value(headers, "Location") == ":"

    def test_missing_query_keeps_callback_location(self, live_broker):
        status, headers, _ = broker_head(live_broker, "/yellow", callback=CALLBACK)
        assert header_value(headers, H_ERROR) == ERR_PARAMETERS
        assert header_value(headers, "Location") == CALLBACK

    @pytest.mark.parametrize(
        "bad_query",
        ["{not json", '["Purpose"]', '{"a": 1, "b": 2}', "{}"],
    )
    def test_malformed_yellow_query(self, live_broker, bad_query):
        status, headers, _ = broker_head(
            live_broker, "/yellow", service=bad_query, callback=CALLBACK
        )
        assert status == BROKER_RESULT
        assert header_value(headers, H_ERROR) == ERR_PARAMETERS

    def test_malformed_white_query(self, live_broker):
        status, headers, _ = broker_head(
            live_broker, "/white", service="{}", callback=CALLBACK
        )
        assert header_value(headers, H_ERROR) == ERR_PARAMETERS

    def test_resolve_without_ref(self, live_broker):
        status, headers, _ = broker_head(live_broker, "/resolve", service="whatever")
        assert status == BROKER_RESULT
        assert header_value(headers, H_ERROR) == ERR_PARAMETERS
        assert header_value(headers, "Location") == ":"

    def test_get_is_rejected(self, live_broker):
        status, _, body = http_exchange(live_broker.endpoint, "GET", "/yellow")
        assert status == 405
        assert b"HEAD" in body

    def test_unknown_path(self, live_broker):
        assert broker_head(live_broker, "/nope", service="x", callback=CALLBACK)[0] == 404
        assert http_exchange(live_broker.endpoint, "POST", "/nope")[0] == 404

    def test_reload_picks_up_new_descriptor(self, live_broker, tmp_path):
        query = encode_yellow_query(YellowQuery("Purpose", "backup"))
        _, headers, _ = broker_head(
            live_broker, "/yellow", service=query, callback=CALLBACK
        )
        assert decode_broker_result(header_value(headers, H_SERVICE)).response == []

        write_echo_descriptor(tmp_path, "vault", {"Purpose": "backup"})
        status, _, body = http_exchange(live_broker.endpoint, "POST", "/reload")
        assert status == 200
        assert b"3 services" in body

        _, headers, _ = broker_head(
            live_broker, "/yellow", service=query, callback=CALLBACK
        )
        names = decode_broker_result(header_value(headers, H_SERVICE)).response
        assert [n["Purpose"] for n in names] == ["backup"]
