"""Opaque handle minting and validation."""

import random
import time

import pytest

from psvc.broker.handles import HandleCodec, HandleError
from psvc.protocol import handle_from_text, handle_to_text

URL_SAFE = set("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_=")


class TestRoundTrip:
    def test_mint_open(self):
        codec = HandleCodec()
        handle = codec.mint("sp.example.org:8080", "cc-personal-service")
        opened = codec.open(handle)
        assert opened.requester_host == "sp.example.org:8080"
        assert opened.descriptor_id == "cc-personal-service"
        assert abs(opened.mint_time - time.time()) < 5

    def test_text_is_transport_safe(self):
        codec = HandleCodec()
        for i in range(50):
            handle = codec.mint(f"sp{i}:80", f"svc-{i}")
            assert set(handle) <= URL_SAFE

    def test_same_inputs_give_distinct_handles(self):
        codec = HandleCodec()
        a = codec.mint("sp:80", "svc")
        b = codec.mint("sp:80", "svc")
        assert a != b
        assert codec.open(a).descriptor_id == codec.open(b).descriptor_id == "svc"

    def test_no_plaintext_leakage(self):
        codec = HandleCodec()
        host, service = "secret-host.example:4443", "very-secret-service"
        handle = codec.mint(host, service)
        raw = handle_from_text(handle)
        assert host.encode() not in raw
        assert service.encode() not in raw
        assert host not in handle
        assert service not in handle


class TestRejection:
    def test_random_byte_strings_rejected(self):
        codec = HandleCodec()
        rng = random.Random(616)
        for _ in range(500):
            blob = bytes(rng.randrange(256) for _ in range(rng.randint(0, 80)))
            with pytest.raises(HandleError):
                codec.open(handle_to_text(blob))

    def test_single_character_mutations_rejected(self):
        # any position, padding and trailing chars included: the codec
        # must not accept aliased spellings of the same byte string
        codec = HandleCodec()
        rng = random.Random(2718)
        alphabet = sorted(URL_SAFE)
        for _ in range(200):
            handle = codec.mint("sp:80", "svc")
            pos = rng.randrange(len(handle))
            replacement = rng.choice([c for c in alphabet if c != handle[pos]])
            mutated = handle[:pos] + replacement + handle[pos + 1 :]
            with pytest.raises(HandleError):
                codec.open(mutated)

    def test_not_base64_rejected(self):
        codec = HandleCodec()
        with pytest.raises(HandleError):
            codec.open("!!!not//even\\base64!!!")

    def test_truncated_rejected(self):
        codec = HandleCodec()
        handle = codec.mint("sp:80", "svc")
        with pytest.raises(HandleError):
            codec.open(handle[: len(handle) // 2])
        with pytest.raises(HandleError):
            codec.open("")

    def test_other_codec_rejects(self):
        ours = HandleCodec()
        theirs = HandleCodec()
        with pytest.raises(HandleError):
            theirs.open(ours.mint("sp:80", "svc"))

    def test_fixed_key_codecs_interoperate(self):
        key = bytes(range(32))
        a = HandleCodec(key=key)
        b = HandleCodec(key=key)
        assert b.open(a.mint("sp:80", "svc")).descriptor_id == "svc"


class TestExpiry:
    def test_fresh_handle_lives(self):
        codec = HandleCodec(max_age_s=60)
        assert codec.open(codec.mint("sp:80", "svc")).descriptor_id == "svc"

    def test_old_handle_dies(self):
        codec = HandleCodec(max_age_s=0.05)
        handle = codec.mint("sp:80", "svc")
        time.sleep(0.1)
        with pytest.raises(HandleError):
            codec.open(handle)

    def test_no_limit_by_default(self):
        codec = HandleCodec()
        assert codec.max_age_s is None
