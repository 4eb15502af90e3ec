import socket
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnsc.backbone import SplitClassifier
from snnsc.channel import ChannelConfig
from snnsc.model import Geometry, SnnSc
from snnsc.pipeline import SplitSystem
from snnsc.transport import (
    HEADER,
    CloudServer,
    EdgeClient,
    Frame,
    MsgType,
    ProtocolError,
    RemoteError,
    local_logits,
    read_frame,
    send_frame,
    send_raw,
)

CHANNEL = ChannelConfig("bsc", 0.1, 7)


def make_system(T=3, seed=0):
    bb = SplitClassifier(seed=seed)
    return SplitSystem(bb, SnnSc(Geometry(*bb.feature_shape), T, seed=seed + 1))


@pytest.fixture(scope="module")
def server():
    srv = CloudServer(("127.0.0.1", 0), make_system(), CHANNEL, timeout=2.0)
    srv.start_background()
    yield srv
    srv.shutdown()
    srv.server_close()


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).integers(0, 256, size=(12, 3, 16, 16), dtype=np.uint8)


def exchange(address, raws):
    """Send raw frames one by one on a single connection; collect every reply frame."""
    replies = []
    with socket.create_connection(address, timeout=5) as sock:
        try:
            for raw in raws:
                sock.sendall(raw)
            sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass  # the server may have answered early and closed
        while True:
            try:
                replies.append(read_frame(sock))
            except ProtocolError:
                return replies


class TestFrame:
    def test_spikes_frame_is_90_bytes(self):
        bits = 32 * 4 * 4
        frame = Frame(MsgType.SPIKES, 1, 1, (32, 4, 4), bytes(bits // 8), bits)
        assert HEADER.size == 22 and len(frame.encode()) == 90

    def test_spike_bits_must_match_shape(self):
        with pytest.raises(ProtocolError):
            Frame(MsgType.SPIKES, 1, 1, (32, 4, 4), bytes(63), 504)
        with pytest.raises(ProtocolError):
            Frame(MsgType.HELLO, 1, payload=b"ab", payload_bit_len=20)

    def test_partial_last_byte(self):
        frame = Frame(MsgType.SPIKES, 3, 2, (1, 3, 3), b"\xff\x01", 9)
        assert Frame.decode(frame.encode()) == frame

    @pytest.mark.parametrize("cut", [0, 5, 21, 25])
    def test_truncated_rejected(self, cut):
        raw = Frame(MsgType.RESULT, 1, payload=b"\x01\x00").encode()
        with pytest.raises(ProtocolError):
            Frame.decode(raw[:cut])

    def test_every_single_byte_corruption_detected(self):
        raw = Frame(MsgType.SPIKES, 77, 2, (2, 3, 3), b"\xa5\x5a\x01", 18).encode()
        for i in range(len(raw)):
            for delta in (0x01, 0x80, 0xFF):
                bad = bytearray(raw)
                bad[i] ^= delta
                with pytest.raises(ProtocolError):
                    Frame.decode(bytes(bad))

    def test_unknown_message_type(self):
        raw = bytearray(Frame(MsgType.RESULT, 1).encode())
        raw[5] = 9
        body = bytes(raw[:-4])
        with pytest.raises(ProtocolError, match="message type"):
            Frame.decode(body + struct.pack("<I", zlib.crc32(body)))


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(list(MsgType)), st.integers(0, 2**32 - 1), st.integers(0, 2**16 - 1),
       st.binary(max_size=64), st.integers(0, 7))
def test_frame_roundtrip(mtype, sid, step, payload, trim):
    bits = 8 * len(payload) - (trim if payload else 0)
    shape = (bits, 1, 1) if mtype is MsgType.SPIKES else (1, 2, 3)
    frame = Frame(mtype, sid, step, shape, payload, bits)
    assert Frame.decode(frame.encode()) == frame


class TestLoopback:
    def test_remote_matches_in_process(self, server, images):
        client = EdgeClient(make_system(), server.server_address)
        ref = make_system()
        for sid, img in enumerate(images, start=100):
            label = client.infer(img, sid)
            expected = local_logits(ref, img, sid, CHANNEL)
            np.testing.assert_array_equal(server.results[sid], expected)
            assert label == int(np.argmax(expected))

    def test_frame_and_bit_accounting(self, server, images):
        client = EdgeClient(make_system(), server.server_address)
        client.infer(images[0], 1)
        assert client.frames_sent == 3 and client.bits_sent == 3 * 64

    def test_noise_differs_between_sessions(self, images):
        a = local_logits(make_system(), images[0], 1, CHANNEL.with_(p=0.3))
        b = local_logits(make_system(), images[0], 2, CHANNEL.with_(p=0.3))
        assert not np.array_equal(a, b)

    def test_mismatched_hello_gets_error(self, server, images):
        client = EdgeClient(make_system(T=4), server.server_address)
        with pytest.raises(RemoteError, match="mismatch"):
            client.infer(images[0], 5)

    def test_out_of_order_step_gets_error(self, server, images):
        client = EdgeClient(make_system(), server.server_address)
        frames = client.spike_frames(images[0], 9)
        replies = exchange(server.server_address,
                           [client.hello(9).encode(), frames[1].encode(), frames[0].encode()])
        assert [r.msg_type for r in replies] == [MsgType.HELLO, MsgType.ERROR]
        assert b"expected step 1" in replies[1].payload

    def test_spikes_before_hello_gets_error(self, server, images):
        frame = EdgeClient(make_system(), server.server_address).spike_frames(images[0], 3)[0]
        reply = send_raw(server.server_address, frame.encode())
        assert reply.msg_type is MsgType.ERROR

    def test_oversized_length_rejected_without_reading(self, server):
        head = HEADER.pack(b"SNSC", 1, 1, 0, 0, 0, 0, 0, 2**32 - 1)
        assert send_raw(server.server_address, head).msg_type is MsgType.ERROR

    def test_single_byte_fuzz_always_answered_with_error(self, server, images):
        client = EdgeClient(make_system(), server.server_address)
        hello = client.hello(4).encode()
        spikes = client.spike_frames(images[1], 4)[0].encode()
        for i in range(len(hello)):
            bad = bytearray(hello)
            bad[i] ^= 0x5A
            assert send_raw(server.server_address, bytes(bad)).msg_type is MsgType.ERROR
        for i in range(len(spikes)):
            bad = bytearray(spikes)
            bad[i] ^= 0x5A
            replies = exchange(server.server_address, [hello, bytes(bad)])
            assert [r.msg_type for r in replies] == [MsgType.HELLO, MsgType.ERROR]
        # the server is still healthy afterwards
        assert client.infer(images[2], 55) == int(np.argmax(local_logits(make_system(), images[2], 55, CHANNEL)))

    def test_malformed_hello_payload_gets_error(self, server):
        with socket.create_connection(server.server_address, timeout=5) as sock:
            send_frame(sock, Frame(MsgType.HELLO, 8, 0, (1, 8, 8), b"\x00" * 7))
            assert read_frame(sock).msg_type is MsgType.ERROR

    def test_silent_client_times_out_with_error(self, images):
        srv = CloudServer(("127.0.0.1", 0), make_system(), CHANNEL, timeout=0.3)
        srv.start_background()
        try:
            client = EdgeClient(make_system(), srv.server_address)
            with socket.create_connection(srv.server_address, timeout=5) as sock:
                send_frame(sock, client.hello(2))
                assert read_frame(sock).msg_type is MsgType.HELLO
                assert read_frame(sock).msg_type is MsgType.ERROR
        finally:
            srv.shutdown()
            srv.server_close()


def test_server_requires_spiking_model():
    with pytest.raises(TypeError):
        CloudServer(("127.0.0.1", 0), SplitSystem(SplitClassifier()), CHANNEL)


def test_reference_geometry_sends_four_frames_of_512_bits():
    bb = SplitClassifier(image_size=8, feature_channels=2048, seed=3)
    system = SplitSystem(bb, SnnSc(Geometry(*bb.feature_shape), 4, seed=4))
    assert bb.feature_shape == (2048, 4, 4)
    image = np.random.default_rng(1).integers(0, 256, size=(3, 8, 8), dtype=np.uint8)
    frames = EdgeClient(system, ("127.0.0.1", 1)).spike_frames(image, 1)
    assert [f.time_step for f in frames] == [1, 2, 3, 4]
    assert all(f.shape == (32, 4, 4) and len(f.encode()) == 90 for f in frames)
    assert sum(f.payload_bit_len for f in frames) == 2048


def test_noiseless_labels_match_in_memory_pipeline(images):
    srv = CloudServer(("127.0.0.1", 0), make_system(), ChannelConfig("bsc", 0.0, 0))
    srv.start_background()
    try:
        client = EdgeClient(make_system(), srv.server_address)
        labels = [client.infer(img, sid) for sid, img in enumerate(images)]
    finally:
        srv.shutdown()
        srv.server_close()
    assert labels == make_system().predict(images, batch_size=1).argmax(axis=1).tolist()
