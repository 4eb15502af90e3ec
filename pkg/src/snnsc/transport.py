"""Edge client and cloud server exchanging framed spike maps over TCP.

Frame layout (little-endian)::

    magic            4s   b"SNSC"
    version          u8   1
    msg_type         u8   MsgType
    session_id       u32
    time_step        u16  1..T for Spikes frames, 0 otherwise
    shape            3 x u16  (c2, h2, w2)
    payload_bit_len  u32
    payload          ceil(payload_bit_len / 8) bytes
    crc32            u32  over header and payload

The header is 22 bytes, so a Spikes frame for (32, 4, 4) is
22 + 64 + 4 = 90 bytes.

A session carries one inference. The client sends Hello (payload: T and
the feature shape as ``<4H``), the server answers Hello or Error, then
the client streams T Spikes frames and receives one Result frame holding
the predicted label as ``<H``. Error payloads are UTF-8 text. Only spike
bits and integers cross the wire; the server applies the simulated
channel to each decoded spike map before reconstruction.
"""

from __future__ import annotations

import copy
import enum
import logging
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .channel import BitBuffer, Channel, ChannelConfig, derive_seed, pack_bits, unpack_bits
from .layers import no_grad
from .model import SnnSc
from .pipeline import SplitSystem

log = logging.getLogger(__name__)

MAGIC = b"SNSC"
VERSION = 1
HEADER = struct.Struct("<4sBBIH3HI")
CRC = struct.Struct("<I")
HELLO = struct.Struct("<4H")
MAX_PAYLOAD_BYTES = 1 << 20


class MsgType(enum.IntEnum):
    HELLO = 1
    SPIKES = 2
    RESULT = 3
    ERROR = 4


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    session_id: int
    time_step: int = 0
    shape: tuple[int, int, int] = (0, 0, 0)
    payload: bytes = b""
    payload_bit_len: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.payload_bit_len is None:
            object.__setattr__(self, "payload_bit_len", 8 * len(self.payload))
        if len(self.payload) != (self.payload_bit_len + 7) // 8:
            raise ProtocolError(f"payload of {len(self.payload)} bytes cannot hold "
                                f"exactly {self.payload_bit_len} bits")
        if self.msg_type is MsgType.SPIKES and self.payload_bit_len != int(np.prod(self.shape)):
            raise ProtocolError(f"spike payload has {self.payload_bit_len} bits, shape {self.shape} "
                                f"needs {int(np.prod(self.shape))}")

    def encode(self) -> bytes:
        head = HEADER.pack(MAGIC, VERSION, int(self.msg_type), self.session_id, self.time_step,
                           *self.shape, self.payload_bit_len)
        body = head + self.payload
        return body + CRC.pack(zlib.crc32(body))

    @classmethod
    def decode(cls, raw: bytes) -> "Frame":
        if len(raw) < HEADER.size + CRC.size:
            raise ProtocolError(f"truncated frame ({len(raw)} bytes)")
        magic, version, mtype, sid, step, c, h, w, nbits = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ProtocolError(f"unsupported version {version}")
        nbytes = (nbits + 7) // 8
        if len(raw) != HEADER.size + nbytes + CRC.size:
            raise ProtocolError(f"frame is {len(raw)} bytes, header announces {HEADER.size + nbytes + CRC.size}")
        (crc,) = CRC.unpack_from(raw, HEADER.size + nbytes)
        if crc != zlib.crc32(raw[:HEADER.size + nbytes]):
            raise ProtocolError("crc mismatch")
        try:
            mtype = MsgType(mtype)
        except ValueError:
            raise ProtocolError(f"unknown message type {mtype}") from None
        payload = bytes(raw[HEADER.size:HEADER.size + nbytes])
        return cls(mtype, sid, step, (c, h, w), payload, nbits)


def error_frame(session_id: int, message: str) -> Frame:
    return Frame(MsgType.ERROR, session_id, payload=message.encode()[:1024])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ProtocolError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Frame:
    head = _recv_exact(sock, HEADER.size)
    nbits = HEADER.unpack(head)[-1]
    nbytes = (nbits + 7) // 8
    if nbytes > MAX_PAYLOAD_BYTES:
        raise ProtocolError(f"announced payload of {nbytes} bytes exceeds limit")
    return Frame.decode(head + _recv_exact(sock, nbytes + CRC.size))


def send_frame(sock: socket.socket, frame: Frame) -> None:
    sock.sendall(frame.encode())


# -- cloud side ---------------------------------------------------------------


def _session_copy(sc: SnnSc) -> SnnSc:
    """Deep copy sharing the (read-only) parameter and statistic arrays."""
    memo = {id(p.data): p.data for p in sc.parameters()}
    memo.update({id(b): b for _, b in sc.named_buffers()})
    return copy.deepcopy(sc, memo)


class CloudSession:
    """Per-connection state: private neuron potentials and a private channel stream."""

    def __init__(self, system: SplitSystem, session_id: int, channel: ChannelConfig):
        self.system = system
        self.sc = _session_copy(system.sc)
        self.sc.reset()
        self.session_id = session_id
        self.channel = Channel(channel.with_(seed=derive_seed(channel.seed, session_id)))
        self.outputs: list = []

    @property
    def expected_step(self) -> int:
        return len(self.outputs) + 1

    def spikes(self, frame: Frame) -> np.ndarray | None:
        """Consume one Spikes frame; returns logits after the last step."""
        g = self.sc.geometry
        if frame.shape != g.code_shape:
            raise ProtocolError(f"spike shape {frame.shape} != negotiated {g.code_shape}")
        if frame.time_step != self.expected_step:
            raise ProtocolError(f"expected step {self.expected_step}, got {frame.time_step}")
        z = unpack_bits(BitBuffer(frame.payload, frame.payload_bit_len), (1, *g.code_shape))
        z_hat = self.channel(z).astype(self.sc.dtype)
        with no_grad():
            self.outputs.append(self.sc.reconstruct(z_hat))
            if len(self.outputs) < self.sc.time_steps:
                return None
            return self.system.backbone.cloud(self.sc.convert(self.outputs))


class CloudServer(socketserver.ThreadingTCPServer):
    """Threaded server; ``results`` maps session id to logits for local inspection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], system: SplitSystem, channel: ChannelConfig,
                 timeout: float = 10.0):
        if not isinstance(system.sc, SnnSc):
            raise TypeError("the cloud server needs a spiking SC model")
        system.eval()
        self.system = system
        self.channel_cfg = channel
        self.read_timeout = timeout
        self.results: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        super().__init__(address, _Handler)

    def hello_reply(self, frame: Frame) -> Frame:
        sc = self.system.sc
        g = sc.geometry
        mine = (sc.time_steps, *g.feature_shape)
        if len(frame.payload) != HELLO.size:
            raise ProtocolError("malformed hello payload")
        theirs = HELLO.unpack(frame.payload)
        if theirs != mine or frame.shape != g.code_shape:
            raise ProtocolError(f"geometry mismatch: client T,c,h,w={theirs} code {frame.shape}, "
                                f"server {mine} code {g.code_shape}")
        return Frame(MsgType.HELLO, frame.session_id, 0, g.code_shape, HELLO.pack(*mine))

    def record(self, session_id: int, logits: np.ndarray) -> None:
        with self._lock:
            self.results[session_id] = logits

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


class _Handler(socketserver.BaseRequestHandler):
    server: CloudServer

    def handle(self) -> None:
        sock = self.request
        sock.settimeout(self.server.read_timeout)
        sid = 0
        try:
            hello = read_frame(sock)
            sid = hello.session_id
            if hello.msg_type is not MsgType.HELLO:
                raise ProtocolError(f"expected Hello, got {hello.msg_type.name}")
            send_frame(sock, self.server.hello_reply(hello))
            session = CloudSession(self.server.system, sid, self.server.channel_cfg)
            logits = None
            while logits is None:
                frame = read_frame(sock)
                if frame.msg_type is not MsgType.SPIKES or frame.session_id != sid:
                    raise ProtocolError(f"unexpected {frame.msg_type.name} frame for session {frame.session_id}")
                logits = session.spikes(frame)
            self.server.record(sid, logits[0])
            label = int(np.argmax(logits[0]))
            send_frame(sock, Frame(MsgType.RESULT, sid, payload=struct.pack("<H", label)))
        except (ProtocolError, socket.timeout, ValueError) as exc:
            log.info("session %d aborted: %s", sid, exc)
            try:
                send_frame(sock, error_frame(sid, str(exc)))
                _linger(sock)
            except OSError:
                pass
        except OSError as exc:
            log.info("session %d connection error: %s", sid, exc)


def _linger(sock: socket.socket, limit: int = 1 << 16) -> None:
    """Half-close and drain unread input so closing does not reset the reply away."""
    sock.shutdown(socket.SHUT_WR)
    sock.settimeout(0.5)
    got = 0
    while got < limit:
        chunk = sock.recv(4096)
        if not chunk:
            return
        got += len(chunk)


# -- edge side ----------------------------------------------------------------


class RemoteError(RuntimeError):
    """The server answered with an Error frame."""


class EdgeClient:
    """Runs the backbone head and the spiking encoder; ships spikes to a server."""

    def __init__(self, system: SplitSystem, address: tuple[str, int], timeout: float = 10.0):
        if not isinstance(system.sc, SnnSc):
            raise TypeError("the edge client needs a spiking SC model")
        system.eval()
        self.system = system
        self.address = address
        self.timeout = timeout
        self.frames_sent = 0
        self.bits_sent = 0

    def spike_frames(self, image: np.ndarray, session_id: int) -> list[Frame]:
        sc = self.system.sc
        with no_grad():
            f = self.system.features(image[None])
            sc.reset()
            frames = []
            for t in range(1, sc.time_steps + 1):
                buf = pack_bits(sc.encode(f)[0])
                frames.append(Frame(MsgType.SPIKES, session_id, t, sc.geometry.code_shape, buf.data, buf.bit_len))
        return frames

    def hello(self, session_id: int) -> Frame:
        sc = self.system.sc
        return Frame(MsgType.HELLO, session_id, 0, sc.geometry.code_shape,
                     HELLO.pack(sc.time_steps, *sc.geometry.feature_shape))

    def infer(self, image: np.ndarray, session_id: int) -> int:
        """Classify one u8 (C, H, W) image remotely; returns the label."""
        frames = self.spike_frames(image, session_id)
        with socket.create_connection(self.address, timeout=self.timeout) as sock:
            send_frame(sock, self.hello(session_id))
            reply = read_frame(sock)
            if reply.msg_type is MsgType.ERROR:
                raise RemoteError(reply.payload.decode(errors="replace"))
            for fr in frames:
                send_frame(sock, fr)
                self.frames_sent += 1
                self.bits_sent += fr.payload_bit_len
            reply = read_frame(sock)
        if reply.msg_type is MsgType.ERROR:
            raise RemoteError(reply.payload.decode(errors="replace"))
        if reply.msg_type is not MsgType.RESULT or len(reply.payload) != 2:
            raise ProtocolError(f"unexpected reply {reply.msg_type.name}")
        return struct.unpack("<H", reply.payload)[0]


def send_raw(address: tuple[str, int], raw: bytes, timeout: float = 5.0) -> Frame | None:
    """Send arbitrary bytes, half-close, and return the server's first reply frame (if any)."""
    with socket.create_connection(address, timeout=timeout) as sock:
        try:
            sock.sendall(raw)
            sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass  # the server may already have answered and closed
        try:
            return read_frame(sock)
        except ProtocolError:
            return None


def local_logits(system: SplitSystem, image: np.ndarray, session_id: int, channel: ChannelConfig) -> np.ndarray:
    """In-process reference for one remote inference with the same noise stream."""
    ch = Channel(channel.with_(seed=derive_seed(channel.seed, session_id)))
    system.eval()
    with no_grad():
        return system.logits_from_feature(system.features(image[None]), ch)[0][0]
