"""Endpoints: a seeded in-process network simulator and stream sockets.

Both endpoint kinds expose ``send(frame) -> Delivery`` and
``recv(timeout_ms) -> Frame`` (raising RecvTimeout), so the retry logic
in :func:`send_reliably` runs unchanged over either.
"""
from __future__ import annotations

import hashlib
import heapq
import logging
import socket
import threading
import time
from dataclasses import dataclass

from fedmesh.transport.codec import (
    DEFAULT_MAX_FRAME,
    FrameDecoder,
    FrameError,
    MsgType,
    encode_frame,
)

log = logging.getLogger(__name__)

IN_PROCESS = "in_process"
STREAM_SOCKET = "stream_socket"


class RecvTimeout(TimeoutError):
    pass


class ConnectionClosed(ConnectionError):
    pass


class DeliveryFailed(ConnectionError):
    def __init__(self, attempts, message="no acknowledgement"):
        super().__init__(f"{message} after {attempts} attempts")
        self.attempts = attempts


@dataclass(frozen=True)
class NetworkConfig:
    mode: str = IN_PROCESS
    latency_ms: float = 0.0
    drop_probability: float = 0.0
    seed: int = 0
    max_frame_size: int = DEFAULT_MAX_FRAME
    retries: int = 3
    timeout_ms: float = 100.0
    backoff: float = 2.0

    def __post_init__(self):
        if self.mode not in (IN_PROCESS, STREAM_SOCKET):
            raise ValueError(f"unknown network mode {self.mode!r}")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop_probability must be in [0, 1)")
        if self.retries < 0:
            raise ValueError("retries must be non-negative")


@dataclass(frozen=True)
class Delivery:
    delivered: bool
    seq: int = 0
    deliver_at_ms: float = 0.0


@dataclass(frozen=True)
class TraceEntry:
    src: str
    dst: str
    seq: int
    msg_type: int
    size: int
    dropped: bool
    deliver_at_ms: float


# --- simulated network ------------------------------------------------------------

def _drop_draw(seed, src, dst, seq):
    digest = hashlib.blake2b(f"{seed}|{src}|{dst}|{seq}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0 ** 64


class SimulatedNetwork:
    """Virtual-time network with per-link FIFO delivery and seeded loss.

    Whether a frame is dropped depends only on (seed, link, per-link
    sequence number), so the drop pattern replays exactly even when
    several threads send at once. A dropped frame leaves a marker in the
    receiver's queue so that its ``recv`` times out at the same point a
    real receiver's timer would.
    """

    def __init__(self, config=None):
        self.config = config or NetworkConfig()
        self._lock = threading.RLock()
        self._link_seq = {}
        self._trace = []
        self.captured = []
        self.now_ms = 0.0
        self._corrupt = {}

    def connect(self, a, b):
        ea = SimEndpoint(self, a, b)
        eb = SimEndpoint(self, b, a)
        ea._peer, eb._peer = eb, ea
        return ea, eb

    def corrupt_next(self, src, dst, count=1):
        """Flip one payload byte in the next ``count`` frames sent src -> dst."""
        with self._lock:
            self._corrupt[(src, dst)] = self._corrupt.get((src, dst), 0) + count

    def trace(self):
        """Trace ordered by link then sequence number (interleaving-free)."""
        with self._lock:
            return sorted(self._trace, key=lambda e: (e.src, e.dst, e.seq))

    def advance(self, ms):
        with self._lock:
            self.now_ms += ms

    def _transmit(self, src_ep, data, msg_type, enqueue=True):
        cfg = self.config
        with self._lock:
            link = (src_ep.name, src_ep.peer_name)
            seq = self._link_seq.get(link, 0)
            self._link_seq[link] = seq + 1
            if self._corrupt.get(link):
                self._corrupt[link] -= 1
                buf = bytearray(data)
                buf[-1] ^= 0xFF
                data = bytes(buf)
            dropped = cfg.drop_probability > 0 and _drop_draw(cfg.seed, *link, seq) < cfg.drop_probability
            deliver_at = self.now_ms + cfg.latency_ms
            self._trace.append(TraceEntry(link[0], link[1], seq, int(msg_type), len(data), dropped, deliver_at))
            self.captured.append(data)
            if enqueue:
                src_ep._peer._enqueue(deliver_at, seq, None if dropped else data)
        return Delivery(not dropped, seq, deliver_at), data


class SimEndpoint:
    def __init__(self, network, name, peer_name):
        self.network = network
        self.name = name
        self.peer_name = peer_name
        self._peer = None
        self._inbox = []
        self._cond = threading.Condition()
        self._decoder = FrameDecoder(network.config.max_frame_size)
        self.responder = None
        self.handles = frozenset()

    def send(self, frame):
        data = encode_frame(frame, self.network.config.max_frame_size)
        peer = self._peer
        direct = peer.responder is not None and frame.msg_type in peer.handles
        result, data = self.network._transmit(self, data, frame.msg_type, enqueue=not direct)
        if direct and result.delivered:
            # synchronous peer: answer inline, as an RPC over the link
            try:
                incoming = peer._decode(data)
            except FrameError as exc:
                log.warning("%s: undecodable frame from %s: %s", peer.name, self.name, exc)
                return result
            reply = peer.responder(incoming)
            if reply is not None:
                peer.send(reply)
        return result

    def serve(self, responder, handles):
        """Answer frames of the given types inline instead of queueing them."""
        self.responder = responder
        self.handles = frozenset(int(t) for t in handles)

    def _enqueue(self, deliver_at, seq, data):
        with self._cond:
            heapq.heappush(self._inbox, (deliver_at, seq, data))
            self._cond.notify_all()

    def recv(self, timeout_ms=None):
        """Next frame in delivery order; RecvTimeout on a drop marker or empty queue.

        With ``timeout_ms`` None, blocks (in real time) until something arrives.
        """
        with self._cond:
            if timeout_ms is None:
                while not self._inbox:
                    self._cond.wait()
            if not self._inbox:
                self.network.advance(timeout_ms or 0.0)
                raise RecvTimeout(f"{self.name}: nothing from {self.peer_name}")
            deliver_at, _, data = heapq.heappop(self._inbox)
        with self.network._lock:
            self.network.now_ms = max(self.network.now_ms, deliver_at)
        if data is None:
            self.network.advance(timeout_ms or 0.0)
            raise RecvTimeout(f"{self.name}: frame from {self.peer_name} was lost")
        return self._decode(data)

    def _decode(self, data):
        self._decoder.feed(data)
        return self._decoder.next_frame()

    def wait(self, ms):
        self.network.advance(ms)

    def close(self):
        pass


# --- stream sockets -------------------------------------------------------------------

class StreamEndpoint:
    """Length-prefixed frames over a connected stream socket."""

    def __init__(self, sock, max_frame_size=DEFAULT_MAX_FRAME, name="stream"):
        self.sock = sock
        self.name = name
        self.max_frame_size = max_frame_size
        self._decoder = FrameDecoder(max_frame_size)
        self._send_lock = threading.Lock()
        self._seq = 0
        self.sent = []  # raw frames, for inspection

    def send(self, frame):
        data = encode_frame(frame, self.max_frame_size)
        with self._send_lock:
            self.sock.sendall(data)
            self.sent.append(data)
            self._seq += 1
            return Delivery(True, self._seq - 1)

    def recv(self, timeout_ms=None):
        deadline = None if timeout_ms is None else time.monotonic() + timeout_ms / 1000.0
        while True:
            frame = self._decoder.next_frame()
            if frame is not None:
                return frame
            if deadline is None:
                self.sock.settimeout(None)
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RecvTimeout(f"{self.name}: no frame within {timeout_ms} ms")
                self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout as exc:
                raise RecvTimeout(f"{self.name}: no frame within {timeout_ms} ms") from exc
            if not chunk:
                raise ConnectionClosed(f"{self.name}: peer closed the connection")
            self._decoder.feed(chunk)

    def wait(self, ms):
        time.sleep(ms / 1000.0)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_hostport(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def listen(host, port, backlog=16):
    srv = socket.create_server((host, port), backlog=backlog)
    return srv


def connect(host, port, timeout_s=10.0, max_frame_size=DEFAULT_MAX_FRAME, name="client"):
    """Connect, retrying until ``timeout_s`` elapses (the server may start later)."""
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return StreamEndpoint(sock, max_frame_size, name)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.05)


# --- retries ------------------------------------------------------------------------------

def send_reliably(endpoint, frame, accept, policy, on_retry=None):
    """Send ``frame`` until a reply satisfying ``accept`` arrives.

    ``accept(reply)`` returns True (done), False (ignore and keep waiting),
    or raises to reject the attempt. Up to ``policy.retries`` resends, the
    wait doubling (``policy.backoff``) each time. Returns ``(reply, attempts)``.
    """
    timeout = policy.timeout_ms
    attempts = 0
    last_error = None
    for attempt in range(policy.retries + 1):
        attempts = attempt + 1
        delivery = endpoint.send(frame)
        try:
            if not delivery.delivered:
                raise RecvTimeout("frame dropped")
            while True:
                reply = endpoint.recv(timeout)
                if accept(reply):
                    return reply, attempts
        except (RecvTimeout, RejectedAttempt) as exc:
            last_error = exc
            if not delivery.delivered:
                endpoint.wait(timeout)
        if attempt < policy.retries:
            log.info("retrying %s (attempt %d): %s", MsgType(frame.msg_type).name, attempt + 2, last_error)
            if on_retry is not None:
                on_retry(attempt + 1, last_error)
            timeout *= policy.backoff
    raise DeliveryFailed(attempts, str(last_error))


class RejectedAttempt(RuntimeError):
    """Raised by an ``accept`` callback: the peer answered, but unusably."""
