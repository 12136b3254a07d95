import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmesh.model import DecodeError, ParamVector
from fedmesh.protocol import ClientUpdate
from fedmesh.transport import (
    Ack,
    ConnectionClosed,
    DeliveryFailed,
    ErrorMessage,
    Frame,
    FrameDecoder,
    FrameError,
    FrameTooLarge,
    GlobalBroadcast,
    Join,
    MsgType,
    NetworkConfig,
    RecvTimeout,
    RejectedAttempt,
    RoundComplete,
    SimulatedNetwork,
    StreamEndpoint,
    UnknownMessageType,
    decode_client_update,
    decode_frames,
    decode_message,
    encode_client_update,
    encode_frame,
    encode_message,
    send_reliably,
)


def params(values, layout=None):
    values = np.asarray(values, dtype=np.float32)
    return ParamVector(values, layout or [("p", (values.size,))])


def upd(values=(1.0,), cid=1, rnd=2, n=3, loss=0.25):
    return ClientUpdate(cid, rnd, params(values), n, loss)


# --- codec ---------------------------------------------------------------------------

def test_frame_length_counts_type_byte():
    data = encode_frame(Frame(MsgType.ACK, b"abc"))
    assert data[:4] == b"\x00\x00\x00\x04" and data[4] == 0x03 and data[5:] == b"abc"


def test_empty_update_payload_is_five_header_words():
    # client_id, round, num_samples, local_loss, count: 5 x 4 bytes
    assert len(encode_client_update(upd(values=()))) == 20


def test_one_point_zero_is_little_endian_on_the_wire():
    assert encode_client_update(upd(values=(1.0,)))[-4:] == bytes.fromhex("0000803F")


def test_header_fields_are_big_endian():
    payload = encode_client_update(upd(values=(), cid=1, rnd=2, n=3, loss=1.0))
    assert payload == bytes.fromhex("00000001" "00000002" "00000003" "3F800000" "00000000")


def test_random_update_seed_7_round_trips():
    rng = np.random.default_rng(7)
    u = ClientUpdate(4, 9, params(rng.normal(size=500)), 123, float(np.float32(rng.uniform())))
    assert decode_client_update(encode_client_update(u), u.params.layout) == u


def test_declared_count_mismatch_is_a_decode_error():
    payload = encode_client_update(upd(values=(1.0, 2.0)))
    with pytest.raises(DecodeError):
        decode_client_update(payload[:-4])
    with pytest.raises(DecodeError):
        decode_client_update(payload + b"\x00")


def sample_messages(rng):
    layout = [("w", (2, 3)), ("b", (2,))]
    p = params(rng.normal(size=8), layout)
    return [
        ClientUpdate(int(rng.integers(2 ** 32)), int(rng.integers(2 ** 32)), params(rng.normal(size=5)),
                     int(rng.integers(1, 2 ** 32)), float(np.float32(rng.normal()))),
        GlobalBroadcast(int(rng.integers(100)), 15, p),
        Ack(int(rng.integers(2 ** 32)), int(rng.integers(2 ** 32))),
        ErrorMessage(int(rng.integers(1, 6)), "bad é thing"),
        RoundComplete(3, bool(rng.integers(2)), p),
        Join(int(rng.integers(100)), int(rng.integers(2 ** 32))),
    ]


def test_every_message_type_round_trips():
    rng = np.random.default_rng(0)
    for _ in range(50):
        for msg in sample_messages(rng):
            frame = encode_message(msg)
            layout = msg.params.layout if isinstance(msg, ClientUpdate) else None
            (again,) = decode_frames(encode_frame(frame))
            assert decode_message(again, layout) == msg


def test_one_update_split_at_every_byte_boundary():
    data = encode_frame(encode_message(upd(values=np.arange(10))))
    for cut in range(len(data) + 1):
        dec = FrameDecoder()
        dec.feed(data[:cut])
        first = dec.next_frame()
        dec.feed(data[cut:])
        frame = first or dec.next_frame()
        assert frame is not None and encode_frame(frame) == data


@given(st.lists(st.tuples(st.sampled_from(list(MsgType)), st.binary(max_size=40)), max_size=8),
       st.lists(st.integers(1, 17), max_size=20))
def test_any_write_boundaries_give_the_same_frames(frames, chunks):
    stream = b"".join(encode_frame(Frame(t, p)) for t, p in frames)
    dec, out, pos = FrameDecoder(), [], 0
    for size in chunks + [len(stream)]:
        dec.feed(stream[pos:pos + size])
        pos += size
        while (f := dec.next_frame()) is not None:
            out.append((f.msg_type, f.payload))
    assert out == [(int(t), p) for t, p in frames]


def test_unknown_type_is_reported_and_decoding_continues():
    dec = FrameDecoder()
    dec.feed(b"\x00\x00\x00\x02\x7f\x00" + encode_frame(Frame(MsgType.ACK, b"12345678")))
    with pytest.raises(UnknownMessageType):
        dec.next_frame()
    assert dec.next_frame().msg_type == MsgType.ACK


def test_oversized_length_is_a_connection_error():
    dec = FrameDecoder(max_frame_size=16)
    dec.feed(struct.pack(">I", 17) + b"\x01")
    with pytest.raises(FrameTooLarge) as info:
        dec.next_frame()
    assert isinstance(info.value, ConnectionError)
    with pytest.raises(FrameTooLarge):
        encode_frame(Frame(MsgType.ACK, b"x" * 16), max_frame_size=16)


def test_trailing_garbage_rejected():
    with pytest.raises(FrameError):
        decode_frames(encode_frame(Frame(MsgType.ACK, b"")) + b"\x00")


# --- simulated network ------------------------------------------------------------------

def test_fifo_without_loss():
    net = SimulatedNetwork()
    a, b = net.connect("a", "b")
    for i in range(20):
        a.send(Frame(MsgType.ACK, bytes([i])))
    assert [b.recv(10).payload[0] for _ in range(20)] == list(range(20))
    with pytest.raises(RecvTimeout):
        b.recv(10)


def drop_pattern(p=0.5, seed=3, sends=100):
    net = SimulatedNetwork(NetworkConfig(drop_probability=p, seed=seed))
    a, _ = net.connect("a", "b")
    return [a.send(Frame(MsgType.ACK, b"x")).delivered for _ in range(sends)]


def test_drop_pattern_replays_exactly():
    first = drop_pattern()
    assert first == drop_pattern()
    assert 20 < first.count(False) < 80
    assert first != drop_pattern(seed=4)


def test_dropped_frame_times_out_at_the_receiver():
    net = SimulatedNetwork(NetworkConfig(drop_probability=0.5, seed=3))
    a, b = net.connect("a", "b")
    results = [a.send(Frame(MsgType.ACK, bytes([i]))).delivered for i in range(6)]
    for i, ok in enumerate(results):
        if ok:
            assert b.recv(5).payload == bytes([i])
        else:
            with pytest.raises(RecvTimeout):
                b.recv(5)


def test_latency_advances_virtual_time():
    net = SimulatedNetwork(NetworkConfig(latency_ms=7.5))
    a, b = net.connect("a", "b")
    a.send(Frame(MsgType.ACK, b""))
    b.recv(1)
    assert net.now_ms == 7.5


def test_concurrent_senders_keep_per_link_order():
    net = SimulatedNetwork(NetworkConfig(drop_probability=0.3, seed=9))
    server_ends = []
    clients = []
    for k in range(5):
        s, c = net.connect("server", f"client-{k}")
        server_ends.append(s)
        clients.append(c)

    def blast(ep, k):
        for i in range(200):
            ep.send(Frame(MsgType.ACK, struct.pack(">II", k, i)))

    threads = [threading.Thread(target=blast, args=(c, k)) for k, c in enumerate(clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    trace = net.trace()
    assert len(trace) == 1000
    for k in range(5):
        link = [e for e in trace if e.src == f"client-{k}"]
        assert [e.seq for e in link] == list(range(200))
        got = []
        for e in link:
            try:
                got.append(struct.unpack(">II", server_ends[k].recv(1).payload)[1])
            except RecvTimeout:
                assert e.dropped
        assert got == [e.seq for e in link if not e.dropped]


def test_corrupt_next_flips_one_byte():
    net = SimulatedNetwork()
    a, b = net.connect("a", "b")
    net.corrupt_next("a", "b")
    a.send(Frame(MsgType.ACK, b"\x00\x01"))
    a.send(Frame(MsgType.ACK, b"\x00\x01"))
    assert b.recv(1).payload == b"\x00\xfe"
    assert b.recv(1).payload == b"\x00\x01"


# --- retries -------------------------------------------------------------------------------

def echo_ack(net_cfg):
    net = SimulatedNetwork(net_cfg)
    a, b = net.connect("a", "b")
    b.serve(lambda f: encode_message(Ack(0, 0)), (MsgType.JOIN,))
    return net, a


def test_send_reliably_succeeds_through_losses():
    net, a = echo_ack(NetworkConfig(drop_probability=0.3, seed=1, retries=10))
    for _ in range(20):
        reply, attempts = send_reliably(a, encode_message(Join(1, 1)), lambda r: True, net.config)
        assert decode_message(reply) == Ack(0, 0)


def test_send_reliably_gives_up_after_three_retries_with_doubling_waits():
    net = SimulatedNetwork(NetworkConfig(timeout_ms=100, retries=3))
    a, _ = net.connect("a", "b")
    retries = []
    with pytest.raises(DeliveryFailed) as info:
        send_reliably(a, encode_message(Join(1, 1)), lambda r: True, net.config,
                      on_retry=lambda n, e: retries.append(n))
    assert info.value.attempts == 4 and retries == [1, 2, 3]
    assert net.now_ms == 100 + 200 + 400 + 800


def test_rejected_reply_triggers_a_resend():
    net, a = echo_ack(NetworkConfig(retries=3))
    calls = []

    def accept(reply):
        calls.append(reply)
        if len(calls) == 1:
            raise RejectedAttempt("bad checksum")
        return True

    _, attempts = send_reliably(a, encode_message(Join(1, 1)), accept, net.config)
    assert attempts == 2


def test_config_rejects_certain_loss():
    with pytest.raises(ValueError):
        NetworkConfig(drop_probability=1.0)


# --- stream sockets ------------------------------------------------------------------------

@pytest.fixture
def pair():
    s1, s2 = socket.socketpair()
    a, b = StreamEndpoint(s1, name="a"), StreamEndpoint(s2, name="b")
    yield a, b
    a.close()
    b.close()


def test_stream_round_trip_every_type(pair):
    a, b = pair
    rng = np.random.default_rng(5)
    msgs = sample_messages(rng)
    for msg in msgs:
        a.send(encode_message(msg))
    for msg in msgs:
        layout = msg.params.layout if isinstance(msg, ClientUpdate) else None
        assert decode_message(b.recv(1000), layout) == msg


def test_stream_reassembles_one_byte_then_rest(pair):
    a, b = pair
    data = encode_frame(encode_message(upd(values=np.arange(50))))
    a.sock.sendall(data[:1])
    with pytest.raises(RecvTimeout):
        b.recv(20)
    a.sock.sendall(data[1:3])
    a.sock.sendall(data[3:])
    assert encode_frame(b.recv(1000)) == data


def test_stream_oversize_and_close(pair):
    a, b = pair
    b._decoder.max_frame_size = 8
    a.sock.sendall(struct.pack(">I", 9) + b"\x03")
    with pytest.raises(FrameTooLarge):
        b.recv(1000)
    a.close()
    c1, c2 = socket.socketpair()
    c1.close()
    with pytest.raises(ConnectionClosed):
        StreamEndpoint(c2).recv(1000)
