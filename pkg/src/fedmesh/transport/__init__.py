"""Message encoding and delivery between clients and server."""
from fedmesh.transport.codec import (
    Ack,
    ErrorCode,
    ErrorMessage,
    Frame,
    FrameDecoder,
    FrameError,
    FrameTooLarge,
    GlobalBroadcast,
    Join,
    MsgType,
    RoundComplete,
    UnknownMessageType,
    checksum,
    decode_client_update,
    decode_frames,
    decode_message,
    encode_client_update,
    encode_frame,
    encode_message,
)
from fedmesh.transport.network import (
    IN_PROCESS,
    STREAM_SOCKET,
    ConnectionClosed,
    Delivery,
    DeliveryFailed,
    NetworkConfig,
    RecvTimeout,
    RejectedAttempt,
    SimEndpoint,
    SimulatedNetwork,
    StreamEndpoint,
    TraceEntry,
    connect,
    listen,
    parse_hostport,
    send_reliably,
)

__all__ = [
    "Ack",
    "ErrorCode",
    "ErrorMessage",
    "Frame",
    "FrameDecoder",
    "FrameError",
    "FrameTooLarge",
    "GlobalBroadcast",
    "Join",
    "MsgType",
    "RoundComplete",
    "UnknownMessageType",
    "checksum",
    "decode_client_update",
    "decode_frames",
    "decode_message",
    "encode_client_update",
    "encode_frame",
    "encode_message",
    "IN_PROCESS",
    "STREAM_SOCKET",
    "ConnectionClosed",
    "Delivery",
    "DeliveryFailed",
    "NetworkConfig",
    "RecvTimeout",
    "RejectedAttempt",
    "SimEndpoint",
    "SimulatedNetwork",
    "StreamEndpoint",
    "TraceEntry",
    "connect",
    "listen",
    "parse_hostport",
    "send_reliably",
]
