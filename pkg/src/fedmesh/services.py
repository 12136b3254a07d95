"""The analytics pipeline as placed, timed services.

Each service has a fixed stage and placement. Calls are timed through a
:class:`LatencyLedger`; the end-to-end response time of a prediction is
the preprocessing total plus the interpretation total, kept in integer
nanoseconds so the identity holds exactly.
"""
from __future__ import annotations

import contextlib
import contextvars
import json
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from fedmesh import kernels
from fedmesh.clock import WallClock
from fedmesh.pgm import resize_nearest
from fedmesh.protocol import (
    AggregationError,
    build_model,
    evaluate_params,
    federated_average,
    local_train,
)
from fedmesh.transport import (
    Ack,
    ErrorCode,
    ErrorMessage,
    MsgType,
    RejectedAttempt,
    checksum,
    decode_client_update,
    decode_message,
    encode_message,
    send_reliably,
)

log = logging.getLogger(__name__)

PREPROCESSING = "preprocessing"
MODEL_DEVELOPMENT = "model_development"
INTERPRETATION = "interpretation"
CLOUD = "cloud"
EDGE = "edge"


@dataclass(frozen=True)
class ServiceDescriptor:
    name: str
    stage: str
    placement: str


SERVICES = {
    d.name: d
    for d in (
        ServiceDescriptor("data_integration", PREPROCESSING, EDGE),
        ServiceDescriptor("data_scaling", PREPROCESSING, EDGE),
        ServiceDescriptor("model_creator", MODEL_DEVELOPMENT, CLOUD),
        ServiceDescriptor("model_uploader", MODEL_DEVELOPMENT, CLOUD),
        ServiceDescriptor("model_aggregator", MODEL_DEVELOPMENT, CLOUD),
        ServiceDescriptor("model_training", MODEL_DEVELOPMENT, EDGE),
        ServiceDescriptor("model_evaluator", MODEL_DEVELOPMENT, EDGE),
        ServiceDescriptor("application", INTERPRETATION, EDGE),
    )
}


class PlacementError(RuntimeError):
    pass


class IntegrationError(ValueError):
    pass


class MalformedInput(ValueError):
    pass


_host = contextvars.ContextVar("fedmesh_host", default=None)


@contextlib.contextmanager
def placement(where, node=None):
    """Run the body as host ``where`` (cloud/edge); services check against it."""
    if where not in (CLOUD, EDGE):
        raise ValueError(f"unknown placement {where!r}")
    token = _host.set((where, node))
    try:
        yield
    finally:
        _host.reset(token)


def current_host():
    return _host.get()


@dataclass(frozen=True)
class LedgerEntry:
    name: str
    stage: str
    placement: str
    start_ns: int
    duration_ns: int
    round: int | None = None
    client_id: int | None = None

    @property
    def duration_ms(self):
        return self.duration_ns / 1e6

    def to_json(self):
        return {
            "name": self.name,
            "stage": self.stage,
            "placement": self.placement,
            "duration_ms": self.duration_ms,
            "round": self.round,
            "client_id": self.client_id,
            "start_ms": self.start_ns / 1e6,
        }


class LatencyLedger:
    """Append-only service timings; appends are serialized by a lock."""

    def __init__(self, clock=None, sink=None):
        self.clock = clock or WallClock()
        self._entries = []
        self._lock = threading.Lock()
        self._sink = sink

    @property
    def entries(self):
        with self._lock:
            return list(self._entries)

    def record(self, name, start_ns, duration_ns, round=None, client_id=None):
        desc = SERVICES[name]
        if duration_ns < 0:
            raise ValueError(f"negative duration for {name}")
        entry = LedgerEntry(name, desc.stage, desc.placement, int(start_ns), int(duration_ns), round, client_id)
        with self._lock:
            self._entries.append(entry)
            if self._sink is not None:
                self._sink.write(json.dumps(entry.to_json()) + "\n")
                self._sink.flush()
        return entry

    def record_ms(self, name, start_ms, duration_ms, round=None, client_id=None):
        return self.record(name, round_ns(start_ms), round_ns(duration_ms), round, client_id)

    @contextlib.contextmanager
    def timed(self, name, round=None, client_id=None):
        start = self.clock.now_ns()
        yield
        self.record(name, start, self.clock.now_ns() - start, round, client_id)

    def _stage_ns(self, stage):
        return sum(e.duration_ns for e in self.entries if e.stage == stage)

    @property
    def t_pre_ns(self):
        return self._stage_ns(PREPROCESSING)

    @property
    def t_inter_ns(self):
        return self._stage_ns(INTERPRETATION)

    @property
    def t_f_ns(self):
        return self.t_pre_ns + self.t_inter_ns

    @property
    def t_pre_ms(self):
        return self.t_pre_ns / 1e6

    @property
    def t_inter_ms(self):
        return self.t_inter_ns / 1e6

    @property
    def t_f_ms(self):
        return self.t_f_ns / 1e6

    def for_round(self, round_index):
        return [e for e in self.entries if e.round == round_index]

    def write_jsonl(self, fh):
        for e in self.entries:
            fh.write(json.dumps(e.to_json()) + "\n")


def round_ns(ms):
    return int(round(ms * 1_000_000))


@contextlib.contextmanager
def _service(name, ledger=None, round=None, client_id=None):
    desc = SERVICES[name]
    host = _host.get()
    if host is not None and host[0] != desc.placement:
        raise PlacementError(f"{name} is placed on {desc.placement} but was invoked on {host[0]} ({host[1]})")
    if ledger is None:
        yield
    else:
        with ledger.timed(name, round, client_id):
            yield


# --- preprocessing ----------------------------------------------------------------

@dataclass(frozen=True)
class RawBatch:
    """Examples from one source: ``[n, h, w]`` images or ``[n, d]`` rows."""

    data: np.ndarray
    source_id: str
    labels: np.ndarray | None = None

    @property
    def input_dim(self):
        return int(np.prod(np.shape(self.data)[1:]))


@dataclass(frozen=True)
class UnifiedBatch:
    X: np.ndarray
    labels: np.ndarray | None
    provenance: tuple

    def __len__(self):
        return self.X.shape[0]


def data_integration(sources, image_side=None, ledger=None, round=None, client_id=None):
    """Concatenate sources in order, optionally resizing images to ``image_side``."""
    with _service("data_integration", ledger, round, client_id):
        if not sources:
            raise IntegrationError("no sources to integrate")
        rows, labels, prov = [], [], []
        for src in sources:
            data = np.asarray(src.data, dtype=np.float64)
            if image_side is not None and data.ndim == 3:
                data = np.stack([resize_nearest(img, image_side) for img in data]) if len(data) else \
                    np.zeros((0, image_side, image_side))
            rows.append(data.reshape(data.shape[0], -1))
        dims = [r.shape[1] for r in rows]
        if len(set(dims)) > 1:
            listing = ", ".join(f"{s.source_id}: {d}" for s, d in zip(sources, dims))
            raise IntegrationError(f"sources disagree on input_dim ({listing})")
        have_labels = all(s.labels is not None for s in sources)
        for src, r in zip(sources, rows):
            prov.extend((src.source_id, i) for i in range(r.shape[0]))
            if have_labels:
                labels.append(np.asarray(src.labels, dtype=np.int64).reshape(-1))
        X = np.concatenate(rows)
        y = np.concatenate(labels) if have_labels else None
        return UnifiedBatch(X, y, tuple(prov))


MIN_MAX = "min_max_to_unit"
STANDARDIZE = "standardize"


def data_scaling(batch, method=MIN_MAX, feature_range=None, ledger=None, round=None, client_id=None):
    """Scale each feature column.

    ``min_max_to_unit`` maps to [0, 1] using the batch min/max, or the
    predefined ``feature_range=(lo, hi)`` when given (values clipped);
    constant features map to 0. ``standardize`` gives zero mean and unit
    variance; zero-variance features map to 0.
    """
    with _service("data_scaling", ledger, round, client_id):
        unified = isinstance(batch, UnifiedBatch)
        X = np.asarray(batch.X if unified else batch, dtype=np.float64)
        if X.size == 0 or X.shape[0] == 0:
            raise ValueError("cannot scale an empty batch")
        if not np.all(np.isfinite(X)):
            raise ValueError("batch contains non-finite values")
        if method == MIN_MAX:
            if feature_range is not None:
                lo, hi = (np.asarray(v, dtype=np.float64) for v in feature_range)
                lo = np.broadcast_to(lo, X.shape[1:])
                hi = np.broadcast_to(hi, X.shape[1:])
            else:
                lo, hi = X.min(axis=0), X.max(axis=0)
            span = hi - lo
            safe = np.where(span > 0, span, 1.0)
            out = np.where(span > 0, (X - lo) / safe, 0.0)
            if feature_range is not None:
                out = np.clip(out, 0.0, 1.0)
        elif method == STANDARDIZE:
            mean = X.mean(axis=0)
            std = X.std(axis=0)
            safe = np.where(std > 0, std, 1.0)
            out = np.where(std > 0, (X - mean) / safe, 0.0)
        else:
            raise ValueError(f"unknown scaling method {method!r}")
        if unified:
            return UnifiedBatch(out, batch.labels, batch.provenance)
        return out


# --- model development --------------------------------------------------------------

def model_creator(config, ledger=None):
    """Frozen-base model plus the initial head, both from ``config.seed``."""
    with _service("model_creator", ledger, round=None):
        model = build_model(config)
        return model, model.head


def model_training(global_params, data, config, client_id, round_index, ledger=None):
    with _service("model_training", ledger, round_index, client_id):
        return local_train(global_params, data, config, client_id, round_index)


def model_aggregator(updates, mode, ledger=None, round_index=None):
    updates = list(updates)
    if not updates:
        # fail before timing so a failed aggregation leaves no entry
        raise AggregationError("no client updates to aggregate")
    with _service("model_aggregator", ledger, round_index):
        return federated_average(updates, mode)


def model_evaluator(params, test_set, config, ledger=None, round_index=None):
    """Evaluation (metrics, mean loss, confusion matrix) on a held-out set."""
    if not test_set:
        raise ValueError("model_evaluator needs a non-empty test set")
    with _service("model_evaluator", ledger, round_index):
        return evaluate_params(params, test_set, config)


@dataclass(frozen=True)
class Receipt:
    seq: int
    byte_count: int
    checksum: int
    attempts: int
    client_id: int
    round: int


class UploadReceiver:
    """Cloud-side end of an upload: decode, hand over, acknowledge.

    ``on_update(update)`` may raise to refuse; the sender then gets an
    Error frame. Acks carry an increasing sequence number and the CRC-32
    of the payload as received.
    """

    def __init__(self, layout, on_update):
        self.layout = layout
        self.on_update = on_update
        self._seq = 0
        self._lock = threading.Lock()

    def handle(self, frame):
        if frame.msg_type != MsgType.CLIENT_UPDATE:
            return None
        try:
            update = decode_client_update(frame.payload, self.layout)
            self.on_update(update)
        except Exception as exc:  # noqa: BLE001 - any refusal goes back as an Error frame
            log.warning("upload refused: %s", exc)
            return encode_message(ErrorMessage(ErrorCode.DECODE_FAILED, str(exc)))
        with self._lock:
            seq = self._seq
            self._seq += 1
        return encode_message(Ack(seq, checksum(frame.payload)))


def _ack_for(crc):
    def accept(reply):
        msg = decode_message(reply)
        if isinstance(msg, Ack):
            if msg.checksum != crc:
                raise RejectedAttempt(f"checksum mismatch: sent {crc:08x}, receiver saw {msg.checksum:08x}")
            return True
        if isinstance(msg, ErrorMessage):
            raise RejectedAttempt(f"receiver refused: {msg.reason}")
        return False
    return accept


def upload_update(update, endpoint, policy):
    """Frame, send and confirm one update; returns ``(ack, attempts, frame)``."""
    frame = encode_message(update)
    crc = checksum(frame.payload)
    ack, attempts = send_reliably(endpoint, frame, _ack_for(crc), policy)
    return decode_message(ack), attempts, frame


def model_uploader(update, endpoint, policy, ledger=None):
    """Transfer a trained head to the server and return its receipt.

    Raises DeliveryFailed once the retry budget is spent.
    """
    with _service("model_uploader", ledger, update.round, update.client_id):
        ack, attempts, frame = upload_update(update, endpoint, policy)
        if attempts > 1:
            log.info("upload from client %d round %d needed %d attempts", update.client_id, update.round, attempts)
        return Receipt(ack.seq, 5 + len(frame.payload), ack.checksum, attempts, update.client_id, update.round)


# --- interpretation -------------------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    label: int
    probability: float
    tie: bool = False


@dataclass
class PipelineRun:
    input: dict
    outputs: dict = field(default_factory=dict)
    ledger: LatencyLedger = None
    verdict: Verdict = None

    def __iter__(self):
        # unpacks as (label, probability, ledger)
        return iter((self.verdict.label, self.verdict.probability, self.ledger))


def _check_input(image):
    arr = np.asarray(image)
    if arr.ndim not in (1, 2) or arr.size == 0:
        raise MalformedInput(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number) or not np.all(np.isfinite(arr)):
        raise MalformedInput("image must contain finite numbers")
    return arr.astype(np.float64)


def application(params, image, config, maxval=1.0, clock=None, model=None):
    """Preprocess one raw grayscale image, run the model, return a PipelineRun.

    The image may be any size (it is resized) or an already-flat vector of
    ``input_dim`` values. Ties at 0.5/0.5 go to the normal class and are
    flagged.
    """
    img = _check_input(image)
    side = int(round(config.dims.input_dim ** 0.5))
    if img.ndim == 1 and img.size != config.dims.input_dim:
        raise MalformedInput(f"flat input has {img.size} values, model expects {config.dims.input_dim}")
    if img.ndim == 2 and side * side != config.dims.input_dim:
        raise MalformedInput("model input_dim is not a square image size")
    if not maxval > 0:
        raise MalformedInput("maxval must be positive")

    ledger = LatencyLedger(clock)
    model = model or build_model(config, params)
    run = PipelineRun(input={"shape": list(img.shape), "maxval": maxval}, ledger=ledger)
    source = RawBatch(img[None] if img.ndim == 2 else img.reshape(1, -1), "input")
    batch = data_integration([source], image_side=side if img.ndim == 2 else None, ledger=ledger)
    scaled = data_scaling(batch, MIN_MAX, feature_range=(0.0, maxval), ledger=ledger)
    run.outputs["data_integration"] = batch
    run.outputs["data_scaling"] = scaled
    with _service("application", ledger):
        feats = model.features(scaled.X)
        probs = kernels.forward(feats, params.values.astype(np.float64),
                                config.dims.feature_dim, config.dims.hidden_dim)[0]
        tie = bool(probs[0] == probs[1])
        label = 1 if probs[1] > probs[0] else 0
        run.verdict = Verdict(label, float(probs[label]), tie)
    run.outputs["probabilities"] = probs
    return run


def latency_summary(values_ms):
    arr = np.asarray(values_ms, dtype=np.float64)
    if arr.size == 0:
        return {"count": 0}
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
    }
