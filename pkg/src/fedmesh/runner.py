"""Experiment drivers: in-process runs and the socket server/client pair.

All three drivers share the server state machine in :mod:`fedmesh.protocol`
and aggregate only what was decoded off the wire, so an in-process run and
a socket run with the same seeds produce the same parameters.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import queue
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedmesh import kernels
from fedmesh.clock import ManualClock, WallClock, ms
from fedmesh.data import (
    AugmentPolicy,
    PartitionPlan,
    as_arrays,
    augment_training_set,
    central_test_set,
    generate_synthetic,
    load_image_folder,
    partition,
)
from fedmesh.protocol import (
    ClientRefusal,
    RoundFailed,
    finish_round,
    initialize_global,
)
from fedmesh.services import (
    CLOUD,
    EDGE,
    MIN_MAX,
    LatencyLedger,
    RawBatch,
    UploadReceiver,
    _ack_for,
    application,
    data_integration,
    data_scaling,
    latency_summary,
    model_aggregator,
    model_creator,
    model_evaluator,
    model_training,
    model_uploader,
    placement,
    upload_update,
)
from fedmesh.transport import (
    Ack,
    ConnectionClosed,
    DeliveryFailed,
    ErrorCode,
    ErrorMessage,
    FrameError,
    GlobalBroadcast,
    Join,
    MsgType,
    RecvTimeout,
    RoundComplete,
    SimulatedNetwork,
    StreamEndpoint,
    checksum,
    connect,
    decode_message,
    encode_message,
    listen,
    parse_hostport,
    send_reliably,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ROUND_FAILED = 1
EXIT_JOIN_TIMEOUT = 2
EXIT_CLIENT_ERROR = 3

# columns after the per-client losses; documented in ``fedmesh --help``
ROUND_LOG_TAIL = ("aggregate_loss", "accuracy", "precision", "recall", "f1", "wall_time_ms")
# final_report.json keys that legitimately differ between transports or runs
VOLATILE_REPORT_KEYS = ("config", "latency", "timing", "network")


def round_log_columns(num_clients):
    return ("round",) + tuple(f"client_{k}_loss" for k in range(num_clients)) + ROUND_LOG_TAIL


# --- data -----------------------------------------------------------------------

@dataclass(frozen=True)
class PreparedClient:
    """One client's preprocessed training arrays plus its held-out examples."""

    client_id: int
    X: np.ndarray
    y: np.ndarray
    test: tuple
    histogram: dict

    def train_arrays(self):
        return self.X, self.y


@dataclass
class DataBundle:
    clients: list
    test_set: list
    histograms: dict
    skipped: int = 0


def load_examples(cfg):
    if cfg.synthetic:
        return generate_synthetic(cfg.n_samples, cfg.imbalance, cfg.image_side, cfg.seed), 0
    loaded = load_image_folder(cfg.data, cfg.image_side)
    return list(loaded), loaded.skipped


def preprocess_client(client, ledger=None):
    """Data integration and scaling on a client's own training examples."""
    if not client.train:
        X, y = as_arrays(())
        return PreparedClient(client.client_id, X, y, client.test, client.histogram())
    with placement(EDGE, f"client-{client.client_id}"):
        src = RawBatch(
            np.stack([ex.pixels for ex in client.train]),
            f"client-{client.client_id}",
            np.array([ex.label for ex in client.train]),
        )
        batch = data_integration([src], ledger=ledger, client_id=client.client_id)
        # pixels are already re-scaled to [0, 1]; the fixed range keeps inference consistent
        batch = data_scaling(batch, MIN_MAX, feature_range=(0.0, 1.0), ledger=ledger, client_id=client.client_id)
    return PreparedClient(client.client_id, batch.X, batch.labels, client.test, client.histogram())


def prepare_data(cfg, ledger=None, only_client=None):
    examples, skipped = load_examples(cfg)
    plan = PartitionPlan(cfg.clients, cfg.partition, cfg.alpha, cfg.seed, cfg.test_fraction)
    raw = partition(examples, plan)
    histograms = {c.client_id: c.histogram() for c in raw}
    if cfg.augment:
        raw = [augment_training_set(c, AugmentPolicy(), cfg.seed) for c in raw]
    clients = [
        preprocess_client(c, ledger) if only_client is None or c.client_id == only_client else None
        for c in raw
    ]
    return DataBundle(clients, central_test_set(raw), histograms, skipped)


# --- artifacts ------------------------------------------------------------------------

def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunArtifacts:
    """round_log.csv, services.jsonl and final_report.json under ``out_dir``."""

    def __init__(self, out_dir, num_clients):
        os.makedirs(out_dir, exist_ok=True)
        self.out_dir = out_dir
        self.num_clients = num_clients
        self._csv_fh = open(os.path.join(out_dir, "round_log.csv"), "w", newline="")
        self._csv = csv.writer(self._csv_fh, lineterminator="\n")
        self._csv.writerow(round_log_columns(num_clients))
        self._csv_fh.flush()
        self.services_fh = open(os.path.join(out_dir, "services.jsonl"), "w")

    @property
    def round_log_path(self):
        return os.path.join(self.out_dir, "round_log.csv")

    @property
    def report_path(self):
        return os.path.join(self.out_dir, "final_report.json")

    def log_round(self, record):
        m = record.eval_metrics
        row = [record.round]
        row += [record.client_losses.get(k) for k in range(self.num_clients)]
        row += [record.aggregate_train_loss]
        row += [m.accuracy, m.precision, m.recall, m.f1] if m is not None else [None] * 4
        row += [record.wall_time_ms]
        self._csv.writerow([_cell(v) for v in row])
        self._csv_fh.flush()

    def write_report(self, report):
        with open(self.report_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def close(self):
        self._csv_fh.close()
        self.services_fh.close()


def params_digest(params):
    return hashlib.sha256(np.asarray(params.values, dtype="<f4").tobytes()).hexdigest()


def _round_summary(record):
    return {
        "round": record.round,
        "aggregate_loss": record.aggregate_train_loss,
        "client_losses": {str(k): v for k, v in record.client_losses.items()},
        "eval_loss": record.eval_loss,
        "metrics": record.eval_metrics.to_json() if record.eval_metrics else None,
        "participants": record.participants,
        "failures": {str(k): v for k, v in record.failures.items()},
    }


def make_clock(cfg):
    return ManualClock() if cfg.clock == "virtual" else WallClock()


@dataclass
class RunResult:
    exit_code: int
    final_params: object = None
    history: list = field(default_factory=list)
    out_dir: str = ""
    report: dict = field(default_factory=dict)
    network: object = None
    error: str = ""


def application_latency(params, fed, test_set, ledger, clock, samples):
    """Run the prediction pipeline on up to ``samples`` held-out images."""
    pre, inter, total = [], [], []
    with placement(EDGE, "application"):
        for ex in test_set[:samples]:
            run = application(params, ex.pixels, fed, maxval=1.0, clock=clock)
            for e in run.ledger.entries:
                ledger.record(e.name, e.start_ns, e.duration_ns)
            pre.append(run.ledger.t_pre_ms)
            inter.append(run.ledger.t_inter_ms)
            total.append(run.ledger.t_f_ms)
    return {
        "t_pre_ms": latency_summary(pre),
        "t_inter_ms": latency_summary(inter),
        "t_f_ms": latency_summary(total),
    }


def _finish(cfg, fed, artifacts, ledger, clock, history, final, bundle, status, error, started_ns, network_info):
    report = {
        "status": status,
        "error": error,
        "kernel_backend": kernels.BACKEND,
        "rounds_completed": len(history),
        "rounds": [_round_summary(r) for r in history],
        "client_histograms": {str(k): h for k, h in bundle.histograms.items()},
        "client_samples": {str(c.client_id): int(c.y.size) for c in bundle.clients if c is not None},
        "test_set_size": len(bundle.test_set),
        "skipped_images": bundle.skipped,
        "config": cfg.to_json(),
        "network": network_info,
    }
    if final is not None:
        report["final_params_sha256"] = params_digest(final)
    if history and history[-1].eval_metrics is not None:
        report["final_metrics"] = history[-1].eval_metrics.to_json()
        report["final_eval_loss"] = history[-1].eval_loss
    if status == "completed" and final is not None and bundle.test_set:
        report["latency"] = application_latency(final, fed, bundle.test_set, ledger, clock, cfg.app_samples)
    report["timing"] = {"total_ms": ms(clock.now_ns() - started_ns),
                        "round_wall_ms": [r.wall_time_ms for r in history]}
    artifacts.write_report(report)
    return report


# --- in-process run ---------------------------------------------------------------------

class ClientNode:
    """Edge side of one client in an in-process run."""

    def __init__(self, client_id, data, config, ledger):
        self.client_id = client_id
        self.data = data
        self.config = config
        self.ledger = ledger
        self.received = {}
        self.final = None

    def handle(self, frame):
        msg = decode_message(frame)
        if isinstance(msg, GlobalBroadcast):
            self.received.setdefault(msg.round, msg.params)
            return encode_message(Ack(msg.round, checksum(frame.payload)))
        if isinstance(msg, RoundComplete):
            self.final = msg.params
            return encode_message(Ack(msg.round, checksum(frame.payload)))
        return None

    def train(self, round_index):
        with placement(EDGE, f"client-{self.client_id}"):
            return model_training(self.received[round_index], self.data, self.config,
                                  self.client_id, round_index, self.ledger)


class _Holder:
    state = None


def run_experiment(cfg, clock=None, network=None):
    """Full in-process federation over the simulated network.

    Returns a RunResult; ``exit_code`` is nonzero when a round fails, in
    which case the logs written so far are kept.
    """
    cfg.validate_paths()
    clock = clock or make_clock(cfg)
    started_ns = clock.now_ns()
    fed = cfg.federation()
    artifacts = RunArtifacts(cfg.out, cfg.clients)
    ledger = LatencyLedger(clock, sink=artifacts.services_fh)
    net = network or SimulatedNetwork(cfg.network())
    policy = net.config
    bundle = prepare_data(cfg, ledger)
    history, final, status, error = [], None, "completed", ""
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        with placement(CLOUD):
            _, head = model_creator(fed, ledger)
        state = initialize_global(fed)
        state.global_params = head
        holder = _Holder()
        receiver = UploadReceiver(head.layout, lambda u: holder.state.accept(u, replace=True))
        nodes, server_eps, client_eps = [], [], []
        for k in range(cfg.clients):
            srv, cli = net.connect("server", f"client-{k}")
            node = ClientNode(k, bundle.clients[k], fed, ledger)
            cli.serve(node.handle, (MsgType.GLOBAL_BROADCAST, MsgType.ROUND_COMPLETE))
            srv.serve(receiver.handle, (MsgType.CLIENT_UPDATE,))
            nodes.append(node)
            server_eps.append(srv)
            client_eps.append(cli)

        for r in range(fed.rounds):
            round_started = clock.now_ns()
            work = state.copy()
            work.begin_round()
            holder.state = work
            bframe = encode_message(GlobalBroadcast(r, fed.rounds, work.global_params))
            for k in range(cfg.clients):
                try:
                    send_reliably(server_eps[k], bframe, _ack_for(checksum(bframe.payload)), policy)
                except DeliveryFailed as exc:
                    work.reject(k, f"broadcast: {exc}")
            ready = [k for k in range(cfg.clients) if k in work.pending and r in nodes[k].received]

            def train(k):
                try:
                    return k, nodes[k].train(r)
                except Exception as exc:  # noqa: BLE001 - a failed client is dropped from this round
                    log.warning("client %d failed in round %d: %s", k, r, exc)
                    return k, exc

            results = list(executor.map(train, ready)) if executor else [train(k) for k in ready]
            for k, res in results:
                if isinstance(res, Exception):
                    work.reject(k, res)
                    continue
                try:
                    with placement(CLOUD):
                        model_uploader(res, client_eps[k], policy, ledger)
                except DeliveryFailed as exc:
                    work.reject(k, f"upload: {exc}")
            for k in list(work.pending):
                work.reject(k, "no broadcast received")

            state, record = finish_round(
                work, fed,
                aggregate=lambda ups, r=r: _aggregate(ups, fed, ledger, r),
                evaluate=lambda p, r=r: _evaluate(p, bundle.test_set, fed, ledger, r),
                clock=clock, started_ns=round_started,
            )
            history.append(record)
            artifacts.log_round(record)
        final = state.global_params
        done = encode_message(RoundComplete(fed.rounds - 1, True, final))
        for k in range(cfg.clients):
            try:
                send_reliably(server_eps[k], done, _ack_for(checksum(done.payload)), policy)
            except DeliveryFailed as exc:
                log.warning("client %d missed the final broadcast: %s", k, exc)
    except RoundFailed as exc:
        status, error = "failed", str(exc)
        log.error("%s", exc)
    finally:
        if executor:
            executor.shutdown()
    trace = net.trace()
    network_info = {
        "mode": "in_process",
        "frames": len(trace),
        "dropped": sum(e.dropped for e in trace),
    }
    report = _finish(cfg, fed, artifacts, ledger, clock, history, final, bundle, status, error,
                     started_ns, network_info)
    artifacts.close()
    code = EXIT_OK if status == "completed" else EXIT_ROUND_FAILED
    return RunResult(code, final, history, cfg.out, report, net, error)


def _aggregate(updates, fed, ledger, r):
    with placement(CLOUD):
        return model_aggregator(updates, fed.aggregation_mode, ledger, r)


def _evaluate(params, test_set, fed, ledger, r):
    with placement(EDGE, "evaluator"):
        return model_evaluator(params, test_set, fed, ledger, r)


# --- socket server -------------------------------------------------------------------------

class _Connections:
    """Accept loop plus one reader thread per connection feeding one queue."""

    def __init__(self, sock, max_frame_size):
        self.sock = sock
        self.max_frame_size = max_frame_size
        self.events = queue.Queue()
        self.endpoints = {}
        self._next = 0
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._accept_thread = threading.Thread(target=self._accept, name="fedmesh-accept", daemon=True)
        self._accept_thread.start()

    def _accept(self):
        self.sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                cid = self._next
                self._next += 1
                ep = StreamEndpoint(conn, self.max_frame_size, f"conn-{cid}")
                self.endpoints[cid] = ep
            threading.Thread(target=self._read, args=(cid, ep), name=f"fedmesh-read-{cid}", daemon=True).start()

    def _read(self, cid, ep):
        while True:
            try:
                frame = ep.recv(None)
            except FrameError as exc:
                log.warning("conn %d: bad frame: %s", cid, exc)
                if isinstance(exc, ConnectionError):
                    break
                continue
            except (ConnectionClosed, OSError):
                break
            self.events.put(("frame", cid, frame))
        self.events.put(("closed", cid, None))

    def send(self, cid, frame):
        try:
            self.endpoints[cid].send(frame)
            return True
        except OSError as exc:
            log.warning("conn %d: send failed: %s", cid, exc)
            return False

    def close(self, cid):
        ep = self.endpoints.get(cid)
        if ep is not None:
            ep.close()

    def shutdown(self):
        self._stop.set()
        self._accept_thread.join(timeout=2)
        try:
            self.sock.close()
        except OSError:
            pass
        for ep in list(self.endpoints.values()):
            ep.close()


def serve(cfg, clock=None, on_listening=None):
    """Cloud server over stream sockets; runs the rounds once all clients join."""
    cfg.validate_paths()
    clock = clock or make_clock(cfg)
    started_ns = clock.now_ns()
    fed = cfg.federation()
    host, port = parse_hostport(cfg.listen)
    sock = listen(host, port)
    bound = sock.getsockname()[:2]
    log.info("listening on %s:%d", *bound)
    artifacts = RunArtifacts(cfg.out, cfg.clients)
    ledger = LatencyLedger(clock, sink=artifacts.services_fh)
    # the server keeps only the held-out examples; client training data stays with clients
    bundle = prepare_data(cfg, only_client=-1)
    conns = _Connections(sock, cfg.max_frame_size)
    if on_listening is not None:
        on_listening(*bound)

    history, final, status, error = [], None, "completed", ""
    members, samples = {}, {}
    try:
        deadline = time.monotonic() + cfg.join_timeout
        while len(members) < cfg.clients:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _JoinTimeout(
                    f"only {len(members)} of {cfg.clients} clients joined within {cfg.join_timeout}s "
                    f"(joined: {sorted(members)})"
                )
            try:
                kind, cid, frame = conns.events.get(timeout=remaining)
            except queue.Empty:
                continue
            if kind == "closed":
                for k, c in list(members.items()):
                    if c == cid:
                        del members[k]
                continue
            if frame.msg_type != MsgType.JOIN:
                continue
            msg = decode_message(frame)
            if msg.client_id in members or msg.client_id >= cfg.clients:
                code = ErrorCode.DUPLICATE_CLIENT if msg.client_id in members else ErrorCode.UNKNOWN_CLIENT
                log.warning("rejecting join from client %d: %s", msg.client_id, code.name)
                conns.send(cid, encode_message(ErrorMessage(code, f"client id {msg.client_id} rejected: {code.name}")))
                continue
            members[msg.client_id] = cid
            samples[msg.client_id] = msg.num_samples
            log.info("client %d joined (%d samples)", msg.client_id, msg.num_samples)

        with placement(CLOUD):
            _, head = model_creator(fed, ledger)
        state = initialize_global(fed)
        state.global_params = head
        conn_client = {c: k for k, c in members.items()}
        holder = _Holder()
        receiver = UploadReceiver(head.layout, lambda u: holder.state.accept(u, replace=True))

        for r in range(fed.rounds):
            round_started = clock.now_ns()
            work = state.copy()
            work.begin_round()
            holder.state = work
            bframe = encode_message(GlobalBroadcast(r, fed.rounds, work.global_params))
            for k in range(cfg.clients):
                if not conns.send(members[k], bframe):
                    work.reject(k, "broadcast failed")
            round_deadline = time.monotonic() + cfg.round_timeout
            while not work.ready:
                try:
                    kind, cid, frame = conns.events.get(timeout=max(0.0, round_deadline - time.monotonic()))
                except queue.Empty:
                    for k in list(work.pending):
                        work.reject(k, "round timeout")
                    break
                k = conn_client.get(cid)
                if k is None:
                    continue
                if kind == "closed":
                    work.reject(k, "disconnected")
                elif frame.msg_type == MsgType.CLIENT_UPDATE:
                    _serve_upload(frame, k, r, receiver, conns, cid, ledger)
                elif frame.msg_type == MsgType.ERROR:
                    work.reject(k, decode_message(frame).reason)

            state, record = finish_round(
                work, fed,
                aggregate=lambda ups, r=r: _aggregate(ups, fed, ledger, r),
                evaluate=lambda p, r=r: _evaluate(p, bundle.test_set, fed, ledger, r),
                clock=clock, started_ns=round_started,
            )
            history.append(record)
            artifacts.log_round(record)
        final = state.global_params
        done = encode_message(RoundComplete(fed.rounds - 1, True, final))
        for k in range(cfg.clients):
            conns.send(members[k], done)
        _drain_acks(conns, set(members.values()), timeout=5.0)
        code = EXIT_OK
    except _JoinTimeout as exc:
        status, error, code = "aborted", str(exc), EXIT_JOIN_TIMEOUT
        log.error("%s", exc)
        _abort_clients(conns, members, str(exc))
    except RoundFailed as exc:
        status, error, code = "failed", str(exc), EXIT_ROUND_FAILED
        log.error("%s", exc)
        _abort_clients(conns, members, str(exc))
    finally:
        conns.shutdown()
    network_info = {"mode": "stream_socket", "listen": "%s:%d" % bound, "clients": sorted(members)}
    report = _finish(cfg, fed, artifacts, ledger, clock, history, final, bundle, status, error,
                     started_ns, network_info)
    report["client_samples"] = {str(k): int(n) for k, n in sorted(samples.items())}
    artifacts.write_report(report)
    artifacts.close()
    return RunResult(code, final, history, cfg.out, report, None, error)


class _JoinTimeout(RuntimeError):
    pass


def _serve_upload(frame, k, r, receiver, conns, cid, ledger):
    with placement(CLOUD):
        with ledger.timed("model_uploader", r, k):
            try:
                claimed = decode_message(frame).client_id
            except Exception:  # noqa: BLE001 - the receiver reports the decode error itself
                claimed = k
            if claimed != k:
                reply = encode_message(ErrorMessage(ErrorCode.UNKNOWN_CLIENT,
                                                    f"connection belongs to client {k}, update claims {claimed}"))
            else:
                reply = receiver.handle(frame)
    conns.send(cid, reply)


def _drain_acks(conns, cids, timeout):
    deadline = time.monotonic() + timeout
    waiting = set(cids)
    while waiting and time.monotonic() < deadline:
        try:
            kind, cid, frame = conns.events.get(timeout=max(0.0, deadline - time.monotonic()))
        except queue.Empty:
            break
        if kind == "closed" or frame.msg_type == MsgType.ACK:
            waiting.discard(cid)


def _abort_clients(conns, members, reason):
    for cid in members.values():
        conns.send(cid, encode_message(ErrorMessage(ErrorCode.ABORTED, reason)))


# --- socket client -----------------------------------------------------------------------------

def join(cfg, client_id=None, clock=None):
    """Edge client over stream sockets; returns a process exit code."""
    cfg.validate_paths()
    k = cfg.client_id if client_id is None else int(client_id)
    if not 0 <= k < cfg.clients:
        log.error("client id %d outside [0, %d)", k, cfg.clients)
        return EXIT_CLIENT_ERROR
    clock = clock or make_clock(cfg)
    fed = cfg.federation()
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, f"client_{k}_services.jsonl"), "w") as sink:
        ledger = LatencyLedger(clock, sink=sink)
        data = prepare_data(cfg, ledger, only_client=k).clients[k]
        host, port = parse_hostport(cfg.connect)
        ep = connect(host, port, timeout_s=cfg.join_timeout, max_frame_size=cfg.max_frame_size, name=f"client-{k}")
        # TCP does not lose frames; a short ack timeout would only cause needless resends
        policy = dataclasses.replace(cfg.network(), timeout_ms=max(cfg.timeout_ms, 5000.0))
        try:
            return _client_loop(ep, k, data, fed, ledger, policy, cfg)
        finally:
            ep.close()


def _client_loop(ep, k, data, fed, ledger, policy, cfg):
    ep.send(encode_message(Join(k, int(data.y.size))))
    trained = set()
    while True:
        try:
            frame = ep.recv(cfg.round_timeout * 1000.0)
        except RecvTimeout:
            log.error("client %d: server silent for %ss", k, cfg.round_timeout)
            return EXIT_CLIENT_ERROR
        except (ConnectionClosed, OSError) as exc:
            log.error("client %d: connection lost: %s", k, exc)
            return EXIT_CLIENT_ERROR
        try:
            msg = decode_message(frame)
        except Exception as exc:  # noqa: BLE001 - skip undecodable frames
            log.warning("client %d: undecodable frame: %s", k, exc)
            continue
        if isinstance(msg, GlobalBroadcast):
            ep.send(encode_message(Ack(msg.round, checksum(frame.payload))))
            if msg.round in trained:
                continue
            try:
                with placement(EDGE, f"client-{k}"):
                    update = model_training(msg.params, data, fed, k, msg.round, ledger)
            except ClientRefusal as exc:
                ep.send(encode_message(ErrorMessage(ErrorCode.REFUSED, str(exc))))
                trained.add(msg.round)
                continue
            try:
                upload_update(update, ep, policy)
            except DeliveryFailed as exc:
                log.warning("client %d: upload for round %d failed: %s", k, msg.round, exc)
            trained.add(msg.round)
        elif isinstance(msg, RoundComplete):
            ep.send(encode_message(Ack(msg.round, checksum(frame.payload))))
            if msg.final:
                log.info("client %d: federation complete", k)
                return EXIT_OK
        elif isinstance(msg, ErrorMessage):
            log.error("client %d: server error %d: %s", k, msg.code, msg.reason)
            return EXIT_CLIENT_ERROR
