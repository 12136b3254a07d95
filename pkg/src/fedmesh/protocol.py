"""Server and client sides of the federated procedure.

One communication round: broadcast the global head, train it locally on
every client for ``local_epochs`` epochs of mini-batch Adam, then replace
the global head by the (sample-weighted) average of the returned heads.
"""
from __future__ import annotations

import dataclasses
import functools
import logging
from dataclasses import dataclass, field

import numpy as np

from fedmesh import kernels
from fedmesh.clock import WallClock, ms
from fedmesh.data import as_arrays
from fedmesh.metrics import confusion, report
from fedmesh.model import (
    FrozenBaseModel,
    LayoutError,
    ModelDims,
    NonFiniteError,
    ParamVector,
    init_head,
    make_base,
)

log = logging.getLogger(__name__)

SAMPLE_WEIGHTED = "sample_weighted"
UNIFORM = "uniform"
AGGREGATION_MODES = (SAMPLE_WEIGHTED, UNIFORM)


class ConfigError(ValueError):
    pass


class ClientRefusal(RuntimeError):
    """A client declines to produce an update (e.g. it holds no data)."""


class AggregationError(RuntimeError):
    pass


class RoundFailed(RuntimeError):
    def __init__(self, round_index, message):
        super().__init__(f"round {round_index} failed: {message}")
        self.round_index = round_index


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 5
    rounds: int = 15
    local_epochs: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 32
    aggregation_mode: str = SAMPLE_WEIGHTED
    seed: int = 42
    dims: ModelDims = field(default_factory=ModelDims)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("num_clients", "rounds", "local_epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ConfigError(f"aggregation_mode must be one of {AGGREGATION_MODES}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    params: ParamVector
    num_samples: int
    local_loss: float

    def __eq__(self, other):
        if not isinstance(other, ClientUpdate):
            return NotImplemented
        return (
            (self.client_id, self.round, self.num_samples) == (other.client_id, other.round, other.num_samples)
            and np.float32(self.local_loss).tobytes() == np.float32(other.local_loss).tobytes()
            and self.params == other.params
        )


@dataclass(frozen=True)
class RoundRecord:
    round: int
    client_losses: dict
    aggregate_train_loss: float
    eval_metrics: object = None
    eval_loss: float = float("nan")
    wall_time_ms: float = 0.0
    num_samples: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    @property
    def participants(self):
        return sorted(self.num_samples)


@dataclass
class ServerState:
    """Single-owner server state; aggregation waits for every pending client."""

    global_params: ParamVector
    current_round: int = 0
    pending: frozenset = frozenset()
    history: tuple = ()
    num_clients: int = 1
    received: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def copy(self):
        return dataclasses.replace(self, received=dict(self.received), failures=dict(self.failures))

    def begin_round(self):
        self.pending = frozenset(range(self.num_clients))
        self.received = {}
        self.failures = {}

    def accept(self, update, replace=False):
        """Record an update; returns False for an ignored duplicate.

        With ``replace`` a resend overwrites the earlier copy (the sender
        only resends when it could not confirm the first one arrived intact).
        """
        if update.round != self.current_round:
            raise AggregationError(
                f"update from client {update.client_id} is for round {update.round}, server is at {self.current_round}"
            )
        if not update.params.same_layout(self.global_params):
            raise LayoutError(f"client {update.client_id} sent a mismatched layout")
        if update.client_id in self.received:
            if replace:
                self.received[update.client_id] = update
            return replace
        if update.client_id not in self.pending:
            raise AggregationError(f"client {update.client_id} is not expected this round")
        self.received[update.client_id] = update
        self.pending = self.pending - {update.client_id}
        return True

    def reject(self, client_id, reason):
        if client_id in self.pending:
            self.failures[client_id] = str(reason)
            self.pending = self.pending - {client_id}

    @property
    def ready(self):
        return not self.pending

    def updates(self):
        return [self.received[k] for k in sorted(self.received)]


def client_rng(seed, client_id, round_index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(client_id), int(round_index)]))


@functools.lru_cache(maxsize=16)
def _cached_base(dims, seed):
    return make_base(dims, seed)


def build_model(config, head=None):
    base = _cached_base(config.dims, int(config.seed))
    return FrozenBaseModel(config.dims, base, head if head is not None else init_head(config.dims, config.seed), int(config.seed))


def initialize_global(config):
    return ServerState(
        global_params=init_head(config.dims, config.seed),
        current_round=0,
        pending=frozenset(range(config.num_clients)),
        num_clients=config.num_clients,
    )


def _train_arrays(data):
    if hasattr(data, "train_arrays"):
        return data.train_arrays()
    return as_arrays(list(data))


def local_train(global_params, data, config, client_id=None, round_index=0):
    """Fine-tune the head on one client's data; returns a ClientUpdate.

    Adam state starts fresh every round. ``local_loss`` is the mean training
    loss of the final epoch, rounded to float32 as it travels on the wire.
    """
    if client_id is None:
        client_id = getattr(data, "client_id", 0)
    X, y = _train_arrays(data)
    if y.size == 0:
        raise ClientRefusal(f"client {client_id} has no training data")
    model = build_model(config, global_params)
    feats = model.features(X)
    n = y.size
    rng = client_rng(config.seed, client_id, round_index)
    orders = np.stack([rng.permutation(n) for _ in range(config.local_epochs)])

    flat = global_params.values.astype(np.float64)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    _, losses = kernels.train_epochs(
        feats, y, orders, int(config.batch_size), flat, m, v, 0,
        float(config.learning_rate), config.beta1, config.beta2, config.epsilon,
        config.dims.feature_dim, config.dims.hidden_dim,
    )
    params = ParamVector(flat, global_params.layout)
    for name, block in params.blocks().items():
        if not np.all(np.isfinite(block)):
            raise NonFiniteError(name, "parameter")
    return ClientUpdate(int(client_id), int(round_index), params, int(n), float(np.float32(losses[-1])))


def federated_average(updates, mode=SAMPLE_WEIGHTED):
    """Element-wise mean of client heads, weighted by sample count or uniform."""
    updates = list(updates)
    if not updates:
        raise AggregationError("no client updates to aggregate")
    if mode not in AGGREGATION_MODES:
        raise AggregationError(f"unknown aggregation mode {mode!r}")
    layout = updates[0].params.layout
    for u in updates:
        if u.params.layout != layout:
            raise AggregationError(f"client {u.client_id} layout differs from client {updates[0].client_id}")
        if u.num_samples < 1:
            raise AggregationError(f"client {u.client_id} reports {u.num_samples} samples")
    stack = np.stack([u.params.values.astype(np.float64) for u in updates])
    if mode == SAMPLE_WEIGHTED:
        weights = np.array([u.num_samples for u in updates], dtype=np.float64)
    else:
        weights = np.ones(len(updates))
    # weighted sum first, one division last: identical inputs come back exactly
    total = (weights[:, None] * stack).sum(axis=0)
    result = total / weights.sum()
    if not np.all(np.isfinite(result)):
        raise AggregationError("aggregate is not finite")
    return ParamVector(result, layout)


def aggregate_loss(updates, mode=SAMPLE_WEIGHTED):
    weights = [u.num_samples if mode == SAMPLE_WEIGHTED else 1 for u in updates]
    return float(sum(w * u.local_loss for w, u in zip(weights, updates)) / sum(weights))


@dataclass(frozen=True)
class Evaluation:
    metrics: object
    loss: float
    confusion: object
    predictions: np.ndarray


def predict_labels(probs):
    # ties go to the negative class
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def evaluate_params(params, examples, config):
    X, y = as_arrays(list(examples))
    if y.size == 0:
        raise ValueError("evaluation needs a non-empty test set")
    model = build_model(config, params)
    feats = model.features(X)
    probs = kernels.forward(feats, params.values.astype(np.float64), config.dims.feature_dim, config.dims.hidden_dim)
    preds = predict_labels(probs)
    p_true = probs[np.arange(y.size), y]
    loss = float(np.mean(-np.log(np.maximum(p_true, 1e-12))))
    cm = confusion(preds, y)
    return Evaluation(report(cm), loss, cm, preds)


def finish_round(state, config, aggregate=None, evaluate=None, clock=None, started_ns=None):
    """Aggregate the collected updates and advance the round.

    Returns ``(new_state, record)``; raises RoundFailed (leaving ``state``
    untouched) when nothing usable was collected.
    """
    clock = clock or WallClock()
    if not state.ready:
        raise RoundFailed(state.current_round, f"clients {sorted(state.pending)} have not reported")
    updates = state.updates()
    if not updates:
        raise RoundFailed(state.current_round, f"every client failed: {state.failures}")
    aggregate = aggregate or (lambda ups: federated_average(ups, config.aggregation_mode))
    try:
        new_global = aggregate(updates)
    except AggregationError as exc:
        raise RoundFailed(state.current_round, str(exc)) from exc

    metrics, eval_loss = None, float("nan")
    if evaluate is not None:
        ev = evaluate(new_global)
        metrics, eval_loss = ev.metrics, ev.loss
    end = clock.now_ns()
    record = RoundRecord(
        round=state.current_round,
        client_losses={k: (state.received[k].local_loss if k in state.received else None)
                       for k in range(state.num_clients)},
        aggregate_train_loss=aggregate_loss(updates, config.aggregation_mode),
        eval_metrics=metrics,
        eval_loss=eval_loss,
        wall_time_ms=ms(end - started_ns) if started_ns is not None else 0.0,
        num_samples={u.client_id: u.num_samples for u in updates},
        failures=dict(state.failures),
    )
    new_state = ServerState(
        global_params=new_global,
        current_round=state.current_round + 1,
        pending=frozenset(range(state.num_clients)),
        history=state.history + (record,),
        num_clients=state.num_clients,
    )
    return new_state, record


def run_round(state, clients, config, test_set=None, clock=None, executor=None, trainer=None):
    """Broadcast, train every client, average. ``state`` is not modified.

    A client that raises is dropped from this round's average; if none
    succeed the round fails.
    """
    clock = clock or WallClock()
    if state.current_round >= config.rounds:
        raise RoundFailed(state.current_round, f"federation already ran {config.rounds} rounds")
    if len(clients) != state.num_clients:
        raise ConfigError(f"{len(clients)} client datasets for {state.num_clients} clients")
    trainer = trainer or local_train
    started = clock.now_ns()
    work = state.copy()
    work.begin_round()
    r = work.current_round
    broadcast = work.global_params

    def one(k):
        try:
            return k, trainer(broadcast, clients[k], config, k, r)
        except Exception as exc:  # noqa: BLE001 - any client fault drops that client
            log.warning("client %d failed in round %d: %s", k, r, exc)
            return k, exc

    results = list(executor.map(one, range(len(clients)))) if executor else [one(k) for k in range(len(clients))]
    for k, res in results:
        if isinstance(res, Exception):
            work.reject(k, res)
        else:
            work.accept(res)
    evaluate = (lambda p: evaluate_params(p, test_set, config)) if test_set else None
    return finish_round(work, config, evaluate=evaluate, clock=clock, started_ns=started)


def run_federation(config, clients, test_set=None, clock=None, executor=None):
    """Run all rounds; returns ``(final_params, history)``."""
    if len(clients) != config.num_clients:
        raise ConfigError(f"expected {config.num_clients} client datasets, got {len(clients)}")
    state = initialize_global(config)
    for _ in range(config.rounds):
        state, record = run_round(state, clients, config, test_set=test_set, clock=clock, executor=executor)
        if record.eval_metrics is not None:
            log.info("round %d: loss %.4f acc %.4f", record.round, record.aggregate_train_loss,
                     record.eval_metrics.accuracy)
    return state.global_params, list(state.history)
