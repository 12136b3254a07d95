import io
import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmesh.clock import ManualClock, ScriptedClock
from fedmesh.data import Example
from fedmesh.model import ModelDims, ParamVector, head_param_count
from fedmesh.protocol import AggregationError, ClientUpdate, FederationConfig, initialize_global, local_train
from fedmesh.services import (
    CLOUD,
    EDGE,
    INTERPRETATION,
    MIN_MAX,
    PREPROCESSING,
    SERVICES,
    STANDARDIZE,
    IntegrationError,
    LatencyLedger,
    MalformedInput,
    PlacementError,
    RawBatch,
    UploadReceiver,
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
)
from fedmesh.transport import DeliveryFailed, MsgType, NetworkConfig, SimulatedNetwork

DIMS = ModelDims(16, 6, 4)
CFG = FederationConfig(num_clients=2, local_epochs=1, learning_rate=1e-2, batch_size=8, dims=DIMS)


def examples(n, positive_fraction=0.7, seed=0):
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_fraction))
    return [Example(rng.uniform(size=(4, 4)), int(i < n_pos), f"e{i}") for i in range(n)]


def constant_head(label):
    h = initialize_global(CFG).global_params
    b = {k: np.zeros_like(v) for k, v in h.blocks().items()}
    b["b2"] = np.array([1.0, 0.0]) if label == 0 else np.array([0.0, 1.0])
    return ParamVector.from_blocks(b)


# --- descriptors and placement ------------------------------------------------------------

def test_descriptor_placements():
    placed = {name: d.placement for name, d in SERVICES.items()}
    assert placed == {
        "data_integration": EDGE, "data_scaling": EDGE,
        "model_creator": CLOUD, "model_uploader": CLOUD, "model_aggregator": CLOUD,
        "model_training": EDGE, "model_evaluator": EDGE, "application": EDGE,
    }
    assert SERVICES["application"].stage == INTERPRETATION
    assert SERVICES["data_scaling"].stage == PREPROCESSING


def test_cloud_service_refuses_to_run_on_a_client():
    u = ClientUpdate(0, 0, initialize_global(CFG).global_params, 1, 0.1)
    with placement(EDGE, "client-0"):
        with pytest.raises(PlacementError, match="model_aggregator"):
            model_aggregator([u], "uniform")
        with pytest.raises(PlacementError):
            model_creator(CFG)
    with placement(CLOUD):
        with pytest.raises(PlacementError):
            model_training(u.params, examples(10), CFG, 0, 0)


# --- ledger ------------------------------------------------------------------------------

def test_fig3_ledger_arithmetic():
    ledger = LatencyLedger()
    ledger.record_ms("data_integration", 0, 120)
    ledger.record_ms("data_scaling", 120, 78)
    ledger.record_ms("application", 198, 264)
    assert ledger.t_pre_ms == 198
    assert ledger.t_inter_ms == 264
    assert ledger.t_f_ms == 462
    assert ledger.t_f_ns == ledger.t_pre_ns + ledger.t_inter_ns


def test_ledger_rejects_negative_durations():
    with pytest.raises(ValueError):
        LatencyLedger().record("application", 0, -1)


def test_ledger_jsonl_fields():
    sink = io.StringIO()
    ledger = LatencyLedger(ManualClock(), sink=sink)
    with ledger.timed("model_aggregator", round=3):
        pass
    (line,) = sink.getvalue().splitlines()
    obj = json.loads(line)
    assert {"name", "stage", "placement", "duration_ms", "round"} <= set(obj)
    assert obj["name"] == "model_aggregator" and obj["placement"] == CLOUD and obj["round"] == 3


# --- preprocessing ---------------------------------------------------------------------------

def test_single_source_integration_is_identity():
    data = np.random.default_rng(0).uniform(size=(5, 9))
    out = data_integration([RawBatch(data, "s0")])
    assert out.X.tobytes() == data.tobytes()
    assert out.provenance[0] == ("s0", 0)


def test_integration_concatenates_in_source_order():
    a, b = np.zeros((3, 4)), np.ones((4, 4))
    out = data_integration([RawBatch(a, "a"), RawBatch(b, "b")])
    assert len(out) == 7
    assert not out.X[:3].any() and out.X[3:].all()
    assert [p[0] for p in out.provenance] == ["a"] * 3 + ["b"] * 4


def test_integration_mismatch_names_both_dims():
    with pytest.raises(IntegrationError, match=r"s1: 64.*s2: 49"):
        data_integration([RawBatch(np.zeros((1, 64)), "s1"), RawBatch(np.zeros((1, 49)), "s2")])


def test_min_max_examples():
    assert data_scaling(np.array([[0.0], [5.0], [10.0]])).ravel().tolist() == [0.0, 0.5, 1.0]
    assert data_scaling(np.array([[7.0], [7.0], [7.0]])).ravel().tolist() == [0.0, 0.0, 0.0]


def test_standardize_moments():
    X = np.random.default_rng(3).normal(5, 3, size=(200, 6))
    out = data_scaling(X, STANDARDIZE)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-5)


def test_scaling_rejects_non_finite_and_empty():
    with pytest.raises(ValueError):
        data_scaling(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        data_scaling(np.zeros((0, 3)))


# --- model development -----------------------------------------------------------------------

def test_creator_is_seeded():
    _, a = model_creator(CFG)
    _, b = model_creator(CFG)
    assert a == b
    _, c = model_creator(FederationConfig(seed=1, dims=DIMS))
    _, d = model_creator(FederationConfig(seed=2, dims=DIMS))
    assert np.any(c.values != d.values)


def test_creator_parameter_count_at_196_inputs():
    model, head = model_creator(FederationConfig())
    assert model.dims.input_dim == 196
    assert len(head) == head_param_count(32, 16)


def test_training_records_one_edge_entry_per_client_and_round():
    ledger = LatencyLedger(ManualClock())
    g = initialize_global(CFG).global_params
    with placement(EDGE, "client-1"):
        for r in range(2):
            for k in range(2):
                u = model_training(g, examples(20, seed=k), CFG, k, r, ledger)
                assert u == local_train(g, examples(20, seed=k), CFG, k, r)
    entries = ledger.entries
    assert [(e.round, e.client_id) for e in entries] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert all(e.placement == EDGE and e.duration_ns > 0 for e in entries)


def test_aggregator_ledger_bookkeeping():
    ledger = LatencyLedger(ManualClock())
    g = initialize_global(CFG).global_params
    ups = [ClientUpdate(k, 0, g, 10 + k, 0.5) for k in range(5)]
    with pytest.raises(AggregationError):
        model_aggregator([], "sample_weighted", ledger, 0)
    assert ledger.entries == []
    for r in range(3):
        model_aggregator(ups, "sample_weighted", ledger, r)
    assert [e.round for e in ledger.entries] == [0, 1, 2]
    assert all(e.name == "model_aggregator" and e.placement == CLOUD for e in ledger.entries)


def test_evaluator_majority_class_on_30_70():
    ev = model_evaluator(constant_head(1), examples(100), CFG)
    m = ev.metrics
    assert (m.accuracy, m.recall, m.precision) == pytest.approx((0.70, 1.0, 0.70))


def test_evaluator_perfect_separation():
    positives = examples(20, positive_fraction=1.0)
    m = model_evaluator(constant_head(1), positives, CFG).metrics
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_evaluator_matches_recount_and_rejects_empty():
    ex = examples(40, seed=4)
    head = initialize_global(CFG).global_params
    ev = model_evaluator(head, ex, CFG)
    labels = [e.label for e in ex]
    correct = sum(int(p) == t for p, t in zip(ev.predictions, labels))
    assert ev.metrics.accuracy == correct / len(ex)
    with pytest.raises(ValueError):
        model_evaluator(head, [], CFG)


# --- uploader ------------------------------------------------------------------------------------

def upload_setup(**net_kwargs):
    net = SimulatedNetwork(NetworkConfig(**net_kwargs))
    server, client = net.connect("server", "client-0")
    got = []
    layout = initialize_global(CFG).global_params.layout
    server.serve(UploadReceiver(layout, got.append).handle, (MsgType.CLIENT_UPDATE,))
    update = local_train(initialize_global(CFG).global_params, examples(20), CFG, 0, 0)
    return net, client, got, update


def test_loopback_upload_is_bit_identical():
    net, client, got, update = upload_setup()
    with placement(CLOUD):
        receipt = model_uploader(update, client, net.config)
    assert got == [update]
    assert receipt.attempts == 1 and receipt.byte_count == len(net.captured[0])


def test_checksum_mismatch_is_rejected_and_retried_once(caplog):
    net, client, got, update = upload_setup()
    net.corrupt_next("client-0", "server")
    with caplog.at_level(logging.INFO):
        receipt = model_uploader(update, client, net.config)
    retries = [r for r in caplog.records if "retrying CLIENT_UPDATE" in r.getMessage()]
    assert receipt.attempts == 2 and len(retries) == 1
    assert "checksum mismatch" in retries[0].getMessage()
    assert got[-1] == update


def test_sequential_uploads_have_increasing_receipts():
    net, client, got, update = upload_setup()
    seqs = [model_uploader(update, client, net.config).seq for _ in range(3)]
    assert seqs == sorted(set(seqs)) and len(seqs) == 3


def test_dead_link_surfaces_delivery_failure():
    net = SimulatedNetwork(NetworkConfig(retries=3))
    _, client = net.connect("server", "client-0")
    update = local_train(initialize_global(CFG).global_params, examples(20), CFG, 0, 0)
    with pytest.raises(DeliveryFailed):
        model_uploader(update, client, net.config)


# --- application -------------------------------------------------------------------------------

def test_zero_head_tie_goes_to_normal_and_is_flagged():
    h = initialize_global(CFG).global_params
    zero = ParamVector(np.zeros(len(h)), h.layout)
    run = application(zero, np.full((9, 9), 0.3), CFG, clock=ManualClock())
    label, prob, ledger = run
    assert label == 0 and prob == 0.5 and run.verdict.tie


def test_malformed_input_fails_before_model_execution():
    h = initialize_global(CFG).global_params
    for bad in (np.zeros((0, 0)), np.full((4, 4), np.nan), np.zeros(5), "text"):
        with pytest.raises(MalformedInput):
            application(h, bad, CFG)


def test_pipeline_is_deterministic_and_ordered():
    h = initialize_global(CFG).global_params
    img = np.random.default_rng(1).integers(0, 256, size=(11, 7))
    a = application(h, img, CFG, maxval=255, clock=ManualClock())
    b = application(h, img, CFG, maxval=255, clock=ManualClock())
    assert a.verdict == b.verdict
    assert a.ledger.entries == b.ledger.entries
    names = [e.name for e in a.ledger.entries]
    assert names == ["data_integration", "data_scaling", "application"]
    pre_end = max(e.start_ns + e.duration_ns for e in a.ledger.entries if e.stage == PREPROCESSING)
    inter_start = min(e.start_ns for e in a.ledger.entries if e.stage == INTERPRETATION)
    assert pre_end <= inter_start


@given(st.lists(st.integers(0, 10 ** 9), min_size=6, max_size=6).map(sorted))
def test_t_f_is_exactly_the_stage_sum(times):
    h = initialize_global(CFG).global_params
    run = application(h, np.ones((4, 4)), CFG, clock=ScriptedClock(times))
    led = run.ledger
    assert led.t_f_ns == led.t_pre_ns + led.t_inter_ns
    assert led.t_f_ns == sum(e.duration_ns for e in led.entries)
    assert led.t_f_ms == led.t_f_ns / 1e6


def test_latency_summary():
    s = latency_summary([1.0, 2.0, 3.0, 4.0])
    assert s["count"] == 4 and s["mean"] == 2.5 and s["min"] == 1.0 and s["max"] == 4.0
    assert latency_summary([]) == {"count": 0}
