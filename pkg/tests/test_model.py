import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradcheck
from fedmesh.model import (
    AdamState,
    DecodeError,
    FrozenBaseModel,
    LayoutError,
    ModelDims,
    NonFiniteError,
    ParamVector,
    ShapeError,
    adam_step,
    deserialize_params,
    forward,
    gradient,
    head_param_count,
    init_head,
    loss,
    loss_and_gradient,
    make_base,
    serialize_params,
)
from oracles import forward_loops

SMALL = ModelDims(8, 4, 3)


def zero_head(dims):
    h = init_head(dims, 0)
    return ParamVector(np.zeros(len(h)), h.layout)


# --- ParamVector -------------------------------------------------------------

def test_param_vector_element_count_must_match_layout():
    with pytest.raises(LayoutError):
        ParamVector([1.0, 2.0], [("a", (3,))])


def test_param_vector_blocks_are_views_in_layout_order():
    p = ParamVector(np.arange(7), [("a", (2, 2)), ("b", (3,))])
    blocks = p.blocks()
    assert list(blocks) == ["a", "b"]
    assert blocks["a"].tolist() == [[0, 1], [2, 3]]
    assert blocks["b"].tolist() == [4, 5, 6]


def test_param_vector_equality_is_bit_exact():
    a = ParamVector([0.0], [("x", (1,))])
    b = ParamVector([-0.0], [("x", (1,))])
    assert a != b
    assert a == a.copy()


def test_head_layout_count_matches_closed_form():
    dims = ModelDims(196, 32, 16)
    assert len(init_head(dims, 1)) == head_param_count(32, 16) == 32 * 16 + 16 + 16 * 2 + 2


# --- construction -------------------------------------------------------------

def test_base_is_identical_for_same_seed_and_read_only():
    a, b = make_base(SMALL, 5), make_base(SMALL, 5)
    assert a.tobytes() == b.tobytes()
    assert not a.flags.writeable
    bound = 1 / math.sqrt(SMALL.input_dim)
    assert np.all(np.abs(a) <= bound)


def test_head_init_range_and_zero_biases():
    h = init_head(ModelDims(), 3).blocks()
    assert np.all(np.abs(h["w1"]) <= 0.1) and np.all(np.abs(h["w2"]) <= 0.1)
    assert not h["b1"].any() and not h["b2"].any()


def test_frozen_base_survives_training_steps():
    model = FrozenBaseModel.create(SMALL, 2)
    before = model.base_weights.tobytes()
    rng = np.random.default_rng(0)
    batch, labels = rng.uniform(size=(6, 8)), rng.integers(0, 2, 6)
    params, state = model.head, AdamState.fresh(model.head)
    for _ in range(5):
        params, state = adam_step(params, gradient(model.with_head(params), batch, labels), state, 0.01)
    assert model.base_weights.tobytes() == before
    with pytest.raises(ValueError):
        model.base_weights[0, 0] = 1.0


# --- forward ------------------------------------------------------------------

def test_zero_head_gives_uniform_probabilities():
    model = FrozenBaseModel.create(SMALL, 1).with_head(zero_head(SMALL))
    probs = forward(model, np.random.default_rng(0).uniform(size=(5, 8)))
    assert np.all(probs == 0.5)


def test_zero_input_hidden_comes_from_biases_only():
    model = FrozenBaseModel.create(SMALL, 1)
    blocks = dict(model.head.blocks())
    blocks["b1"] = np.array([0.3, -0.2, 0.1])
    blocks["b2"] = np.array([0.05, -0.05])
    model = model.with_head(ParamVector.from_blocks(blocks))
    hidden = np.maximum(blocks["b1"], 0)
    logits = hidden @ blocks["w2"].astype(np.float64) + blocks["b2"]
    expected = np.exp(logits) / np.exp(logits).sum()
    got = forward(model, np.zeros((1, 8)))[0]
    assert np.allclose(got, expected, rtol=0, atol=1e-7)


def test_forward_matches_scalar_loop_recomputation():
    # seed 42, input_dim 8, one fixed batch
    model = FrozenBaseModel.create(ModelDims(8, 4, 3), 42)
    batch = np.random.default_rng(42).uniform(size=(3, 8))
    h = {k: v.astype(np.float64).tolist() for k, v in model.head.blocks().items()}
    base = model.base_weights
    got = forward(model, batch)
    for row, probs in zip(batch.tolist(), got):
        assert probs.tolist() == pytest.approx(forward_loops(row, base, h["w1"], h["b1"], h["w2"], h["b2"]),
                                               rel=0, abs=1e-12)


def test_forward_rejects_wrong_width_naming_both_dims():
    model = FrozenBaseModel.create(SMALL, 1)
    with pytest.raises(ShapeError, match=r"7 columns.*input_dim=8"):
        forward(model, np.zeros((2, 7)))


@given(hnp.arrays(np.float64, (4, 8), elements=st.floats(-1e3, 1e3)), st.integers(0, 2 ** 31))
def test_softmax_rows_sum_to_one(batch, seed):
    model = FrozenBaseModel.create(SMALL, seed)
    probs = forward(model, batch)
    assert np.all((probs >= 0) & (probs <= 1))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


# --- loss ----------------------------------------------------------------------

def test_loss_perfect_prediction_is_zero():
    assert loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == pytest.approx(0.0, abs=1e-9)


def test_loss_uniform_is_ln2():
    assert loss(np.full((4, 2), 0.5), [0, 1, 1, 0]) == pytest.approx(math.log(2), abs=1e-6)


def test_loss_three_example_hand_value():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    expected = (-math.log(0.9) - math.log(0.8) - math.log(0.6)) / 3
    assert loss(probs, [0, 1, 0]) == pytest.approx(expected, rel=1e-12)


def test_loss_clamps_zero_probability():
    assert loss(np.array([[0.0, 1.0]]), [0]) == pytest.approx(-math.log(1e-12))


def test_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        loss(np.zeros((0, 2)), [])


@given(st.integers(1, 12), st.integers(0, 10 ** 6))
def test_loss_is_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, n)
    probs = np.stack([p, 1 - p], axis=1)
    labels = rng.integers(0, 2, n)
    perm = rng.permutation(n)
    assert loss(probs[perm], labels[perm]) == pytest.approx(loss(probs, labels), rel=1e-12)


# --- gradient -------------------------------------------------------------------

def test_zero_input_gives_zero_first_layer_weight_gradient():
    model = FrozenBaseModel.create(SMALL, 3)
    g = gradient(model, np.zeros((4, 8)), [1, 1, 1, 0]).blocks()
    assert not g["w1"].any()
    assert g["b2"].any()


def test_gradient_layout_matches_head():
    model = FrozenBaseModel.create(SMALL, 3)
    g = gradient(model, np.ones((2, 8)), [0, 1])
    assert g.layout == model.head.layout


def test_duplicated_batch_gives_same_gradient():
    model = FrozenBaseModel.create(SMALL, 4)
    rng = np.random.default_rng(4)
    batch, labels = rng.uniform(size=(5, 8)), rng.integers(0, 2, 5)
    g1 = gradient(model, batch, labels).values
    g2 = gradient(model, np.repeat(batch, 2, axis=0), np.repeat(labels, 2)).values
    # same mean, summed in a different order: equal up to float64 rounding
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_gradient_matches_finite_differences_on_seeded_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        model, batch, labels = gradcheck.sample_pair(rng)
        err, _ = gradcheck.max_relative_error(model, batch, labels)
        assert err < gradcheck.TOLERANCE


def test_non_finite_gradient_names_the_block():
    model = FrozenBaseModel.create(SMALL, 1)
    bad = model.head.values.copy()
    bad[SMALL.feature_dim * SMALL.hidden_dim] = np.inf  # first hidden bias
    model = model.with_head(ParamVector(bad, model.head.layout))
    with pytest.raises(NonFiniteError, match="block 'w1'"):
        loss_and_gradient(model, np.ones((2, 8)), [0, 1])


def test_gradient_rejects_empty_batch():
    model = FrozenBaseModel.create(SMALL, 1)
    with pytest.raises(ValueError):
        gradient(model, np.zeros((0, 8)), [])


# --- Adam ------------------------------------------------------------------------

def scalar(v):
    return ParamVector([v], [("p", (1,))])


def test_adam_zero_gradient_leaves_params_unchanged():
    p = ParamVector(np.linspace(-1, 1, 5), [("p", (5,))])
    grad = ParamVector(np.zeros(5), p.layout, dtype=np.float64)
    new, state = adam_step(p, grad, AdamState.fresh(p), 0.1)
    assert new == p
    assert state.step_count == 1


def test_adam_first_step_magnitude_is_lr():
    grad = ParamVector([1.0], [("p", (1,))], dtype=np.float64)
    new, _ = adam_step(scalar(0.0), grad, AdamState.fresh(scalar(0.0)), 0.1)
    # m_hat = 1, v_hat = 1, step = 0.1 / (1 + 1e-8)
    assert float(new.values[0]) == pytest.approx(-0.1, rel=1e-6)


def test_adam_two_steps_moments_match_hand_ema():
    g = 0.5
    grad = ParamVector([g], [("p", (1,))], dtype=np.float64)
    p, state = scalar(1.0), AdamState.fresh(scalar(1.0))
    p, state = adam_step(p, grad, state, 0.01)
    p, state = adam_step(p, grad, state, 0.01)
    m1, v1 = 0.1 * g, 0.001 * g * g
    m2, v2 = 0.9 * m1 + 0.1 * g, 0.999 * v1 + 0.001 * g * g
    assert state.first_moment[0] == pytest.approx(m2, rel=1e-15)
    assert state.second_moment[0] == pytest.approx(v2, rel=1e-15)
    assert state.step_count == 2


def test_adam_is_pure():
    rng = np.random.default_rng(9)
    p = ParamVector(rng.normal(size=6), [("p", (6,))])
    grad = ParamVector(rng.normal(size=6), p.layout, dtype=np.float64)
    state = AdamState.fresh(p)
    a = adam_step(p, grad, state, 0.01)
    b = adam_step(p, grad, state, 0.01)
    assert a[0] == b[0]
    assert a[1].first_moment.tobytes() == b[1].first_moment.tobytes()
    assert state.step_count == 0 and not state.first_moment.any()


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.integers(1, 5))
def test_adam_state_invariants(values, steps):
    p = ParamVector(values, [("p", (len(values),))])
    state = AdamState.fresh(p)
    for t in range(steps):
        grad = ParamVector(np.asarray(values) * (t + 1), p.layout, dtype=np.float64)
        p, state = adam_step(p, grad, state, 1e-3)
        assert state.step_count == t + 1
        assert np.all(state.second_moment >= 0)
        assert p.is_finite()


def test_adam_rejects_layout_mismatch():
    grad = ParamVector([1.0, 2.0], [("q", (2,))], dtype=np.float64)
    with pytest.raises(LayoutError):
        adam_step(scalar(0.0), grad, AdamState.fresh(scalar(0.0)), 0.1)


# --- serialization ------------------------------------------------------------------

def test_empty_layout_round_trips_header_only():
    empty = ParamVector([], [])
    data = serialize_params(empty)
    assert data == b"\x00\x00\x00\x00" + b"\x00\x00\x00\x00"
    assert deserialize_params(data) == empty


def test_small_values_round_trip():
    p = ParamVector([1.0, -2.5, 0.0], [("v", (3,))])
    assert deserialize_params(serialize_params(p)) == p


def test_ten_thousand_random_values_round_trip_seed_7():
    values = np.random.default_rng(7).normal(scale=100, size=10_000).astype(np.float32)
    p = ParamVector(values, [("a", (100, 50)), ("b", (5000,))])
    assert deserialize_params(serialize_params(p)) == p


def test_truncated_and_over_long_inputs_report_lengths():
    data = serialize_params(init_head(SMALL, 1))
    with pytest.raises(DecodeError, match=rf"expected {len(data)} bytes, have {len(data) - 1}"):
        deserialize_params(data[:-1])
    with pytest.raises(DecodeError, match=rf"expected {len(data)} bytes, got {len(data) + 2}"):
        deserialize_params(data + b"\x00\x00")


@given(st.lists(st.floats(width=32, allow_nan=False), max_size=64))
def test_serialization_round_trip_property(values):
    p = ParamVector(values, [("v", (len(values),))])
    assert deserialize_params(serialize_params(p)) == p
