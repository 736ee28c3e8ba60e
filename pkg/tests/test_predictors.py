import math

import numpy as np
import pytest

from backend.app.engine.core import EngineError, VehicleState, arrival_times_from_positions
from backend.app.engine.hdv_sim import generate_traces
from backend.app.engine.predictors import (
    HiddenState,
    Minibatch,
    NetParams,
    NonFiniteObservationError,
    ObservationScale,
    OraclePredictor,
    PhysicsPredictor,
    RecurrentPredictor,
    TrainingHyper,
    TrajectoryBatch,
    check_gradients,
    collect_trajectories,
    decode_arrivals,
    encode_observation,
    finite_difference_error,
    loss_and_grad,
    parameter_count,
    pending_mask,
    physics_predict,
    prepare_minibatch,
    step_hidden,
    train,
)
from backend.app.engine.predictors.recurrent import HIDDEN_SIZE, forward_sequence, masked_loss

RAW = np.array([140.0, 24.0, 100.0, 20.0, 70.0, 22.0, 95.0, 18.0])


# ---------------------------------------------------------------------------
# Observation encoding
# ---------------------------------------------------------------------------

def test_relative_encoding_zeroes_self_position():
    encoded = encode_observation(RAW, ObservationScale(anchor=None))
    assert encoded[2] == 0.0
    assert encoded[0] == pytest.approx(0.4)
    assert encoded[4] == pytest.approx(-0.3)
    assert encoded[6] == pytest.approx(-0.05)
    assert encoded[3] == pytest.approx(20.0 / 35.0)


def test_anchored_encoding_keeps_location(zone):
    scale = ObservationScale.for_zone(zone)
    encoded = encode_observation(RAW, scale)
    assert encoded[2] == pytest.approx((100.0 - 60.0) / 100.0)


def test_vehicle_states_encode_like_arrays():
    states = [VehicleState(140.0, 24.0), VehicleState(100.0, 20.0), VehicleState(70.0, 22.0), VehicleState(95.0, 18.0)]
    scale = ObservationScale()
    np.testing.assert_array_equal(encode_observation(states, scale), encode_observation(RAW, scale))


def test_non_finite_observation_rejected():
    raw = RAW.copy()
    raw[5] = np.nan
    with pytest.raises(NonFiniteObservationError):
        encode_observation(raw, ObservationScale())


# ---------------------------------------------------------------------------
# Physics baseline and passage memory
# ---------------------------------------------------------------------------

def test_physics_constant_speed(zone):
    mu = physics_predict(VehicleState(50.0, 10.0), zone, now=2.0)
    np.testing.assert_allclose(mu, [3.0, 4.0, 5.0, 6.0])


def test_physics_behind_vehicle_is_now(zone):
    mu = physics_predict(VehicleState(75.0, 10.0), zone, now=1.0)
    assert mu[0] == 1.0 and mu[1] == 1.0
    assert mu[2] == pytest.approx(1.5)


def test_passage_memory_records_crossing(zone):
    predictor = PhysicsPredictor(zone)
    state = predictor.begin(1)
    before = RAW.copy()
    before[2] = 55.0
    after = RAW.copy()
    after[2] = 65.0
    state = predictor.step(state, before[None], 0.0)
    assert not state.passed.any()
    state = predictor.step(state, after[None], zone.dt)
    assert state.passed[0, 0] and not state.passed[0, 1]
    mu = predictor.predict(state, zone.dt)
    assert mu[0, 0] == pytest.approx(0.5 * zone.dt)
    assert mu[0, 1] > zone.dt


def test_candidate_behind_first_observation_keeps_that_time(zone):
    predictor = PhysicsPredictor(zone)
    first = RAW.copy()
    first[2] = 75.0
    later = RAW.copy()
    later[2] = 79.0
    state = predictor.step(predictor.begin(1), first[None], 1.0)
    assert state.passed[0].tolist() == [True, True, False, False]
    state = predictor.step(state, later[None], 1.0 + zone.dt)
    mu = predictor.predict(state, 1.0 + zone.dt)
    assert mu[0, 0] == 1.0 and mu[0, 1] == 1.0
    assert mu[0, 2] > 1.0 + zone.dt


def test_predict_before_observation_fails(zone):
    predictor = PhysicsPredictor(zone)
    with pytest.raises(EngineError):
        predictor.predict(predictor.begin(1), 0.0)


def test_oracle_predictor_replays_arrivals(traces, zone):
    batch = collect_trajectories(traces[:5], per_scenario="one")
    oracle = OraclePredictor(zone, batch.arrivals)
    mu, passed = oracle.predict_series(batch.observations)
    pending = pending_mask(batch, zone)
    np.testing.assert_array_equal(mu[pending], np.broadcast_to(batch.arrivals[:, None, :], mu.shape)[pending])
    # crossings recovered from observations are the ground-truth arrivals
    done = passed[:, -1] & np.isfinite(batch.arrivals)
    assert done.any()
    np.testing.assert_allclose(mu[:, -1][done], batch.arrivals[done], rtol=1e-12)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def test_collect_one_per_scenario(traces):
    batch = collect_trajectories(traces, per_scenario="one")
    assert len(batch) == len(traces)
    assert len(set(batch.scenario_ids.tolist())) == len(traces)
    for sid, vid in zip(batch.scenario_ids, batch.vehicle_ids):
        assert vid == np.random.default_rng(int(sid)).integers(2)


def test_collect_all(traces):
    batch = collect_trajectories(traces, per_scenario="all")
    assert len(batch) == 2 * len(traces)
    assert batch.observations.shape[1:] == (traces[0].num_steps, 8)


def test_pending_mask_turns_off_after_passage(traces, zone):
    batch = collect_trajectories(traces, per_scenario="all")
    mask = pending_mask(batch, zone)
    positions = batch.observations[:, :, 2]
    assert not np.any(mask & (positions[:, :, None] >= zone.highway_targets[None, None, :]))
    # once off, a cell stays off
    assert not np.any(mask[:, 1:] & ~mask[:, :-1])


# ---------------------------------------------------------------------------
# Recurrent network
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("num_candidates", [1, 4, 10])
def test_parameter_count(num_candidates):
    assert parameter_count(num_candidates) == 468 + 65 * num_candidates
    assert NetParams.initialize(num_candidates).size == parameter_count(num_candidates)


def test_vector_roundtrip():
    params = NetParams.initialize(4, seed=3)
    again = NetParams.from_vector(params.to_vector(), 4)
    np.testing.assert_array_equal(again.to_vector(), params.to_vector())


def test_bad_shapes_rejected():
    params = NetParams.zeros(3)
    with pytest.raises(EngineError):
        NetParams(**{**params.__dict__, "enc_w1": np.zeros((3, 3))})


def test_batched_step_matches_single():
    params = NetParams.initialize(4, seed=1)
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(3, 8))
    batched = step_hidden(params, HiddenState.zeros(3), obs)
    for b in range(3):
        single = step_hidden(params, HiddenState.zeros(), obs[b])
        np.testing.assert_allclose(single.h, batched.h[b], rtol=1e-12)
        np.testing.assert_allclose(single.cell, batched.cell[b], rtol=1e-12)


def test_recurrent_predictions_never_precede_now(traces, zone):
    predictor = RecurrentPredictor(zone, NetParams.initialize(zone.num_candidates, seed=0))
    batch = collect_trajectories(traces[:4], per_scenario="all")
    mu, passed = predictor.predict_series(batch.observations)
    now = np.broadcast_to(np.arange(batch.num_steps)[None, :, None] * zone.dt, mu.shape)
    assert np.all(mu[~passed] >= now[~passed])
    hidden = HiddenState.zeros()
    assert np.all(decode_arrivals(predictor.params, hidden, 3.0) >= 3.0)


def test_head_count_must_match_zone(zone):
    with pytest.raises(EngineError):
        RecurrentPredictor(zone, NetParams.initialize(zone.num_candidates + 1))


def test_fingerprint_tracks_weights(zone):
    a = RecurrentPredictor(zone, NetParams.initialize(zone.num_candidates, seed=0))
    b = RecurrentPredictor(zone, NetParams.initialize(zone.num_candidates, seed=1))
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint() == RecurrentPredictor(zone, a.params.copy()).fingerprint()
    assert PhysicsPredictor(zone).fingerprint() != a.fingerprint()


def _random_minibatch(rng, num_candidates, batch=2, steps=5):
    return Minibatch(
        inputs=rng.normal(size=(batch, steps, 8)),
        targets=rng.uniform(0.0, 1.0, size=(batch, steps, num_candidates)),
        mask=rng.uniform(size=(batch, steps, num_candidates)) < 0.8,
    )


def _reference_step(params, h_prev, c_prev, obs):
    """Element-by-element encoder and LSTM cell, gates ordered (i, f, g, o)."""
    def sigmoid(x):
        return 1.0 / (1.0 + math.exp(-x))

    def dense(w, b, x, relu=True):
        out = [sum(w[r][k] * x[k] for k in range(len(x))) + b[r] for r in range(len(b))]
        return [max(v, 0.0) for v in out] if relu else out

    z1 = dense(params.enc_w1, params.enc_b1, list(obs))
    z2 = dense(params.enc_w2, params.enc_b2, z1)
    pre = [
        sum(params.lstm_wx[r][k] * z2[k] for k in range(HIDDEN_SIZE))
        + sum(params.lstm_wh[r][k] * h_prev[k] for k in range(HIDDEN_SIZE))
        + params.lstm_b[r]
        for r in range(4 * HIDDEN_SIZE)
    ]
    h, c = [], []
    for j in range(HIDDEN_SIZE):
        i = sigmoid(pre[j])
        f = sigmoid(pre[HIDDEN_SIZE + j])
        g = math.tanh(pre[2 * HIDDEN_SIZE + j])
        o = sigmoid(pre[3 * HIDDEN_SIZE + j])
        c.append(f * c_prev[j] + i * g)
        h.append(o * math.tanh(c[-1]))
    return h, c


def test_zero_network_is_a_fixed_point():
    params = NetParams.zeros(3)
    obs = encode_observation(RAW, ObservationScale())
    hidden = step_hidden(params, HiddenState.zeros(), obs)
    np.testing.assert_array_equal(hidden.h, np.zeros(HIDDEN_SIZE))
    np.testing.assert_array_equal(hidden.cell, np.zeros(HIDDEN_SIZE))
    np.testing.assert_array_equal(decode_arrivals(params, hidden, 2.5), [2.5, 2.5, 2.5])


def test_repeated_zero_input_stays_bounded():
    params = NetParams.initialize(3, seed=8)
    hidden = HiddenState.zeros()
    for _ in range(200):
        hidden = step_hidden(params, hidden, np.zeros(8))
        assert np.all(np.abs(hidden.h) < 1.0)


@pytest.mark.parametrize("seed", range(3))
def test_step_matches_reference_equations(seed):
    rng = np.random.default_rng(seed)
    params = NetParams.initialize(2, seed=seed)
    h = rng.uniform(-0.5, 0.5, size=HIDDEN_SIZE)
    c = rng.uniform(-1.0, 1.0, size=HIDDEN_SIZE)
    for _ in range(4):
        obs = rng.normal(size=8)
        hidden = step_hidden(params, HiddenState(h, c), obs)
        ref_h, ref_c = _reference_step(params, h, c, obs)
        np.testing.assert_allclose(hidden.h, ref_h, atol=1e-6)
        np.testing.assert_allclose(hidden.cell, ref_c, atol=1e-6)
        h, c = hidden.h, hidden.cell


def test_hidden_state_ignores_future_observations():
    params = NetParams.initialize(3, seed=2)
    rng = np.random.default_rng(5)
    inputs = rng.normal(size=(2, 12, 8))
    changed = inputs.copy()
    changed[:, 7:] = 3.0 * rng.normal(size=(2, 5, 8))

    a, b = HiddenState.zeros(2), HiddenState.zeros(2)
    for t in range(7):
        a = step_hidden(params, a, inputs[:, t])
        b = step_hidden(params, b, changed[:, t])
        np.testing.assert_array_equal(a.h, b.h)
        np.testing.assert_array_equal(a.cell, b.cell)

    out_a, _ = forward_sequence(params, inputs)
    out_b, _ = forward_sequence(params, changed)
    np.testing.assert_array_equal(out_a[:, :7], out_b[:, :7])


@pytest.mark.parametrize("seed", range(10))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    minibatch = _random_minibatch(rng, 2)
    params = NetParams.initialize(2, seed=seed)
    assert check_gradients(params, minibatch, num_checks=100, seed=seed) < 1e-4


def test_sign_flipped_gradient_scores_two():
    rng = np.random.default_rng(11)
    minibatch = _random_minibatch(rng, 2)
    params = NetParams.initialize(2, seed=4)
    _, grads = loss_and_grad(params, minibatch)
    analytic = grads.to_vector()
    indices = np.flatnonzero(np.abs(analytic) > 1e-3)[:50]
    assert indices.size

    def loss_fn(v):
        return masked_loss(NetParams.from_vector(v, 2), minibatch)

    vector = params.to_vector()
    assert finite_difference_error(loss_fn, vector, analytic, indices) < 1e-4
    assert finite_difference_error(loss_fn, vector, -analytic, indices) == pytest.approx(2.0, abs=1e-3)


def test_quadratic_toy_matches_to_rounding():
    def loss_fn(v):
        return 1.5 * (v[0] - 0.3) ** 2

    analytic = np.array([3.0 * (1.1 - 0.3)])
    assert finite_difference_error(loss_fn, np.array([1.1]), analytic, [0]) < 1e-9


def test_minibatch_targets_are_relative(traces, zone):
    batch = collect_trajectories(traces[:3], per_scenario="all")
    data = prepare_minibatch(batch, zone, ObservationScale.for_zone(zone))
    now = np.arange(batch.num_steps) * zone.dt
    expected = batch.arrivals[:, None, :] - now[None, :, None]
    np.testing.assert_allclose(data.targets[data.mask], expected[data.mask])
    assert np.all(data.targets[data.mask] > 0)


def test_training_reduces_loss(zone, template):
    dataset = collect_trajectories(generate_traces(range(12), template, zone), per_scenario="all")
    hyper = TrainingHyper(learning_rate=5e-3, epochs=15, batch_size=8, seed=0, optimizer="adam")
    result = train(dataset, zone, hyper)
    assert len(result.loss_curve) == hyper.epochs + 1
    assert result.loss_curve[-1] < result.loss_curve[0]


def test_training_is_seeded(zone, template):
    dataset = collect_trajectories(generate_traces(range(4), template, zone), per_scenario="all")
    hyper = TrainingHyper(learning_rate=1e-3, epochs=2, batch_size=4, seed=5)
    a = train(dataset, zone, hyper)
    b = train(dataset, zone, hyper)
    np.testing.assert_array_equal(a.params.to_vector(), b.params.to_vector())
    assert a.loss_curve == b.loss_curve


def test_unknown_optimizer_rejected():
    with pytest.raises(EngineError):
        TrainingHyper(optimizer="rmsprop")


def test_zero_learning_rate_leaves_params(zone, template):
    dataset = collect_trajectories(generate_traces(range(3), template, zone), per_scenario="all")
    initial = NetParams.initialize(zone.num_candidates, seed=9)
    result = train(dataset, zone, TrainingHyper(learning_rate=0.0, epochs=2, batch_size=2), initial=initial)
    np.testing.assert_array_equal(result.params.to_vector(), initial.to_vector())
    assert result.loss_curve[0] == result.loss_curve[-1]


def _constant_speed_batch(zone, copies=2, start=40.0, speed=10.0):
    """Identical free-driving trajectories with sentinel neighbours."""
    steps = zone.horizon_steps + 1
    positions = start + speed * zone.dt * np.arange(steps)
    raw = np.zeros((steps, 8))
    raw[:, 0] = positions + 1000.0
    raw[:, 2] = positions
    raw[:, 4] = positions - 1000.0
    raw[:, 6] = positions - 1000.0
    raw[:, 1::2] = speed
    arrivals = arrival_times_from_positions(positions, zone).as_array()
    return TrajectoryBatch(
        observations=np.repeat(raw[None], copies, axis=0),
        arrivals=np.repeat(arrivals[None], copies, axis=0),
        scenario_ids=np.zeros(copies, dtype=np.int64),
        vehicle_ids=np.arange(copies, dtype=np.int64),
    )


@pytest.mark.slow
def test_training_memorizes_constant_speed(zone):
    dataset = _constant_speed_batch(zone)
    np.testing.assert_allclose(dataset.arrivals[0], [2.0, 3.0, 4.0, 5.0], atol=1e-9)
    hyper = TrainingHyper(learning_rate=1e-2, epochs=3000, batch_size=2, seed=0, optimizer="adam")
    result = train(dataset, zone, hyper)
    assert result.loss_curve[-1] < 0.01
