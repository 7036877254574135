import math

import numpy as np
import pytest

from knowevolve.data import EventLog, EventRecord, simulate
from knowevolve.model import Dims, DynamicState, ModelParams, replay
from knowevolve.training import (
    LossBreakdown,
    NumericError,
    OptimizerState,
    TrainConfig,
    adam_step,
    batch_entities,
    event_nll,
    finite_difference_gradients,
    grad_check,
    relative_errors,
    survival_loss_minibatch,
    train_global_bptt,
    window_loss,
    window_loss_and_gradients,
)


def brute_force_survival(window, state, params):
    """Independent double loop over the window's entity list."""
    v = params.V0.copy()
    seen = state.rel_prev >= 0
    v[seen] = state.v[seen]
    t_prev = state.t_prev.copy()
    rel_prev = state.rel_prev.copy()
    ents = []
    for ev in window:
        for x in (ev.subject, ev.object):
            if x not in ents:
                ents.append(x)
    total = 0.0
    for s, r, o, t in window:
        part_s = part_o = 0.0
        for x in ents:
            if x != s:
                tb = max(t_prev[s], t_prev[x])
                part_s += (t ** 2 - tb ** 2) * math.exp(v[s] @ params.R[r] @ v[x])
        for x in ents:
            if x != o:
                tb = max(t_prev[x], t_prev[o])
                part_o += (t ** 2 - tb ** 2) * math.exp(v[x] @ params.R[r] @ v[o])
        total += part_s + part_o
        # recurrent updates written out independently of the model module
        new = {}
        for me, other, wt in ((s, o, params.W_t_s), (o, s, params.W_t_o)):
            rel = params.rel_emb[rel_prev[me]] if rel_prev[me] >= 0 else np.zeros(params.rel_emb.shape[1])
            h = np.tanh(params.W_h @ np.concatenate([v[me], v[other], rel]))
            new[me] = np.tanh(wt * (t - t_prev[me]) + params.W_hh @ h)
        v[s], v[o] = new[s], new[o]
        t_prev[s] = t_prev[o] = t
        rel_prev[s] = rel_prev[o] = r
    return total


def random_instance(seed, d=3, n_e=4, n_r=2, n_events=5, history=3, scale=0.6):
    rng = np.random.default_rng(seed)
    params = ModelParams.init_random(Dims(d, d, 2), n_e, n_r, scale, rng=rng, zero_embeddings=False)
    log = simulate(params, n_e, n_r, history + n_events, seed=seed)
    state = replay(DynamicState.initial(params), params, log.events[:history])
    return params, state, list(log.events[history:])


def test_event_nll_examples():
    params = ModelParams.zeros(Dims(1, 1, 1), 3, 1)
    state = DynamicState.initial(params)
    assert event_nll([EventRecord(0, 0, 1, 1.0)], state, params) == pytest.approx(0.0)
    params.V0[:] = 1.0
    params.R[0] = 1.0  # g = 1, dt = 1
    assert event_nll([EventRecord(0, 0, 1, 1.0)], DynamicState.initial(params), params) == pytest.approx(-1.0)
    # lambda = 2 then 0.5 with zero params
    zero = ModelParams.zeros(Dims(1, 1, 1), 4, 1)
    window = [EventRecord(0, 0, 1, 2.0), EventRecord(2, 0, 3, 0.5 + 2.0)]
    st = DynamicState.initial(zero)
    st.t_prev[[2, 3]] = 2.0
    st.rel_prev[[2, 3]] = 0
    assert event_nll(window, st, zero) == pytest.approx(0.0, abs=1e-12)


def test_survival_single_event_zero_params():
    params = ModelParams.zeros(Dims(2), 2, 1)
    window = [EventRecord(0, 0, 1, 1.0)]
    assert survival_loss_minibatch(window, DynamicState.initial(params), params) == pytest.approx(2.0)


def test_survival_zero_when_no_elapsed_time():
    params = ModelParams.zeros(Dims(2), 2, 1)
    state = DynamicState.initial(params)
    state.t_prev[:] = 3.0
    state.rel_prev[:] = 0
    assert survival_loss_minibatch([EventRecord(0, 0, 1, 3.0)], state, params) == 0.0


def test_batch_entities_first_appearance():
    window = [EventRecord(3, 0, 1, 0.0), EventRecord(1, 0, 2, 1.0), EventRecord(0, 0, 3, 2.0)]
    assert batch_entities(window) == [3, 1, 2, 0]


@pytest.mark.parametrize("seed", range(10))
def test_survival_matches_brute_force_and_vectorized(seed):
    params, state, window = random_instance(seed, n_events=5)
    literal = survival_loss_minibatch(window, state, params)
    assert literal == pytest.approx(brute_force_survival(window, state, params), rel=1e-12)
    assert window_loss(window, state, params).survival == pytest.approx(literal, rel=1e-12)
    assert window_loss(window, state, params).event_nll == pytest.approx(
        event_nll(window, state, params), rel=1e-12)


def test_zero_params_give_zero_recurrent_gradients():
    params = ModelParams.zeros(Dims(3), 4, 2)
    window = [EventRecord(0, 0, 1, 1.0), EventRecord(2, 1, 3, 1.5), EventRecord(1, 1, 2, 2.0)]
    _, grads, _ = window_loss_and_gradients(window, DynamicState.initial(params), params)
    assert not grads["W_hh"].any()
    numeric = finite_difference_gradients(params, DynamicState.initial(params), window)
    assert relative_errors(grads, numeric)["W_hh"] == 0.0


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(seed):
    params, state, window = random_instance(seed)
    assert grad_check(params, state, window, fd_step=1e-5) < 1e-4


def test_gradients_reach_initial_embeddings():
    params, _, _ = random_instance(3, history=0)
    log = simulate(params, 4, 2, 6, seed=3)
    state = DynamicState.initial(params)
    _, grads, _ = window_loss_and_gradients(list(log.events), state, params)
    assert np.any(grads["V0"] != 0)
    assert grad_check(params, state, list(log.events)) < 1e-4


def test_gradients_ignore_v0_of_entities_with_history():
    params, state, window = random_instance(4, history=8)
    _, grads, _ = window_loss_and_gradients(window, state, params)
    assert not grads["V0"][state.seen].any()


def test_larger_fd_step_is_less_accurate():
    params, state, window = random_instance(1)
    assert grad_check(params, state, window, fd_step=1e-2) > grad_check(params, state, window, fd_step=1e-5)


def test_state_out_matches_plain_replay():
    params, state, window = random_instance(2)
    _, _, out = window_loss_and_gradients(window, state, params)
    ref = replay(state, params, window)
    np.testing.assert_array_equal(out.v, ref.v)
    np.testing.assert_array_equal(out.t_prev, ref.t_prev)
    np.testing.assert_array_equal(out.rel_prev, ref.rel_prev)


def test_non_finite_loss_reports_event_index():
    params = ModelParams.zeros(Dims(2), 3, 1)
    state = DynamicState.initial(params)
    # without the gap floor, the second event (zero elapsed time) has log 0
    window = [EventRecord(0, 0, 1, 1.0), EventRecord(1, 0, 2, 1.0)]
    with pytest.raises(NumericError) as info:
        window_loss_and_gradients(window, state, params, eps_gap=0.0)
    assert info.value.event_index == 1


def test_same_timestamp_burst_is_finite():
    params = ModelParams.init_random(Dims(3), 5, 2, 0.5, rng=0)
    window = [EventRecord(0, 0, 1, 2.0), EventRecord(1, 1, 2, 2.0), EventRecord(2, 0, 0, 2.0),
              EventRecord(3, 1, 4, 2.0), EventRecord(0, 1, 1, 2.0)]
    loss, grads, _ = window_loss_and_gradients(window, DynamicState.initial(params), params)
    assert math.isfinite(loss.total) and loss.survival >= 0
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_ordering_violation():
    params = ModelParams.zeros(Dims(2), 3, 1)
    window = [EventRecord(0, 0, 1, 2.0), EventRecord(1, 0, 2, 1.0)]
    with pytest.raises(ValueError):
        event_nll(window, DynamicState.initial(params), params)
    with pytest.raises(ValueError):
        window_loss_and_gradients(window, DynamicState.initial(params), params)


def test_adam_zero_gradient():
    params = ModelParams.init_random(Dims(2), 3, 1, rng=0)
    opt = OptimizerState.zeros_like(params)
    grads = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    new, opt2 = adam_step(params, grads, opt, TrainConfig(dims=Dims(2)))
    for k, a in params.arrays().items():
        np.testing.assert_array_equal(a, getattr(new, k))
    assert opt2.step == 1


def test_adam_first_step_hand_value():
    params = ModelParams.zeros(Dims(1, 1, 1), 2, 1)
    grads = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    grads["W_hh"][:] = 1.0
    cfg = TrainConfig(learning_rate=0.0005, clip_norm=10.0, dims=Dims(1, 1, 1))
    new, _ = adam_step(params, grads, OptimizerState.zeros_like(params), cfg)
    assert new.W_hh[0, 0] == pytest.approx(-0.0005 / (1 + 1e-8), rel=1e-12)


def test_adam_clipping_scales_gradients():
    params = ModelParams.zeros(Dims(1, 1, 1), 2, 1)
    grads = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    grads["W_hh"][:] = 6.0
    grads["W_h"][0, :2] = 8.0 / math.sqrt(2)  # global norm 10
    cfg = TrainConfig(clip_norm=1.0, dims=Dims(1, 1, 1))
    _, opt = adam_step(params, grads, OptimizerState.zeros_like(params), cfg)
    assert opt.m["W_hh"][0, 0] == pytest.approx(0.1 * 0.6)
    assert opt.v["W_hh"][0, 0] == pytest.approx(0.001 * 0.36)


def test_adam_rejects_non_finite():
    params = ModelParams.zeros(Dims(1, 1, 1), 2, 1)
    grads = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    grads["R"][:] = np.nan
    with pytest.raises(NumericError):
        adam_step(params, grads, OptimizerState.zeros_like(params), TrainConfig(dims=Dims(1, 1, 1)))


def ten_event_log():
    return EventLog(tuple(EventRecord(i % 3, 0, (i + 1) % 3, float(i)) for i in range(10)), 3, 1)


def test_window_progression_resets():
    log = ten_event_log()
    cfg = TrainConfig(window_steps=4, max_iter=7, dims=Dims(2))
    res = train_global_bptt(log, cfg)
    assert res.window_starts == [0, 4, 0, 4, 0, 4, 0]
    assert len(res.history) == 7


def test_epoch_reset_restores_initial_state():
    log = ten_event_log()
    cfg = TrainConfig(window_steps=4, max_iter=3, dims=Dims(2), learning_rate=1e-12)
    res = train_global_bptt(log, cfg)
    # third window restarts at t=0 with fresh state, so its loss equals the first
    assert res.history[2].total == pytest.approx(res.history[0].total, rel=1e-6)


def test_max_iter_zero_returns_initialization():
    log = ten_event_log()
    cfg = TrainConfig(window_steps=4, max_iter=0, dims=Dims(2), seed=9)
    res = train_global_bptt(log, cfg)
    init = ModelParams.init_random(Dims(2), 3, 1, cfg.weight_scale, rng=9)
    for k, a in init.arrays().items():
        np.testing.assert_array_equal(a, getattr(res.params, k))
    assert not res.params.V0.any()
    assert res.history == []


def test_training_deterministic():
    params = ModelParams.init_random(Dims(3), 4, 2, 0.8, rng=0, zero_embeddings=False)
    log = simulate(params, 4, 2, 60, seed=0)
    cfg = TrainConfig(window_steps=10, max_iter=15, dims=Dims(3), seed=2)
    a = train_global_bptt(log, cfg)
    b = train_global_bptt(log, cfg)
    assert a.history == b.history
    assert all(isinstance(h, LossBreakdown) for h in a.history)


def test_training_reduces_loss_on_simulated_data():
    truth = ModelParams.init_random(Dims(4, 4, 2), 4, 2, 1.0, rng=0, zero_embeddings=False)
    log = simulate(truth, 4, 2, 200, seed=0)
    cfg = TrainConfig(window_steps=20, max_iter=300, dims=Dims(4, 4, 2), seed=0, learning_rate=0.005)
    res = train_global_bptt(log, cfg)
    first, last = res.history[:10], res.history[-10:]
    assert sum(h.total for h in last) < sum(h.total for h in first)


def test_numeric_error_keeps_last_good_params():
    log = EventLog((EventRecord(0, 0, 1, 0.0), EventRecord(1, 0, 2, 0.0)), 3, 1)
    cfg = TrainConfig(window_steps=2, max_iter=3, dims=Dims(2), eps_gap=0.0)
    with pytest.raises(NumericError) as info:
        train_global_bptt(log, cfg)
    assert info.value.params is not None and info.value.params.is_finite()
