"""Negative log-likelihood, exact window gradients and Global BPTT training.

The loss of a window of consecutive events is

    L = -sum_p log lambda(t_p | t_bar_p)  +  survival term

where the survival term charges, for every event p and every entity x in the
window's entity list, the pairs (s_p, r_p, x) and (x, r_p, o_p) with
``(t_p^2 - t_bar^2) * exp(g)``.  Gradients flow through the embedding updates
inside a window; state entering a window is treated as constant except for
entities with no history, whose embedding is the trainable ``V0`` row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data import EventLog, EventRecord
from .model import (
    EPS_GAP,
    SCORE_CLAMP,
    Dims,
    DynamicState,
    ModelParams,
    apply_event_inplace,
    clamp_score,
    last_time_bar,
    relation_vector,
)

logger = logging.getLogger(__name__)

SURVIVAL_FORMS = ("absolute", "elapsed")


class NumericError(ArithmeticError):
    """Non-finite loss or gradient.

    ``event_index`` is the position in the window where it was detected (None
    when not attributable to one event).  During training ``params`` holds the
    last finite parameters.
    """

    def __init__(self, message: str, event_index: int | None = None):
        if event_index is not None:
            message = f"{message} (event {event_index})"
        super().__init__(message)
        self.event_index = event_index
        self.params: ModelParams | None = None
        self.history: list[LossBreakdown] = []


@dataclass
class TrainConfig:
    window_steps: int = 200
    learning_rate: float = 0.0005
    clip_norm: float = 5.0
    weight_scale: float = 0.1
    max_iter: int = 1000
    seed: int = 0
    dims: Dims = field(default_factory=lambda: Dims(32, 32, 16))
    eps_gap: float = EPS_GAP
    score_clamp: float = SCORE_CLAMP
    survival_form: str = "absolute"

    def __post_init__(self):
        if self.window_steps < 1:
            raise ValueError("window_steps must be >= 1")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be > 0")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.survival_form not in SURVIVAL_FORMS:
            raise ValueError(f"survival_form must be one of {SURVIVAL_FORMS}")


class LossBreakdown(NamedTuple):
    event_nll: float
    survival: float

    @property
    def total(self) -> float:
        return self.event_nll + self.survival


GradientSet = dict[str, np.ndarray]


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        arrays = params.arrays()
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def _window_start(state_in: DynamicState, params: ModelParams) -> DynamicState:
    state = state_in.copy()
    state.sync_unseen(params)
    return state


def batch_entities(window: Sequence[EventRecord]) -> list[int]:
    """Distinct entities of the window in order of first appearance."""
    return list(dict.fromkeys(x for ev in window for x in (ev.subject, ev.object)))


def _check_order(state: DynamicState, ev: EventRecord, p: int) -> None:
    if ev.time < state.t_prev[ev.subject] or ev.time < state.t_prev[ev.object]:
        raise ValueError(f"event {p} at time {ev.time} is out of order")


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def survival_weight(t_end: float, t_bar: float, form: str = "absolute") -> float:
    if form == "absolute":
        return t_end * t_end - t_bar * t_bar
    d = t_end - t_bar
    return d * d / 2.0


def event_nll(window, state_in, params, eps_gap=EPS_GAP, score_clamp=SCORE_CLAMP) -> float:
    """Sum of -log intensity over the window's events, replaying updates."""
    state = _window_start(state_in, params)
    total = 0.0
    for p, ev in enumerate(window):
        s, r, o, t = ev
        _check_order(state, ev, p)
        g = clamp_score(float(state.v[s] @ params.R[r] @ state.v[o]), score_clamp)
        total -= g + _log(max(t - last_time_bar(state, s, o), eps_gap))
        apply_event_inplace(state, params, ev)
    return total


def survival_loss_minibatch(window, state_in, params, score_clamp=SCORE_CLAMP,
                            form: str = "absolute") -> float:
    """Survival term over the window's entity list, one event at a time."""
    state = _window_start(state_in, params)
    bl = batch_entities(window)
    loss = 0.0
    for p, ev in enumerate(window):
        s, r, o, t_end = ev
        _check_order(state, ev, p)
        subj_feat, obj_feat, rel_weight = state.v[s], state.v[o], params.R[r]
        subj_surv = obj_surv = 0.0
        for obj_other in bl:
            if obj_other == s:
                continue
            t_bar = last_time_bar(state, s, obj_other)
            g = clamp_score(float(subj_feat @ rel_weight @ state.v[obj_other]), score_clamp)
            subj_surv += survival_weight(t_end, t_bar, form) * math.exp(g)
        for subj_other in bl:
            if subj_other == o:
                continue
            t_bar = last_time_bar(state, subj_other, o)
            g = clamp_score(float(state.v[subj_other] @ rel_weight @ obj_feat), score_clamp)
            obj_surv += survival_weight(t_end, t_bar, form) * math.exp(g)
        loss += subj_surv + obj_surv
        apply_event_inplace(state, params, ev)
    return loss


class _Tape:
    """Forward record of one window, enough to run the backward pass.

    Embedding nodes are either leaves (state entering the window, or V0 rows
    for entities without history) or outputs of a recurrent update.
    """

    def __init__(self, params: ModelParams, state: DynamicState, n_events: int):
        self.params = params
        self.state = state
        d = params.dims.d
        self.vecs = np.empty((params.n_entities + 2 * n_events, d))
        self.n_nodes = 0
        self.leaf_v0: dict[int, int] = {}  # node -> entity, for V0 leaves
        self.current: dict[int, int] = {}  # entity -> node
        self.updates: list[tuple] = []
        self.terms: list[tuple] = []

    def _new(self, vec) -> int:
        k = self.n_nodes
        self.vecs[k] = vec
        self.n_nodes += 1
        return k

    def node(self, e: int) -> int:
        k = self.current.get(e)
        if k is None:
            k = self._new(self.state.v[e])
            if not self.state.seen[e]:
                self.leaf_v0[k] = e
            self.current[e] = k
        return k


def _forward(window, state_in, params, eps_gap, score_clamp, form, keep_tape):
    state = _window_start(state_in, params)
    tape = _Tape(params, state, len(window))
    bl = batch_entities(window)
    t_prev = state.t_prev  # advanced in place as events are applied
    rel_prev = state.rel_prev
    nll = surv = 0.0
    for p, ev in enumerate(window):
        s, r, o, t = ev
        _check_order(state, ev, p)
        ns, no = tape.node(s), tape.node(o)
        vs, vo = tape.vecs[ns], tape.vecs[no]
        R = params.R[r]

        # event term
        g_raw = float(vs @ R @ vo)
        g = min(max(g_raw, -score_clamp), score_clamp)
        dt = t - max(t_prev[s], t_prev[o])
        nll_p = -(g + _log(max(dt, eps_gap)))
        live = 1.0 if -score_clamp < g_raw < score_clamp else 0.0
        if keep_tape:
            tape.terms.append(("obj", ns, np.array([no]), r, np.array([-live])))

        # survival term: subject fixed, then object fixed
        objs = [x for x in bl if x != s]
        nodes = np.array([tape.node(x) for x in objs])
        g_raw_c = tape.vecs[nodes] @ (R.T @ vs)
        w = np.array([survival_weight(t, max(t_prev[s], t_prev[x]), form) for x in objs])
        ex = w * np.exp(clamp_score(g_raw_c, score_clamp))
        surv_p = float(ex.sum())
        if keep_tape:
            tape.terms.append(("obj", ns, nodes, r, ex * (np.abs(g_raw_c) < score_clamp)))

        subs = [x for x in bl if x != o]
        nodes = np.array([tape.node(x) for x in subs])
        g_raw_c = tape.vecs[nodes] @ (R @ vo)
        w = np.array([survival_weight(t, max(t_prev[x], t_prev[o]), form) for x in subs])
        ex = w * np.exp(clamp_score(g_raw_c, score_clamp))
        surv_p += float(ex.sum())
        if keep_tape:
            tape.terms.append(("subj", no, nodes, r, ex * (np.abs(g_raw_c) < score_clamp)))

        if not (math.isfinite(nll_p) and math.isfinite(surv_p)):
            raise NumericError("non-finite window loss", p)
        nll += nll_p
        surv += surv_p

        # embedding updates from the pre-event snapshot
        x_s = np.concatenate([vs, vo, relation_vector(params, rel_prev[s])])
        x_o = np.concatenate([vo, vs, relation_vector(params, rel_prev[o])])
        dt_s, dt_o = t - t_prev[s], t - t_prev[o]
        h_s = np.tanh(params.W_h @ x_s)
        h_o = np.tanh(params.W_h @ x_o)
        new_s = np.tanh(params.W_t_s * dt_s + params.W_hh @ h_s)
        new_o = np.tanh(params.W_t_o * dt_o + params.W_hh @ h_o)
        ks, ko = tape._new(new_s), tape._new(new_o)
        if keep_tape:
            tape.updates.append((ks, ns, no, int(rel_prev[s]), dt_s, "s", x_s, h_s))
            tape.updates.append((ko, no, ns, int(rel_prev[o]), dt_o, "o", x_o, h_o))
        tape.current[s], tape.current[o] = ks, ko
        state.v[s], state.v[o] = new_s, new_o
        t_prev[s] = t_prev[o] = t
        rel_prev[s] = rel_prev[o] = r
    return LossBreakdown(nll, surv), tape, state


def _backward(tape: _Tape) -> GradientSet:
    params = tape.params
    d = params.dims.d
    grads = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    node_grad = np.zeros((tape.n_nodes, d))
    vecs = tape.vecs

    for kind, fixed, others, r, w in tape.terms:
        R = params.R[r]
        a = vecs[fixed]
        B = vecs[others]
        bw = B.T @ w
        if kind == "obj":  # g_j = a^T R b_j
            grads["R"][r] += np.outer(a, bw)
            node_grad[fixed] += R @ bw
            np.add.at(node_grad, others, np.outer(w, R.T @ a))
        else:  # g_j = b_j^T R a
            grads["R"][r] += np.outer(bw, a)
            node_grad[fixed] += R.T @ bw
            np.add.at(node_grad, others, np.outer(w, R @ a))

    for out, self_node, other_node, rel, dt, role, x, h in reversed(tape.updates):
        gv = node_grad[out]
        if not gv.any():
            continue
        v_new = vecs[out]
        dz = gv * (1.0 - v_new * v_new)
        grads["W_t_s" if role == "s" else "W_t_o"] += dz * dt
        grads["W_hh"] += np.outer(dz, h)
        du = (params.W_hh.T @ dz) * (1.0 - h * h)
        grads["W_h"] += np.outer(du, x)
        dx = params.W_h.T @ du
        node_grad[self_node] += dx[:d]
        node_grad[other_node] += dx[d:2 * d]
        if rel >= 0:
            grads["rel_emb"][rel] += dx[2 * d:]

    for k, e in tape.leaf_v0.items():
        grads["V0"][e] += node_grad[k]
    return grads


def window_loss(window, state_in, params, eps_gap=EPS_GAP, score_clamp=SCORE_CLAMP,
                form="absolute") -> LossBreakdown:
    loss, _, _ = _forward(window, state_in, params, eps_gap, score_clamp, form, keep_tape=False)
    return loss


def window_loss_and_gradients(
    window: Sequence[EventRecord],
    state_in: DynamicState,
    params: ModelParams,
    eps_gap: float = EPS_GAP,
    score_clamp: float = SCORE_CLAMP,
    form: str = "absolute",
) -> tuple[LossBreakdown, GradientSet, DynamicState]:
    """Loss over the window, its gradient for every parameter array, and the
    state after the window."""
    loss, tape, state_out = _forward(window, state_in, params, eps_gap, score_clamp, form,
                                     keep_tape=True)
    grads = _backward(tape)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads, state_out


def global_norm(grads: GradientSet) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def adam_step(
    params: ModelParams,
    grads: GradientSet,
    opt: OptimizerState,
    config: TrainConfig,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, OptimizerState]:
    """Clip gradients to ``config.clip_norm`` by global norm, then one Adam update."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient in optimizer step")
    scale = config.clip_norm / norm if norm > config.clip_norm else 1.0
    step = opt.step + 1
    new_params = params.copy()
    new_opt = OptimizerState({}, {}, step)
    for name, theta in new_params.arrays().items():
        g = grads[name] * scale
        m = beta1 * opt.m[name] + (1 - beta1) * g
        v = beta2 * opt.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        theta -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        new_opt.m[name], new_opt.v[name] = m, v
    return new_params, new_opt


@dataclass
class TrainResult:
    params: ModelParams
    state: DynamicState
    history: list[LossBreakdown]
    window_starts: list[int]
    opt: OptimizerState


def train_global_bptt(
    log: EventLog,
    config: TrainConfig,
    params: ModelParams | None = None,
    callback: Callable[[int, int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Truncated BPTT over consecutive, non-overlapping windows of the timeline.

    When the next full window would run past the end of the log, training
    restarts from the first event with a fresh state.  Gradients never cross
    window boundaries.
    """
    if not len(log):
        raise ValueError("cannot train on an empty log")
    if params is None:
        params = ModelParams.init_random(config.dims, log.n_entities, log.n_relations,
                                         config.weight_scale, rng=config.seed)
    opt = OptimizerState.zeros_like(params)
    events = log.events
    n, s = len(events), config.window_steps
    state = DynamicState.initial(params)
    history: list[LossBreakdown] = []
    starts: list[int] = []
    cur = 0
    for it in range(config.max_iter):
        if cur > 0 and cur + s > n:
            cur = 0
        if cur == 0:
            state = DynamicState.initial(params)
        window = events[cur:cur + s]
        try:
            loss, grads, state = window_loss_and_gradients(
                window, state, params, config.eps_gap, config.score_clamp, config.survival_form)
            new_params, opt = adam_step(params, grads, opt, config)
            if not new_params.is_finite():
                raise NumericError("non-finite parameters after update")
        except NumericError as err:
            err.params, err.history = params, history
            raise
        params = new_params
        history.append(loss)
        starts.append(cur)
        if callback is not None:
            callback(it, cur, loss)
        if it % 100 == 0:
            logger.debug("window %d start %d loss %.6g", it, cur, loss.total)
        cur += s
    state.sync_unseen(params)
    return TrainResult(params, state, history, starts, opt)


def finite_difference_gradients(params, state, window, fd_step=1e-5, **loss_kw) -> GradientSet:
    """Central differences of the total window loss for every coordinate."""
    out = {}
    for name, arr in params.arrays().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + fd_step
            plus = window_loss(window, state, params, **loss_kw).total
            arr[idx] = orig - fd_step
            minus = window_loss(window, state, params, **loss_kw).total
            arr[idx] = orig
            g[idx] = (plus - minus) / (2 * fd_step)
        out[name] = g
    return out


def relative_errors(analytic: GradientSet, numeric: GradientSet, floor=1e-8) -> dict[str, float]:
    """Max relative error per parameter array."""
    out = {}
    for name, a in analytic.items():
        b = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        out[name] = float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
    return out


def grad_check(params, state, window, fd_step=1e-5, **loss_kw) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    work = params.copy()
    _, analytic, _ = window_loss_and_gradients(window, state, work, **loss_kw)
    numeric = finite_difference_gradients(work, state, window, fd_step, **loss_kw)
    return max(relative_errors(analytic, numeric).values())
