"""Evolving entity embeddings and the relation-modulated Rayleigh intensity.

For a candidate fact (s, r, o) the bilinear score is ``g = v_s^T R_r v_o`` and
the intensity at time t is ``exp(g) * (t - t_bar)``, where ``t_bar`` is the
latest event time of either entity.  Between events this is a Rayleigh law with
rate ``exp(g)``::

    survival  S(t) = exp(-exp(g) (t - t_bar)^2 / 2)
    density   f(t) = lambda(t) S(t)
    mean gap  E    = sqrt(pi / (2 exp(g)))

Each observed event updates both entity embeddings with a tanh recurrent cell
that reads the pre-event embeddings of both entities and the relation
embedding of each entity's previous event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import EventRecord

EPS_GAP = 1e-8
SCORE_CLAMP = 50.0
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Dims:
    d: int
    l: int | None = None
    c: int = 2

    def __post_init__(self):
        if self.l is None:
            object.__setattr__(self, "l", self.d)
        if min(self.d, self.l, self.c) < 1:
            raise ValueError(f"dimensions must be >= 1, got {self}")


@dataclass
class ModelParams:
    """All trainable weights.

    Shapes: ``R`` (n_r, d, d), ``rel_emb`` (n_r, c), ``W_t_s``/``W_t_o`` (d,),
    ``W_hh`` (d, l), ``W_h`` (l, 2d + c), ``V0`` (n_e, d).
    """

    R: np.ndarray
    rel_emb: np.ndarray
    W_t_s: np.ndarray
    W_t_o: np.ndarray
    W_hh: np.ndarray
    W_h: np.ndarray
    V0: np.ndarray

    def __post_init__(self):
        n_r, d, _ = self.R.shape
        n_e = self.V0.shape[0]
        c = self.rel_emb.shape[1]
        l = self.W_hh.shape[1]
        expected = {
            "R": (n_r, d, d),
            "rel_emb": (n_r, c),
            "W_t_s": (d,),
            "W_t_o": (d,),
            "W_hh": (d, l),
            "W_h": (l, 2 * d + c),
            "V0": (n_e, d),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def dims(self) -> Dims:
        return Dims(self.R.shape[1], self.W_hh.shape[1], self.rel_emb.shape[1])

    @property
    def n_entities(self) -> int:
        return self.V0.shape[0]

    @property
    def n_relations(self) -> int:
        return self.R.shape[0]

    @staticmethod
    def names() -> list[str]:
        return [f.name for f in fields(ModelParams)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names()}

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: a.copy() for n, a in self.arrays().items()})

    @classmethod
    def zeros(cls, dims: Dims, n_entities: int, n_relations: int) -> "ModelParams":
        d, l, c = dims.d, dims.l, dims.c
        return cls(
            R=np.zeros((n_relations, d, d)),
            rel_emb=np.zeros((n_relations, c)),
            W_t_s=np.zeros(d),
            W_t_o=np.zeros(d),
            W_hh=np.zeros((d, l)),
            W_h=np.zeros((l, 2 * d + c)),
            V0=np.zeros((n_entities, d)),
        )

    @classmethod
    def init_random(
        cls,
        dims: Dims,
        n_entities: int,
        n_relations: int,
        weight_scale: float = 0.1,
        rng: np.random.Generator | int | None = None,
        zero_embeddings: bool = True,
    ) -> "ModelParams":
        """Uniform weights in [-weight_scale, weight_scale]; V0 zero unless asked."""
        rng = np.random.default_rng(rng)
        p = cls.zeros(dims, n_entities, n_relations)
        for name, arr in p.arrays().items():
            if name == "V0" and zero_embeddings:
                continue
            arr[...] = rng.uniform(-weight_scale, weight_scale, size=arr.shape)
        return p

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())


def save_params(params: ModelParams, path: str | Path, **extra) -> None:
    """Write a checkpoint (.npz).  ``extra`` arrays/scalars are stored alongside."""
    dims = params.dims
    meta = {
        "format_version": np.array(FORMAT_VERSION),
        "dims": np.array([dims.d, dims.l, dims.c]),
        "n_entities": np.array(params.n_entities),
        "n_relations": np.array(params.n_relations),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **meta, **{f"param/{k}": v for k, v in params.arrays().items()}, **extra)


def load_params(path: str | Path) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Read a checkpoint; returns the params and any extra stored entries."""
    with np.load(path, allow_pickle=False) as z:
        if "format_version" not in z or int(z["format_version"]) != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format")
        params = ModelParams(**{n: z[f"param/{n}"] for n in ModelParams.names()})
        if params.n_entities != int(z["n_entities"]) or params.n_relations != int(z["n_relations"]):
            raise ValueError(f"{path}: inconsistent vocabulary sizes")
        if tuple(z["dims"]) != (params.dims.d, params.dims.l, params.dims.c):
            raise ValueError(f"{path}: inconsistent dims")
        reserved = {"format_version", "dims", "n_entities", "n_relations"}
        extra = {k: z[k] for k in z.files if k not in reserved and not k.startswith("param/")}
    return params, extra


@dataclass
class DynamicState:
    """Current embedding, last event time and last relation of every entity.

    ``rel_prev == -1`` marks an entity with no history; its ``t_prev`` is 0.
    """

    v: np.ndarray
    t_prev: np.ndarray
    rel_prev: np.ndarray

    @classmethod
    def initial(cls, params: ModelParams) -> "DynamicState":
        n = params.n_entities
        return cls(params.V0.copy(), np.zeros(n), np.full(n, -1, dtype=np.int64))

    def copy(self) -> "DynamicState":
        return DynamicState(self.v.copy(), self.t_prev.copy(), self.rel_prev.copy())

    @property
    def seen(self) -> np.ndarray:
        return self.rel_prev >= 0

    def has_history(self, e: int) -> bool:
        return bool(self.rel_prev[e] >= 0)

    def sync_unseen(self, params: ModelParams) -> None:
        """Point entities without history at the current V0."""
        unseen = ~self.seen
        self.v[unseen] = params.V0[unseen]


def clamp_score(g, limit: float = SCORE_CLAMP):
    return np.clip(g, -limit, limit)


def _check_pair(state: DynamicState, s: int, o: int) -> None:
    n = len(state.t_prev)
    if not (0 <= s < n and 0 <= o < n):
        raise ValueError(f"entity id out of range: ({s}, {o})")
    if s == o:
        raise ValueError(f"subject and object must differ, got {s}")


def last_time_bar(state: DynamicState, s: int, o: int) -> float:
    _check_pair(state, s, o)
    return float(max(state.t_prev[s], state.t_prev[o]))


def bilinear_score(state: DynamicState, params: ModelParams, s: int, r: int, o: int) -> float:
    _check_pair(state, s, o)
    if not 0 <= r < params.n_relations:
        raise ValueError(f"relation id out of range: {r}")
    return float(state.v[s] @ params.R[r] @ state.v[o])


def _elapsed(state, s, o, t) -> float:
    t_bar = last_time_bar(state, s, o)
    if t < t_bar:
        raise ValueError(f"time {t} precedes last event time {t_bar}")
    return t - t_bar


def intensity(state, params, s, r, o, t, eps_gap=EPS_GAP, score_clamp=SCORE_CLAMP) -> float:
    dt = _elapsed(state, s, o, t)
    g = clamp_score(bilinear_score(state, params, s, r, o), score_clamp)
    return math.exp(g) * max(dt, eps_gap)


def survival_prob(state, params, s, r, o, t, score_clamp=SCORE_CLAMP) -> float:
    dt = _elapsed(state, s, o, t)
    g = clamp_score(bilinear_score(state, params, s, r, o), score_clamp)
    return math.exp(-math.exp(g) * dt * dt / 2.0)


def density(state, params, s, r, o, t, eps_gap=EPS_GAP, score_clamp=SCORE_CLAMP) -> float:
    lam = intensity(state, params, s, r, o, t, eps_gap, score_clamp)
    return lam * survival_prob(state, params, s, r, o, t, score_clamp)


def expected_next_time(state, params, s, r, o, offset=True, score_clamp=SCORE_CLAMP) -> float:
    """Mean of the Rayleigh waiting time, measured from t_bar when ``offset``."""
    g = clamp_score(bilinear_score(state, params, s, r, o), score_clamp)
    gap = math.sqrt(math.pi / (2.0 * math.exp(g)))
    return last_time_bar(state, s, o) + gap if offset else gap


def candidate_densities(
    state: DynamicState,
    params: ModelParams,
    r: int,
    t: float,
    subject: int | None = None,
    object: int | None = None,
    eps_gap: float = EPS_GAP,
    score_clamp: float = SCORE_CLAMP,
) -> np.ndarray:
    """Density at ``t`` for every entity filling the open slot.

    Exactly one of ``subject``/``object`` is fixed.  The entry for the fixed
    entity itself is NaN.
    """
    if (subject is None) == (object is None):
        raise ValueError("fix exactly one of subject/object")
    fixed = subject if subject is not None else object
    if subject is not None:
        g = state.v @ (params.R[r].T @ state.v[subject])
    else:
        g = state.v @ (params.R[r] @ state.v[object])
    t_bar = np.maximum(state.t_prev, state.t_prev[fixed])
    dt = t - t_bar
    if np.any(dt < 0):
        raise ValueError(f"time {t} precedes an entity's last event")
    rate = np.exp(clamp_score(g, score_clamp))
    dens = rate * np.maximum(dt, eps_gap) * np.exp(-rate * dt * dt / 2.0)
    dens[fixed] = np.nan
    return dens


def recurrent_update(params: ModelParams, v_self, v_other, rel_vec, dt, W_t):
    """One tanh cell step; returns ``(new_embedding, hidden)``."""
    x = np.concatenate([v_self, v_other, rel_vec])
    h = np.tanh(params.W_h @ x)
    return np.tanh(W_t * dt + params.W_hh @ h), h


def relation_vector(params: ModelParams, rel_prev: int) -> np.ndarray:
    if rel_prev < 0:
        return np.zeros(params.rel_emb.shape[1])
    return params.rel_emb[rel_prev]


def apply_event(state: DynamicState, params: ModelParams, event: EventRecord) -> DynamicState:
    """Return the state after observing ``event``; the input is not modified."""
    out = state.copy()
    apply_event_inplace(out, params, event)
    return out


def apply_event_inplace(state: DynamicState, params: ModelParams, event: EventRecord) -> None:
    s, r, o, t = event
    _check_pair(state, s, o)
    if t < state.t_prev[s] or t < state.t_prev[o]:
        raise ValueError(f"event at {t} precedes an involved entity's last event")
    v_s, v_o = state.v[s].copy(), state.v[o].copy()
    new_s, _ = recurrent_update(params, v_s, v_o, relation_vector(params, state.rel_prev[s]),
                                t - state.t_prev[s], params.W_t_s)
    new_o, _ = recurrent_update(params, v_o, v_s, relation_vector(params, state.rel_prev[o]),
                                t - state.t_prev[o], params.W_t_o)
    state.v[s], state.v[o] = new_s, new_o
    state.t_prev[s] = state.t_prev[o] = t
    state.rel_prev[s] = state.rel_prev[o] = r


def replay(state: DynamicState, params: ModelParams, events) -> DynamicState:
    """Apply ``events`` in order to a copy of ``state``."""
    state = state.copy()
    for ev in events:
        apply_event_inplace(state, params, ev)
    return state
