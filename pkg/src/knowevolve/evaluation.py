"""Link and time prediction on held-out events with frozen parameters.

Test events are processed in chronological order.  Each one is scored against
the current state and only then applied, so embeddings keep evolving through
the test period while the weights stay fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import EventLog, EventRecord, slide_partition
from .model import (
    EPS_GAP,
    SCORE_CLAMP,
    DynamicState,
    ModelParams,
    apply_event_inplace,
    candidate_densities,
    expected_next_time,
    replay,
)


class TrueTripleIndex:
    """Exact membership over (subject, relation, object) triples seen in training."""

    def __init__(self, triples=()):
        self._triples = set(triples)
        self._by_sr: dict[tuple[int, int], set[int]] = {}
        self._by_ro: dict[tuple[int, int], set[int]] = {}
        for s, r, o in self._triples:
            self._by_sr.setdefault((s, r), set()).add(o)
            self._by_ro.setdefault((r, o), set()).add(s)

    @classmethod
    def from_log(cls, log: EventLog) -> "TrueTripleIndex":
        return cls(log.triples())

    def __contains__(self, triple) -> bool:
        return tuple(triple) in self._triples

    def __len__(self):
        return len(self._triples)

    def objects(self, s: int, r: int) -> set[int]:
        return self._by_sr.get((s, r), set())

    def subjects(self, r: int, o: int) -> set[int]:
        return self._by_ro.get((r, o), set())


class RankResult(NamedTuple):
    event: EventRecord
    raw_rank: int
    filtered_rank: int
    candidate_count: int
    is_new_fact: bool


def _ranks(dens: np.ndarray, truth: int, fixed: int, true_others: set[int]) -> tuple[int, int, int]:
    """Pessimistic raw and filtered rank of ``truth`` among finite entries."""
    cand = np.ones(len(dens), dtype=bool)
    cand[fixed] = False
    if not cand[truth]:
        raise RuntimeError("ground truth is not among the candidates")
    d_true = dens[truth]
    at_least = cand & (dens >= d_true)
    at_least[truth] = True
    raw = int(at_least.sum())
    drop = [x for x in true_others if x != truth and x != fixed]
    filtered = raw - int(at_least[drop].sum()) if drop else raw
    return raw, filtered, int(cand.sum())


def rank_object(state, params, event, index: TrueTripleIndex, eps_gap=EPS_GAP,
                score_clamp=SCORE_CLAMP) -> RankResult:
    s, r, o, t = event
    dens = candidate_densities(state, params, r, t, subject=s, eps_gap=eps_gap,
                               score_clamp=score_clamp)
    raw, filt, n = _ranks(dens, o, s, index.objects(s, r))
    return RankResult(event, raw, filt, n, (s, r, o) not in index)


def rank_subject(state, params, event, index: TrueTripleIndex, eps_gap=EPS_GAP,
                 score_clamp=SCORE_CLAMP) -> RankResult:
    s, r, o, t = event
    dens = candidate_densities(state, params, r, t, object=o, eps_gap=eps_gap,
                               score_clamp=score_clamp)
    raw, filt, n = _ranks(dens, s, o, index.subjects(r, o))
    return RankResult(event, raw, filt, n, (s, r, o) not in index)


def hits_at_k(ranks, k: int = 10) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks")
    if k < 1 or np.any(ranks < 1):
        raise ValueError("ranks and k must be >= 1")
    return float(np.mean(ranks <= k))


def rank_summary(ranks, k: int = 10) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=float)
    return {"mar": float(ranks.mean()), "std": float(ranks.std()),
            f"hits{k}": hits_at_k(ranks, k)}


@dataclass
class MetricsReport:
    """Rank metrics keyed by group: slide index, ``overall``, ``new``, ``recurrent``."""

    results: list[RankResult]
    groups: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def overall(self) -> dict[str, float]:
        return self.groups["overall"]

    def rows(self):
        for group, metrics in self.groups.items():
            for name, value in metrics.items():
                yield group, name, value


def _group_metrics(results: list[RankResult], k: int) -> dict[str, float]:
    out = {"count": float(len(results))}
    if not results:
        return out
    for kind in ("raw", "filtered"):
        ranks = [getattr(r, f"{kind}_rank") for r in results]
        out.update({f"{m}_{kind}": v for m, v in rank_summary(ranks, k).items()})
    return out


def build_state(params: ModelParams, train: EventLog) -> DynamicState:
    return replay(DynamicState.initial(params), params, train.events)


def evaluate_links(
    params: ModelParams,
    train: EventLog,
    test: EventLog,
    n_slides: int = 12,
    slot: str = "object",
    k: int = 10,
    eps_gap: float = EPS_GAP,
    score_clamp: float = SCORE_CLAMP,
) -> MetricsReport:
    """Rank every test event's ``slot`` entity, then apply the event."""
    if not len(test):
        raise ValueError("empty test log")
    ranker = {"object": rank_object, "subject": rank_subject}[slot]
    index = TrueTripleIndex.from_log(train)
    state = build_state(params, train)
    results = []
    for ev in test.events:
        results.append(ranker(state, params, ev, index, eps_gap, score_clamp))
        apply_event_inplace(state, params, ev)

    report = MetricsReport(results)
    partition = slide_partition(test, n_slides)
    for j, w in enumerate(partition.windows):
        report.groups[str(j)] = _group_metrics(results[w.lo:w.hi], k)
    report.groups["overall"] = _group_metrics(results, k)
    report.groups["new"] = _group_metrics([r for r in results if r.is_new_fact], k)
    report.groups["recurrent"] = _group_metrics([r for r in results if not r.is_new_fact], k)
    return report


class TimePredResult(NamedTuple):
    event: EventRecord
    predicted: float
    abs_error: float


def evaluate_time(
    params: ModelParams,
    train: EventLog,
    test: EventLog,
    offset: bool = True,
    score_clamp: float = SCORE_CLAMP,
) -> tuple[list[TimePredResult], float]:
    """Predict each test event's time as the Rayleigh mean; return errors and MAE."""
    if not len(test):
        raise ValueError("empty test log")
    state = build_state(params, train)
    out = []
    for ev in test.events:
        s, r, o, t = ev
        pred = expected_next_time(state, params, s, r, o, offset, score_clamp)
        out.append(TimePredResult(ev, pred, abs(pred - t)))
        apply_event_inplace(state, params, ev)
    return out, float(np.mean([x.abs_error for x in out]))


def mean_gap_baseline(train: EventLog, test: EventLog) -> tuple[list[float], float]:
    """Constant predictor ``t_bar + mean inter-event gap of train``.

    ``t_bar`` is tracked from the event times alone.  Returns per-event absolute
    errors and their mean.
    """
    if len(train) < 2:
        raise ValueError("need at least 2 training events")
    times = train.times
    gap = float(np.mean(np.diff(times)))
    t_prev = np.zeros(train.n_entities)
    for ev in train.events:
        t_prev[ev.subject] = t_prev[ev.object] = ev.time
    errors = []
    for s, _, o, t in test.events:
        errors.append(abs(max(t_prev[s], t_prev[o]) + gap - t))
        t_prev[s] = t_prev[o] = t
    return errors, float(np.mean(errors))
