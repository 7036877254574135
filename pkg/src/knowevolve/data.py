"""Temporal knowledge-graph event streams: parsing, ordering, splitting, simulation.

An event is a quadruple ``(subject, relation, object, time)`` with integer ids
and a real-valued time in hours.  Event files are UTF-8, one event per line,
tab-separated::

    subject<TAB>relation<TAB>object<TAB>time

Lines starting with ``#`` are comments.  A serialized log stores dense integer
ids in the event file and the id-to-name maps in a sidecar ``<file>.vocab``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, NamedTuple, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import ModelParams


class DataError(ValueError):
    """Raised for malformed or invalid event data."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EventRecord(NamedTuple):
    subject: int
    relation: int
    object: int
    time: float


@dataclass(frozen=True)
class EventLog:
    """A time-ordered, duplicate-free stream of events over fixed vocabularies."""

    events: tuple[EventRecord, ...]
    n_entities: int
    n_relations: int
    entity_names: tuple[str, ...] = ()
    relation_names: tuple[str, ...] = ()
    dropped_duplicates: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.entity_names:
            object.__setattr__(self, "entity_names", tuple(str(i) for i in range(self.n_entities)))
        if not self.relation_names:
            object.__setattr__(self, "relation_names", tuple(str(i) for i in range(self.n_relations)))
        validate(self)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, idx):
        return self.events[idx]

    @property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events], dtype=float)

    def with_events(self, events: Iterable[EventRecord]) -> "EventLog":
        """Same vocabularies, different events."""
        return replace(self, events=tuple(events), dropped_duplicates=0)

    def triples(self) -> set[tuple[int, int, int]]:
        return {(e.subject, e.relation, e.object) for e in self.events}


def validate(log: EventLog) -> None:
    """Check ordering, id bounds, self-loops and duplicates; raise DataError."""
    if len(log.entity_names) != log.n_entities or len(log.relation_names) != log.n_relations:
        raise DataError("vocabulary size does not match declared counts")
    seen = set()
    prev = -math.inf
    for i, ev in enumerate(log.events):
        s, r, o, t = ev
        if not (0 <= s < log.n_entities and 0 <= o < log.n_entities):
            raise DataError(f"event {i}: entity id out of range")
        if not 0 <= r < log.n_relations:
            raise DataError(f"event {i}: relation id out of range")
        if s == o:
            raise DataError(f"event {i}: self-loop on entity {s}")
        if not (t >= 0 and math.isfinite(t)):
            raise DataError(f"event {i}: invalid time {t}")
        if t < prev:
            raise DataError(f"event {i}: times not non-decreasing")
        if ev in seen:
            raise DataError(f"event {i}: duplicate quadruple")
        seen.add(ev)
        prev = t


class _Vocab:
    def __init__(self, names: Sequence[str] | None = None):
        self.names: list[str] = list(names or [])
        self.index = {n: i for i, n in enumerate(self.names)}
        self.frozen = names is not None

    def lookup(self, token: str, lineno: int, kind: str) -> int:
        if token in self.index:
            return self.index[token]
        if self.frozen:
            raise DataError(f"unknown {kind} {token!r}", lineno)
        self.index[token] = len(self.names)
        self.names.append(token)
        return self.index[token]


def _all_ints(tokens: Iterable[str]) -> bool:
    return all(t.isdigit() for t in tokens)


def parse_event_log(
    lines: Iterable[str],
    has_header: bool = False,
    entity_names: Sequence[str] | None = None,
    relation_names: Sequence[str] | None = None,
) -> EventLog:
    """Parse tab-separated quadruples into a validated, time-sorted EventLog.

    Entity and relation tokens that are all non-negative integers are used as
    ids directly; otherwise tokens are mapped to dense ids in order of first
    appearance.  If ``entity_names``/``relation_names`` are given, tokens are
    integer ids into those vocabularies.  Exact duplicate quadruples are
    dropped (first occurrence kept) and counted in ``dropped_duplicates``.
    Time ties keep file order.
    """
    rows: list[tuple[int, str, str, str, float]] = []
    header_skipped = not has_header
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if not header_skipped:
            header_skipped = True
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            fields = line.split()
        if len(fields) != 4:
            raise DataError(f"expected 4 fields, got {len(fields)}", lineno)
        s, r, o, t_raw = (f.strip() for f in fields)
        try:
            t = float(t_raw)
        except ValueError:
            raise DataError(f"unparsable time {t_raw!r}", lineno) from None
        if not math.isfinite(t):
            raise DataError(f"non-finite time {t_raw!r}", lineno)
        if t < 0:
            raise DataError(f"negative time {t}", lineno)
        if s == o:
            raise DataError(f"self-loop on {s!r}", lineno)
        rows.append((lineno, s, r, o, t))

    ent_tokens = [x for row in rows for x in (row[1], row[3])]
    rel_tokens = [row[2] for row in rows]

    if entity_names is None and _all_ints(ent_tokens):
        n_e = max((int(x) for x in ent_tokens), default=-1) + 1
        entity_names = [str(i) for i in range(n_e)]
    if relation_names is None and _all_ints(rel_tokens):
        n_r = max((int(x) for x in rel_tokens), default=-1) + 1
        relation_names = [str(i) for i in range(n_r)]

    # integer tokens index a known vocabulary; string tokens build one
    ent_by_id = entity_names is not None
    rel_by_id = relation_names is not None
    ents = _Vocab(entity_names)
    rels = _Vocab(relation_names)

    def to_id(tok: str, vocab: _Vocab, by_id: bool, lineno: int, kind: str) -> int:
        if by_id:
            if not tok.isdigit() or int(tok) >= len(vocab.names):
                raise DataError(f"{kind} id {tok!r} out of range", lineno)
            return int(tok)
        return vocab.lookup(tok, lineno, kind)

    events: list[EventRecord] = []
    seen: set[EventRecord] = set()
    dropped = 0
    for lineno, s, r, o, t in rows:
        ev = EventRecord(
            to_id(s, ents, ent_by_id, lineno, "entity"),
            to_id(r, rels, rel_by_id, lineno, "relation"),
            to_id(o, ents, ent_by_id, lineno, "entity"),
            t,
        )
        if ev.subject == ev.object:
            raise DataError(f"self-loop on entity {ev.subject}", lineno)
        if ev in seen:
            dropped += 1
            continue
        seen.add(ev)
        events.append(ev)

    events.sort(key=lambda e: e.time)
    return EventLog(
        events=tuple(events),
        n_entities=len(ents.names),
        n_relations=len(rels.names),
        entity_names=tuple(ents.names),
        relation_names=tuple(rels.names),
        dropped_duplicates=dropped,
    )


def vocab_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".vocab")


def format_events(log: EventLog) -> str:
    return "".join(f"{e.subject}\t{e.relation}\t{e.object}\t{e.time!r}\n" for e in log.events)


def format_vocab(log: EventLog) -> str:
    out = ["# entities\n"]
    out += [f"{i}\t{n}\n" for i, n in enumerate(log.entity_names)]
    out.append("# relations\n")
    out += [f"{i}\t{n}\n" for i, n in enumerate(log.relation_names)]
    return "".join(out)


def parse_vocab(lines: Iterable[str]) -> tuple[list[str], list[str]]:
    sections: dict[str, list[str]] = {"entities": [], "relations": []}
    current = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            current = line.lstrip("#").strip()
            if current not in sections:
                raise DataError(f"unknown vocabulary section {current!r}", lineno)
            continue
        if current is None:
            raise DataError("vocabulary entry before section header", lineno)
        idx, _, name = line.partition("\t")
        if not idx.isdigit() or int(idx) != len(sections[current]):
            raise DataError(f"vocabulary ids must be dense and ordered, got {idx!r}", lineno)
        sections[current].append(name)
    return sections["entities"], sections["relations"]


def write_event_log(log: EventLog, path: str | Path) -> None:
    """Write the event file and its ``.vocab`` sidecar."""
    path = Path(path)
    path.write_text(format_events(log), encoding="utf-8")
    vocab_path(path).write_text(format_vocab(log), encoding="utf-8")


def read_event_log(path: str | Path, has_header: bool = False) -> EventLog:
    """Read an event file, using its ``.vocab`` sidecar when one exists."""
    path = Path(path)
    ent_names = rel_names = None
    side = vocab_path(path)
    if side.exists():
        with side.open(encoding="utf-8") as fh:
            ent_names, rel_names = parse_vocab(fh)
    with path.open(encoding="utf-8") as fh:
        return parse_event_log(fh, has_header, ent_names, rel_names)


def split_by_time(log: EventLog, boundary: float) -> tuple[EventLog, EventLog]:
    """Events strictly before ``boundary`` go to train, the rest to test."""
    t_max = log.events[-1].time if log.events else 0.0
    if not 0 <= boundary <= t_max:
        raise ValueError(f"boundary {boundary} outside [0, {t_max}]")
    k = sum(1 for e in log.events if e.time < boundary)
    return log.with_events(log.events[:k]), log.with_events(log.events[k:])


class Window(NamedTuple):
    start: float
    end: float
    lo: int
    hi: int  # exclusive


@dataclass(frozen=True)
class SlidePartition:
    windows: tuple[Window, ...]

    def __len__(self):
        return len(self.windows)

    def slide_of(self) -> list[int]:
        """Slide index for every event position."""
        out = []
        for k, w in enumerate(self.windows):
            out += [k] * (w.hi - w.lo)
        return out


def slide_partition(test: EventLog, n_slides: int = 12) -> SlidePartition:
    """Cut the test span into ``n_slides`` windows of equal duration.

    Windows are half-open except the last, which includes the final time.
    """
    if n_slides < 1:
        raise ValueError("n_slides must be >= 1")
    if not test.events:
        raise ValueError("cannot partition an empty log")
    times = test.times
    t_min, t_max = float(times[0]), float(times[-1])
    width = (t_max - t_min) / n_slides
    if width > 0:
        idx = np.minimum(((times - t_min) / width).astype(int), n_slides - 1)
    else:
        idx = np.zeros(len(times), dtype=int)
    bounds = np.searchsorted(idx, np.arange(n_slides + 1), side="left")
    windows = tuple(
        Window(t_min + k * width, t_max if k == n_slides - 1 else t_min + (k + 1) * width,
               int(bounds[k]), int(bounds[k + 1]))
        for k in range(n_slides)
    )
    return SlidePartition(windows)


def simulate(
    params: "ModelParams",
    n_entities: int,
    n_relations: int,
    n_events: int,
    seed: int,
    **model_kw,
) -> EventLog:
    """Sample an event stream from the model by competing Rayleigh risks.

    Every dimension (s, r, o) with s != o carries intensity exp(g)(t - t_bar).
    Given survival to the current time ``now``, its next event time solves
    ``exp(g) ((t - t_bar)^2 - (now - t_bar)^2) / 2 = -ln u``, which reduces to
    ``t_bar + sqrt(-2 ln u / exp(g))`` when ``now == t_bar``.  The earliest
    candidate fires, the two entities update, and all clocks are redrawn.
    Cost is O(n_e^2 n_r) per event.
    """
    from .model import DynamicState, apply_event_inplace, clamp_score

    if n_entities < 2:
        raise ValueError("need at least 2 entities")
    if n_events < 1:
        raise ValueError("n_events must be >= 1")
    if params.n_entities != n_entities or params.n_relations != n_relations:
        raise ValueError("params dimensioned for a different vocabulary")

    rng = np.random.default_rng(seed)
    state = DynamicState.initial(params)
    clamp = model_kw.get("score_clamp")
    off_diag = ~np.eye(n_entities, dtype=bool)
    now = 0.0
    events = []
    for _ in range(n_events):
        v = state.v
        g = np.einsum("id,rde,je->rij", v, params.R, v)
        rate = np.exp(clamp_score(g) if clamp is None else clamp_score(g, clamp))
        tp = state.t_prev
        t_bar = np.maximum(tp[:, None], tp[None, :])
        u = 1.0 - rng.random(g.shape)  # (0, 1]
        elapsed = now - t_bar
        cand = t_bar + np.sqrt(elapsed * elapsed - 2.0 * np.log(u) / rate)
        cand = np.where(off_diag[None], cand, np.inf)
        r, s, o = np.unravel_index(np.argmin(cand), cand.shape)
        now = max(float(cand[r, s, o]), now)
        ev = EventRecord(int(s), int(r), int(o), now)
        events.append(ev)
        apply_event_inplace(state, params, ev)
    return EventLog(tuple(events), n_entities, n_relations)
