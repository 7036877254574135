"""Command-line entry point: simulate, train, eval-link, eval-time, grad-check.

Every run reads an optional ``key = value`` config file, applies command-line
overrides, and writes the fully resolved config to ``<out>/config.txt``.

Exit codes: 0 success, 1 usage/config error, 2 data or I/O error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import DataError, EventLog, read_event_log, simulate, split_by_time, write_event_log
from .evaluation import evaluate_links, evaluate_time
from .model import EPS_GAP, SCORE_CLAMP, Dims, DynamicState, ModelParams, load_params, replay, save_params
from .training import (
    NumericError,
    TrainConfig,
    finite_difference_gradients,
    relative_errors,
    train_global_bptt,
    window_loss_and_gradients,
)

log = logging.getLogger("knowevolve")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    events: str = ""
    train: str = ""
    test: str = ""
    split: float = -1.0  # < 0: no split
    checkpoint: str = ""
    out: str = "run"
    # model
    d: int = 32
    l: int = 0  # 0: same as d
    c: int = 16
    eps_gap: float = EPS_GAP
    score_clamp: float = SCORE_CLAMP
    # training
    window_steps: int = 200
    learning_rate: float = 0.0005
    clip_norm: float = 5.0
    weight_scale: float = 0.1
    max_iter: int = 1000
    survival_form: str = "absolute"
    seed: int = 0
    # evaluation
    n_slides: int = 12
    slot: str = "object"
    hits_k: int = 10
    # simulation
    n_entities: int = 10
    n_relations: int = 2
    n_events: int = 1000
    truth_scale: float = 1.0
    # gradient check
    window_events: int = 6
    history_events: int = 3
    threshold: float = 1e-4
    fd_step: float = 1e-5
    zero_params: bool = False

    @property
    def dims(self) -> Dims:
        return Dims(self.d, self.l or self.d, self.c)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            window_steps=self.window_steps, learning_rate=self.learning_rate,
            clip_norm=self.clip_norm, weight_scale=self.weight_scale, max_iter=self.max_iter,
            seed=self.seed, dims=self.dims, eps_gap=self.eps_gap, score_clamp=self.score_clamp,
            survival_form=self.survival_form,
        )

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind == "bool":
                low = raw.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                value = low in ("true", "1", "yes")
            elif kind == "int":
                value = int(raw)
            elif kind == "float":
                value = float(raw)
            else:
                value = raw.strip()
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, value)

    def validate(self) -> None:
        checks = [
            (self.d >= 1 and self.c >= 1 and self.l >= 0, "dimensions must be positive"),
            (self.window_steps >= 1, "window_steps must be >= 1"),
            (self.learning_rate > 0 and self.clip_norm > 0, "learning_rate/clip_norm must be > 0"),
            (self.weight_scale >= 0, "weight_scale must be >= 0"),
            (self.max_iter >= 0, "max_iter must be >= 0"),
            (self.n_slides >= 1, "n_slides must be >= 1"),
            (self.hits_k >= 1, "hits_k must be >= 1"),
            (self.eps_gap >= 0 and self.score_clamp > 0, "eps_gap >= 0 and score_clamp > 0"),
            (self.survival_form in ("absolute", "elapsed"), "survival_form: absolute|elapsed"),
            (self.slot in ("object", "subject"), "slot: object|subject"),
            (self.n_entities >= 2 and self.n_relations >= 1, "need >= 2 entities, >= 1 relation"),
            (self.n_events >= 1 and self.window_events >= 1, "event counts must be >= 1"),
            (self.fd_step > 0 and self.threshold > 0, "fd_step and threshold must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key = value")
        cfg.set(key.strip(), value.strip())
    return cfg


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        parse_config_text(path.read_text(encoding="utf-8"), cfg)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    return out


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} path configured")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} file {p} does not exist")
    return p


def load_splits(cfg: RunConfig, need_test: bool) -> tuple[EventLog, EventLog | None]:
    if cfg.train:
        train = read_event_log(_require(cfg.train, "train"))
        test = read_event_log(_require(cfg.test, "test")) if (need_test or cfg.test) else None
        return train, test
    events = read_event_log(_require(cfg.events, "events"))
    if cfg.split < 0:
        if need_test:
            raise ConfigError("set either train/test files or events with split")
        return events, None
    train, test = split_by_time(events, cfg.split)
    return train, test


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_simulate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    truth = ModelParams.init_random(cfg.dims, cfg.n_entities, cfg.n_relations, cfg.truth_scale,
                                    rng=cfg.seed, zero_embeddings=False)
    events = simulate(truth, cfg.n_entities, cfg.n_relations, cfg.n_events, cfg.seed,
                      score_clamp=cfg.score_clamp)
    write_event_log(events, out / "events.tsv")
    save_params(truth, out / "ground_truth.npz")
    print(f"simulated {len(events)} events over [0, {events[-1].time:.6g}] -> {out / 'events.tsv'}")
    return EXIT_OK


def _save_checkpoint(path: Path, params: ModelParams, cfg: RunConfig, opt=None) -> None:
    extra = {"config": np.array(cfg.dump())}
    if opt is not None:
        extra["opt_step"] = np.array(opt.step)
        extra.update({f"opt_m/{k}": v for k, v in opt.m.items()})
        extra.update({f"opt_v/{k}": v for k, v in opt.v.items()})
    save_params(params, path, **extra)


def cmd_train(cfg: RunConfig) -> int:
    train, _ = load_splits(cfg, need_test=False)
    out = _out_dir(cfg)
    tcfg = cfg.train_config()
    try:
        result = train_global_bptt(train, tcfg)
    except NumericError as err:
        if err.params is not None:
            _save_checkpoint(out / "checkpoint.partial.npz", err.params, cfg)
        _write_history(out / "loss_history.csv", err.history)
        raise
    _save_checkpoint(out / "checkpoint.npz", result.params, cfg, result.opt)
    _write_history(out / "loss_history.csv", result.history)
    final = result.history[-1].total if result.history else float("nan")
    print(f"trained {len(result.history)} windows; final window loss {final:.6g}")
    return EXIT_OK


def _write_history(path: Path, history) -> None:
    _write_csv(path, ["window_index", "event_nll", "survival", "total"],
               ([i, repr(h.event_nll), repr(h.survival), repr(h.total)] for i, h in enumerate(history)))


def _load_model(cfg: RunConfig) -> ModelParams:
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "checkpoint.npz"
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    params, _ = load_params(path)
    return params


def cmd_eval_link(cfg: RunConfig) -> int:
    params = _load_model(cfg)
    train, test = load_splits(cfg, need_test=True)
    out = _out_dir(cfg)
    report = evaluate_links(params, train, test, cfg.n_slides, cfg.slot, cfg.hits_k,
                            cfg.eps_gap, cfg.score_clamp)
    _write_csv(out / "metrics.csv", ["slide", "metric", "value"],
               ([g, m, repr(v)] for g, m, v in report.rows()))
    _write_csv(out / "ranks.csv",
               ["time", "subject", "relation", "object", "raw_rank", "filtered_rank", "is_new_fact"],
               ([repr(r.event.time), r.event.subject, r.event.relation, r.event.object,
                 r.raw_rank, r.filtered_rank, int(r.is_new_fact)] for r in report.results))
    o = report.overall
    print(f"MAR raw {o['mar_raw']:.4f} filtered {o['mar_filtered']:.4f} "
          f"HITS@{cfg.hits_k} raw {o[f'hits{cfg.hits_k}_raw']:.4f}")
    return EXIT_OK


def cmd_eval_time(cfg: RunConfig) -> int:
    params = _load_model(cfg)
    train, test = load_splits(cfg, need_test=True)
    out = _out_dir(cfg)
    results, mae = evaluate_time(params, train, test, score_clamp=cfg.score_clamp)
    _write_csv(out / "time_errors.csv",
               ["time", "subject", "relation", "object", "predicted", "abs_error"],
               ([repr(r.event.time), r.event.subject, r.event.relation, r.event.object,
                 repr(r.predicted), repr(r.abs_error)] for r in results))
    print(f"MAE {mae:.6g}")
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig) -> int:
    n_e = max(cfg.n_entities, 2)
    rng = np.random.default_rng(cfg.seed)
    if cfg.zero_params:
        params = ModelParams.zeros(cfg.dims, n_e, cfg.n_relations)
        truth = ModelParams.init_random(cfg.dims, n_e, cfg.n_relations, 0.6, rng=rng,
                                        zero_embeddings=False)
    else:
        params = ModelParams.init_random(cfg.dims, n_e, cfg.n_relations, 0.6, rng=rng,
                                         zero_embeddings=False)
        truth = params
    events = simulate(truth, n_e, cfg.n_relations, cfg.history_events + cfg.window_events,
                      cfg.seed).events
    state = replay(DynamicState.initial(params), params, events[:cfg.history_events])
    window = list(events[cfg.history_events:])
    kw = {"eps_gap": cfg.eps_gap, "score_clamp": cfg.score_clamp, "form": cfg.survival_form}
    _, analytic, _ = window_loss_and_gradients(window, state, params, **kw)
    numeric = finite_difference_gradients(params, state, window, cfg.fd_step, **kw)
    errors = relative_errors(analytic, numeric)
    for name, err in errors.items():
        print(f"{name:8s} {err:.3e}")
    worst = max(errors.values())
    ok = worst < cfg.threshold
    print(f"max relative error {worst:.3e} ({'below' if ok else 'above'} threshold {cfg.threshold:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval-link": cmd_eval_link,
    "eval-time": cmd_eval_time,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knowevolve", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if name == "grad-check":
            p.add_argument("--threshold", type=float)
            p.add_argument("--zero-params", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "grad-check":
            if args.threshold is not None:
                cfg.threshold = args.threshold
            if args.zero_params:
                cfg.zero_params = True
            cfg.validate()
        return COMMANDS[args.command](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
