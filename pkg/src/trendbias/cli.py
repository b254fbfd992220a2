"""Command-line entry point: ``trendbias <command> [options]``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then command-line flags. Outputs go to ``--out`` (default
``$TRENDBIAS_OUT`` or ``./trendbias-out``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from trendbias import __version__, formats, metrics
from trendbias.core import (
    NEG_INF,
    ConfigError,
    IdMap,
    RelevanceSet,
    ScoreStore,
    TransactionLog,
    format_timestamp,
    parse_timestamp,
)
from trendbias.data import (
    DAY,
    DriftConfig,
    SplitError,
    generate_drift_with_taxonomy,
    parse_transactions,
    temporal_split,
)
from trendbias.metrics import MetricSpec
from trendbias.models import (
    dump_markov,
    fit_markov,
    fit_popularity,
    load_markov,
    predict_markov,
    read_taxonomy,
    write_taxonomy,
)
from trendbias.optimizer import OptimizerConfig, learn_biases
from trendbias.strategies import KINDS, Experiment, StrategyError, StrategySpec

_log = logging.getLogger("trendbias")

OUT_ENV = "TRENDBIAS_OUT"
DEFAULT_OUT = "trendbias-out"
DEFAULT_LEVELS = (10, 20, 50, 100, 200, 500, 1000)


@dataclass
class RunConfig:
    command: str = ""
    transactions: str | None = None
    taxonomy: str | None = None
    scores: str | None = None
    bias: str | None = None
    relevance: str | None = None
    warm_start: str | None = None
    model: str | None = None
    base: str = "markov"
    out: str | None = None
    split_date: str | None = None
    recent_days: float = 3.0
    test_days: float = 7.0
    k: int = 10
    capacity: int | None = None
    metric: str = "ACC"
    max_cycles: int = 2
    min_items_changed_fraction: float = 0.0
    candidate_top_predicted: int | None = None
    candidate_top_recent: int | None = None
    tie_epsilon: float = 1e-9
    prune: bool = True
    strategies: list = field(default_factory=lambda: list(KINDS))
    beta: float = 60.0
    context_size: int = 3
    levels: list = field(default_factory=lambda: list(DEFAULT_LEVELS))
    seed: int = 0
    drift: dict = field(default_factory=dict)
    strict: bool = False

    def validate(self):
        if self.k < 1:
            raise ConfigError(f"k: must be >= 1, got {self.k}")
        if self.capacity is not None and self.capacity < self.k:
            raise ConfigError(f"capacity: N={self.capacity} must be >= k={self.k}")
        if self.recent_days <= 0:
            raise ConfigError(f"recent_days: must be > 0, got {self.recent_days}")
        if self.test_days <= 0:
            raise ConfigError(f"test_days: must be > 0, got {self.test_days}")
        if self.beta <= 0:
            raise ConfigError(f"beta: must be > 0, got {self.beta}")
        if self.context_size < 1:
            raise ConfigError(f"context_size: must be >= 1, got {self.context_size}")
        self.metric_spec()
        self.optimizer_config()
        for s in self.strategies:
            StrategySpec(s, base=self.base)
        if not self.levels or any(b < a for a, b in zip(self.levels, self.levels[1:])) \
                or min(self.levels) < 1:
            raise ConfigError("levels: must be positive and ascending")
        if self.split_date is not None:
            try:
                parse_timestamp(self.split_date)
            except ValueError:
                raise ConfigError(f"split_date: not an ISO-8601 time: {self.split_date!r}")
        if self.command == "generate":
            self.drift_config()

    def metric_spec(self) -> MetricSpec:
        spec = MetricSpec.parse(self.metric, self.k)
        return MetricSpec(spec.kind, self.k) if "@" not in self.metric else spec

    def optimizer_config(self, warm=None) -> OptimizerConfig:
        return OptimizerConfig(
            metric=self.metric_spec(), max_cycles=self.max_cycles,
            min_items_changed_fraction=self.min_items_changed_fraction,
            candidate_top_predicted=self.candidate_top_predicted,
            candidate_top_recent=self.candidate_top_recent, tie_epsilon=self.tie_epsilon,
            warm_start_bias=warm, prune=self.prune)

    def drift_config(self) -> DriftConfig:
        values = dict(self.drift)
        values.setdefault("seed", self.seed)
        return DriftConfig.from_dict(values)

    def out_dir(self) -> Path:
        path = Path(self.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def public(self) -> dict:
        """Settings that shape the outputs (paths and command excluded)."""
        skip = {"out", "command"}
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if f.name not in skip}

    def meta(self, **extra) -> dict:
        out = {"tool": f"trendbias {__version__}", "command": self.command,
               "config_hash": formats.config_hash(self.public()), "seed": self.seed}
        out.update(extra)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_DRIFT_FLAGS = ("n_users", "m_items", "n_days", "churn_rate", "trend_spike", "n_categories",
                "purchase_rate")


def _csv(kind):
    def parse(text):
        return [kind(x) for x in text.split(",") if x]
    return parse


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trendbias", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"trendbias {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        _add(p, "--config", help="JSON file with settings; flags override it")
        _add(p, "--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        _add(p, "--seed", type=int)
        _add(p, "-v", "--verbose", action="store_true")

    def split_flags(p):
        _add(p, "--split-date", dest="split_date", help="first instant of the test window")
        _add(p, "--recent-days", dest="recent_days", type=float)
        _add(p, "--test-days", dest="test_days", type=float)

    def opt_flags(p):
        _add(p, "--metric", help="ACC, MAP or NDCG, optionally with @k")
        _add(p, "-k", dest="k", type=int)
        _add(p, "--capacity", type=int, help="scores kept per user (default 5k)")
        _add(p, "--max-cycles", dest="max_cycles", type=int)
        _add(p, "--min-items-changed-fraction", dest="min_items_changed_fraction", type=float)
        _add(p, "--candidate-top-predicted", dest="candidate_top_predicted", type=int)
        _add(p, "--candidate-top-recent", dest="candidate_top_recent", type=int)
        _add(p, "--tie-epsilon", dest="tie_epsilon", type=float)
        _add(p, "--no-prune", dest="prune", action="store_const", const=False)

    p = sub.add_parser("generate", help="write a synthetic drifting transaction log")
    common(p)
    for name in _DRIFT_FLAGS:
        kind = float if name in ("churn_rate", "trend_spike", "purchase_rate") else int
        _add(p, "--" + name.replace("_", "-"), dest="drift_" + name, type=kind)

    p = sub.add_parser("fit", help="fit a base model on the training window")
    common(p)
    split_flags(p)
    _add(p, "--transactions", required=False)
    _add(p, "--base", choices=("markov", "popularity"))

    p = sub.add_parser("predict", help="score users with a fitted Markov model")
    common(p)
    split_flags(p)
    _add(p, "--transactions")
    _add(p, "--model")
    _add(p, "-k", dest="k", type=int)
    _add(p, "--capacity", type=int)
    _add(p, "--context-size", dest="context_size", type=int)

    p = sub.add_parser("learn-bias", help="learn item biases from scores and relevance")
    common(p)
    opt_flags(p)
    _add(p, "--scores")
    _add(p, "--relevance", help="transactions whose (user, item) pairs are relevant")
    _add(p, "--warm-start", dest="warm_start", help="bias file to start from")

    p = sub.add_parser("evaluate", help="ACC/MAP/NDCG of scores (+ biases) on relevance")
    common(p)
    _add(p, "--scores")
    _add(p, "--bias")
    _add(p, "--relevance")
    _add(p, "-k", dest="k", type=int)
    _add(p, "--capacity", type=int)

    p = sub.add_parser("compare", help="run strategies on a temporal split and report lift")
    common(p)
    split_flags(p)
    opt_flags(p)
    _add(p, "--transactions")
    _add(p, "--taxonomy")
    _add(p, "--base", choices=("markov", "category", "popularity"))
    _add(p, "--strategies", type=_csv(str))
    _add(p, "--beta", type=float)
    _add(p, "--context-size", dest="context_size", type=int)
    _add(p, "--levels", type=_csv(int))
    _add(p, "--strict", action="store_const", const=True)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be an object")
        for key, value in doc.items():
            if key not in _FIELDS or key == "command":
                raise ConfigError(f"{key}: unknown setting")
            setattr(cfg, key, value)
    drift = dict(cfg.drift)
    for key, value in vars(args).items():
        if value is None or key in ("config", "command", "verbose"):
            continue
        if key.startswith("drift_"):
            drift[key[len("drift_"):]] = value
        elif key in _FIELDS:
            setattr(cfg, key, value)
    cfg.drift = drift
    if isinstance(cfg.strategies, str):
        cfg.strategies = [s for s in cfg.strategies.split(",") if s]
    cfg.strategies = [s.upper() for s in cfg.strategies]
    cfg.validate()
    return cfg


def _need(cfg: RunConfig, *names):
    for name in names:
        value = getattr(cfg, name)
        if value is None:
            raise ConfigError(f"{name}: required for {cfg.command}")
        if not Path(value).is_file():
            raise ConfigError(f"{name}: no such file {value!r}")


def _read_log(cfg: RunConfig, path) -> TransactionLog:
    log = parse_transactions(path, strict=cfg.strict)
    if log.malformed:
        print(f"warning: {path}: skipped {log.malformed} malformed line(s)", file=sys.stderr)
    return log


def _default_split(log: TransactionLog, test_days: float) -> int:
    """Start of the last ``test_days`` whole days of the log."""
    last_day_end = (int(log.times[-1]) // DAY + 1) * DAY
    return last_day_end - int(round(test_days * DAY))


def _split_time(cfg: RunConfig, log: TransactionLog) -> int:
    if cfg.split_date is not None:
        return parse_timestamp(cfg.split_date)
    if len(log) == 0:
        raise ConfigError("transactions: log is empty")
    return _default_split(log, cfg.test_days)


# -- commands ----------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    dc = cfg.drift_config()
    log, taxonomy = generate_drift_with_taxonomy(dc)
    out = cfg.out_dir()
    meta = cfg.meta(**{f"drift.{k}": v for k, v in dataclasses.asdict(dc).items()})
    formats.write_transactions(log, out / "transactions.tsv", meta)
    write_taxonomy(taxonomy, out / "taxonomy.tsv")
    print(f"generated {len(log)} transactions, {dc.n_users} users, {dc.m_items} items "
          f"-> {out / 'transactions.tsv'}")
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    _need(cfg, "transactions")
    log = _read_log(cfg, cfg.transactions)
    end = _split_time(cfg, log) if len(log) else None
    train = log.window(None, end)
    out = cfg.out_dir()
    if len(train) == 0:
        print("warning: training window is empty; writing an empty model", file=sys.stderr)
    if cfg.base == "popularity":
        pop = fit_popularity(train, reference_time=end)
        path = out / "popularity.tsv"
        rows = sorted(pop.scores.items(), key=lambda kv: (-kv[1], kv[0]))
        formats.write_scores((("*", i, s) for i, s in rows), path, cfg.meta())
        print(f"fit popularity: {len(rows)} items -> {path}")
        return 0
    model = fit_markov(train, reference_time=end)
    path = out / "model.tsv"
    dump_markov(model, path)
    print(f"fit markov: {model.m} items, {len(model.uni_keys)} item transitions, "
          f"{len(model.pair_keys)} pair transitions -> {path}")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    _need(cfg, "transactions", "model")
    log = _read_log(cfg, cfg.transactions)
    model = load_markov(cfg.model)
    end = _split_time(cfg, log) if len(log) else None
    history = log.window(None, end)
    n = cfg.capacity or 5 * cfg.k
    pop = fit_popularity(history, reference_time=end)
    hist = {}
    for u, i in zip(history.users, history.items):
        hist.setdefault(u, []).append(i)
    users = sorted(set(history.users) | set(log.window(end, None).users))
    rows = []
    for u in users:
        pred = predict_markov(model, hist.get(u, []), n, cfg.context_size) or pop.predict(n)
        rows.extend((u, i, s) for i, s in pred)
    path = cfg.out_dir() / "scores.tsv"
    formats.write_scores(rows, path, cfg.meta())
    print(f"predicted {len(rows)} scores for {len(users)} users -> {path}")
    return 0


def _load_problem(cfg: RunConfig, bias_path=None):
    """Scores, relevance and optional bias on one shared id space."""
    triples = formats.read_scores(cfg.scores)
    rel_log = _read_log(cfg, cfg.relevance)
    bias_in = formats.read_bias(bias_path) if bias_path else {}
    users = IdMap.from_ids([u for u, _, _ in triples] + list(rel_log.users))
    items = IdMap.from_ids([i for _, i, _ in triples] + list(rel_log.items))
    unknown = sorted(set(bias_in) - set(items))
    if unknown:
        shown = ", ".join(unknown[:5]) + (" ..." if len(unknown) > 5 else "")
        raise ConfigError(f"bias: {len(unknown)} item id(s) unknown to scores and "
                          f"relevance: {shown}")
    cap = cfg.capacity or 5 * cfg.k
    store = ScoreStore.from_triples([users.index(u) for u, _, _ in triples],
                                    [items.index(i) for _, i, _ in triples],
                                    [s for _, _, s in triples], len(users), len(items), cap)
    rel = RelevanceSet.from_pairs([users.index(u) for u in rel_log.users],
                                  [items.index(i) for i in rel_log.items], len(users),
                                  len(items))
    bias = np.zeros(len(items))
    for item, b in bias_in.items():
        bias[items.index(item)] = b
    return store, rel, bias, items


def cmd_learn_bias(cfg: RunConfig) -> int:
    _need(cfg, "scores", "relevance")
    if cfg.warm_start is not None:
        _need(cfg, "warm_start")
    store, rel, warm, items = _load_problem(cfg, cfg.warm_start)
    metric = cfg.metric_spec()
    opt = cfg.optimizer_config(warm if cfg.warm_start else None)
    res = learn_biases(store, rel, opt)
    out = cfg.out_dir()
    meta = cfg.meta(metric=str(metric), path="rank" if metric.kind != "ACC" else "acc",
                    status=res.status)
    formats.write_bias(items, res.bias, out / "bias.tsv", meta)
    rows = [{"cycle": 0, "items_changed": 0, "objective": res.objective_start}]
    rows += [{"cycle": c.cycle, "items_changed": c.items_changed, "objective": c.objective}
             for c in res.cycles]
    formats.write_table(rows, ["cycle", "items_changed", "objective"], out / "progress.tsv",
                        meta)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{metric}: {res.objective_start:.6f} -> {res.objective:.6f} over "
          f"{len(res.cycles)} cycle(s), {res.accepted_updates} update(s), "
          f"{len(res.pruned)} pruned ({res.status}) -> {out / 'bias.tsv'}")
    return 0


def _report_rows(report: metrics.EvalReport, label=None):
    return [{"strategy": label, "metric": f"{kind}@{report.k}", "value": value}
            for kind, value in report.values.items()]


def cmd_evaluate(cfg: RunConfig) -> int:
    _need(cfg, "scores", "relevance")
    if cfg.bias is not None:
        _need(cfg, "bias")
    store, rel, bias, _ = _load_problem(cfg, cfg.bias)
    report = metrics.evaluate(store, bias, rel, cfg.k)
    out = cfg.out_dir()
    meta = cfg.meta(users=report.n_users)
    formats.write_table(_report_rows(report), ["metric", "value"], out / "report.tsv", meta)
    formats.write_json({"k": report.k, "n_users": report.n_users, "values": report.values,
                        "meta": meta}, out / "report.json")
    for kind, value in report.values.items():
        print(f"{kind}@{report.k}\t{value:.6f}")
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    _need(cfg, "transactions")
    log = _read_log(cfg, cfg.transactions)
    taxonomy = read_taxonomy(cfg.taxonomy) if cfg.taxonomy else {}
    if cfg.base == "category" and not taxonomy:
        raise ConfigError("taxonomy: required for the category base model")
    split = temporal_split(log, _split_time(cfg, log), cfg.recent_days, cfg.test_days)
    exp = Experiment(split, cfg.k, cfg.capacity, cfg.optimizer_config(), taxonomy,
                     base=cfg.base, context_size=cfg.context_size)
    rel = exp.test_relevance()
    test_counts = exp.item_frequency(split.test)
    out = cfg.out_dir()
    meta = cfg.meta(split=format_timestamp(split.split),
                    recent_start=format_timestamp(split.recent_start),
                    test_end=format_timestamp(split.test_end))
    strategies = list(cfg.strategies)
    if "LONG" not in strategies:
        strategies.insert(0, "LONG")
    results, reports, diag = {}, {}, {}
    for kind in strategies:
        spec = StrategySpec(kind, base=cfg.base, recent_days=cfg.recent_days, beta=cfg.beta,
                            context_size=cfg.context_size)
        res = exp.run(spec)
        results[kind] = res
        reports[kind] = metrics.evaluate(res.store, res.bias, rel, cfg.k)
        state = metrics.recommend(res.store, res.bias, cfg.k, users=rel.users)
        pred = metrics.prediction_counts(state, len(exp.items))
        diag[kind] = {
            "kl": metrics.kl_divergence_smoothed(test_counts, pred),
            "overlap": metrics.top_popular_overlap(test_counts, pred, cfg.levels),
        }
        if kind in ("BIAS", "TRUNCATE", "DISTRDIFF"):
            formats.write_bias(exp.items, res.bias, out / f"bias_{kind}.tsv", meta)
        for note in res.notes:
            print(f"warning: {kind}: {note}", file=sys.stderr)

    base = reports["LONG"].values
    summary, plot, overlap = [], [], []
    for kind in strategies:
        rep = reports[kind]
        row = {"strategy": kind, "users": rep.n_users, "kl": diag[kind]["kl"]}
        for m, value in rep.values.items():
            lift = metrics.lift(value, base[m])
            row[f"{m}@{cfg.k}"] = value
            row[f"lift_{m}@{cfg.k}"] = lift
            plot.append({"metric": f"{m}@{cfg.k}", "strategy": kind, "value": value,
                         "lift": lift})
        summary.append(row)
        for o in diag[kind]["overlap"]:
            overlap.append({"strategy": kind, "level": o.level, "overlap": o.overlap,
                            "clamped_to": o.clamped_to})
    kinds = list(metrics.KINDS)
    cols = (["strategy", "users"] + [f"{m}@{cfg.k}" for m in kinds]
            + [f"lift_{m}@{cfg.k}" for m in kinds] + ["kl"])
    formats.write_table(summary, cols, out / "compare.tsv", meta)
    formats.write_table(plot, ["metric", "strategy", "value", "lift"], out / "plot.tsv", meta)
    formats.write_table(overlap, ["strategy", "level", "overlap", "clamped_to"],
                        out / "overlap.tsv", meta)
    formats.write_json({"meta": meta, "summary": summary, "overlap": overlap},
                       out / "compare.json")
    width = max(len(k) for k in strategies)
    print(f"{'strategy':<{width}}  " + "  ".join(f"{m}@{cfg.k:<3} lift%  " for m in kinds)
          + "  KL")
    for row in summary:
        cells = []
        for m in kinds:
            lift = row[f"lift_{m}@{cfg.k}"]
            cells.append(f"{row[f'{m}@{cfg.k}']:.4f} {'NA' if lift is None else f'{lift:+.2f}':>7}")
        print(f"{row['strategy']:<{width}}  " + "  ".join(cells) + f"  {row['kl']:.4f}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "learn-bias": cmd_learn_bias,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, SplitError, StrategyError, metrics.EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
