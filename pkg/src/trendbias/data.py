"""Transaction ingestion, temporal splits and a synthetic drifting market."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from trendbias.core import ConfigError, TransactionLog, parse_timestamp

_log = logging.getLogger(__name__)

DAY = 86400


class SplitError(ValueError):
    pass


def parse_transactions(path, strict: bool = False) -> TransactionLog:
    """Read ``user<TAB>item<TAB>timestamp`` lines; ``#`` lines are comments.

    Malformed lines are skipped and counted in ``log.malformed``; with
    ``strict`` the first one raises.
    """
    users, items, times = [], [], []
    bad = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if len(parts) != 3 or not parts[0] or not parts[1]:
                    raise ValueError("expected user, item and timestamp")
                t = parse_timestamp(parts[2])
            except ValueError as exc:
                if strict:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
                bad += 1
                continue
            users.append(parts[0])
            items.append(parts[1])
            times.append(t)
    if bad:
        _log.warning("%s: skipped %d malformed line(s)", path, bad)
    return TransactionLog(users, items, np.asarray(times, dtype=np.int64), malformed=bad)


# -- splits ------------------------------------------------------------------

@dataclass
class TemporalSplit:
    train: TransactionLog
    recent: TransactionLog
    test: TransactionLog
    recent_start: int
    split: int
    test_end: int

    def history(self) -> TransactionLog:
        """Everything before the test window."""
        return self.train.concat(self.recent)


def temporal_split(log: TransactionLog, split_date, recent_days: float = 3,
                   test_days: float = 7) -> TemporalSplit:
    """train < split - recent_days <= recent < split <= test < split + test_days."""
    if recent_days <= 0:
        raise ConfigError(f"recent_days: must be > 0, got {recent_days}")
    if test_days <= 0:
        raise ConfigError(f"test_days: must be > 0, got {test_days}")
    if len(log) == 0:
        raise SplitError("cannot split an empty log")
    split = parse_timestamp(split_date) if isinstance(split_date, str) else int(split_date)
    recent_start = split - int(round(recent_days * DAY))
    test_end = split + int(round(test_days * DAY))
    out = TemporalSplit(log.window(None, recent_start), log.window(recent_start, split),
                        log.window(split, test_end), recent_start, split, test_end)
    if len(out.test) == 0:
        raise SplitError("test window is empty")
    return out


# -- synthetic drift ---------------------------------------------------------

@dataclass(frozen=True)
class DriftConfig:
    n_users: int = 2000
    m_items: int = 200
    n_days: int = 120
    churn_rate: float = 0.2
    trend_spike: float = 10.0
    n_categories: int = 10
    seed: int = 0
    purchase_rate: float = 0.15  # mean purchases per user and day
    trend_fraction: float = 0.05
    trend_lifetime: float = 21.0  # mean days an item stays trending
    category_affinity: float = 0.7
    popularity_sigma: float = 1.0
    start: str = "2020-01-01T00:00:00Z"

    def __post_init__(self):
        for name in ("n_users", "m_items", "n_days", "n_categories"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        for name in ("churn_rate", "trend_fraction", "category_affinity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name}: must lie in [0, 1], got {getattr(self, name)}")
        if self.trend_spike < 1.0:
            raise ConfigError(f"trend_spike: must be >= 1, got {self.trend_spike}")
        if self.trend_lifetime < 1.0:
            raise ConfigError(f"trend_lifetime: must be >= 1, got {self.trend_lifetime}")
        if self.purchase_rate <= 0 or self.popularity_sigma < 0:
            raise ConfigError("purchase_rate: must be > 0 and popularity_sigma >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed: must be a 64-bit unsigned int, got {self.seed}")
        parse_timestamp(self.start)

    @classmethod
    def from_dict(cls, values: dict) -> "DriftConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown drift setting")
        return cls(**values)


def _ids(prefix, n):
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{k:0{width}d}" for k in range(n)]


def generate_drift_with_taxonomy(config: DriftConfig):
    """(log, taxonomy) for a market whose item popularity drifts daily."""
    c = config
    rng = np.random.default_rng(c.seed)
    users = _ids("u", c.n_users)
    items = _ids("i", c.m_items)
    item_cat = rng.integers(c.n_categories, size=c.m_items)
    taxonomy = {items[i]: f"c{item_cat[i]}" for i in range(c.m_items)}
    by_cat = [np.flatnonzero(item_cat == k) for k in range(c.n_categories)]
    base = rng.lognormal(0.0, c.popularity_sigma, size=c.m_items)
    n_trend = max(1, int(round(c.trend_fraction * c.m_items))) if c.trend_fraction > 0 else 0
    trending = rng.choice(c.m_items, size=n_trend, replace=False)
    rate = rng.gamma(2.0, c.purchase_rate / 2.0, size=c.n_users)
    pref = rng.integers(c.n_categories, size=c.n_users)
    t0 = parse_timestamp(c.start)

    out_u, out_i, out_t = [], [], []
    for day in range(c.n_days):
        churn = rng.random(c.m_items) < c.churn_rate
        base[churn] = rng.lognormal(0.0, c.popularity_sigma, size=int(churn.sum()))
        if n_trend:
            swap = rng.random(n_trend) < 1.0 / c.trend_lifetime
            for slot in np.flatnonzero(swap):
                pool = np.setdiff1d(np.arange(c.m_items), trending)
                if len(pool):
                    trending[slot] = rng.choice(pool)
        pop = base.copy()
        pop[trending] *= c.trend_spike
        counts = rng.poisson(rate)
        buyers = np.repeat(np.arange(c.n_users), counts)
        if len(buyers) == 0:
            continue
        picks = rng.choice(c.m_items, size=len(buyers), p=pop / pop.sum())
        in_cat = rng.random(len(buyers)) < c.category_affinity
        for k in range(c.n_categories):
            sel = np.flatnonzero(in_cat & (pref[buyers] == k))
            if len(sel) and len(by_cat[k]):
                w = pop[by_cat[k]]
                picks[sel] = rng.choice(by_cat[k], size=len(sel), p=w / w.sum())
        secs = rng.integers(0, DAY, size=len(buyers))
        out_u.extend(users[b] for b in buyers)
        out_i.extend(items[p] for p in picks)
        out_t.append(t0 + day * DAY + secs)
    times = np.concatenate(out_t) if out_t else np.zeros(0, dtype=np.int64)
    return TransactionLog(out_u, out_i, times), taxonomy


def generate_drift(config: DriftConfig) -> TransactionLog:
    """Seeded synthetic purchase log; identical configs give identical logs."""
    return generate_drift_with_taxonomy(config)[0]


def top_items_by_volume(log: TransactionLog, n: int) -> list:
    counts = {}
    for i in log.items:
        counts[i] = counts.get(i, 0) + 1
    return [i for i, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]
