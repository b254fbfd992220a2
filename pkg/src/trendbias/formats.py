"""Tab-separated file formats for transactions, scores, biases and reports."""

from __future__ import annotations

import hashlib
import json
import math
from typing import Iterable

from trendbias.core import NEG_INF, TransactionLog, format_timestamp

NEG_INF_TOKEN = "-inf"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _header(fh, meta: dict | None):
    for key, value in (meta or {}).items():
        fh.write(f"# {key}={value}\n")


def _open_w(path):
    return open(path, "w", encoding="utf-8", newline="\n")


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if line and not line.startswith("#"):
                yield lineno, line.split("\t")


def read_meta(path) -> dict:
    """``# key=value`` header lines as a dict."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                out[key] = value
    return out


def write_transactions(log: TransactionLog, path, meta: dict | None = None) -> None:
    with _open_w(path) as fh:
        _header(fh, meta)
        for u, i, t in log:
            fh.write(f"{u}\t{i}\t{format_timestamp(t)}\n")


def format_score(x: float) -> str:
    return f"{x:.9g}"


def write_scores(triples: Iterable[tuple], path, meta: dict | None = None) -> None:
    """One ``user<TAB>item<TAB>score`` line per triple."""
    with _open_w(path) as fh:
        _header(fh, meta)
        for u, i, s in triples:
            fh.write(f"{u}\t{i}\t{format_score(s)}\n")


def read_scores(path) -> list:
    out = []
    for lineno, parts in _data_lines(path):
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected user, item and score")
        score = float(parts[2])
        if not math.isfinite(score):
            raise ValueError(f"{path}:{lineno}: score must be finite")
        out.append((parts[0], parts[1], score))
    return out


def format_bias(b: float) -> str:
    return NEG_INF_TOKEN if b <= NEG_INF else repr(float(b))


def parse_bias(text: str) -> float:
    if text == NEG_INF_TOKEN:
        return NEG_INF
    b = float(text)
    if not math.isfinite(b):
        raise ValueError(f"bias must be finite or {NEG_INF_TOKEN!r}, got {text!r}")
    return b


def write_bias(item_ids, bias, path, meta: dict | None = None) -> None:
    with _open_w(path) as fh:
        _header(fh, meta)
        for item, b in zip(item_ids, bias):
            fh.write(f"{item}\t{format_bias(float(b))}\n")


def read_bias(path) -> dict:
    out = {}
    for lineno, parts in _data_lines(path):
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected item and bias")
        try:
            out[parts[0]] = parse_bias(parts[1])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return format_score(v)
    return str(v)


def write_table(rows: list, columns: list, path, meta: dict | None = None) -> None:
    """Rows of dicts as TSV with a column header; ``None`` becomes ``NA``."""
    with _open_w(path) as fh:
        _header(fh, meta)
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(row.get(c)) for c in columns) + "\n")


def read_table(path) -> list:
    rows = list(_data_lines(path))
    if not rows:
        return []
    columns = rows[0][1]
    return [dict(zip(columns, parts)) for _, parts in rows[1:]]


def write_json(doc, path) -> None:
    with _open_w(path) as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
