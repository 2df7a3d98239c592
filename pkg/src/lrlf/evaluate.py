"""Corpus BLEU, validation likelihood and baseline-relative result tables."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .model.checkpoint import ModelCheckpoint
from .model.train import make_batches, validation_nll

MAX_ORDER = 4


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    matches: tuple[int, ...]
    totals: tuple[int, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": list(self.precisions),
            "matches": list(self.matches),
            "totals": list(self.totals),
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
        }

    def __str__(self) -> str:
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        return (
            f"BLEU = {self.bleu:.2f}, {p} (BP={self.brevity_penalty:.3f}, "
            f"ratio={self.hyp_len / self.ref_len if self.ref_len else 0:.3f}, "
            f"hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def _ngrams(tokens: Sequence[Hashable], n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def tokenize(line: str, lowercase: bool = False) -> list[str]:
    return (line.lower() if lowercase else line).split()


def corpus_bleu(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]]) -> BleuReport:
    """Single-reference corpus BLEU with clipped 1-4 gram precisions, no smoothing.

    Any zero precision (including an order with no n-grams at all) makes the
    score 0; the precisions are still reported.
    """
    if len(hyps) != len(refs):
        raise EvalError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise EvalError("empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        c += len(hyp)
        r += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, rr = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, rr[g]) for g, k in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if c == 0:
        bp = 0.0
    elif c <= r:
        bp = math.exp(1.0 - r / c)
    else:
        bp = 1.0
    if min(precisions) > 0:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    else:
        bleu = 0.0
    return BleuReport(bleu, precisions, tuple(matches), tuple(totals), bp, c, r)


def text_bleu(hyp_lines: Sequence[str], ref_lines: Sequence[str], lowercase: bool = False) -> BleuReport:
    return corpus_bleu([tokenize(h, lowercase) for h in hyp_lines], [tokenize(r, lowercase) for r in ref_lines])


def validation_likelihood(ckpt: ModelCheckpoint, examples: Sequence, batch_tokens: int = 2048) -> float:
    """Mean NLL per target token; batching order does not change the value."""
    if not examples:
        raise EvalError("empty validation set")
    batches = make_batches(examples, batch_tokens, np.random.default_rng(0))
    return validation_nll(ckpt, batches)


# ---------------------------------------------------------------------------
# result tables


def format_delta(delta: float) -> str:
    d = round(delta, 2)
    if d == 0:
        d = 0.0
    return f"({'+' if d >= 0 else '-'}{abs(d):.2f})"


@dataclass
class ResultRow:
    name: str
    pivot: str | None
    scores: dict[str, float | None]
    deltas: dict[str, float | None] = field(default_factory=dict)


@dataclass
class ResultTable:
    directions: list[str]
    baseline: ResultRow
    rows: list[ResultRow]
    top: dict[str, list[tuple[str, float, float]]]

    def to_dict(self) -> dict:
        return {
            "directions": self.directions,
            "baseline": {"name": self.baseline.name, "scores": self.baseline.scores},
            "rows": [
                {"name": r.name, "pivot": r.pivot, "scores": r.scores, "deltas": r.deltas} for r in self.rows
            ],
            "top": {d: [list(x) for x in v] for d, v in self.top.items()},
        }


def _scores_of(record) -> Mapping[str, float]:
    if isinstance(record, Mapping):
        return record["test_bleu"]
    return record.test_bleu


def _name_of(record) -> str:
    return record["recipe"] if isinstance(record, Mapping) else record.recipe


def _pivot_of(record) -> str | None:
    return record.get("pivot") if isinstance(record, Mapping) else getattr(record, "pivot", None)


def emit_table(records: Sequence, baseline, top_k: int = 3) -> tuple[ResultTable, str]:
    """Score grid with deltas against ``baseline`` plus a per-direction top-k ranking.

    Records may be run records or mappings with ``recipe``, ``pivot`` and
    ``test_bleu`` (direction -> score). Directions a record does not cover
    render as ``N/A``.
    """
    base_scores = dict(_scores_of(baseline))
    directions = list(base_scores)
    rows = []
    for rec in records:
        scores = dict(_scores_of(rec))
        missing = [d for d in scores if d not in base_scores]
        if missing:
            raise EvalError(f"baseline {_name_of(baseline)!r} has no score for {missing}")
        row = ResultRow(_name_of(rec), _pivot_of(rec), {d: scores.get(d) for d in directions})
        row.deltas = {d: (None if s is None else s - base_scores[d]) for d, s in row.scores.items()}
        rows.append(row)

    top: dict[str, list[tuple[str, float, float]]] = {}
    for d in directions:
        ranked = [(r.name, r.scores[d], r.deltas[d]) for r in rows if r.scores[d] is not None]
        ranked.sort(key=lambda x: -x[1])
        top[d] = ranked[:top_k]

    table = ResultTable(directions, ResultRow(_name_of(baseline), None, base_scores), rows, top)
    return table, render_table(table)


def render_table(table: ResultTable) -> str:
    header = ["Models", "Pivot"] + table.directions
    lines = [header]
    lines.append([f"{table.baseline.name} (Baseline)", "-"] + [f"{table.baseline.scores[d]:.2f}" for d in table.directions])
    for r in table.rows:
        cells = [r.name, r.pivot or "-"]
        for d in table.directions:
            s = r.scores[d]
            cells.append("N/A" if s is None else f"{s:.2f} {format_delta(r.deltas[d])}")
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines]
    out.insert(1, "  ".join("-" * w for w in widths))
    if table.top:
        out.append("")
        out.append(f"Top {max((len(v) for v in table.top.values()), default=0)} per direction:")
        for d, ranked in table.top.items():
            items = ", ".join(f"{i + 1}. {n} {s:.2f} {format_delta(dl)}" for i, (n, s, dl) in enumerate(ranked))
            out.append(f"  {d}: {items or 'N/A'}")
    return "\n".join(out) + "\n"
