"""Incremental and non-incremental evaluation.

Incremental metrics operate on prefix timelines (the committed label rows
after every step) and are measured against the final row, not the gold
labels. Corpus figures are per-sentence values averaged over sentences.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

from .corpus import is_iob

Rows = Sequence[Sequence[str]]


def _rows(timeline) -> Rows:
    rows = getattr(timeline, "rows", timeline)
    if len(rows) == 0:
        raise ValueError("empty timeline")
    return rows


def substitutions(timeline) -> int:
    """Positions present in two consecutive rows whose label changed, summed."""
    rows = _rows(timeline)
    total = 0
    for prev, cur in zip(rows, rows[1:]):
        total += sum(1 for a, b in zip(prev, cur) if a != b)
    return total


def edit_overhead(timeline) -> float:
    """Unnecessary edits over all edits: S / (n + S), one necessary addition per final label."""
    rows = _rows(timeline)
    n = len(rows[-1])
    s = substitutions(rows)
    return s / (n + s) if n + s else 0.0


def correction_time(timeline) -> float:
    """Mean over tokens of (FC - FD) / (T - FD): FD is the step a token's label
    first appears, FC the step from which it never changes again, T the last step."""
    rows = _rows(timeline)
    final = rows[-1]
    t_last = len(rows)
    if not final:
        return 0.0
    total = 0.0
    for i, label in enumerate(final):
        fd = next(t for t, row in enumerate(rows, 1) if len(row) > i)
        fc = fd
        for t in range(t_last, fd - 1, -1):
            if rows[t - 1][i] != label:
                fc = t + 1
                break
        else:
            fc = fd
        total += (fc - fd) / (t_last - fd) if t_last > fd else 0.0
    return total / len(final)


def relative_correctness(timeline) -> float:
    """Share of (non-empty) rows that are prefixes of the final row."""
    rows = _rows(timeline)
    final = list(rows[-1])
    rows = [r for r in rows if len(r)]
    if not rows:
        return 1.0
    ok = sum(1 for r in rows if list(r) == final[: len(r)])
    return ok / len(rows)


def delayed_rows(timeline, d: int) -> List[List[str]]:
    """Inference-time delay: row t keeps its first t-d labels; after the last
    input, d further rows release the held-back labels of the final output."""
    rows = _rows(timeline)
    n = len(rows)
    return [list(rows[min(t, n) - 1][: max(0, t - d)]) for t in range(1, n + d + 1)]


# --------------------------------------------------------------------------
# non-incremental


def iob_spans(labels: Sequence[str]) -> Set[Tuple[int, int, str]]:
    """conlleval-style chunks as (start, end_exclusive, type)."""
    spans = set()
    start, ctype = None, None
    for i, lab in enumerate(list(labels) + ["O"]):
        if lab == "O":
            prefix, typ = "O", None
        elif len(lab) > 2 and lab[:2] in ("B-", "I-"):
            prefix, typ = lab[0], lab[2:]
        else:
            raise ValueError(f"not an IOB label: {lab!r}")
        begins = prefix == "B" or (prefix == "I" and typ != ctype)
        if ctype is not None and (prefix == "O" or begins):
            spans.add((start, i, ctype))
            start, ctype = None, None
        if begins:
            start, ctype = i, typ
    return spans


def span_prf(pred, gold) -> Tuple[float, float, float]:
    """Micro precision/recall/F1 over exact spans. Accepts one label sequence
    or a list of sequences (sentences)."""
    if pred and not isinstance(pred[0], str):
        pairs = list(zip(pred, gold))
    else:
        pairs = [(pred, gold)]
    n_pred = n_gold = n_hit = 0
    for p, g in pairs:
        if len(p) != len(g):
            raise ValueError("prediction and gold lengths differ")
        ps, gs = iob_spans(p), iob_spans(g)
        n_pred += len(ps)
        n_gold += len(gs)
        n_hit += len(ps & gs)
    prec = n_hit / n_pred if n_pred else 0.0
    rec = n_hit / n_gold if n_gold else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def span_f1_iob(pred, gold) -> float:
    return span_prf(pred, gold)[2]


def token_accuracy(pred, gold) -> float:
    if pred and not isinstance(pred[0], str):
        pairs = list(zip(pred, gold))
    else:
        pairs = [(pred, gold)]
    hit = n = 0
    for p, g in pairs:
        if len(p) != len(g):
            raise ValueError("prediction and gold lengths differ")
        hit += sum(a == b for a, b in zip(p, g))
        n += len(g)
    return hit / n if n else 0.0


# --------------------------------------------------------------------------
# policy analysis


def policy_distribution(timelines) -> Dict[str, Optional[float]]:
    """Cross-tabulate actions with the state of the prefix they act on.

    The prefix acted on at step t is the committed row before the step; it is
    correct if all its labels match the final output. Conditional ratios with
    an empty denominator are None.
    """
    counts = {"WC": 0, "WI": 0, "RC": 0, "RI": 0}
    for tl in timelines:
        rows = _rows(tl)
        final = list(rows[-1])
        for t, action in enumerate(tl.actions):
            prefix = list(rows[t - 1]) if t > 0 else []
            state = "C" if prefix == final[: len(prefix)] else "I"
            counts[action + state] += 1
    w = counts["WC"] + counts["WI"]
    r = counts["RC"] + counts["RI"]
    c = counts["WC"] + counts["RC"]
    i = counts["WI"] + counts["RI"]
    total = w + r

    def ratio(a, b):
        return a / b if b else None

    return {
        "write": ratio(w, total), "revise": ratio(r, total),
        "rc_over_r": ratio(counts["RC"], r), "ri_over_r": ratio(counts["RI"], r),
        "wi_over_w": ratio(counts["WI"], w), "wc_over_w": ratio(counts["WC"], w),
        "rc_over_c": ratio(counts["RC"], c), "wc_over_c": ratio(counts["WC"], c),
        "wi_over_i": ratio(counts["WI"], i), "ri_over_i": ratio(counts["RI"], i),
        "counts": dict(counts),
    }


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    eo: float
    ct: float
    rc: float
    eo_d1: float
    rc_d1: float
    eo_d2: float
    rc_d2: float
    f1: Optional[float]
    accuracy: float
    revise_ratio: float
    reviser_calls: int
    token_forwards: int
    n_sentences: int
    sents_per_sec: Optional[float] = None
    tau: Optional[float] = None
    delay: int = 0
    table7: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def incremental_scores(timelines) -> Tuple[float, float, float]:
    return (_mean([edit_overhead(t) for t in timelines]),
            _mean([correction_time(t) for t in timelines]),
            _mean([relative_correctness(t) for t in timelines]))


def evaluate_timelines(timelines, gold: Sequence[Sequence[str]], tau: Optional[float] = None,
                       sents_per_sec: Optional[float] = None) -> MetricsReport:
    if not timelines:
        raise ValueError("no timelines to evaluate")
    eo, ct, rc = incremental_scores(timelines)
    delayed = {}
    for d in (1, 2):
        views = [delayed_rows(t, d) for t in timelines]
        delayed[d] = (_mean([edit_overhead(v) for v in views]), _mean([relative_correctness(v) for v in views]))
    finals = [list(t.rows[-1]) for t in timelines]
    f1 = span_f1_iob(finals, gold) if all(is_iob(g) for g in gold) else None
    steps = sum(len(t.actions) for t in timelines)
    revises = sum(a == "R" for t in timelines for a in t.actions)
    return MetricsReport(
        eo=eo, ct=ct, rc=rc,
        eo_d1=delayed[1][0], rc_d1=delayed[1][1], eo_d2=delayed[2][0], rc_d2=delayed[2][1],
        f1=f1, accuracy=token_accuracy(finals, gold),
        revise_ratio=revises / steps if steps else 0.0,
        reviser_calls=sum(t.counters.reviser_calls for t in timelines),
        token_forwards=sum(t.counters.token_forwards for t in timelines),
        n_sentences=len(timelines), sents_per_sec=sents_per_sec, tau=tau,
        delay=timelines[0].delay, table7=policy_distribution(timelines),
    )


def throughput_bench(runner: Callable, sentences: Sequence[Sequence[int]], warmup_iters: int = 1,
                     timed_iters: int = 3) -> Dict[str, float]:
    """Wall-clock sentences/sec of ``runner(ids) -> PrefixTimeline`` over the corpus."""
    if not sentences:
        raise ValueError("empty corpus")
    for _ in range(warmup_iters):
        for ids in sentences:
            runner(ids)
    forwards = calls = revises = steps = 0
    start = time.perf_counter()
    for it in range(timed_iters):
        for ids in sentences:
            tl = runner(ids)
            if it == 0:
                forwards += tl.counters.token_forwards
                calls += tl.counters.reviser_calls
                revises += sum(a == "R" for a in tl.actions)
                steps += len(tl.actions)
    elapsed = time.perf_counter() - start
    return {
        "sents_per_sec": timed_iters * len(sentences) / elapsed,
        "token_forwards": forwards,
        "reviser_calls": calls,
        "revise_ratio": revises / steps if steps else 0.0,
        "seconds": elapsed,
    }
