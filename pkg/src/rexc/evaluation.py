"""Rationale-overlap scoring and n-gram explanation metrics.

All functions here are pure. Rationale metrics follow the usual benchmark
conventions: token-level precision/recall/F1 over index sets, span-level
F1 with a 0.5 intersection-over-union matching threshold, and an exact-set
match rate reported as accuracy. Explanation metrics are the from-scratch
n-gram suite: clipped 4-gram BLEU with brevity penalty, LCS-based ROUGE-L,
and an exact-match METEOR variant (no stemming or synonymy).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from math import exp, log
from typing import Iterable, Optional, Sequence

Span = tuple[int, int]  # half-open [start, end)

ROUGE_BETA = 1.2  # recall-weighted F, the usual summarization setting


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class RationaleScore:
    accuracy: float
    iou: PRF
    token: PRF


def _prf(tp: float, n_pred: float, n_gold: float) -> PRF:
    if n_pred == 0 and n_gold == 0:
        return PRF(1.0, 1.0, 1.0)
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) else 0.0
    return PRF(p, r, f1)


def token_prf(predicted: Iterable[int], gold: Iterable[int]) -> PRF:
    """Set precision/recall/F1; two empty sets count as perfect agreement."""
    pred, gold = set(predicted), set(gold)
    return _prf(len(pred & gold), len(pred), len(gold))


def spans_from_indices(indices: Iterable[int]) -> list[Span]:
    """Maximal contiguous runs of the index set, as half-open spans."""
    idx = sorted(set(indices))
    spans: list[Span] = []
    for i in idx:
        if spans and spans[-1][1] == i:
            spans[-1] = (spans[-1][0], i + 1)
        else:
            spans.append((i, i + 1))
    return spans


def _validate_spans(spans: Sequence[Span]) -> None:
    for s in spans:
        if len(s) != 2 or s[0] >= s[1] or s[0] < 0:
            raise ValueError(f"malformed span: {s!r}")


def span_iou(a: Span, b: Span) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def iou_match_count(
    pred_spans: Sequence[Span], gold_spans: Sequence[Span], threshold: float = 0.5
) -> int:
    """Greedy best-IOU one-to-one matching; returns the matched-pair count."""
    _validate_spans(pred_spans)
    _validate_spans(gold_spans)
    pairs = [
        (span_iou(p, g), i, j)
        for i, p in enumerate(pred_spans)
        for j, g in enumerate(gold_spans)
    ]
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_pred: set[int] = set()
    used_gold: set[int] = set()
    matches = 0
    for iou, i, j in pairs:
        if iou < threshold:
            break
        if i in used_pred or j in used_gold:
            continue
        used_pred.add(i)
        used_gold.add(j)
        matches += 1
    return matches


def iou_f1(
    pred_spans: Sequence[Span], gold_spans: Sequence[Span], threshold: float = 0.5
) -> PRF:
    matches = iou_match_count(pred_spans, gold_spans, threshold)
    return _prf(matches, len(pred_spans), len(gold_spans))


def rationale_scores(
    predicted_sets: Sequence[Iterable[int]], gold_sets: Sequence[Iterable[int]]
) -> RationaleScore:
    """Micro-averaged token and span scores plus exact-set-match accuracy."""
    if len(predicted_sets) != len(gold_sets):
        raise ValueError("prediction and gold lists must align")
    tok_tp = tok_pred = tok_gold = 0
    span_tp = span_pred = span_gold = 0
    exact = 0
    for pred_i, gold_i in zip(predicted_sets, gold_sets):
        pred, gold = set(pred_i), set(gold_i)
        tok_tp += len(pred & gold)
        tok_pred += len(pred)
        tok_gold += len(gold)
        exact += int(pred == gold)
        ps, gs = spans_from_indices(pred), spans_from_indices(gold)
        span_tp += iou_match_count(ps, gs)
        span_pred += len(ps)
        span_gold += len(gs)
    n = max(len(predicted_sets), 1)
    return RationaleScore(
        accuracy=exact / n,
        iou=_prf(span_tp, span_pred, span_gold),
        token=_prf(tok_tp, tok_pred, tok_gold),
    )


# ---------------------------------------------------------------------------
# N-gram explanation metrics
# ---------------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Geometric mean of clipped 1..4-gram precisions times brevity penalty."""
    if not reference:
        raise ValueError("reference must be nonempty")
    if not candidate:
        return 0.0
    log_precisions = []
    for n in range(1, 5):
        cand = _ngrams(candidate, n)
        if not cand:
            return 0.0
        ref = _ngrams(reference, n)
        clipped = sum(min(c, ref[g]) for g, c in cand.items())
        if clipped == 0:
            return 0.0
        log_precisions.append(log(clipped / sum(cand.values())))
    bp = 1.0 if len(candidate) >= len(reference) else exp(1.0 - len(reference) / len(candidate))
    return bp * exp(sum(log_precisions) / 4.0)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence via the standard DP table."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not reference:
        raise ValueError("reference must be nonempty")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    beta_sq = ROUGE_BETA**2
    return (1 + beta_sq) * p * r / (r + beta_sq * p)


def _meteor_chunks(candidate: Sequence[str], reference: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) under an in-order greedy exact alignment."""
    available: dict[str, list[int]] = {}
    for j, tok in enumerate(reference):
        available.setdefault(tok, []).append(j)
    alignment: list[tuple[int, int]] = []
    last_ref = -1
    for i, tok in enumerate(candidate):
        slots = available.get(tok)
        if not slots:
            continue
        # Prefer the earliest reference slot that keeps the alignment
        # monotone; fall back to the earliest remaining slot.
        pick = next((k for k, j in enumerate(slots) if j > last_ref), 0)
        j = slots.pop(pick)
        alignment.append((i, j))
        last_ref = j
    if not alignment:
        return 0, 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    return len(alignment), chunks


def meteor_lite(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Recall-weighted (9:1) harmonic unigram F times a fragmentation penalty.

    Exact surface matches only, so this is a strict lower bound on the full
    metric with stemming and synonymy.
    """
    if not reference:
        raise ValueError("reference must be nonempty")
    if not candidate:
        return 0.0
    matches, chunks = _meteor_chunks(candidate, reference)
    if matches == 0:
        return 0.0
    p = matches / len(candidate)
    r = matches / len(reference)
    f_mean = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


def ngram_metrics(candidate: Sequence[str], reference: Sequence[str]) -> dict[str, float]:
    return {
        "bleu4": bleu4(candidate, reference),
        "rougeL": rouge_l(candidate, reference),
        "meteor_lite": meteor_lite(candidate, reference),
    }
