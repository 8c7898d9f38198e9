"""Generation metrics (token F1, smoothed corpus BLEU, ROUGE-L, Total) and
retrieval metrics (Recall@k, MRR@5). All generation scores live on a 0..100
scale so the Total sum is comparable across runs."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .neural.tokenizer import split_tokens

BLEU_SMOOTH_EPS = 1e-9
MRR_CUTOFF = 5


@dataclass(frozen=True)
class MetricsReport:
    f1: float
    bleu: float
    rouge_l: float
    total: float
    r_at: dict[int, float] = field(default_factory=dict)
    mrr_at_5: float | None = None

    def __post_init__(self):
        if abs(self.total - (self.f1 + self.bleu + self.rouge_l)) > 1e-9:
            raise ValueError("total must equal f1 + bleu + rouge_l")

    @classmethod
    def from_components(
        cls,
        f1: float,
        bleu: float,
        rouge_l: float,
        r_at: dict[int, float] | None = None,
        mrr_at_5: float | None = None,
    ) -> "MetricsReport":
        return cls(f1=f1, bleu=bleu, rouge_l=rouge_l, total=f1 + bleu + rouge_l,
                   r_at=dict(r_at or {}), mrr_at_5=mrr_at_5)

    def to_json_obj(self) -> dict:
        obj = {
            "f1": self.f1,
            "bleu": self.bleu,
            "rouge_l": self.rouge_l,
            "total": self.total,
        }
        if self.r_at:
            obj["r_at"] = {str(k): v for k, v in sorted(self.r_at.items())}
        if self.mrr_at_5 is not None:
            obj["mrr_at_5"] = self.mrr_at_5
        return obj


def token_f1(prediction: str, reference: str) -> float:
    """Multiset token overlap F1, scaled to 0..100."""
    pred = split_tokens(prediction)
    ref = split_tokens(reference)
    if not pred and not ref:
        return 100.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 100.0 * 2 * precision * recall / (precision + recall)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # Two-row DP over token sequences.
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, reference: str) -> float:
    """LCS F-measure with beta=1, scaled to 0..100."""
    pred = split_tokens(prediction)
    ref = split_tokens(reference)
    if not pred and not ref:
        return 100.0
    if not pred or not ref:
        return 0.0
    lcs = _lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pred)
    recall = lcs / len(ref)
    return 100.0 * 2 * precision * recall / (precision + recall)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(predictions: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus-level BLEU: uniform weights over 1..max_n-grams, clipped counts,
    exponential brevity penalty, and add-eps smoothing so zero-match orders do
    not collapse the geometric mean. Scaled to 0..100."""
    if len(predictions) != len(references):
        raise ValueError(
            f"predictions ({len(predictions)}) and references ({len(references)}) differ in length"
        )
    pred_len = 0
    ref_len = 0
    matched = [0] * max_n
    total = [0] * max_n
    for pred_text, ref_text in zip(predictions, references):
        pred = split_tokens(pred_text)
        ref = split_tokens(ref_text)
        pred_len += len(pred)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            pred_counts = _ngram_counts(pred, n)
            ref_counts = _ngram_counts(ref, n)
            matched[n - 1] += sum((pred_counts & ref_counts).values())
            total[n - 1] += max(0, len(pred) - n + 1)
    if pred_len == 0:
        return 100.0 if ref_len == 0 else 0.0
    log_p = 0.0
    for n in range(max_n):
        log_p += math.log(max(matched[n], BLEU_SMOOTH_EPS) / max(total[n], BLEU_SMOOTH_EPS))
    log_p /= max_n
    bp = 1.0 if pred_len >= ref_len else math.exp(1.0 - ref_len / pred_len)
    return 100.0 * bp * math.exp(log_p)


def generation_report(
    predictions: Sequence[str],
    references: Sequence[str],
    r_at: dict[int, float] | None = None,
    mrr: float | None = None,
) -> MetricsReport:
    """Mean token F1 and ROUGE-L plus corpus BLEU over aligned pred/ref pairs."""
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    if not predictions:
        raise ValueError("no prediction/reference pairs")
    f1 = sum(token_f1(p, r) for p, r in zip(predictions, references)) / len(predictions)
    rl = sum(rouge_l(p, r) for p, r in zip(predictions, references)) / len(predictions)
    bleu = corpus_bleu(predictions, references)
    return MetricsReport.from_components(f1=f1, bleu=bleu, rouge_l=rl, r_at=r_at, mrr_at_5=mrr)


RankedList = tuple[str, Sequence[str]]  # (gold passage id, ranked passage ids)


def recall_at_k(lists: Iterable[RankedList], k: int) -> float:
    """Fraction of queries whose gold passage appears in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    lists = list(lists)
    if not lists:
        raise ValueError("no ranked lists")
    hits = sum(1 for gold, ranked in lists if gold in list(ranked)[:k])
    return hits / len(lists)


def mrr_at_5(lists: Iterable[RankedList]) -> float:
    """Mean reciprocal rank, zero when gold ranks below 5."""
    lists = list(lists)
    if not lists:
        raise ValueError("no ranked lists")
    score = 0.0
    for gold, ranked in lists:
        for rank, pid in enumerate(list(ranked)[:MRR_CUTOFF], start=1):
            if pid == gold:
                score += 1.0 / rank
                break
    return score / len(lists)
