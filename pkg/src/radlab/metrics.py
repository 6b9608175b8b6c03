"""Automatic response metrics (F1, BLEU-1/2, DISTINCT-1/2) and Fleiss' kappa.

All functions take token sequences (strings or ids). Special tokens should be
stripped beforehand; :func:`evaluate_corpus` does that for id sequences.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

log = logging.getLogger(__name__)

Tokens = Sequence[Hashable]


def ngrams(tokens: Tokens, n: int) -> list[tuple]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def f1_score(generated: Tokens, reference: Tokens, warn: bool = True) -> float:
    """Unigram bag-overlap F1 (overlap counted with multiplicity)."""
    if not generated or not reference:
        if warn:
            log.warning("f1_score: empty %s; scoring 0", "generation" if not generated else "reference")
        return 0.0
    overlap = sum((Counter(generated) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(generated)
    recall = overlap / len(reference)
    return 2 * precision * recall / (precision + recall)


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 2) -> tuple[float, ...]:
    """Corpus BLEU-1..max_n with clipped n-gram precision and a brevity penalty.

    Returns one score per order; an order whose precision is zero zeroes
    every higher-order score.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("bleu needs a nonempty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    c = r = 0
    for cand, ref in zip(candidates, references):
        c += len(cand)
        r += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = Counter(ngrams(cand, n))
            ref_counts = Counter(ngrams(ref, n))
            matched[n - 1] += sum(min(k, ref_counts[g]) for g, k in cand_counts.items())
            total[n - 1] += sum(cand_counts.values())
    if c == 0:
        return (0.0,) * max_n
    bp = min(1.0, math.exp(1.0 - r / c))
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        p = matched[n] / total[n] if total[n] else 0.0
        if p == 0.0 or log_sum == -math.inf:
            log_sum = -math.inf
            scores.append(0.0)
            continue
        log_sum += math.log(p)
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return tuple(scores)


def distinct_n(responses: Sequence[Tokens], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all responses."""
    grams = [g for resp in responses for g in ngrams(resp, n)]
    if not grams:
        log.warning("distinct_%d: no %d-grams in corpus; scoring 0", n, n)
        return 0.0
    return len(set(grams)) / len(grams)


class KappaUndefinedError(ArithmeticError):
    pass


def fleiss_kappa(matrix) -> float:
    """Fleiss' kappa for an items x categories matrix of rating counts."""
    counts = np.asarray(matrix, dtype=float)
    if counts.ndim != 2:
        raise ValueError(f"rater matrix must be 2-D, got shape {counts.shape}")
    if (counts < 0).any():
        raise ValueError("rating counts must be nonnegative")
    N, _ = counts.shape
    raters = counts.sum(axis=1)
    if N < 2:
        raise ValueError("fleiss_kappa needs at least 2 items")
    if not np.all(raters == raters[0]):
        raise ValueError("every item needs the same number of ratings")
    n = raters[0]
    if n < 2:
        raise ValueError("fleiss_kappa needs at least 2 raters")
    p_j = counts.sum(axis=0) / (N * n)
    P_i = ((counts * counts).sum(axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    P_e = float((p_j * p_j).sum())
    if P_e == 1.0:
        if P_bar == 1.0:
            return 1.0
        raise KappaUndefinedError("expected agreement is 1 but observed agreement is not")
    return float((P_bar - P_e) / (1.0 - P_e))


_BANDS = [
    (0.0, "poor"),
    (0.20, "slight"),
    (0.40, "fair"),
    (0.60, "moderate"),
    (0.80, "substantial"),
    (1.00, "almost perfect"),
]


def agreement_band(kappa: float) -> str:
    """Landis-Koch label for a kappa value (upper bounds inclusive)."""
    if kappa < 0:
        return "poor"
    for upper, label in _BANDS[1:]:
        if kappa <= upper:
            return label
    return "almost perfect"


def read_rater_csv(path) -> np.ndarray:
    """Items x categories count matrix; a non-numeric first row is a header."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}: row {i + 1} is not numeric")
    return np.asarray(rows, dtype=float)


@dataclass
class MetricsReport:
    f1: float
    bleu1: float
    bleu2: float
    distinct1: float
    distinct2: float
    count: int

    METRICS = ("f1", "bleu1", "bleu2", "distinct1", "distinct2")

    def to_dict(self, scaled: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if scaled:
            for k in self.METRICS:
                d[f"{k}_x100"] = 100.0 * d[k]
        return d

    def row(self) -> list[float]:
        return [getattr(self, k) for k in self.METRICS]

    def format(self) -> str:
        return (
            f"pairs={self.count}  F1={self.f1:.4f} ({100 * self.f1:.3f})  "
            f"BLEU-1/2={self.bleu1:.4f}/{self.bleu2:.4f}  "
            f"DISTINCT-1/2={self.distinct1:.4f}/{self.distinct2:.4f}"
        )


def strip_special(ids, special=frozenset(range(5))) -> list:
    return [int(i) for i in ids if int(i) not in special]


def evaluate_corpus(generated: Sequence[Tokens], references: Sequence[Tokens]) -> MetricsReport:
    """Corpus metrics over already-stripped token sequences."""
    if len(generated) != len(references):
        raise ValueError(f"{len(generated)} generations vs {len(references)} references")
    if not generated:
        raise ValueError("evaluate_corpus needs at least one pair")
    empty = sum(1 for g, r in zip(generated, references) if not g or not r)
    if empty:
        log.warning("evaluate_corpus: %d pair(s) with an empty side scored F1 = 0", empty)
    f1 = math.fsum(f1_score(g, r, warn=False) for g, r in zip(generated, references)) / len(generated)
    b1, b2 = bleu(generated, references, max_n=2)
    return MetricsReport(
        f1=f1,
        bleu1=b1,
        bleu2=b2,
        distinct1=distinct_n(generated, 1),
        distinct2=distinct_n(generated, 2),
        count=len(generated),
    )
