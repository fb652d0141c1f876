"""Answer extraction, sensitivity scoring and per-answer causal aggregation."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .evaluation import normalize_answer

_KEYWORD = re.compile(r"answer is", re.IGNORECASE)
_SENTENCE_END = re.compile(r"[.!?](?=\s|$)|\n")


class EstimationError(ValueError):
    pass


def extract_answer(text: str) -> tuple[str, bool]:
    """Normalized span after the last "answer is", up to the end of its sentence."""
    hits = list(_KEYWORD.finditer(text))
    if not hits:
        return "", False
    rest = text[hits[-1].end():]
    end = _SENTENCE_END.search(rest)
    span = rest[: end.start()] if end else rest
    span = span.strip().lstrip(":").strip().rstrip(".,;:!?\"'")
    return normalize_answer(span), True


@dataclass(frozen=True)
class SensitivityRecord:
    cluster_id: int
    variant_index: int
    indicators: tuple[int, ...]

    @property
    def retained(self) -> int:
        return len(self.indicators)

    @property
    def gate_empty(self) -> bool:
        return not self.indicators

    @property
    def probability(self) -> float:
        # nothing passed the similarity gate: no evidence of adaptive reasoning
        if not self.indicators:
            return 0.0
        return sum(self.indicators) / len(self.indicators)


def sensitivity(reference: str, retained: Sequence[str], cluster_id: int = 0,
                variant_index: int = 1) -> SensitivityRecord:
    """Indicator is 1 where a retained CoT's answer differs from the reference."""
    return SensitivityRecord(cluster_id, variant_index,
                             tuple(int(a != reference) for a in retained))


@dataclass(frozen=True)
class Contribution:
    cluster_id: int
    variant_index: int
    answer: str
    consistency: float
    sensitivity: float
    variant_prob: float
    value: float
    gate_empty: bool = False


@dataclass(frozen=True)
class CausalScoreTable:
    scores: Mapping[str, float]
    ledger: tuple[Contribution, ...]
    cluster_sizes: Mapping[int, int] = field(default_factory=dict)

    def cluster_totals(self) -> dict[int, float]:
        per: dict[int, list[float]] = {}
        for c in self.ledger:
            per.setdefault(c.cluster_id, []).append(c.value)
        return {n: math.fsum(v) for n, v in sorted(per.items())}

    def membership(self, answer: str) -> int:
        clusters = {c.cluster_id for c in self.ledger if c.answer == answer}
        return sum(self.cluster_sizes.get(n, 0) for n in clusters)

    def ranked(self) -> list[tuple[str, float]]:
        return sorted(self.scores.items(), key=lambda kv: (-kv[1], -self.membership(kv[0]), kv[0]))

    def to_json(self) -> dict:
        return {
            "ranked": [[a, s] for a, s in self.ranked()],
            "ledger": [c.__dict__ for c in self.ledger],
            "cluster_sizes": {str(k): v for k, v in sorted(self.cluster_sizes.items())},
        }


def _index(records: Iterable, what: str) -> dict[tuple[int, int], object]:
    out = {}
    for r in records:
        cell = (r.cluster_id, r.variant_index)
        if cell in out:
            raise EstimationError(f"duplicate {what} record for cell {cell}")
        out[cell] = r
    return out


def aggregate(consistency: Iterable, sensitivity_records: Iterable,
              variant_probs: Sequence[float], cluster_answers: Mapping[int, str],
              cluster_sizes: Mapping[int, int] | None = None) -> CausalScoreTable:
    """Sum consistency × sensitivity × P(variant) over the (cluster, variant) grid.

    Each cell is credited to its cluster's answer. Variant indices are
    1-based to match ``variant_probs[t - 1]``. Sums use ``math.fsum`` so the
    table does not depend on the order records arrive in.
    """
    cons = _index(consistency, "consistency")
    sens = _index(sensitivity_records, "sensitivity")
    if abs(math.fsum(variant_probs) - 1.0) > 1e-9:
        raise EstimationError("variant probabilities must sum to 1")
    ledger = []
    for n in sorted(cluster_answers):
        for t in range(1, len(variant_probs) + 1):
            cell = (n, t)
            if cell not in cons or cell not in sens:
                raise EstimationError(f"missing record for cluster {n}, variant {t}")
            c, s = cons[cell].probability, sens[cell].probability
            p = variant_probs[t - 1]
            ledger.append(Contribution(n, t, cluster_answers[n], c, s, p, c * s * p,
                                       sens[cell].gate_empty))
    grouped: dict[str, list[float]] = {}
    for c in ledger:
        grouped.setdefault(c.answer, []).append(c.value)
    scores = {a: math.fsum(v) for a, v in sorted(grouped.items())}
    return CausalScoreTable(scores, tuple(ledger), dict(cluster_sizes or {}))


def select_answer(table: CausalScoreTable) -> tuple[str, float]:
    """Highest score; ties go to more clustered CoTs, then the smaller string."""
    if not table.scores:
        raise EstimationError("no cluster produced an extractable answer")
    return table.ranked()[0]


def majority_vote(answers: Iterable[str]) -> str:
    """Most frequent non-empty normalized answer, ties broken lexicographically.

    Accepts answer strings or objects with ``answer``/``found`` attributes.
    """
    votes = Counter()
    for a in answers:
        if hasattr(a, "found"):
            if not a.found:
                continue
            a = a.answer
        if a:
            votes[a] += 1
    if not votes:
        raise EstimationError("no extractable answers to vote on")
    return min(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0]
