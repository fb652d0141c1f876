"""Counterfactual external knowledge: entity ranking, substitution, variant weights."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gateway import ChatRequest, Gateway

log = logging.getLogger(__name__)

MIN_WEIGHT = 0.01
_LINE = re.compile(r"^\s*(?:[-*]|\d+[.)])?\s*(?P<entity>.+?)\s*\|\s*(?P<weight>\S+)\s*$")


class CounterfactualError(ValueError):
    pass


class EntityExtractionError(CounterfactualError):
    pass


@dataclass(frozen=True)
class WeightedEntity:
    surface: str
    weight: float

    def __post_init__(self):
        if not self.surface.strip():
            raise CounterfactualError("entity surface is empty")
        if not 0.0 < self.weight <= 1.0:
            raise CounterfactualError(f"weight {self.weight} outside (0, 1]")


@dataclass(frozen=True)
class CounterfactualEntity:
    index: int  # 1-based rank of the entity it replaces
    surface: str
    original: str
    weight: float


@dataclass(frozen=True)
class CounterfactualVariant:
    text: str
    omitted_index: int  # 1-based; the one entity left unsubstituted
    probability: float


@dataclass(frozen=True)
class CounterfactualSet:
    source: str
    variants: tuple[CounterfactualVariant, ...]

    def __post_init__(self):
        t = len(self.variants)
        if sorted(v.omitted_index for v in self.variants) != list(range(1, t + 1)):
            raise CounterfactualError("need exactly one variant per omitted index 1..T")
        if abs(sum(v.probability for v in self.variants) - 1.0) > 1e-9:
            raise CounterfactualError("variant probabilities must sum to 1")

    @property
    def probabilities(self) -> list[float]:
        return [v.probability for v in self.variants]


def _pattern(surfaces: Sequence[str]) -> re.Pattern:
    ordered = sorted(set(surfaces), key=lambda s: (-len(s), s))
    alternation = "|".join(re.escape(s) for s in ordered)
    return re.compile(rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE)


def occurs(surface: str, text: str) -> bool:
    """Whole-token, case-insensitive containment."""
    return _pattern([surface]).search(text) is not None


def substitute(text: str, mapping: dict[str, str]) -> str:
    """Replace every whole-token occurrence of each key, longest keys first.

    Matching is case-insensitive and done in one pass, so replacement text
    is never rescanned.
    """
    if not mapping:
        return text
    lookup = {k.lower(): v for k, v in mapping.items()}
    return _pattern(list(mapping)).sub(lambda m: lookup[m.group(0).lower()], text)


def _parse_entities(reply: str, notes: list[str]) -> list[tuple[str, float | None]]:
    parsed = []
    for line in reply.splitlines():
        m = _LINE.match(line)
        if not m:
            continue
        entity = m.group("entity").strip().strip("`\"'")
        try:
            weight = float(m.group("weight").rstrip(",;"))
        except ValueError:
            notes.append(f"unparseable weight {m.group('weight')!r} for {entity!r}")
            weight = None
        parsed.append((entity, weight))
    return parsed


def _clean(parsed, knowledge: str, notes: list[str]) -> tuple[list[WeightedEntity], int, int]:
    """Returns (entities, rejected count, duplicate count)."""
    rank_based = any(w is None for _, w in parsed)
    if rank_based:
        notes.append("falling back to rank-based weights")
    rejected = dupes = 0
    best: dict[str, WeightedEntity] = {}
    order: list[str] = []
    n = len(parsed)
    for rank, (entity, w) in enumerate(parsed, 1):
        if not occurs(entity, knowledge):
            notes.append(f"rejected {entity!r}: not found in the knowledge text")
            rejected += 1
            continue
        if rank_based:
            w = (n - rank + 1) / n
        if w > 1.0 or w < MIN_WEIGHT:
            clamped = min(1.0, max(MIN_WEIGHT, w))
            notes.append(f"weight {w} for {entity!r} clamped to {clamped}")
            w = clamped
        key = entity.lower()
        if key in best:
            dupes += 1
            notes.append(f"duplicate entity {entity!r}")
            if w > best[key].weight:
                best[key] = WeightedEntity(best[key].surface, w)
            continue
        best[key] = WeightedEntity(entity, w)
        order.append(key)
    entities = [best[k] for k in order]
    entities.sort(key=lambda e: -e.weight)  # stable: ties keep reply order
    return entities, rejected, dupes


def extract_entities(gateway: Gateway, query: str, knowledge: str, count: int,
                     notes: list[str] | None = None, temperature: float = 0.0) -> list[WeightedEntity]:
    """Ask the backend for the ``count`` entities most relevant to ``query``.

    Entities missing from the knowledge are dropped and the backend is asked
    once more. Shortfalls caused only by duplicate entities shrink the list
    (down to two) instead of failing. Warnings are appended to ``notes``.
    """
    if count < 2:
        raise CounterfactualError("need at least 2 entities")
    if not knowledge.strip():
        raise CounterfactualError("knowledge text is empty")
    notes = notes if notes is not None else []
    variables = {"question": query, "knowledge": knowledge, "count": count}
    for attempt in range(2):
        reply = gateway.chat(ChatRequest("entities", variables, repetition=attempt,
                                         temperature=temperature))
        parsed = _parse_entities(reply.text, notes)
        entities, rejected, dupes = _clean(parsed, knowledge, notes)
        if len(entities) >= count:
            return entities[:count]
        if rejected == 0 and dupes > 0 and len(entities) >= 2:
            notes.append(f"only {len(entities)} distinct entities; lowering T from {count}")
            return entities
        if attempt == 0:
            notes.append(f"got {len(entities)} usable entities of {count}; asking again")
    for n in notes:
        log.warning(n)
    raise EntityExtractionError(
        f"found {len(entities)} usable entities, needed {count} (caller may lower T)")


def counterfactual_entities(gateway: Gateway, entities: Sequence[WeightedEntity],
                            notes: list[str] | None = None,
                            temperature: float = 0.0) -> list[CounterfactualEntity]:
    if not entities:
        raise CounterfactualError("need at least one entity")
    notes = notes if notes is not None else []
    out = []
    for i, ent in enumerate(entities, 1):
        for attempt in range(2):
            reply = gateway.chat(ChatRequest("counterfactual", {"entity": ent.surface},
                                             repetition=attempt, temperature=temperature))
            lines = [ln.strip().strip("`\"'") for ln in reply.text.splitlines() if ln.strip()]
            alt = lines[0] if lines else ""
            if alt and alt.lower() != ent.surface.lower():
                break
            notes.append(f"counterfactual for {ent.surface!r} unusable ({alt!r}); asking again")
        else:
            raise CounterfactualError(f"no distinct counterfactual for {ent.surface!r}")
        out.append(CounterfactualEntity(i, alt, ent.surface, ent.weight))
    return out


def variant_probabilities(weights: Sequence[float]) -> list[float]:
    """P(variant t) ∝ product of every weight except the t-th.

    Written as ``1 / Σ_s (w_t / w_s)``: the common product cancels, equal
    weights give exactly ``1/T`` and rescaling all weights changes nothing.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or len(w) == 0:
        raise CounterfactualError("need a non-empty weight vector")
    if (w <= 0).any() or (w > 1).any():
        raise CounterfactualError("weights must lie in (0, 1]")
    return [float(1.0 / np.sum(wt / w)) for wt in w]


def enumerate_variants(knowledge: str, entities: Sequence[WeightedEntity],
                       counterfactuals: Sequence[CounterfactualEntity]) -> CounterfactualSet:
    """Variant t substitutes every counterfactual except the t-th."""
    if len(entities) != len(counterfactuals):
        raise CounterfactualError("entities and counterfactuals must align")
    for ent in entities:
        if not occurs(ent.surface, knowledge):
            raise CounterfactualError(f"entity {ent.surface!r} no longer occurs in the knowledge")
    probs = variant_probabilities([e.weight for e in entities])
    variants = []
    for t in range(1, len(entities) + 1):
        mapping = {e.surface: c.surface for i, (e, c) in enumerate(zip(entities, counterfactuals), 1)
                   if i != t}
        variants.append(CounterfactualVariant(substitute(knowledge, mapping), t, probs[t - 1]))
    return CounterfactualSet(knowledge, tuple(variants))
