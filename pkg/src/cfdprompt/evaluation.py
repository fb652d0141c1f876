"""Datasets, EM/F1 scoring and robustness perturbations."""

from __future__ import annotations

import json
import random
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)
_SENT_SPLIT = re.compile(r"(?<=[.!?])\s+")
_HOPS = re.compile(r"^(\d+)hop")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class QueryRecord:
    id: str
    question: str
    context: tuple[str, ...]
    answers: tuple[str, ...]
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(self.context))
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise DatasetError(f"record {self.id}: needs at least one gold answer")

    @property
    def knowledge(self) -> str:
        return "\n".join(self.context)

    def replace(self, **changes) -> "QueryRecord":
        data = {**self.to_json(), **changes}
        return QueryRecord(**data)

    def to_json(self) -> dict:
        d = asdict(self)
        d["context"] = list(self.context)
        d["answers"] = list(self.answers)
        d["metadata"] = dict(self.metadata)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "QueryRecord":
        try:
            return cls(id=str(d["id"]), question=d["question"], context=d.get("context", []),
                       answers=d["answers"], metadata=d.get("metadata", {}))
        except KeyError as exc:
            raise DatasetError(f"normalized record is missing field {exc.args[0]!r}") from None


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("need at least one gold answer")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, golds: Sequence[str]) -> float:
    if not golds:
        raise ValueError("need at least one gold answer")
    return max(_f1(prediction, g) for g in golds)


@dataclass
class MetricsReport:
    method: str
    config_digest: str
    seed: int
    per_record: list[dict]

    @property
    def em(self) -> float:
        return sum(r["em"] for r in self.per_record) / len(self.per_record) if self.per_record else 0.0

    @property
    def f1(self) -> float:
        return sum(r["f1"] for r in self.per_record) / len(self.per_record) if self.per_record else 0.0

    def summary(self) -> dict:
        return {"method": self.method, "n": len(self.per_record), "em": self.em, "f1": self.f1,
                "config_digest": self.config_digest, "seed": self.seed}

    def table(self) -> str:
        lines = [f"{'id':<24} {'EM':>3} {'F1':>7}  prediction"]
        for r in self.per_record:
            lines.append(f"{r['id']:<24} {r['em']:>3} {r['f1']:>7.4f}  {r['prediction']}")
        lines.append(f"{'mean':<24} {self.em:>3.2f} {self.f1:>7.4f}  (n={len(self.per_record)}, "
                     f"method={self.method})")
        return "\n".join(lines)

    def jsonl(self) -> str:
        rows = [json.dumps(r, sort_keys=True) for r in self.per_record]
        rows.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        return "\n".join(rows) + "\n"


def score(predictions: Mapping[str, str], records: Iterable[QueryRecord], method: str = "",
          config_digest: str = "", seed: int = 0) -> MetricsReport:
    rows = []
    for rec in records:
        if rec.id not in predictions:
            continue
        pred = predictions[rec.id]
        rows.append({"id": rec.id, "prediction": pred,
                     "em": exact_match(pred, rec.answers), "f1": f1(pred, rec.answers)})
    if not rows:
        raise DatasetError("no prediction ids match the dataset")
    return MetricsReport(method, config_digest, seed, rows)


# --- loaders -------------------------------------------------------------------

def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENT_SPLIT.split(text.strip()) if s.strip()]


def _read_json_or_jsonl(path: Path) -> list[dict]:
    text = path.read_text()
    stripped = text.lstrip()
    if stripped.startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def load_hotpotqa(path: str | Path) -> list[QueryRecord]:
    out = []
    for d in _read_json_or_jsonl(Path(path)):
        sentences = [s.strip() for _title, sents in d["context"] for s in sents if s.strip()]
        meta = {"source": "hotpotqa", "type": d.get("type"), "level": d.get("level"),
                "titles": [t for t, _ in d["context"]]}
        if "supporting_facts" in d:
            meta["supporting_facts"] = d["supporting_facts"]
        out.append(QueryRecord(d["_id"], d["question"], sentences, [d["answer"]], meta))
    return out


def load_sciq(path: str | Path) -> list[QueryRecord]:
    out = []
    for i, d in enumerate(_read_json_or_jsonl(Path(path))):
        rid = str(d.get("id", f"sciq-{i}"))
        meta = {"source": "sciq",
                "distractors": [d[k] for k in ("distractor1", "distractor2", "distractor3") if k in d]}
        out.append(QueryRecord(rid, d["question"], split_sentences(d.get("support", "")),
                               [d["correct_answer"]], meta))
    return out


def load_wikihop(path: str | Path) -> list[QueryRecord]:
    """Candidates stay in metadata only: answers are generated free-form."""
    out = []
    for d in _read_json_or_jsonl(Path(path)):
        relation, _, subject = d["query"].partition(" ")
        question = f"What is the {relation.replace('_', ' ')} of {subject}?"
        meta = {"source": "wikihop", "query": d["query"], "candidates": d.get("candidates", [])}
        out.append(QueryRecord(d["id"], question, [s.strip() for s in d["supports"]],
                               [d["answer"]], meta))
    return out


def load_musique(path: str | Path, min_hops: int = 4) -> tuple[list[QueryRecord], dict]:
    """Keep records with at least ``min_hops`` hops (hop count from the id prefix)."""
    out, stats = [], {"kept": 0, "too_few_hops": 0, "no_hop_metadata": 0, "unanswerable": 0}
    for d in _read_json_or_jsonl(Path(path)):
        if d.get("answerable") is False:
            stats["unanswerable"] += 1
            continue
        m = _HOPS.match(str(d["id"]))
        if not m:
            stats["no_hop_metadata"] += 1
            continue
        hops = int(m.group(1))
        if hops < min_hops:
            stats["too_few_hops"] += 1
            continue
        paragraphs = [p["paragraph_text"].strip() for p in d.get("paragraphs", [])]
        answers = [d["answer"]] + list(d.get("answer_aliases", []))
        meta = {"source": "musique", "hops": hops}
        out.append(QueryRecord(d["id"], d["question"], paragraphs, answers, meta))
        stats["kept"] += 1
    return out, stats


LOADERS = {"hotpotqa": load_hotpotqa, "sciq": load_sciq, "wikihop": load_wikihop}


def read_records(path: str | Path) -> list[QueryRecord]:
    """Read the normalized JSONL form; ids must be unique."""
    records, seen = [], set()
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = QueryRecord.from_json(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{n}: {exc.msg}") from exc
        if rec.id in seen:
            raise DatasetError(f"{path}:{n}: duplicate id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records


def write_records(records: Iterable[QueryRecord], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n"
                                  for r in records))


# --- perturbations ---------------------------------------------------------------

def _rng(seed: int, record_id: str, salt: str) -> random.Random:
    return random.Random(f"{seed}:{salt}:{record_id}")


def distractor_pool(records: Sequence[QueryRecord], exclude: QueryRecord) -> list[str]:
    own = set(exclude.context)
    pool = []
    for rec in records:
        if rec.id == exclude.id:
            continue
        pool.extend(s for s in rec.context if s not in own)
    return sorted(set(pool))


def perturb_inject(record: QueryRecord, pool: Sequence[str], seed: int) -> QueryRecord:
    """Insert ceil(10% of the sentences) foreign sentences at seeded positions."""
    if not pool:
        raise DatasetError(f"record {record.id}: empty distractor pool")
    overlap = set(pool) & set(record.context)
    if overlap:
        raise DatasetError(f"record {record.id}: distractor pool overlaps its own context")
    n = len(record.context)
    k = -(-n // 10)
    if k > len(pool):
        raise DatasetError(f"record {record.id}: pool has {len(pool)} sentences, need {k}")
    rng = _rng(seed, record.id, "inject")
    foreign = rng.sample(list(pool), k)
    slots = sorted(rng.sample(range(n + k), k))
    originals = iter(record.context)
    inserted = iter(foreign)
    context = [next(inserted) if i in slots else next(originals) for i in range(n + k)]
    meta = {**record.metadata, "perturbation": "inject", "injected_positions": slots}
    return record.replace(context=context, metadata=meta)


def perturb_shuffle(record: QueryRecord, seed: int) -> QueryRecord:
    """Cyclically rotate the sentences at floor(n/2) seeded positions.

    A rotation of the chosen positions means every chosen position receives
    a different sentence once at least two positions are chosen.
    """
    n = len(record.context)
    if n < 2:
        raise DatasetError(f"record {record.id}: shuffle needs at least 2 sentences")
    k = n // 2
    rng = _rng(seed, record.id, "shuffle")
    positions = rng.sample(range(n), k)
    context = list(record.context)
    for src, dst in zip(positions, positions[1:] + positions[:1]):
        context[dst] = record.context[src]
    meta = {**record.metadata, "perturbation": "shuffle", "shuffled_positions": sorted(positions)}
    return record.replace(context=context, metadata=meta)
