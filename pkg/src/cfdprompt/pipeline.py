"""End-to-end answer selection for one question, plus dataset runs."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .counterfactual import counterfactual_entities, enumerate_variants, extract_entities
from .cot import (
    CotSample,
    consistency_prob,
    embed_samples,
    kmeans,
    sample_cots,
)
from .effect import (
    EstimationError,
    aggregate,
    extract_answer,
    majority_vote,
    select_answer,
    sensitivity,
)
from .evaluation import QueryRecord
from .gateway import BackendError, ChatRequest, Gateway

log = logging.getLogger(__name__)

METHODS = ("cfd", "cot-sc", "cot", "icl")


@dataclass
class RecordResult:
    id: str
    method: str
    prediction: str
    error: str | None = None
    report: dict = field(default_factory=dict)

    def prediction_row(self) -> dict:
        row = {"id": self.id, "method": self.method, "prediction": self.prediction}
        if self.error:
            row["error"] = self.error
        return row


class Pipeline:
    def __init__(self, gateway: Gateway, config: PipelineConfig):
        self.gateway = gateway
        self.config = config

    def _sample(self, question: str, knowledge: str, count: int, salt: int) -> list[CotSample]:
        cfg = self.config
        return sample_cots(self.gateway, question, knowledge, count,
                           seed=cfg.seed * 1_000_003 + salt * 1000,
                           temperature=cfg.cot_temperature, max_tokens=cfg.max_tokens)

    def run(self, record: QueryRecord, method: str) -> RecordResult:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        if method == "cfd":
            return self.run_cfd(record)
        if method == "cot-sc":
            samples = self._sample(record.question, record.knowledge, self.config.num_cots, 0)
            answer = majority_vote(samples)
            return RecordResult(record.id, method, answer,
                                report={"answers": [s.answer for s in samples]})
        if method == "cot":
            sample = self._sample(record.question, record.knowledge, 1, 0)[0]
            return RecordResult(record.id, method, sample.answer, report={"found": sample.found})
        reply = self.gateway.chat(ChatRequest(
            "direct", {"question": record.question, "knowledge": record.knowledge},
            temperature=self.config.extraction_temperature, max_tokens=self.config.max_tokens))
        answer, found = extract_answer(reply.text)
        if not found:
            answer = extract_answer("answer is " + reply.text)[0]
        return RecordResult(record.id, method, answer, report={"found": found})

    def run_cfd(self, record: QueryRecord) -> RecordResult:
        cfg, gw = self.config, self.gateway
        notes: list[str] = []
        knowledge = record.knowledge
        entities = extract_entities(gw, record.question, knowledge, cfg.num_entities, notes,
                                    temperature=cfg.extraction_temperature)
        counterfactuals = counterfactual_entities(gw, entities, notes,
                                                  temperature=cfg.extraction_temperature)
        variants = enumerate_variants(knowledge, entities, counterfactuals)

        cots = embed_samples(gw, self._sample(record.question, knowledge, cfg.num_cots, 0))
        clusters = kmeans(np.stack([c.embedding for c in cots]), cfg.num_clusters, seed=cfg.seed)
        variant_cots = {
            v.omitted_index: embed_samples(
                gw, self._sample(record.question, v.text, cfg.cots_per_variant, v.omitted_index))
            for v in variants.variants
        }

        cons, sens, answers, sizes = [], [], {}, {}
        for n, m in enumerate(clusters.medoids):
            medoid = cots[m]
            if not medoid.found:
                notes.append(f"cluster {n}: medoid has no extractable answer; skipped")
                continue
            answers[n] = medoid.answer
            sizes[n] = clusters.sizes()[n]
            for t, samples in variant_cots.items():
                rec = consistency_prob(medoid, samples, cfg.similarity_threshold, n, t)
                kept = [s.answer for s, ok in zip(samples, rec.indicators) if ok]
                cons.append(rec)
                sens.append(sensitivity(medoid.answer, kept, n, t))
        table = aggregate(cons, sens, variants.probabilities, answers, sizes)
        answer, score = select_answer(table)

        gate_empty = sum(1 for s in sens if s.gate_empty)
        if gate_empty:
            notes.append(f"{gate_empty} of {len(sens)} cells had no CoT pass the similarity gate")
        report = {
            "id": record.id,
            "method": "cfd",
            "prediction": answer,
            "score": score,
            "table": table.to_json(),
            "majority_vote": majority_vote(cots),
            "entities": [[e.surface, e.weight] for e in entities],
            "counterfactuals": [c.surface for c in counterfactuals],
            "variant_probabilities": variants.probabilities,
            "medoids": list(clusters.medoids),
            "cluster_answers": {str(k): v for k, v in answers.items()},
            "gate": {
                "threshold": cfg.similarity_threshold,
                "cells": len(cons),
                "passed": sum(sum(c.indicators) for c in cons),
                "total": sum(len(c.indicators) for c in cons),
                "empty_cells": gate_empty,
            },
            "notes": notes,
        }
        return RecordResult(record.id, "cfd", answer, report=report)


def run_dataset(pipeline: Pipeline, records: Sequence[QueryRecord], method: str,
                fail_fast: bool | None = None) -> list[RecordResult]:
    """Run every record; failures are recorded per record unless ``fail_fast``."""
    fail_fast = pipeline.config.fail_fast if fail_fast is None else fail_fast

    def one(rec: QueryRecord) -> RecordResult:
        try:
            return pipeline.run(rec, method)
        except (BackendError, EstimationError, ValueError) as exc:
            if fail_fast:
                raise
            log.warning("record %s failed: %s", rec.id, exc)
            return RecordResult(rec.id, method, "", error=f"{type(exc).__name__}: {exc}")

    workers = pipeline.config.record_workers
    if workers == 1:
        return [one(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, records))


def _dump(row: dict) -> str:
    return json.dumps(row, sort_keys=True, ensure_ascii=False)


def write_outputs(results: Sequence[RecordResult], out_dir: str | Path, config: PipelineConfig,
                  trace_rows: Sequence[dict] = ()) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"predictions": out / "predictions.jsonl", "reports": out / "reports.jsonl",
             "trace": out / "trace.jsonl"}
    paths["predictions"].write_text("".join(_dump(r.prediction_row()) + "\n" for r in results))
    digest = config.digest()
    paths["reports"].write_text("".join(
        _dump({**r.report, "id": r.id, "method": r.method, "config_digest": digest,
               "seed": config.seed, **({"error": r.error} if r.error else {})}) + "\n"
        for r in results))
    with paths["trace"].open("a") as fh:
        for row in trace_rows:
            fh.write(_dump(row) + "\n")
    return paths
