"""Scripted 20-question world where the popular answer is a memorized wrong one.

On the "designed" questions most sampled CoTs recite a remembered producer
that never appears in the knowledge and ignore it entirely, while a minority
read the producer off the knowledge and follow it when the knowledge is
swapped for a counterfactual. Majority voting therefore picks the memorized
answer, and causal scoring picks the grounded one. The remaining "control"
questions have a grounded majority.

Run ``python tests/contrast_world.py OUTDIR`` to write dataset.jsonl,
fixture.json and config.json for ``cfdprompt run``.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from cfdprompt.config import PipelineConfig
from cfdprompt.counterfactual import CounterfactualEntity, WeightedEntity, enumerate_variants
from cfdprompt.evaluation import QueryRecord, write_records
from cfdprompt.gateway import ScriptedFixture

N_QUESTIONS = 20
N_CONTROL = 4
CONFIG = PipelineConfig()  # published defaults: M=30, N=5, T=5; P=5

PRODUCERS = ["Halvorsen", "Quimby", "Taranov", "Okafor", "Lindqvist", "Marchetti", "Delacroix",
             "Nakamura", "Brannigan", "Oyelaran", "Valtonen", "Castellanos", "Idrisov",
             "Pemberton", "Achterberg", "Ruisdael", "Szabados", "Fairweather", "Kowalczyk",
             "Ambrosetti"]
REMEMBERED = ["Wexley", "Hollister", "Drummond", "Carraway", "Ellingham", "Prescott", "Ashdown",
              "Blackwood", "Redgrave", "Thornbury", "Kingsley", "Mayhew", "Osborne", "Whitcombe",
              "Lockhart", "Harrowgate", "Pennington", "Sterling", "Fenwick", "Goodall"]
CITIES = ["Tromso", "Valparaiso", "Ljubljana", "Windhoek", "Tbilisi", "Cusco", "Bergen",
          "Salzburg", "Hobart", "Mendoza", "Tallinn", "Porto", "Kyoto", "Antwerp", "Galway",
          "Bilbao", "Krakow", "Nantes", "Aarhus", "Trieste"]
STUDIOS = [f"Studio{c}" for c in "ABCDEFGHIJKLMNOPQRST"]
BANDS = [f"Band{c}" for c in "ABCDEFGHIJKLMNOPQRST"]
YEARS = [str(1961 + 2 * i) for i in range(20)]
ALT = {  # counterfactual entity for each original
    **{p: p[::-1].capitalize() for p in PRODUCERS},
    **{c: c + "ville" for c in CITIES},
    **{s: s + "X" for s in STUDIOS},
    **{b: b + "Z" for b in BANDS},
    **{y: str(int(y) + 1) for y in YEARS},
}
OPENERS = ["", "Okay.", "Let me think.", "Step by step.", "Reasoning carefully.", "First things first.",
           "Consider this.", "Right.", "Hmm.", "Let us see."]


def question(i: int) -> str:
    return f"Who produced the album Record{i}?"


def knowledge(i: int) -> list[str]:
    return [f"Record{i} was produced by {PRODUCERS[i]}.",
            f"{PRODUCERS[i]} was born in {CITIES[i]}.",
            f"{BANDS[i]} recorded Record{i} at {STUDIOS[i]} in {YEARS[i]}."]


def entities(i: int) -> list[WeightedEntity]:
    surfaces = [PRODUCERS[i], CITIES[i], BANDS[i], STUDIOS[i], YEARS[i]]
    return [WeightedEntity(s, w) for s, w in zip(surfaces, [0.9, 0.7, 0.6, 0.4, 0.3])]


def memory_cot(i: int, k: int) -> str:
    opener = OPENERS[k % len(OPENERS)]
    return (f"{opener} I remember this from training: the album Record{i} is well known and its "
            f"producer is always reported as {REMEMBERED[i]}. Whatever the notes say, that memory "
            f"settles it. So the answer is {REMEMBERED[i]}.").strip()


def grounded_cot(i: int, producer: str, k: int) -> str:
    opener = OPENERS[k % len(OPENERS)]
    return (f"{opener} The knowledge says Record{i} was produced by {producer}. I checked the "
            f"passage for any other production credit on Record{i} and found none, so the credit "
            f"stays with the person the passage names. So the answer is {producer}.").strip()


def build(config: PipelineConfig = CONFIG) -> tuple[list[QueryRecord], ScriptedFixture]:
    fx = ScriptedFixture()
    records = []
    m, p = config.num_cots, config.cots_per_variant
    for i in range(N_QUESTIONS):
        designed = i >= N_CONTROL
        q, e = question(i), knowledge(i)
        ents = entities(i)[: config.num_entities]
        records.append(QueryRecord(f"q{i:02d}", q, e, [PRODUCERS[i]], {"designed": designed}))
        e = records[-1].knowledge
        fx.add_chat("entities", {"question": q, "knowledge": e, "count": config.num_entities},
                    ["\n".join(f"{x.surface} | {x.weight}" for x in ents)])
        for x in ents:
            fx.add_chat("counterfactual", {"entity": x.surface}, [ALT[x.surface]])
        # two thirds memorized on designed questions, one third on controls
        n_memory = (2 * m) // 3 if designed else m // 3
        cots = [memory_cot(i, k) if k < n_memory else grounded_cot(i, PRODUCERS[i], k)
                for k in range(m)]
        fx.add_chat("cot", {"question": q, "knowledge": e}, cots)
        cfs = [CounterfactualEntity(t, ALT[x.surface], x.surface, x.weight)
               for t, x in enumerate(ents, 1)]
        for v in enumerate_variants(e, ents, cfs).variants:
            producer = PRODUCERS[i] if v.omitted_index == 1 else ALT[PRODUCERS[i]]
            n_mem_v = (3 * p) // 5
            replies = [memory_cot(i, k + 1) if k < n_mem_v else grounded_cot(i, producer, k + 1)
                       for k in range(p)]
            fx.add_chat("cot", {"question": q, "knowledge": v.text}, replies)
    return records, fx


def write(out_dir: str | Path, config: PipelineConfig = CONFIG) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, fx = build(config)
    paths = {"dataset": out / "dataset.jsonl", "fixture": out / "fixture.json",
             "config": out / "config.json"}
    write_records(records, paths["dataset"])
    fx.save(paths["fixture"])
    cfg = {k: v for k, v in config.to_json().items() if v is not None}
    paths["config"].write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return paths


if __name__ == "__main__":
    for name, path in write(sys.argv[1] if len(sys.argv) > 1 else "contrast_world").items():
        print(f"{name}: {path}")
