"""Command-line entry point: ``cfdprompt {identify,oracle,run,eval,perturb,prepare}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, PipelineConfig
from .gateway import BackendError, Gateway, OpenAICompatibleBackend, ScriptedBackend, ScriptedFixture, Trace
from .graph import (
    FIG_KNOWLEDGE,
    GraphError,
    audit_cfd_derivation,
    check_backdoor,
    check_conditional_frontdoor,
    check_standard_frontdoor,
    load_graph_spec,
)
from .pipeline import METHODS, Pipeline, run_dataset, write_outputs
from .scm import (
    DiscreteScm,
    ScmError,
    backdoor_estimate,
    cfd_estimate,
    frontdoor_formula,
    interventional_truth,
    load_scm_spec,
    observed_joint,
    random_scm,
    sfd_estimate,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _node_list(text: str | None) -> list[str]:
    if not text:
        return []
    return [s.strip() for s in text.split(",") if s.strip()]


# --- identify ----------------------------------------------------------------

def cmd_identify(args) -> int:
    try:
        dag = load_graph_spec(args.spec)
        if args.criterion == "audit":
            steps = audit_cfd_derivation(dag)
            for i, step in enumerate(steps, 1):
                print(f"step {i} (rule {step.rule}): {'pass' if step.passed else 'FAIL'}  {step.description}")
            ok = all(s.passed for s in steps)
            print(f"derivation: {'pass' if ok else 'FAIL'}")
            return EXIT_OK if ok else EXIT_FAIL
        z, w = _node_list(args.z), _node_list(args.w)
        if args.criterion == "backdoor":
            report = check_backdoor(dag, args.x, args.y, z)
        elif args.criterion == "frontdoor":
            report = check_standard_frontdoor(dag, z, args.x, args.y)
        else:
            report = check_conditional_frontdoor(dag, z, w, args.x, args.y)
    except GraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(report.render())
    return EXIT_OK if report.satisfied else EXIT_FAIL


# --- oracle ------------------------------------------------------------------

def oracle_rows(scms: list[DiscreteScm], q: str, a: str, mediator: list[str],
                condition: list[str]) -> list[tuple[str, int, float | None, str]]:
    """(estimator, instances, max |estimate - truth|, note) per estimator."""
    rows: dict[str, list] = {}

    def track(name, fn, scm, truth):
        try:
            dev = float(np.abs(fn(scm) - truth).max())
        except ScmError as exc:
            rows.setdefault(name, []).append(("n/a", type(exc).__name__))
            return
        rows.setdefault(name, []).append((dev, ""))

    for scm in scms:
        truth = interventional_truth(scm, q, a)
        parents = sorted(scm.dag.parents(q))
        track(f"back-door (adjust {{{','.join(parents)}}})",
              lambda s: backdoor_estimate(s, q, a, parents), scm, truth)
        track("standard front-door", lambda s: sfd_estimate(s, q, a, mediator), scm, truth)
        if condition and set(condition) <= scm.dag.nodes:
            track(f"front-door ignoring {','.join(condition)} (unchecked)",
                  lambda s: frontdoor_formula(observed_joint(s), q, a, mediator), scm, truth)
            track("conditional front-door", lambda s: cfd_estimate(s, q, a, mediator, condition),
                  scm, truth)
    out = []
    for name, results in rows.items():
        devs = [d for d, _ in results if d != "n/a"]
        notes = sorted({n for _, n in results if n})
        out.append((name, len(devs), max(devs) if devs else None, ", ".join(notes)))
    return out


def cmd_oracle(args) -> int:
    try:
        if args.random:
            dag = load_graph_spec(args.graph) if args.graph else FIG_KNOWLEDGE
            scms = [random_scm(dag, args.seed + i) for i in range(args.random)]
        elif args.spec:
            scms = [load_scm_spec(args.spec)]
        else:
            print("error: give an SCM spec or --random COUNT", file=sys.stderr)
            return EXIT_USAGE
        rows = oracle_rows(scms, args.treatment, args.outcome, _node_list(args.mediator),
                           _node_list(args.condition))
    except (ScmError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"{'estimator':<44} {'instances':>9} {'max |dev|':>12}  note")
    for name, count, dev, note in rows:
        shown = f"{dev:.3e}" if dev is not None else "n/a"
        print(f"{name:<44} {count:>9} {shown:>12}  {note}")
    return EXIT_OK


# --- run / eval / perturb ---------------------------------------------------------

def build_gateway(config: PipelineConfig, fixture: str | None, timing: bool = False) -> Gateway:
    if fixture:
        backend = ScriptedBackend(ScriptedFixture.load(fixture))
    else:
        backend = OpenAICompatibleBackend.from_env(config.chat_model, config.embedding_model,
                                                   config.api_base)
    return Gateway(backend, retries=config.retries, backoff=config.backoff,
                   backoff_factor=config.backoff_factor, parallelism=config.parallelism,
                   cache_dir=config.cache_dir, trace=Trace(timing=timing), seed=config.seed)


def perturb_records(records: list[ev.QueryRecord], mode: str, seed: int) -> list[ev.QueryRecord]:
    if mode == "none":
        return records
    if mode == "inject":
        return [ev.perturb_inject(r, ev.distractor_pool(records, r), seed) for r in records]
    if mode == "shuffle":
        return [ev.perturb_shuffle(r, seed) for r in records]
    raise ValueError(f"unknown perturbation {mode!r}")


def cmd_run(args) -> int:
    try:
        config = PipelineConfig.load(args.config).replace(
            seed=args.seed, num_cots=args.num_cots, num_clusters=args.num_clusters,
            num_entities=args.num_entities, cots_per_variant=args.cots_per_variant,
            similarity_threshold=args.threshold, parallelism=args.parallelism,
            fail_fast=True if args.fail_fast else None)
        records = perturb_records(ev.read_records(args.dataset), args.perturb, config.seed)
        gateway = build_gateway(config, args.fixture)
    except (ConfigError, ev.DatasetError, BackendError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    pipeline = Pipeline(gateway, config)
    try:
        results = run_dataset(pipeline, records, args.method)
    except (BackendError, ValueError) as exc:
        print(f"error (fail-fast): {exc}", file=sys.stderr)
        return EXIT_FAIL
    paths = write_outputs(results, args.out, config, gateway.trace.canonical())
    if args.perturb != "none":
        ev.write_records(records, Path(args.out) / f"dataset.{args.perturb}.jsonl")
    preds = {r.id: r.prediction for r in results}
    report = ev.score(preds, records, args.method, config.digest(), config.seed)
    (Path(args.out) / "metrics.jsonl").write_text(report.jsonl())
    print(report.table())
    failed = [r.id for r in results if r.error]
    if failed:
        print(f"{len(failed)} record(s) failed: {', '.join(failed)}", file=sys.stderr)
    print(f"wrote {paths['predictions']}")
    return EXIT_FAIL if failed else EXIT_OK


def read_predictions(path: str | Path) -> dict[str, str]:
    preds: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        row = json.loads(line)
        if row["id"] in preds:
            raise ev.DatasetError(f"{path}:{n}: duplicate prediction id {row['id']!r}")
        preds[row["id"]] = row.get("prediction", "")
    return preds


def cmd_eval(args) -> int:
    try:
        preds = read_predictions(args.predictions)
        records = ev.read_records(args.dataset)
        report = ev.score(preds, records, args.method or "", "", 0)
    except (ev.DatasetError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.jsonl())
    return EXIT_OK


def cmd_perturb(args) -> int:
    try:
        records = perturb_records(ev.read_records(args.dataset), args.mode, args.seed)
    except ev.DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ev.write_records(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    try:
        if args.format == "musique":
            records, stats = ev.load_musique(args.source, min_hops=args.min_hops)
            print(json.dumps(stats, sort_keys=True))
        else:
            records = ev.LOADERS[args.format](args.source)
    except (KeyError, OSError, json.JSONDecodeError, ev.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ev.write_records(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfdprompt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identify", help="check an identification criterion on a graph spec")
    p.add_argument("spec")
    p.add_argument("--criterion", default="conditional-frontdoor",
                   choices=["backdoor", "frontdoor", "conditional-frontdoor", "audit"])
    p.add_argument("-x", default="Q", help="treatment node")
    p.add_argument("-y", default="A", help="outcome node")
    p.add_argument("-z", help="comma-separated mediator / adjustment set")
    p.add_argument("-w", help="comma-separated conditioning set")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("oracle", help="compare adjustment formulas with interventional truth")
    p.add_argument("spec", nargs="?")
    p.add_argument("--random", type=int, metavar="COUNT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graph", help="graph spec for --random (default: Q,A,C,E,U model)")
    p.add_argument("--treatment", default="Q")
    p.add_argument("--outcome", default="A")
    p.add_argument("--mediator", default="C")
    p.add_argument("--condition", default="E")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("run", help="answer every record of a normalized dataset")
    p.add_argument("dataset")
    p.add_argument("--config")
    p.add_argument("--fixture", help="scripted fixture file; omit to use the wire backend")
    p.add_argument("--method", choices=METHODS, default="cfd")
    p.add_argument("--perturb", choices=["none", "inject", "shuffle"], default="none")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--seed", type=int)
    p.add_argument("-M", "--num-cots", type=int)
    p.add_argument("-N", "--num-clusters", type=int)
    p.add_argument("-T", "--num-entities", type=int)
    p.add_argument("-P", "--cots-per-variant", type=int)
    p.add_argument("-s", "--threshold", type=float)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--fail-fast", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="EM/F1 of a predictions file")
    p.add_argument("predictions")
    p.add_argument("dataset")
    p.add_argument("--method")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="write a perturbed copy of a dataset")
    p.add_argument("dataset")
    p.add_argument("--mode", choices=["inject", "shuffle"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("prepare", help="normalize a published benchmark file to JSONL")
    p.add_argument("format", choices=["hotpotqa", "sciq", "wikihop", "musique"])
    p.add_argument("source")
    p.add_argument("--out", required=True)
    p.add_argument("--min-hops", type=int, default=4)
    p.set_defaults(func=cmd_prepare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
