"""Causal DAGs, d-separation and graphical identification criteria.

Nodes are case-sensitive string labels. Every function here is pure and
returns new objects; a :class:`CausalDag` is never mutated after
construction.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

FORWARD = "->"
BACKWARD = "<-"

DEFAULT_PATH_CAP = 10_000


class GraphError(ValueError):
    """Malformed graph or invalid node reference."""


class CycleError(GraphError):
    pass


class PathLimitError(GraphError):
    pass


class LatentConditioningError(GraphError):
    """A latent node was supplied as an adjustment or conditioning variable."""


class GraphSpecError(GraphError):
    pass


def _as_set(nodes: Iterable[str] | str | None) -> frozenset[str]:
    if nodes is None:
        return frozenset()
    if isinstance(nodes, str):
        return frozenset([nodes])
    return frozenset(nodes)


@dataclass(frozen=True)
class CausalDag:
    nodes: frozenset[str]
    edges: frozenset[tuple[str, str]]
    latent: frozenset[str] = frozenset()
    _parents: dict = field(init=False, repr=False, compare=False, hash=False)
    _children: dict = field(init=False, repr=False, compare=False, hash=False)

    def __init__(self, nodes: Iterable[str], edges: Iterable[tuple[str, str]],
                 latent: Iterable[str] = ()):
        edge_list = [tuple(e) for e in edges]
        object.__setattr__(self, "nodes", frozenset(nodes))
        object.__setattr__(self, "edges", frozenset(edge_list))
        object.__setattr__(self, "latent", frozenset(latent))
        if len(edge_list) != len(self.edges):
            raise GraphError("duplicate edges")
        for a, b in edge_list:
            if a not in self.nodes or b not in self.nodes:
                raise GraphError(f"edge {a}->{b} references an undeclared node")
            if a == b:
                raise GraphError(f"self-loop on {a}")
        if not self.latent <= self.nodes:
            raise GraphError(f"latent nodes not declared: {sorted(self.latent - self.nodes)}")
        parents: dict[str, set[str]] = {v: set() for v in self.nodes}
        children: dict[str, set[str]] = {v: set() for v in self.nodes}
        for a, b in self.edges:
            parents[b].add(a)
            children[a].add(b)
        object.__setattr__(self, "_parents", {v: frozenset(p) for v, p in parents.items()})
        object.__setattr__(self, "_children", {v: frozenset(c) for v, c in children.items()})
        self.topological_order()  # raises on cycles

    @classmethod
    def from_edges(cls, edges: Iterable[str | tuple[str, str]], nodes: Iterable[str] = (),
                   latent: Iterable[str] = ()) -> "CausalDag":
        """Build from ``"U->Q"`` strings or pairs; nodes are inferred."""
        pairs = []
        for e in edges:
            if isinstance(e, str):
                a, b = (s.strip() for s in e.split("->"))
                pairs.append((a, b))
            else:
                pairs.append(tuple(e))
        all_nodes = set(nodes) | set(latent)
        for a, b in pairs:
            all_nodes.update((a, b))
        return cls(all_nodes, pairs, latent)

    def check_nodes(self, nodes: Iterable[str]) -> None:
        unknown = sorted(set(nodes) - self.nodes)
        if unknown:
            raise GraphError(f"unknown node(s): {', '.join(unknown)}")

    def parents(self, v: str) -> frozenset[str]:
        return self._parents[v]

    def children(self, v: str) -> frozenset[str]:
        return self._children[v]

    def observed(self) -> frozenset[str]:
        return self.nodes - self.latent

    def topological_order(self) -> list[str]:
        """Kahn's algorithm, lexicographic among ready nodes."""
        indeg = {v: len(self._parents[v]) for v in self.nodes}
        ready = sorted(v for v, d in indeg.items() if d == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for c in sorted(self._children[v]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(order) != len(self.nodes):
            stuck = sorted(v for v in self.nodes if v not in order)
            raise CycleError(f"graph has a cycle through {', '.join(stuck)}")
        return order

    def descendants(self, targets: Iterable[str] | str) -> frozenset[str]:
        """Nodes reachable by a directed path from some target, targets excluded."""
        targets = _as_set(targets)
        self.check_nodes(targets)
        return _reach(targets, self._children) - targets

    def to_json(self) -> dict:
        return {
            "nodes": sorted(self.nodes),
            "edges": [list(e) for e in sorted(self.edges)],
            "latent": sorted(self.latent),
        }

    def __str__(self) -> str:
        edges = ", ".join(f"{a}->{b}" for a, b in sorted(self.edges))
        lat = f"; latent {{{', '.join(sorted(self.latent))}}}" if self.latent else ""
        return f"CausalDag({edges}{lat})"


def _reach(start: frozenset[str], adjacency: dict[str, frozenset[str]]) -> frozenset[str]:
    seen = set(start)
    queue = deque(start)
    while queue:
        v = queue.popleft()
        for w in adjacency[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return frozenset(seen)


@dataclass(frozen=True)
class GraphPath:
    """A simple path; ``directions[i]`` is the edge between nodes i and i+1."""

    nodes: tuple[str, ...]
    directions: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise GraphError(f"path repeats a node: {self.nodes}")
        if len(self.directions) != len(self.nodes) - 1:
            raise GraphError("path needs one direction per step")

    def is_valid_in(self, dag: CausalDag) -> bool:
        for (a, b), d in zip(zip(self.nodes, self.nodes[1:]), self.directions):
            edge = (a, b) if d == FORWARD else (b, a)
            if edge not in dag.edges:
                return False
        return True

    def is_directed(self) -> bool:
        return all(d == FORWARD for d in self.directions)

    def colliders(self) -> list[str]:
        return [
            self.nodes[i]
            for i in range(1, len(self.nodes) - 1)
            if self.directions[i - 1] == FORWARD and self.directions[i] == BACKWARD
        ]

    def __str__(self) -> str:
        out = [self.nodes[0]]
        for d, v in zip(self.directions, self.nodes[1:]):
            out.append(f" {d} {v}")
        return "".join(out)


@dataclass(frozen=True)
class CriterionReport:
    criterion: str
    conditions: dict[str, bool]
    witnesses: dict[str, tuple[GraphPath, ...]]

    @property
    def satisfied(self) -> bool:
        return all(self.conditions.values())

    def all_witnesses(self) -> list[GraphPath]:
        return [p for k in sorted(self.witnesses) for p in self.witnesses[k]]

    def render(self) -> str:
        lines = [f"criterion: {self.criterion}",
                 f"satisfied: {'yes' if self.satisfied else 'no'}"]
        for cond, ok in self.conditions.items():
            lines.append(f"  [{'ok' if ok else 'FAIL'}] {cond}")
            for p in self.witnesses.get(cond, ()):
                lines.append(f"      witness: {p}")
        return "\n".join(lines)


class DSeparation(NamedTuple):
    separated: bool
    witnesses: tuple[GraphPath, ...]


def mutilate(dag: CausalDag, cut_incoming: Iterable[str] = (),
             cut_outgoing: Iterable[str] = ()) -> CausalDag:
    """Drop edges into ``cut_incoming`` and out of ``cut_outgoing``."""
    cut_in, cut_out = _as_set(cut_incoming), _as_set(cut_outgoing)
    dag.check_nodes(cut_in | cut_out)
    kept = [(a, b) for a, b in dag.edges if b not in cut_in and a not in cut_out]
    return CausalDag(dag.nodes, kept, dag.latent)


def ancestors(dag: CausalDag, targets: Iterable[str] | str) -> frozenset[str]:
    targets = _as_set(targets)
    dag.check_nodes(targets)
    return _reach(targets, dag._parents) - targets


def enumerate_paths(dag: CausalDag, x: str, y: str, cap: int = DEFAULT_PATH_CAP) -> list[GraphPath]:
    """All simple undirected paths from x to y, sorted by node sequence."""
    dag.check_nodes([x, y])
    if x == y:
        raise GraphError("path endpoints must differ")
    found: list[GraphPath] = []
    nodes, dirs = [x], []
    on_path = {x}

    def step(v: str) -> None:
        nbrs = [(c, FORWARD) for c in dag.children(v)] + [(p, BACKWARD) for p in dag.parents(v)]
        for w, d in sorted(nbrs):
            if w in on_path:
                continue
            nodes.append(w)
            dirs.append(d)
            if w == y:
                found.append(GraphPath(tuple(nodes), tuple(dirs)))
                if len(found) > cap:
                    raise PathLimitError(f"more than {cap} paths between {x} and {y}")
            else:
                on_path.add(w)
                step(w)
                on_path.discard(w)
            nodes.pop()
            dirs.pop()

    step(x)
    found.sort(key=lambda p: p.nodes)
    return found


def is_blocked(dag: CausalDag, path: GraphPath, given: Iterable[str]) -> bool:
    given = _as_set(given)
    for i in range(1, len(path.nodes) - 1):
        v = path.nodes[i]
        collider = path.directions[i - 1] == FORWARD and path.directions[i] == BACKWARD
        if collider:
            if v not in given and not (dag.descendants(v) & given):
                return True
        elif v in given:
            return True
    return False


def _check_disjoint(**sets: frozenset[str]) -> None:
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = sets[a] & sets[b]
            if common:
                raise GraphError(f"{a} and {b} overlap on {sorted(common)}")


def d_separated(dag: CausalDag, xs: Iterable[str] | str, ys: Iterable[str] | str,
                given: Iterable[str] | str = ()) -> DSeparation:
    """Test ``xs ⫫ ys | given``.

    The verdict uses the moralized ancestral graph; witness paths (only
    collected when the sets are connected) come from path enumeration.
    """
    xs, ys, given = _as_set(xs), _as_set(ys), _as_set(given)
    dag.check_nodes(xs | ys | given)
    _check_disjoint(X=xs, Y=ys, Z=given)
    if not xs or not ys:
        return DSeparation(True, ())
    separated = _moral_separated(dag, xs, ys, given)
    if separated:
        return DSeparation(True, ())
    witnesses = []
    for x in sorted(xs):
        for y in sorted(ys):
            for p in enumerate_paths(dag, x, y):
                if not is_blocked(dag, p, given):
                    witnesses.append(p)
    return DSeparation(False, tuple(witnesses))


def _moral_separated(dag: CausalDag, xs, ys, given) -> bool:
    relevant = xs | ys | given
    keep = relevant | ancestors(dag, relevant)
    adj: dict[str, set[str]] = {v: set() for v in keep}
    for v in keep:
        pa = [p for p in dag.parents(v) if p in keep]
        for p in pa:
            adj[v].add(p)
            adj[p].add(v)
        for i, p in enumerate(pa):
            for q in pa[i + 1:]:
                adj[p].add(q)
                adj[q].add(p)
    seen = set(xs)
    queue = deque(xs)
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w in given or w in seen:
                continue
            if w in ys:
                return False
            seen.add(w)
            queue.append(w)
    return True


def backdoor_paths(dag: CausalDag, x: str, y: str) -> list[GraphPath]:
    return [p for p in enumerate_paths(dag, x, y) if p.directions[0] == BACKWARD]


def directed_paths(dag: CausalDag, x: str, y: str) -> list[GraphPath]:
    return [p for p in enumerate_paths(dag, x, y) if p.is_directed()]


def _refuse_latent(dag: CausalDag, **sets: frozenset[str]) -> None:
    for name, s in sets.items():
        bad = sorted(s & dag.latent)
        if bad:
            raise LatentConditioningError(f"{name} contains latent node(s) {bad}")


def check_backdoor(dag: CausalDag, x: str, y: str, adjust: Iterable[str]) -> CriterionReport:
    """Back-door criterion; latent nodes are allowed in ``adjust``."""
    adjust = _as_set(adjust)
    dag.check_nodes(adjust | {x, y})
    _check_disjoint(adjust=adjust, endpoints=frozenset({x, y}))
    desc = dag.descendants(x) & adjust
    open_paths = tuple(p for p in backdoor_paths(dag, x, y) if not is_blocked(dag, p, adjust))
    return CriterionReport(
        "backdoor",
        {"no adjustment node descends from the treatment": not desc,
         "adjustment set blocks every back-door path": not open_paths},
        {"adjustment set blocks every back-door path": open_paths},
    )


def _frontdoor_conditions(dag, z, w, x, y) -> tuple[dict, dict]:
    c1 = "mediators intercept every directed path"
    c2 = "back-door paths treatment->mediators blocked"
    c3 = "back-door paths mediators->outcome blocked"
    unintercepted = tuple(p for p in directed_paths(dag, x, y) if not set(p.nodes[1:-1]) & z)
    c2_open = tuple(
        p for m in sorted(z) for p in backdoor_paths(dag, x, m) if not is_blocked(dag, p, w)
    )
    c3_open = tuple(
        p for m in sorted(z) for p in backdoor_paths(dag, m, y)
        if not is_blocked(dag, p, w | {x})
    )
    conditions = {c1: not unintercepted, c2: not c2_open, c3: not c3_open}
    witnesses = {c1: unintercepted, c2: c2_open, c3: c3_open}
    return conditions, witnesses


def check_standard_frontdoor(dag: CausalDag, z: Iterable[str], x: str, y: str) -> CriterionReport:
    z = _as_set(z)
    dag.check_nodes(z | {x, y})
    _check_disjoint(Z=z, endpoints=frozenset({x, y}))
    _refuse_latent(dag, Z=z)
    conditions, witnesses = _frontdoor_conditions(dag, z, frozenset(), x, y)
    return CriterionReport("standard front-door", conditions, witnesses)


def check_conditional_frontdoor(dag: CausalDag, z: Iterable[str], w: Iterable[str],
                                x: str, y: str) -> CriterionReport:
    z, w = _as_set(z), _as_set(w)
    dag.check_nodes(z | w | {x, y})
    _check_disjoint(Z=z, W=w, endpoints=frozenset({x, y}))
    _refuse_latent(dag, Z=z, W=w)
    conditions, witnesses = _frontdoor_conditions(dag, z, w, x, y)
    return CriterionReport("conditional front-door", conditions, witnesses)


class RuleCheck(NamedTuple):
    applicable: bool
    graph: CausalDag


def rule_applicable(dag: CausalDag, rule: int, do: Iterable[str], z: Iterable[str],
                    w: Iterable[str], outcome: Iterable[str]) -> RuleCheck:
    """Graphical side condition of do-calculus rule 1, 2 or 3.

    Returns the verdict for ``outcome ⫫ z | do ∪ w`` in the rule's
    mutilated graph, together with that graph.
    """
    do, z, w, outcome = map(_as_set, (do, z, w, outcome))
    dag.check_nodes(do | z | w | outcome)
    _check_disjoint(do=do, z=z, w=w, outcome=outcome)
    if rule == 1:
        g = mutilate(dag, cut_incoming=do)
    elif rule == 2:
        g = mutilate(dag, cut_incoming=do, cut_outgoing=z)
    elif rule == 3:
        g_do = mutilate(dag, cut_incoming=do)
        z_w = z - ancestors(g_do, w)
        g = mutilate(dag, cut_incoming=do | z_w)
    else:
        raise ValueError(f"rule must be 1, 2 or 3, got {rule!r}")
    return RuleCheck(d_separated(g, outcome, z, do | w).separated, g)


class AuditStep(NamedTuple):
    description: str
    rule: int
    passed: bool


# (rewrite, rule, do, z, w, outcome) for each graphical step behind the
# conditional front-door formula with mediator C and conditioning set E.
_CFD_STEPS = [
    ("P(A|do(Q),c,e) = P(A|do(Q),do(c),e): (A _||_ C | Q,E) with Q in-cut, C out-cut",
     2, {"Q"}, {"C"}, {"E"}, {"A"}),
    ("P(A|do(Q),do(c),e) = P(A|do(c),e): (A _||_ Q | C,E) with C and Q(E) in-cut",
     3, {"C"}, {"Q"}, {"E"}, {"A"}),
    ("P(A|do(c),q,e) = P(A|c,q,e): (A _||_ C | Q,E) with C out-cut",
     2, set(), {"C"}, {"Q", "E"}, {"A"}),
    ("P(q|do(c),e) = P(q|e): (Q _||_ C | E) with C(E) in-cut",
     3, set(), {"C"}, {"E"}, {"Q"}),
]


def audit_cfd_derivation(dag: CausalDag) -> list[AuditStep]:
    """Re-check the four do-calculus steps licensing the CFD formula.

    Expects nodes labelled ``Q`` (query), ``A`` (answer), ``C`` (chain of
    thought) and ``E`` (external knowledge).
    """
    missing = sorted({"Q", "A", "C", "E"} - dag.nodes)
    if missing:
        raise GraphError(f"derivation audit needs node(s) {', '.join(missing)}")
    return [
        AuditStep(desc, rule, rule_applicable(dag, rule, do, z, w, out).applicable)
        for desc, rule, do, z, w, out in _CFD_STEPS
    ]


def load_graph_spec(source: str | Path | dict) -> CausalDag:
    """Read ``{"nodes": [...], "edges": [[a, b], ...], "latent": [...]}``."""
    if isinstance(source, dict):
        data = source
    else:
        text = Path(source).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphSpecError(f"{source}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return graph_from_dict(data)


def graph_from_dict(data: dict) -> CausalDag:
    if not isinstance(data, dict):
        raise GraphSpecError("graph spec must be an object")
    nodes = data.get("nodes")
    if not isinstance(nodes, list) or not all(isinstance(n, str) for n in nodes):
        raise GraphSpecError("field 'nodes': expected a list of strings")
    edges = data.get("edges", [])
    if not isinstance(edges, list):
        raise GraphSpecError("field 'edges': expected a list of [from, to] pairs")
    for i, e in enumerate(edges):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(s, str) for s in e)):
            raise GraphSpecError(f"field 'edges[{i}]': expected [from, to], got {e!r}")
    latent = data.get("latent", [])
    if not isinstance(latent, list) or not all(isinstance(n, str) for n in latent):
        raise GraphSpecError("field 'latent': expected a list of strings")
    if len(set(nodes)) != len(nodes):
        raise GraphSpecError("field 'nodes': duplicate labels")
    try:
        return CausalDag(nodes, [tuple(e) for e in edges], latent)
    except GraphError as exc:
        raise GraphSpecError(str(exc)) from exc


# Graphs from the three reasoning models: direct answering, answering through a
# chain of thought, and chain of thought with external knowledge.
FIG_DIRECT = CausalDag.from_edges(["U->Q", "U->A", "Q->A"], latent=["U"])
FIG_COT = CausalDag.from_edges(["U->Q", "U->A", "Q->C", "C->A"], latent=["U"])
FIG_KNOWLEDGE = CausalDag.from_edges(
    ["U->Q", "U->A", "E->Q", "E->C", "Q->C", "C->A"], latent=["U"]
)
