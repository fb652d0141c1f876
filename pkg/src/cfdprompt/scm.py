"""Discrete structural causal models as an exact oracle for adjustment formulas.

Each node carries a conditional probability table (CPT) shaped
``(*parent_cards, card)`` with parents in sorted label order. Joint and
interventional distributions are computed by exact enumeration, which keeps
the oracle independent of the adjustment formulas it checks.
"""

from __future__ import annotations

import itertools
import json
import math
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .graph import (
    CausalDag,
    GraphError,
    _as_set,
    check_backdoor,
    check_conditional_frontdoor,
    check_standard_frontdoor,
    graph_from_dict,
    mutilate,
)

DEFAULT_STATE_CAP = 10**7
CPT_TOL = 1e-12


class ScmError(ValueError):
    pass


class StateSpaceError(ScmError):
    pass


class CriterionViolation(ScmError):
    """The requested adjustment set does not license a causal reading."""


class PositivityError(ScmError):
    """A positive weight multiplies a conditional on a zero-probability event."""


@dataclass(frozen=True)
class Distribution:
    """Dense probability table over ``variables`` (one axis per variable)."""

    variables: tuple[str, ...]
    table: np.ndarray

    def marginal(self, variables: Iterable[str]) -> "Distribution":
        variables = tuple(variables)
        missing = set(variables) - set(self.variables)
        if missing:
            raise ScmError(f"not in distribution: {sorted(missing)}")
        drop = tuple(i for i, v in enumerate(self.variables) if v not in variables)
        t = self.table.sum(axis=drop) if drop else self.table
        kept = [v for v in self.variables if v in variables]
        t = np.transpose(t, [kept.index(v) for v in variables])
        return Distribution(variables, t)

    def prob(self, assignment: Mapping[str, int]) -> float:
        """Probability of a (possibly partial) assignment."""
        m = self.marginal([v for v in self.variables if v in assignment])
        return float(m.table[tuple(assignment[v] for v in m.variables)])

    def items(self):
        for idx in itertools.product(*(range(k) for k in self.table.shape)):
            yield idx, float(self.table[idx])

    def total(self) -> float:
        return float(self.table.sum())


@dataclass(frozen=True, eq=False)
class DiscreteScm:
    dag: CausalDag
    cardinality: Mapping[str, int]
    cpts: Mapping[str, np.ndarray]

    def __post_init__(self):
        dag = self.dag
        if set(self.cardinality) != dag.nodes or set(self.cpts) != dag.nodes:
            raise ScmError("cardinalities and CPTs must cover exactly the DAG's nodes")
        cpts = {}
        for v in sorted(dag.nodes):
            k = self.cardinality[v]
            if int(k) != k or k < 2:
                raise ScmError(f"cardinality of {v} must be an integer >= 2")
            table = np.asarray(self.cpts[v], dtype=float)
            shape = tuple(self.cardinality[p] for p in self.parent_order(v)) + (k,)
            if table.shape != shape:
                raise ScmError(f"CPT for {v} has shape {table.shape}, expected {shape}")
            if (table < 0).any():
                raise ScmError(f"CPT for {v} has negative entries")
            sums = table.sum(axis=-1)
            if np.abs(sums - 1.0).max() > CPT_TOL:
                raise ScmError(f"CPT rows for {v} do not sum to 1")
            table = table.copy()
            table.setflags(write=False)
            cpts[v] = table
        object.__setattr__(self, "cardinality", dict(self.cardinality))
        object.__setattr__(self, "cpts", cpts)

    def parent_order(self, v: str) -> list[str]:
        return sorted(self.dag.parents(v))

    def state_count(self) -> int:
        return math.prod(self.cardinality.values())


def joint(scm: DiscreteScm, cap: int = DEFAULT_STATE_CAP) -> Distribution:
    """Markov factorization: product of every CPT, axes in sorted node order."""
    if scm.state_count() > cap:
        raise StateSpaceError(f"{scm.state_count()} joint states exceed the cap of {cap}")
    order = sorted(scm.dag.nodes)
    if len(order) > len(string.ascii_letters):
        raise StateSpaceError("too many variables for dense enumeration")
    letter = dict(zip(order, string.ascii_letters))
    operands, subscripts = [], []
    for v in order:
        operands.append(scm.cpts[v])
        subscripts.append("".join(letter[p] for p in scm.parent_order(v)) + letter[v])
    expr = ",".join(subscripts) + "->" + "".join(letter[v] for v in order)
    return Distribution(tuple(order), np.einsum(expr, *operands))


def observed_joint(scm: DiscreteScm) -> Distribution:
    return joint(scm).marginal(sorted(scm.dag.observed()))


def intervene(scm: DiscreteScm, node: str, value: int) -> DiscreteScm:
    """do(node = value): cut the node's incoming edges, point-mass CPT."""
    scm.dag.check_nodes([node])
    k = scm.cardinality[node]
    if not 0 <= value < k:
        raise ScmError(f"state {value} out of range for {node} (cardinality {k})")
    cpts = dict(scm.cpts)
    cpts[node] = np.eye(k)[value]
    return DiscreteScm(mutilate(scm.dag, cut_incoming=[node]), scm.cardinality, cpts)


def interventional_truth(scm: DiscreteScm, q: str, a: str) -> np.ndarray:
    """Row ``i`` is P(a | do(q = i)) by truncated factorization."""
    return np.stack([
        joint(intervene(scm, q, i)).marginal([a]).table
        for i in range(scm.cardinality[q])
    ])


def _states(scm_card: Mapping[str, int], nodes: Iterable[str]):
    nodes = list(nodes)
    for combo in itertools.product(*(range(scm_card[v]) for v in nodes)):
        yield dict(zip(nodes, combo))


def backdoor_estimate(scm: DiscreteScm, q: str, a: str, adjust: Iterable[str]) -> np.ndarray:
    """Back-door adjustment Σ_u P(a | q, u) P(u); latent adjusters are allowed."""
    adjust = sorted(_as_set(adjust))
    report = check_backdoor(scm.dag, q, a, adjust)
    if not report.satisfied:
        raise CriterionViolation(report.render())
    dist = joint(scm).marginal([q, a] + adjust)
    t = dist.table  # axes: q, a, adjust...
    p_qu = t.sum(axis=1)
    p_u = p_qu.sum(axis=0)
    out = np.zeros((scm.cardinality[q], scm.cardinality[a]))
    for qi in range(scm.cardinality[q]):
        for u in itertools.product(*(range(scm.cardinality[v]) for v in adjust)):
            w = p_u[u]
            if w == 0.0:
                continue
            denom = p_qu[(qi,) + u]
            if denom == 0.0:
                raise PositivityError(f"P({q}={qi}, {adjust}={u}) = 0 under positive weight")
            out[qi] += w * t[(qi, slice(None)) + u] / denom
    return out


def frontdoor_formula(dist: Distribution, q: str, a: str, z: Iterable[str],
                      w: Iterable[str] = ()) -> np.ndarray:
    """Σ_w P(w) Σ_z P(z | q, w) Σ_q' P(a | z, q', w) P(q' | w), unchecked.

    With empty ``w`` this is the nested standard front-door formula. No
    graphical check happens here; callers decide whether the number means
    anything causal.
    """
    z, w = sorted(_as_set(z)), sorted(_as_set(w))
    t = dist.marginal([q, a] + z + w).table  # axes: q, a, z..., w...
    nq, na = t.shape[0], t.shape[1]
    zshape, wshape = t.shape[2:2 + len(z)], t.shape[2 + len(z):]
    p_qzw = t.sum(axis=1)  # q, z..., w...
    p_qw = p_qzw.sum(axis=tuple(range(1, 1 + len(z))))  # q, w...
    p_w = p_qw.sum(axis=0)
    out = np.zeros((nq, na))
    zs = list(itertools.product(*(range(k) for k in zshape)))
    ws = list(itertools.product(*(range(k) for k in wshape)))
    for q0 in range(nq):
        for wv in ws:
            pw = p_w[wv]
            if pw == 0.0:
                continue
            if p_qw[(q0,) + wv] == 0.0:
                raise PositivityError(f"P({q}={q0}, {w}={wv}) = 0 under positive weight")
            for zv in zs:
                pz = p_qzw[(q0,) + zv + wv] / p_qw[(q0,) + wv]
                if pz == 0.0:
                    continue
                for q1 in range(nq):
                    pq = p_qw[(q1,) + wv] / pw
                    if pq == 0.0:
                        continue
                    denom = p_qzw[(q1,) + zv + wv]
                    if denom == 0.0:
                        raise PositivityError(
                            f"P({q}={q1}, {z}={zv}, {w}={wv}) = 0 under positive weight")
                    p_a = t[(q1, slice(None)) + zv + wv] / denom
                    out[q0] += pw * pz * pq * p_a
    return out


def sfd_estimate(scm: DiscreteScm, q: str, a: str, z: Iterable[str]) -> np.ndarray:
    report = check_standard_frontdoor(scm.dag, z, q, a)
    if not report.satisfied:
        raise CriterionViolation(report.render())
    return frontdoor_formula(observed_joint(scm), q, a, z)


def cfd_estimate(scm: DiscreteScm, q: str, a: str, z: Iterable[str],
                 w: Iterable[str]) -> np.ndarray:
    report = check_conditional_frontdoor(scm.dag, z, w, q, a)
    if not report.satisfied:
        raise CriterionViolation(report.render())
    return frontdoor_formula(observed_joint(scm), q, a, z, w)


def random_scm(dag: CausalDag, seed: int | np.random.Generator,
               cardinality: int | Mapping[str, int] = 2, floor: float = 0.01) -> DiscreteScm:
    """Uniform CPT entries, clamped to ``floor`` and normalized per row."""
    rng = np.random.default_rng(seed)
    if isinstance(cardinality, int):
        cardinality = {v: cardinality for v in dag.nodes}
    cpts = {}
    for v in sorted(dag.nodes):
        shape = tuple(cardinality[p] for p in sorted(dag.parents(v))) + (cardinality[v],)
        raw = np.maximum(rng.uniform(size=shape), floor)
        cpts[v] = raw / raw.sum(axis=-1, keepdims=True)
    return DiscreteScm(dag, cardinality, cpts)


def scm_from_dict(data: dict) -> DiscreteScm:
    """Parse an SCM spec.

    Besides the graph fields, ``cardinality`` maps node -> states (default
    2) and ``cpts`` maps node -> ``{"parents": [...], "rows": [[...], ...]}``
    where rows enumerate parent assignments in listed order, last parent
    varying fastest.
    """
    try:
        dag = graph_from_dict(data)
    except GraphError as exc:
        raise ScmError(str(exc)) from exc
    card = {v: 2 for v in dag.nodes}
    card.update(data.get("cardinality", {}))
    raw = data.get("cpts")
    if not isinstance(raw, dict):
        raise ScmError("field 'cpts': expected an object keyed by node")
    cpts = {}
    for v in sorted(dag.nodes):
        if v not in raw:
            raise ScmError(f"field 'cpts': missing table for {v}")
        entry = raw[v]
        parents = list(entry.get("parents", []))
        if set(parents) != set(dag.parents(v)) or len(parents) != len(set(parents)):
            raise ScmError(f"field 'cpts.{v}.parents': expected {sorted(dag.parents(v))}")
        rows = np.asarray(entry.get("rows"), dtype=float)
        shape = tuple(card[p] for p in parents) + (card[v],)
        if rows.size != math.prod(shape):
            raise ScmError(f"field 'cpts.{v}.rows': expected {math.prod(shape[:-1])} rows "
                           f"of {card[v]} entries")
        table = rows.reshape(shape)
        perm = [parents.index(p) for p in sorted(parents)] + [len(parents)]
        cpts[v] = np.transpose(table, perm)
    return DiscreteScm(dag, card, cpts)


def scm_to_dict(scm: DiscreteScm) -> dict:
    out = scm.dag.to_json()
    out["cardinality"] = {v: scm.cardinality[v] for v in sorted(scm.dag.nodes)}
    out["cpts"] = {
        v: {"parents": scm.parent_order(v),
            "rows": scm.cpts[v].reshape(-1, scm.cardinality[v]).tolist()}
        for v in sorted(scm.dag.nodes)
    }
    return out


def load_scm_spec(path: str | Path) -> DiscreteScm:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScmError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return scm_from_dict(data)
