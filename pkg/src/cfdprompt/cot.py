"""Chain-of-thought sampling, clustering and the similarity gate."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .effect import extract_answer
from .gateway import BackendError, ChatRequest, Gateway

MAX_ITER = 100
SHIFT_TOL = 1e-6
TIE_TOL = 1e-12


class SamplingError(BackendError):
    def __init__(self, message: str, index: int, partial: list):
        super().__init__(message)
        self.index = index
        self.partial = partial


@dataclass(frozen=True)
class CotSample:
    text: str
    answer: str
    found: bool
    embedding: np.ndarray | None = None

    @classmethod
    def from_text(cls, text: str) -> "CotSample":
        answer, found = extract_answer(text)
        return cls(text, answer, found)


@dataclass(frozen=True)
class ClusterSet:
    assignments: np.ndarray  # sample index -> cluster id
    centroids: np.ndarray
    medoids: tuple[int, ...]

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    def members(self, j: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.assignments == j)]

    def sizes(self) -> list[int]:
        return [int((self.assignments == j).sum()) for j in range(self.n_clusters)]


@dataclass(frozen=True)
class ConsistencyRecord:
    cluster_id: int
    variant_index: int
    indicators: tuple[int, ...]
    similarities: tuple[float, ...]

    @property
    def probability(self) -> float:
        return sum(self.indicators) / len(self.indicators)


def sample_cots(gateway: Gateway, query: str, knowledge: str, count: int, seed: int = 0,
                temperature: float = 0.7, max_tokens: int = 512) -> list[CotSample]:
    if count < 1:
        raise ValueError("need at least one CoT")
    variables = {"question": query, "knowledge": knowledge}
    requests = [ChatRequest("cot", variables, repetition=i, temperature=temperature,
                            max_tokens=max_tokens, seed=seed + i) for i in range(count)]
    replies = gateway.chat_many(requests, return_exceptions=True)
    for i, r in enumerate(replies):
        if isinstance(r, BaseException):
            done = [CotSample.from_text(x.text) for x in replies if not isinstance(x, BaseException)]
            raise SamplingError(f"CoT request {i + 1} of {count} failed: {r}", i, done) from r
    return [CotSample.from_text(r.text) for r in replies]


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero vector")
    return vectors / norms


def embed(gateway: Gateway, texts: Sequence[str]) -> np.ndarray:
    """Unit-norm embeddings, one row per text, whatever the backend returns."""
    if not texts:
        raise ValueError("nothing to embed")
    return normalize_rows(gateway.embed_batch(list(texts)))


def embed_samples(gateway: Gateway, samples: Sequence[CotSample]) -> list[CotSample]:
    vecs = embed(gateway, [s.text for s in samples])
    return [replace(s, embedding=v) for s, v in zip(samples, vecs)]


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = len(x)
    chosen = [int(rng.integers(m))]
    for _ in range(1, k):
        d2 = _sq_dists(x, x[chosen]).min(axis=1)
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen center
            chosen.append(next(i for i in range(m) if i not in chosen))
        else:
            chosen.append(int(rng.choice(m, p=d2 / total)))
    return x[chosen].copy()


def _repair_empty(x, labels, centers, k) -> np.ndarray:
    labels = labels.copy()
    for j in range(k):
        if (labels == j).any():
            continue
        sizes = np.bincount(labels, minlength=k)
        d2 = ((x - centers[labels]) ** 2).sum(axis=1)
        d2[sizes[labels] <= 1] = -1.0
        labels[int(np.argmax(d2))] = j
    return labels


def medoids(vectors: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> tuple[int, ...]:
    """Per cluster, the member nearest its centroid; near-ties go to the lower index."""
    out = []
    for j, c in enumerate(centroids):
        idx = np.flatnonzero(assignments == j)
        d = np.sqrt(((vectors[idx] - c) ** 2).sum(axis=1))
        out.append(int(idx[np.flatnonzero(d <= d.min() + TIE_TOL)[0]]))
    return tuple(out)


def kmeans(vectors: np.ndarray, k: int, seed: int = 0) -> ClusterSet:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters take the point farthest from its own centroid. Stops when
    assignments stop changing, centroids move less than ``SHIFT_TOL``, or
    after ``MAX_ITER`` rounds.
    """
    x = np.asarray(vectors, dtype=float)
    m = len(x)
    if not 1 <= k <= m:
        raise ValueError(f"cannot form {k} clusters from {m} samples")
    rng = np.random.default_rng(seed)
    centers = _plus_plus(x, k, rng)
    labels = None
    for _ in range(MAX_ITER):
        new = _repair_empty(x, np.argmin(_sq_dists(x, centers), axis=1), centers, k)
        new_centers = np.stack([x[new == j].mean(axis=0) for j in range(k)])
        shift = np.abs(new_centers - centers).max()
        done = labels is not None and np.array_equal(new, labels)
        labels, centers = new, new_centers
        if done or shift < SHIFT_TOL:
            break
    return ClusterSet(labels, centers, medoids(x, labels, centers))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def consistency_prob(medoid: CotSample, variant_cots: Sequence[CotSample], threshold: float,
                     cluster_id: int = 0, variant_index: int = 1) -> ConsistencyRecord:
    """Share of counterfactual CoTs whose cosine to the medoid is >= ``threshold``."""
    if not variant_cots:
        raise ValueError("need at least one counterfactual CoT")
    if not -1.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (-1, 1)")
    sims = tuple(cosine(medoid.embedding, c.embedding) for c in variant_cots)
    return ConsistencyRecord(cluster_id, variant_index, tuple(int(d >= threshold) for d in sims),
                             sims)


def infonce_loss(anchor: np.ndarray, positive: np.ndarray, negatives: Sequence[np.ndarray],
                 temperature: float = 0.07) -> float:
    """Contrastive loss of one anchor against a positive and a set of negatives."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if len(negatives) == 0:
        raise ValueError("need at least one negative")
    a = np.asarray(anchor, dtype=float)
    pos = float(a @ np.asarray(positive, dtype=float)) / temperature
    neg = np.asarray([a @ np.asarray(n, dtype=float) for n in negatives]) / temperature
    top = max(pos, float(neg.max()))
    if top == pos:
        return float(np.log1p(np.exp(neg - pos).sum()))
    lse = top + np.log(np.exp(pos - top) + np.exp(neg - top).sum())
    return float(lse - pos)
