"""Request-task clustering: embeddings, a mutual-kNN similarity graph, and
Louvain modularity maximization.

Each community keeps a centroid (for routing new requests) and the output
lengths of its members (for sizing ``max_tokens``).
"""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.request
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .stats import KdeModel, kde_fit

log = logging.getLogger(__name__)

DEFAULT_K = 10


class EmbeddingError(RuntimeError):
    pass


class EmbeddingProvider(Protocol):
    name: str
    dimension: int

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...


class HashedNgramEmbedder:
    """Character n-gram term frequencies hashed into a fixed-size vector."""

    name = "hashed-ngram"

    def __init__(self, n: int = 3, dimension: int = 256):
        self.n = n
        self.dimension = dimension

    def _one(self, text: str) -> np.ndarray:
        s = " " + " ".join(text.lower().split()) + " "
        v = np.zeros(self.dimension)
        for i in range(max(len(s) - self.n + 1, 1)):
            v[zlib.crc32(s[i : i + self.n].encode("utf-8")) % self.dimension] += 1.0
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        return np.array([self._one(t) for t in texts]).reshape(len(texts), self.dimension)


class RemoteEmbedder:
    """Client for an HTTP embedding service.

    The service receives ``POST {"texts": [...]}`` and must answer with
    ``{"embeddings": [[...], ...]}``, one vector of ``dimension`` floats per
    text.  Any transport or format problem raises :class:`EmbeddingError`;
    there is deliberately no fallback to a local provider.
    """

    name = "remote"

    def __init__(self, url: str, dimension: int, timeout: float = 30.0):
        self.url = url
        self.dimension = dimension
        self.timeout = timeout

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        body = json.dumps({"texts": list(texts)}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise EmbeddingError(f"embedding request to {self.url} failed: {exc}") from exc
        vecs = np.asarray(payload.get("embeddings"), dtype=float) if isinstance(payload, dict) else None
        if vecs is None or vecs.shape != (len(texts), self.dimension) or not np.all(np.isfinite(vecs)):
            raise EmbeddingError(f"embedding service returned an unexpected payload shape")
        return vecs


def embed(provider: EmbeddingProvider, text: str) -> np.ndarray:
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    return provider.embed_many([text])[0]


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# -- graph -------------------------------------------------------------------


@dataclass(frozen=True)
class RequestGraph:
    adjacency: np.ndarray

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def m(self) -> float:
        return float(self.adjacency.sum()) / 2.0

    def edges(self):
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))


def _unit_rows(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


def build_graph(vectors, k_neighbors: int = DEFAULT_K) -> RequestGraph:
    """Mutual k-nearest-neighbour graph weighted by (non-negative) cosine similarity."""
    u = _unit_rows(vectors)
    n = u.shape[0]
    if n < 2:
        raise ValueError("need at least two vectors")
    sim = np.clip(u @ u.T, 0.0, None)
    np.fill_diagonal(sim, -np.inf)
    k = min(k_neighbors, n - 1)
    # stable sort keeps ties in index order
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    chosen = np.zeros((n, n), dtype=bool)
    chosen[np.repeat(np.arange(n), k), order.ravel()] = True
    mutual = chosen & chosen.T
    np.fill_diagonal(sim, 0.0)
    a = np.where(mutual, sim, 0.0)
    return RequestGraph((a + a.T) / 2.0)


# -- modularity --------------------------------------------------------------


def modularity(adjacency, labels) -> float:
    a = np.asarray(adjacency, dtype=float)
    labels = np.asarray(labels)
    two_m = a.sum()
    if two_m <= 0:
        return 0.0
    k = a.sum(axis=1)
    q = 0.0
    for c in np.unique(labels):
        idx = labels == c
        q += a[np.ix_(idx, idx)].sum() / two_m - (k[idx].sum() / two_m) ** 2
    return float(q)


def _canonical(labels) -> np.ndarray:
    seen: dict = {}
    return np.array([seen.setdefault(x, len(seen)) for x in labels], dtype=int)


def _local_moves(a: np.ndarray) -> tuple[np.ndarray, bool]:
    n = a.shape[0]
    k = a.sum(axis=1)
    two_m = a.sum()
    comm = np.arange(n)
    tot = k.copy()
    improved = False
    moved = True
    while moved:
        moved = False
        for i in range(n):
            ci = comm[i]
            tot[ci] -= k[i]
            nbrs = np.nonzero(a[i])[0]
            links: dict[int, float] = {}
            for j in nbrs:
                if j != i:
                    links[comm[j]] = links.get(comm[j], 0.0) + a[i, j]
            best, best_gain = ci, links.get(ci, 0.0) - tot[ci] * k[i] / two_m
            for c in sorted(links):
                gain = links[c] - tot[c] * k[i] / two_m
                if gain > best_gain + 1e-12:
                    best, best_gain = c, gain
            tot[best] += k[i]
            if best != ci:
                comm[i] = best
                moved = improved = True
    return _canonical(comm), improved


def louvain(adjacency) -> np.ndarray:
    """Greedy modularity maximization (local moves + aggregation), resolution 1."""
    a = np.asarray(adjacency, dtype=float)
    n = a.shape[0]
    labels = np.arange(n)
    if a.sum() <= 0:
        return labels
    while True:
        level, improved = _local_moves(a)
        if not improved:
            break
        labels = level[labels]
        p = np.zeros((a.shape[0], level.max() + 1))
        p[np.arange(a.shape[0]), level] = 1.0
        a = p.T @ a @ p
    return _canonical(labels)


# -- communities -------------------------------------------------------------


@dataclass
class Community:
    community_id: str
    members: np.ndarray
    centroid: np.ndarray
    output_lengths: np.ndarray
    kde: KdeModel | None = None


@dataclass
class CommunityModel:
    communities: list[Community]
    modularity: float
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def __len__(self):
        return len(self.communities)

    @property
    def ids(self) -> list[str]:
        return [c.community_id for c in self.communities]

    def all_lengths(self) -> np.ndarray:
        if not self.communities:
            return np.zeros(0)
        return np.concatenate([c.output_lengths for c in self.communities])


def detect_communities(graph: RequestGraph) -> tuple[np.ndarray, float]:
    """Partition the request graph; returns (labels, modularity Q)."""
    labels = louvain(graph.adjacency)
    return labels, modularity(graph.adjacency, labels)


def assign_request(model: CommunityModel, vector) -> str:
    """Community whose centroid is most cosine-similar; ties go to the earliest community."""
    if not model.communities:
        raise ValueError("empty community model")
    best, best_sim = None, -np.inf
    for c in model.communities:
        s = cosine(vector, c.centroid)
        if s > best_sim + 1e-12:
            best, best_sim = c.community_id, s
    return best


def build_community_model(vectors, output_lengths, k_neighbors: int = DEFAULT_K,
                          names: Sequence[str | None] | None = None) -> CommunityModel:
    """Cluster request embeddings and attach per-community length densities.

    When ``names`` (e.g. task tags from a corpus) is given, a community is
    named after its most common tag so its ``max_tokens`` entry can be matched
    against tagged traffic; otherwise communities are ``c0, c1, ...``.
    """
    v = np.asarray(vectors, dtype=float)
    lengths = np.asarray(output_lengths, dtype=float)
    if v.shape[0] == 0:
        return CommunityModel([], 0.0)
    if v.shape[0] == 1:
        labels, q = np.zeros(1, int), 0.0
    else:
        labels, q = detect_communities(build_graph(v, k_neighbors))
    comms = []
    used: Counter = Counter()
    for c in range(labels.max() + 1):
        idx = np.nonzero(labels == c)[0]
        cid = f"c{c}"
        if names is not None:
            tags = Counter(names[i] for i in idx if names[i])
            if tags:
                tag = min(tags.items(), key=lambda kv: (-kv[1], kv[0]))[0]
                cid = tag if not used[tag] else f"{tag}-{used[tag]}"
                used[tag] += 1
        ls = lengths[idx]
        comms.append(Community(cid, idx, v[idx].mean(axis=0), ls, kde_fit(ls) if ls.size else None))
    return CommunityModel(comms, q, labels)


# -- corpus files ------------------------------------------------------------


@dataclass(frozen=True)
class CorpusRecord:
    text: str
    output_length: int
    task: str | None = None


def read_corpus(path) -> list[CorpusRecord]:
    """Read JSON lines ``{"text": ..., "output_length": ..., "task": optional}``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = CorpusRecord(str(d["text"]), int(d["output_length"]), d.get("task"))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad corpus record: {exc}") from None
        if rec.output_length <= 0 or not rec.text.strip():
            raise ValueError(f"{path}:{lineno}: empty text or non-positive output_length")
        out.append(rec)
    return out


def write_corpus(records: Sequence[CorpusRecord], path) -> None:
    lines = []
    for r in records:
        d = {"text": r.text, "output_length": r.output_length}
        if r.task is not None:
            d["task"] = r.task
        lines.append(json.dumps(d, sort_keys=True))
    Path(path).write_text("".join(x + "\n" for x in lines), encoding="utf-8")


def corpus_model(records: Sequence[CorpusRecord], provider: EmbeddingProvider | None = None,
                 k_neighbors: int = DEFAULT_K) -> CommunityModel:
    if not records:
        return CommunityModel([], 0.0)
    provider = provider or HashedNgramEmbedder()
    vecs = provider.embed_many([r.text for r in records])
    return build_community_model(vecs, [r.output_length for r in records], k_neighbors,
                                 names=[r.task for r in records])
