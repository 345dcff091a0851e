"""Offline analysis over a trial trace.

Everything here is batch computation over an immutable list of trial records:
TF-IDF embedding of hypothesis text, single-pass online clustering, entropy
based effective-proposal counts, near-duplicate rate, cross-context edge
fractions, and the best-so-far frontier. No file mutation, safe to run while
a harness is live.

Only the recorded hypothesis text is embedded; roles, scores, statuses, and
environment names are excluded so the clustering measures idea diversity,
not bookkeeping diversity.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

import numpy as np

from .blackboard import BASELINE, KEEP, TrialRecord, is_improvement

COSINE_JOIN_THRESHOLD = 0.30
NEAR_DUP_THRESHOLD = 0.90
VALID_SCORED = (BASELINE, KEEP, "discard")

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, no stemming, no stop list."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass
class Embedding:
    """L2-normalized TF-IDF rows; empty documents become flagged zero rows."""

    matrix: np.ndarray
    vocabulary: dict[str, int]
    empty_rows: list[int]


def embed_texts(texts: list[str]) -> Embedding:
    """TF-IDF with smoothed IDF: idf = ln((1+N)/(1+df)) + 1.

    The +1 floor keeps tokens that appear in every document from vanishing,
    so two identical documents always embed to cosine 1.0.
    """
    docs = [tokenize(t) for t in texts]
    vocabulary: dict[str, int] = {}
    for doc in docs:
        for token in doc:
            if token not in vocabulary:
                vocabulary[token] = len(vocabulary)

    n_docs = len(texts)
    df = np.zeros(len(vocabulary))
    for doc in docs:
        for token in set(doc):
            df[vocabulary[token]] += 1
    idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0

    matrix = np.zeros((n_docs, len(vocabulary)))
    empty_rows = []
    for i, doc in enumerate(docs):
        if not doc:
            empty_rows.append(i)
            continue
        for token in doc:
            matrix[i, vocabulary[token]] += 1.0
        matrix[i] *= idf
        norm = np.linalg.norm(matrix[i])
        if norm > 0:
            matrix[i] /= norm
    return Embedding(matrix=matrix, vocabulary=vocabulary, empty_rows=empty_rows)


def embed_hypotheses(records: list[TrialRecord]) -> Embedding:
    return embed_texts([r.hypothesis for r in records])


@dataclass
class ClusterModel:
    """Result of the single-pass online clustering."""

    threshold: float
    assignments: list[int]
    sizes: list[int]
    centroids: np.ndarray


def cluster_online(matrix: np.ndarray,
                   threshold: float = COSINE_JOIN_THRESHOLD) -> ClusterModel:
    """One pass in row order: join the nearest centroid at cosine >= threshold
    (ties to the lowest cluster index), else open a new singleton cluster.
    Centroids are the renormalized mean of member rows.
    """
    members: list[list[int]] = []
    centroids: list[np.ndarray] = []
    assignments: list[int] = []
    for i in range(matrix.shape[0]):
        row = matrix[i]
        chosen = -1
        if centroids:
            sims = np.array([float(c @ row) for c in centroids])
            nearest = int(np.argmax(sims))
            if sims[nearest] >= threshold:
                chosen = nearest
        if chosen < 0:
            members.append([i])
            centroids.append(row.copy())
            assignments.append(len(members) - 1)
            continue
        members[chosen].append(i)
        mean = matrix[members[chosen]].mean(axis=0)
        norm = np.linalg.norm(mean)
        centroids[chosen] = mean / norm if norm > 0 else mean
        assignments.append(chosen)
    sizes = [len(m) for m in members]
    return ClusterModel(threshold=threshold, assignments=assignments,
                        sizes=sizes,
                        centroids=(np.vstack(centroids) if centroids
                                   else np.zeros((0, matrix.shape[1]))))


def effective_clusters(sizes: list[int]) -> float:
    """exp of the Shannon entropy (natural log) over cluster-size shares."""
    total = sum(sizes)
    if total == 0:
        return 0.0
    entropy = 0.0
    for size in sizes:
        if size > 0:
            p = size / total
            entropy -= p * math.log(p)
    return math.exp(entropy)


def near_duplicate_rate(matrix: np.ndarray,
                        threshold: float = NEAR_DUP_THRESHOLD) -> float:
    """Fraction of rows whose max cosine to any earlier row is >= threshold."""
    n = matrix.shape[0]
    if n < 2:
        return 0.0
    dup = 0
    for i in range(1, n):
        sims = matrix[:i] @ matrix[i]
        if float(np.max(sims)) >= threshold:
            dup += 1
    return dup / n


def cross_context_edges(records: list[TrialRecord],
                        window: tuple[int, int] | None = None) -> dict:
    """Parent-edge and keep-edge crossing fractions within a window.

    An edge counts when both the child and its declared parent fall inside
    the window; it crosses when their proposing contexts (roles) differ. The
    keep fraction restricts children to keep rows.
    """
    rows = records[window[0]:window[1]] if window else list(records)
    in_window = {r.exp_id: r for r in rows}
    parent_cross = parent_total = 0
    keep_cross = keep_total = 0
    for r in rows:
        if not r.parent_exp or r.parent_exp not in in_window:
            continue
        parent = in_window[r.parent_exp]
        crosses = parent.role != r.role
        parent_total += 1
        parent_cross += crosses
        if r.status == KEEP:
            keep_total += 1
            keep_cross += crosses
    return {"parent": (parent_cross, parent_total),
            "keep": (keep_cross, keep_total)}


def best_so_far(records: list[TrialRecord], direction: str
                ) -> list[tuple[int, float]]:
    """Running extremum over valid measured rows: (row index, best score)."""
    frontier: list[tuple[int, float]] = []
    best: float | None = None
    for i, r in enumerate(records):
        if r.status not in VALID_SCORED or r.score is None:
            continue
        if best is None or is_improvement(r.score, best, direction):
            best = r.score
        frontier.append((i, best))
    return frontier


@dataclass
class AuditReport:
    """Entropy and information-sharing summary over one trace window."""

    rows: int
    contexts: int
    max_rows_per_context: int
    total_clusters: int
    effective_clusters: float
    top_cluster_share: float
    near_dup_rate: float
    cross_ctx_parent: tuple[int, int]
    cross_ctx_keep: tuple[int, int]
    shared_clusters: int
    shared_cluster_rows: int
    empty_hypotheses: int

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "contexts": self.contexts,
            "max_rows_per_context": self.max_rows_per_context,
            "total_clusters": self.total_clusters,
            "effective_clusters": round(self.effective_clusters, 4),
            "top_cluster_share": round(self.top_cluster_share, 4),
            "near_dup_rate": round(self.near_dup_rate, 4),
            "cross_ctx_parent": list(self.cross_ctx_parent),
            "cross_ctx_keep": list(self.cross_ctx_keep),
            "shared_clusters": self.shared_clusters,
            "shared_cluster_rows": self.shared_cluster_rows,
            "empty_hypotheses": self.empty_hypotheses,
        }

    def render_text(self) -> str:
        def frac(pair: tuple[int, int]) -> str:
            a, b = pair
            return f"{a}/{b}" if b else "0/0"

        shared = (f"{self.shared_clusters} of {self.total_clusters} clusters, "
                  f"{self.shared_cluster_rows} rows")
        lines = [
            ("Rows", str(self.rows)),
            ("Contexts", f"{self.contexts} (max {self.max_rows_per_context} rows)"),
            ("Effective clusters exp(H)", f"{self.effective_clusters:.4f}"),
            ("Top cluster share", f"{self.top_cluster_share:.4f}"),
            ("Near dup.", f"{self.near_dup_rate:.4f}"),
            ("Cross-context parent", frac(self.cross_ctx_parent)),
            ("Cross-context keep", frac(self.cross_ctx_keep)),
            ("Shared idea clusters", shared),
        ]
        width = max(len(k) for k, _ in lines)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in lines)


def audit_report(records: list[TrialRecord],
                 window: tuple[int, int] | None = None) -> AuditReport:
    """Full Table-style report over a trace window (submitted rows only)."""
    rows = records[window[0]:window[1]] if window else list(records)
    submitted = [r for r in rows if r.status != BASELINE]

    embedding = embed_hypotheses(submitted)
    model = cluster_online(embedding.matrix)
    sizes = model.sizes

    role_counts: dict[str, int] = {}
    for r in submitted:
        role_counts[r.role] = role_counts.get(r.role, 0) + 1

    cluster_roles: dict[int, set[str]] = {}
    for r, cluster in zip(submitted, model.assignments):
        cluster_roles.setdefault(cluster, set()).add(r.role)
    shared = [c for c, roles in cluster_roles.items() if len(roles) >= 2]
    shared_rows = sum(sizes[c] for c in shared)

    edges = cross_context_edges(records, window)
    return AuditReport(
        rows=len(submitted),
        contexts=len(role_counts),
        max_rows_per_context=max(role_counts.values(), default=0),
        total_clusters=len(sizes),
        effective_clusters=effective_clusters(sizes),
        top_cluster_share=(max(sizes) / len(submitted) if submitted else 0.0),
        near_dup_rate=near_duplicate_rate(embedding.matrix),
        cross_ctx_parent=edges["parent"],
        cross_ctx_keep=edges["keep"],
        shared_clusters=len(shared),
        shared_cluster_rows=shared_rows,
        empty_hypotheses=len(embedding.empty_rows),
    )


def frontier_tsv(frontier: list[tuple[int, float]]) -> str:
    """Plot-ready TSV of the best-so-far trajectory."""
    lines = ["index\tbest_score"]
    for index, score in frontier:
        lines.append(f"{index}\t{score:.6f}")
    return "\n".join(lines) + "\n"


def report_json(report: AuditReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
