"""Cluster-based denoising of the evidence pool.

Snippet descriptions are embedded, clustered with density-based clustering,
and only the cluster(s) containing evidence from the top-ranked (anchor)
homolog are kept. Border points are attached to the cluster of their
smallest-canonical-index core neighbor (canonical index = rank under
lexicographic vector order), which makes the partition invariant to input
order; classical density clustering is order-dependent there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .annotations import AnnotationSnippet
from .config import DenoiseConfig
from .homology import EvidencePool, PoolHomolog, Stage


class EmbeddingError(RuntimeError):
    pass


class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        ...


def embed_values(provider: EmbeddingProvider, values: Sequence[str]) -> np.ndarray:
    """Embed texts through the provider, checking count, dimension, and finiteness."""
    values = list(values)
    if not values:
        return np.zeros((0, 0))
    try:
        vectors = provider.embed(values)
    except Exception as exc:
        raise EmbeddingError(f"embedding failed for batch of {len(values)} texts: {exc}") from exc
    if len(vectors) != len(values):
        raise EmbeddingError(f"provider returned {len(vectors)} vectors for {len(values)} texts")
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise EmbeddingError(f"embedding dimensions are not uniform: {sorted(dims)}")
    arr = np.asarray(vectors, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise EmbeddingError("embedding contains non-finite values")
    return arr


@dataclass(frozen=True)
class SemanticCluster:
    id: int
    members: tuple[int, ...]


@dataclass(frozen=True)
class ClusterSet:
    """Partition of point indices into clusters plus noise."""

    clusters: tuple[SemanticCluster, ...]
    noise: tuple[int, ...]
    n_points: int

    def __post_init__(self):
        seen: set[int] = set()
        for c in self.clusters:
            if not c.members:
                raise ValueError(f"cluster {c.id} has no members")
            seen.update(c.members)
        seen.update(self.noise)
        if seen != set(range(self.n_points)) or sum(
            len(c.members) for c in self.clusters
        ) + len(self.noise) != self.n_points:
            raise ValueError("clusters plus noise do not partition the input")

    def label_of(self) -> list[Optional[int]]:
        """Per-point cluster id, None for noise."""
        labels: list[Optional[int]] = [None] * self.n_points
        for c in self.clusters:
            for i in c.members:
                labels[i] = c.id
        return labels


def _distance_matrix(points: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        diff = points[:, None, :] - points[None, :, :]
        return np.sqrt((diff * diff).sum(axis=-1))
    if metric == "cosine":
        norms = np.linalg.norm(points, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        unit = points / safe[:, None]
        sim = unit @ unit.T
        dist = 1.0 - np.clip(sim, -1.0, 1.0)
        # zero vectors carry no direction: maximally distant from everything
        zero = norms == 0
        dist[zero, :] = 1.0
        dist[:, zero] = 1.0
        np.fill_diagonal(dist, 0.0)
        return dist
    raise ValueError(f"unknown metric {metric!r}")


def dbscan(vectors: Sequence[Sequence[float]] | np.ndarray, cfg: DenoiseConfig) -> ClusterSet:
    """Density-based clustering with order-independent labeling.

    A point is core when it has >= min_pts neighbors within eps (itself
    included). Clusters are the connected components of core points; a
    non-core point within eps of a core joins the cluster of its
    smallest-canonical-index core neighbor; everything else is noise.
    Cluster ids are assigned in canonical order of their smallest member.
    """
    points = np.asarray(vectors, dtype=float)
    if points.size == 0 or len(points) == 0:
        raise ValueError("dbscan requires at least one vector")
    if points.ndim != 2:
        raise ValueError("vectors must share one dimension")
    n = len(points)

    dist = _distance_matrix(points, cfg.metric)
    within = dist <= cfg.eps
    neighbor_counts = within.sum(axis=1)
    is_core = neighbor_counts >= cfg.min_pts

    # canonical rank: position under lexicographic vector ordering
    order = sorted(range(n), key=lambda i: tuple(points[i]))
    canon = [0] * n
    for pos, i in enumerate(order):
        canon[i] = pos

    # connected components over core points
    component = [-1] * n
    comp_id = 0
    for i in range(n):
        if not is_core[i] or component[i] != -1:
            continue
        stack = [i]
        component[i] = comp_id
        while stack:
            cur = stack.pop()
            for j in np.nonzero(within[cur])[0]:
                if is_core[j] and component[j] == -1:
                    component[j] = comp_id
                    stack.append(int(j))
        comp_id += 1

    # border attachment via smallest-canonical core neighbor
    for i in range(n):
        if is_core[i]:
            continue
        core_neighbors = [int(j) for j in np.nonzero(within[i])[0] if is_core[j]]
        if core_neighbors:
            chosen = min(core_neighbors, key=lambda j: canon[j])
            component[i] = component[chosen]

    members: dict[int, list[int]] = {}
    noise: list[int] = []
    for i in range(n):
        if component[i] == -1:
            noise.append(i)
        else:
            members.setdefault(component[i], []).append(i)

    ordered = sorted(members.values(), key=lambda ms: min(canon[i] for i in ms))
    clusters = tuple(
        SemanticCluster(id=cid, members=tuple(sorted(ms))) for cid, ms in enumerate(ordered)
    )
    return ClusterSet(clusters=clusters, noise=tuple(sorted(noise)), n_points=n)


@dataclass(frozen=True)
class AnchorSelection:
    indices: tuple[int, ...]        # selected flat snippet indices
    anchor_ranks: tuple[int, ...]   # homolog ranks that anchored the selection
    cluster_ids: tuple[int, ...]    # clusters contributing to the selection
    passthrough: bool
    warnings: tuple[str, ...] = ()


def select_anchor_clusters(
    cluster_set: ClusterSet,
    pool: EvidencePool,
    anchor_top_m: int = 1,
) -> AnchorSelection:
    """Select every cluster containing evidence from the anchor homologs.

    Anchors are the first `anchor_top_m` homolog ranks that contribute at
    least one clustered (non-noise) snippet; ranks whose snippets are all
    noise or were filtered out earlier are skipped in favor of the next
    rank. If no homolog qualifies the whole pool passes through with a
    recorded warning.
    """
    flat = pool.snippets()
    if cluster_set.n_points != len(flat):
        raise ValueError(
            f"cluster set covers {cluster_set.n_points} points but pool has "
            f"{len(flat)} snippets"
        )
    labels = cluster_set.label_of()
    clustered_ranks: dict[int, set[int]] = {}
    for i, snippet in enumerate(flat):
        if labels[i] is not None:
            clustered_ranks.setdefault(snippet.homolog_rank, set()).add(labels[i])

    chosen_ranks: list[int] = []
    warnings: list[str] = []
    for homolog in pool.homologs:
        if len(chosen_ranks) >= anchor_top_m:
            break
        if homolog.rank in clustered_ranks:
            chosen_ranks.append(homolog.rank)
        else:
            warnings.append(
                f"homolog rank {homolog.rank} has no clustered snippet; "
                f"falling back to the next rank"
            )
    if not chosen_ranks:
        warnings.append("no homolog anchors any cluster; passing pool through unfiltered")
        return AnchorSelection(
            indices=tuple(range(len(flat))),
            anchor_ranks=(),
            cluster_ids=(),
            passthrough=True,
            warnings=tuple(warnings),
        )

    selected_clusters: set[int] = set()
    for rank in chosen_ranks:
        selected_clusters.update(clustered_ranks[rank])
    indices = tuple(
        i for i in range(len(flat))
        if labels[i] is not None and labels[i] in selected_clusters
    )
    return AnchorSelection(
        indices=indices,
        anchor_ranks=tuple(chosen_ranks),
        cluster_ids=tuple(sorted(selected_clusters)),
        passthrough=False,
        warnings=tuple(warnings),
    )


def render_context(pool: EvidencePool) -> str:
    """Deterministic text rendering of a pool, one line per snippet."""
    lines = []
    for h in pool.homologs:
        for s in h.snippets:
            lines.append(f"Homolog {h.rank} ({h.hit.subject_accession}): [{s.tag}]: {s.value}")
    return "\n".join(lines)


def assemble_context(
    pool: EvidencePool,
    selected_indices: Optional[Sequence[int]] = None,
) -> tuple[EvidencePool, str]:
    """Build the final-stage pool from selected flat indices and render it.

    Snippets stay in (homolog rank, original order) order; rendering the
    same selection twice is byte-identical.
    """
    if selected_indices is None:
        selected = set(range(len(pool.snippets())))
    else:
        selected = set(selected_indices)
    homologs = []
    cursor = 0
    for h in pool.homologs:
        kept: list[AnnotationSnippet] = []
        for s in h.snippets:
            if cursor in selected:
                kept.append(s)
            cursor += 1
        homologs.append(PoolHomolog(rank=h.rank, hit=h.hit, snippets=tuple(kept)))
    vertical = EvidencePool(stage=Stage.VERTICAL, homologs=tuple(homologs), warnings=pool.warnings)
    return vertical, render_context(vertical)
