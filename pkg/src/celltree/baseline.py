"""PCA + Ward agglomerative baseline.

Two search strategies produce the linkage: a naive global-minimum scan
(the O(n^3) reference) and a nearest-neighbor chain. Ward's merge cost
``d2(A, B) = 2 |A||B| / (|A|+|B|) * ||c_A - c_B||^2`` (the closed form of
the Lance-Williams update, with singleton distances Euclidean) is always
evaluated from cluster centroids, which depend only on the merge subtree.
Since both strategies grow the same dendrogram, they emit bit-identical
linkage matrices after canonical sorting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .data import CountMatrix, preprocess, pca
from .metrics import Dendrogram, DendrogramNode, MetricsReport, evaluate_clustering

__all__ = ["ward_linkage", "cut_tree", "baseline_pipeline", "linkage_to_tsv", "BaselineResult"]


def _ward_d2(ca: np.ndarray, na: float, cb: np.ndarray, nb: float) -> float:
    diff = ca - cb
    return float(2.0 * na * nb / (na + nb) * (diff * diff).sum())


def _merge_centroid(ca, na, cb, nb):
    return (na * ca + nb * cb) / (na + nb)


def _canonicalize(merges: List[Tuple[int, int, float, int]], n: int) -> np.ndarray:
    """Sort merges by distance and relabel new clusters in that order.

    ``merges`` rows are (rep_a, rep_b, distance, size) where reps are any
    member sample of each cluster; output rows follow the usual convention:
    new cluster ``n + i`` is created by row ``i``.
    """
    order = sorted(range(len(merges)), key=lambda i: merges[i][2])
    parent = np.arange(n)
    label = np.arange(n)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    out = np.zeros((len(merges), 4))
    for new_idx, i in enumerate(order):
        ra, rb, dist, size = merges[i]
        root_a, root_b = find(ra), find(rb)
        la, lb = label[root_a], label[root_b]
        out[new_idx] = (min(la, lb), max(la, lb), dist, size)
        parent[root_b] = root_a
        label[find(root_a)] = n + new_idx
    return out


def _ward_naive(points: np.ndarray) -> List[Tuple[int, int, float, int]]:
    n = points.shape[0]
    centroids = {i: points[i].astype(np.float64) for i in range(n)}
    sizes = {i: 1 for i in range(n)}
    reps = {i: i for i in range(n)}
    active = list(range(n))
    d2 = {}
    for ai in range(n):
        for bi in range(ai + 1, n):
            d2[(ai, bi)] = _ward_d2(centroids[ai], 1, centroids[bi], 1)

    merges = []
    next_id = n
    for _ in range(n - 1):
        best = None
        for ai in range(len(active)):
            for bi in range(ai + 1, len(active)):
                a, b = active[ai], active[bi]
                key = (min(a, b), max(a, b))
                val = d2[key]
                if best is None or val < best[0] or (val == best[0] and key < best[1]):
                    best = (val, key)
        val, (a, b) = best
        # canonical operand order keeps the centroid arithmetic content-stable
        if reps[a] > reps[b]:
            a, b = b, a
        merged = _merge_centroid(centroids[a], sizes[a], centroids[b], sizes[b])
        size = sizes[a] + sizes[b]
        merges.append((reps[a], reps[b], float(np.sqrt(val)), size))
        active = [x for x in active if x not in (a, b)]
        centroids[next_id] = merged
        sizes[next_id] = size
        reps[next_id] = min(reps[a], reps[b])
        for other in active:
            key = (min(other, next_id), max(other, next_id))
            d2[key] = _ward_d2(merged, size, centroids[other], sizes[other])
        active.append(next_id)
        next_id += 1
    return merges


def _ward_nn_chain(points: np.ndarray) -> List[Tuple[int, int, float, int]]:
    n = points.shape[0]
    centroids = points.astype(np.float64).copy()
    cent = np.zeros((2 * n - 1, points.shape[1]))
    cent[:n] = centroids
    sizes = np.zeros(2 * n - 1)
    sizes[:n] = 1
    reps = np.arange(2 * n - 1)
    alive = np.zeros(2 * n - 1, dtype=bool)
    alive[:n] = True

    merges = []
    chain: List[int] = []
    next_id = n
    while len(merges) < n - 1:
        if not chain:
            chain.append(int(np.flatnonzero(alive)[0]))
        top = chain[-1]
        others = np.flatnonzero(alive)
        others = others[others != top]
        diff = cent[others] - cent[top]
        d2 = 2.0 * sizes[others] * sizes[top] / (sizes[others] + sizes[top]) * (diff * diff).sum(
            axis=1
        )
        nn = int(others[np.argmin(d2)])
        best = float(d2[np.argmin(d2)])
        if len(chain) >= 2 and nn == chain[-2]:
            chain.pop()
            chain.pop()
            a, b = top, nn
            if reps[a] > reps[b]:
                a, b = b, a
            # recompute with scalar helper so both strategies share arithmetic
            dist2 = _ward_d2(cent[a], sizes[a], cent[b], sizes[b])
            cent[next_id] = _merge_centroid(cent[a], sizes[a], cent[b], sizes[b])
            sizes[next_id] = sizes[a] + sizes[b]
            reps[next_id] = min(reps[a], reps[b])
            alive[a] = alive[b] = False
            alive[next_id] = True
            merges.append((int(reps[a]), int(reps[b]), float(np.sqrt(dist2)), int(sizes[next_id])))
            next_id += 1
        else:
            chain.append(nn)
    return merges


def ward_linkage(points: np.ndarray, method: str = "nn_chain") -> np.ndarray:
    """Ward linkage over row observations; rows are (a, b, distance, size).

    ``method`` picks the search strategy ("naive" or "nn_chain"); both give
    identical output on tie-free inputs.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ValueError("ward_linkage needs at least two points")
    if method == "naive":
        merges = _ward_naive(points)
    elif method == "nn_chain":
        merges = _ward_nn_chain(points)
    else:
        raise ValueError(f"unknown method '{method}'")
    return _canonicalize(merges, points.shape[0])


def linkage_to_tsv(linkage: np.ndarray) -> str:
    lines = ["cluster_a\tcluster_b\tdistance\tsize"]
    for a, b, d, s in linkage:
        lines.append(f"{int(a)}\t{int(b)}\t{d!r}\t{int(s)}")
    return "\n".join(lines) + "\n"


def cut_tree(linkage: np.ndarray, k: int) -> Tuple[np.ndarray, Dendrogram]:
    """Undo the last k-1 merges; returns flat labels plus the merge tree
    over the k clusters (its leaves carry the cluster sample sets)."""
    n = linkage.shape[0] + 1
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range 1..{n}")
    members = {i: [i] for i in range(n)}
    for row in range(n - k):
        a, b = int(linkage[row, 0]), int(linkage[row, 1])
        members[n + row] = members.pop(a) + members.pop(b)

    # flat labels by first occurrence over samples
    cluster_of = {}
    for cid, samples in members.items():
        for s in samples:
            cluster_of[s] = cid
    labels = np.zeros(n, dtype=np.int64)
    seen = {}
    for s in range(n):
        cid = cluster_of[s]
        if cid not in seen:
            seen[cid] = len(seen)
        labels[s] = seen[cid]

    nodes = {cid: DendrogramNode(samples=np.array(sorted(s))) for cid, s in members.items()}
    for row in range(n - k, n - 1):
        a, b = int(linkage[row, 0]), int(linkage[row, 1])
        nodes[n + row] = DendrogramNode(left=nodes.pop(a), right=nodes.pop(b))
    (root,) = nodes.values()
    return labels, Dendrogram(root=root, n_samples=n).validate()


@dataclass
class BaselineResult:
    report: MetricsReport
    labels: np.ndarray
    tree: Dendrogram
    linkage: np.ndarray


def baseline_pipeline(
    cm: CountMatrix,
    k: int,
    n_top: Optional[int] = 4000,
    n_pcs: int = 50,
    method: str = "nn_chain",
) -> BaselineResult:
    """HVG selection, log-normalization, PCA, Ward, cut at k, metrics."""
    pre = preprocess(cm, n_top=n_top)
    n, d = pre.x.shape
    n_pcs = min(n_pcs, n - 1, d)
    scores, _, _ = pca(pre.x, k=n_pcs)
    linkage = ward_linkage(scores, method=method)
    labels, tree = cut_tree(linkage, k)
    report = evaluate_clustering(labels, pre.batch, tree, pre.cell_type)
    return BaselineResult(report=report, labels=labels, tree=tree, linkage=linkage)
