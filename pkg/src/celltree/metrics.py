"""Flat and hierarchical clustering metrics.

NMI and ARI compare two flat labelings; dendrogram purity and leaf purity
score a labeled binary hierarchy. Dendrogram purity is computed exactly via
per-node class histograms rather than pair sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

__all__ = [
    "DendrogramNode",
    "Dendrogram",
    "contingency",
    "nmi",
    "ari",
    "batch_nmi",
    "dendrogram_purity",
    "leaf_purity",
    "MetricsReport",
    "evaluate_clustering",
]


@dataclass
class DendrogramNode:
    """Leaf nodes carry disjoint sample-index sets; internal nodes their union."""

    samples: Optional[np.ndarray] = None  # leaves only
    left: Optional["DendrogramNode"] = None
    right: Optional["DendrogramNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None and self.right is None


@dataclass
class Dendrogram:
    root: DendrogramNode
    n_samples: int

    def leaves(self) -> List[DendrogramNode]:
        out: List[DendrogramNode] = []

        def walk(node: DendrogramNode) -> None:
            if node.is_leaf:
                out.append(node)
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def validate(self) -> "Dendrogram":
        seen = np.zeros(self.n_samples, dtype=bool)
        for leaf in self.leaves():
            idx = np.asarray(leaf.samples, dtype=np.int64)
            if idx.size and (seen[idx].any()):
                raise ValueError("leaf sample sets overlap")
            seen[idx] = True
        if not seen.all():
            raise ValueError("leaf sample sets do not cover all samples")
        return self


def _codes(labels: Sequence) -> np.ndarray:
    _, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes


def contingency(labels_a: Sequence, labels_b: Sequence) -> np.ndarray:
    a, b = _codes(labels_a), _codes(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label lengths differ: {a.shape} vs {b.shape}")
    r, c = a.max() + 1, b.max() + 1
    table = np.zeros((r, c), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def nmi(labels_a: Sequence, labels_b: Sequence) -> float:
    """Mutual information normalized by the mean of the two entropies.

    Natural logs. Degenerate single-class partitions score 0.
    """
    table = contingency(labels_a, labels_b)
    n = table.sum()
    if n < 1:
        raise ValueError("labels must be non-empty")
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    hb = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pij = table / n
    mask = pij > 0
    outer = np.outer(pa, pb)
    mi = np.sum(pij[mask] * np.log(pij[mask] / outer[mask]))
    return float(mi / (0.5 * (ha + hb)))


def _comb2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def ari(labels_a: Sequence, labels_b: Sequence) -> float:
    """Adjusted Rand index under the permutation null; 0/0 counts as 1."""
    table = contingency(labels_a, labels_b)
    n = int(table.sum())
    if n < 2:
        raise ValueError("ari needs at least 2 samples")
    sum_ij = int(_comb2(table).sum())
    sum_a = int(_comb2(table.sum(axis=1)).sum())
    sum_b = int(_comb2(table.sum(axis=0)).sum())
    total = int(_comb2(np.array(n)))
    expected = sum_a * sum_b / total
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


def batch_nmi(batch_labels: Sequence, cluster_labels: Sequence) -> float:
    """NMI between batch assignment and clustering; low means well mixed."""
    return nmi(batch_labels, cluster_labels)


def _leaf_histograms(tree: Dendrogram, codes: np.ndarray, n_classes: int):
    leaves = tree.leaves()
    hists = []
    for leaf in leaves:
        idx = np.asarray(leaf.samples, dtype=np.int64)
        hists.append(np.bincount(codes[idx], minlength=n_classes))
    return leaves, hists


def dendrogram_purity(tree: Dendrogram, labels: Sequence) -> float:
    """Mean, over same-class pairs, of their lowest common ancestor's purity.

    Exact: every node contributes the pairs whose LCA it is, weighted by the
    class fraction of its subtree.
    """
    codes = _codes(labels)
    if len(codes) != tree.n_samples:
        raise ValueError("labels must cover all samples in the dendrogram")
    n_classes = codes.max() + 1
    class_pairs = _comb2(np.bincount(codes, minlength=n_classes)).sum()
    if class_pairs == 0:
        raise ValueError("dendrogram purity undefined: every class is a singleton")

    total = 0.0

    def walk(node: DendrogramNode) -> np.ndarray:
        nonlocal total
        if node.is_leaf:
            hist = np.bincount(codes[np.asarray(node.samples, dtype=np.int64)], minlength=n_classes)
            size = hist.sum()
            if size:
                total += float(np.sum(_comb2(hist) * hist)) / size
            return hist
        hl = walk(node.left)
        hr = walk(node.right)
        hist = hl + hr
        size = hist.sum()
        if size:
            total += float(np.sum(hl * hr * hist)) / size
        return hist

    walk(tree.root)
    return total / float(class_pairs)


def leaf_purity(tree: Dendrogram, labels: Sequence) -> float:
    """Sample-weighted majority-class fraction over leaves."""
    codes = _codes(labels)
    if len(codes) != tree.n_samples:
        raise ValueError("labels must cover all samples in the dendrogram")
    if tree.n_samples == 0:
        raise ValueError("empty dendrogram")
    n_classes = codes.max() + 1
    _, hists = _leaf_histograms(tree, codes, n_classes)
    return float(sum(int(h.max()) for h in hists if h.sum() > 0)) / tree.n_samples


@dataclass
class MetricsReport:
    nmi: Optional[float]
    ari: Optional[float]
    dp: Optional[float]
    lp: Optional[float]
    nmi_batch_cluster: float
    n_clusters: int
    nmi_batch_celltype: Optional[float] = None
    per_leaf_histograms: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "nmi": self.nmi,
            "ari": self.ari,
            "dp": self.dp,
            "lp": self.lp,
            "nmi_batch_cluster": self.nmi_batch_cluster,
            "nmi_batch_celltype": self.nmi_batch_celltype,
            "n_clusters": self.n_clusters,
            "per_leaf_histograms": self.per_leaf_histograms,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def evaluate_clustering(
    cluster_labels: Sequence,
    batch_labels: Sequence,
    tree: Optional[Dendrogram],
    celltype_labels: Optional[Sequence] = None,
) -> MetricsReport:
    """Assemble the standard report; cell-type metrics are null without labels."""
    cluster_labels = np.asarray(cluster_labels)
    n_clusters = len(np.unique(cluster_labels))
    report = MetricsReport(
        nmi=None,
        ari=None,
        dp=None,
        lp=None,
        nmi_batch_cluster=batch_nmi(batch_labels, cluster_labels),
        n_clusters=n_clusters,
    )
    if celltype_labels is not None:
        report.nmi = nmi(celltype_labels, cluster_labels)
        report.ari = ari(celltype_labels, cluster_labels)
        report.nmi_batch_celltype = nmi(batch_labels, celltype_labels)
        if tree is not None:
            report.dp = dendrogram_purity(tree, celltype_labels)
            report.lp = leaf_purity(tree, celltype_labels)
        types = np.asarray(celltype_labels)
        for k, cluster in enumerate(np.unique(cluster_labels)):
            members = types[cluster_labels == cluster]
            vals, counts = np.unique(members, return_counts=True)
            report.per_leaf_histograms[str(cluster)] = {
                str(v): int(c) for v, c in zip(vals, counts)
            }
    return report
