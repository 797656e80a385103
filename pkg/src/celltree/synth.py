"""Synthetic count data with a known type hierarchy and batch structure.

Types live on the leaves of a random binary tree; their log-expression
profiles diffuse from the root, batches add independent log offsets, and
counts are drawn from a gamma-Poisson mixture so every quantity the model
is supposed to recover is known exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import CountMatrix

__all__ = ["TypeTree", "SyntheticTruth", "generate_synthetic", "truth_to_json", "truth_from_json"]


@dataclass
class TypeTree:
    """Binary hierarchy over type ids; leaves carry ``type_id``."""

    node_id: int
    children: Tuple["TypeTree", "TypeTree"] | None = None
    type_id: Optional[int] = None

    def leaves(self) -> List["TypeTree"]:
        if self.children is None:
            return [self]
        return self.children[0].leaves() + self.children[1].leaves()

    def to_dict(self) -> dict:
        if self.children is None:
            return {"id": self.node_id, "type": self.type_id, "children": []}
        return {
            "id": self.node_id,
            "children": [c.to_dict() for c in self.children],
        }

    @staticmethod
    def from_dict(d: dict) -> "TypeTree":
        kids = d.get("children") or []
        if not kids:
            return TypeTree(node_id=d["id"], type_id=d.get("type"))
        return TypeTree(
            node_id=d["id"],
            children=(TypeTree.from_dict(kids[0]), TypeTree.from_dict(kids[1])),
        )


@dataclass
class SyntheticTruth:
    true_type: np.ndarray  # (n,) int type ids
    true_tree: TypeTree
    batch_log_offsets: np.ndarray  # (B, g)
    type_log_means: np.ndarray  # (T, g)
    dispersion: np.ndarray  # (g,) strictly positive


def _random_type_tree(n_types: int, rng: np.random.Generator) -> TypeTree:
    """Agglomerate type leaves pairwise in random order."""
    nodes = [TypeTree(node_id=i, type_id=i) for i in range(n_types)]
    next_id = n_types
    while len(nodes) > 1:
        i, j = sorted(rng.choice(len(nodes), size=2, replace=False))
        right = nodes.pop(j)
        left = nodes.pop(i)
        nodes.append(TypeTree(node_id=next_id, children=(left, right)))
        next_id += 1
    return nodes[0]


def _diffuse_means(
    tree: TypeTree, n_types: int, n_genes: int, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    means = np.zeros((n_types, n_genes))

    def walk(node: TypeTree, profile: np.ndarray) -> None:
        if node.children is None:
            means[node.type_id] = profile
            return
        for child in node.children:
            walk(child, profile + rng.normal(0.0, sigma, size=n_genes))

    walk(tree, np.zeros(n_genes))
    return means


def generate_synthetic(
    n_cells: int,
    n_genes: int,
    n_types: int,
    n_batches: int,
    proportions: Optional[Sequence[float]] = None,
    batch_strength: float = 0.5,
    seed: int = 0,
    tree_sigma: float = 0.5,
    log_library: float = np.log(2000.0),
    library_sigma: float = 0.3,
) -> Tuple[CountMatrix, SyntheticTruth]:
    """Draw a labeled dataset; bit-identical for a fixed seed.

    Counts come out negative-binomial per gene: the per-cell mean is
    ``library * softmax(type_log_mean + batch_log_offset)`` and the shape
    parameter is the per-gene dispersion, realized as gamma-Poisson.
    """
    if proportions is None:
        proportions = np.full(n_types, 1.0 / n_types)
    else:
        proportions = np.asarray(proportions, dtype=np.float64)
        if proportions.shape != (n_types,) or abs(proportions.sum() - 1.0) > 1e-9:
            raise ValueError("proportions must have one entry per type and sum to 1")
        if np.any(proportions < 0):
            raise ValueError("proportions must be non-negative")

    rng = np.random.default_rng(seed)
    tree = _random_type_tree(n_types, rng)
    type_log_means = _diffuse_means(tree, n_types, n_genes, tree_sigma, rng)
    batch_log_offsets = rng.normal(0.0, batch_strength, size=(n_batches, n_genes))
    dispersion = np.exp(rng.normal(0.0, 0.5, size=n_genes))

    cell_type = rng.choice(n_types, size=n_cells, p=proportions)
    cell_batch = rng.integers(0, n_batches, size=n_cells)
    library = np.exp(rng.normal(log_library, library_sigma, size=n_cells))

    logits = type_log_means[cell_type] + batch_log_offsets[cell_batch]
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    mean = library[:, None] * probs

    lam = rng.gamma(shape=dispersion[None, :], scale=mean / dispersion[None, :])
    counts = rng.poisson(lam).astype(np.int64)

    cm = CountMatrix(
        counts=counts,
        cell_ids=[f"cell{i}" for i in range(n_cells)],
        gene_ids=[f"gene{j}" for j in range(n_genes)],
        batch=np.array([f"batch{b}" for b in cell_batch], dtype=object),
        cell_type=np.array([f"type{t}" for t in cell_type], dtype=object),
    ).validate()
    truth = SyntheticTruth(
        true_type=cell_type,
        true_tree=tree,
        batch_log_offsets=batch_log_offsets,
        type_log_means=type_log_means,
        dispersion=dispersion,
    )
    return cm, truth


def truth_to_json(truth: SyntheticTruth) -> str:
    payload = {
        "tree": truth.true_tree.to_dict(),
        "true_type": truth.true_type.tolist(),
        "batch_log_offsets": {
            "shape": list(truth.batch_log_offsets.shape),
            "values": truth.batch_log_offsets.reshape(-1).tolist(),
        },
        "type_log_means": {
            "shape": list(truth.type_log_means.shape),
            "values": truth.type_log_means.reshape(-1).tolist(),
        },
        "dispersion": truth.dispersion.tolist(),
    }
    return json.dumps(payload, sort_keys=True)


def truth_from_json(text: str) -> SyntheticTruth:
    payload = json.loads(text)

    def unpack(d):
        return np.array(d["values"]).reshape(d["shape"])

    return SyntheticTruth(
        true_type=np.array(payload["true_type"], dtype=np.int64),
        true_tree=TypeTree.from_dict(payload["tree"]),
        batch_log_offsets=unpack(payload["batch_log_offsets"]),
        type_log_means=unpack(payload["type_log_means"]),
        dispersion=np.array(payload["dispersion"]),
    )
