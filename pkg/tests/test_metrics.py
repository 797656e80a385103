import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from celltree.metrics import (
    Dendrogram,
    DendrogramNode,
    ari,
    batch_nmi,
    dendrogram_purity,
    evaluate_clustering,
    leaf_purity,
    nmi,
)


# ---------------------------------------------------------------- oracles
def nmi_bruteforce(a, b):
    a, b = list(a), list(b)
    n = len(a)
    ua, ub = sorted(set(a)), sorted(set(b))
    pij = {}
    for x, y in zip(a, b):
        pij[(x, y)] = pij.get((x, y), 0) + 1
    pa = {x: a.count(x) / n for x in ua}
    pb = {y: b.count(y) / n for y in ub}
    mi = 0.0
    for (x, y), c in pij.items():
        p = c / n
        mi += p * math.log(p / (pa[x] * pb[y]))
    ha = -sum(p * math.log(p) for p in pa.values())
    hb = -sum(p * math.log(p) for p in pb.values())
    if ha == 0.0 or hb == 0.0:
        return 0.0
    return mi / (0.5 * (ha + hb))


def ari_bruteforce(a, b):
    n = len(a)
    ss = sd = ds = dd = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_a = a[i] == a[j]
            same_b = b[i] == b[j]
            if same_a and same_b:
                ss += 1
            elif same_a:
                sd += 1
            elif same_b:
                ds += 1
            else:
                dd += 1
    sum_a = ss + sd
    sum_b = ss + ds
    total = n * (n - 1) // 2
    expected = sum_a * sum_b / total
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return (ss - expected) / (maximum - expected)


def random_dendrogram(rng, n):
    """Random binary merge tree over singleton leaves."""
    nodes = [DendrogramNode(samples=np.array([i])) for i in range(n)]
    while len(nodes) > 1:
        i, j = sorted(rng.choice(len(nodes), size=2, replace=False))
        b = nodes.pop(j)
        a = nodes.pop(i)
        nodes.append(DendrogramNode(left=a, right=b))
    return Dendrogram(root=nodes[0], n_samples=n).validate()


def dp_bruteforce(tree, labels):
    """O(n^2) pair enumeration with explicit LCA lookup."""
    labels = np.asarray(labels)
    parent = {}
    subtree = {}

    def walk(node):
        if node.is_leaf:
            subtree[id(node)] = list(np.asarray(node.samples))
        else:
            for child in (node.left, node.right):
                parent[id(child)] = node
                walk(child)
            subtree[id(node)] = subtree[id(node.left)] + subtree[id(node.right)]

    walk(tree.root)

    leaf_of = {}
    for leaf in tree.leaves():
        for s in np.asarray(leaf.samples):
            leaf_of[int(s)] = leaf

    def ancestors(node):
        chain = [node]
        while id(node) in parent:
            node = parent[id(node)]
            chain.append(node)
        return chain

    total, pairs = 0.0, 0
    n = tree.n_samples
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] != labels[j]:
                continue
            up_i = ancestors(leaf_of[i])
            up_j = set(id(x) for x in ancestors(leaf_of[j]))
            lca = next(x for x in up_i if id(x) in up_j)
            members = subtree[id(lca)]
            purity = sum(labels[m] == labels[i] for m in members) / len(members)
            total += purity
            pairs += 1
    return total / pairs


# ----------------------------------------------------------------- tests
def test_nmi_relabeled_identity():
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)


def test_nmi_independent_partitions():
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-15)


def test_nmi_hand_computed_case():
    # contingency [[2,0],[1,1]]: H(A)=H(B)=log 2 ... compute by the oracle
    assert nmi([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(
        nmi_bruteforce([0, 0, 1, 1], [0, 0, 0, 1]), abs=1e-12
    )


def test_nmi_single_class_convention():
    assert nmi([0, 0, 0], [0, 1, 2]) == 0.0


def test_nmi_length_mismatch():
    with pytest.raises(ValueError):
        nmi([0, 1], [0, 1, 2])


def test_ari_identical():
    assert ari([0, 1, 1, 2], [5, 3, 3, 7]) == pytest.approx(1.0)


def test_ari_one_cluster_vs_many():
    assert ari([0, 0, 0, 0], [0, 1, 2, 3]) == pytest.approx(0.0)


def test_ari_trivial_identical_partitions_resolve_to_one():
    assert ari([0, 0, 0], [1, 1, 1]) == 1.0
    assert ari([0, 1, 2], [2, 1, 0]) == 1.0


def test_nmi_ari_match_bruteforce_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 31))
        a = rng.integers(0, rng.integers(1, 5) + 1, size=n).tolist()
        b = rng.integers(0, rng.integers(1, 5) + 1, size=n).tolist()
        assert nmi(a, b) == pytest.approx(nmi_bruteforce(a, b), abs=1e-12)
        assert ari(a, b) == pytest.approx(ari_bruteforce(a, b), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_nmi_ari_symmetric_and_rename_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    a = rng.integers(0, 4, size=n)
    b = rng.integers(0, 4, size=n)
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)
    assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-12)
    remap = rng.permutation(4)
    assert nmi(remap[a], b) == pytest.approx(nmi(a, b), abs=1e-12)
    assert ari(remap[a], b) == pytest.approx(ari(a, b), abs=1e-12)


def test_dendrogram_purity_pure_leaves():
    left = DendrogramNode(samples=np.array([0, 1]))
    right = DendrogramNode(samples=np.array([2, 3]))
    tree = Dendrogram(DendrogramNode(left=left, right=right), 4).validate()
    assert dendrogram_purity(tree, [0, 0, 1, 1]) == 1.0


def test_dendrogram_purity_same_leaf_pair():
    tree = Dendrogram(DendrogramNode(samples=np.array([0, 1])), 2).validate()
    assert dendrogram_purity(tree, ["x", "x"]) == 1.0


def test_dendrogram_purity_all_singletons_undefined():
    tree = Dendrogram(DendrogramNode(samples=np.array([0, 1])), 2)
    with pytest.raises(ValueError):
        dendrogram_purity(tree, [0, 1])


def test_dendrogram_purity_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(4, 65))
        tree = random_dendrogram(rng, n)
        labels = rng.integers(0, 3, size=n)
        if np.max(np.bincount(labels)) < 2:
            labels[0] = labels[1]
        assert dendrogram_purity(tree, labels) == pytest.approx(
            dp_bruteforce(tree, labels), abs=1e-12
        )


def test_dendrogram_purity_invariant_to_child_swap():
    rng = np.random.default_rng(2)
    tree = random_dendrogram(rng, 12)
    labels = rng.integers(0, 2, size=12)
    before = dendrogram_purity(tree, labels)
    tree.root.left, tree.root.right = tree.root.right, tree.root.left
    assert dendrogram_purity(tree, labels) == pytest.approx(before, abs=1e-15)


def test_leaf_purity_pure_and_mixed():
    pure = Dendrogram(
        DendrogramNode(
            left=DendrogramNode(samples=np.array([0, 1])),
            right=DendrogramNode(samples=np.array([2])),
        ),
        3,
    ).validate()
    assert leaf_purity(pure, [0, 0, 1]) == 1.0
    one_leaf = Dendrogram(DendrogramNode(samples=np.array([0, 1])), 2).validate()
    assert leaf_purity(one_leaf, [0, 1]) == 0.5


def test_leaf_purity_matches_direct_recount():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(3, 40))
        tree = random_dendrogram(rng, n)
        labels = rng.integers(0, 3, size=n)
        want = 0.0
        for leaf in tree.leaves():
            members = labels[np.asarray(leaf.samples)]
            want += np.max(np.bincount(members, minlength=3))
        assert leaf_purity(tree, labels) == pytest.approx(want / n, abs=1e-15)


def test_leaf_purity_singleton_leaves_equal_one():
    rng = np.random.default_rng(4)
    tree = random_dendrogram(rng, 10)
    labels = rng.integers(0, 3, size=10)
    assert leaf_purity(tree, labels) == 1.0


def test_batch_nmi_trivials():
    assert batch_nmi([0, 0, 1, 1], [0, 0, 1, 1]) == pytest.approx(1.0)
    assert batch_nmi([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-15)


def test_evaluate_clustering_without_celltypes():
    report = evaluate_clustering([0, 1, 0, 1], ["a", "a", "b", "b"], None)
    assert report.nmi is None and report.ari is None and report.dp is None
    assert report.n_clusters == 2
    assert "nmi_batch_cluster" in report.to_json()


def test_evaluate_clustering_full_report():
    tree = Dendrogram(
        DendrogramNode(
            left=DendrogramNode(samples=np.array([0, 1])),
            right=DendrogramNode(samples=np.array([2, 3])),
        ),
        4,
    ).validate()
    report = evaluate_clustering(
        [0, 0, 1, 1], ["a", "b", "a", "b"], tree, ["x", "x", "y", "y"]
    )
    assert report.nmi == pytest.approx(1.0)
    assert report.ari == pytest.approx(1.0)
    assert report.dp == 1.0 and report.lp == 1.0
    assert report.per_leaf_histograms["0"] == {"x": 2}
