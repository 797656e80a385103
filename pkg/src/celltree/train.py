"""Growing and training the tree.

The schedule alternates refinement of a fixed tree with divisive growth:
score the leaves (either by training throwaway proposal subtrees and
comparing their children's reconstruction likelihoods, or simply by
assigned-sample count), attach the winning split, train only the fresh
subtree on that leaf's cells, then finetune everything. Every phase draws
its randomness from a stream keyed by (seed, phase, iteration, leaf), so
runs are bit-reproducible and proposals are order-independent.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    ModelConfig,
    Node,
    NumericalFailureError,
    Subtree,
    TreeModel,
    assign_clusters,
    nb_log_likelihood,
)
from .ndgrad.optim import Adam
from .ndgrad.tensor import recording

__all__ = [
    "TrainConfig",
    "SplitScore",
    "TrainLog",
    "stream",
    "build_model",
    "train_refine",
    "compute_assignments",
    "propose_split",
    "select_split",
    "grow",
    "prune_empty_leaves",
]


@dataclass
class TrainConfig:
    n_leaves_target: int = 4
    split_rule: str = "reconstruction"  # or "sample_count"
    seed: int = 0
    latent_dim: int = 10
    bottom_up_dim: int = 128
    hidden_dim: int = 128
    subtree_epochs: int = 100
    proposal_epochs: int = 10
    intermediate_finetune_epochs: int = 50
    final_finetune_epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 0.001
    weight_decay: float = 1e-5
    kl_start: float = 0.001
    kl_end: float = 1.0
    use_batch_offsets: bool = True
    min_split_cells: Optional[int] = None  # defaults to 2 * batch_size

    def validate(self) -> "TrainConfig":
        if self.n_leaves_target < 2:
            raise ValueError("n_leaves_target must be at least 2")
        if self.split_rule not in ("reconstruction", "sample_count"):
            raise ValueError(f"unknown split rule '{self.split_rule}'")
        for name in (
            "subtree_epochs",
            "proposal_epochs",
            "intermediate_finetune_epochs",
            "final_finetune_epochs",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not (0.0 < self.kl_start <= self.kl_end <= 1.0):
            raise ValueError("kl schedule must satisfy 0 < start <= end <= 1")
        return self

    @property
    def split_threshold(self) -> int:
        return 2 * self.batch_size if self.min_split_cells is None else self.min_split_cells

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SplitScore:
    leaf_id: int
    score: float
    subtree: Optional[Subtree]
    n_assigned: int = 0


class TrainLog:
    """Collects per-epoch records; optionally mirrors them to a JSONL file."""

    def __init__(self, path: Optional[str] = None):
        self.records: List[dict] = []
        self._path = path
        if path is not None:
            with open(path, "w", encoding="utf-8"):
                pass

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._path is not None:
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def stream(*key: int) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def build_model(data, cfg: TrainConfig) -> TreeModel:
    """Fresh root-plus-two-leaves model sized to the data."""
    mc = ModelConfig(
        n_genes=data.x.shape[1],
        n_batches=data.batch_onehot.shape[1],
        latent_dim=cfg.latent_dim,
        bottom_up_dim=cfg.bottom_up_dim,
        hidden_dim=cfg.hidden_dim,
        use_batch_offsets=cfg.use_batch_offsets,
    )
    return TreeModel(mc, stream(cfg.seed, 0))


def _set_modes(model: TreeModel, train_modules) -> None:
    model.eval()
    if train_modules == "all":
        model.train()
    else:
        for mod in train_modules:
            mod.train()


def _minibatches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        batch = order[start : start + batch_size]
        if len(batch) >= 2:  # batchnorm needs two rows
            yield batch


def _kl_at(epoch: int, total: int, lo: float, hi: float) -> float:
    if total <= 1:
        return hi
    return lo + (hi - lo) * epoch / (total - 1)


def _run_phase(
    model: TreeModel,
    data,
    indices: np.ndarray,
    epochs: int,
    params,
    train_modules,
    cfg: TrainConfig,
    rng: np.random.Generator,
    phase: str,
    log: Optional[TrainLog],
    kl_range: Optional[Tuple[float, float]],
) -> List[dict]:
    """One optimization phase over the given cells; returns per-epoch history."""
    if epochs <= 0:
        return []
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history: List[dict] = []
    for epoch in range(epochs):
        _set_modes(model, train_modules)
        w = _kl_at(epoch, epochs, *kl_range) if kl_range is not None else cfg.kl_end
        sums: Dict[str, float] = {}
        n_batches = 0
        for batch in _minibatches(indices, cfg.batch_size, rng):
            opt.zero_grad()
            with recording() as tape:
                paths = model.infer_paths(data.x[batch], mode="sample", rng=rng)
                loss, parts = model.elbo(
                    data.counts[batch], data.batch_onehot[batch], data.library[batch], paths, w
                )
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalFailureError(
                    f"non-finite loss in phase '{phase}' at epoch {epoch}"
                )
            tape.backward(loss)
            opt.step()
            sums["loss"] = sums.get("loss", 0.0) + value
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        record = {
            "phase": phase,
            "epoch": epoch,
            "kl_weight": w,
            "n_leaves": len(model.leaves()),
        }
        for k, v in sums.items():
            record[k] = v / max(n_batches, 1)
        assignments = compute_assignments(model, data)
        counts = np.bincount(assignments, minlength=len(model.leaves()))
        record["leaf_counts"] = counts.tolist()
        _set_modes(model, train_modules)
        history.append(record)
        if log is not None:
            log.write(record)
    return history


def train_refine(
    model: TreeModel,
    data,
    epochs: int,
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    kl_range: Optional[Tuple[float, float]] = None,
    log: Optional[TrainLog] = None,
    phase: str = "refine",
) -> List[dict]:
    """Minibatch optimization of the whole model on all cells."""
    rng = rng if rng is not None else stream(cfg.seed, 1)
    indices = np.arange(data.x.shape[0])
    return _run_phase(
        model, data, indices, epochs, model.parameters(), "all", cfg, rng, phase, log, kl_range
    )


def compute_assignments(model: TreeModel, data, chunk: int = 2048) -> np.ndarray:
    """Hard leaf assignment (argmax reach) under mean-mode inference."""
    model.eval()
    n = data.x.shape[0]
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        paths = model.infer_paths(data.x[start:stop], mode="mean")
        out[start:stop] = assign_clusters(paths)
    return out


def _leaf_loglik_gap(model: TreeModel, data, indices: np.ndarray, subtree: Subtree) -> float:
    """Mean absolute difference of the two proposal children's per-cell
    reconstruction log likelihoods, under mean-mode inference."""
    model.eval()
    theta = model.dispersion()
    gaps = []
    for start in range(0, len(indices), 2048):
        batch = indices[start : start + 2048]
        paths = model.infer_paths(data.x[batch], mode="mean")
        by_id = {s.node.node_id: s for s in paths.leaves}
        lls = []
        for child in (subtree.left, subtree.right):
            state = by_id[child.node_id]
            mu = model.decode_leaf(
                child, state.z, data.batch_onehot[batch], data.library[batch]
            )
            lls.append(nb_log_likelihood(data.counts[batch], mu, theta).data)
        gaps.append(np.abs(lls[0] - lls[1]))
    return float(np.concatenate(gaps).mean())


def propose_split(
    model: TreeModel,
    data,
    leaf: Node,
    indices: np.ndarray,
    cfg: TrainConfig,
    iteration: int,
    log: Optional[TrainLog] = None,
) -> SplitScore:
    """Attach a throwaway two-leaf subtree, train only it on the leaf's
    cells, score it by the children's likelihood gap, then detach it.

    The trained subtree is returned so the winner can be re-attached as-is.
    A leaf with no assigned cells scores 0 with an untrained subtree.
    """
    rng = stream(cfg.seed, 2, iteration, leaf.node_id)
    subtree = model.make_subtree(leaf, rng)
    model.attach_subtree(leaf, subtree)
    try:
        if len(indices) >= 2:
            _run_phase(
                model,
                data,
                np.asarray(indices),
                cfg.proposal_epochs,
                subtree.parameters(),
                subtree.modules(),
                cfg,
                rng,
                f"proposal_leaf{leaf.node_id}",
                log,
                (cfg.kl_start, cfg.kl_end),
            )
            model.proposals_trained += 1
            score = _leaf_loglik_gap(model, data, np.asarray(indices), subtree)
        else:
            score = 0.0
    finally:
        model.detach_subtree(leaf, subtree)
    return SplitScore(leaf_id=leaf.node_id, score=score, subtree=subtree, n_assigned=len(indices))


def select_split(scores: Sequence[SplitScore], rule: str) -> SplitScore:
    """Winning leaf under the given rule; ties go to the smallest leaf id."""
    if not scores:
        raise ValueError("no eligible leaf to split")
    if rule == "reconstruction":
        key = lambda s: (-s.score, s.leaf_id)
    elif rule == "sample_count":
        key = lambda s: (-s.n_assigned, s.leaf_id)
    else:
        raise ValueError(f"unknown split rule '{rule}'")
    return min(scores, key=key)


def grow(model: TreeModel, data, cfg: TrainConfig, log: Optional[TrainLog] = None) -> TreeModel:
    """Full schedule: initial refinement, leaf-by-leaf growth to the target
    count, and a final finetune. Stops early if no leaf is still splittable."""
    cfg.validate()
    train_refine(
        model,
        data,
        cfg.subtree_epochs,
        cfg,
        rng=stream(cfg.seed, 1),
        kl_range=(cfg.kl_start, cfg.kl_end),
        log=log,
        phase="initial_refine",
    )
    iteration = 0
    while len(model.leaves()) < cfg.n_leaves_target:
        assignments = compute_assignments(model, data)
        leaves = model.leaves()
        counts = np.bincount(assignments, minlength=len(leaves))
        eligible = [
            (leaf, np.flatnonzero(assignments == k))
            for k, leaf in enumerate(leaves)
            if counts[k] >= cfg.split_threshold
        ]
        if not eligible:
            warnings.warn(
                f"growth stopped at {len(leaves)} leaves: no leaf has "
                f"{cfg.split_threshold} assigned cells"
            )
            break
        if cfg.split_rule == "reconstruction":
            scores = [
                propose_split(model, data, leaf, idx, cfg, iteration, log)
                for leaf, idx in eligible
            ]
            winner = select_split(scores, "reconstruction")
        else:
            scores = [
                SplitScore(leaf_id=leaf.node_id, score=0.0, subtree=None, n_assigned=len(idx))
                for leaf, idx in eligible
            ]
            winner = select_split(scores, "sample_count")
        leaf, idx = next(
            (leaf, idx) for leaf, idx in eligible if leaf.node_id == winner.leaf_id
        )
        subtree = winner.subtree
        if subtree is None:  # sample-count rule trains no proposals
            subtree = model.make_subtree(leaf, stream(cfg.seed, 2, iteration, leaf.node_id))
        model.attach_subtree(leaf, subtree)
        _run_phase(
            model,
            data,
            idx,
            cfg.subtree_epochs,
            subtree.parameters(),
            subtree.modules(),
            cfg,
            stream(cfg.seed, 3, iteration),
            f"subtree_leaf{leaf.node_id}",
            log,
            (cfg.kl_start, cfg.kl_end),
        )
        train_refine(
            model,
            data,
            cfg.intermediate_finetune_epochs,
            cfg,
            rng=stream(cfg.seed, 4, iteration),
            kl_range=None,
            log=log,
            phase=f"finetune_{iteration}",
        )
        iteration += 1
    train_refine(
        model,
        data,
        cfg.final_finetune_epochs,
        cfg,
        rng=stream(cfg.seed, 5),
        kl_range=None,
        log=log,
        phase="final_finetune",
    )
    return model


def prune_empty_leaves(model: TreeModel, data) -> TreeModel:
    """Drop leaves that attract no cells under mean-mode argmax assignment."""
    assignments = compute_assignments(model, data)
    leaves = model.leaves()
    counts = np.bincount(assignments, minlength=len(leaves))
    keep = {leaf.node_id for k, leaf in enumerate(leaves) if counts[k] > 0}
    if len(keep) < len(leaves):
        model.prune_to(keep)
    return model
