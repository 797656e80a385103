"""The tree-structured count model.

A shared bottom-up chain (linear + batchnorm + LeakyReLU blocks, one per
tree level, each with a Gaussian head) encodes a cell; a binary tree of
routers and per-edge transformations defines the latent hierarchy; each
leaf decodes its embedding, plus a learned per-batch offset, into the mean
of a negative binomial over gene counts whose per-gene dispersion is shared
across leaves.

Inference follows the ladder pattern: the root posterior comes from the
deepest head, and each descent step merges the bottom-up head at that depth
with the parent-conditioned prior by precision weighting. Routing toward a
leaf multiplies inference-router probabilities, so leaf reach probabilities
sum to one by construction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .metrics import Dendrogram, DendrogramNode
from .ndgrad import nn
from .ndgrad import tensor as T
from .ndgrad.special import lgamma as lgamma_np
from .ndgrad.tensor import DomainError, Tensor

__all__ = [
    "NumericalFailureError",
    "ModelConfig",
    "Node",
    "TreeModel",
    "Subtree",
    "PosteriorPath",
    "NodeState",
    "nb_log_likelihood",
    "gaussian_kl",
    "bernoulli_kl_from_logits",
    "precision_merge",
    "assign_clusters",
    "model_dendrogram",
]


class NumericalFailureError(RuntimeError):
    """A forward pass or loss produced non-finite values."""


@dataclass
class ModelConfig:
    n_genes: int
    n_batches: int
    latent_dim: int = 10
    bottom_up_dim: int = 128
    hidden_dim: int = 128
    logvar_clip: float = 10.0
    use_batch_offsets: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


class GaussianHead(nn.Module):
    """Two linear maps emitting a mean and a clipped log-variance.

    Output weights start at zero so every head initially emits N(0, 1);
    hidden layers upstream break the symmetry once gradients arrive. This
    keeps freshly attached heads from fighting a trained model.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, clip_at: float):
        super().__init__()
        self.mu = nn.Linear(in_dim, out_dim, rng)
        self.logvar = nn.Linear(in_dim, out_dim, rng)
        self.mu.weight.data[...] = 0.0
        self.logvar.weight.data[...] = 0.0
        self.clip_at = clip_at

    def __call__(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        return self.mu(h), T.clip(self.logvar(h), -self.clip_at, self.clip_at)


class EncoderBlock(nn.Module):
    def __init__(self, in_dim: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.linear = nn.Linear(in_dim, width, rng)
        self.bn = nn.BatchNorm1d(width)

    def __call__(self, x: Tensor) -> Tensor:
        return T.leaky_relu(self.bn(self.linear(x)), nn.LEAKY_SLOPE)


class TransformNet(nn.Module):
    """Map from a parent embedding to a child prior: one batchnormed
    hidden block, then a Gaussian head."""

    def __init__(self, latent: int, hidden: int, rng: np.random.Generator, clip_at: float):
        super().__init__()
        self.hidden = nn.Linear(latent, hidden, rng)
        self.bn = nn.BatchNorm1d(hidden)
        self.head = GaussianHead(hidden, latent, rng, clip_at)

    def __call__(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        return self.head(T.leaky_relu(self.bn(self.hidden(z)), nn.LEAKY_SLOPE))


ROUTER_LOGIT_BOUND = 8.0


class RouterNet(nn.Module):
    """One batchnormed hidden block feeding a single go-left logit.

    Routing is the part of training that dies first: if one child fits
    marginally better for every cell at once, the logit develops a global
    offset, saturates, and the other child never sees gradient again. Three
    safeguards: the logit layer starts at zero (uniform routing), the raw
    logit is batch-normalized (a minibatch's logits always straddle their
    mean, so a global offset can only enter through the slow learnable
    shift), and the result is squashed through a scaled tanh so that
    probabilities stay strictly inside (0, 1) in float arithmetic and a
    starved child keeps a live gradient path.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden, rng)
        self.bn = nn.BatchNorm1d(hidden)
        self.logit = nn.Linear(hidden, 1, rng)
        self.logit.weight.data[...] = 0.0
        self.logit_bn = nn.BatchNorm1d(1)

    def __call__(self, h: Tensor) -> Tensor:
        a = T.leaky_relu(self.bn(self.hidden(h)), nn.LEAKY_SLOPE)
        raw = self.logit_bn(self.logit(a))
        bound = Tensor(ROUTER_LOGIT_BOUND)
        return T.mul(bound, T.tanh(T.div(raw, bound)))


class Node:
    """Tree node: internal (two children + routers), leaf (decoder), or a
    pass-through chain node left behind by pruning (single child)."""

    __slots__ = ("node_id", "transform", "router_q", "router_p", "decoder", "left", "right")

    def __init__(self, node_id: int, transform: Optional[TransformNet] = None):
        self.node_id = node_id
        self.transform = transform  # None only at the root
        self.router_q: Optional[RouterNet] = None  # reads bottom-up features
        self.router_p: Optional[RouterNet] = None  # reads the sampled embedding
        self.decoder: Optional[nn.Linear] = None
        self.left: Optional[Node] = None
        self.right: Optional[Node] = None

    @property
    def is_leaf(self) -> bool:
        return self.decoder is not None

    @property
    def is_internal(self) -> bool:
        return self.router_q is not None

    def children(self) -> List["Node"]:
        return [c for c in (self.left, self.right) if c is not None]


@dataclass
class NodeState:
    """Per-sample inference record for one node."""

    node: Node
    depth: int
    reach: Tensor  # (n, 1) probability of reaching this node
    mu_q: Tensor
    logvar_q: Tensor
    z: Tensor
    mu_p: Optional[Tensor] = None  # None at the root (standard normal prior)
    logvar_p: Optional[Tensor] = None
    q_logit: Optional[Tensor] = None  # internal nodes only
    p_logit: Optional[Tensor] = None


@dataclass
class PosteriorPath:
    """All node states of one inference pass, leaves in left-to-right order."""

    states: List[NodeState]
    leaves: List[NodeState]

    def leaf_reach_matrix(self) -> np.ndarray:
        return np.concatenate([s.reach.data for s in self.leaves], axis=1)


def precision_merge(mu_hat, logvar_hat, mu_p, logvar_p):
    """Combine bottom-up and prior Gaussians by precision weighting."""
    v_hat = T.exp(logvar_hat)
    v_p = T.exp(logvar_p)
    denom = T.add(v_hat, v_p)
    mu_q = T.div(T.add(T.mul(mu_hat, v_p), T.mul(mu_p, v_hat)), denom)
    logvar_q = T.log(T.div(T.mul(v_hat, v_p), denom))
    return mu_q, logvar_q


def gaussian_kl(mu_q, logvar_q, mu_p=None, logvar_p=None) -> Tensor:
    """Diagonal-Gaussian KL(q || p) summed over the latent axis, shape (n, 1).

    Omitted prior arguments mean a standard normal.
    """
    if mu_p is None:
        d2 = T.mul(mu_q, mu_q)
        inner = T.sub(T.add(T.exp(logvar_q), d2), T.add(logvar_q, Tensor(1.0)))
    else:
        d = T.sub(mu_q, mu_p)
        ratio = T.mul(T.add(T.exp(logvar_q), T.mul(d, d)), T.exp(T.neg(logvar_p)))
        inner = T.sub(T.add(T.sub(logvar_p, logvar_q), ratio), Tensor(1.0))
    return T.mul(T.tsum(inner, axis=1, keepdims=True), Tensor(0.5))


def bernoulli_kl_from_logits(q_logit: Tensor, p_logit: Tensor) -> Tensor:
    """KL(Bern(sigmoid(a)) || Bern(sigmoid(b))), computed via softplus so no
    probability ever hits 0 or 1."""
    q = T.sigmoid(q_logit)
    left = T.mul(q, T.sub(T.softplus(T.neg(p_logit)), T.softplus(T.neg(q_logit))))
    right = T.mul(T.sub(Tensor(1.0), q), T.sub(T.softplus(p_logit), T.softplus(q_logit)))
    return T.add(left, right)


def _nb_count_terms(counts: np.ndarray, theta: Tensor) -> Tuple[Tensor, Tensor]:
    """Mean-independent pieces of the NB log pmf, shared across leaves.

    Returns the per-cell sum of ``lgamma(x + theta) - lgamma(theta) -
    lgamma(x + 1)`` as an (n, 1) tensor, plus ``log(theta)``.
    """
    x = Tensor(counts)
    gamma_part = T.sub(T.lgamma(T.add(x, theta)), T.lgamma(theta))
    shared = T.sub(
        T.tsum(gamma_part, axis=1, keepdims=True),
        Tensor(lgamma_np(counts + 1.0).sum(axis=1, keepdims=True)),
    )
    return shared, T.log(theta)


def _nb_mean_terms(counts: np.ndarray, mu: Tensor, theta: Tensor, log_theta: Tensor) -> Tensor:
    log_theta_mu = T.log(T.add(theta, mu))
    terms = T.add(
        T.mul(theta, T.sub(log_theta, log_theta_mu)),
        T.mul(Tensor(counts), T.sub(T.log(mu), log_theta_mu)),
    )
    return T.tsum(terms, axis=1, keepdims=True)


def nb_log_likelihood(counts: np.ndarray, mu: Tensor, theta: Tensor) -> Tensor:
    """Per-cell negative binomial log likelihood, summed over genes: (n, 1).

    ``mu`` is the (n, g) mean, ``theta`` the (g,) inverse dispersion; both
    must be strictly positive. Differentiable in both.
    """
    if np.any(mu.data <= 0.0):
        raise DomainError("nb_log_likelihood requires mu > 0")
    if np.any(theta.data <= 0.0):
        raise DomainError("nb_log_likelihood requires theta > 0")
    counts = np.asarray(counts, dtype=np.float64)
    shared, log_theta = _nb_count_terms(counts, theta)
    return T.add(shared, _nb_mean_terms(counts, mu, theta, log_theta))


class TreeModel(nn.Module):
    """Model state: encoder chain, tree, batch offsets, shared dispersion.

    ``shape`` describes the tree as nested pairs with ``None`` for a leaf,
    e.g. ``(None, None)`` for a root with two leaves (the default), or
    ``None`` for a degenerate single-leaf tree. The encoder chain holds one
    block and head per tree level; growing the tree one level deeper appends
    a freshly initialized block/head pair which then serves the root, the
    pair previously serving depth t moving to depth t + 1.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, shape=(None, None)):
        super().__init__()
        self.config = config
        self._next_id = 0
        self.root = self._build_node(None)
        if shape is not None:
            self._build_shape(self.root, shape, rng)
            # sibling leaves start from one shared decoder draw plus small
            # noise: a large random quality gap at step 0 hands all routing
            # mass to one child before either has learned anything
            leaves = [n for n in self.nodes() if n.is_leaf]
            base = leaves[0].decoder
            for leaf in leaves[1:]:
                leaf.decoder.weight.data = base.weight.data + rng.normal(
                    0.0, 0.01, base.weight.shape
                )
                leaf.decoder.bias.data = base.bias.data + rng.normal(0.0, 0.01, base.bias.shape)
        else:
            self.root.decoder = nn.Linear(config.latent_dim, config.n_genes, rng)
        depth = self.max_depth()
        self.blocks: List[EncoderBlock] = []
        self.heads: List[GaussianHead] = []
        for i in range(depth + 1):
            in_dim = config.n_genes if i == 0 else config.bottom_up_dim
            self.blocks.append(EncoderBlock(in_dim, config.bottom_up_dim, rng))
            self.heads.append(
                GaussianHead(config.bottom_up_dim, config.latent_dim, rng, config.logvar_clip)
            )
        self.batch_net = (
            nn.Linear(config.n_batches, config.n_genes, rng, bias=False)
            if config.use_batch_offsets
            else None
        )
        # softplus(raw) = 1 at init
        self.dispersion_raw = Tensor(
            np.full(config.n_genes, np.log(np.e - 1.0)), requires_grad=True
        )
        self.proposals_trained = 0  # growth bookkeeping, see train module

    # ------------------------------------------------------------ plumbing
    def _build_node(self, transform: Optional[TransformNet]) -> Node:
        node = Node(self._next_id, transform)
        self._next_id += 1
        return node

    def _build_shape(self, node: Node, shape, rng: np.random.Generator) -> None:
        cfg = self.config
        node.router_q = RouterNet(cfg.bottom_up_dim, cfg.hidden_dim, rng)
        node.router_p = RouterNet(cfg.latent_dim, cfg.hidden_dim, rng)
        for side, sub in zip(("left", "right"), shape):
            child = self._build_node(
                TransformNet(cfg.latent_dim, cfg.hidden_dim, rng, cfg.logvar_clip)
            )
            setattr(node, side, child)
            if sub is None:
                child.decoder = nn.Linear(cfg.latent_dim, cfg.n_genes, rng)
            else:
                self._build_shape(child, sub, rng)

    def nodes(self) -> List[Node]:
        out: List[Node] = []

        def walk(node: Node) -> None:
            out.append(node)
            for child in node.children():
                walk(child)

        walk(self.root)
        return out

    def leaves(self) -> List[Node]:
        return [n for n in self.nodes() if n.is_leaf]

    def node_depths(self) -> Dict[int, int]:
        depths: Dict[int, int] = {}

        def walk(node: Node, d: int) -> None:
            depths[node.node_id] = d
            for child in node.children():
                walk(child, d + 1)

        walk(self.root, 0)
        return depths

    def max_depth(self) -> int:
        return max(self.node_depths().values())

    def _node_modules(self, node: Node) -> List[Tuple[str, nn.Module]]:
        prefix = f"node{node.node_id}"
        mods = []
        if node.transform is not None:
            mods.append((f"{prefix}.transform", node.transform))
        if node.router_q is not None:
            mods.append((f"{prefix}.router_q", node.router_q))
            mods.append((f"{prefix}.router_p", node.router_p))
        if node.decoder is not None:
            mods.append((f"{prefix}.decoder", node.decoder))
        return mods

    def named_modules(self) -> List[Tuple[str, nn.Module]]:
        mods: List[Tuple[str, nn.Module]] = []
        for i, (blk, head) in enumerate(zip(self.blocks, self.heads)):
            mods.append((f"block{i}", blk))
            mods.append((f"head{i}", head))
        for node in self.nodes():
            mods.extend(self._node_modules(node))
        if self.batch_net is not None:
            mods.append(("batch_offsets", self.batch_net))
        return mods

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for _, mod in self.named_modules():
            params.extend(mod.parameters())
        params.append(self.dispersion_raw)
        return params

    def train(self, mode: bool = True) -> "TreeModel":
        self.training = mode
        for _, mod in self.named_modules():
            mod.train(mode)
        return self

    @staticmethod
    def _collect_arrays(prefix: str, mod: nn.Module, out: Dict[str, np.ndarray]) -> None:
        for attr, val in vars(mod).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[f"{prefix}.{attr}"] = val.data
            elif isinstance(val, nn.Module):
                TreeModel._collect_arrays(f"{prefix}.{attr}", val, out)
        if isinstance(mod, nn.BatchNorm1d):
            out[f"{prefix}.running_mean"] = mod.running_mean
            out[f"{prefix}.running_var"] = mod.running_var

    def named_arrays(self) -> Dict[str, np.ndarray]:
        """Every parameter and batchnorm statistic, keyed for checkpoints."""
        out: Dict[str, np.ndarray] = {}
        for name, mod in self.named_modules():
            self._collect_arrays(name, mod, out)
        out["dispersion_raw"] = self.dispersion_raw.data
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        own = self.named_arrays()
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint is missing arrays: {sorted(missing)[:3]} ...")
        for key, target in own.items():
            src = np.asarray(arrays[key], dtype=np.float64)
            if src.shape != target.shape:
                raise ValueError(f"array '{key}' has shape {src.shape}, expected {target.shape}")
            target[...] = src

    def topology(self) -> dict:
        def describe(node: Node) -> dict:
            kind = "leaf" if node.is_leaf else ("internal" if node.is_internal else "chain")
            return {
                "id": node.node_id,
                "kind": kind,
                "children": [describe(c) for c in node.children()],
                "sides": [s for s, c in (("left", node.left), ("right", node.right)) if c],
            }

        return {
            "tree": describe(self.root),
            "n_blocks": len(self.blocks),
            "next_id": self._next_id,
        }

    @classmethod
    def from_topology(
        cls, config: ModelConfig, topology: dict, rng: Optional[np.random.Generator] = None
    ) -> "TreeModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        model = cls(config, rng, shape=None)  # single leaf, then rebuild
        cfg = config

        def build(desc: dict, is_root: bool) -> Node:
            node = Node(
                desc["id"],
                None if is_root else TransformNet(cfg.latent_dim, cfg.hidden_dim, rng, cfg.logvar_clip),
            )
            if desc["kind"] == "leaf":
                node.decoder = nn.Linear(cfg.latent_dim, cfg.n_genes, rng)
            elif desc["kind"] == "internal":
                node.router_q = RouterNet(cfg.bottom_up_dim, cfg.hidden_dim, rng)
                node.router_p = RouterNet(cfg.latent_dim, cfg.hidden_dim, rng)
            for side, child_desc in zip(desc["sides"], desc["children"]):
                setattr(node, side, build(child_desc, False))
            return node

        model.root = build(topology["tree"], True)
        model._next_id = topology["next_id"]
        model.blocks = []
        model.heads = []
        for i in range(topology["n_blocks"]):
            in_dim = cfg.n_genes if i == 0 else cfg.bottom_up_dim
            model.blocks.append(EncoderBlock(in_dim, cfg.bottom_up_dim, rng))
            model.heads.append(
                GaussianHead(cfg.bottom_up_dim, cfg.latent_dim, rng, cfg.logvar_clip)
            )
        return model

    # ------------------------------------------------------------- forward
    def bottom_up(self, x: np.ndarray) -> List[Tensor]:
        """Deterministic chain features, input side first."""
        h = Tensor(np.asarray(x, dtype=np.float64))
        feats: List[Tensor] = []
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            if not np.all(np.isfinite(h.data)):
                raise NumericalFailureError(f"non-finite features after encoder block {i}")
            feats.append(h)
        return feats

    def infer_paths(
        self,
        x: np.ndarray,
        mode: str = "sample",
        rng: Optional[np.random.Generator] = None,
    ) -> PosteriorPath:
        """Run ladder inference over the whole tree.

        ``mode="sample"`` draws one reparameterized sample per node from
        ``rng``; ``mode="mean"`` propagates posterior means (deterministic).
        """
        if mode not in ("sample", "mean"):
            raise ValueError(f"unknown inference mode '{mode}'")
        if mode == "sample" and rng is None:
            raise ValueError("sample mode needs an rng")
        feats = self.bottom_up(x)
        n = feats[0].shape[0]
        n_levels = len(feats)
        head_cache: Dict[int, Tuple[Tensor, Tensor]] = {}
        states: List[NodeState] = []
        leaf_states: List[NodeState] = []

        def head_at(idx: int) -> Tuple[Tensor, Tensor]:
            if idx not in head_cache:
                head_cache[idx] = self.heads[idx](feats[idx])
            return head_cache[idx]

        def descend(node: Node, depth: int, reach: Tensor, z_parent: Optional[Tensor]) -> None:
            idx = n_levels - 1 - depth
            if idx < 0:
                raise NumericalFailureError(
                    f"tree depth {depth} exceeds encoder chain of {n_levels} blocks"
                )
            mu_hat, lv_hat = head_at(idx)
            if node.transform is None:
                mu_q, lv_q = mu_hat, lv_hat
                mu_p = lv_p = None
            else:
                mu_p, lv_p = node.transform(z_parent)
                mu_q, lv_q = precision_merge(mu_hat, lv_hat, mu_p, lv_p)
            z = T.gaussian_reparam_sample(mu_q, lv_q, rng) if mode == "sample" else mu_q
            state = NodeState(
                node=node, depth=depth, reach=reach, mu_q=mu_q, logvar_q=lv_q, z=z,
                mu_p=mu_p, logvar_p=lv_p,
            )
            states.append(state)
            if node.is_leaf:
                leaf_states.append(state)
                return
            if node.is_internal:
                state.q_logit = node.router_q(feats[idx])
                state.p_logit = node.router_p(z)
                q_left = T.sigmoid(state.q_logit)
                descend(node.left, depth + 1, T.mul(reach, q_left), z)
                descend(node.right, depth + 1, T.mul(reach, T.sub(Tensor(1.0), q_left)), z)
            else:  # chain node: probability mass passes through untouched
                child = node.left if node.left is not None else node.right
                descend(child, depth + 1, reach, z)

        descend(self.root, 0, Tensor(np.ones((n, 1))), None)
        return PosteriorPath(states=states, leaves=leaf_states)

    def dispersion(self) -> Tensor:
        return T.softplus(self.dispersion_raw)

    def decode_leaf(
        self, leaf: Node, z: Tensor, batch_onehot: np.ndarray, library: np.ndarray
    ) -> Tensor:
        """NB mean for one leaf: library-scaled relative expression.

        The softplus pre-activations (decoder output plus batch offset) are
        normalized to sum to one per cell, so the mean over genes sums to the
        observed library size and stays strictly positive.
        """
        pre = leaf.decoder(z)
        if self.batch_net is not None:
            pre = T.add(pre, self.batch_net(Tensor(batch_onehot)))
        s = T.softplus(pre)
        total = T.tsum(s, axis=1, keepdims=True)
        return T.mul(T.div(s, total), Tensor(np.asarray(library, dtype=np.float64)))

    def elbo(
        self,
        counts: np.ndarray,
        batch_onehot: np.ndarray,
        library: np.ndarray,
        paths: PosteriorPath,
        kl_weight: float,
    ) -> Tuple[Tensor, Dict[str, float]]:
        """Negative evidence lower bound averaged over the batch.

        Returns the scalar loss tensor and its exact additive parts:
        ``nll`` (reach-weighted reconstruction), ``kl_root``, ``kl_nodes``
        and ``kl_routers`` (the KL parts already scaled by ``kl_weight``).
        """
        if not (0.0 < kl_weight <= 1.0):
            raise ValueError(f"kl_weight must be in (0, 1], got {kl_weight}")
        theta = self.dispersion()
        if np.any(theta.data <= 0.0):
            raise DomainError("dispersion must stay strictly positive")
        counts = np.asarray(counts, dtype=np.float64)
        # the lgamma terms do not involve the leaf means; compute them once
        shared_ll, log_theta = _nb_count_terms(counts, theta)
        rec: Optional[Tensor] = None
        for leaf_state in paths.leaves:
            mu = self.decode_leaf(leaf_state.node, leaf_state.z, batch_onehot, library)
            ll = T.add(shared_ll, _nb_mean_terms(counts, mu, theta, log_theta))
            weighted = T.mul(leaf_state.reach, ll)
            rec = weighted if rec is None else T.add(rec, weighted)

        kl_nodes: Optional[Tensor] = None
        kl_routers: Optional[Tensor] = None
        kl_root: Optional[Tensor] = None
        for state in paths.states:
            if state.mu_p is None:
                kl_root = gaussian_kl(state.mu_q, state.logvar_q)
            else:
                term = T.mul(
                    state.reach,
                    gaussian_kl(state.mu_q, state.logvar_q, state.mu_p, state.logvar_p),
                )
                kl_nodes = term if kl_nodes is None else T.add(kl_nodes, term)
            if state.q_logit is not None:
                term = T.mul(state.reach, bernoulli_kl_from_logits(state.q_logit, state.p_logit))
                kl_routers = term if kl_routers is None else T.add(kl_routers, term)

        n = counts.shape[0]
        zero = Tensor(np.zeros((n, 1)))
        w = Tensor(kl_weight)
        nll = T.tmean(T.neg(rec))
        p_root = T.mul(w, T.tmean(kl_root))
        p_nodes = T.mul(w, T.tmean(kl_nodes if kl_nodes is not None else zero))
        p_routers = T.mul(w, T.tmean(kl_routers if kl_routers is not None else zero))
        loss = T.add(T.add(T.add(nll, p_root), p_nodes), p_routers)
        parts = {
            "nll": float(nll.data),
            "kl_root": float(p_root.data),
            "kl_nodes": float(p_nodes.data),
            "kl_routers": float(p_routers.data),
        }
        return loss, parts

    # ------------------------------------------------------------- growing
    def make_subtree(self, leaf: Node, rng: np.random.Generator) -> "Subtree":
        """Fresh split parts for one leaf; child decoders warm-start from the
        leaf's decoder plus small noise. Extends the encoder chain when the
        children would sit below the current deepest level."""
        if not leaf.is_leaf:
            raise ValueError(f"node {leaf.node_id} is not a leaf")
        cfg = self.config
        router_q = RouterNet(cfg.bottom_up_dim, cfg.hidden_dim, rng)
        router_p = RouterNet(cfg.latent_dim, cfg.hidden_dim, rng)
        transforms = [
            TransformNet(cfg.latent_dim, cfg.hidden_dim, rng, cfg.logvar_clip) for _ in range(2)
        ]
        decoders = []
        for _ in range(2):
            dec = nn.Linear(cfg.latent_dim, cfg.n_genes, rng)
            dec.weight.data = leaf.decoder.weight.data + rng.normal(0.0, 0.01, dec.weight.shape)
            dec.bias.data = leaf.decoder.bias.data + rng.normal(0.0, 0.01, dec.bias.shape)
            decoders.append(dec)
        needs_level = self.node_depths()[leaf.node_id] + 1 > len(self.blocks) - 1
        new_block = EncoderBlock(cfg.bottom_up_dim, cfg.bottom_up_dim, rng) if needs_level else None
        new_head = (
            GaussianHead(cfg.bottom_up_dim, cfg.latent_dim, rng, cfg.logvar_clip)
            if needs_level
            else None
        )
        left = self._build_node(transforms[0])
        left.decoder = decoders[0]
        right = self._build_node(transforms[1])
        right.decoder = decoders[1]
        return Subtree(
            leaf_id=leaf.node_id,
            router_q=router_q,
            router_p=router_p,
            left=left,
            right=right,
            new_block=new_block,
            new_head=new_head,
        )

    def attach_subtree(self, leaf: Node, subtree: "Subtree") -> None:
        if not leaf.is_leaf:
            raise ValueError("can only attach to a leaf")
        subtree.stashed_decoder = leaf.decoder
        leaf.decoder = None
        leaf.router_q = subtree.router_q
        leaf.router_p = subtree.router_p
        leaf.left = subtree.left
        leaf.right = subtree.right
        if subtree.new_block is not None:
            self.blocks.append(subtree.new_block)
            self.heads.append(subtree.new_head)

    def detach_subtree(self, leaf: Node, subtree: "Subtree") -> None:
        leaf.decoder = subtree.stashed_decoder
        leaf.router_q = None
        leaf.router_p = None
        leaf.left = None
        leaf.right = None
        if subtree.new_block is not None:
            self.blocks.pop()
            self.heads.pop()

    def prune_to(self, keep_leaf_ids: set) -> None:
        """Remove leaves not in ``keep_leaf_ids``; surviving siblings keep
        their transformations and are chained through the old parent."""

        def prune(node: Node) -> Optional[Node]:
            if node.is_leaf:
                return node if node.node_id in keep_leaf_ids else None
            kept_left = prune(node.left) if node.left is not None else None
            kept_right = prune(node.right) if node.right is not None else None
            node.left = kept_left
            node.right = kept_right
            if kept_left is None and kept_right is None:
                return None
            if kept_left is None or kept_right is None:
                node.router_q = None
                node.router_p = None
            return node

        if prune(self.root) is None:
            raise ValueError("refusing to prune away every leaf")


@dataclass
class Subtree:
    """Freshly created parts for splitting one leaf, attachable and removable."""

    leaf_id: int
    router_q: RouterNet
    router_p: RouterNet
    left: Node
    right: Node
    new_block: Optional[EncoderBlock] = None
    new_head: Optional[GaussianHead] = None
    stashed_decoder: Optional[nn.Linear] = None

    def parameters(self) -> List[Tensor]:
        params = self.router_q.parameters() + self.router_p.parameters()
        for child in (self.left, self.right):
            params.extend(child.transform.parameters())
            params.extend(child.decoder.parameters())
        if self.new_block is not None:
            params.extend(self.new_block.parameters())
            params.extend(self.new_head.parameters())
        return params

    def modules(self) -> List[nn.Module]:
        mods = [self.router_q, self.router_p, self.left.transform, self.right.transform,
                self.left.decoder, self.right.decoder]
        if self.new_block is not None:
            mods.extend([self.new_block, self.new_head])
        return mods


def assign_clusters(paths: PosteriorPath) -> np.ndarray:
    """Argmax leaf index per cell; ties resolve to the leftmost leaf."""
    return paths.leaf_reach_matrix().argmax(axis=1)


def model_dendrogram(model: TreeModel, assignments: np.ndarray) -> Dendrogram:
    """The model tree as a sample dendrogram; chain nodes are collapsed."""
    leaves = model.leaves()
    sets = {
        leaf.node_id: np.flatnonzero(assignments == k) for k, leaf in enumerate(leaves)
    }

    def convert(node: Node) -> DendrogramNode:
        if node.is_leaf:
            return DendrogramNode(samples=sets[node.node_id])
        kids = node.children()
        if len(kids) == 1:
            return convert(kids[0])
        return DendrogramNode(left=convert(kids[0]), right=convert(kids[1]))

    return Dendrogram(root=convert(model.root), n_samples=len(assignments)).validate()
