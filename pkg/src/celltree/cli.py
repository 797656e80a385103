"""Command-line interface.

Subcommands: ``synth`` (generate labeled data), ``fit`` (train a tree),
``eval`` (metrics for a fitted tree), ``export-tree`` (DOT/JSON tree dump),
``baseline`` (PCA + Ward comparator). Exit codes: 2 for argument problems,
3 for unreadable/malformed input files, 4 for numerical failures.

Every run directory receives ``config.json``, the fully resolved settings
of that run; feeding it back through ``--config`` reproduces the run. Flags
given explicitly on the command line win over config-file values, which win
over defaults. ``--threads`` is applied to the BLAS thread pools before
numpy loads; the default of 1 keeps runs bit-reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

EXIT_ARGS = 2
EXIT_PARSE = 3
EXIT_NUMERIC = 4


def _apply_thread_env(argv: List[str]) -> None:
    threads = "1"
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = threads


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="rng seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("--config", default=None, help="JSON config; flags override its values")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="celltree", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--n-cells", type=int, default=None)
    p.add_argument("--n-genes", type=int, default=None)
    p.add_argument("--n-types", type=int, default=None)
    p.add_argument("--n-batches", type=int, default=None)
    p.add_argument("--proportions", default=None, help="comma-separated, must sum to 1")
    p.add_argument("--batch-strength", type=float, default=None)
    p.add_argument("--tree-sigma", type=float, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("fit", help="train a hierarchical count model")
    p.add_argument("--counts", default=None, help="MatrixMarket coordinate file")
    p.add_argument("--meta", default=None, help="TSV with per-cell metadata")
    p.add_argument("--batch-col", default=None)
    p.add_argument("--celltype-col", default=None)
    p.add_argument("--n-clusters", type=int, default=None)
    p.add_argument("--split-rule", choices=["reconstruction", "sample-count"], default=None)
    p.add_argument("--transpose", action="store_true", default=None,
                   help="counts file is genes x cells")
    p.add_argument("--hvg", type=int, default=None,
                   help="variable genes to keep (clamped to the gene count; default 4000)")
    p.add_argument("--no-batch-offsets", action="store_true", default=None,
                   help="ablation: decode without learned batch offsets")
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--bottom-up-dim", type=int, default=None)
    p.add_argument("--subtree-epochs", type=int, default=None)
    p.add_argument("--proposal-epochs", type=int, default=None)
    p.add_argument("--intermediate-epochs", type=int, default=None)
    p.add_argument("--final-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--min-split-cells", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a fitted model on labeled data")
    p.add_argument("--model", required=True, help="directory holding checkpoint.zip")
    p.add_argument("--counts", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--batch-col", default=None, help="defaults to the fit-time column")
    p.add_argument("--celltype-col", default=None)
    p.add_argument("--transpose", action="store_true", default=None)
    p.add_argument("--out", default=None, help="defaults to the model directory")
    _add_common(p)

    p = sub.add_parser("export-tree", help="dump the fitted tree as DOT or JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=["dot", "json"], required=True)
    p.add_argument("--with-labels", action="store_true")
    p.add_argument("--out", default=None, help="output file; defaults into the model dir")
    _add_common(p)

    p = sub.add_parser("baseline", help="PCA + Ward agglomerative comparator")
    p.add_argument("--counts", default=None)
    p.add_argument("--meta", default=None)
    p.add_argument("--batch-col", default=None)
    p.add_argument("--celltype-col", default=None)
    p.add_argument("--n-clusters", type=int, default=None)
    p.add_argument("--transpose", action="store_true", default=None)
    p.add_argument("--hvg", type=int, default=None)
    p.add_argument("--pca-k", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    return parser


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    resolved = dict(defaults)
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        for k, v in loaded.items():
            if k in resolved:
                resolved[k] = v
    for k in resolved:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
    return resolved


class ConfigError(ValueError):
    pass


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_count_matrix(cfg: dict):
    from .data import attach_metadata, read_matrix_market, read_metadata_tsv

    if not cfg.get("counts") or not cfg.get("meta"):
        raise ConfigError("--counts and --meta are required")
    if not cfg.get("batch_col"):
        raise ConfigError("--batch-col is required")
    counts = read_matrix_market(cfg["counts"], transpose=bool(cfg.get("transpose")))
    cell_ids, batch, celltype = read_metadata_tsv(
        cfg["meta"], cfg["batch_col"], cfg.get("celltype_col")
    )
    return attach_metadata(counts, None, cell_ids, batch, celltype)


def cmd_synth(args: argparse.Namespace) -> int:
    from .data import write_matrix_market
    from .synth import generate_synthetic, truth_to_json

    cfg = _resolve(
        args,
        {
            "n_cells": 1000,
            "n_genes": 200,
            "n_types": 4,
            "n_batches": 2,
            "proportions": None,
            "batch_strength": 0.5,
            "tree_sigma": 0.5,
            "seed": 0,
            "threads": 1,
        },
    )
    proportions = cfg["proportions"]
    if isinstance(proportions, str):
        proportions = [float(x) for x in proportions.split(",")]
        cfg["proportions"] = proportions
    cm, truth = generate_synthetic(
        cfg["n_cells"],
        cfg["n_genes"],
        cfg["n_types"],
        cfg["n_batches"],
        proportions=proportions,
        batch_strength=cfg["batch_strength"],
        seed=cfg["seed"],
        tree_sigma=cfg["tree_sigma"],
    )
    os.makedirs(args.out, exist_ok=True)
    write_matrix_market(os.path.join(args.out, "counts.mtx"), cm.counts)
    with open(os.path.join(args.out, "meta.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cell_id\tbatch\tcell_type\n")
        for cid, b, t in zip(cm.cell_ids, cm.batch, cm.cell_type):
            fh.write(f"{cid}\t{b}\t{t}\n")
    with open(os.path.join(args.out, "truth.json"), "w", encoding="utf-8") as fh:
        fh.write(truth_to_json(truth) + "\n")
    _write_json(os.path.join(args.out, "config.json"), {**cfg, "command": "synth"})
    print(f"wrote {args.out}/counts.mtx, meta.tsv, truth.json")
    return 0


_FIT_DEFAULTS = {
    "counts": None,
    "meta": None,
    "batch_col": None,
    "celltype_col": None,
    "n_clusters": 4,
    "split_rule": "reconstruction",
    "transpose": False,
    "hvg": 4000,
    "no_batch_offsets": False,
    "latent_dim": 10,
    "bottom_up_dim": 128,
    "subtree_epochs": 100,
    "proposal_epochs": 10,
    "intermediate_epochs": 50,
    "final_epochs": 50,
    "batch_size": 128,
    "min_split_cells": None,
    "seed": 0,
    "threads": 1,
}


def _train_config(cfg: dict):
    from .train import TrainConfig

    return TrainConfig(
        n_leaves_target=cfg["n_clusters"],
        split_rule=cfg["split_rule"].replace("-", "_"),
        seed=cfg["seed"],
        latent_dim=cfg["latent_dim"],
        bottom_up_dim=cfg["bottom_up_dim"],
        hidden_dim=cfg["bottom_up_dim"],
        subtree_epochs=cfg["subtree_epochs"],
        proposal_epochs=cfg["proposal_epochs"],
        intermediate_finetune_epochs=cfg["intermediate_epochs"],
        final_finetune_epochs=cfg["final_epochs"],
        batch_size=cfg["batch_size"],
        min_split_cells=cfg["min_split_cells"],
        use_batch_offsets=not cfg["no_batch_offsets"],
    ).validate()


def cmd_fit(args: argparse.Namespace) -> int:
    import numpy as np

    from .checkpoint import CHECKPOINT_NAME, CheckpointMeta, save_checkpoint
    from .data import preprocess
    from .train import TrainLog, build_model, compute_assignments, grow, prune_empty_leaves

    cfg = _resolve(args, _FIT_DEFAULTS)
    if cfg["n_clusters"] < 2:
        raise ConfigError("--n-clusters must be at least 2")
    tc = _train_config(cfg)
    cm = _load_count_matrix(cfg)
    data = preprocess(cm, n_top=min(cfg["hvg"], cm.n_genes))

    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), {**cfg, "command": "fit"})
    log = TrainLog(os.path.join(args.out, "train_log.jsonl"))
    model = build_model(data, tc)
    model = grow(model, data, tc, log)
    model = prune_empty_leaves(model, data)

    assignments = compute_assignments(model, data)
    counts = np.bincount(assignments, minlength=len(model.leaves()))
    histograms = {}
    if data.cell_type is not None:
        for k in range(len(model.leaves())):
            members = data.cell_type[assignments == k]
            vals, cnt = np.unique(members, return_counts=True)
            histograms[str(k)] = {str(v): int(c) for v, c in zip(vals, cnt)}
    meta = CheckpointMeta(
        hvg_indices=data.hvg_indices.tolist(),
        gene_ids=data.gene_ids,
        target_library=data.target_library,
        batch_categories=data.batch_categories,
        batch_col=cfg["batch_col"],
        celltype_col=cfg.get("celltype_col"),
        leaf_counts=counts.tolist(),
        leaf_histograms=histograms,
        train_config=tc.to_dict(),
    )
    save_checkpoint(os.path.join(args.out, CHECKPOINT_NAME), model, meta)
    print(f"fitted {len(model.leaves())} leaves; wrote {args.out}/{CHECKPOINT_NAME}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .checkpoint import CHECKPOINT_NAME, load_checkpoint
    from .data import preprocess
    from .metrics import evaluate_clustering
    from .model import model_dendrogram
    from .train import compute_assignments

    model, meta = load_checkpoint(os.path.join(args.model, CHECKPOINT_NAME))
    cfg = {
        "counts": args.counts,
        "meta": args.meta,
        "batch_col": args.batch_col or meta.batch_col,
        "celltype_col": args.celltype_col or meta.celltype_col,
        "transpose": bool(args.transpose),
    }
    cm = _load_count_matrix(cfg)
    data = preprocess(
        cm,
        hvg_indices=meta.hvg_indices,
        target_library=meta.target_library,
        batch_categories=meta.batch_categories,
    )
    assignments = compute_assignments(model, data)
    tree = model_dendrogram(model, assignments)
    if data.cell_type is None:
        print("warning: no cell-type column; reporting batch mixing only", file=sys.stderr)
    report = evaluate_clustering(assignments, data.batch, tree, data.cell_type)
    out_dir = args.out or args.model
    os.makedirs(out_dir, exist_ok=True)
    payload = report.to_json()
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(payload)
    sys.stdout.write(payload)
    return 0


def _tree_payload(model, meta, with_labels: bool) -> list:
    from .model import Node

    leaf_counts = {}
    leaves = model.leaves()
    for k, leaf in enumerate(leaves):
        leaf_counts[leaf.node_id] = meta.leaf_counts[k] if k < len(meta.leaf_counts) else 0

    nodes = []

    def walk(node, parent_id):
        if node.is_leaf and leaf_counts.get(node.node_id, 0) == 0:
            return 0  # empty leaves stay out of the export
        kids = node.children()
        child_ids = []
        total = leaf_counts.get(node.node_id, 0) if node.is_leaf else 0
        for child in kids:
            n_child = walk(child, node.node_id)
            if n_child > 0:
                child_ids.append(child.node_id)
                total += n_child
        entry = {
            "id": node.node_id,
            "parent": parent_id,
            "children": child_ids,
            "is_leaf": node.is_leaf,
            "n_assigned": total,
        }
        if with_labels and node.is_leaf:
            hist = None
            for k, leaf in enumerate(leaves):
                if leaf.node_id == node.node_id:
                    hist = meta.leaf_histograms.get(str(k))
            if hist:
                entry["histogram"] = hist
                entry["majority_class"] = max(hist, key=lambda c: (hist[c], c))
        nodes.append(entry)
        return total

    walk(model.root, None)
    return sorted(nodes, key=lambda e: e["id"])


def _tree_to_dot(nodes: list) -> str:
    by_id = {e["id"]: e for e in nodes}
    peak = max(e["n_assigned"] for e in nodes) or 1
    lines = ["digraph tree {", "  node [shape=circle, fixedsize=true];"]
    for e in nodes:
        width = 0.3 + 1.2 * (e["n_assigned"] / peak) ** 0.5  # area tracks count
        label = f"{e['id']}\\nn={e['n_assigned']}"
        if e.get("majority_class"):
            label += f"\\n{e['majority_class']}"
        lines.append(f'  n{e["id"]} [label="{label}", width={width:.3f}];')
    for e in nodes:
        for child in e["children"]:
            if child in by_id:
                lines.append(f"  n{e['id']} -> n{child};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_export_tree(args: argparse.Namespace) -> int:
    from .checkpoint import CHECKPOINT_NAME, load_checkpoint

    model, meta = load_checkpoint(os.path.join(args.model, CHECKPOINT_NAME))
    nodes = _tree_payload(model, meta, args.with_labels)
    if args.format == "json":
        text = json.dumps({"nodes": nodes}, sort_keys=True, indent=2) + "\n"
        default_name = "tree.json"
    else:
        text = _tree_to_dot(nodes)
        default_name = "tree.dot"
    out_path = args.out or os.path.join(args.model, default_name)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(f"wrote {out_path}")
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    from .baseline import baseline_pipeline, linkage_to_tsv

    cfg = _resolve(
        args,
        {
            "counts": None,
            "meta": None,
            "batch_col": None,
            "celltype_col": None,
            "n_clusters": 4,
            "transpose": False,
            "hvg": 4000,
            "pca_k": 50,
            "seed": 0,
            "threads": 1,
        },
    )
    if cfg["n_clusters"] < 2:
        raise ConfigError("--n-clusters must be at least 2")
    cm = _load_count_matrix(cfg)
    result = baseline_pipeline(
        cm, cfg["n_clusters"], n_top=min(cfg["hvg"], cm.n_genes), n_pcs=cfg["pca_k"]
    )
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), {**cfg, "command": "baseline"})
    payload = result.report.to_json()
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(payload)
    with open(os.path.join(args.out, "linkage.tsv"), "w", encoding="utf-8") as fh:
        fh.write(linkage_to_tsv(result.linkage))
    sys.stdout.write(payload)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "export-tree": cmd_export_tree,
    "baseline": cmd_baseline,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_env(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)

    from .data import AlignmentError, ParseError, SchemaError
    from .model import NumericalFailureError
    from .ndgrad.special import DomainError

    try:
        return _COMMANDS[args.command](args)
    except (ParseError, SchemaError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (NumericalFailureError, DomainError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
