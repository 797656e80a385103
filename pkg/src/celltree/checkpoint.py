"""Model checkpoints: one zip archive, byte-stable across identical runs.

The archive holds ``manifest.json`` (tree topology, array shapes, model and
preprocessing metadata) plus one raw little-endian float64 blob per array
under ``arrays/``. Entries are written uncompressed with a fixed timestamp
so identical state produces identical bytes.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .model import ModelConfig, TreeModel

__all__ = ["CheckpointMeta", "save_checkpoint", "load_checkpoint", "CHECKPOINT_NAME"]

CHECKPOINT_NAME = "checkpoint.zip"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class CheckpointMeta:
    """Everything beyond raw weights needed to reuse a fitted model."""

    hvg_indices: List[int]
    gene_ids: List[str]
    target_library: float
    batch_categories: List[str]
    batch_col: str
    celltype_col: Optional[str] = None
    leaf_counts: List[int] = field(default_factory=list)
    leaf_histograms: Dict[str, Dict[str, int]] = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "hvg_indices": list(map(int, self.hvg_indices)),
            "gene_ids": list(self.gene_ids),
            "target_library": float(self.target_library),
            "batch_categories": list(self.batch_categories),
            "batch_col": self.batch_col,
            "celltype_col": self.celltype_col,
            "leaf_counts": list(map(int, self.leaf_counts)),
            "leaf_histograms": self.leaf_histograms,
            "train_config": self.train_config,
        }

    @staticmethod
    def from_dict(d: dict) -> "CheckpointMeta":
        return CheckpointMeta(**d)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save_checkpoint(path: str, model: TreeModel, meta: CheckpointMeta) -> None:
    arrays = model.named_arrays()
    manifest = {
        "format": "celltree-checkpoint-v1",
        "model_config": model.config.to_dict(),
        "topology": model.topology(),
        "arrays": {key: list(arr.shape) for key, arr in arrays.items()},
        "meta": meta.to_dict(),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(
            zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=2).encode()
        )
        for key in sorted(arrays):
            _write_entry(zf, f"arrays/{key}.bin", arrays[key].astype("<f8").tobytes())


def load_checkpoint(path: str):
    """Rebuild the model and metadata from an archive; returns (model, meta)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != "celltree-checkpoint-v1":
            raise ValueError(f"{path}: not a recognized checkpoint archive")
        config = ModelConfig.from_dict(manifest["model_config"])
        model = TreeModel.from_topology(config, manifest["topology"])
        arrays: Dict[str, np.ndarray] = {}
        for key, shape in manifest["arrays"].items():
            raw = np.frombuffer(zf.read(f"arrays/{key}.bin"), dtype="<f8")
            arrays[key] = raw.reshape(shape)
        model.load_arrays(arrays)
        meta = CheckpointMeta.from_dict(manifest["meta"])
    model.eval()
    return model, meta
