"""Count-matrix ingestion and preprocessing.

Covers MatrixMarket and TSV-metadata loading, library-size normalization,
highly-variable-gene selection, and PCA. Matrices are dense int64 at desk
scale; all functions are pure given their inputs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ParseError",
    "SchemaError",
    "AlignmentError",
    "CountMatrix",
    "read_matrix_market",
    "write_matrix_market",
    "read_metadata_tsv",
    "attach_metadata",
    "normalize_and_log",
    "select_hvg",
    "pca",
    "Preprocessed",
    "preprocess",
]


class ParseError(ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message: str, path: str = "", line: Optional[int] = None):
        loc = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class SchemaError(ValueError):
    """A required column is missing from a metadata file."""


class AlignmentError(ValueError):
    """Metadata rows do not line up with the count matrix."""


@dataclass
class CountMatrix:
    """Cells-by-genes read counts plus per-cell annotations.

    ``batch`` is required downstream (every cell belongs to a batch);
    ``cell_type`` is optional and only used for evaluation.
    """

    counts: np.ndarray  # (n_cells, n_genes) non-negative int64
    cell_ids: List[str]
    gene_ids: List[str]
    batch: Optional[np.ndarray] = None  # (n_cells,) of strings
    cell_type: Optional[np.ndarray] = None

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    def validate(self) -> "CountMatrix":
        if self.counts.ndim != 2:
            raise ValueError("counts must be 2-d")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if len(self.cell_ids) != self.n_cells or len(self.gene_ids) != self.n_genes:
            raise AlignmentError("id lists do not match the count matrix shape")
        for name, col in (("batch", self.batch), ("cell_type", self.cell_type)):
            if col is not None and len(col) != self.n_cells:
                raise AlignmentError(f"{name} has {len(col)} entries for {self.n_cells} cells")
        return self


def read_matrix_market(path: str, transpose: bool = False) -> np.ndarray:
    """Read a MatrixMarket coordinate file into a dense int64 array.

    Accepts ``integer`` files, or ``real`` files whose values are integral.
    Indices are 1-based in the format and converted here.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("%%MatrixMarket"):
            raise ParseError("missing %%MatrixMarket header", path, 1)
        fields = header.strip().split()
        if len(fields) < 5 or fields[1] != "matrix" or fields[2] != "coordinate":
            raise ParseError("only 'matrix coordinate' files are supported", path, 1)
        value_type, symmetry = fields[3], fields[4]
        if value_type not in ("integer", "real"):
            raise ParseError(f"unsupported value type '{value_type}'", path, 1)
        if symmetry != "general":
            raise ParseError(f"unsupported symmetry '{symmetry}'", path, 1)

        line_no = 1
        dims = None
        for line in fh:
            line_no += 1
            stripped = line.strip()
            if not stripped or stripped.startswith("%"):
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise ParseError("size line must be 'rows cols nnz'", path, line_no)
            try:
                dims = tuple(int(p) for p in parts)
            except ValueError:
                raise ParseError("non-integer size line", path, line_no) from None
            break
        if dims is None:
            raise ParseError("missing size line", path)
        n_rows, n_cols, nnz = dims

        out = np.zeros((n_rows, n_cols), dtype=np.int64)
        seen = 0
        for line in fh:
            line_no += 1
            stripped = line.strip()
            if not stripped or stripped.startswith("%"):
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise ParseError("entry must be 'row col value'", path, line_no)
            try:
                i, j = int(parts[0]), int(parts[1])
                v = float(parts[2])
            except ValueError:
                raise ParseError("malformed entry", path, line_no) from None
            if not (1 <= i <= n_rows and 1 <= j <= n_cols):
                raise ParseError(f"index ({i}, {j}) out of bounds", path, line_no)
            if v != int(v):
                raise ParseError(f"non-integral value {parts[2]}", path, line_no)
            out[i - 1, j - 1] += int(v)
            seen += 1
        if seen != nnz:
            raise ParseError(f"expected {nnz} entries, found {seen}", path, line_no)
    return out.T if transpose else out


def write_matrix_market(path: str, matrix: np.ndarray) -> None:
    """Write a dense non-negative integer matrix as coordinate MatrixMarket."""
    matrix = np.asarray(matrix)
    rows, cols = np.nonzero(matrix)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("%%MatrixMarket matrix coordinate integer general\n")
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]} {len(rows)}\n")
        for i, j in zip(rows, cols):
            fh.write(f"{i + 1} {j + 1} {int(matrix[i, j])}\n")


def read_metadata_tsv(
    path: str, batch_col: str, celltype_col: Optional[str] = None
) -> Tuple[List[str], List[str], Optional[List[str]]]:
    """Read per-cell metadata; returns (cell ids, batch labels, cell types).

    The first column is treated as the cell id. Quoted fields and CRLF
    line endings are handled by the csv module.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty metadata file", path, 1) from None
        if batch_col not in header:
            raise SchemaError(f"metadata column '{batch_col}' not found in {path}")
        if celltype_col is not None and celltype_col not in header:
            raise SchemaError(f"metadata column '{celltype_col}' not found in {path}")
        b_idx = header.index(batch_col)
        c_idx = header.index(celltype_col) if celltype_col is not None else None
        cell_ids, batches, celltypes = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"row has {len(row)} fields, header has {len(header)}", path, line_no
                )
            cell_ids.append(row[0])
            batches.append(row[b_idx])
            if c_idx is not None:
                celltypes.append(row[c_idx])
    return cell_ids, batches, celltypes if celltype_col is not None else None


def attach_metadata(
    counts: np.ndarray,
    gene_ids: Optional[Sequence[str]],
    cell_ids: Sequence[str],
    batch: Sequence[str],
    cell_type: Optional[Sequence[str]] = None,
) -> CountMatrix:
    """Bundle counts and labels into a validated CountMatrix."""
    n_cells = counts.shape[0]
    if len(cell_ids) != n_cells or len(batch) != n_cells:
        raise AlignmentError(
            f"metadata rows ({len(batch)}) do not match matrix rows ({n_cells})"
        )
    genes = list(gene_ids) if gene_ids is not None else [f"g{j}" for j in range(counts.shape[1])]
    return CountMatrix(
        counts=np.asarray(counts, dtype=np.int64),
        cell_ids=list(cell_ids),
        gene_ids=genes,
        batch=np.asarray(batch, dtype=object),
        cell_type=np.asarray(cell_type, dtype=object) if cell_type is not None else None,
    ).validate()


def normalize_and_log(
    counts: np.ndarray, target: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Scale each cell to the median library size (or ``target``), then log1p.

    Returns ``(matrix, kept)`` where ``kept`` flags cells with nonzero
    totals; zero-total cells are excluded with a warning and do not appear
    in the returned matrix.
    """
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1)
    kept = totals > 0
    if not kept.all():
        warnings.warn(f"excluding {int((~kept).sum())} cells with zero total counts")
    counts = counts[kept]
    totals = totals[kept]
    if target is None:
        if totals.size == 0:
            raise ValueError("no cells with positive totals")
        target = float(np.median(totals))
    scaled = counts * (target / totals)[:, None]
    return np.log1p(scaled), kept


def select_hvg(counts: np.ndarray, n_top: int = 4000, n_bins: int = 20) -> np.ndarray:
    """Pick the ``n_top`` most variable genes, normalized within mean bins.

    Per-gene mean and dispersion (variance over mean) are computed on
    median-normalized counts; genes are placed into equal-frequency mean
    bins and the dispersion is z-scored within each bin. Ties break toward
    the smaller gene index, and zero-mean genes get dispersion 0. Returns
    ascending gene indices.
    """
    counts = np.asarray(counts, dtype=np.float64)
    n_genes = counts.shape[1]
    if n_top > n_genes:
        raise ValueError(f"n_top={n_top} exceeds n_genes={n_genes}")
    totals = counts.sum(axis=1)
    pos = totals > 0
    counts = counts[pos]
    totals = totals[pos]
    scaled = counts * (np.median(totals) / totals)[:, None]
    mean = scaled.mean(axis=0)
    var = scaled.var(axis=0, ddof=1) if scaled.shape[0] > 1 else np.zeros(n_genes)
    disp = np.zeros(n_genes)
    nz = mean > 0
    disp[nz] = var[nz] / mean[nz]

    order = np.argsort(mean, kind="stable")
    bins = np.array_split(order, min(n_bins, n_genes))
    z = np.zeros(n_genes)
    for members in bins:
        if len(members) == 0:
            continue
        d = disp[members]
        sd = d.std(ddof=1) if len(members) > 1 else 0.0
        if sd > 0:
            z[members] = (d - d.mean()) / sd
    ranked = np.lexsort((np.arange(n_genes), -z))
    return np.sort(ranked[:n_top])


def pca(x: np.ndarray, k: int = 50) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k principal components of row observations.

    Columns are mean-centered; the sign of each component is fixed so its
    largest-magnitude loading is positive. Returns (scores, components,
    explained variances), variances using the 1/(n-1) convention.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not (1 <= k <= min(n - 1, d)):
        raise ValueError(f"k={k} out of range for {n}x{d} data")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k].copy()
    for row in components:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0
    scores = centered @ components.T
    explained = (s[:k] ** 2) / (n - 1)
    return scores, components, explained


@dataclass
class Preprocessed:
    """Model-ready arrays plus everything needed to redo the transform."""

    x: np.ndarray  # (n, g) log-normalized encoder input
    counts: np.ndarray  # (n, g) raw counts on the selected genes
    library: np.ndarray  # (n, 1) per-cell totals over selected genes
    batch_onehot: np.ndarray  # (n, B)
    batch_categories: List[str]
    hvg_indices: np.ndarray
    gene_ids: List[str]
    target_library: float
    kept_cells: np.ndarray  # bool mask into the original CountMatrix rows
    cell_type: Optional[np.ndarray] = None
    batch: Optional[np.ndarray] = None

    @property
    def n_cells(self) -> int:
        return self.x.shape[0]

    @property
    def n_genes(self) -> int:
        return self.x.shape[1]

    @property
    def n_batches(self) -> int:
        return self.batch_onehot.shape[1]


def preprocess(
    cm: CountMatrix,
    n_top: Optional[int] = 4000,
    hvg_indices: Optional[np.ndarray] = None,
    target_library: Optional[float] = None,
    batch_categories: Optional[List[str]] = None,
) -> Preprocessed:
    """Full pipeline: drop empty cells, pick genes, normalize, one-hot batches.

    Passing ``hvg_indices`` / ``target_library`` / ``batch_categories`` reapplies
    a transform fitted elsewhere (evaluation of a stored model); otherwise they
    are fitted here. ``n_top`` is clamped to the gene count.
    """
    cm.validate()
    if cm.batch is None:
        raise SchemaError("preprocessing requires batch labels")
    nonzero = cm.counts.sum(axis=1) > 0
    counts = cm.counts[nonzero]
    if counts.shape[0] == 0:
        raise ValueError("all cells have zero counts")
    if not nonzero.all():
        warnings.warn(f"excluding {int((~nonzero).sum())} cells with zero total counts")

    if hvg_indices is None:
        n_top = counts.shape[1] if n_top is None else min(n_top, counts.shape[1])
        hvg_indices = select_hvg(counts, n_top=n_top)
    else:
        hvg_indices = np.asarray(hvg_indices, dtype=np.int64)
        if hvg_indices.size and hvg_indices.max() >= counts.shape[1]:
            raise AlignmentError("stored gene indices exceed this matrix's gene count")
    sub = counts[:, hvg_indices]

    # drop cells that lost all counts to the gene subset
    keep2 = sub.sum(axis=1) > 0
    if not keep2.all():
        warnings.warn(f"excluding {int((~keep2).sum())} cells empty on the selected genes")
        sub = sub[keep2]
    kept = nonzero.copy()
    kept[np.flatnonzero(nonzero)[~keep2]] = False

    library = sub.sum(axis=1, keepdims=True).astype(np.float64)
    if target_library is None:
        target_library = float(np.median(library))
    x = np.log1p(sub * (target_library / library))

    batch = np.asarray(cm.batch, dtype=object)[kept]
    if batch_categories is None:
        batch_categories = sorted(set(batch.tolist()))
    lookup = {c: i for i, c in enumerate(batch_categories)}
    unknown = [b for b in batch if b not in lookup]
    if unknown:
        raise AlignmentError(f"batch label '{unknown[0]}' not among stored categories")
    onehot = np.zeros((len(batch), len(batch_categories)))
    onehot[np.arange(len(batch)), [lookup[b] for b in batch]] = 1.0

    return Preprocessed(
        x=x,
        counts=sub.astype(np.int64),
        library=library,
        batch_onehot=onehot,
        batch_categories=list(batch_categories),
        hvg_indices=hvg_indices,
        gene_ids=[cm.gene_ids[j] for j in hvg_indices],
        target_library=target_library,
        kept_cells=kept,
        cell_type=cm.cell_type[kept] if cm.cell_type is not None else None,
        batch=batch,
    )
