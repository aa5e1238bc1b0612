"""Spot-level datasets: on-disk format, validation and preprocessing.

A dataset directory holds ``meta.txt`` (``key=value`` lines), the matrices
``image_features.mat``, ``gene_counts.mat``, ``coords.mat`` and optionally
``labels.mat`` and ``genes.txt`` (one gene name per line).  Matrix files are
either tab-separated text with a ``rows<TAB>cols`` header or the binary
``SPCD`` container (u32 rows, u32 cols, little-endian f32 payload).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, FormatError, ValidationError

log = logging.getLogger(__name__)

MATRIX_MAGIC = b"SPCD"
META_FILE = "meta.txt"
GENES_FILE = "genes.txt"
REQUIRED_META = (
    "n_spots",
    "d_img",
    "n_genes",
    "spot_diameter",
    "pixel_resolution",
    "dataset_id",
    "platform_tag",
    "has_labels",
)


@dataclass(frozen=True)
class SpotDataset:
    """One tissue section: paired image embeddings and expression per spot.

    ``gene_counts`` holds raw non-negative counts; ``normalized`` is True once
    the matrix has been passed through :func:`normalize_expression` (possibly
    followed by gene selection), in which case the non-negativity rule is
    relaxed to finiteness.
    """

    image_features: np.ndarray
    gene_counts: np.ndarray
    coords: np.ndarray
    labels: np.ndarray | None = None
    spot_diameter: float = 55.0
    pixel_resolution: float = 1.0
    dataset_id: str = "dataset"
    platform_tag: str = "unknown"
    gene_names: tuple[str, ...] | None = None
    normalized: bool = False

    def __post_init__(self):
        img = _as_matrix(self.image_features, "image_features")
        genes = _as_matrix(self.gene_counts, "gene_counts")
        coords = _as_matrix(self.coords, "coords")
        n = img.shape[0]
        if n < 1:
            raise DimensionError("dataset must contain at least one spot")
        for name, arr in (("gene_counts", genes), ("coords", coords)):
            if arr.shape[0] != n:
                raise DimensionError(
                    f"{name} has {arr.shape[0]} rows, image_features has {n}"
                )
        if coords.shape[1] != 2:
            raise DimensionError(f"coords must have 2 columns, got {coords.shape[1]}")
        for name, arr in (("image_features", img), ("gene_counts", genes), ("coords", coords)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains NaN or Inf")
        if not self.normalized and np.any(genes < 0):
            row = int(np.argwhere(genes < 0)[0, 0])
            raise ValidationError(f"gene_counts has a negative entry in row {row}")
        labels = None
        if self.labels is not None:
            labels = np.asarray(self.labels).reshape(-1)
            if labels.shape[0] != n:
                raise DimensionError(f"labels has {labels.shape[0]} entries, expected {n}")
            if not np.all(np.isin(labels, (0, 1))):
                raise ValidationError("labels must contain only 0 or 1")
            labels = labels.astype(np.int64)
        if self.spot_diameter <= 0 or self.pixel_resolution <= 0:
            raise ValidationError("spot_diameter and pixel_resolution must be positive")
        names = None
        if self.gene_names is not None:
            names = tuple(str(g) for g in self.gene_names)
            if len(names) != genes.shape[1]:
                raise DimensionError(
                    f"{len(names)} gene names for {genes.shape[1]} gene columns"
                )
        for attr, value in (
            ("image_features", img),
            ("gene_counts", genes),
            ("coords", coords),
            ("labels", labels),
            ("gene_names", names),
        ):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, attr, value)

    @property
    def n_spots(self) -> int:
        return self.image_features.shape[0]

    @property
    def d_img(self) -> int:
        return self.image_features.shape[1]

    @property
    def n_genes(self) -> int:
        return self.gene_counts.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def genes(self) -> tuple[str, ...]:
        """Gene names, falling back to positional names ``g0, g1, ...``."""
        if self.gene_names is not None:
            return self.gene_names
        return tuple(f"g{j}" for j in range(self.n_genes))

    def with_expression(self, expr, gene_names=None) -> "SpotDataset":
        """Copy with the gene matrix replaced by a normalized expression matrix."""
        return replace(self, gene_counts=expr, gene_names=gene_names, normalized=True)

    def subset(self, rows) -> "SpotDataset":
        rows = np.asarray(rows)
        return replace(
            self,
            image_features=self.image_features[rows],
            gene_counts=self.gene_counts[rows],
            coords=self.coords[rows],
            labels=None if self.labels is None else self.labels[rows],
        )


@dataclass(frozen=True)
class NeighborIndex:
    """Per-spot nearest neighbours, each row sorted by ascending distance."""

    neighbors: np.ndarray
    distances: np.ndarray = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def _as_matrix(arr, name) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {out.shape}")
    return out


# ---------------------------------------------------------------------------
# Matrix and key=value files
# ---------------------------------------------------------------------------


def write_matrix(path, matrix, binary: bool = True) -> None:
    """Write ``matrix`` in the binary ``SPCD`` container or as TSV text."""
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat.reshape(-1, 1)
    rows, cols = mat.shape
    path = Path(path)
    if binary:
        payload = np.ascontiguousarray(mat, dtype="<f4").tobytes()
        path.write_bytes(MATRIX_MAGIC + struct.pack("<II", rows, cols) + payload)
        return
    lines = [f"{rows}\t{cols}"]
    lines.extend("\t".join(repr(float(v)) for v in row) for row in mat)
    path.write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    """Read a matrix file, auto-detecting binary vs text by the magic bytes."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing matrix file: {path.name}")
    raw = path.read_bytes()
    if raw[:4] == MATRIX_MAGIC:
        if len(raw) < 12:
            raise FormatError(f"{path.name}: truncated header")
        rows, cols = struct.unpack("<II", raw[4:12])
        expected = 12 + 4 * rows * cols
        if len(raw) != expected:
            raise FormatError(f"{path.name}: expected {expected} bytes, found {len(raw)}")
        data = np.frombuffer(raw[12:], dtype="<f4").astype(np.float64)
        return data.reshape(rows, cols)
    try:
        lines = raw.decode("utf-8").splitlines()
        rows, cols = (int(t) for t in lines[0].split("\t"))
        body = [ln for ln in lines[1:] if ln.strip()]
        if len(body) != rows:
            raise FormatError(f"{path.name}: header says {rows} rows, found {len(body)}")
        mat = np.array([[float(t) for t in ln.split("\t")] for ln in body], dtype=np.float64)
    except (UnicodeDecodeError, ValueError, IndexError) as exc:
        raise FormatError(f"{path.name}: cannot parse text matrix ({exc})") from exc
    if rows == 0:
        return np.zeros((0, cols))
    if mat.shape != (rows, cols):
        raise FormatError(f"{path.name}: header says {rows}x{cols}, body is {mat.shape}")
    return mat


def write_kv(path, values: Mapping[str, object]) -> None:
    lines = [f"{k}={_kv_str(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _kv_str(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def read_kv(path) -> dict[str, str]:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing file: {path.name}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path.name}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------


def save_dataset(ds: SpotDataset, directory, binary: bool = True) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_kv(
        directory / META_FILE,
        {
            "n_spots": ds.n_spots,
            "d_img": ds.d_img,
            "n_genes": ds.n_genes,
            "spot_diameter": float(ds.spot_diameter),
            "pixel_resolution": float(ds.pixel_resolution),
            "dataset_id": ds.dataset_id,
            "platform_tag": ds.platform_tag,
            "has_labels": ds.has_labels,
            "normalized": ds.normalized,
        },
    )
    write_matrix(directory / "image_features.mat", ds.image_features, binary)
    write_matrix(directory / "gene_counts.mat", ds.gene_counts, binary)
    write_matrix(directory / "coords.mat", ds.coords, binary)
    if ds.has_labels:
        write_matrix(directory / "labels.mat", ds.labels, binary)
    if ds.gene_names is not None:
        (directory / GENES_FILE).write_text("\n".join(ds.gene_names) + "\n")
    return directory


def load_dataset(directory) -> SpotDataset:
    """Load and validate a dataset directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"not a dataset directory: {directory}")
    meta = read_kv(directory / META_FILE)
    missing = [k for k in REQUIRED_META if k not in meta]
    if missing:
        raise FormatError(f"{META_FILE} lacks required keys: {', '.join(missing)}")
    try:
        n = int(meta["n_spots"])
        d_img = int(meta["d_img"])
        n_genes = int(meta["n_genes"])
        has_labels = meta["has_labels"] not in ("0", "", "false", "False")
        diameter = float(meta["spot_diameter"])
        resolution = float(meta["pixel_resolution"])
    except ValueError as exc:
        raise FormatError(f"{META_FILE}: malformed value ({exc})") from exc

    img = read_matrix(directory / "image_features.mat")
    genes = read_matrix(directory / "gene_counts.mat")
    coords = read_matrix(directory / "coords.mat")
    labels = read_matrix(directory / "labels.mat") if has_labels else None
    for name, arr, cols in (
        ("image_features", img, d_img),
        ("gene_counts", genes, n_genes),
        ("coords", coords, 2),
    ):
        if arr.shape[0] != n:
            raise DimensionError(f"{name}.mat has {arr.shape[0]} rows, meta says {n}")
        if arr.shape[1] != cols:
            raise DimensionError(f"{name}.mat has {arr.shape[1]} columns, expected {cols}")
    if labels is not None:
        labels = labels.reshape(-1)
        if not np.all(np.isin(labels, (0.0, 1.0))):
            raise ValidationError("labels.mat must contain only 0 or 1")
    gene_names = None
    if (directory / GENES_FILE).is_file():
        gene_names = tuple(
            ln.strip() for ln in (directory / GENES_FILE).read_text().splitlines() if ln.strip()
        )
    return SpotDataset(
        image_features=img,
        gene_counts=genes,
        coords=coords,
        labels=labels,
        spot_diameter=diameter,
        pixel_resolution=resolution,
        dataset_id=meta["dataset_id"],
        platform_tag=meta["platform_tag"],
        gene_names=gene_names,
        normalized=meta.get("normalized", "0") == "1",
    )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def normalize_expression(counts, target_sum: float = 1e4) -> np.ndarray:
    """Scale each row to ``target_sum`` total counts, then apply ``log1p``."""
    if target_sum <= 0:
        raise ArgumentError("target_sum must be positive")
    x = np.asarray(counts, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("counts must be a 2-D matrix")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValidationError("counts must be finite and non-negative")
    totals = x.sum(axis=1)
    empty = np.flatnonzero(totals == 0)
    if empty.size:
        raise ValidationError(f"row {int(empty[0])} has no counts and cannot be normalized")
    return np.log1p(x * (target_sum / totals)[:, None])


def select_hvg(expr, n_top: int = 3000) -> np.ndarray:
    """Indices of the ``n_top`` most variable genes, most variable first.

    Variance is the per-gene sample variance (ddof=1); ties go to the lower
    gene index.
    """
    x = np.asarray(expr, dtype=np.float64)
    n, g = x.shape
    if n < 2:
        raise ArgumentError("need at least two spots to rank gene variance")
    if not 1 <= n_top <= g:
        raise ArgumentError(f"n_top={n_top} must lie in [1, {g}]")
    var = x.var(axis=0, ddof=1)
    order = np.lexsort((np.arange(g), -var))
    return order[:n_top]


def compute_patch_size(d: float, r: float) -> int:
    """Side length in pixels of the image patch covering one spot."""
    if d <= 0 or r <= 0:
        raise ArgumentError("spot diameter and pixel resolution must be positive")
    return max(1, int(round(d / r)))


def aggregate_cells_to_spots(cell_expr, cell_coords, spot_centers, spot_diameter: float) -> np.ndarray:
    """Sum single-cell expression over the closed disk of each spot.

    A cell lying inside several overlapping spots counts toward each of them.
    """
    cells = np.asarray(cell_expr, dtype=np.float64)
    cxy = np.asarray(cell_coords, dtype=np.float64)
    sxy = np.asarray(spot_centers, dtype=np.float64)
    if cells.ndim != 2 or cxy.shape != (cells.shape[0], 2) or sxy.ndim != 2 or sxy.shape[1] != 2:
        raise DimensionError("expected cell_expr m x g, cell_coords m x 2, spot_centers n x 2")
    if spot_diameter <= 0:
        raise ArgumentError("spot_diameter must be positive")
    for name, arr in (("cell_expr", cells), ("cell_coords", cxy), ("spot_centers", sxy)):
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} contains NaN or Inf")
    radius = spot_diameter / 2.0
    out = np.zeros((sxy.shape[0], cells.shape[1]))
    for start in range(0, sxy.shape[0], 512):
        block = sxy[start : start + 512]
        dist = np.sqrt(((block[:, None, :] - cxy[None, :, :]) ** 2).sum(-1))
        out[start : start + 512] = (dist <= radius).astype(np.float64) @ cells
    return out


def knn_neighbors(coords, k: int) -> NeighborIndex:
    """Exact k nearest other spots by Euclidean distance.

    Distance ties are broken by the lower spot index.
    """
    xy = np.asarray(coords, dtype=np.float64)
    n = xy.shape[0]
    if k < 0 or k >= n:
        raise ArgumentError(f"k={k} must satisfy 0 <= k < n_spots={n}")
    nbrs = np.empty((n, k), dtype=np.int64)
    dists = np.empty((n, k))
    for start in range(0, n, 256):
        block = xy[start : start + 256]
        d2 = ((block[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
        rows = np.arange(block.shape[0])
        d2[rows, start + rows] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        nbrs[start : start + 256] = order
        dists[start : start + 256] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborIndex(neighbors=nbrs, distances=dists)


# ---------------------------------------------------------------------------
# Gene vocabulary handling
# ---------------------------------------------------------------------------


def preprocess_sources(
    datasets: Sequence[SpotDataset], n_top: int = 3000, target_sum: float = 1e4
) -> tuple[list[SpotDataset], tuple[str, ...]]:
    """Normalize source datasets and select a shared HVG vocabulary.

    Genes are ranked on the union of source gene panels (genes absent from a
    panel count as zero there).  ``n_top`` is capped at the union size.
    """
    vocab: list[str] = []
    seen: set[str] = set()
    for ds in datasets:
        for g in ds.genes():
            if g not in seen:
                seen.add(g)
                vocab.append(g)
    normed = [normalize_expression(ds.gene_counts, target_sum) for ds in datasets]
    stacked = np.vstack([project_genes(x, ds.genes(), vocab)[0] for x, ds in zip(normed, datasets)])
    keep = select_hvg(stacked, min(n_top, len(vocab)))
    selected = tuple(vocab[j] for j in keep)
    out = [
        ds.with_expression(project_genes(x, ds.genes(), selected)[0], selected)
        for x, ds in zip(normed, datasets)
    ]
    return out, selected


def project_genes(expr, names: Sequence[str], vocab: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Reorder expression columns onto ``vocab``; absent genes are zero-filled.

    Returns the projected matrix and the list of vocabulary genes missing
    from ``names``.
    """
    expr = np.asarray(expr, dtype=np.float64)
    pos = {g: j for j, g in enumerate(names)}
    out = np.zeros((expr.shape[0], len(vocab)))
    missing = []
    for j, g in enumerate(vocab):
        src = pos.get(g)
        if src is None:
            missing.append(g)
        else:
            out[:, j] = expr[:, src]
    return out, missing


def preprocess_target(
    ds: SpotDataset,
    vocab: Sequence[str],
    target_sum: float = 1e4,
    allow_missing: bool = False,
) -> SpotDataset:
    """Normalize a target dataset and project it onto a trained gene vocabulary."""
    expr = ds.gene_counts if ds.normalized else normalize_expression(ds.gene_counts, target_sum)
    projected, missing = project_genes(expr, ds.genes(), vocab)
    if missing:
        if not allow_missing or len(missing) == len(vocab):
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise DimensionError(
                f"{ds.dataset_id}: {len(missing)} model genes missing from dataset: {shown}"
            )
        log.warning("%s: zero-filling %d missing genes", ds.dataset_id, len(missing))
    return ds.with_expression(projected, tuple(vocab))


def preprocess_per_dataset(ds: SpotDataset, n_top: int = 3000, target_sum: float = 1e4) -> SpotDataset:
    """Normalize and select HVGs using this dataset alone (positional features)."""
    expr = ds.gene_counts if ds.normalized else normalize_expression(ds.gene_counts, target_sum)
    keep = select_hvg(expr, min(n_top, expr.shape[1]))
    names = ds.genes()
    return ds.with_expression(expr[:, keep], tuple(names[j] for j in keep))
