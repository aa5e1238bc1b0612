"""Synthetic multi-section cohorts with structured tumour regions and batch effects."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, fields

import numpy as np

from .dataio import SpotDataset
from .errors import ArgumentError

GRID_SPACING = 100.0
COUNT_SCALE = 10.0


@dataclass(frozen=True)
class SynthConfig:
    n_datasets: int = 5
    spots_per_dataset: int = 400
    grid_side: int = 20
    latent_dim: int = 8
    d_img: int = 64
    n_genes: int = 200
    cancer_fraction: float = 0.4
    image_noise_sd: float = 0.5
    gene_noise_sd: float = 0.5
    batch_shift_sd: float = 0.3
    seed: int = 0
    cancer_shift: float = 2.0
    spot_diameter: float = 55.0
    pixel_resolution: float = 0.5

    def __post_init__(self):
        for name in ("n_datasets", "spots_per_dataset", "grid_side", "latent_dim", "d_img", "n_genes"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if self.grid_side**2 < self.spots_per_dataset:
            raise ArgumentError("grid_side**2 must be >= spots_per_dataset")
        if not 0.0 < self.cancer_fraction < 1.0:
            raise ArgumentError("cancer_fraction must lie in (0, 1)")
        if self.image_noise_sd < 0 or self.gene_noise_sd < 0 or self.batch_shift_sd < 0:
            raise ArgumentError("noise and batch scales must be non-negative")

    @classmethod
    def from_mapping(cls, values) -> "SynthConfig":
        """Build from string key/values (config files); unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ArgumentError(f"unknown synth config key: {key}")
            kind = type(getattr(cls(), key))
            kwargs[key] = kind(float(raw)) if kind is int else kind(raw)
        return cls(**kwargs)


def grid_coords(n_spots: int, grid_side: int) -> np.ndarray:
    idx = np.arange(n_spots)
    return np.stack([idx % grid_side, idx // grid_side], axis=1).astype(np.float64) * GRID_SPACING


def grow_region(n_spots: int, grid_side: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of a 4-connected region of ``size`` spots grown by BFS."""
    cells = {(i % grid_side, i // grid_side): i for i in range(n_spots)}
    start = int(rng.integers(n_spots))
    mask = np.zeros(n_spots, dtype=bool)
    mask[start] = True
    count = 1
    queue = deque([start])
    while queue and count < size:
        i = queue.popleft()
        x, y = i % grid_side, i // grid_side
        steps = [(1, 0), (-1, 0), (0, 1), (0, -1)]
        for s in rng.permutation(4):
            j = cells.get((x + steps[s][0], y + steps[s][1]))
            if j is not None and not mask[j]:
                mask[j] = True
                count += 1
                queue.append(j)
                if count == size:
                    break
    return mask


def _softplus(x):
    return np.logaddexp(0.0, x)


def generate_cohort(cfg: SynthConfig) -> list[SpotDataset]:
    """Generate ``cfg.n_datasets`` labelled sections sharing one latent-to-feature map.

    Every dataset receives its own affine batch transform (per-feature scale
    in [0.8, 1.2], shift ~ N(0, batch_shift_sd^2)) on both modalities.  A zero
    ``batch_shift_sd`` disables the transform entirely.
    """
    n = cfg.spots_per_dataset
    n_cancer = int(round(cfg.cancer_fraction * n))
    if not 1 <= n_cancer < n:
        raise ArgumentError(
            f"cancer_fraction={cfg.cancer_fraction} gives {n_cancer} of {n} spots"
        )
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_datasets + 1)
    shared = np.random.default_rng(streams[0])
    p = cfg.latent_dim
    img_map = shared.normal(0.0, 1.0 / np.sqrt(p), size=(p, cfg.d_img))
    gene_map = shared.normal(0.0, 1.0 / np.sqrt(p), size=(p, cfg.n_genes))
    gene_names = tuple(f"gene{j:04d}" for j in range(cfg.n_genes))
    coords = grid_coords(n, cfg.grid_side)

    cohort = []
    for d in range(cfg.n_datasets):
        rng = np.random.default_rng(streams[d + 1])
        labels = grow_region(n, cfg.grid_side, n_cancer, rng).astype(np.int64)
        z = rng.normal(size=(n, p))
        z[:, 0] += cfg.cancer_shift * labels
        image = z @ img_map + rng.normal(0.0, cfg.image_noise_sd, size=(n, cfg.d_img))
        intensity = _softplus(z @ gene_map + rng.normal(0.0, cfg.gene_noise_sd, size=(n, cfg.n_genes)))
        if cfg.batch_shift_sd > 0:
            image = image * rng.uniform(0.8, 1.2, cfg.d_img) + rng.normal(
                0.0, cfg.batch_shift_sd, cfg.d_img
            )
            intensity = intensity * rng.uniform(0.8, 1.2, cfg.n_genes) + rng.normal(
                0.0, cfg.batch_shift_sd, cfg.n_genes
            )
        counts = np.round(np.clip(intensity, 0.0, None) * COUNT_SCALE)
        empty = counts.sum(axis=1) == 0
        counts[empty, 0] = 1.0
        cohort.append(
            SpotDataset(
                image_features=image,
                gene_counts=counts,
                coords=coords,
                labels=labels,
                spot_diameter=cfg.spot_diameter,
                pixel_resolution=cfg.pixel_resolution,
                dataset_id=f"synth{d:02d}",
                platform_tag=f"synthetic-batch{d:02d}",
                gene_names=gene_names,
            )
        )
    return cohort
