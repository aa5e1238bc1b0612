"""Stage I: contrastive alignment of image embeddings and gene expression."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataio import SpotDataset
from .diffcore import Linear, ParamStore, adam_step, as_tensor, dropout, make_generator, seeded
from .errors import ArgumentError, DimensionError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    hidden: tuple[int, int] = (1024, 512)
    proj_dim: int = 512
    dropout: float = 0.2
    tau: float = 0.07
    alpha: float = 0.5
    epochs: int = 100
    lr: float = 1e-5
    batch_size: int = 128

    def __post_init__(self):
        if self.tau <= 0:
            raise ArgumentError("temperature tau must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ArgumentError("alpha must lie in [0, 1]")
        if self.batch_size < 2:
            raise ArgumentError("contrastive batches need at least two spots")


class Encoder(nn.Module):
    """Two hidden layers (linear, batch-norm, ReLU, dropout) and a projection."""

    def __init__(self, d_in: int, hidden=(1024, 512), d_out: int = 512, rate: float = 0.2):
        super().__init__()
        self.rate = rate
        dims = (d_in, *hidden)
        self.hidden = nn.ModuleList(Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.norms = nn.ModuleList(nn.BatchNorm1d(b) for b in hidden)
        self.proj = Linear(dims[-1], d_out)

    def forward(self, x, generator=None):
        for layer, norm in zip(self.hidden, self.norms):
            x = dropout(torch.relu(norm(layer(x))), self.rate, self.training, generator)
        return self.proj(x)


class AlignmentModel(nn.Module):
    def __init__(self, d_img: int, d_gene: int, cfg: AlignConfig = AlignConfig()):
        super().__init__()
        self.cfg = cfg
        self.d_img = d_img
        self.d_gene = d_gene
        self.img = Encoder(d_img, cfg.hidden, cfg.proj_dim, cfg.dropout)
        self.gene = Encoder(d_gene, cfg.hidden, cfg.proj_dim, cfg.dropout)
        self.loss_trace: list[float] = []


def _encode(encoder: Encoder, x, training: bool, generator) -> torch.Tensor:
    x = as_tensor(x, dtype=next(encoder.parameters()).dtype)
    was = encoder.training
    encoder.train(training)
    try:
        if training:
            h = encoder(x, generator)
        else:
            with torch.no_grad():
                h = encoder(x)
    finally:
        encoder.train(was)
    h = torch.nn.functional.normalize(h, dim=-1)
    if not torch.all(torch.isfinite(h)):
        raise NumericError("encoder produced non-finite embeddings")
    return h


def encode_image(model: AlignmentModel, x_img, training: bool = False, generator=None) -> torch.Tensor:
    """Unit-norm image embeddings.  Inference uses batch-norm running statistics."""
    if as_tensor(x_img).shape[-1] != model.d_img:
        raise DimensionError(f"expected {model.d_img} image features")
    return _encode(model.img, x_img, training, generator)


def encode_gene(model: AlignmentModel, x_gene, training: bool = False, generator=None) -> torch.Tensor:
    """Unit-norm gene-expression embeddings."""
    if as_tensor(x_gene).shape[-1] != model.d_gene:
        raise DimensionError(f"expected {model.d_gene} genes")
    return _encode(model.gene, x_gene, training, generator)


def similarity_matrix(h_img: torch.Tensor, h_gene: torch.Tensor, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ArgumentError("temperature tau must be positive")
    return h_img @ h_gene.T / tau


def infonce_terms(sim: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pair -log softmax terms, image->gene (rows) and gene->image (columns).

    ``log_softmax`` subtracts the running max, so large logits are safe.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DimensionError("similarity matrix must be square")
    diag = torch.arange(sim.shape[0])
    img_to_gene = -torch.log_softmax(sim, dim=1)[diag, diag]
    gene_to_img = -torch.log_softmax(sim, dim=0)[diag, diag]
    return img_to_gene, gene_to_img


def infonce_bidirectional(sim: torch.Tensor, alpha: float = 0.5) -> torch.Tensor:
    i2g, g2i = infonce_terms(sim)
    return alpha * i2g.mean() + (1.0 - alpha) * g2i.mean()


def contrastive_loss(model: AlignmentModel, x_img, x_gene, training=True, generator=None):
    h_img = encode_image(model, x_img, training, generator)
    h_gene = encode_gene(model, x_gene, training, generator)
    return infonce_bidirectional(similarity_matrix(h_img, h_gene, model.cfg.tau), model.cfg.alpha)


def _within_dataset_batches(sizes: Sequence[int], batch_size: int, rng: np.random.Generator):
    batches = []
    for d, n in enumerate(sizes):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if idx.size >= 2:
                batches.append((d, idx))
    return [batches[i] for i in rng.permutation(len(batches))]


def check_compatible(datasets: Sequence[SpotDataset]) -> tuple[int, int]:
    if not datasets:
        raise ArgumentError("at least one dataset is required")
    d_img, d_gene = datasets[0].d_img, datasets[0].n_genes
    for ds in datasets[1:]:
        if (ds.d_img, ds.n_genes) != (d_img, d_gene):
            raise DimensionError(
                f"{ds.dataset_id} has dims ({ds.d_img}, {ds.n_genes}); expected ({d_img}, {d_gene})"
            )
    return d_img, d_gene


def train_alignment(
    datasets: Sequence[SpotDataset], cfg: AlignConfig = AlignConfig(), seed: int = 0, dtype=None
) -> AlignmentModel:
    """Train both encoders with the bidirectional InfoNCE loss.

    Each mini-batch is drawn from a single dataset, so in-batch negatives share
    that dataset's batch effect.
    """
    d_img, d_gene = check_compatible(datasets)
    dtype = dtype or torch.get_default_dtype()
    with seeded(seed):
        model = AlignmentModel(d_img, d_gene, cfg).to(dtype)
    store = ParamStore.from_modules({"align": model})
    rng = np.random.default_rng(seed)
    gen = make_generator(seed + 1)
    imgs = [torch.tensor(ds.image_features, dtype=dtype) for ds in datasets]
    genes = [torch.tensor(ds.gene_counts, dtype=dtype) for ds in datasets]
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for d, idx in _within_dataset_batches([ds.n_spots for ds in datasets], cfg.batch_size, rng):
            idx = torch.as_tensor(idx)
            store.zero_grad()
            loss = contrastive_loss(model, imgs[d][idx], genes[d][idx], True, gen)
            loss.backward()
            adam_step(store, lr=cfg.lr)
            total += loss.item() * len(idx)
            count += len(idx)
        model.loss_trace.append(total / max(count, 1))
        log.debug("align epoch %d loss %.5f", epoch, model.loss_trace[-1])
    store.zero_grad()
    model.eval()
    return model


def alignment_gap(model: AlignmentModel, dataset: SpotDataset) -> float:
    """Mean matched-pair cosine minus mean mismatched-pair cosine."""
    h_img = encode_image(model, dataset.image_features)
    h_gene = encode_gene(model, dataset.gene_counts)
    cos = (h_img @ h_gene.T).double()
    n = cos.shape[0]
    matched = cos.diagonal().mean()
    mismatched = (cos.sum() - cos.diagonal().sum()) / (n * n - n)
    return float(matched - mismatched)
