"""Stage II: neighbour-aware bidirectional cross-attention fusion trained as a
variational autoencoder whose prior mean depends on the spot's class."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .align import AlignmentModel, encode_gene, encode_image
from .dataio import NeighborIndex, SpotDataset, knn_neighbors
from .diffcore import CrossAttention, LayerNorm, Linear, ParamStore, adam_step, center_cross_attention, seeded
from .errors import ArgumentError, DimensionError, ValidationError

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class VrbcaConfig:
    k: int = 6
    heads: int = 8
    d_model: int = 512
    enc_dims: tuple[int, int] = (256, 128)
    latent_dim: int = 64
    beta: float = 0.5
    epochs: int = 50
    lr: float = 1e-5
    batch_size: int = 128
    center_sd: float = 0.01
    ablate_bca: bool = False
    ablate_rvae: bool = False

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ArgumentError(f"d_model={self.d_model} is not divisible by {self.heads} heads")
        if self.k < 0:
            raise ArgumentError("k must be non-negative")
        if self.beta < 0:
            raise ArgumentError("beta must be non-negative")


class VrbcaModel(nn.Module):
    def __init__(self, cfg: VrbcaConfig = VrbcaConfig()):
        super().__init__()
        self.cfg = cfg
        d, (e1, e2), p = cfg.d_model, cfg.enc_dims, cfg.latent_dim
        self.ca_img = CrossAttention(d, cfg.heads)
        self.ca_gene = CrossAttention(d, cfg.heads)
        self.fuse = Linear(2 * d, d)
        self.fuse_norm = LayerNorm(d)
        self.enc = nn.ModuleList([Linear(d, e1), Linear(e1, e2)])
        self.enc_mu = Linear(e2, p)
        self.enc_logvar = Linear(e2, p)
        self.dec = nn.ModuleList([Linear(p, e2), Linear(e2, e1), Linear(e1, d)])
        centers = torch.stack(
            [torch.full((p,), -0.5), torch.full((p,), 0.5)]
        ) + cfg.center_sd * torch.randn(2, p)
        self.centers = nn.Parameter(centers)
        self.loss_trace: list[float] = []

    def decode(self, z):
        for i, layer in enumerate(self.dec):
            z = layer(z)
            if i < len(self.dec) - 1:
                z = torch.relu(z)
        return z


def sorted_neighbors(nbrs: NeighborIndex, i: int) -> np.ndarray:
    row = nbrs.neighbors[i]
    if nbrs.distances is None:
        return row
    order = np.lexsort((row, nbrs.distances[i]))
    return row[order]


def build_context(h_img, h_gene, nbrs: NeighborIndex, i: int):
    """Context matrices for spot ``i``: the spot itself, then its neighbours."""
    n = h_img.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"spot index {i} out of range for {n} spots")
    idx = torch.as_tensor(np.concatenate([[i], sorted_neighbors(nbrs, i)]).astype(np.int64))
    return h_img[idx], h_gene[idx]


def context_index(nbrs: NeighborIndex) -> torch.Tensor:
    n = nbrs.neighbors.shape[0]
    rows = [np.concatenate([[i], sorted_neighbors(nbrs, i)]) for i in range(n)]
    return torch.as_tensor(np.array(rows, dtype=np.int64).reshape(n, nbrs.k + 1))


def bca_fuse(model: VrbcaModel, H_img, H_gene):
    """Fused centre-spot representation from (..., k+1, d) context matrices.

    Only row 0 of each cross-attention output is consumed, and attention
    rows are independent, so only the centre query is evaluated.
    """
    d = model.cfg.d_model
    if H_img.shape != H_gene.shape or H_img.shape[-1] != d:
        raise DimensionError(f"context matrices must share shape (..., k+1, {d})")
    if model.cfg.ablate_bca:
        z_img, z_gene = H_img.mean(dim=-2), H_gene.mean(dim=-2)
    else:
        z_img = center_cross_attention(H_img[..., 0, :], H_gene, H_gene, model.ca_img.params())
        z_gene = center_cross_attention(H_gene[..., 0, :], H_img, H_img, model.ca_gene.params())
    return model.fuse_norm(model.fuse(torch.cat([z_img, z_gene], dim=-1)))


def rvae_encode(model: VrbcaModel, h_star):
    x = h_star
    for layer in model.enc:
        x = torch.relu(layer(x))
    mu = model.enc_mu(x)
    if model.cfg.ablate_rvae:
        return mu, torch.zeros_like(mu)
    return mu, torch.clamp(model.enc_logvar(x), LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(mu, logvar, eps):
    return mu + torch.exp(0.5 * logvar) * eps


def class_kl(mu, logvar, center):
    """KL(N(mu, diag(exp(logvar))) || N(center, I)), summed over the last axis."""
    return 0.5 * torch.sum(torch.exp(logvar) + (mu - center) ** 2 - logvar - 1.0, dim=-1)


def fused_terms(model: VrbcaModel, h_star, y, eps):
    """Per-spot reconstruction error and class KL, plus the latent statistics."""
    mu, logvar = rvae_encode(model, h_star)
    z = mu if model.cfg.ablate_rvae else reparameterize(mu, logvar, eps)
    recon = ((model.decode(z) - h_star) ** 2).sum(dim=-1)
    if model.cfg.ablate_rvae:
        kl = torch.zeros_like(recon)
    else:
        kl = class_kl(mu, logvar, model.centers[y])
    return recon, kl, mu, logvar


def fused_loss(model: VrbcaModel, h_star, y, eps, beta: float | None = None):
    """Mean over spots of squared reconstruction error plus beta times class KL."""
    if y is None:
        raise ValidationError("the fused loss needs class labels")
    beta = model.cfg.beta if beta is None else beta
    recon, kl, _, _ = fused_terms(model, h_star, torch.as_tensor(y), eps)
    return (recon + beta * kl).mean()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class ContextSet:
    """Cached context tensors for a pool of spots (frozen stage-I encoders)."""

    h_img: torch.Tensor
    h_gene: torch.Tensor
    index: torch.Tensor
    labels: torch.Tensor | None

    def __len__(self):
        return self.index.shape[0]

    def batch(self, rows):
        idx = self.index[rows]
        return self.h_img[idx], self.h_gene[idx]


def embed_dataset(align: AlignmentModel, ds: SpotDataset, k: int) -> ContextSet:
    h_img = encode_image(align, ds.image_features)
    h_gene = encode_gene(align, ds.gene_counts)
    nbrs = knn_neighbors(ds.coords, k)
    labels = None if ds.labels is None else torch.tensor(ds.labels)
    return ContextSet(h_img, h_gene, context_index(nbrs), labels)


def pool_contexts(sets: Sequence[ContextSet]) -> ContextSet:
    """Concatenate per-dataset context sets, offsetting their spot indices."""
    offsets = np.cumsum([0] + [s.h_img.shape[0] for s in sets[:-1]])
    labels = None
    if all(s.labels is not None for s in sets):
        labels = torch.cat([s.labels for s in sets])
    return ContextSet(
        torch.cat([s.h_img for s in sets]),
        torch.cat([s.h_gene for s in sets]),
        torch.cat([s.index + int(o) for s, o in zip(sets, offsets)]),
        labels,
    )


def require_labels(datasets: Sequence[SpotDataset]) -> None:
    for ds in datasets:
        if ds.labels is None:
            raise ValidationError(f"source dataset {ds.dataset_id} has no labels")


def init_vrbca(cfg: VrbcaConfig, seed: int, dtype=None) -> VrbcaModel:
    with seeded(seed):
        return VrbcaModel(cfg).to(dtype or torch.get_default_dtype())


def train_fusion(
    align: AlignmentModel,
    datasets: Sequence[SpotDataset],
    cfg: VrbcaConfig = VrbcaConfig(),
    seed: int = 0,
    contexts: ContextSet | None = None,
) -> VrbcaModel:
    """Fit the fusion network with the stage-I encoders frozen.

    Embeddings and neighbour contexts are computed once up front; the
    encoders never change during this stage, so per-epoch recomputation
    would give the same tensors.
    """
    require_labels(datasets)
    if contexts is None:
        contexts = pool_contexts([embed_dataset(align, ds, cfg.k) for ds in datasets])
    if contexts.labels is None:
        raise ValidationError("stage-II training needs labelled spots")
    dtype = contexts.h_img.dtype
    model = init_vrbca(cfg, seed, dtype)
    store = ParamStore.from_modules({"vrbca": model})
    rng = np.random.default_rng(seed + 2)
    gen = torch.Generator().manual_seed(seed + 3)
    n = len(contexts)
    for epoch in range(cfg.epochs):
        total = 0.0
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = torch.as_tensor(order[start : start + cfg.batch_size])
            H_img, H_gene = contexts.batch(rows)
            store.zero_grad()
            h_star = bca_fuse(model, H_img, H_gene)
            eps = torch.randn(h_star.shape[0], cfg.latent_dim, generator=gen, dtype=dtype)
            loss = fused_loss(model, h_star, contexts.labels[rows], eps)
            loss.backward()
            adam_step(store, lr=cfg.lr)
            total += loss.item() * len(rows)
        model.loss_trace.append(total / n)
        log.debug("fusion epoch %d loss %.5f", epoch, model.loss_trace[-1])
    store.zero_grad()
    return model


@torch.no_grad()
def latent_stats(model: VrbcaModel, contexts: ContextSet, batch_size: int = 512):
    mus, logvars = [], []
    for start in range(0, len(contexts), batch_size):
        rows = torch.arange(start, min(start + batch_size, len(contexts)))
        mu, logvar = rvae_encode(model, bca_fuse(model, *contexts.batch(rows)))
        mus.append(mu)
        logvars.append(logvar)
    return torch.cat(mus), torch.cat(logvars)
