"""Stage III: cancer-likelihood classifier, two-component GMM and threshold."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .diffcore import Linear, ParamStore, adam_step, seeded
from .errors import ArgumentError, ValidationError
from .fusion import ContextSet, VrbcaModel, bca_fuse, fused_terms, latent_stats

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class DiscConfig:
    hidden: int = 64
    gamma: float = 0.1
    epochs: int = 50
    lr: float = 1e-5
    batch_size: int = 128


class DiscriminatorModel(nn.Module):
    """Two-layer MLP over the concatenated latent mean and log-variance."""

    def __init__(self, latent_dim: int = 64, cfg: DiscConfig = DiscConfig()):
        super().__init__()
        self.cfg = cfg
        self.hidden = Linear(2 * latent_dim, cfg.hidden)
        self.out = Linear(cfg.hidden, 1)
        self.loss_trace: list[float] = []

    def logits(self, mu, logvar):
        return self.out(torch.relu(self.hidden(torch.cat([mu, logvar], dim=-1))))[..., 0]


def bce_with_logits(logits, y):
    """Binary cross-entropy from pre-sigmoid values, numerically stable form."""
    y = torch.as_tensor(y, dtype=logits.dtype)
    return (torch.clamp(logits, min=0) - logits * y + torch.log1p(torch.exp(-logits.abs()))).mean()


def bce_loss(probs, y, clip: float = 1e-7):
    """Binary cross-entropy of probabilities, clipped into [clip, 1 - clip]."""
    p = torch.as_tensor(probs, dtype=torch.float64).clamp(clip, 1 - clip)
    return bce_with_logits(torch.log(p) - torch.log1p(-p), y)


def classification_loss(vrbca: VrbcaModel, disc: DiscriminatorModel, H_img, H_gene, y, eps, gamma=None):
    """BCE of the classifier plus gamma times the fused objective on one batch."""
    gamma = disc.cfg.gamma if gamma is None else gamma
    y = torch.as_tensor(y)
    h_star = bca_fuse(vrbca, H_img, H_gene)
    recon, kl, mu, logvar = fused_terms(vrbca, h_star, y, eps)
    bce = bce_with_logits(disc.logits(mu, logvar), y)
    if gamma == 0:
        return bce
    return bce + gamma * (recon + vrbca.cfg.beta * kl).mean()


def init_discriminator(latent_dim: int, cfg: DiscConfig, seed: int, dtype=None) -> DiscriminatorModel:
    with seeded(seed):
        return DiscriminatorModel(latent_dim, cfg).to(dtype or torch.get_default_dtype())


def train_discriminator(
    vrbca: VrbcaModel,
    disc: DiscriminatorModel,
    contexts: ContextSet,
    seed: int = 0,
    gamma: float | None = None,
) -> tuple[VrbcaModel, DiscriminatorModel]:
    """Jointly fine-tune the fusion network and fit the classifier."""
    if contexts.labels is None:
        raise ValidationError("stage-III training needs labelled spots")
    cfg = disc.cfg
    store = ParamStore.from_modules({"vrbca": vrbca, "cls": disc})
    rng = np.random.default_rng(seed + 4)
    gen = torch.Generator().manual_seed(seed + 5)
    n = len(contexts)
    dtype = contexts.h_img.dtype
    for epoch in range(cfg.epochs):
        total = 0.0
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = torch.as_tensor(order[start : start + cfg.batch_size])
            eps = torch.randn(len(rows), vrbca.cfg.latent_dim, generator=gen, dtype=dtype)
            store.zero_grad()
            loss = classification_loss(vrbca, disc, *contexts.batch(rows), contexts.labels[rows], eps, gamma)
            loss.backward()
            adam_step(store, lr=cfg.lr)
            total += loss.item() * len(rows)
        disc.loss_trace.append(total / n)
        log.debug("cls epoch %d loss %.5f", epoch, disc.loss_trace[-1])
    store.zero_grad()
    return vrbca, disc


@torch.no_grad()
def predict_scores(vrbca: VrbcaModel, disc: DiscriminatorModel, contexts: ContextSet) -> np.ndarray:
    """Sigmoid cancer likelihood per spot from the latent mean and log-variance."""
    mu, logvar = latent_stats(vrbca, contexts)
    logits = disc.logits(mu, logvar).double()
    return torch.sigmoid(logits).numpy()


# ---------------------------------------------------------------------------
# GMM threshold
# ---------------------------------------------------------------------------


@dataclass
class GmmParams:
    weights: tuple[float, float]
    means: tuple[float, float]
    variances: tuple[float, float]
    log_likelihood: float = float("nan")
    converged: bool = False
    iterations: int = 0
    trace: list[float] = field(default_factory=list, repr=False)


@dataclass
class ThresholdResult:
    theta: float
    method: str
    coefficients: tuple[float, float, float] | None = None


def _log_normal(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


def fit_gmm_1d(scores, max_iter: int = 200, tol: float = 1e-8) -> GmmParams:
    """Expectation-maximisation for a two-component univariate mixture.

    Initialised at the 25th/75th percentiles with equal weights and the
    sample variance for both components; no randomness is involved.
    """
    x = np.asarray(scores, dtype=np.float64).reshape(-1)
    if x.size < 4:
        raise ArgumentError("need at least 4 scores to fit a two-component mixture")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("scores must be finite")
    var0 = x.var()
    if var0 <= VARIANCE_FLOOR**2 or np.ptp(x) == 0:
        c = float(np.median(x))
        return GmmParams((0.5, 0.5), (c, c), (VARIANCE_FLOOR, VARIANCE_FLOOR), converged=False)
    w = np.array([0.5, 0.5])
    mu = np.percentile(x, [25, 75]).astype(np.float64)
    var = np.array([var0, var0])
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        log_p = np.log(w)[None, :] + _log_normal(x[:, None], mu[None, :], var[None, :])
        log_tot = np.logaddexp(log_p[:, 0], log_p[:, 1])
        ll = float(log_tot.sum())
        resp = np.exp(log_p - log_tot[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            trace.append(ll)
            break
        w = nk / x.size
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk, VARIANCE_FLOOR)
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
    log_p = np.log(w)[None, :] + _log_normal(x[:, None], mu[None, :], var[None, :])
    final_ll = float(np.logaddexp(log_p[:, 0], log_p[:, 1]).sum())
    return GmmParams(
        weights=(float(w[0]), float(w[1])),
        means=(float(mu[0]), float(mu[1])),
        variances=(float(var[0]), float(var[1])),
        log_likelihood=final_ll,
        converged=converged,
        iterations=it,
        trace=trace + [final_ll],
    )


def weighted_density_gap(p: GmmParams, y):
    """log(pi_1 N(y|mu_1, s1)) - log(pi_2 N(y|mu_2, s2))."""
    (w1, w2), (m1, m2), (v1, v2) = p.weights, p.means, p.variances
    return (math.log(w1) + _log_normal(y, m1, v1)) - (math.log(w2) + _log_normal(y, m2, v2))


def gmm_threshold(p: GmmParams) -> ThresholdResult:
    """Point between the two means where the weighted component densities meet.

    From ln(pi_1/s_1) - (y-m_1)^2/2v_1 = ln(pi_2/s_2) - (y-m_2)^2/2v_2:
        a = 1/2v_2 - 1/2v_1
        b = m_1/v_1 - m_2/v_2
        c = m_2^2/2v_2 - m_1^2/2v_1 + ln(pi_1 s_2 / (pi_2 s_1))
    Falls back to the midpoint of the means when no root lies strictly
    between them.
    """
    (w1, w2), (m1, m2), (v1, v2) = p.weights, p.means, p.variances
    lo, hi = min(m1, m2), max(m1, m2)
    midpoint = ThresholdResult(0.5 * (m1 + m2), "midpoint-fallback")
    if lo == hi:
        return midpoint
    a = 0.5 / v2 - 0.5 / v1
    b = m1 / v1 - m2 / v2
    c = m2**2 / (2 * v2) - m1**2 / (2 * v1) + math.log(w1 / w2) + 0.5 * math.log(v2 / v1)
    scale = max(abs(a), abs(b), abs(c))
    if abs(a) <= 1e-12 * scale:
        roots = [-c / b] if b != 0 else []
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            return midpoint
        sq = math.sqrt(disc)
        # Avoid cancellation: compute the larger-magnitude root first.
        q = -0.5 * (b + math.copysign(sq, b))
        roots = [q / a, c / q] if q != 0 else [-b / (2 * a)]
    inside = [r for r in roots if lo < r < hi]
    if not inside:
        return midpoint
    theta = min(inside, key=lambda r: abs(weighted_density_gap(p, r)))
    return ThresholdResult(float(theta), "quadratic-root", (a, b, c))


def binarize(scores, theta: float) -> np.ndarray:
    return (np.asarray(scores) >= theta).astype(np.int64)
