"""Classification, conditional adversarial and metric-constraint losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_FLOOR, Tensor


def _clamped_log(p: Tensor) -> Tensor:
    return ad.log(ad.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def one_hot(labels, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ad.ShapeError(f"cross_entropy: logits must be [B x C], got {logits.shape}")
    mask = one_hot(labels, logits.shape[1], logits.dtype)
    if mask.shape[0] != logits.shape[0]:
        raise ad.ShapeError(f"cross_entropy: {mask.shape[0]} labels for {logits.shape[0]} rows")
    logp = _clamped_log(ad.softmax(logits))
    return ad.neg(ad.mean(ad.sum(logp * mask, axis=1)))


@dataclass
class PhiState:
    """Conditioning map configuration and its persisted random projections."""

    d_f: int
    d_p: int
    d0: int = 4096
    d_r: int = 1024
    R_f: Optional[np.ndarray] = None
    R_p: Optional[np.ndarray] = None
    seed: Optional[int] = None

    @property
    def randomized(self) -> bool:
        return use_randomized_map(self.d_f, self.d_p, self.d0)

    @property
    def out_dim(self) -> int:
        return self.d_r if self.randomized else self.d_f * self.d_p

    @classmethod
    def create(cls, d_f, d_p, d0=4096, d_r=1024, rng=None, dtype=np.float64, seed=None) -> "PhiState":
        state = cls(d_f, d_p, d0, d_r, seed=seed)
        if state.randomized:
            rng = rng if rng is not None else np.random.default_rng(seed)
            state.R_f = rng.standard_normal((d_f, d_r)).astype(dtype)
            state.R_p = rng.standard_normal((d_p, d_r)).astype(dtype)
        return state


def use_randomized_map(d_f: int, d_p: int, d0: int) -> bool:
    return d_f * d_p > d0


def conditioning_map(f: Tensor, p: Tensor, state: PhiState) -> Tensor:
    """Joint feature/prediction embedding fed to the domain discriminators.

    Exact row-wise outer product (flattened, feature index major) when
    ``d_f * d_p <= d0``; otherwise ``(f R_f) * (p R_p) / sqrt(d_r)``.
    Accepts single vectors or [B x d] batches.
    """
    single = f.data.ndim == 1
    if single:
        f = ad.reshape(f, (1, -1))
        p = ad.reshape(p, (1, -1))
    if f.shape[1] != state.d_f or p.shape[1] != state.d_p:
        raise ad.ShapeError(f"conditioning_map: got dims ({f.shape[1]}, {p.shape[1]}), state expects ({state.d_f}, {state.d_p})")
    if np.any(np.abs(p.data.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("conditioning_map: probability rows must sum to 1")
    if state.randomized:
        rf = Tensor(state.R_f.astype(f.dtype, copy=False))
        rp = Tensor(state.R_p.astype(p.dtype, copy=False))
        out = ad.scale((f @ rf) * (p @ rp), 1.0 / np.sqrt(state.d_r))
    else:
        out = ad.batch_outer(f, p)
    return ad.reshape(out, (out.shape[1],)) if single else out


def adversarial_domain_loss(d_src: Tensor, d_tgt: Tensor) -> Tensor:
    """-mean log(1 - D(source-role)) - mean log D(target-role)."""
    if d_src.data.size == 0 or d_tgt.data.size == 0:
        raise ValueError("adversarial_domain_loss: empty batch")
    src_term = ad.mean(_clamped_log(ad.sub(1.0, d_src)))
    tgt_term = ad.mean(_clamped_log(d_tgt))
    return ad.neg(src_term + tgt_term)


def pair_masks(labels) -> tuple:
    """Upper-triangular (m < n) masks of cross-class and within-class pairs."""
    labels = np.asarray(labels)
    upper = np.triu(np.ones((labels.size, labels.size), dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    return upper & ~same, upper & same


def mc_loss(features: Tensor, labels, stats: Optional[dict] = None) -> Tensor:
    """Metric-constraint loss over one batch.

    ``T = (1/B) sum_{m<n} |f_m - f_n|^2`` and the loss is
    ``log(sum_cross exp(-d/T) / sum_within exp(-d/T))`` over unordered pairs.
    Batches without a within-class pair, without a cross-class pair, or with
    all features identical contribute a constant zero; ``stats["mc_skipped"]``
    counts those.
    """
    labels = np.asarray(labels)
    if features.data.ndim != 2 or features.shape[0] != labels.size:
        raise ad.ShapeError(f"mc_loss: features {features.shape} vs {labels.size} labels")
    cross, within = pair_masks(labels)
    dist = ad.pairwise_sqdist(features)
    T = ad.scale(ad.sum(ad.mul(dist, Tensor(np.triu(np.ones_like(dist.data), k=1)))), 1.0 / labels.size)
    if not cross.any() or not within.any() or float(T.data) <= 0.0:
        if stats is not None:
            stats["mc_skipped"] = stats.get("mc_skipped", 0) + 1
        return Tensor(np.zeros((), dtype=features.dtype))
    neg_scaled = ad.neg(ad.div(dist, T))
    return ad.masked_logsumexp(neg_scaled, cross) - ad.masked_logsumexp(neg_scaled, within)


def stage_objective(cls: Tensor, adv: Tensor, mc: Tensor, lam: float) -> Tensor:
    """``L_cls + lam * (L_adv + L_mc)``.

    ``adv`` must already pass through gradient reversal on the discriminator
    input so the discriminator descends ``lam * L_adv`` while the feature
    extractor ascends it.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return cls
    return cls + ad.scale(adv + mc, lam)
