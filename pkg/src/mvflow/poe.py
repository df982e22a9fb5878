"""Product-of-experts fusion of diagonal-Gaussian posteriors.

Precisions add and means combine precision-weighted; the standard-normal
prior expert (precision 1, mean 0) anchors the empty-modality posterior to
the prior.  Fusion is computed in precision space, summed in canonical
modality order so permuting the expert list is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, div, mul, neg, texp, tlog
from .distributions import GaussianParams


@dataclass
class ExpertSet:
    """Per-modality Gaussian experts plus the optional prior expert.

    ``modality_ids`` fixes the canonical summation order; it defaults to
    list position.  ``dim`` is only required when the expert list is empty.
    """

    experts: list = field(default_factory=list)
    include_prior: bool = True
    modality_ids: list | None = None
    dim: int | None = None

    def __post_init__(self):
        if self.modality_ids is None:
            self.modality_ids = list(range(len(self.experts)))
        if len(self.modality_ids) != len(self.experts):
            raise ValueError("modality_ids must align with experts")
        if not self.experts and not self.include_prior:
            raise ValueError("empty expert set requires the prior expert")
        dims = {e.dim for e in self.experts}
        if len(dims) > 1:
            raise ValueError(f"experts disagree on dimension: {sorted(dims)}")
        if self.experts:
            self.dim = self.experts[0].dim
        elif self.dim is None:
            raise ValueError("dim is required for a prior-only expert set")


def poe_fuse(s: ExpertSet) -> GaussianParams:
    """Fuse experts: var = 1 / sum(T_i), mean = sum(mean_i T_i) / sum(T_i)."""
    shape = s.experts[0].mean.shape if s.experts else (s.dim,)
    if s.include_prior:
        prec_sum = Tensor(np.ones(shape))
        weighted_mean = Tensor(np.zeros(shape))
    else:
        prec_sum = Tensor(np.zeros(shape))
        weighted_mean = Tensor(np.zeros(shape))

    order = np.argsort(np.asarray(s.modality_ids), kind="stable")
    for i in order:
        e = s.experts[i]
        prec = texp(neg(e.log_var))
        prec_sum = add(prec_sum, prec)
        weighted_mean = add(weighted_mean, mul(e.mean, prec))

    fused_mean = div(weighted_mean, prec_sum)
    fused_log_var = neg(tlog(prec_sum))
    return GaussianParams(fused_mean, fused_log_var)


def fuse_masked(experts, mask) -> GaussianParams:
    """Batched fusion with a per-row presence mask.

    ``experts`` is a list of batched GaussianParams (B, D) in canonical
    modality order; ``mask`` is a (B, N) boolean/0-1 array.  Masked-out
    experts contribute zero precision.  The prior expert is always included.
    """
    mask = np.asarray(mask, dtype=np.float64)
    first = next(e for e in experts if e is not None)
    b, d = first.mean.shape
    prec_sum = Tensor(np.ones((b, d)))
    weighted_mean = Tensor(np.zeros((b, d)))
    for i, e in enumerate(experts):
        if e is None:
            continue
        col = Tensor(mask[:, i : i + 1])
        prec = mul(texp(neg(e.log_var)), col)
        prec_sum = add(prec_sum, prec)
        weighted_mean = add(weighted_mean, mul(e.mean, prec))
    return GaussianParams(div(weighted_mean, prec_sum), neg(tlog(prec_sum)))


def subset_posterior(batch, encoders, latent_dim=None) -> GaussianParams:
    """Encode the present modalities of ``batch`` and fuse them with the prior.

    ``encoders`` maps modality name -> callable(values) -> GaussianParams.
    Works row-wise: each row uses exactly its present modalities; a modality
    absent in every row is never encoded.  ``latent_dim`` is only needed for
    the degenerate all-absent batch, whose posterior is the prior itself.
    """
    experts = []
    for i, name in enumerate(batch.names):
        if batch.presence[:, i].any():
            experts.append(encoders[name](batch.values[name]))
        else:
            experts.append(None)
    if all(e is None for e in experts):
        if latent_dim is None:
            raise ValueError("latent_dim required when no modality is present")
        b = batch.presence.shape[0]
        zeros = np.zeros((b, latent_dim))
        return GaussianParams(Tensor(zeros), Tensor(zeros.copy()))
    return fuse_masked(experts, batch.presence)
