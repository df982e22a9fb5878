"""Diagonal Gaussian and Bernoulli kernels used by encoders, decoders and prior.

All functions accept a single vector (D,) or a batch (B, D); reductions run
over the last axis.  Everything is pure and differentiable through the graph
engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    as_tensor,
    clip,
    mul,
    sigmoid,
    softplus,
    square,
    sub,
    texp,
    tmean,
    tsum,
)

LOG_2PI = math.log(2.0 * math.pi)

# Clamp on log-variance; prevents variance collapse/explosion during early
# KL annealing.
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class GaussianParams:
    """(mean, log-variance) of a diagonal Gaussian; log_var clamped to [-10, 10]."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_var = clip(as_tensor(self.log_var), LOG_VAR_MIN, LOG_VAR_MAX)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}"
            )

    @property
    def dim(self):
        return self.mean.shape[-1]


@dataclass
class BernoulliParams:
    """Logits of independent Bernoullis over a modality's data shape."""

    logits: Tensor

    def __post_init__(self):
        self.logits = as_tensor(self.logits)
        if not np.all(np.isfinite(self.logits.data)):
            raise ValueError("BernoulliParams requires finite logits")


def _check_dim(z, p):
    if z.shape[-1] != p.dim:
        raise ShapeError(f"z dim {z.shape[-1]} != params dim {p.dim}")


def gaussian_log_prob(z, p):
    """log N(z; mean, diag exp(log_var)), summed over the last axis.

    Returns a scalar for a vector z, or (B,) for a batch.
    """
    z = as_tensor(z)
    _check_dim(z, p)
    diff = sub(z, p.mean)
    quad = mul(square(diff), texp(-p.log_var))
    return tsum(-0.5 * (LOG_2PI + p.log_var + quad), axis=-1)


def standard_normal_log_prob(z):
    """log N(z; 0, I), summed over the last axis."""
    z = as_tensor(z)
    return tsum(-0.5 * (LOG_2PI + square(z)), axis=-1)


def gaussian_rsample(p, noise):
    """mean + exp(log_var / 2) * noise; differentiable w.r.t. the parameters."""
    noise = as_tensor(noise)
    _check_dim(noise, p)
    return p.mean + mul(texp(mul(p.log_var, 0.5)), noise)


def gaussian_kl_standard(p):
    """Closed-form KL[N(mean, var) || N(0, I)], summed over the last axis."""
    return mul(
        tsum(texp(p.log_var) + square(p.mean) - 1.0 - p.log_var, axis=-1), 0.5
    )


def bernoulli_nll_rows(b, target):
    """Per-row negative log-likelihood: sum_d softplus(logit) - target * logit."""
    target = as_tensor(target)
    if target.shape != b.logits.shape:
        raise ShapeError(
            f"target shape {target.shape} != logits shape {b.logits.shape}"
        )
    if target.data.size and (target.data.min() < 0.0 or target.data.max() > 1.0):
        raise ValueError("bernoulli_nll target must lie in [0, 1]")
    return tsum(sub(softplus(b.logits), mul(target, b.logits)), axis=-1)


def bernoulli_nll(b, target):
    """NLL summed over the modality's dimensions, averaged over the batch."""
    rows = bernoulli_nll_rows(b, target)
    if rows.ndim == 0:
        return rows
    return tmean(rows)


def bernoulli_mean(b):
    """Bernoulli success probabilities from logits (detached from the graph)."""
    return sigmoid(Tensor(b.logits.data)).data
