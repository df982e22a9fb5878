"""Multimodal VAE with product-of-experts fusion and a continuous-flow posterior."""

from .autodiff import Tensor, backward, grad, grad_check, no_grad
from .data import Dataset, MultimodalBatch, SyntheticSpec, pair_mask, synth_bimodal
from .distributions import (
    BernoulliParams,
    GaussianParams,
    bernoulli_nll,
    gaussian_kl_standard,
    gaussian_log_prob,
    gaussian_rsample,
)
from .flows import (
    FlowConfig,
    FlowResult,
    ODENetParams,
    cnf_transform,
    exact_trace,
    hutchinson_trace,
    odenet_eval,
    planar_apply,
)
from .model import ModalitySpec, MVAEModel
from .objective import (
    AnnealSchedule,
    ElboWeights,
    TrainConfig,
    anneal_beta,
    elbo_loss,
    evaluate,
    subsampled_step,
    train,
)
from .poe import ExpertSet, poe_fuse, subset_posterior

__all__ = [
    "AnnealSchedule",
    "BernoulliParams",
    "Dataset",
    "ElboWeights",
    "ExpertSet",
    "FlowConfig",
    "FlowResult",
    "GaussianParams",
    "ModalitySpec",
    "MultimodalBatch",
    "MVAEModel",
    "ODENetParams",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "anneal_beta",
    "backward",
    "bernoulli_nll",
    "cnf_transform",
    "elbo_loss",
    "evaluate",
    "exact_trace",
    "gaussian_kl_standard",
    "gaussian_log_prob",
    "gaussian_rsample",
    "grad",
    "grad_check",
    "hutchinson_trace",
    "no_grad",
    "odenet_eval",
    "pair_mask",
    "planar_apply",
    "poe_fuse",
    "subsampled_step",
    "subset_posterior",
    "synth_bimodal",
    "train",
]

__version__ = "0.1.0"
