"""Full multimodal VAE: per-modality encoders/decoders, PoE fusion, and an
optional continuous-flow posterior, plus the flow-free baseline variant."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, add, as_tensor, swish
from .distributions import (
    BernoulliParams,
    GaussianParams,
    bernoulli_mean,
    gaussian_log_prob,
    gaussian_rsample,
)
from .flows import FlowConfig, cnf_transform, init_odenet, odenet_eval
from .layers import make_dense
from .poe import subset_posterior


@dataclass
class ModalitySpec:
    name: str
    data_dim: int
    encoder_widths: tuple = (512,)
    head_width: int = 128
    decoder_widths: tuple = (512,)
    likelihood: str = "bernoulli"

    def __post_init__(self):
        if self.data_dim <= 0:
            raise ValueError(f"data_dim must be positive, got {self.data_dim}")
        if self.likelihood != "bernoulli":
            raise ValueError(f"unsupported likelihood {self.likelihood!r}")


class MVAEModel:
    """Encoders -> PoE -> (optional CNF) -> decoders.

    variant 'baseline' has no flow; variant 'cnf' integrates the fused
    posterior sample through a shared (non-amortized) ODE flow.
    """

    def __init__(
        self,
        specs,
        latent_dim,
        variant="baseline",
        flow_config=None,
        odenet_hidden=(256, 256),
        seed=0,
    ):
        if variant not in ("baseline", "cnf"):
            raise ValueError(f"unknown variant {variant!r}")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names: {names}")
        self.specs = list(specs)
        self.names = names
        self.latent_dim = latent_dim
        self.variant = variant
        self.odenet_hidden = tuple(odenet_hidden)
        self.seed = seed
        rng = np.random.default_rng(seed)

        self._enc = {}
        self._dec = {}
        self.params = {}
        for spec in self.specs:
            layers = []
            fan = spec.data_dim
            for w in spec.encoder_widths:
                layers.append(make_dense(rng, fan, w))
                fan = w
            layers.append(make_dense(rng, fan, spec.head_width))
            mean_head = make_dense(rng, spec.head_width, latent_dim)
            logvar_head = make_dense(rng, spec.head_width, latent_dim)
            self._enc[spec.name] = (layers, mean_head, logvar_head)

            dlayers = []
            fan = latent_dim
            for w in spec.decoder_widths:
                dlayers.append(make_dense(rng, fan, w))
                fan = w
            out = make_dense(rng, fan, spec.data_dim)
            self._dec[spec.name] = (dlayers, out)

            for i, l in enumerate(layers):
                self.params[f"enc.{spec.name}.{i}.W"] = l.W
                self.params[f"enc.{spec.name}.{i}.b"] = l.b
            self.params[f"enc.{spec.name}.mean.W"] = mean_head.W
            self.params[f"enc.{spec.name}.mean.b"] = mean_head.b
            self.params[f"enc.{spec.name}.logvar.W"] = logvar_head.W
            self.params[f"enc.{spec.name}.logvar.b"] = logvar_head.b
            for i, l in enumerate(dlayers):
                self.params[f"dec.{spec.name}.{i}.W"] = l.W
                self.params[f"dec.{spec.name}.{i}.b"] = l.b
            self.params[f"dec.{spec.name}.out.W"] = out.W
            self.params[f"dec.{spec.name}.out.b"] = out.b

        if variant == "cnf":
            self.flow_config = flow_config or FlowConfig()
            self.odenet = init_odenet(latent_dim, hidden=self.odenet_hidden, rng=rng)
            self.params.update(self.odenet.tensors())
        else:
            if flow_config is not None:
                raise ValueError("baseline variant must not carry a flow config")
            self.flow_config = None
            self.odenet = None

    # ------------------------------------------------------------------
    def spec_for(self, name):
        return self.specs[self.names.index(name)]

    def encode_modality(self, name, values) -> GaussianParams:
        spec = self.spec_for(name)
        x = as_tensor(values)
        if x.ndim == 1:
            x = x.reshape((1, -1))
        if x.shape[-1] != spec.data_dim:
            raise ShapeError(
                f"modality {name!r}: data dim {x.shape[-1]} != spec {spec.data_dim}"
            )
        layers, mean_head, logvar_head = self._enc[name]
        h = x
        for l in layers:
            h = swish(l(h))
        return GaussianParams(mean_head(h), logvar_head(h))

    def encode(self, batch) -> GaussianParams:
        """Fused PoE posterior for the present modalities of ``batch``."""
        encoders = {n: (lambda v, n=n: self.encode_modality(n, v)) for n in self.names}
        return subset_posterior(batch, encoders, latent_dim=self.latent_dim)

    def posterior_sample(self, params: GaussianParams, noise, probes=None):
        """(z_T, log q_T(z_T)) from a reparameterized draw, flowed if cnf."""
        z0 = gaussian_rsample(params, noise)
        log_q0 = gaussian_log_prob(z0, params)
        if self.variant == "baseline":
            return z0, log_q0
        res = cnf_transform(z0, self.odenet, self.flow_config, probes=probes)
        return res.z_out, add(log_q0, res.delta_log_q)

    def decode(self, z):
        """Bernoulli logits for every modality (all modalities always decoded)."""
        z = as_tensor(z)
        out = {}
        for spec in self.specs:
            dlayers, final = self._dec[spec.name]
            h = z if z.ndim == 2 else z.reshape((1, -1))
            for l in dlayers:
                h = swish(l(h))
            out[spec.name] = BernoulliParams(final(h))
        return out

    def flow_forward(self, z0):
        """Push latents through the flow without density bookkeeping (sampling)."""
        if self.variant == "baseline":
            return as_tensor(z0)
        z = as_tensor(z0)
        cfg = self.flow_config
        dt = (cfg.t1 - cfg.t0) / cfg.num_steps
        t = cfg.t0
        for step in range(cfg.num_steps):
            z = add(z, odenet_eval(z, t, self.odenet) * dt)
            t = cfg.t0 + (step + 1) * dt
        return z

    # generation --------------------------------------------------------
    def generate_conditional(self, given, n, seed, hard=False):
        """n independent draws of the absent modalities, conditioned on ``given``.

        ``given`` is a single-row MultimodalBatch.  Returns a dict
        modality name -> (n, data_dim) array of Bernoulli means (or hard
        samples when ``hard``).
        """
        if not given.presence.any():
            raise ValueError("generate_conditional requires at least one modality")
        absent = [
            name for i, name in enumerate(given.names) if not given.presence[:, i].all()
        ]
        if not absent:
            warnings.warn("all modalities present; returning reconstructions")
            absent = list(given.names)

        rng = np.random.default_rng(seed)
        params = self.encode(given)
        mean = np.repeat(params.mean.data, n, axis=0)
        log_var = np.repeat(params.log_var.data, n, axis=0)
        tiled = GaussianParams(Tensor(mean), Tensor(log_var))
        noise = rng.standard_normal((n, self.latent_dim))
        z0 = gaussian_rsample(tiled, noise)
        z = self.flow_forward(z0)
        logits = self.decode(z)
        out = {}
        for name in absent:
            means = bernoulli_mean(logits[name])
            if hard:
                out[name] = (rng.random(means.shape) < means).astype(np.float64)
            else:
                out[name] = means
        return out

    def generate_joint(self, n, seed, hard=False):
        """Draw z_T from the standard-normal prior and decode all modalities."""
        rng = np.random.default_rng(seed)
        if n == 0:
            return {s.name: np.zeros((0, s.data_dim)) for s in self.specs}
        z = Tensor(rng.standard_normal((n, self.latent_dim)))
        logits = self.decode(z)
        out = {}
        for spec in self.specs:
            means = bernoulli_mean(logits[spec.name])
            if hard:
                out[spec.name] = (rng.random(means.shape) < means).astype(np.float64)
            else:
                out[spec.name] = means
        return out

    # (de)serialization helpers ----------------------------------------
    def topology(self):
        return {
            "latent_dim": self.latent_dim,
            "variant": self.variant,
            "odenet_hidden": list(self.odenet_hidden),
            "flow": None
            if self.flow_config is None
            else {
                "num_steps": self.flow_config.num_steps,
                "t0": self.flow_config.t0,
                "t1": self.flow_config.t1,
                "trace_mode": self.flow_config.trace_mode,
                "hutchinson_probes": self.flow_config.hutchinson_probes,
            },
            "modalities": [
                {
                    "name": s.name,
                    "data_dim": s.data_dim,
                    "encoder_widths": list(s.encoder_widths),
                    "head_width": s.head_width,
                    "decoder_widths": list(s.decoder_widths),
                    "likelihood": s.likelihood,
                }
                for s in self.specs
            ],
        }

    @classmethod
    def from_topology(cls, topo):
        specs = [
            ModalitySpec(
                name=m["name"],
                data_dim=m["data_dim"],
                encoder_widths=tuple(m["encoder_widths"]),
                head_width=m["head_width"],
                decoder_widths=tuple(m["decoder_widths"]),
                likelihood=m["likelihood"],
            )
            for m in topo["modalities"]
        ]
        flow = topo.get("flow")
        cfg = FlowConfig(**flow) if flow else None
        return cls(
            specs,
            latent_dim=topo["latent_dim"],
            variant=topo["variant"],
            flow_config=cfg,
            odenet_hidden=tuple(topo.get("odenet_hidden", (256, 256))),
        )
