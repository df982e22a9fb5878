"""Continuous normalizing flow over the latent, plus a planar-flow baseline.

The CNF integrates the augmented state (z, l) with dz/dt = f(z, t) and
dl/dt = -Tr(df/dz) using fixed-step Euler; gradients flow through the
unrolled steps (discretize-then-optimize).  The trace is either exact
(one batched vector-Jacobian product per basis direction, differentiable)
or the Hutchinson estimator with Rademacher probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    grad,
    matmul,
    mul,
    neg,
    repeat_rows,
    reshape,
    sigmoid,
    softplus,
    sub,
    tanh,
    texp,
    tlog,
    tsum,
)
from .layers import init_uniform


class FlowDivergenceError(RuntimeError):
    """Integration produced a non-finite state."""


class DegenerateJacobianError(RuntimeError):
    """Planar transform hit a numerically singular Jacobian."""


@dataclass
class GatedLayer:
    """Affine layer gated elementwise by a sigmoid of time, plus a time bias.

    h' = softplus(W h + b) * sigmoid(wt * t + bt) + ut * t
    """

    W: Tensor
    b: Tensor
    wt: Tensor
    bt: Tensor
    ut: Tensor


@dataclass
class ODENetParams:
    """Stack of gated layers (z, t) -> dz/dt with a final linear map to R^D."""

    dim: int
    layers: list
    out_w: Tensor
    out_b: Tensor

    def tensors(self):
        out = {}
        for i, l in enumerate(self.layers):
            for name in ("W", "b", "wt", "bt", "ut"):
                out[f"odenet.layer{i}.{name}"] = getattr(l, name)
        out["odenet.out.W"] = self.out_w
        out["odenet.out.b"] = self.out_b
        return out


def init_odenet(dim, hidden=(256, 256), rng=None, zero_final=True):
    """Build ODENet parameters.

    The final linear layer is zero-initialized by default so the flow starts
    as the identity map (delta_log_q = 0) and training can only improve on
    the flow-free model.
    """
    rng = rng or np.random.default_rng(0)
    layers = []
    fan_in = dim
    for h in hidden:
        layers.append(
            GatedLayer(
                W=init_uniform(rng, fan_in, (fan_in, h)),
                b=init_uniform(rng, fan_in, (h,)),
                wt=init_uniform(rng, 1, (h,)),
                bt=init_uniform(rng, 1, (h,)),
                ut=Tensor(np.zeros(h), requires_grad=True),
            )
        )
        fan_in = h
    if zero_final:
        out_w = Tensor(np.zeros((fan_in, dim)), requires_grad=True)
        out_b = Tensor(np.zeros(dim), requires_grad=True)
    else:
        out_w = init_uniform(rng, fan_in, (fan_in, dim))
        out_b = init_uniform(rng, fan_in, (dim,))
    return ODENetParams(dim=dim, layers=layers, out_w=out_w, out_b=out_b)


def linear_odenet(matrix, bias=None):
    """ODENet with no hidden layers computing f(z, t) = z @ matrix + bias."""
    matrix = np.asarray(matrix, dtype=np.float64)
    d = matrix.shape[0]
    bias = np.zeros(d) if bias is None else np.asarray(bias, dtype=np.float64)
    return ODENetParams(dim=d, layers=[], out_w=Tensor(matrix), out_b=Tensor(bias))


@dataclass
class FlowConfig:
    num_steps: int = 40
    t0: float = 0.0
    t1: float = 1.0
    trace_mode: str = "exact"
    hutchinson_probes: int = 1

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if not self.t1 > self.t0:
            raise ValueError(f"need t1 > t0, got [{self.t0}, {self.t1}]")
        if self.trace_mode not in ("exact", "hutchinson"):
            raise ValueError(f"unknown trace_mode {self.trace_mode!r}")
        if self.hutchinson_probes < 1:
            raise ValueError("hutchinson_probes must be positive")


@dataclass
class FlowResult:
    """Transformed latent and the log-density shift log q_T - log q_0."""

    z_out: Tensor
    delta_log_q: Tensor


def odenet_eval(z, t, p: ODENetParams):
    """dz/dt at (z, t).  ``z`` is (D,) or (B, D); ``t`` a python scalar."""
    z = as_tensor(z)
    vector = z.ndim == 1
    if z.shape[-1] != p.dim:
        raise ShapeError(f"z dim {z.shape[-1]} != ODENet dim {p.dim}")
    h = reshape(z, (1, p.dim)) if vector else z
    for l in p.layers:
        pre = add(matmul(h, l.W), l.b)
        gate = sigmoid(add(mul(l.wt, float(t)), l.bt))
        h = add(mul(softplus(pre), gate), mul(l.ut, float(t)))
    out = add(matmul(h, p.out_w), p.out_b)
    return reshape(out, (p.dim,)) if vector else out


def _diff_input(z):
    # A constant input still needs to act as a graph leaf so the inner
    # vector-Jacobian product has something to differentiate against.
    if z.requires_grad:
        return z
    leaf = Tensor(z.data, requires_grad=True)
    return leaf


_BASIS_CACHE = {}


def _tiled_basis(b, d):
    key = (b, d)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = np.tile(np.eye(d), (b, 1))
    return _BASIS_CACHE[key]


def _drift_and_exact_trace(p, z2d, t, create_graph=True):
    """(f(z, t), Tr(df/dz)) per batch row from one tiled forward pass.

    Each row is repeated D times so all D directional vector-Jacobian
    products run as a single batched backward pass; the drift is read off
    the repeated output rows.
    """
    b, d = z2d.shape
    z_in = _diff_input(z2d)
    z_rep = repeat_rows(z_in, d)
    out = odenet_eval(z_rep, t, p)
    basis = Tensor(_tiled_basis(b, d))
    (gz,) = grad(out, [z_rep], cotangent=basis, create_graph=create_graph)
    diag = tsum(mul(gz, basis), axis=1)
    tr = tsum(reshape(diag, (b, d)), axis=1)
    fz = out[(slice(None, None, d), slice(None))]
    return fz, tr


def _exact_trace_rows(p, z2d, t, create_graph=True):
    """Tr(df/dz) per batch row, differentiable w.r.t. z and parameters."""
    return _drift_and_exact_trace(p, z2d, t, create_graph=create_graph)[1]


def _hutchinson_trace_rows(p, z2d, t, probes, create_graph=True):
    """eps^T (df/dz) eps per row; ``probes`` is (B, D) Rademacher."""
    probes = np.asarray(probes, dtype=np.float64)
    if probes.shape != tuple(z2d.shape):
        raise ShapeError(f"probe shape {probes.shape} != z shape {z2d.shape}")
    if not np.all(np.abs(probes) == 1.0):
        raise ValueError("Hutchinson probes must have entries in {-1, +1}")
    z_in = _diff_input(z2d)
    out = odenet_eval(z_in, t, p)
    eps = Tensor(probes)
    (gz,) = grad(out, [z_in], cotangent=eps, create_graph=create_graph)
    return tsum(mul(gz, eps), axis=1)


def exact_trace(p, z, t):
    """Exact Tr(df/dz) at (z, t) via D directional derivatives."""
    z = as_tensor(z)
    if z.ndim == 1:
        return reshape(_exact_trace_rows(p, reshape(z, (1, -1)), t), ())
    return _exact_trace_rows(p, z, t)


def hutchinson_trace(p, z, t, probe):
    """Single-probe Hutchinson estimate of Tr(df/dz); unbiased over probes."""
    z = as_tensor(z)
    probe = np.asarray(probe, dtype=np.float64)
    if z.ndim == 1:
        return reshape(
            _hutchinson_trace_rows(p, reshape(z, (1, -1)), t, probe.reshape(1, -1)),
            (),
        )
    return _hutchinson_trace_rows(p, z, t, probe)


def cnf_transform(z0, p: ODENetParams, cfg: FlowConfig, probes=None) -> FlowResult:
    """Euler-integrate the augmented state (z, log-density shift) over [t0, t1].

    ``probes``: required for trace_mode='hutchinson'; shape (B, D) or
    (n_probes, B, D).  One probe is reused across all Euler steps of a
    sample so the per-sample integral estimate stays unbiased.
    """
    z = as_tensor(z0)
    vector = z.ndim == 1
    if vector:
        z = reshape(z, (1, -1))
    if z.shape[-1] != p.dim:
        raise ShapeError(f"z dim {z.shape[-1]} != ODENet dim {p.dim}")

    probe_set = None
    if cfg.trace_mode == "hutchinson":
        if probes is None:
            raise ValueError("hutchinson trace mode requires probes")
        probe_set = np.asarray(probes, dtype=np.float64)
        if probe_set.ndim == 1:
            probe_set = probe_set.reshape(1, 1, -1)
        elif probe_set.ndim == 2:
            probe_set = probe_set[None]

    b = z.shape[0]
    ell = Tensor(np.zeros(b))
    dt = (cfg.t1 - cfg.t0) / cfg.num_steps
    t = cfg.t0
    for step in range(cfg.num_steps):
        if cfg.trace_mode == "exact":
            fz, tr = _drift_and_exact_trace(p, z, t)
        else:
            fz = odenet_eval(z, t, p)
            acc = None
            for k in range(probe_set.shape[0]):
                est = _hutchinson_trace_rows(p, z, t, probe_set[k])
                acc = est if acc is None else add(acc, est)
            tr = mul(acc, 1.0 / probe_set.shape[0])
        z = add(z, mul(fz, dt))
        ell = sub(ell, mul(tr, dt))
        t = cfg.t0 + (step + 1) * dt
        if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(ell.data))):
            raise FlowDivergenceError(f"non-finite state at Euler step {step}")

    if vector:
        return FlowResult(reshape(z, (p.dim,)), reshape(ell, ()))
    return FlowResult(z, ell)


def planar_apply(z, u, w, b, project=True):
    """Planar flow z + u * tanh(w.z + b) with its log |det Jacobian|.

    ``u`` is projected just enough to keep u.w >= -1 + 1e-6 (invertibility);
    parameters already satisfying the constraint pass through unchanged.  The
    projection makes |det| >= 1e-6, so the degeneracy guard below is
    defense-in-depth; ``project=False`` exposes it for testing.
    """
    z, u, w = as_tensor(z), as_tensor(u), as_tensor(w)
    if not (z.shape == u.shape == w.shape):
        raise ShapeError(
            f"planar_apply: shapes z {z.shape}, u {u.shape}, w {w.shape} differ"
        )
    uw = tsum(mul(u, w))
    floor = -1.0 + 1e-6
    if project and uw.item() < floor:
        wnorm2 = tsum(mul(w, w))
        u = add(u, mul(mul(sub(floor, uw), 1.0 / wnorm2.item()), w))

    inner = add(tsum(mul(w, z)), float(np.asarray(b, dtype=np.float64)))
    th = tanh(inner)
    z_out = add(z, mul(u, th))
    psi = mul(sub(1.0, mul(th, th)), w)
    det = add(1.0, tsum(mul(u, psi)))
    if abs(det.item()) < 1e-8:
        raise DegenerateJacobianError(f"|1 + u.psi| = {abs(det.item()):.3e} < 1e-8")
    log_det = tlog(Tensor(np.abs(det.data))) if not det.requires_grad else _log_abs(det)
    return z_out, log_det


def _log_abs(x):
    sign = float(np.sign(x.data))
    return tlog(mul(x, sign))
