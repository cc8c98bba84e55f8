"""Gradient-boosted mixtures of flows.

A :class:`BoostedFlow` with stage weights ``beta`` represents the mixture built
by the recursion ``T_c = (1 - beta_c) T_{c-1} + beta_c t_c`` with ``beta_1 = 1``.
New components are fitted against the functional gradient of the reverse KL
objective and stage weights are refined by projected SGD.

Both updates use ``xi(x) = log q_beta(x) + U(x)``, where ``U`` is the
negative unnormalized log posterior and ``q_beta`` the mixture at the current
weight. The derivative of ``E_q[log q + U]`` with respect to ``beta`` is
exactly ``E_new[xi] - E_prev[xi]``.
"""
from __future__ import annotations

import dataclasses
import io
import math
import struct
from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from . import flows, sampling
from .diffcore import OptimConfig, run_adam
from .errors import ConfigError, DimensionError, InvariantError, NumericError


@dataclass(frozen=True)
class BoostedFlow:
    components: tuple
    stage_weights: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        betas = tuple(float(b) for b in self.stage_weights)
        if not comps:
            raise ConfigError("a boosted flow needs at least one component")
        if len(betas) != len(comps):
            raise DimensionError("one stage weight per component is required")
        if len({c.d for c in comps}) != 1:
            raise DimensionError("all components must share the latent dimension")
        if betas[0] != 1.0:
            raise InvariantError("the first stage weight is fixed to 1")
        if any(not (0.0 <= b <= 1.0) for b in betas):
            raise InvariantError(f"stage weights must lie in [0, 1], got {betas}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "stage_weights", betas)

    @property
    def d(self) -> int:
        return self.components[0].d

    @property
    def n_components(self) -> int:
        return len(self.components)

    @classmethod
    def single(cls, stack: flows.FlowStack) -> "BoostedFlow":
        return cls((stack,), (1.0,))

    def with_weight(self, beta: float) -> "BoostedFlow":
        return BoostedFlow(self.components, self.stage_weights[:-1] + (float(beta),))

    def previous(self) -> "BoostedFlow":
        return BoostedFlow(self.components[:-1], self.stage_weights[:-1])


def unrolled_weights(betas) -> np.ndarray:
    """``w_j = beta_j * prod_{c>j} (1 - beta_c)``; the first weight is the residual."""
    betas = [float(b) for b in betas]
    if any(not (0.0 <= b <= 1.0) or math.isnan(b) for b in betas):
        raise InvariantError(f"stage weights must lie in [0, 1], got {betas}")
    C = len(betas)
    w = np.empty(C)
    tail = 1.0
    for j in range(C - 1, 0, -1):
        w[j] = betas[j] * tail
        tail *= 1.0 - betas[j]
    w[0] = max(1.0 - float(np.sum(w[1:])), 0.0) if C > 1 else 1.0
    return w


def effective_weights(bf: BoostedFlow) -> np.ndarray:
    return unrolled_weights(bf.stage_weights)


def _log_weights(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def mixture_logpdf(archs, values_list, log_w, x):
    """Traceable mixture log-density by log-sum-exp over components."""
    terms = [flows.flow_log_density(a, v, x) + lw for a, v, lw in zip(archs, values_list, log_w)]
    return logsumexp(jnp.stack(terms, axis=0), axis=0)


def mixture_log_density(bf: BoostedFlow, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w = effective_weights(bf)
    terms = []
    for j, comp in enumerate(bf.components):
        try:
            terms.append(flows.log_density(comp, x) + _log_weights(w[j]))
        except NumericError as exc:
            raise NumericError(f"component {j}: {exc}", index=j) from exc
    terms = np.stack(terms)
    m = terms.max(axis=0)
    finite_m = np.where(np.isfinite(m), m, 0.0)
    return finite_m + np.log(np.sum(np.exp(terms - finite_m), axis=0))


def choose_components(weights, n: int, seed) -> np.ndarray:
    """Component index per row from a dedicated uniform stream."""
    u = np.random.default_rng(seed).random(n)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


def mixture_sample(bf: BoostedFlow, design, seed, return_labels: bool = False):
    """Transform the Gaussianized design rows, each through a randomly chosen component."""
    if isinstance(design, sampling.UnitDesign):
        z = sampling.to_gaussian(design).points
    else:
        z = np.atleast_2d(np.asarray(getattr(design, "points", design), dtype=np.float64))
    if z.shape[1] != bf.d:
        raise DimensionError(f"design width {z.shape[1]} does not match flow dimension {bf.d}")
    labels = choose_components(effective_weights(bf), z.shape[0], seed)
    x = np.empty_like(z)
    for j, comp in enumerate(bf.components):
        rows = labels == j
        if np.any(rows):
            x[rows] = flows.forward(comp, z[rows])[0]
    return (x, labels) if return_labels else x


# ---------------------------------------------------------------- new components


def _latents(scheme, n, d, seed, grouping=None):
    design = sampling.make_design(scheme, n, d, seed, grouping=grouping)
    return sampling.to_gaussian(design).points


def energy_parts(energy: Callable, x):
    """``(fidelity, prior)`` per sample; a plain array is all fidelity."""
    out = energy(x)
    if isinstance(out, tuple):
        return out
    return out, jnp.zeros_like(out)


def total_energy(energy: Callable, x):
    fid, prior = energy_parts(energy, x)
    return fid + prior


def fit_new_component(bf: BoostedFlow, energy: Callable, config: OptimConfig,
                      new_component: flows.FlowStack | None = None,
                      fd: flows.FdPenaltyConfig | None = None, scheme: str = "LHS",
                      grouping=None, entropy_weight: float = 1.0, warmup_steps: int = 0):
    """Append a component trained against the current functional gradient.

    The new component ``t`` minimizes ``E_t[U(x) + log q(x)]`` where ``q`` is the
    mixture with the new weight at its initial value ``1 / (C + 1)``; all
    earlier parameters stay frozen. ``energy`` maps a batch (n, d) to ``U``
    (or to a ``(fidelity, prior)`` pair) and must be traceable.

    With ``warmup_steps > 0`` the energy is scaled by ``min(1, (k+1)/warmup_steps)``
    at step ``k``. Early on the mixture term dominates, so the new component
    first spreads away from mass the mixture already covers instead of
    following the energy gradient into an occupied mode.

    Returns ``(BoostedFlow, history)``; each history record is a dict with
    fidelity, prior, entropy ``mean[log pi(z) - log q(x)]``, fd_penalty,
    total and log_base.
    """
    fd = fd or flows.FdPenaltyConfig()
    C = bf.n_components
    beta0 = 1.0 / (C + 1)
    if new_component is None:
        new_component = _reinit_like(bf.components[-1], seed=config.seed + 7919 * C)
    if new_component.d != bf.d:
        raise DimensionError("new component dimension differs from the mixture")
    candidate = BoostedFlow(bf.components + (new_component,), bf.stage_weights + (beta0,))
    log_w = tuple(float(v) for v in _log_weights(effective_weights(candidate)))
    prev_archs = tuple(c.arch for c in bf.components)
    prev_values = tuple(jnp.asarray(c.params.values) for c in bf.components)
    arch = new_component.arch
    d = bf.d
    use_fd = fd.weight > 0

    def loss(values, z, dirs, temp):
        x, logdet = flows.flow_forward(arch, values, z)
        log_base = flows.standard_normal_logpdf(z)
        log_new = log_base - logdet + log_w[-1]
        log_prev = [flows.flow_log_density(a, v, x) + lw for a, v, lw in zip(prev_archs, prev_values, log_w[:-1])]
        log_q = logsumexp(jnp.stack(log_prev + [log_new], axis=0), axis=0)
        fid, prior = energy_parts(energy, x)
        ent = entropy_weight * jnp.mean(log_base - log_q)
        if use_fd:
            f, i = flows.fd_lipschitz_terms(arch, values, z, dirs, fd.eps, fd.bidirectional)
            pen = fd.weight * (f + i)
        else:
            pen = jnp.zeros(())
        total = temp * (jnp.mean(fid) + jnp.mean(prior)) - ent + pen
        return total, (jnp.mean(fid), jnp.mean(prior), ent, pen, jnp.mean(log_base))

    vg = jax.jit(jax.value_and_grad(loss, has_aux=True))
    rng = np.random.default_rng(config.seed)

    def step_fn(values, step):
        z = _latents(scheme, config.batch_size, d, int(rng.integers(2**63 - 1)), grouping)
        dirs = flows.random_directions(config.batch_size, fd.n_directions, d, rng)
        temp = min(1.0, (step + 1) / warmup_steps) if warmup_steps > 0 else 1.0
        (total, aux), g = vg(jnp.asarray(values), jnp.asarray(z), jnp.asarray(dirs), temp)
        fid, prior, ent, pen, lb = (float(a) for a in aux)
        # the record always reports the untempered loss
        record = {"fidelity": fid, "prior": prior, "entropy": ent, "fd_penalty": pen,
                  "total": fid + prior - ent + pen, "log_base": lb}
        return total, g, record

    params, history, _ = run_adam(new_component.params, step_fn, config.steps, config.learning_rate)
    trained = flows.FlowStack(new_component.arch, params)
    return BoostedFlow(bf.components + (trained,), bf.stage_weights + (beta0,)), history


def _reinit_like(stack: flows.FlowStack, seed: int) -> flows.FlowStack:
    """Fresh zero-output-initialized parameters with the architecture of ``stack``."""
    from .diffcore import ParamVector, mlp_init

    parts, prefixes = [], []
    for k, layer in enumerate(stack.arch.layers):
        if isinstance(layer, flows.CouplingLayer):
            spec = dataclasses.replace(layer.conditioner, zero_init_last=True)
            parts.append(mlp_init(spec, seed * 100003 + k))
            prefixes.append(f"L{k}.")
    params = ParamVector.concat(parts, prefixes) if parts else ParamVector(np.zeros(0), ())
    return flows.FlowStack(stack.arch, params)


# ---------------------------------------------------------------- stage weights


@dataclass(frozen=True)
class WeightUpdateConfig:
    step_size: float = 0.01
    tolerance: float = 1e-4
    max_iters: int = 100
    mc_samples: int = 256
    scheme: str = "LHS"
    seed: int = 0

    def __post_init__(self):
        if not (self.step_size > 0 and self.tolerance > 0 and self.max_iters > 0 and self.mc_samples > 0):
            raise ConfigError("weight update settings must all be positive", field="weights")


@dataclass(frozen=True)
class WeightTrace:
    betas: tuple
    gradients: tuple
    std_errors: tuple
    converged: bool


def weight_step(beta: float, xi_new, xi_prev, step_size: float) -> tuple:
    """One projected SGD step; returns ``(new_beta, gradient, std_error)``."""
    xi_new = np.atleast_1d(np.asarray(xi_new, dtype=np.float64))
    xi_prev = np.atleast_1d(np.asarray(xi_prev, dtype=np.float64))
    diff = xi_new - xi_prev if xi_new.shape == xi_prev.shape else None
    g = float(xi_new.mean() - xi_prev.mean())
    n = xi_new.size
    if diff is not None and n > 1:
        se = float(diff.std(ddof=1) / math.sqrt(n))
    elif n > 1:
        se = float(math.sqrt(xi_new.var(ddof=1) / n + xi_prev.var(ddof=1) / xi_prev.size))
    else:
        se = 0.0
    return float(np.clip(beta - step_size * g, 0.0, 1.0)), g, se


def run_weight_updates(beta0: float, estimate: Callable, cfg: WeightUpdateConfig) -> WeightTrace:
    """Iterate ``beta <- clip(beta - lr * (E_new[xi] - E_prev[xi]), 0, 1)``.

    ``estimate(beta, s)`` returns per-sample ``(xi_new, xi_prev)`` at iteration
    ``s``. Stops once the step is smaller than ``cfg.tolerance``.
    """
    betas = [float(beta0)]
    grads, ses = [], []
    converged = False
    for s in range(cfg.max_iters):
        xi_new, xi_prev = estimate(betas[-1], s)
        beta, g, se = weight_step(betas[-1], xi_new, xi_prev, cfg.step_size)
        if not math.isfinite(g):
            raise NumericError(f"non-finite weight gradient at iteration {s}", index=s)
        betas.append(beta)
        grads.append(g)
        ses.append(se)
        if abs(betas[-1] - betas[-2]) < cfg.tolerance:
            converged = True
            break
    return WeightTrace(tuple(betas), tuple(grads), tuple(ses), converged)


def update_weight(bf: BoostedFlow, energy: Callable, cfg: WeightUpdateConfig | None = None,
                  grouping=None) -> tuple:
    """Refine the newest stage weight; returns ``(BoostedFlow, WeightTrace)``.

    Samples of the new component and of the previous mixture share the same
    latent design (common random numbers), so identical components give an
    exactly zero gradient.
    """
    cfg = cfg or WeightUpdateConfig()
    if bf.n_components < 2:
        raise ConfigError("update_weight needs at least two components")
    prev = bf.previous()
    new = bf.components[-1]
    archs = tuple(c.arch for c in bf.components)
    values = tuple(jnp.asarray(c.params.values) for c in bf.components)
    logpdf = jax.jit(lambda log_w, x: mixture_logpdf(archs, values, log_w, x))
    energy_j = jax.jit(lambda x: total_energy(energy, x))

    def estimate(beta, s):
        seed = cfg.seed * 1_000_003 + s
        design = sampling.make_design(cfg.scheme, cfg.mc_samples, bf.d, seed, grouping=grouping)
        x_new = flows.forward(new, sampling.to_gaussian(design).points)[0]
        x_prev = mixture_sample(prev, design, seed + 17)
        log_w = jnp.asarray(_log_weights(unrolled_weights(bf.stage_weights[:-1] + (beta,))))
        xi_new = np.asarray(logpdf(log_w, jnp.asarray(x_new)) + energy_j(jnp.asarray(x_new)))
        xi_prev = np.asarray(logpdf(log_w, jnp.asarray(x_prev)) + energy_j(jnp.asarray(x_prev)))
        return xi_new, xi_prev

    trace = run_weight_updates(bf.stage_weights[-1], estimate, cfg)
    return bf.with_weight(trace.betas[-1]), trace


def mixture_objective(bf: BoostedFlow, energy: Callable, n: int, seed: int, scheme: str = "SRS"):
    """MC estimate of ``E_q[log q + U]`` and its standard error."""
    design = sampling.make_design(scheme, n, bf.d, seed)
    x = mixture_sample(bf, design, seed + 1)
    vals = mixture_log_density(bf, x) + np.asarray(total_energy(energy, jnp.asarray(x)))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------- serialization

BOOST_MAGIC = b"FRBOOST\x01"
BOOST_VERSION = 1


def boosted_to_bytes(bf: BoostedFlow) -> bytes:
    buf = io.BytesIO()
    buf.write(BOOST_MAGIC)
    buf.write(struct.pack("<II", BOOST_VERSION, bf.n_components))
    buf.write(np.asarray(bf.stage_weights, dtype="<f8").tobytes())
    for comp in bf.components:
        blob = flows.flow_to_bytes(comp)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def boosted_from_bytes(blob: bytes) -> BoostedFlow:
    buf = io.BytesIO(blob)
    if buf.read(len(BOOST_MAGIC)) != BOOST_MAGIC:
        raise ConfigError("not a boosted-flow blob (bad magic)")
    version, C = struct.unpack("<II", buf.read(8))
    if version != BOOST_VERSION:
        raise ConfigError(f"unsupported boosted-flow version {version}")
    betas = tuple(np.frombuffer(buf.read(8 * C), dtype="<f8").astype(float))
    comps = []
    for _ in range(C):
        (n,) = struct.unpack("<Q", buf.read(8))
        comps.append(flows.flow_from_bytes(buf.read(n)))
    return BoostedFlow(tuple(comps), betas)
