"""Variational posterior fitting for imaging inverse problems.

The loss for a flow ``T`` pushed from latent ``z ~ N(0, I)`` is

    fidelity + prior - entropy (+ weighted FD Lipschitz penalty)

with ``fidelity = mean ||y - F(T(z))||^2 / (2 sigma^2)``, ``prior = lambda *
mean omega(T(z))`` and, for a single flow, ``entropy = mean log|det dT/dz|``.
For a boosted mixture the entropy is ``mean[log pi(z) - log q(x)]``; ``log
pi(z)`` is reported separately as ``log_base`` so both conventions can be
reconstructed.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from . import boosting, flows, sampling
from .diffcore import OptimConfig, run_adam
from .errors import ConfigError, DimensionError, NumericError
from .forward_ops import ForwardOperator, ImageDensity
from .io import atomic_write_text
from .metrics import PosteriorSamples

REGULARIZERS = ("none", "l1", "tv", "l1+tv", "l2")


# ---------------------------------------------------------------- regularizers


def l1_reg(image) -> float:
    return float(np.sum(np.abs(np.asarray(image, dtype=np.float64))))


def tv_reg(image) -> float:
    """Anisotropic TV with forward differences and no wraparound."""
    img = np.atleast_2d(np.asarray(image, dtype=np.float64))
    return float(np.abs(np.diff(img, axis=1)).sum() + np.abs(np.diff(img, axis=0)).sum())


def _batch_reg(kind, x, shape):
    """Per-row regularizer values for a batch of flattened images (traceable)."""
    if kind == "none":
        return jnp.zeros(x.shape[0])
    out = jnp.zeros(x.shape[0])
    if kind in ("l1", "l1+tv"):
        out = out + jnp.sum(jnp.abs(x), axis=1)
    if kind in ("tv", "l1+tv"):
        img = x.reshape((x.shape[0],) + tuple(shape))
        if img.ndim == 2:
            img = img[:, None, :]
        out = out + jnp.sum(jnp.abs(jnp.diff(img, axis=2)), axis=(1, 2))
        out = out + jnp.sum(jnp.abs(jnp.diff(img, axis=1)), axis=(1, 2))
    if kind == "l2":
        out = out + jnp.sum(x ** 2, axis=1)
    return out


# ---------------------------------------------------------------- targets


@dataclass(frozen=True)
class InverseProblem:
    """Measurement ``y = F(x) + noise`` with Gaussian noise of std ``noise_sigma``.

    ``positive`` maps flow outputs through softplus so pixels stay
    non-negative. ``ground_truth`` is only used for evaluation.
    """

    forward_op: ForwardOperator
    measurement: np.ndarray
    noise_sigma: float
    regularizer: str = "none"
    reg_weight: float = 0.0
    ground_truth: np.ndarray | None = None
    positive: bool = False

    def __post_init__(self):
        y = np.asarray(self.measurement)
        y = y.astype(np.complex128) if np.iscomplexobj(y) else y.astype(np.float64)
        y = y.ravel()
        if self.forward_op.kind == "image_energy":
            raise ConfigError("use DensityTarget for image-defined densities", field="forward_op")
        if y.size != self.forward_op.output_length:
            raise DimensionError(
                f"measurement has length {y.size}, operator produces {self.forward_op.output_length}"
            )
        if not (self.noise_sigma > 0):
            raise ConfigError("noise_sigma must be > 0", field="sigma")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}", field="omega")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be >= 0", field="lambda")
        y.setflags(write=False)
        object.__setattr__(self, "measurement", y)

    @property
    def d(self) -> int:
        return self.forward_op.input_size

    @property
    def image_shape(self) -> tuple:
        return tuple(self.forward_op.input_shape)

    @property
    def output(self):
        return "softplus" if self.positive else None

    def energy_terms(self, x):
        """Per-row ``(fidelity, prior)`` for a batch (n, d); traceable."""
        r = jnp.asarray(self.measurement) - self.forward_op.apply(x)
        fid = jnp.sum(jnp.real(r * jnp.conj(r)), axis=1) / (2.0 * self.noise_sigma ** 2)
        prior = self.reg_weight * _batch_reg(self.regularizer, x, self.image_shape)
        return fid, prior


@dataclass(frozen=True)
class DensityTarget:
    """Fit a flow to an unnormalized density; ``fidelity`` is ``-log p(x)``."""

    log_prob: Callable
    d: int
    output: str | None = None
    image_shape: tuple | None = None
    ground_truth: np.ndarray | None = None

    def energy_terms(self, x):
        e = -self.log_prob(x)
        return e, jnp.zeros_like(e)


def image_density_target(density: ImageDensity) -> DensityTarget:
    """2-D target on the unit square; flow outputs pass through a sigmoid."""
    return DensityTarget(density.log_prob, 2, output="sigmoid")


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class FlowConfig:
    kind: str = "rq_spline"
    n_steps: int = 6
    layers_per_step: int = 4
    hidden: int = 64
    n_blocks: int = 1
    spline_bins: int = 8
    tail_bound: float = 3.0
    s_max: float = 3.0
    activation: str = "tanh"

    def build(self, d: int, output=None, seed: int = 0) -> flows.FlowStack:
        return flows.build_flow(d, self.kind, self.n_steps, self.layers_per_step, self.hidden,
                                self.n_blocks, self.spline_bins, self.tail_bound, self.s_max,
                                self.activation, True, output, seed)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    scheme: str = "LPSS"
    grouping: sampling.PssGrouping | None = None
    learning_rate: float = 1e-4
    flow: FlowConfig = field(default_factory=FlowConfig)
    fd: flows.FdPenaltyConfig = field(default_factory=flows.FdPenaltyConfig)
    stages: int = 1
    component_steps: int | None = None
    warmup_steps: int = 0
    weights: boosting.WeightUpdateConfig = field(default_factory=boosting.WeightUpdateConfig)
    entropy_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0", field="steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1", field="stages")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", field="learning_rate")
        sampling.check_scheme(self.scheme)


@dataclass(frozen=True)
class LossBreakdown:
    fidelity: float
    prior: float
    entropy: float
    fd_penalty: float
    total: float
    log_base: float = 0.0
    step: int = 0
    stage: int = 1

    @classmethod
    def from_record(cls, rec: dict, step: int, stage: int) -> "LossBreakdown":
        return cls(rec["fidelity"], rec["prior"], rec["entropy"], rec["fd_penalty"], rec["total"],
                   rec.get("log_base", 0.0), step, stage)


# ---------------------------------------------------------------- loss evaluation


def _latent_points(latent, d):
    z = getattr(latent, "points", latent)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != d:
        raise DimensionError(f"latent width {z.shape[1]} does not match model dimension {d}")
    return z


def _check_rows(x, what):
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite {what} for sample {i}", index=i)


def total_loss(model, problem, latent, fd: flows.FdPenaltyConfig | None = None,
               seed: int = 0, entropy_weight: float = 1.0) -> LossBreakdown:
    """Evaluate the loss terms on a latent batch (a LatentBatch or an (n, d) array)."""
    model_d = model.d
    z = _latent_points(latent, model_d)
    if problem.d != model_d:
        raise DimensionError(f"problem has {problem.d} unknowns, model has {model_d}")
    log_base = np.asarray(flows.standard_normal_logpdf(jnp.asarray(z)))
    if isinstance(model, boosting.BoostedFlow) and model.n_components == 1:
        model = model.components[0]
    if isinstance(model, flows.FlowStack):
        x, logdet = flows.forward(model, z)
        _check_rows(x, "forward output")
        ent = float(np.mean(logdet))
        stack = model
    else:
        x = boosting.mixture_sample(model, z, [seed, 1])
        _check_rows(x, "forward output")
        ent = float(np.mean(log_base - boosting.mixture_log_density(model, x)))
        stack = model.components[-1]
    fid, prior = problem.energy_terms(jnp.asarray(x))
    fid = np.asarray(fid)
    prior = np.asarray(prior)
    _check_rows(np.stack([fid, prior], axis=1), "loss term")
    pen = 0.0
    if fd is not None and fd.weight > 0:
        pen = fd.weight * flows.fd_lipschitz_penalty(stack, z, fd, seed)
    ent *= entropy_weight
    total = float(fid.mean() + prior.mean() - ent + pen)
    return LossBreakdown(float(fid.mean()), float(prior.mean()), ent, pen, total, float(log_base.mean()))


def loss_estimate_variance(model, problem, scheme: str, n: int, replicates: int, seed: int = 0,
                           grouping=None) -> float:
    """Variance over replicate latent designs of the batch loss estimate (model fixed)."""
    totals = np.empty(replicates)
    for r in range(replicates):
        design = sampling.make_design(scheme, n, model.d, seed * 1_000_003 + r, grouping=grouping)
        totals[r] = total_loss(model, problem, sampling.to_gaussian(design), seed=r).total
    return float(totals.var(ddof=1))


# ---------------------------------------------------------------- training


def _single_flow_step(arch, problem, fd, entropy_weight):
    use_fd = fd.weight > 0

    def loss(values, z, dirs):
        x, logdet = flows.flow_forward(arch, values, z)
        fid, prior = problem.energy_terms(x)
        ent = entropy_weight * jnp.mean(logdet)
        if use_fd:
            f, i = flows.fd_lipschitz_terms(arch, values, z, dirs, fd.eps, fd.bidirectional)
            pen = fd.weight * (f + i)
        else:
            pen = jnp.zeros(())
        total = jnp.mean(fid) + jnp.mean(prior) - ent + pen
        lb = jnp.mean(flows.standard_normal_logpdf(z))
        return total, (jnp.mean(fid), jnp.mean(prior), ent, pen, lb)

    return jax.jit(jax.value_and_grad(loss, has_aux=True))


def _design_seed(seed, stage, step):
    return (seed * 1_000_003 + stage) * 10_000_019 + step


def fit_posterior(problem, cfg: TrainConfig | None = None, model: flows.FlowStack | None = None):
    """Train a flow (and, for ``cfg.stages > 1``, boosted components) on ``problem``.

    Every optimizer step draws a fresh latent design from ``cfg.scheme``.
    Returns ``(model, history)`` where ``model`` is a FlowStack for one stage
    and a BoostedFlow otherwise, and ``history`` is a list of LossBreakdown.
    A non-finite loss raises TrainingError with the step index.
    """
    cfg = cfg or TrainConfig()
    d = problem.d
    output = getattr(problem, "output", None)
    stack = model or cfg.flow.build(d, output, seed=cfg.seed)
    if stack.d != d:
        raise DimensionError(f"model dimension {stack.d} does not match problem dimension {d}")
    history = []
    if cfg.steps > 0:
        vg = _single_flow_step(stack.arch, problem, cfg.fd, cfg.entropy_weight)
        dir_rng = np.random.default_rng([cfg.seed, 2])

        def step_fn(values, step):
            design = sampling.make_design(cfg.scheme, cfg.batch_size, d, _design_seed(cfg.seed, 1, step),
                                          grouping=cfg.grouping)
            z = sampling.to_gaussian(design).points
            dirs = flows.random_directions(cfg.batch_size, cfg.fd.n_directions, d, dir_rng)
            (total, aux), g = vg(jnp.asarray(values), jnp.asarray(z), jnp.asarray(dirs))
            fid, prior, ent, pen, lb = (float(a) for a in aux)
            return total, g, LossBreakdown(fid, prior, ent, pen, float(total), lb, step, 1)

        params, history, _ = run_adam(stack.params, step_fn, cfg.steps, cfg.learning_rate)
        stack = flows.FlowStack(stack.arch, params)
    if cfg.stages == 1:
        return stack, history

    bf = boosting.BoostedFlow.single(stack)
    energy = problem.energy_terms
    n_comp = cfg.component_steps if cfg.component_steps is not None else cfg.steps
    for stage in range(2, cfg.stages + 1):
        new = cfg.flow.build(d, output, seed=cfg.seed * 7 + stage)
        ocfg = OptimConfig(n_comp, cfg.learning_rate, cfg.batch_size, _design_seed(cfg.seed, stage, 0))
        bf, recs = boosting.fit_new_component(bf, energy, ocfg, new, cfg.fd, cfg.scheme, cfg.grouping,
                                              cfg.entropy_weight, cfg.warmup_steps)
        history.extend(LossBreakdown.from_record(r, k, stage) for k, r in enumerate(recs))
        wcfg = replace(cfg.weights, seed=_design_seed(cfg.seed, stage, 1))
        bf, _ = boosting.update_weight(bf, energy, wcfg, cfg.grouping)
    return bf, history


# ---------------------------------------------------------------- sampling


def posterior_sample(model, n: int, scheme: str = "SRS", seed: int = 0, grouping=None,
                     image_shape=None) -> PosteriorSamples:
    """Draw ``n`` samples through the model from a Gaussianized design; records log-densities."""
    if n < 1:
        raise ConfigError("n must be >= 1", field="n_samples")
    d = model.d
    design = sampling.make_design(scheme, n, d, seed, grouping=grouping)
    z = sampling.to_gaussian(design).points
    if isinstance(model, flows.FlowStack):
        x, logdet = flows.forward(model, z)
        logp = np.asarray(flows.standard_normal_logpdf(jnp.asarray(z))) - logdet
    else:
        x = boosting.mixture_sample(model, z, [seed, 1])
        logp = boosting.mixture_log_density(model, x)
    if image_shape is not None and int(np.prod(image_shape)) != d:
        raise DimensionError(f"image shape {image_shape} does not match dimension {d}")
    return PosteriorSamples(x, tuple(image_shape) if image_shape is not None else None, logp)


# ---------------------------------------------------------------- loss history I/O

HISTORY_COLUMNS = ("step", "fidelity", "prior", "entropy", "fd_penalty", "total")


def write_loss_history(history, path) -> None:
    """CSV with one row per step; steps are numbered consecutively across stages."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for i, b in enumerate(history):
        w.writerow([i] + [repr(float(getattr(b, c))) for c in HISTORY_COLUMNS[1:]])
    atomic_write_text(path, buf.getvalue())


def read_loss_history(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))


def moving_average(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def summarize_history(history) -> dict:
    totals = [b.total for b in history]
    return {"steps": len(history), "final_total": totals[-1] if totals else math.nan}
