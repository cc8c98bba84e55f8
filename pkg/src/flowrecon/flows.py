"""Invertible flows: coupling layers, permutations and their composition.

A :class:`FlowStack` pairs a hashable architecture (:class:`FlowArch`) with a
:class:`~flowrecon.diffcore.ParamVector`. The ``flow_*`` functions are pure and
traceable by JAX with the architecture as a static argument; the public
``forward``/``inverse``/``log_density`` wrappers add validation and return
numpy arrays.

Coupling conditioners see the full input multiplied by a binary mask and
predict parameters for every dimension; only the transformed half uses them.
Every coupling layer of a stack therefore has the same parameter shape and
the stack is evaluated with a single ``lax.scan``, which keeps compile time
independent of depth.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from functools import lru_cache, partial

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import (
    MlpSpec,
    OptimConfig,
    ParamVector,
    layout_size,
    mlp_apply,
    mlp_init,
    residual_mlp_spec,
    run_adam,
)
from .errors import ConfigError, DimensionError, NumericError

LOG_2PI = math.log(2.0 * math.pi)
MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(raw + DERIV_SHIFT) + MIN_DERIVATIVE == 1 at raw == 0
DERIV_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


@dataclass(frozen=True)
class CouplingLayer:
    """Transforms ``transformed`` dims with parameters predicted from ``conditioning`` dims.

    The conditioner maps the masked d-vector to ``d * params_per_dim``
    outputs. With an empty ``conditioning`` set (1-D flows) its input is all
    zeros, so the layer is an unconditional elementwise map.
    """

    kind: str
    transformed: tuple
    conditioning: tuple
    conditioner: MlpSpec
    spline_bins: int = 8
    tail_bound: float = 3.0
    s_max: float = 3.0

    def __post_init__(self):
        if self.kind not in ("affine", "rq_spline"):
            raise ConfigError(f"unknown coupling kind {self.kind!r}", field="kind")
        if not self.transformed:
            raise ConfigError("coupling layer must transform at least one dimension")
        if set(self.transformed) & set(self.conditioning):
            raise ConfigError("transformed and conditioning dimensions overlap")
        if self.kind == "rq_spline" and self.spline_bins < 2:
            raise ConfigError("spline_bins must be >= 2", field="spline_bins")
        d = len(self.transformed) + len(self.conditioning)
        if self.conditioner.n_in != d or self.conditioner.n_out != d * self.params_per_dim:
            raise ConfigError("conditioner sizes do not match the coupling layer")

    @property
    def params_per_dim(self) -> int:
        return 2 if self.kind == "affine" else 3 * self.spline_bins - 1

    def n_params(self) -> int:
        return self.conditioner.n_params()

    def signature(self):
        """Everything except the mask; equal signatures can share a scan."""
        return (self.kind, self.conditioner, self.spline_bins, self.tail_bound, self.s_max)


@dataclass(frozen=True)
class Permutation:
    perm: tuple

    def n_params(self) -> int:
        return 0


@dataclass(frozen=True)
class Elementwise:
    """Fixed output bijection: ``softplus`` onto (0, inf) or ``sigmoid`` onto (0, 1)."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("softplus", "sigmoid"):
            raise ConfigError(f"unknown elementwise layer {self.kind!r}")

    def n_params(self) -> int:
        return 0


@dataclass(frozen=True)
class FlowArch:
    d: int
    layers: tuple

    def __post_init__(self):
        for layer in self.layers:
            if isinstance(layer, CouplingLayer):
                dims = layer.transformed + layer.conditioning
                if sorted(dims) != list(range(self.d)):
                    raise ConfigError("coupling masks must partition the flow dimensions")
            elif isinstance(layer, Permutation):
                if sorted(layer.perm) != list(range(self.d)):
                    raise ConfigError("permutation must be a permutation of 0..d-1")

    @property
    def depth(self) -> int:
        return sum(isinstance(layer, CouplingLayer) for layer in self.layers)

    def layout(self) -> tuple:
        out = []
        for k, layer in enumerate(self.layers):
            if isinstance(layer, CouplingLayer):
                out.extend((f"L{k}.{name}", shape) for name, shape in layer.conditioner.layout())
        return tuple(out)

    def n_params(self) -> int:
        return layout_size(self.layout())

    def slices(self) -> list:
        """Per-layer ``(start, stop)`` into the flat parameter vector."""
        out, start = [], 0
        for layer in self.layers:
            n = layer.n_params()
            out.append((start, start + n))
            start += n
        return out


@dataclass(frozen=True)
class FlowStack:
    arch: FlowArch
    params: ParamVector

    def __post_init__(self):
        if len(self.params) != self.arch.n_params():
            raise DimensionError(
                f"flow needs {self.arch.n_params()} parameters, got {len(self.params)}"
            )

    @property
    def d(self) -> int:
        return self.arch.d

    @property
    def depth(self) -> int:
        return self.arch.depth

    def with_values(self, values) -> "FlowStack":
        return FlowStack(self.arch, self.params.with_values(values))


def checkerboard_masks(d: int, flip: bool):
    """``(transformed, conditioning)`` index tuples over flattened positions."""
    if d == 1:
        return (0,), ()
    even = tuple(range(0, d, 2))
    odd = tuple(range(1, d, 2))
    return (even, odd) if flip else (odd, even)


def build_flow(d: int, kind: str = "affine", n_steps: int = 6, layers_per_step: int = 4,
               hidden: int = 64, n_blocks: int = 1, spline_bins: int = 8,
               tail_bound: float = 3.0, s_max: float = 3.0, activation: str = "tanh",
               zero_init: bool = True, output: str | None = None, seed: int = 0) -> FlowStack:
    """Stack of ``n_steps * layers_per_step`` coupling layers.

    Masks alternate between odd and even flattened indices on every layer and
    a reversing permutation separates consecutive steps; one more reversal is
    appended when needed so a zero-initialized stack is exactly the identity.
    ``output`` appends a fixed softplus or sigmoid bijection.
    """
    if d < 1:
        raise ConfigError("flow dimension must be >= 1", field="d")
    if n_steps < 0 or layers_per_step < 1:
        raise ConfigError("n_steps must be >= 0 and layers_per_step >= 1", field="n_steps")
    if kind not in ("affine", "rq_spline"):
        raise ConfigError(f"unknown coupling kind {kind!r}", field="kind")
    per_dim = 2 if kind == "affine" else 3 * spline_bins - 1
    spec = residual_mlp_spec(d, d * per_dim, hidden, n_blocks, activation, zero_init)
    layers = []
    flip = False
    reverse = Permutation(tuple(range(d - 1, -1, -1)))
    for step in range(n_steps):
        if step > 0 and d > 1:
            layers.append(reverse)
        for _ in range(layers_per_step):
            transformed, conditioning = checkerboard_masks(d, flip)
            layers.append(CouplingLayer(kind, transformed, conditioning, spec, spline_bins,
                                        float(tail_bound), float(s_max)))
            flip = not flip
    if sum(isinstance(layer, Permutation) for layer in layers) % 2:
        layers.append(reverse)
    if output is not None:
        layers.append(Elementwise(output))
    arch = FlowArch(d, tuple(layers))
    parts, prefixes = [], []
    for k, layer in enumerate(layers):
        if isinstance(layer, CouplingLayer):
            parts.append(mlp_init(layer.conditioner, seed * 100003 + k))
            prefixes.append(f"L{k}.")
    params = ParamVector.concat(parts, prefixes) if parts else ParamVector(np.zeros(0), ())
    return FlowStack(arch, params)


def identity_flow(d: int, **kwargs) -> FlowStack:
    return build_flow(d, zero_init=True, **kwargs)


# ---------------------------------------------------------------- splines


def _spline_knots(uw, uh, ud, tail_bound):
    K = uw.shape[-1]
    w = MIN_BIN_WIDTH + (1.0 - MIN_BIN_WIDTH * K) * jax.nn.softmax(uw, axis=-1)
    h = MIN_BIN_HEIGHT + (1.0 - MIN_BIN_HEIGHT * K) * jax.nn.softmax(uh, axis=-1)
    zeros = jnp.zeros(uw.shape[:-1] + (1,), dtype=uw.dtype)
    cw = jnp.concatenate([zeros, jnp.cumsum(w, axis=-1)], axis=-1)
    ch = jnp.concatenate([zeros, jnp.cumsum(h, axis=-1)], axis=-1)
    cw = 2.0 * tail_bound * cw - tail_bound
    ch = 2.0 * tail_bound * ch - tail_bound
    cw = cw.at[..., 0].set(-tail_bound).at[..., -1].set(tail_bound)
    ch = ch.at[..., 0].set(-tail_bound).at[..., -1].set(tail_bound)
    ones = jnp.ones(uw.shape[:-1] + (1,), dtype=uw.dtype)
    deriv = jnp.concatenate(
        [ones, MIN_DERIVATIVE + jax.nn.softplus(ud + DERIV_SHIFT), ones], axis=-1
    )
    return cw, ch, deriv


def _gather(a, idx):
    return jnp.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def rq_spline(x, uw, uh, ud, tail_bound, inverse=False):
    """Monotone rational-quadratic spline on [-B, B], identity outside.

    ``uw``, ``uh`` have shape ``x.shape + (K,)`` and ``ud`` ``x.shape + (K-1,)``
    (unconstrained knot widths, heights and interior derivatives). Returns the
    output and the log-derivative of the direction evaluated.
    """
    cw, ch, deriv = _spline_knots(uw, uh, ud, tail_bound)
    inside = (x >= -tail_bound) & (x <= tail_bound)
    xc = jnp.clip(x, -tail_bound, tail_bound)
    knots = ch if inverse else cw
    idx = jnp.sum(xc[..., None] >= knots[..., 1:-1], axis=-1)
    x_k = _gather(cw, idx)
    w_k = _gather(cw, idx + 1) - x_k
    y_k = _gather(ch, idx)
    h_k = _gather(ch, idx + 1) - y_k
    d_k = _gather(deriv, idx)
    d_k1 = _gather(deriv, idx + 1)
    s_k = h_k / w_k
    c0 = d_k1 + d_k - 2.0 * s_k
    if not inverse:
        theta = (xc - x_k) / w_k
        t1 = theta * (1.0 - theta)
        den = s_k + c0 * t1
        out = y_k + h_k * (s_k * theta ** 2 + d_k * t1) / den
    else:
        dy = xc - y_k
        a = h_k * (s_k - d_k) + dy * c0
        b = h_k * d_k - dy * c0
        c = -s_k * dy
        disc = jnp.maximum(b ** 2 - 4.0 * a * c, 0.0)
        theta = (2.0 * c) / (-b - jnp.sqrt(disc))
        t1 = theta * (1.0 - theta)
        den = s_k + c0 * t1
        out = theta * w_k + x_k
    dnum = s_k ** 2 * (d_k1 * theta ** 2 + 2.0 * s_k * t1 + d_k * (1.0 - theta) ** 2)
    logd = jnp.log(dnum) - 2.0 * jnp.log(den)
    if inverse:
        logd = -logd
    # A bin with matching knots and unit end slopes is the identity up to
    # rounding. Return exactly x there (zero-initialized layers then add no
    # error) while keeping the spline's gradient via a zero-valued residual.
    ident = (x_k == y_k) & (w_k == h_k) & (jnp.abs(d_k - 1.0) < 1e-12) & (jnp.abs(d_k1 - 1.0) < 1e-12)
    out = jnp.where(ident, x + (out - jax.lax.stop_gradient(out)), out)
    logd = jnp.where(ident, logd - jax.lax.stop_gradient(logd), logd)
    out = jnp.where(inside, out, x)
    logd = jnp.where(inside, logd, 0.0)
    return out, logd


def rq_spline_transform(inputs, unnormalized_widths, unnormalized_heights,
                        unnormalized_derivatives, tail_bound=3.0, inverse=False):
    """Numpy entry point to :func:`rq_spline`; returns ``(outputs, log_derivatives)``."""
    out, logd = rq_spline(
        jnp.asarray(inputs, dtype=jnp.float64),
        jnp.asarray(unnormalized_widths, dtype=jnp.float64),
        jnp.asarray(unnormalized_heights, dtype=jnp.float64),
        jnp.asarray(unnormalized_derivatives, dtype=jnp.float64),
        float(tail_bound),
        inverse,
    )
    return np.asarray(out), np.asarray(logd)


# ---------------------------------------------------------------- layers


def _coupling_core(sig, values, v, tmask, inverse):
    kind, spec, bins, tail, s_max = sig
    d = v.shape[1]
    h = mlp_apply(values, spec, v * (1.0 - tmask))
    h = h.reshape(v.shape[0], d, -1)
    if kind == "affine":
        s = s_max * jnp.tanh(h[..., 0] / s_max) * tmask
        t = h[..., 1] * tmask
        if inverse:
            return (v - t) * jnp.exp(-s), -jnp.sum(s, axis=1)
        return v * jnp.exp(s) + t, jnp.sum(s, axis=1)
    out, logd = rq_spline(v, h[..., :bins], h[..., bins:2 * bins], h[..., 2 * bins:], tail, inverse)
    keep = tmask > 0
    return jnp.where(keep, out, v), jnp.sum(jnp.where(keep, logd, 0.0), axis=1)


def _tmask(layer: CouplingLayer, d):
    m = np.zeros(d)
    m[list(layer.transformed)] = 1.0
    return m


def _elementwise(layer: Elementwise, v, inverse):
    if layer.kind == "softplus":
        if inverse:
            z = v + jnp.log(-jnp.expm1(-v))
            return z, -jnp.sum(jax.nn.log_sigmoid(z), axis=1)
        return jax.nn.softplus(v), jnp.sum(jax.nn.log_sigmoid(v), axis=1)
    if inverse:
        z = jnp.log(v) - jnp.log1p(-v)
        return z, -jnp.sum(jax.nn.log_sigmoid(z) + jax.nn.log_sigmoid(-z), axis=1)
    x = jax.nn.sigmoid(v)
    return x, jnp.sum(jax.nn.log_sigmoid(v) + jax.nn.log_sigmoid(-v), axis=1)


def apply_layer(layer, values, v, inverse=False):
    """Apply one layer (or its inverse) to a batch; returns ``(v, logdet)``."""
    if isinstance(layer, CouplingLayer):
        return _coupling_core(layer.signature(), values, v, jnp.asarray(_tmask(layer, v.shape[1])), inverse)
    if isinstance(layer, Permutation):
        perm = np.asarray(layer.perm)
        order = np.argsort(perm) if inverse else perm
        return v[:, order], jnp.zeros(v.shape[0], dtype=v.dtype)
    return _elementwise(layer, v, inverse)


@lru_cache(maxsize=None)
def _scan_plan(arch: FlowArch):
    """Group the stack as (pre-permutation, coupling)* + final permutation + elementwise tail.

    Returns None when the couplings are not homogeneous or an elementwise
    layer is not at the end; those stacks are evaluated layer by layer.
    """
    d = arch.d
    ident = np.arange(d)
    pending = ident
    perms, masks, sigs = [], [], set()
    tail = []
    for layer in arch.layers:
        if tail and not isinstance(layer, Elementwise):
            return None
        if isinstance(layer, Permutation):
            pending = pending[np.asarray(layer.perm)]
        elif isinstance(layer, CouplingLayer):
            perms.append(pending)
            masks.append(_tmask(layer, d))
            sigs.add(layer.signature())
            pending = ident
        else:
            tail.append(layer)
    if len(sigs) != 1:
        return None
    sig = sigs.pop()
    return sig, np.stack(perms), np.stack(masks), pending, tuple(tail)


def _unrolled(arch, values, v, inverse):
    logdet = jnp.zeros(v.shape[0], dtype=v.dtype)
    pairs = list(zip(arch.layers, arch.slices()))
    for layer, (a, b) in (reversed(pairs) if inverse else pairs):
        v, ld = apply_layer(layer, values[a:b], v, inverse)
        logdet = logdet + ld
    return v, logdet


def flow_forward(arch: FlowArch, values, z):
    """``x = T(z)`` and ``sum_k log|det dT_k|`` per row (traceable)."""
    plan = _scan_plan(arch)
    if plan is None:
        return _unrolled(arch, values, z, False)
    sig, perms, masks, final, tail = plan
    L = perms.shape[0]
    stacked = values[:L * sig[1].n_params()].reshape(L, -1)

    def body(v, xs):
        vals, perm, mask = xs
        return _coupling_core(sig, vals, v[:, perm], mask, False)

    v, lds = jax.lax.scan(body, z, (stacked, jnp.asarray(perms), jnp.asarray(masks, dtype=z.dtype)))
    logdet = jnp.sum(lds, axis=0)
    v = v[:, final]
    for layer in tail:
        v, ld = _elementwise(layer, v, False)
        logdet = logdet + ld
    return v, logdet


def flow_inverse(arch: FlowArch, values, x):
    """``z = T^{-1}(x)`` and the inverse log-determinant per row (traceable)."""
    plan = _scan_plan(arch)
    if plan is None:
        return _unrolled(arch, values, x, True)
    sig, perms, masks, final, tail = plan
    L = perms.shape[0]
    stacked = values[:L * sig[1].n_params()].reshape(L, -1)
    logdet = jnp.zeros(x.shape[0], dtype=x.dtype)
    v = x
    for layer in reversed(tail):
        v, ld = _elementwise(layer, v, True)
        logdet = logdet + ld
    v = v[:, np.argsort(final)]
    inv_perms = np.argsort(perms, axis=1)

    def body(v, xs):
        vals, inv_perm, mask = xs
        v, ld = _coupling_core(sig, vals, v, mask, True)
        return v[:, inv_perm], ld

    v, lds = jax.lax.scan(body, v, (stacked, jnp.asarray(inv_perms), jnp.asarray(masks, dtype=x.dtype)),
                          reverse=True)
    return v, logdet + jnp.sum(lds, axis=0)


def standard_normal_logpdf(z):
    return -0.5 * jnp.sum(z ** 2, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def flow_log_density(arch: FlowArch, values, x):
    z, logdet_inv = flow_inverse(arch, values, x)
    return standard_normal_logpdf(z) + logdet_inv


_forward_jit = jax.jit(flow_forward, static_argnums=0)
_inverse_jit = jax.jit(flow_inverse, static_argnums=0)


def _as_batch(a, d, name):
    a = np.asarray(getattr(a, "points", a), dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != d:
        raise DimensionError(f"{name} must have shape (n, {d}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")
    return a


def _locate_nonfinite(stack: FlowStack, v, inverse):
    values = jnp.asarray(stack.params.values)
    pairs = list(enumerate(zip(stack.arch.layers, stack.arch.slices())))
    if inverse:
        pairs = pairs[::-1]
    v = jnp.asarray(v)
    for k, (layer, (a, b)) in pairs:
        v, ld = apply_layer(layer, values[a:b], v, inverse)
        bad = ~(jnp.all(jnp.isfinite(v), axis=1) & jnp.isfinite(ld))
        if bool(jnp.any(bad)):
            row = int(jnp.flatnonzero(bad)[0])
            raise NumericError(
                f"non-finite value after layer {k} ({'inverse' if inverse else 'forward'}), row {row}",
                index=k,
            )
    raise NumericError("non-finite flow output")


def forward(stack: FlowStack, z) -> tuple:
    """Map latent rows to samples; returns ``(x, logdet)`` as numpy arrays."""
    z = _as_batch(z, stack.d, "z")
    x, logdet = _forward_jit(stack.arch, jnp.asarray(stack.params.values), jnp.asarray(z))
    x, logdet = np.asarray(x), np.asarray(logdet)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(logdet))):
        _locate_nonfinite(stack, z, inverse=False)
    return x, logdet


def inverse(stack: FlowStack, x) -> tuple:
    x = _as_batch(x, stack.d, "x")
    z, logdet = _inverse_jit(stack.arch, jnp.asarray(stack.params.values), jnp.asarray(x))
    z, logdet = np.asarray(z), np.asarray(logdet)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(logdet))):
        _locate_nonfinite(stack, x, inverse=True)
    return z, logdet


def log_density(stack: FlowStack, x) -> np.ndarray:
    z, logdet_inv = inverse(stack, x)
    return np.asarray(standard_normal_logpdf(z)) + logdet_inv


def sample(stack: FlowStack, n: int, seed: int) -> np.ndarray:
    z = np.random.default_rng(seed).standard_normal((n, stack.d))
    return forward(stack, z)[0]


def roundtrip_error(stack: FlowStack, z, dtype=np.float64) -> np.ndarray:
    """Per-row max |T^{-1}(T(z)) - z|, optionally evaluated in reduced precision."""
    z = _as_batch(z, stack.d, "z")
    if dtype == np.float64:
        x, _ = forward(stack, z)
        back, _ = inverse(stack, x)
        return np.max(np.abs(back - z), axis=1)
    values = jnp.asarray(stack.params.values, dtype=dtype)
    zz = jnp.asarray(z, dtype=dtype)
    x, _ = flow_forward(stack.arch, values, zz)
    back, _ = flow_inverse(stack.arch, values, x)
    err = np.asarray(jnp.max(jnp.abs(back - zz), axis=1), dtype=np.float64)
    return np.where(np.isfinite(err), err, np.inf)


# ---------------------------------------------------------------- Lipschitz penalty


@dataclass(frozen=True)
class FdPenaltyConfig:
    eps: float = 1e-3
    n_directions: int = 1
    weight: float = 0.0
    bidirectional: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError("FD step eps must be positive", field="fd.eps")
        if self.n_directions < 1:
            raise ConfigError("n_directions must be >= 1", field="fd.n_directions")
        if self.weight < 0:
            raise ConfigError("FD penalty weight must be >= 0", field="fd.weight")


def random_directions(n: int, n_directions: int, d: int, seed) -> np.ndarray:
    """Unit vectors, shape (n, n_directions, d)."""
    v = np.random.default_rng(seed).standard_normal((n, n_directions, d))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@lru_cache(maxsize=None)
def core_arch(arch: FlowArch) -> FlowArch:
    """The stack without its trailing fixed elementwise layers (same parameters)."""
    layers = list(arch.layers)
    while layers and isinstance(layers[-1], Elementwise):
        layers.pop()
    return FlowArch(arch.d, tuple(layers))


def fd_lipschitz_estimate(fn, points, directions, eps):
    """``max_{x, nu} |fn(x + eps nu) - fn(x)| / eps`` for a batched map ``fn``.

    ``points`` is (n, d) and ``directions`` (n, m, d) unit vectors. Traceable.
    """
    n, m, d = directions.shape
    y0 = fn(points)
    y1 = fn((points[:, None, :] + eps * directions).reshape(n * m, d))
    diff = y1.reshape(n, m, -1) - y0[:, None, :]
    return jnp.max(jnp.sqrt(jnp.sum(diff ** 2, axis=-1))) / eps


def fd_lipschitz_terms(arch: FlowArch, values, batch, directions, eps, bidirectional=True):
    """Traceable finite-difference Lipschitz estimates of T and T^{-1}.

    ``directions`` has shape (n, m, d). Returns ``(forward_estimate,
    inverse_estimate)``; the inverse estimate is 0 when not bidirectional.
    The inverse is probed around the images ``T(batch)``. Fixed output
    bijections (softplus, sigmoid) are excluded: the penalty acts on the
    trainable part, and probing the inverse of a bounded output map could
    step outside its range.
    """
    arch = core_arch(arch)
    fwd = fd_lipschitz_estimate(lambda v: flow_forward(arch, values, v)[0], batch, directions, eps)
    if not bidirectional:
        return fwd, jnp.zeros(())
    x0, _ = flow_forward(arch, values, batch)
    inv = fd_lipschitz_estimate(lambda v: flow_inverse(arch, values, v)[0], x0, directions, eps)
    return fwd, inv


def fd_lipschitz_estimates(stack: FlowStack, batch, cfg: FdPenaltyConfig, seed=0,
                           directions=None) -> tuple:
    """``(forward, inverse)`` Lipschitz estimates over the batch points and directions.

    ``directions`` may be a single vector of length d (used for every point) or
    an (n, m, d) array; otherwise ``cfg.n_directions`` random unit vectors per
    point are drawn from ``seed``.
    """
    batch = _as_batch(batch, stack.d, "batch")
    n = batch.shape[0]
    if directions is None:
        directions = random_directions(n, cfg.n_directions, stack.d, seed)
    else:
        directions = np.asarray(directions, dtype=np.float64)
        if directions.ndim == 1:
            directions = np.broadcast_to(directions / np.linalg.norm(directions), (n, 1, stack.d))
    f, i = _fd_jit(stack.arch, jnp.asarray(stack.params.values), jnp.asarray(batch),
                   jnp.asarray(directions), float(cfg.eps), bool(cfg.bidirectional))
    return float(f), float(i)


_fd_jit = jax.jit(fd_lipschitz_terms, static_argnums=(0, 4, 5))


def fd_lipschitz_penalty(stack: FlowStack, batch, cfg: FdPenaltyConfig, seed=0,
                         directions=None) -> float:
    """Unweighted penalty: forward estimate plus (if bidirectional) inverse estimate.

    Training losses add ``cfg.weight`` times this value.
    """
    f, i = fd_lipschitz_estimates(stack, batch, cfg, seed, directions)
    return f + i


# ---------------------------------------------------------------- density fitting


@partial(jax.jit, static_argnums=(0, 5, 6, 8))
def _mle_value_and_grad(arch, values, data, latent, directions, eps, bidirectional, weight,
                        penalize=True):
    def loss(vals):
        nll = -jnp.mean(flow_log_density(arch, vals, data))
        if not penalize:
            return nll, (nll, jnp.zeros(()))
        f, i = fd_lipschitz_terms(arch, vals, latent, directions, eps, bidirectional)
        pen = f + i
        return nll + weight * pen, (nll, pen)

    (total, (nll, pen)), g = jax.value_and_grad(loss, has_aux=True)(values)
    return total, g, nll, pen


def fit_density_mle(stack: FlowStack, data, config: OptimConfig | None = None,
                    fd: FdPenaltyConfig | None = None) -> tuple:
    """Maximum-likelihood fit of ``stack`` to samples; returns ``(stack, loss_history)``.

    Each step uses a minibatch of ``config.batch_size`` rows (all rows when
    the data set is smaller) and, when ``fd.weight > 0``, adds the FD
    Lipschitz penalty evaluated at fresh standard-normal latent points.
    """
    config = config or OptimConfig()
    fd = fd or FdPenaltyConfig()
    data = _as_batch(data, stack.d, "data")
    if data.shape[0] < 2:
        raise ConfigError("density fitting needs at least 2 samples", field="data")
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, data.shape[0])
    data_j = jnp.asarray(data)

    def step_fn(values, step):
        rows = rng.choice(data.shape[0], size=bs, replace=False)
        latent = rng.standard_normal((bs, stack.d))
        dirs = random_directions(bs, fd.n_directions, stack.d, rng)
        total, g, nll, pen = _mle_value_and_grad(
            stack.arch, jnp.asarray(values), data_j[rows], jnp.asarray(latent),
            jnp.asarray(dirs), float(fd.eps), bool(fd.bidirectional), float(fd.weight),
            fd.weight > 0,
        )
        return total, g, float(total)

    params, history, _ = run_adam(stack.params, step_fn, config.steps, config.learning_rate)
    return FlowStack(stack.arch, params), history


# ---------------------------------------------------------------- serialization

FLOW_MAGIC = b"FRFLOW\x00\x01"
FLOW_VERSION = 1
_KIND_CODES = {"affine": 1, "rq_spline": 2}
_ACT_CODES = {"tanh": 1, "relu": 2}
_ELEMENTWISE_CODES = {"softplus": 1, "sigmoid": 2}


def _pack_dims(buf, dims):
    buf.write(struct.pack("<I", len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))


def _unpack_dims(buf):
    (n,) = struct.unpack("<I", buf.read(4))
    return tuple(struct.unpack(f"<{n}I", buf.read(4 * n)))


def flow_to_bytes(stack: FlowStack) -> bytes:
    """Little-endian blob: header, layer descriptors, then float64 parameters."""
    arch = stack.arch
    buf = io.BytesIO()
    buf.write(FLOW_MAGIC)
    buf.write(struct.pack("<III", FLOW_VERSION, arch.d, len(arch.layers)))
    for layer in arch.layers:
        if isinstance(layer, CouplingLayer):
            spec = layer.conditioner
            buf.write(struct.pack("<B", _KIND_CODES[layer.kind]))
            _pack_dims(buf, layer.transformed)
            _pack_dims(buf, layer.conditioning)
            _pack_dims(buf, spec.layer_sizes)
            buf.write(struct.pack("<BBB", _ACT_CODES[spec.activation], spec.zero_init_last, spec.residual))
            buf.write(struct.pack("<Idd", layer.spline_bins, layer.tail_bound, layer.s_max))
        elif isinstance(layer, Permutation):
            buf.write(struct.pack("<B", 10))
            _pack_dims(buf, layer.perm)
        else:
            buf.write(struct.pack("<BB", 20, _ELEMENTWISE_CODES[layer.kind]))
    values = np.ascontiguousarray(stack.params.values, dtype="<f8")
    buf.write(struct.pack("<Q", values.size))
    buf.write(values.tobytes())
    return buf.getvalue()


def flow_from_bytes(blob: bytes) -> FlowStack:
    buf = io.BytesIO(blob)
    if buf.read(len(FLOW_MAGIC)) != FLOW_MAGIC:
        raise ConfigError("not a flow blob (bad magic)")
    version, d, n_layers = struct.unpack("<III", buf.read(12))
    if version != FLOW_VERSION:
        raise ConfigError(f"unsupported flow blob version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    acts = {v: k for k, v in _ACT_CODES.items()}
    elems = {v: k for k, v in _ELEMENTWISE_CODES.items()}
    layers = []
    for _ in range(n_layers):
        (code,) = struct.unpack("<B", buf.read(1))
        if code in kinds:
            transformed = _unpack_dims(buf)
            conditioning = _unpack_dims(buf)
            sizes = _unpack_dims(buf)
            act, zero_last, residual = struct.unpack("<BBB", buf.read(3))
            bins, tail, s_max = struct.unpack("<Idd", buf.read(20))
            spec = MlpSpec(sizes, acts[act], bool(zero_last), bool(residual))
            layers.append(CouplingLayer(kinds[code], transformed, conditioning, spec, bins, tail, s_max))
        elif code == 10:
            layers.append(Permutation(_unpack_dims(buf)))
        elif code == 20:
            (e,) = struct.unpack("<B", buf.read(1))
            layers.append(Elementwise(elems[e]))
        else:
            raise ConfigError(f"unknown layer code {code} in flow blob")
    arch = FlowArch(d, tuple(layers))
    (n,) = struct.unpack("<Q", buf.read(8))
    values = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)
    if values.size != n:
        raise ConfigError("truncated flow blob")
    return FlowStack(arch, ParamVector(values, arch.layout()))


def save_flow(stack: FlowStack, path) -> None:
    from .io import atomic_write

    atomic_write(path, flow_to_bytes(stack))


def load_flow(path) -> FlowStack:
    with open(path, "rb") as fh:
        return flow_from_bytes(fh.read())
