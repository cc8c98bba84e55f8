"""Parameter storage, MLP conditioners, gradients and the Adam optimizer.

Gradients come from JAX reverse-mode autodiff in float64. Everything here is
functional: a :class:`ParamVector` is never mutated, optimizer steps return a
new state and a new parameter vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ConfigError, DimensionError, NumericError  # noqa: E402

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter store with a named segment layout.

    ``layout`` is a tuple of ``(name, shape)`` pairs; segments are stored
    back to back in ``values`` in layout order.
    """

    values: np.ndarray
    layout: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError(f"parameter values must be 1-D, got shape {values.shape}")
        expected = layout_size(self.layout)
        if self.layout and values.size != expected:
            raise DimensionError(
                f"layout describes {expected} values but {values.size} were given"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise NumericError(f"non-finite parameter at index {bad}", value=values[bad], index=bad)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple((str(n), tuple(int(s) for s in sh)) for n, sh in self.layout))

    def __len__(self):
        return self.values.size

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def offsets(self) -> dict:
        """Map segment name to ``(start, stop, shape)``."""
        out = {}
        start = 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = (start, start + size, shape)
            start += size
        return out

    def segment(self, name: str) -> np.ndarray:
        start, stop, shape = self.offsets()[name]
        return self.values[start:stop].reshape(shape)

    def unflatten(self) -> dict:
        return unpack(self.values, self.layout)

    @staticmethod
    def concat(parts: Sequence["ParamVector"], prefixes: Sequence[str]) -> "ParamVector":
        layout = []
        for prefix, part in zip(prefixes, parts):
            layout.extend((f"{prefix}{name}", shape) for name, shape in part.layout)
        values = np.concatenate([p.values for p in parts]) if parts else np.zeros(0)
        return ParamVector(values, tuple(layout))


def layout_size(layout) -> int:
    return int(sum(int(np.prod(shape, dtype=np.int64)) for _, shape in layout))


def unpack(values, layout) -> dict:
    """Slice a flat array (numpy or traced JAX) into named, reshaped segments."""
    out = {}
    start = 0
    for name, shape in layout:
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = values[start:start + size].reshape(shape)
        start += size
    return out


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    With ``residual`` set, consecutive pairs of hidden-to-hidden layers form
    blocks whose input is added back to their output.
    """

    layer_sizes: tuple
    activation: str = "tanh"
    zero_init_last: bool = True
    residual: bool = False

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least 2 layer sizes", field="layer_sizes")
        if any(s <= 0 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {sizes}", field="layer_sizes")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", field="activation")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_linear(self) -> int:
        return len(self.layer_sizes) - 1

    def layout(self) -> tuple:
        layout = []
        for i, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            layout.append((f"W{i}", (a, b)))
            layout.append((f"b{i}", (b,)))
        return tuple(layout)

    def n_params(self) -> int:
        return layout_size(self.layout())

    def residual_blocks(self) -> list:
        """Index pairs ``(i, i + 1)`` of linear layers wrapped by a skip connection."""
        if not self.residual:
            return []
        sizes = self.layer_sizes
        blocks = []
        i = 1
        while i + 1 <= self.n_linear - 2:
            if sizes[i] == sizes[i + 1] == sizes[i + 2]:
                blocks.append((i, i + 1))
                i += 2
            else:
                i += 1
        return blocks


def residual_mlp_spec(n_in: int, n_out: int, width: int = 64, n_blocks: int = 1,
                      activation: str = "tanh", zero_init_last: bool = True) -> MlpSpec:
    """Conditioner: input layer, ``n_blocks`` two-layer residual blocks, output layer."""
    sizes = (n_in, width) + (width,) * (2 * n_blocks) + (n_out,)
    return MlpSpec(sizes, activation, zero_init_last, residual=n_blocks > 0)


def mlp_init(spec: MlpSpec, seed: int) -> ParamVector:
    """Scaled-normal weights (std 1/sqrt(fan_in)), zero biases."""
    if not isinstance(spec, MlpSpec):
        raise ConfigError("mlp_init expects an MlpSpec")
    rng = np.random.default_rng(seed)
    parts = []
    last = spec.n_linear - 1
    for i, (a, b) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        if i == last and spec.zero_init_last:
            w = np.zeros((a, b))
        else:
            w = rng.standard_normal((a, b)) / math.sqrt(a)
        parts.append(w.ravel())
        parts.append(np.zeros(b))
    return ParamVector(np.concatenate(parts), spec.layout())


def _act(name):
    return jnp.tanh if name == "tanh" else jax.nn.relu


def mlp_apply(values, spec: MlpSpec, x):
    """Traceable forward pass on a batch ``x`` of shape (n, n_in) or (n_in,)."""
    p = unpack(values, spec.layout())
    act = _act(spec.activation)
    block_start = {a: b for a, b in spec.residual_blocks()}
    block_end = {b for _, b in spec.residual_blocks()}
    h = x
    skip = None
    last = spec.n_linear - 1
    for i in range(spec.n_linear):
        if i in block_start:
            skip = h
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        if i != last:
            z = act(z)
        if i in block_end:
            z = z + skip
        h = z
    return h


def mlp_forward(params: ParamVector, spec: MlpSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.n_in:
        raise DimensionError(f"input has length {x.shape[-1]}, network expects {spec.n_in}")
    if len(params) != spec.n_params():
        raise DimensionError(f"got {len(params)} parameters, spec needs {spec.n_params()}")
    return np.asarray(mlp_apply(jnp.asarray(params.values), spec, jnp.asarray(x)))


def value_and_grad(params: ParamVector, loss_fn: Callable) -> tuple:
    """Evaluate ``loss_fn(values)`` and its gradient w.r.t. the flat values."""
    value, g = jax.value_and_grad(loss_fn)(jnp.asarray(params.values))
    value = float(value)
    if not math.isfinite(value):
        raise NumericError(f"loss is not finite: {value}", value=value)
    return value, params.with_values(np.asarray(g))


def grad(params: ParamVector, loss_fn: Callable) -> ParamVector:
    """Gradient of a scalar ``loss_fn`` of the flat parameter array."""
    return value_and_grad(params, loss_fn)[1]


def finite_difference_grad(fn: Callable, x, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat float array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (float(fn(x + e)) - float(fn(x - e))) / (2.0 * step)
    return out


@dataclass(frozen=True)
class AdamState:
    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.step_count < 0:
            raise ConfigError("step_count must be non-negative", field="step_count")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", field="learning_rate")
        if np.shape(self.first_moment) != np.shape(self.second_moment):
            raise DimensionError("Adam moments have different lengths")

    @classmethod
    def init(cls, params, learning_rate: float = 1e-4, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        n = len(params)
        return cls(0, np.zeros(n), np.zeros(n), learning_rate, beta1, beta2, eps)


def adam_step(state: AdamState, params: ParamVector, grads) -> tuple:
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    g = np.asarray(getattr(grads, "values", grads), dtype=np.float64)
    p = params.values
    if not (g.shape == p.shape == np.shape(state.first_moment)):
        raise DimensionError(
            f"Adam length mismatch: params {p.shape}, grads {g.shape}, state {np.shape(state.first_moment)}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_p = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(t, m, v, state.learning_rate, state.beta1, state.beta2, state.eps)
    return new_state, params.with_values(new_p)


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0", field="steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", field="learning_rate")


def run_adam(params: ParamVector, step_fn: Callable, steps: int, learning_rate: float,
             state: AdamState | None = None):
    """Minimize with Adam.

    ``step_fn(values, step)`` returns ``(loss, grad, record)`` where ``record``
    is appended to the history. A non-finite loss or gradient raises
    :class:`TrainingError` naming the step and the last finite record.
    """
    from .errors import TrainingError

    state = state or AdamState.init(params, learning_rate)
    history = []
    for step in range(steps):
        loss, g, record = step_fn(params.values, step)
        loss = float(loss)
        g = np.asarray(g)
        if not math.isfinite(loss) or not np.all(np.isfinite(g)):
            last = history[-1] if history else None
            raise TrainingError(
                f"training diverged at step {step} (loss={loss})", step=step, last_finite=last
            )
        history.append(record)
        state, params = adam_step(state, params, g)
    return params, history, state
