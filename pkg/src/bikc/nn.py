"""Small multilayer perceptrons with hand-written backprop, AdamW and a
finite-difference gradient oracle.

Everything is float64. Networks act on row batches: an input of shape
``(..., input_dim)`` yields an output of shape ``(..., output_dim)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigurationError, ContractError, NumericalError


def make_rng(seed: int) -> np.random.Generator:
    """Seeded counter-based generator (Philox) used for every random draw."""
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_with_grad(x):
    s = _sigmoid(x)
    return x * s, s * (1.0 + x * (1.0 - s))


def _tanh_with_grad(x):
    t = np.tanh(x)
    return t, 1.0 - t * t


# name -> (f, x -> (f(x), f'(x)))
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (_silu, _silu_with_grad),
    "tanh": (np.tanh, _tanh_with_grad),
    "identity": (lambda x: x, lambda x: (x, np.ones_like(x))),
}


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"all MLP dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.output_dim]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1

    def shapes(self, prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes, in storage order."""
        out = []
        dims = self.dims
        for i in range(self.n_layers):
            out.append((f"{prefix}layer{i}.W", (dims[i], dims[i + 1])))
            out.append((f"{prefix}layer{i}.b", (dims[i + 1],)))
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["input_dim"], tuple(d["hidden_widths"]), d["output_dim"], d.get("activation", "silu"))


class ParamStore:
    """Ordered name -> float64 array mapping. Shapes are fixed at construction."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self._entries: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self._entries[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self._entries and self._entries[name].shape != value.shape:
            raise ConfigurationError(
                f"shape of {name} is fixed at {self._entries[name].shape}, got {value.shape}"
            )
        self._entries[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self._entries.items()]

    @property
    def total_count(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._entries.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self._entries.items()})

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamStore":
        """New store with this store's layout filled from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.total_count:
            raise ConfigurationError(f"expected {self.total_count} values, got {flat.size}")
        out, pos = {}, 0
        for k, v in self._entries.items():
            out[k] = flat[pos : pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return ParamStore(out)

    def update(self, other: "ParamStore") -> None:
        for k, v in other.items():
            self._entries[k] = np.array(v, dtype=np.float64)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._entries.values())

    def equals(self, other: "ParamStore") -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(np.array_equal(v, other[k]) for k, v in self._entries.items())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_mlp(spec: MlpSpec, seed: int | np.random.Generator = 0, prefix: str = "") -> ParamStore:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    entries = {}
    for name, shape in spec.shapes(prefix):
        entries[name] = glorot_uniform(rng, *shape) if name.endswith(".W") else np.zeros(shape)
    return ParamStore(entries)


def check_params(params: ParamStore, spec: MlpSpec, prefix: str = "") -> None:
    for name, shape in spec.shapes(prefix):
        if name not in params:
            raise ConfigurationError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ConfigurationError(f"{name} has shape {params[name].shape}, spec wants {shape}")


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each affine layer
    slopes: list[np.ndarray] = field(default_factory=list)  # activation derivatives of hidden layers
    lead_shape: tuple[int, ...] = ()


def _forward(params, spec, x, prefix, keep):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (spec.input_dim,):
        raise ConfigurationError(f"input has trailing dim {x.shape[-1:]}, spec wants {spec.input_dim}")
    lead = x.shape[:-1]
    h = x.reshape(-1, spec.input_dim)
    act, act_grad = ACTIVATIONS[spec.activation]
    cache = ForwardCache(lead_shape=lead) if keep else None
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        name = f"{prefix}layer{i}"
        if keep:
            cache.inputs.append(h)
        z = h @ params[f"{name}.W"] + params[f"{name}.b"]
        if not np.isfinite(z).all():
            raise NumericalError("non-finite activations", layer=name)
        if i < last:
            if keep:
                h, slope = act_grad(z)
                cache.slopes.append(slope)
            else:
                h = act(z)
        else:
            h = z
    return h.reshape(*lead, spec.output_dim), cache


def mlp_forward(params: ParamStore, spec: MlpSpec, x, prefix: str = "") -> np.ndarray:
    """Evaluate the network. Pure: identical arguments give bit-identical output."""
    return _forward(params, spec, x, prefix, keep=False)[0]


def mlp_forward_cached(params: ParamStore, spec: MlpSpec, x, prefix: str = ""):
    """Forward pass that also returns what :func:`mlp_backward` needs."""
    return _forward(params, spec, x, prefix, keep=True)


def mlp_backward(params: ParamStore, spec: MlpSpec, cache: ForwardCache, grad_out, prefix: str = ""):
    """Reverse-mode pass.

    Returns ``(grads, grad_input)`` where ``grads`` only holds this network's
    entries (named with ``prefix``) and ``grad_input`` has the input's shape.
    """
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, spec.output_dim)
    grads = {}
    for i in reversed(range(spec.n_layers)):
        name = f"{prefix}layer{i}"
        grads[f"{name}.W"] = cache.inputs[i].T @ g
        grads[f"{name}.b"] = g.sum(axis=0)
        g = g @ params[f"{name}.W"].T
        if i > 0:
            g = g * cache.slopes[i - 1]
    ordered = ParamStore({k: grads[k] for k, _ in spec.shapes(prefix)})
    return ordered, g.reshape(*cache.lead_shape, spec.input_dim)


def loss_gradient(params: ParamStore, spec: MlpSpec, inputs, loss_fn, prefix: str = ""):
    """Loss and parameter gradient for ``loss_fn`` composed with the network.

    ``loss_fn(outputs)`` must return ``(loss, dloss_doutputs)``.
    """
    out, cache = mlp_forward_cached(params, spec, inputs, prefix)
    loss, g_out = loss_fn(out)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss", layer="loss")
    grads, _ = mlp_backward(params, spec, cache, g_out, prefix)
    return float(loss), grads


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(fn: Callable[[ParamStore], float], params: ParamStore, h: float = 1e-5) -> ParamStore:
    """Central-difference gradient of ``fn`` at ``params``. Slow; for small nets."""
    base = params.copy()
    out = {}
    for name, value in base.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(base)
            flat[i] = orig - h
            fm = fn(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return ParamStore(out)


def max_relative_error(analytic: ParamStore, numeric: ParamStore, floor: float = 1e-5) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` over all entries.

    ``floor`` sits just above the central-difference round-off on O(1) losses
    (about 1e-10 at h=1e-5), so entries whose true gradient is below what the
    difference quotient can resolve are compared in absolute terms.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    m: ParamStore
    v: ParamStore
    step: int = 0
    lr0: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, **kw) -> "OptimState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), **kw)


def adamw_step(params: ParamStore, grads: ParamStore, state: OptimState, lr: float):
    """One decoupled-weight-decay Adam update, in place. Returns ``(params, state)``."""
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if params.shapes() != grads.shapes():
        raise ConfigurationError("gradient layout does not match parameters")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError("non-finite gradient", layer=name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params[name]
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_opt)
    return params, state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine anneal from ``lr0`` at step 0 to zero at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"need 0 <= step <= total_steps and total_steps >= 1, got {step}/{total_steps}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainSchedule:
    """Optimiser settings shared by every trainer.

    ``iters`` is used by the keypose and DDPM trainers; the consistency
    trainer takes its iteration count from ``CtConfig.total_iters``.
    """

    iters: int | None = None
    batch_size: int = 64
    lr0: float = 1e-4
    weight_decay: float = 1e-6
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(iters=self.iters, batch_size=self.batch_size, lr0=self.lr0,
                    weight_decay=self.weight_decay, seed=self.seed)
