"""Vector-field MLPs, the one-step generator wrapper and timestep densities."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tape import Node, Tape

__all__ = [
    "BoundField",
    "BoundGenerator",
    "OneStepGenerator",
    "TimeDistribution",
    "VectorFieldNet",
    "as_time_column",
    "field_forward",
    "generator_forward",
    "sample_time",
    "time_embed",
]

ACTIVATIONS = ("silu", "tanh")


def as_time_column(t, n: int) -> np.ndarray:
    """Broadcast a scalar or per-row time to shape ``(n,)``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(n, float(t))
    if t.shape != (n,):
        raise ValueError(f"time has shape {t.shape}, expected () or ({n},)")
    return t


def time_embed(t, n_freq: int) -> np.ndarray:
    """Sinusoidal time features ``[sin(2^j pi t)..., cos(2^j pi t)..., t]``.

    Returns shape ``(2 * n_freq + 1,)`` for scalar ``t`` and
    ``(n, 2 * n_freq + 1)`` for a vector of times.
    """
    t = np.asarray(t, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles), t[..., None]], axis=-1)


class VectorFieldNet:
    """MLP velocity model ``v(x, t)`` on ``R^dim``.

    The input is ``x`` concatenated with :func:`time_embed`.

    Parameters
    ----------
    dim : int
        Data dimension; also the output dimension.
    hidden : tuple of int
        Hidden layer widths.
    n_freq : int
        Number of sin/cos frequency pairs in the time embedding.
    activation : {"silu", "tanh"}
    """

    def __init__(self, dim: int = 2, hidden=(128, 128, 128), n_freq: int = 8, activation: str = "silu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freq = int(n_freq)
        self.activation = activation
        sizes = self.layer_sizes
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.params.append(np.zeros((fan_out, fan_in)))
            self.params.append(np.zeros(fan_out))

    @property
    def layer_sizes(self) -> list[int]:
        return [self.dim + 2 * self.n_freq + 1, *self.hidden, self.dim]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def arch(self) -> dict:
        return {
            "dim": self.dim,
            "hidden": list(self.hidden),
            "n_freq": self.n_freq,
            "activation": self.activation,
        }

    @classmethod
    def from_arch(cls, arch: dict) -> "VectorFieldNet":
        return cls(arch["dim"], tuple(arch["hidden"]), arch["n_freq"], arch["activation"])

    def init(self, rng: np.random.Generator, zero_final: bool = True) -> "VectorFieldNet":
        """He-style normal weights, zero biases; final layer zeroed by default."""
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w = self.params[2 * i]
            if i == n_layers - 1 and zero_final:
                w[...] = 0.0
            else:
                w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[1])
            self.params[2 * i + 1][...] = 0.0
        return self

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        offset = 0
        for p in self.params:
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def copy(self) -> "VectorFieldNet":
        return copy.deepcopy(self)

    def bind(self, tape: Tape, frozen: bool = False, prefix: str = "v") -> "BoundField":
        """Register parameters on ``tape``.

        With ``frozen=True`` every parameter is routed through a
        stop-gradient, so the net still appears in the gradient map but
        always with zero adjoint.
        """
        nodes = [tape.parameter(p, name=f"{prefix}{i}") for i, p in enumerate(self.params)]
        return BoundField(self, tape, nodes, frozen)

    def velocity(self, x, t) -> np.ndarray:
        return field_forward(self, x, t)


class BoundField:
    """A :class:`VectorFieldNet` whose parameters live on a specific tape."""

    def __init__(self, net: VectorFieldNet, tape: Tape, param_nodes: list[Node], frozen: bool):
        self.net = net
        self.tape = tape
        self.param_nodes = param_nodes
        self._weights = [tape.stop_gradient(p) for p in param_nodes] if frozen else param_nodes

    def __call__(self, x: Node, t) -> Node:
        tape, net = self.tape, self.net
        if x.shape[-1] != net.dim:
            raise ValueError(f"input dimension {x.shape[-1]} does not match net dim {net.dim}")
        if x.value.ndim == 1:
            emb = time_embed(float(np.asarray(t)), net.n_freq)
        else:
            emb = time_embed(as_time_column(t, x.shape[0]), net.n_freq)
        h = tape.concat([x, tape.constant(emb)])
        act = tape.silu if net.activation == "silu" else tape.tanh
        n_layers = len(self._weights) // 2
        for i in range(n_layers):
            h = tape.affine(self._weights[2 * i], h, self._weights[2 * i + 1])
            if i < n_layers - 1:
                h = act(h)
        return h


def field_forward(net: VectorFieldNet, x, t) -> np.ndarray:
    """Evaluate ``net`` at ``(x, t)`` without keeping the tape."""
    tape = Tape()
    return net.bind(tape, frozen=True)(tape.constant(x), t).value


@dataclass
class OneStepGenerator:
    """``g(z) = c_skip * z - c_out * v(c_in * z, c_noise)`` around a field backbone."""

    backbone: VectorFieldNet
    t_star: float = 0.97
    c_in: float = 1.0
    c_skip: float = 1.0
    c_out: float | None = None
    c_noise: float | None = None

    def __post_init__(self):
        if not 0.0 < self.t_star <= 1.0:
            raise ValueError(f"t_star must lie in (0, 1], got {self.t_star}")
        if self.c_out is None:
            self.c_out = self.t_star
        if self.c_noise is None:
            self.c_noise = self.t_star

    @property
    def dim(self) -> int:
        return self.backbone.dim

    def constants(self) -> dict:
        return {
            "t_star": self.t_star,
            "c_in": self.c_in,
            "c_skip": self.c_skip,
            "c_out": self.c_out,
            "c_noise": self.c_noise,
        }

    def bind(self, tape: Tape, frozen: bool = False, prefix: str = "g") -> "BoundGenerator":
        return BoundGenerator(self, self.backbone.bind(tape, frozen=frozen, prefix=prefix))

    def copy(self) -> "OneStepGenerator":
        return copy.deepcopy(self)

    def __call__(self, z) -> np.ndarray:
        return generator_forward(self, z)


class BoundGenerator:
    def __init__(self, gen: OneStepGenerator, backbone: BoundField):
        self.gen = gen
        self.backbone = backbone
        self.tape = backbone.tape
        self.param_nodes = backbone.param_nodes

    def __call__(self, z: Node) -> Node:
        g, tape = self.gen, self.tape
        v = self.backbone(tape.scale(z, g.c_in), g.c_noise)
        return tape.sub(tape.scale(z, g.c_skip), tape.scale(v, g.c_out))


def generator_forward(gen: OneStepGenerator, z) -> np.ndarray:
    tape = Tape()
    return gen.bind(tape, frozen=True)(tape.constant(z)).value


@dataclass
class TimeDistribution:
    """Timestep density on (0, 1).

    ``kind="uniform"`` draws uniformly on ``[t_min, t_max]``;
    ``kind="logit_normal"`` draws ``sigmoid(loc + scale * eps)`` and clips
    to ``[t_min, t_max]``. Samples never equal 0 or 1 exactly.
    """

    kind: str = "uniform"
    loc: float = 0.0
    scale: float = 1.0
    t_min: float = 1e-3
    t_max: float = 1.0 - 1e-3

    def __post_init__(self):
        if self.kind not in ("uniform", "logit_normal"):
            raise ValueError(f"unknown time distribution kind {self.kind!r}")
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ValueError(f"need 0 <= t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if self.kind == "logit_normal" and self.scale <= 0:
            raise ValueError("logit-normal scale must be positive")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            t = self.t_min + (self.t_max - self.t_min) * rng.random(n)
        else:
            t = 0.5 * (1.0 + np.tanh(0.5 * (self.loc + self.scale * rng.standard_normal(n))))
            t = np.clip(t, self.t_min, self.t_max)
        return np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "loc": self.loc, "scale": self.scale, "t_min": self.t_min, "t_max": self.t_max}


def sample_time(dist: TimeDistribution, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    return dist.sample(n, rng)
