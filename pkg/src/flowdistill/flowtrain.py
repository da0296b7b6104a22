"""ReFlow pretraining of a velocity model and explicit-Euler sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .analytic import GaussianMixture, gmm_sample
from .nets import TimeDistribution, VectorFieldNet
from .optim import EMA, Adam
from .tape import Node, Tape

logger = logging.getLogger(__name__)

__all__ = [
    "NumericalAbort",
    "PretrainConfig",
    "PretrainResult",
    "SampleTrajectory",
    "euler_sample",
    "pretrain",
    "reflow_loss",
    "reflow_loss_from",
]


class NumericalAbort(RuntimeError):
    """Training or sampling produced a non-finite value."""

    def __init__(self, message: str, step: int | None = None, what: str | None = None):
        super().__init__(message)
        self.step = step
        self.what = what


@dataclass
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    betas: tuple = (0.0, 0.999)
    ema_decay: float = 0.999
    time: TimeDistribution = field(default_factory=TimeDistribution)
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.time, dict):
            self.time = TimeDistribution(**self.time)
        self.betas = tuple(float(b) for b in self.betas)
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


def reflow_loss_from(tape: Tape, field_fn, x0: np.ndarray, x1: np.ndarray, t: np.ndarray) -> Node:
    """Mean of ``||v(x_t, t) - (x_1 - x_0)||^2`` for given draws."""
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    v = field_fn(tape.constant(xt), t)
    resid = tape.sub(v, tape.constant(x1 - x0))
    return tape.mean(tape.sum(tape.square(resid), axis=1))


def reflow_loss(net: VectorFieldNet, x0_batch, rng: np.random.Generator, tdist: TimeDistribution, tape: Tape | None = None):
    """Build the ReFlow regression loss for ``net`` on one batch.

    Returns ``(tape, loss_node, bound_net)``; call ``tape.backward(loss)``
    and read gradients for ``bound_net.param_nodes``.
    """
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    tape = tape or Tape()
    bound = net.bind(tape)
    x1 = rng.standard_normal(x0.shape)
    t = tdist.sample(x0.shape[0], rng)
    return tape, reflow_loss_from(tape, bound, x0, x1, t), bound


@dataclass
class PretrainResult:
    net: VectorFieldNet
    ema: VectorFieldNet
    history: list = field(default_factory=list)
    steps: int = 0


def pretrain(
    q0,
    cfg: PretrainConfig,
    net: VectorFieldNet | None = None,
    probe=None,
    callback=None,
) -> PretrainResult:
    """Fit a velocity model to ``q0`` with the ReFlow objective.

    Parameters
    ----------
    q0 : GaussianMixture or array of shape (n, d)
        Data source; arrays are resampled with replacement per batch.
    cfg : PretrainConfig
    net : VectorFieldNet, optional
        Starting network; a fresh one (zero final layer) is seeded from
        ``cfg.seed`` when omitted. Trained in place.
    probe : callable, optional
        ``probe(ema_net) -> float`` evaluated at every log row.
    callback : callable, optional
        ``callback(row)`` per log row, e.g. to stream a CSV.
    """
    rng = np.random.default_rng(cfg.seed)
    if isinstance(q0, GaussianMixture):
        dim = q0.dim
        draw = lambda n: gmm_sample(q0, n, rng)  # noqa: E731
    else:
        data = np.atleast_2d(np.asarray(q0, dtype=np.float64))
        dim = data.shape[1]
        draw = lambda n: data[rng.integers(0, data.shape[0], size=n)]  # noqa: E731
    if net is None:
        net = VectorFieldNet(dim).init(np.random.default_rng([cfg.seed, 1]))
    opt = Adam(net.params, lr=cfg.lr, betas=cfg.betas)
    ema = EMA(net.params, cfg.ema_decay)
    history = []
    for step in range(1, cfg.steps + 1):
        tape, loss, bound = reflow_loss(net, draw(cfg.batch_size), rng, cfg.time)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalAbort(f"reflow loss is {value} at step {step}", step=step, what="reflow")
        grads = tape.backward(loss)
        opt.step([grads[p] for p in bound.param_nodes])
        ema.update(net.params)
        if step % cfg.log_every == 0 or step == cfg.steps:
            ema_net = _with_params(net, ema.shadow)
            row = {"step": step, "loss": value}
            if probe is not None:
                row["field_mse"] = float(probe(ema_net))
            history.append(row)
            logger.info("pretrain step %d loss %.5f", step, value)
            if callback is not None:
                callback(row)
    return PretrainResult(net, _with_params(net, ema.shadow), history, cfg.steps)


def _with_params(net: VectorFieldNet, params: list[np.ndarray]) -> VectorFieldNet:
    out = net.copy()
    for dst, src in zip(out.params, params):
        dst[...] = src
    return out


@dataclass
class SampleTrajectory:
    times: np.ndarray
    states: np.ndarray


def euler_sample(field, n: int, steps: int, rng: np.random.Generator, return_trajectory: bool = False, z=None):
    """Integrate ``dx/dt = v(x, t)`` from t = 1 (standard normal) to t = 0.

    ``field`` is anything with ``velocity(x, t)``: a :class:`VectorFieldNet`
    or an analytic field. Uses ``steps`` uniform explicit-Euler steps
    ``x <- x - dt * v(x, t)``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dim = field.dim
    x = rng.standard_normal((n, dim)) if z is None else np.array(z, dtype=np.float64)
    times = 1.0 - np.arange(steps + 1) / steps
    states = [x] if return_trajectory else None
    for i in range(steps):
        dt = times[i] - times[i + 1]
        x = x - dt * field.velocity(x, times[i])
        if not np.all(np.isfinite(x)):
            raise NumericalAbort(f"non-finite state at Euler step {i}", step=i, what="euler")
        if return_trajectory:
            states.append(x)
    if return_trajectory:
        return x, SampleTrajectory(times, np.stack(states))
    return x
