"""Flow Generator Matching: distil a velocity field into a one-step generator.

Each outer step alternates

1. ``inner_steps`` updates of the online flow ``v_phi`` on the conditional
   flow-matching loss of generator samples (generator severed), then
2. one generator update on ``lambda1 * L1 + lambda2 * L2``, where the teacher
   and the online flow are evaluated with their parameters behind a
   stop-gradient but with ``x_t`` still differentiable.

``L1`` carries the sample-path part of the gradient of the intractable
field-matching objective; ``L2`` carries the part that differentiates the
generator-induced field, rewritten through the conditional field so that it
only needs samples.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .flowtrain import NumericalAbort
from .nets import OneStepGenerator, TimeDistribution, VectorFieldNet
from .optim import EMA, Adam
from .tape import Node, Tape

logger = logging.getLogger(__name__)

__all__ = [
    "DistillConfig",
    "DistillState",
    "FGMLosses",
    "distill",
    "distill_step",
    "fgm_l1",
    "fgm_l2",
    "fgm_losses",
    "init_generator",
    "online_flow_loss",
    "online_flow_loss_from",
]


@dataclass
class DistillConfig:
    steps: int = 10000
    batch_size: int = 1024
    lr_gen: float = 1e-4
    lr_flow: float = 1e-3
    betas: tuple = (0.0, 0.999)
    inner_steps: int = 1
    lambda1: float = 0.0
    lambda2: float = 1.0
    loss_scale: float = 1.0
    ema_decay: float = 0.9995
    ema_warmup: bool = True
    fgm_time: TimeDistribution = field(default_factory=lambda: TimeDistribution(t_min=0.02, t_max=0.98))
    flow_time: TimeDistribution = field(default_factory=lambda: TimeDistribution(t_min=0.02, t_max=0.98))
    t_star: float = 0.97
    c_in: float = 1.0
    c_skip: float = 1.0
    c_out: float | None = None
    c_noise: float | None = None
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        for name in ("fgm_time", "flow_time"):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, TimeDistribution(**getattr(self, name)))
        self.betas = tuple(float(b) for b in self.betas)
        if self.steps < 0 or self.inner_steps < 0:
            raise ValueError("steps and inner_steps must be >= 0")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be >= 1")
        if self.lr_gen <= 0 or self.lr_flow <= 0 or self.loss_scale <= 0:
            raise ValueError("learning rates and loss_scale must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


def init_generator(teacher: VectorFieldNet, t_star=0.97, c_in=1.0, c_skip=1.0, c_out=None, c_noise=None) -> OneStepGenerator:
    """One-step generator whose backbone is a deep copy of ``teacher``."""
    return OneStepGenerator(teacher.copy(), t_star=t_star, c_in=c_in, c_skip=c_skip, c_out=c_out, c_noise=c_noise)


def _interpolate(tape: Tape, x0: Node, eps: np.ndarray, t: np.ndarray) -> Node:
    """``(1 - t) x_0 + t eps`` with per-row ``t``."""
    return tape.add(tape.mul(x0, tape.constant((1.0 - t)[:, None])), tape.constant(t[:, None] * eps))


def _conditional(tape: Tape, xt: Node, x0: Node, t: np.ndarray) -> Node:
    return tape.mul(tape.sub(xt, x0), tape.constant(1.0 / t[:, None]))


def online_flow_loss_from(tape: Tape, gen_b, flow_b, z, eps, t) -> Node:
    """Conditional flow matching of ``v_phi`` on severed generator samples."""
    x0 = tape.stop_gradient(gen_b(tape.constant(z)))
    xt = _interpolate(tape, x0, eps, t)
    resid = tape.sub(flow_b(xt, t), _conditional(tape, xt, x0, t))
    return tape.mean(tape.sum(tape.square(resid), axis=1))


@dataclass
class FGMLosses:
    l1: Node
    l2: Node
    x0: Node
    xt: Node


def fgm_losses(tape: Tape, gen_b, teacher_b, flow_b, z, eps, t) -> FGMLosses:
    """Both generator losses on one shared draw of ``(z, eps, t)``.

    ``teacher_b`` and ``flow_b`` must be bound with frozen parameters.
    """
    x0 = gen_b(tape.constant(z))
    xt = _interpolate(tape, x0, eps, t)
    u = teacher_b(xt, t)
    v = flow_b(xt, t)
    gap = tape.sub(u, v)
    l1 = tape.mean(tape.sum(tape.square(gap), axis=1))
    resid = tape.sub(v, _conditional(tape, xt, x0, t))
    l2 = tape.mean(tape.scale(tape.dot(gap, resid), 2.0))
    return FGMLosses(l1, l2, x0, xt)


@dataclass
class DistillState:
    """Generator (theta), online flow (phi) and a frozen teacher.

    ``teacher`` is a :class:`VectorFieldNet` or any analytic field handle with
    ``bind``/``velocity`` (for example :class:`~flowdistill.analytic.MixtureField`).
    """

    generator: OneStepGenerator
    flow: VectorFieldNet
    teacher: object
    step: int = 0
    history: list = field(default_factory=list)
    gen_opt: Adam | None = None
    flow_opt: Adam | None = None
    gen_ema: EMA | None = None

    @classmethod
    def create(cls, generator, teacher, cfg: DistillConfig, flow: VectorFieldNet | None = None) -> "DistillState":
        flow = generator.backbone.copy() if flow is None else flow
        return cls(
            generator,
            flow,
            teacher,
            gen_opt=Adam(generator.backbone.params, lr=cfg.lr_gen, betas=cfg.betas),
            flow_opt=Adam(flow.params, lr=cfg.lr_flow, betas=cfg.betas),
            gen_ema=EMA(generator.backbone.params, cfg.ema_decay, warmup=cfg.ema_warmup),
        )

    def ema_generator(self) -> OneStepGenerator:
        """Copy of the generator carrying the EMA weights."""
        out = self.generator.copy()
        if self.gen_ema is not None:
            for dst, src in zip(out.backbone.params, self.gen_ema.shadow):
                dst[...] = src
        return out

    def bind(self, tape: Tape, train: str):
        """Bind all three models; ``train`` is ``"theta"`` or ``"phi"``."""
        gen_b = self.generator.bind(tape, frozen=False, prefix="theta")
        flow_b = self.flow.bind(tape, frozen=(train != "phi"), prefix="phi")
        teacher_b = self.teacher.bind(tape, frozen=True, prefix="teacher")
        return gen_b, teacher_b, flow_b


def _draws(state: DistillState, batch_z, rng, tdist: TimeDistribution):
    z = np.atleast_2d(np.asarray(batch_z, dtype=np.float64))
    eps = rng.standard_normal(z.shape[:1] + (state.generator.dim,))
    t = tdist.sample(z.shape[0], rng)
    return z, eps, t


def online_flow_loss(state: DistillState, batch_z, rng, tdist: TimeDistribution | None = None):
    """Returns ``(tape, loss, bound)`` where ``bound`` is ``(gen, teacher, flow)``."""
    tdist = tdist or TimeDistribution(t_min=0.02, t_max=0.98)
    z, eps, t = _draws(state, batch_z, rng, tdist)
    tape = Tape()
    bound = state.bind(tape, train="phi")
    return tape, online_flow_loss_from(tape, bound[0], bound[2], z, eps, t), bound


def _generator_losses(state, batch_z, rng, tdist):
    tdist = tdist or TimeDistribution(t_min=0.02, t_max=0.98)
    z, eps, t = _draws(state, batch_z, rng, tdist)
    tape = Tape()
    bound = state.bind(tape, train="theta")
    return tape, fgm_losses(tape, *bound, z, eps, t), bound


def fgm_l1(state: DistillState, batch_z, rng, tdist: TimeDistribution | None = None):
    tape, losses, bound = _generator_losses(state, batch_z, rng, tdist)
    return tape, losses.l1, bound


def fgm_l2(state: DistillState, batch_z, rng, tdist: TimeDistribution | None = None):
    tape, losses, bound = _generator_losses(state, batch_z, rng, tdist)
    return tape, losses.l2, bound


def _finite(value: float, what: str, step: int) -> float:
    if not np.isfinite(value):
        raise NumericalAbort(f"{what} is {value} at distillation step {step}", step=step, what=what)
    return value


def distill_step(state: DistillState, cfg: DistillConfig, rng: np.random.Generator) -> dict:
    """One outer iteration; returns the step's loss values."""
    step = state.step + 1
    dim = state.generator.dim
    flow_loss = float("nan")
    for _ in range(cfg.inner_steps):
        tape, loss, (_, _, flow_b) = online_flow_loss(
            state, rng.standard_normal((cfg.batch_size, dim)), rng, cfg.flow_time
        )
        flow_loss = _finite(float(loss.value), "flow_loss", step)
        grads = tape.backward(loss)
        state.flow_opt.step([grads[p] for p in flow_b.param_nodes])

    tape, losses, (gen_b, _, _) = _generator_losses(
        state, rng.standard_normal((cfg.batch_size, dim)), rng, cfg.fgm_time
    )
    l1 = _finite(float(losses.l1.value), "l1", step)
    l2 = _finite(float(losses.l2.value), "l2", step)
    if cfg.lambda1 > 0 or cfg.lambda2 > 0:
        total = tape.add(tape.scale(losses.l1, cfg.lambda1), tape.scale(losses.l2, cfg.lambda2))
        grads = tape.backward(total, seed=cfg.loss_scale)
        state.gen_opt.step([grads[p] for p in gen_b.param_nodes])
    if state.gen_ema is not None:
        state.gen_ema.update(state.generator.backbone.params)
    state.step = step
    return {"step": step, "flow_loss": flow_loss, "l1": l1, "l2": l2}


def distill(state: DistillState, cfg: DistillConfig, probe=None, callback=None) -> DistillState:
    """Run ``cfg.steps`` outer iterations of :func:`distill_step`.

    ``probe(generator) -> dict`` adds metric columns to each log row; it
    receives the EMA generator.
    """
    if cfg.lambda1 == 0 and cfg.lambda2 == 0:
        warnings.warn("lambda1 = lambda2 = 0: the generator will not be updated", stacklevel=2)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.steps):
        row = distill_step(state, cfg, rng)
        if row["step"] % cfg.log_every == 0 or row["step"] == cfg.steps:
            if probe is not None:
                row.update(probe(state.ema_generator()))
            state.history.append(row)
            logger.info("distill step %d flow %.4g l1 %.4g l2 %.4g", row["step"], row["flow_loss"], row["l1"], row["l2"])
            if callback is not None:
                callback(row)
    return state
