"""Monte-Carlo checks of the flow product and gradient identities.

The vehicle is a :class:`~flowdistill.analytic.LinearGenerator`, the one
generator family whose induced field is known in closed form. Every check
draws one set of ``(z, eps)`` and evaluates both sides on it (common random
numbers); the pass criterion compares the mean paired difference with three
of its standard errors.

Standard errors come from equal-size chunks (batch means) wherever a side is
an autodiff gradient of a chunk-mean loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analytic import LinearGenerator, conditional_field, linear_generator_field
from .fgm import fgm_losses
from .tape import Tape

__all__ = [
    "IdentityReport",
    "TestFunctionSpec",
    "check_fixed_point",
    "check_full_gradient",
    "check_gradient_identity",
    "check_product_identity",
    "random_linear_generator",
]

SIGMAS = 3.0


@dataclass
class IdentityReport:
    """Both sides of an identity with standard errors.

    ``diff_se`` is the standard error of the paired difference
    ``lhs - rhs`` (the combined error under common random numbers).
    """

    name: str
    lhs: np.ndarray
    rhs: np.ndarray
    lhs_se: np.ndarray
    rhs_se: np.ndarray
    diff_se: np.ndarray
    n: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("lhs", "rhs", "lhs_se", "rhs_se", "diff_se"):
            setattr(self, key, np.atleast_1d(np.asarray(getattr(self, key), dtype=np.float64)))

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.lhs - self.rhs) <= SIGMAS * self.diff_se))

    @property
    def z_scores(self) -> np.ndarray:
        diff = np.abs(self.lhs - self.rhs)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(diff == 0, 0.0, diff / self.diff_se)

    @property
    def rel_error(self) -> np.ndarray:
        scale = np.maximum(np.abs(self.lhs), np.abs(self.rhs))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(scale == 0, 0.0, np.abs(self.lhs - self.rhs) / scale)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs.tolist(),
            "rhs": self.rhs.tolist(),
            "lhs_se": self.lhs_se.tolist(),
            "rhs_se": self.rhs_se.tolist(),
            "diff_se": self.diff_se.tolist(),
            "n": self.n,
            "passed": self.passed,
            "config": self.config,
        }


@dataclass
class TestFunctionSpec:
    """Test function ``f(x, theta)`` with values in ``R^d``.

    ``kind="affine"``: ``f(x) = M x + c``.
    ``kind="param"``: ``f(x, theta) = M x + c + tanh(A A^T x + b)``, depending
    on the generator parameters ``theta = (A, b)``.
    ``kind="zero"``: ``f = 0``.
    """

    __test__ = False  # not a pytest class

    kind: str
    M: np.ndarray | None = None
    c: np.ndarray | None = None

    @classmethod
    def random(cls, kind: str, dim: int, rng: np.random.Generator) -> "TestFunctionSpec":
        return cls(kind, rng.standard_normal((dim, dim)), rng.standard_normal(dim))

    def __call__(self, x: np.ndarray, gen: LinearGenerator) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(x)
        out = x @ self.M.T + self.c
        if self.kind == "param":
            out = out + np.tanh(x @ (gen.A @ gen.A.T).T + gen.b)
        elif self.kind != "affine":
            raise ValueError(f"unknown test function kind {self.kind!r}")
        if out.shape[-1] != gen.dim:
            raise ValueError("test function output dimension must equal the field dimension")
        return out


def random_linear_generator(dim: int, latent: int, rng: np.random.Generator, scale: float = 1.0) -> LinearGenerator:
    return LinearGenerator(scale * rng.standard_normal((dim, latent)), rng.standard_normal(dim))


def _mean_se(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over axis 0 (samples or chunk means)."""
    m = values.shape[0]
    return values.mean(axis=0), values.std(axis=0, ddof=1) / np.sqrt(m)


def _chunks(n: int, n_chunks: int) -> int:
    if n < n_chunks or n % n_chunks:
        raise ValueError(f"n={n} must be a positive multiple of n_chunks={n_chunks}")
    return n // n_chunks


def _draw(gen: LinearGenerator, n: int, rng: np.random.Generator):
    return rng.standard_normal((n, gen.latent_dim)), rng.standard_normal((n, gen.dim))


def check_product_identity(gen: LinearGenerator, f: TestFunctionSpec, t: float, n: int, rng: np.random.Generator) -> IdentityReport:
    """``E f^T v_theta(x_t)`` against ``E f^T u(x_t | x_0)`` on shared draws."""
    z, eps = _draw(gen, n, rng)
    x0 = gen.sample(z)
    xt = (1.0 - t) * x0 + t * eps
    fx = f(xt, gen)
    lhs = np.sum(fx * linear_generator_field(gen, xt, t), axis=1)
    rhs = np.sum(fx * conditional_field(xt, x0, t), axis=1)
    (lm, ls), (rm, rs), (_, ds) = _mean_se(lhs), _mean_se(rhs), _mean_se(lhs - rhs)
    return IdentityReport("product_identity", lm, rm, ls, rs, ds, n, {"t": t, "f": f.kind})


def _field_coeff_derivs(gen: LinearGenerator, t: float, h: float):
    """Central differences in theta of the field coefficients ``(J, c)``.

    The induced field is ``x J^T + c``, so ``dv/dtheta_p = x dJ_p^T + dc_p``
    exactly; differencing the two coefficients is the same as differencing
    the field at every ``x``, without re-evaluating it per sample.
    Returns ``dJ (P, d, d)`` and ``dc (P, d)``.
    """
    theta = gen.get_flat()
    d_jac = np.empty((theta.size, gen.dim, gen.dim))
    d_c = np.empty((theta.size, gen.dim))
    for p in range(theta.size):
        step = np.zeros_like(theta)
        step[p] = h
        jp, cp = gen.with_flat(theta + step).field_affine(t)
        jm, cm = gen.with_flat(theta - step).field_affine(t)
        d_jac[p] = (jp - jm) / (2 * h)
        d_c[p] = (cp - cm) / (2 * h)
    return d_jac, d_c


def _surrogate_grads(gen, teacher, flow, z, eps, t, which: str = "total") -> np.ndarray:
    """Autodiff theta-gradient on one chunk of ``L2`` or of ``L1 + L2``."""
    tape = Tape()
    gen_b = gen.bind(tape)
    losses = fgm_losses(
        tape, gen_b, teacher.bind(tape, frozen=True), flow.bind(tape, frozen=True), z, eps, np.full(z.shape[0], t)
    )
    target = losses.l2 if which == "l2" else tape.add(losses.l1, losses.l2)
    grads = tape.backward(target)
    return np.concatenate([grads[p].ravel() for p in gen_b.param_nodes])


def check_gradient_identity(
    gen: LinearGenerator,
    teacher,
    t: float,
    n: int,
    fd_step: float,
    rng: np.random.Generator,
    n_chunks: int = 100,
) -> IdentityReport:
    """Field-derivative gradient term against the autodiff gradient of its surrogate.

    LHS: ``E[-2 (u - v_theta)^T dv_theta/dtheta]`` with the parameter
    Jacobian of the closed-form field by central differences.
    RHS: autodiff theta-gradient of ``E[2 (u - v_sg)^T (v_sg - u(x_t|x_0))]``.
    """
    if fd_step <= 0:
        raise ValueError(f"fd_step must be positive, got {fd_step}")
    size = _chunks(n, n_chunks)
    flow = gen.field_handle()
    d_jac, d_c = _field_coeff_derivs(gen, t, fd_step)
    lhs_c, rhs_c = [], []
    for _ in range(n_chunks):
        z, eps = _draw(gen, size, rng)
        xt = (1.0 - t) * gen.sample(z) + t * eps
        gap = teacher.velocity(xt, t) - linear_generator_field(gen, xt, t)
        # mean over samples of gap^T (x dJ_p^T + dc_p), contracted per parameter
        moment = gap.T @ xt / size
        lhs_c.append(-2.0 * (np.einsum("de,pde->p", moment, d_jac) + d_c @ gap.mean(axis=0)))
        rhs_c.append(_surrogate_grads(gen, teacher, flow, z, eps, t, which="l2"))
    lhs_c, rhs_c = np.array(lhs_c), np.array(rhs_c)
    (lm, ls), (rm, rs), (_, ds) = _mean_se(lhs_c), _mean_se(rhs_c), _mean_se(lhs_c - rhs_c)
    return IdentityReport("gradient_identity", lm, rm, ls, rs, ds, n, {"t": t, "fd_step": fd_step, "n_chunks": n_chunks})


def _field_matching_losses(gens: list, teacher, z, eps, t) -> np.ndarray:
    """``E ||v_theta(x_t) - u(x_t)||^2`` for several generators on one draw.

    The teacher is evaluated once on the stacked ``x_t`` of all generators.
    """
    xts = np.stack([(1.0 - t) * g.sample(z) + t * eps for g in gens])
    u = teacher.velocity(xts.reshape(-1, xts.shape[-1]), t).reshape(xts.shape)
    losses = np.empty(len(gens))
    for i, g in enumerate(gens):
        gap = linear_generator_field(g, xts[i], t) - u[i]
        losses[i] = np.einsum("nd,nd->", gap, gap) / gap.shape[0]
    return losses


def check_full_gradient(
    gen: LinearGenerator,
    teacher,
    t_grid,
    n: int,
    rng: np.random.Generator,
    fd_step: float = 1e-4,
    n_chunks: int = 100,
) -> IdentityReport:
    """Finite differences of the intractable objective against grad(L1 + L2).

    The objective ``E ||v_theta(x_t) - u(x_t)||^2`` is evaluated with the
    closed-form generator field, with ``x_t`` re-drawn from the perturbed
    generator on the same ``(z, eps)``. Times are averaged uniformly over
    ``t_grid``.
    """
    if fd_step <= 0:
        raise ValueError(f"fd_step must be positive, got {fd_step}")
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=np.float64))
    size = _chunks(n, n_chunks)
    flow = gen.field_handle()
    theta = gen.get_flat()
    shifted = []
    for p in range(theta.size):
        step = np.zeros_like(theta)
        step[p] = fd_step
        shifted += [gen.with_flat(theta + step), gen.with_flat(theta - step)]
    lhs_c, rhs_c = [], []
    for _ in range(n_chunks):
        lhs = np.zeros(theta.size)
        rhs = np.zeros(theta.size)
        for t in t_grid:
            z, eps = _draw(gen, size, rng)
            losses = _field_matching_losses(shifted, teacher, z, eps, t)
            lhs += (losses[0::2] - losses[1::2]) / (2 * fd_step)
            rhs += _surrogate_grads(gen, teacher, flow, z, eps, float(t))
        lhs_c.append(lhs / t_grid.size)
        rhs_c.append(rhs / t_grid.size)
    lhs_c, rhs_c = np.array(lhs_c), np.array(rhs_c)
    (lm, ls), (rm, rs), (_, ds) = _mean_se(lhs_c), _mean_se(rhs_c), _mean_se(lhs_c - rhs_c)
    return IdentityReport(
        "full_gradient", lm, rm, ls, rs, ds, n, {"t_grid": t_grid.tolist(), "fd_step": fd_step, "n_chunks": n_chunks}
    )


def check_fixed_point(gen: LinearGenerator, t: float, n: int, rng: np.random.Generator, n_chunks: int = 100) -> IdentityReport:
    """Teacher and online flow both equal the generator's own field.

    The theta-gradient of ``L1 + L2`` should vanish; LHS is that gradient,
    RHS is zero.
    """
    size = _chunks(n, n_chunks)
    own = gen.field_handle()
    grads = []
    for _ in range(n_chunks):
        z, eps = _draw(gen, size, rng)
        grads.append(_surrogate_grads(gen, own, own, z, eps, t))
    grads = np.array(grads)
    gm, gs = _mean_se(grads)
    zero = np.zeros_like(gm)
    return IdentityReport("fixed_point", gm, zero, gs, zero, gs, n, {"t": t, "n_chunks": n_chunks})
