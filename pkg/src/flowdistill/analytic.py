"""Closed-form Gaussian oracles for the linear noise/data interpolation.

Convention: ``x_t = (1 - t) x_0 + t x_1`` with ``x_1 ~ N(0, I)``, so
``q_t(x_t | x_0) = N((1 - t) x_0, t^2 I)``; t = 0 is data, t = 1 is noise.
All velocities point from data to noise (they regress ``x_1 - x_0``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .nets import as_time_column
from .tape import Node, Tape

__all__ = [
    "GaussianMixture",
    "LinearGenerator",
    "MixtureField",
    "conditional_field",
    "gmm_log_density",
    "gmm_sample",
    "linear_generator_field",
    "marginal_field",
    "marginal_path",
    "posterior_mean",
    "preset_mixture",
]


def _check_time(t, allow_zero: bool = False) -> None:
    t = np.asarray(t)
    bad = (t < 0) if allow_zero else (t <= 0)
    if np.any(bad) or np.any(t > 1):
        lo = "[0, 1]" if allow_zero else "(0, 1]"
        raise ValueError(f"time must lie in {lo}, got {t.min() if t.ndim else float(t)}")


def _time_for(x: np.ndarray, t) -> np.ndarray:
    """Time broadcastable against ``x``: scalar, or column for a batch."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0 or x.ndim == 1:
        return t
    return as_time_column(t, x.shape[0])[:, None]


@dataclass
class GaussianMixture:
    """Mixture of diagonal Gaussians.

    Parameters
    ----------
    weights : array, shape (K,)
    means : array, shape (K, d)
    variances : array, shape (K, d)
        Diagonal covariance entries, all positive.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = self.weights.size
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ValueError(
                f"mixture shapes disagree: weights {self.weights.shape}, "
                f"means {self.means.shape}, variances {self.variances.shape}"
            )
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be a probability vector, sum={self.weights.sum()!r}")
        if np.any(self.variances <= 0):
            raise ValueError("all variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "GaussianMixture":
        return cls(spec["weights"], spec["means"], spec["variances"])

    def velocity(self, x, t) -> np.ndarray:
        return marginal_field(self, x, t)


def preset_mixture(name: str) -> GaussianMixture:
    """Named 2-D targets: ``ring8``, ``two-moons-gmm``, ``single-gauss``."""
    if name == "ring8":
        angles = 2 * np.pi * np.arange(8) / 8
        means = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return GaussianMixture(np.full(8, 1 / 8), means, np.full((8, 2), 0.3**2))
    if name == "two-moons-gmm":
        # five components along each half circle
        a = np.linspace(0, np.pi, 5)
        upper = np.stack([np.cos(a), np.sin(a)], axis=1)
        lower = np.stack([1 - np.cos(a), 0.5 - np.sin(a)], axis=1)
        means = 2.0 * (np.concatenate([upper, lower]) - [0.5, 0.25])
        return GaussianMixture(np.full(10, 0.1), means, np.full((10, 2), 0.15**2))
    if name == "single-gauss":
        return GaussianMixture([1.0], [[0.0, 0.0]], [[0.01, 0.01]])
    raise ValueError(f"unknown mixture preset {name!r}")


def conditional_field(x_t, x_0, t) -> np.ndarray:
    """``(x_t - x_0) / t``, the velocity of the path through ``x_0``."""
    _check_time(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    return (x_t - np.asarray(x_0, dtype=np.float64)) / _time_for(x_t, t)


def marginal_path(q0: GaussianMixture, t: float) -> GaussianMixture:
    """Mixture law of ``x_t`` when ``x_0 ~ q0``."""
    _check_time(t, allow_zero=True)
    s = 1.0 - t
    return GaussianMixture(q0.weights.copy(), s * q0.means, s * s * q0.variances + t * t)


def _log_normal_diag(x, means, variances):
    # x (n, d), means/variances (n or 1, K, d) -> (n, K)
    diff = x[:, None, :] - means
    return -0.5 * np.sum(diff * diff / variances + np.log(2 * np.pi * variances), axis=-1)


def gmm_log_density(q0: GaussianMixture, x) -> np.ndarray:
    """Log density, scalar for one point or ``(n,)`` for a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    logp = _log_normal_diag(xb, q0.means[None], q0.variances[None])
    with np.errstate(divide="ignore"):
        out = logsumexp(logp + np.log(q0.weights), axis=1)
    return out[0] if single else out


def gmm_sample(q0: GaussianMixture, n: int, rng: np.random.Generator, return_labels: bool = False):
    """Draw ``n`` i.i.d. points (and optionally their component labels)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    labels = rng.choice(q0.n_components, size=n, p=q0.weights)
    eps = rng.standard_normal((n, q0.dim))
    x = q0.means[labels] + np.sqrt(q0.variances[labels]) * eps
    return (x, labels) if return_labels else x


def _posterior_parts(q0: GaussianMixture, x: np.ndarray, t: np.ndarray):
    """Responsibilities, per-component posterior means and helpers.

    ``x`` is ``(n, d)``, ``t`` is ``(n,)``. Returns ``r (n, K)``,
    ``m (n, K, d)``, ``gain (n, K, d)`` and ``score (n, K, d)`` where
    ``gain`` is the diagonal slope of ``m`` in ``x`` and ``score`` is the
    gradient of each component's log density at ``x``.
    """
    if t.size > 1 and np.all(t == t[0]):
        t = t[:1]  # shared time: keep the per-component terms unbatched
    s = (1.0 - t)[:, None, None]
    tt = t[:, None, None]
    mu_t = s * q0.means[None]
    var_t = s * s * q0.variances[None] + tt * tt
    logp = _log_normal_diag(x, mu_t, var_t)
    with np.errstate(divide="ignore"):
        logits = logp + np.log(q0.weights)
    # softmax by hand: scipy's logsumexp adds noticeable per-call overhead here
    r = np.exp(logits - logits.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)
    gain = np.broadcast_to(s * q0.variances[None] / var_t, (x.shape[0],) + q0.means.shape)
    centered = x[:, None, :] - mu_t
    m = q0.means[None] + gain * centered
    score = -centered / var_t
    return r, m, gain, score


class _SharedTimeParts:
    """Posterior pieces when every row shares one time ``t``.

    All per-component quantities are ``(K, d)`` and every batch operation is
    an ``(n, K)`` matrix product, which is much cheaper than materialising
    ``(n, K, d)`` arrays. Component ``k`` has posterior mean
    ``offset_k + gain_k * x`` and log-density score ``shift_k - prec_k * x``.
    """

    def __init__(self, q0: GaussianMixture, x: np.ndarray, t: float):
        s = 1.0 - t
        var_t = s * s * q0.variances + t * t
        self.prec = 1.0 / var_t
        mu_t = s * q0.means
        self.shift = mu_t * self.prec
        quad = (x * x) @ self.prec.T - 2.0 * (x @ self.shift.T) + (mu_t * self.shift).sum(axis=1)
        with np.errstate(divide="ignore"):
            logits = -0.5 * (quad + np.sum(np.log(2 * np.pi * var_t), axis=1)) + np.log(q0.weights)
        # column loops and a ones-product: axis-1 reductions over a handful
        # of components are slow in numpy
        top = logits[:, 0].copy()
        for k in range(1, logits.shape[1]):
            np.maximum(top, logits[:, k], out=top)
        r = np.exp(logits - top[:, None])
        self.r = r / (r @ np.ones(r.shape[1]))[:, None]
        self.gain = s * q0.variances * self.prec
        self.offset = q0.means - self.gain * mu_t
        self.x = x

    def mean(self) -> np.ndarray:
        return self.r @ self.offset + self.x * (self.r @ self.gain)

    def vjp_post(self, g: np.ndarray) -> np.ndarray:
        """``g^T d E[x_0 | x] / dx`` (see :func:`marginal_field_vjp`)."""
        r, x = self.r, self.x
        gm = g @ self.offset.T + (g * x) @ self.gain.T  # g . m_k
        w = r * gm
        out = (r @ self.gain) * g
        # sum_k w_k (score_k - mean_score), scores affine in x
        out += w @ self.shift - x * (w @ self.prec)
        mean_score = r @ self.shift - x * (r @ self.prec)
        out -= (w @ np.ones(w.shape[1]))[:, None] * mean_score
        return out


def _shared_time(t, n: int) -> float | None:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return float(t)
    if t.size == n and np.all(t == t.flat[0]):
        return float(t.flat[0])
    return None


def posterior_mean(q0: GaussianMixture, x, t) -> np.ndarray:
    """``E[x_0 | x_t = x]`` under ``q0``."""
    _check_time(t, allow_zero=True)
    x = np.asarray(x, dtype=np.float64)
    xb = np.atleast_2d(x)
    shared = _shared_time(t, xb.shape[0])
    if shared is not None and shared > 0:
        out = _SharedTimeParts(q0, xb, shared).mean()
    else:
        r, m, _, _ = _posterior_parts(q0, xb, as_time_column(t, xb.shape[0]))
        out = np.einsum("nk,nkd->nd", r, m)
    return out[0] if x.ndim == 1 else out


def marginal_field(q0: GaussianMixture, x, t) -> np.ndarray:
    """Exact marginal velocity ``(x - E[x_0 | x_t = x]) / t``."""
    _check_time(t)
    x = np.asarray(x, dtype=np.float64)
    return (x - posterior_mean(q0, x, t)) / _time_for(x, t)


def marginal_field_vjp(q0: GaussianMixture, x, t):
    """Marginal field on a batch and a closure for ``g -> g^T d(field)/dx``."""
    _check_time(t)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tc = as_time_column(t, x.shape[0])
    shared = _shared_time(t, x.shape[0])
    if shared is not None:
        parts = _SharedTimeParts(q0, x, shared)
        u = (x - parts.mean()) / shared
        return u, lambda g: (g - parts.vjp_post(g)) / shared
    r, m, gain, score = _posterior_parts(q0, x, tc)
    post = np.einsum("nk,nkd->nd", r, m)
    u = (x - post) / tc[:, None]
    mean_score = np.einsum("nk,nkd->nd", r, score)

    def vjp(g):
        # d post / dx = sum_k r_k diag(gain_k) + sum_k m_k (d r_k / dx)^T,
        # d r_k / dx = r_k (score_k - mean_score)
        gm = np.einsum("nd,nkd->nk", g, m)
        g_post = np.einsum("nk,nkd->nd", r, gain) * g
        g_post += np.einsum("nk,nkd->nd", r * gm, score - mean_score[:, None, :])
        return (g - g_post) / tc[:, None]

    return u, vjp


class MixtureField:
    """Tape-compatible handle for the exact marginal field of a mixture.

    Has no parameters; ``bind`` returns a callable building an external node
    whose adjoint flows back into ``x``.
    """

    def __init__(self, q0: GaussianMixture):
        self.q0 = q0
        self.dim = q0.dim

    def velocity(self, x, t) -> np.ndarray:
        return marginal_field(self.q0, x, t)

    def bind(self, tape: Tape, frozen: bool = True, prefix: str = "u"):
        q0 = self.q0

        def call(x: Node, t) -> Node:
            u, vjp = marginal_field_vjp(q0, x.value, t)
            return tape.external(x, u.reshape(x.shape), lambda g: vjp(np.atleast_2d(g)).reshape(g.shape), name="mixture-field")

        call.param_nodes = []
        return call


@dataclass
class LinearGenerator:
    """``x_0 = A z + b`` with ``z ~ N(0, I_k)``; pushes forward to ``N(b, A A^T)``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.A.shape[0] != self.b.size:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has {self.b.size} entries")

    @property
    def dim(self) -> int:
        return self.b.size

    @property
    def latent_dim(self) -> int:
        return self.A.shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        return [self.A, self.b]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])

    def with_flat(self, flat) -> "LinearGenerator":
        flat = np.asarray(flat, dtype=np.float64)
        na = self.A.size
        return LinearGenerator(flat[:na].reshape(self.A.shape), flat[na:])

    def sample(self, z) -> np.ndarray:
        return np.asarray(z) @ self.A.T + self.b

    def field_affine(self, t: float):
        """``(J, c)`` with ``v(x, t) = x J^T + c``: the induced field is affine in ``x``."""
        _check_time(t)
        d = self.dim
        s = 1.0 - t
        cov = self.A @ self.A.T
        prec = np.linalg.solve(s * s * cov + t * t * np.eye(d), np.eye(d))
        gain = s * cov @ prec  # m(x) = b + gain (x - s b)
        jac = (np.eye(d) - gain) / t
        c = -(self.b - s * gain @ self.b) / t
        return jac, c

    def velocity(self, x, t) -> np.ndarray:
        return linear_generator_field(self, x, t)

    def bind(self, tape: Tape, frozen: bool = False, prefix: str = "lin"):
        """Tape view: ``bind(...)(z)`` builds ``A z + b`` with A, b as parameters."""
        a = tape.parameter(self.A, name=f"{prefix}A")
        b = tape.parameter(self.b, name=f"{prefix}b")
        wa, wb = (tape.stop_gradient(a), tape.stop_gradient(b)) if frozen else (a, b)

        def call(z: Node) -> Node:
            return tape.affine(wa, z, wb)

        call.param_nodes = [a, b]
        call.tape = tape
        return call

    def field_handle(self) -> "LinearField":
        return LinearField(self)


class LinearField:
    """Tape handle for the induced field of a frozen :class:`LinearGenerator`."""

    def __init__(self, gen: LinearGenerator):
        self.gen = gen
        self.dim = gen.dim

    def velocity(self, x, t) -> np.ndarray:
        return linear_generator_field(self.gen, x, t)

    def bind(self, tape: Tape, frozen: bool = True, prefix: str = "lf"):
        gen = self.gen

        def call(x: Node, t) -> Node:
            t = np.asarray(t, dtype=np.float64)
            if t.ndim == 0 or np.all(t == t.flat[0]):
                jac, c = gen.field_affine(float(t.flat[0]))
                return tape.affine(tape.constant(jac), x, tape.constant(c))
            v, vjp = _linear_field_vjp(gen, x.value, t)
            return tape.external(x, v, vjp, name="linear-field")

        call.param_nodes = []
        return call


def _linear_field_vjp(gen: LinearGenerator, x, t):
    t = as_time_column(t, x.shape[0])
    _check_time(t)
    d = gen.dim
    s = (1.0 - t)[:, None, None]
    cov = gen.A @ gen.A.T
    prec = np.linalg.inv(s * s * cov + (t * t)[:, None, None] * np.eye(d))
    gain = s * (cov @ prec)
    jacs = (np.eye(d) - gain) / t[:, None, None]
    post = gen.b + np.einsum("nde,ne->nd", gain, x - s[:, :, 0] * gen.b)
    out = (x - post) / t[:, None]
    return out, lambda g: np.einsum("nd,nde->ne", g, jacs)


def linear_generator_field(gen: LinearGenerator, x, t) -> np.ndarray:
    """Exact induced field of ``N(b, A A^T)`` at ``(x, t)``."""
    x = np.asarray(x, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        jac, c = gen.field_affine(float(t_arr))
        return x @ jac.T + c
    return _linear_field_vjp(gen, np.atleast_2d(x), t_arr)[0]
