"""scikit-learn style wrappers.

Both estimators map latent noise to data space: ``fit`` trains, and
``transform(Z)`` pushes rows of standard-normal noise through the trained
sampler. Hyperparameters live in ``__init__`` so ``get_params``,
``set_params`` and ``sklearn.base.clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .analytic import GaussianMixture, MixtureField
from .fgm import DistillConfig, DistillState, distill, init_generator
from .flowtrain import PretrainConfig, euler_sample, pretrain
from .nets import TimeDistribution, VectorFieldNet

__all__ = ["FGMDistiller", "FlowMatchingSampler"]


def _seed(random_state) -> int:
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise ValueError("random_state must be an int or None")


class _NoiseSampler(TransformerMixin, BaseEstimator):
    def _check_noise(self, Z):
        check_is_fitted(self, "n_features_in_")
        Z = check_array(Z, dtype=np.float64, ensure_min_samples=0)
        if Z.shape[1] != self.n_features_in_:
            raise ValueError(f"Z has {Z.shape[1]} features, expected {self.n_features_in_}")
        return Z

    def sample(self, n_samples: int, random_state=None) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        rng = np.random.default_rng(random_state)
        return self.transform(rng.standard_normal((n_samples, self.n_features_in_)))


class FlowMatchingSampler(_NoiseSampler):
    """Velocity-field model trained with the ReFlow objective; samples by Euler.

    ``fit(X)`` resamples rows of ``X`` as data. ``fit`` also accepts a
    :class:`GaussianMixture` to draw fresh batches from it.
    """

    def __init__(
        self,
        hidden=(128, 128, 128),
        n_freq: int = 8,
        activation: str = "silu",
        steps: int = 20000,
        batch_size: int = 256,
        lr: float = 1e-3,
        ema_decay: float = 0.999,
        euler_steps: int = 50,
        random_state=None,
    ):
        self.hidden = hidden
        self.n_freq = n_freq
        self.activation = activation
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema_decay = ema_decay
        self.euler_steps = euler_steps
        self.random_state = random_state

    def fit(self, X, y=None):
        seed = _seed(self.random_state)
        if isinstance(X, GaussianMixture):
            source, dim = X, X.dim
        else:
            source = check_array(X, dtype=np.float64)
            dim = source.shape[1]
        net = VectorFieldNet(dim, tuple(self.hidden), self.n_freq, self.activation).init(np.random.default_rng([seed, 1]))
        cfg = PretrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            ema_decay=self.ema_decay,
            seed=seed,
            log_every=max(1, self.steps // 100),
        )
        result = pretrain(source, cfg, net=net)
        self.net_ = result.net
        self.ema_ = result.ema
        self.history_ = result.history
        self.n_features_in_ = dim
        return self

    @property
    def field_(self) -> VectorFieldNet:
        """The EMA velocity network (used for sampling and distillation)."""
        check_is_fitted(self, "ema_")
        return self.ema_

    def transform(self, X):
        Z = self._check_noise(X)
        if Z.shape[0] == 0:
            return Z.copy()
        return euler_sample(self.ema_, Z.shape[0], self.euler_steps, None, z=Z)


class FGMDistiller(_NoiseSampler):
    """One-step generator distilled from a teacher field.

    ``teacher`` may be a fitted :class:`FlowMatchingSampler`, a
    :class:`VectorFieldNet`, or a :class:`GaussianMixture` (its closed-form
    marginal field). ``init`` supplies the generator backbone; it defaults
    to the teacher network and is required for a mixture teacher.
    ``fit`` ignores ``X`` beyond checking its dimension.
    """

    def __init__(
        self,
        teacher=None,
        init=None,
        steps: int = 10000,
        batch_size: int = 1024,
        lr_gen: float = 1e-4,
        lr_flow: float = 1e-3,
        inner_steps: int = 1,
        lambda1: float = 0.0,
        lambda2: float = 1.0,
        ema_decay: float = 0.9995,
        ema_warmup: bool = True,
        t_star: float = 0.97,
        random_state=None,
    ):
        self.teacher = teacher
        self.init = init
        self.steps = steps
        self.batch_size = batch_size
        self.lr_gen = lr_gen
        self.lr_flow = lr_flow
        self.inner_steps = inner_steps
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.ema_decay = ema_decay
        self.ema_warmup = ema_warmup
        self.t_star = t_star
        self.random_state = random_state

    @staticmethod
    def _as_net(obj):
        if isinstance(obj, FlowMatchingSampler):
            return obj.field_
        if isinstance(obj, VectorFieldNet):
            return obj
        return None

    def fit(self, X=None, y=None):
        if isinstance(self.teacher, GaussianMixture):
            teacher = MixtureField(self.teacher)
        else:
            teacher = self._as_net(self.teacher)
            if teacher is None:
                raise ValueError("teacher must be a FlowMatchingSampler, VectorFieldNet or GaussianMixture")
        backbone = self._as_net(self.init) if self.init is not None else self._as_net(self.teacher)
        if backbone is None:
            raise ValueError("init is required when the teacher is a GaussianMixture")
        if X is not None:
            X = check_array(X, dtype=np.float64)
            if X.shape[1] != backbone.dim:
                raise ValueError(f"X has {X.shape[1]} features, teacher has {backbone.dim}")
        cfg = DistillConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr_gen=self.lr_gen,
            lr_flow=self.lr_flow,
            inner_steps=self.inner_steps,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            ema_decay=self.ema_decay,
            ema_warmup=self.ema_warmup,
            t_star=self.t_star,
            seed=_seed(self.random_state),
            log_every=max(1, self.steps // 100),
        )
        generator = init_generator(backbone, t_star=cfg.t_star)
        state = distill(DistillState.create(generator, teacher, cfg), cfg)
        self.generator_ = state.ema_generator()
        self.flow_ = state.flow
        self.history_ = state.history
        self.n_features_in_ = backbone.dim
        return self

    def transform(self, X):
        Z = self._check_noise(X)
        if Z.shape[0] == 0:
            return Z.copy()
        return self.generator_(Z)
