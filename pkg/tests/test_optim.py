import math

import numpy as np
import pytest

from flowdistill.optim import EMA, Adam


def reference_adam(theta, grads, lr, b1, b2, eps):
    """Scalar textbook Adam, one parameter at a time."""
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
    return theta


@pytest.mark.parametrize("betas", [(0.0, 0.999), (0.9, 0.99)])
def test_adam_matches_reference(betas):
    rng = np.random.default_rng(0)
    p = rng.standard_normal(4)
    grads = rng.standard_normal((6, 4))
    opt = Adam([p], lr=0.01, betas=betas)
    start = p.copy()
    for g in grads:
        opt.step([g])
    expected = [reference_adam(start[i], grads[:, i], 0.01, *betas, 1e-8) for i in range(4)]
    np.testing.assert_allclose(p, expected, rtol=1e-13)


def test_adam_first_step_is_signed_lr():
    p = np.array([1.0, -1.0])
    Adam([p], lr=0.1).step([np.array([3.0, -0.5])])
    np.testing.assert_allclose(p, [0.9, -0.9], rtol=1e-6)


def test_ema_decay():
    p = np.array([0.0])
    ema = EMA([p], 0.5)
    p[...] = 4.0
    ema.update([p])
    assert ema.shadow[0][0] == 2.0
    zero = EMA([p], 0.0)
    p[...] = 7.0
    zero.update([p])
    assert zero.shadow[0][0] == 7.0
    with pytest.raises(ValueError):
        EMA([p], 1.0)
    with pytest.raises(ValueError):
        Adam([p], lr=0.0)


def test_ema_warmup_schedule():
    p = np.array([0.0])
    ema = EMA([p], 0.999, warmup=True)
    expected = 0.0
    for k in range(2000):
        p[...] = float(k + 1)
        d = min(0.999, (1 + k) / (10 + k))
        expected = d * expected + (1 - d) * p[0]
        ema.update([p])
    assert math.isclose(ema.shadow[0][0], expected, rel_tol=1e-12)
    # the first update moves nine tenths of the way to the live weights
    q = np.array([0.0])
    fresh = EMA([q], 0.999, warmup=True)
    q[...] = 10.0
    fresh.update([q])
    assert math.isclose(fresh.shadow[0][0], 9.0)
    assert EMA([q], 0.999).current_decay() == 0.999
