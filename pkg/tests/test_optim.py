import math

import numpy as np
import pytest

from srnet.optim import OptimizerState, adamw_step, zero_grad
from srnet.tensor import Tensor, default_dtype


def _param(values, grad):
    p = Tensor(values, requires_grad=True)
    p.grad = np.array(grad, dtype=p.data.dtype)
    return p


def test_zero_gradient_zero_decay_is_noop():
    p = _param([1.0, -2.0], [0.0, 0.0])
    adamw_step({"p": p}, OptimizerState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_matches_formula():
    with default_dtype(np.float64):
        p = _param([0.5, 0.5], [0.2, -3.0])
        st = OptimizerState(lr=0.01, weight_decay=0.1)
        adamw_step({"p": p}, st)
    g = np.array([0.2, -3.0])
    m = 0.1 * g / (1 - 0.9)
    v = 0.001 * g * g / (1 - 0.999)
    expect = 0.5 * (1 - 0.01 * 0.1) - 0.01 * m / (np.sqrt(v) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-12)
    assert st.step == 1
    np.testing.assert_array_equal(p.grad, g)


def test_constant_gradient_update_tends_to_minus_sign_lr():
    with default_dtype(np.float64):
        p = _param([0.0, 0.0], [0.3, -5.0])
        st = OptimizerState(lr=1e-3, weight_decay=0.0)
        for _ in range(200):
            before = p.data.copy()
            adamw_step({"p": p}, st)
    np.testing.assert_allclose(p.data - before, [-1e-3, 1e-3], rtol=1e-4)


def test_missing_gradient_raises():
    with pytest.raises(ValueError):
        adamw_step({"p": Tensor([1.0], requires_grad=True)}, OptimizerState())


def test_moments_shape_congruent_and_zero_grad():
    p = _param(np.ones((2, 3)), np.ones((2, 3)))
    st = OptimizerState()
    adamw_step({"p": p}, st)
    assert st.exp_avg["p"].shape == st.exp_avg_sq["p"].shape == (2, 3)
    zero_grad({"p": p})
    assert p.grad is None


def test_decay_is_decoupled():
    with default_dtype(np.float64):
        p = _param([2.0], [0.0])
        adamw_step({"p": p}, OptimizerState(lr=0.1, weight_decay=0.5))
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))
    assert math.isfinite(p.data[0])
