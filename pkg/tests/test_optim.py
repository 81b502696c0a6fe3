import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uadseg.nncore import Tensor, adam_step, init_adam, parameter


def test_first_step_magnitude():
    p = parameter(np.zeros(1))
    params = {"p": p}
    state = init_adam(params, lr=0.01, weight_decay=0.0)
    p.grad = np.ones(1)
    adam_step(params, state)
    assert abs(p.data[0] + 0.01) < 1e-6  # bias-corrected first step ~ -lr
    assert abs(p.data[0]) <= 0.01 * (1 + state.weight_decay) + 1e-12


def test_zero_gradient_is_noop():
    rng = np.random.default_rng(0)
    p = parameter(rng.standard_normal(5))
    before = p.data.copy()
    params = {"p": p}
    state = init_adam(params, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(5)
    for _ in range(3):
        adam_step(params, state)
    assert np.array_equal(p.data, before)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 5))
def test_missing_grads_with_zero_decay_noop(seed, steps):
    rng = np.random.default_rng(seed)
    p = parameter(rng.standard_normal(3))
    before = p.data.copy()
    state = init_adam({"p": p}, lr=0.5, weight_decay=0.0)
    for _ in range(steps):
        adam_step({"p": p}, state)
    assert np.array_equal(p.data, before)


def test_weight_decay_shrinks_parameters():
    p = parameter(np.array([4.0]))
    state = init_adam({"p": p}, lr=0.1, weight_decay=0.1)
    p.grad = np.zeros(1)
    adam_step({"p": p}, state)
    # decoupled decay: p <- p - lr*wd*p, adaptive part zero
    assert p.data[0] == pytest.approx(4.0 * (1 - 0.1 * 0.1))


def test_converges_on_quadratic():
    p = parameter(np.zeros(1))
    state = init_adam({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(100):
        loss = ((p - 3.0) * (p - 3.0)).sum()
        p.zero_grad()
        loss.backward()
        adam_step({"p": p}, state)
    assert abs(p.data[0] - 3.0) < 0.1
