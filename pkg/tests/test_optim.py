"""Adam optimizer: hand-evaluated first step, determinism, error paths."""

import numpy as np
import pytest

from dvae import tensor as T
from dvae.optim import Adam
from dvae.tensor import Tape, Tensor


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.zero_grad()
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_first_step_matches_hand_evaluation():
    # p=0, g=1: m=(1-b1), v=(1-b2); after bias correction mhat=1, vhat=1,
    # so the update is exactly -lr / (1 + eps) ~ -lr.
    p = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    expected = -0.1 * 1.0 / (1.0 + 1e-8)
    assert abs(p.data[0] - expected) < 1e-5  # float32 arithmetic noise


def test_missing_grad_rejected():
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    opt = Adam([p])
    with pytest.raises(ValueError, match="no gradient"):
        opt.step()


def test_ten_steps_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = Tensor(rng.standard_normal(8).astype(np.float32), requires_grad=True)
        tgt = Tensor(rng.standard_normal(8).astype(np.float32))
        opt = Adam([p], lr=1e-2)
        for _ in range(10):
            opt.zero_grad()
            with Tape() as tape:
                d = T.sub(p, tgt)
                loss = T.reduce_mean(T.mul(d, d))
            tape.backward(loss)
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_state_roundtrip_resumes_identically():
    rng = np.random.default_rng(6)
    p1 = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
    p2 = Tensor(p1.data.copy(), requires_grad=True)
    o1, o2 = Adam([p1], lr=0.05), Adam([p2], lr=0.05)
    g = rng.standard_normal(4).astype(np.float32)
    for _ in range(3):
        p1.grad = g.copy()
        o1.step()
    o2.load_state_arrays(o1.state_arrays(), o1.step_count)
    p2.data = p1.data.copy()
    for o, p in ((o1, p1), (o2, p2)):
        p.grad = g.copy()
        o.step()
    assert np.array_equal(p1.data, p2.data)
