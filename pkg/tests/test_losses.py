import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from reconscan.errors import ShapeError, ZeroNormError
from reconscan.losses import cosine_distance, gradient_penalty, l1_loss, l2_loss

stacks = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
    elements=st.floats(-10, 10, allow_nan=False, width=64),
)


class TestL2:
    def test_identity_is_zero(self):
        x = torch.rand(2, 4, 4, 3)
        assert float(l2_loss(x, x)) == 0.0

    def test_unit_difference(self):
        assert float(l2_loss(torch.ones(5, 7), torch.zeros(5, 7))) == 1.0

    def test_hand_computed(self):
        assert float(l2_loss([[0.2, 0.4]], [[0.1, 0.8]])) == pytest.approx(0.085)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l2_loss(torch.zeros(2, 3), torch.zeros(3, 2))


class TestL1:
    def test_identity_is_zero(self):
        x = torch.rand(3, 3)
        assert float(l1_loss(x, x)) == 0.0

    def test_unit_difference(self):
        assert float(l1_loss(torch.ones(4, 4), torch.zeros(4, 4))) == 1.0

    def test_hand_computed(self):
        assert float(l1_loss([[0.2, 0.4]], [[0.1, 0.8]])) == pytest.approx(0.25)


class TestCosine:
    def test_identical_nonzero(self):
        x = torch.rand(2, 3) + 0.1
        assert float(cosine_distance(x, x)) == pytest.approx(0.0, abs=1e-7)

    def test_orthogonal(self):
        assert float(cosine_distance([1.0, 0.0], [0.0, 1.0])) == pytest.approx(1.0)

    def test_closed_form(self):
        expected = 1.0 - 1.0 / math.sqrt(2.0)
        assert float(cosine_distance([1.0, 0.0], [1.0, 1.0])) == pytest.approx(expected)

    def test_zero_norm(self):
        with pytest.raises(ZeroNormError):
            cosine_distance([0.0, 0.0], [1.0, 1.0])

    def test_positive_collinear_is_zero(self):
        x = np.array([0.5, 1.0, 0.25])
        assert float(cosine_distance(x, 3.0 * x)) == pytest.approx(0.0, abs=1e-7)


@given(x=stacks, scale=st.floats(-2, 2, allow_nan=False))
@settings(max_examples=40, deadline=None)
def test_losses_nonnegative(x, scale):
    y = np.roll(x, 1) * scale
    assert float(l2_loss(x, y)) >= 0.0
    assert float(l1_loss(x, y)) >= 0.0


@given(x=stacks)
@settings(max_examples=40, deadline=None)
def test_zero_iff_equal(x):
    assert float(l2_loss(x, x)) == 0.0
    assert float(l1_loss(x, x)) == 0.0
    shifted = x + 1e-3
    assert float(l2_loss(x, shifted)) > 0.0
    assert float(l1_loss(x, shifted)) > 0.0


def central_difference(fn, x, y, eps=1e-6):
    """Finite-difference gradient of fn(x, y) with respect to x."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        hi = float(fn(torch.from_numpy(x), torch.from_numpy(y)))
        flat[i] = original - eps
        lo = float(fn(torch.from_numpy(x), torch.from_numpy(y)))
        flat[i] = original
        out[i] = (hi - lo) / (2.0 * eps)
    return grad


@pytest.mark.parametrize("fn", [l2_loss, l1_loss, cosine_distance])
def test_autodiff_matches_finite_differences(fn):
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.uniform(0.1, 0.9, (2, 2, 3))
        y = rng.uniform(0.1, 0.9, (2, 2, 3))
        xt = torch.from_numpy(x.copy()).requires_grad_(True)
        loss = fn(xt, torch.from_numpy(y.copy()))
        (autodiff,) = torch.autograd.grad(loss, xt)
        numeric = central_difference(fn, x.copy(), y.copy())
        denom = max(float(np.linalg.norm(numeric)), 1e-12)
        rel = float(np.linalg.norm(autodiff.numpy() - numeric)) / denom
        assert rel <= 1e-4


class TestGradientPenalty:
    def test_sum_critic(self):
        # D(x) = sum(x): gradient is all-ones, norm sqrt(n); n = 4 gives 1
        critic = lambda x: x.reshape(x.shape[0], -1).sum(dim=1)
        value = gradient_penalty(critic, torch.rand(6, 4), torch.rand(6, 4))
        assert float(value) == pytest.approx(1.0, abs=1e-6)

    def test_single_coordinate_critic(self):
        critic = lambda x: x.reshape(x.shape[0], -1)[:, 0]
        value = gradient_penalty(critic, torch.rand(4, 2, 3), torch.rand(4, 2, 3))
        assert float(value) == pytest.approx(0.0, abs=1e-6)

    def test_constant_critic(self):
        critic = lambda x: torch.zeros(x.shape[0])
        value = gradient_penalty(critic, torch.rand(3, 5), torch.rand(3, 5))
        assert float(value) == pytest.approx(1.0, abs=1e-6)

    def test_swap_with_mirrored_eps(self):
        # swapping real/fake while mapping eps -> 1 - eps interpolates the
        # same points, so the penalty is identical
        torch.manual_seed(0)
        critic = lambda x: (x.reshape(x.shape[0], -1) ** 2).sum(dim=1)
        real = torch.rand(5, 3, 2)
        fake = torch.rand(5, 3, 2)
        eps = torch.rand(5)
        a = gradient_penalty(critic, real, fake, eps=eps)
        b = gradient_penalty(critic, fake, real, eps=1.0 - eps)
        assert float(a.detach()) == pytest.approx(float(b.detach()), rel=1e-12)

    def test_seeded_generator_reproducible(self):
        critic = lambda x: x.reshape(x.shape[0], -1).sum(dim=1)
        real, fake = torch.rand(4, 4), torch.rand(4, 4)
        a = gradient_penalty(critic, real, fake, generator=torch.Generator().manual_seed(3))
        b = gradient_penalty(critic, real, fake, generator=torch.Generator().manual_seed(3))
        assert float(a.detach()) == float(b.detach())
