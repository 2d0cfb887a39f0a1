"""The numeric gradient oracle itself: catches bugs, tolerates kinks."""

import numpy as np
import pytest
import torch

from itl.gradcheck import check_gradients, check_model_gradients, finite_difference_grad
from itl.nets import SegmentorSpec, build_segmentor


def test_finite_difference_matches_analytic_on_polynomial():
    t = torch.tensor([1.5, -0.7, 2.0], dtype=torch.float64, requires_grad=True)
    loss_fn = lambda: (t ** 3).sum()
    fd = finite_difference_grad(loss_fn, t, 0)
    assert abs(fd - 3 * 1.5 ** 2) < 1e-6


class _WrongGrad(torch.autograd.Function):
    """Reports twice the true gradient; the checker must flag it."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x ** 2).sum()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 4.0 * x


def test_planted_gradient_bug_is_detected():
    t = torch.tensor([0.3, 0.9], dtype=torch.float64, requires_grad=True)
    with pytest.raises(AssertionError, match="mismatch"):
        check_gradients(lambda: _WrongGrad.apply(t), [t], n_checks=2)


def test_refinement_does_not_excuse_bugs_at_any_step():
    t = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
    with pytest.raises(AssertionError):
        check_gradients(lambda: _WrongGrad.apply(t), [t], n_checks=1, refinements=4)


def test_float32_tensors_are_rejected():
    t = torch.tensor([1.0], dtype=torch.float32, requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        check_gradients(lambda: (t ** 2).sum(), [t])


@pytest.mark.parametrize("seed", [11, 14, 16, 18, 19])
def test_relu_kinks_are_resolved_by_refinement(seed):
    # seeds chosen to straddle activation kinks at the base step size
    model = build_segmentor(SegmentorSpec(base_width=4), seed=seed).double()
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(0.05, 0.95, size=(1, 4, 8, 8, 8))).double()

    def loss_fn():
        probs = model(x)
        return (probs[:, 1] ** 2).mean() + probs[:, 2].mean()

    check_model_gradients(loss_fn, model, n_checks=6, seed=seed)
