"""Central-difference gradient checks for scalar losses over torch tensors.

This is the numeric side of every gradient test in the suite: autograd
produces the analytic value, this module re-derives it from loss evaluations
alone, and the two must agree at 1e-3 relative tolerance, float64, h=1e-4.

Piecewise-linear activations (ReLU, LeakyReLU) make the loss nonsmooth on a
measure-zero set, and a finite step can straddle one or more kinks,
especially for early-layer weights whose perturbation fans out to many
activations. Such contamination is a discretization artifact, so it is
resolved by refinement: on a mismatch the step is shrunk (1e-5, then 1e-6)
and the entry passes only if the refined estimate agrees. A genuine
analytic-gradient bug disagrees at every step size and still fails.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def finite_difference_grad(loss_fn: Callable[[], torch.Tensor],
                           tensor: torch.Tensor, flat_index: int,
                           h: float = 1e-4) -> float:
    """d loss / d tensor[flat_index] by central differences; restores the tensor."""
    with torch.no_grad():
        flat = tensor.view(-1)
        orig = flat[flat_index].item()
        flat[flat_index] = orig + h
        up = float(loss_fn())
        flat[flat_index] = orig - h
        down = float(loss_fn())
        flat[flat_index] = orig
    return (up - down) / (2.0 * h)


def check_gradients(loss_fn: Callable[[], torch.Tensor],
                    tensors: Sequence[torch.Tensor],
                    n_checks: int = 5,
                    h: float = 1e-4,
                    rtol: float = 1e-3,
                    atol: float = 1e-6,
                    seed: int = 0,
                    refinements: int = 2) -> list[tuple[int, int, float, float]]:
    """Compare autograd and central differences on random parameter entries.

    Returns the checked (tensor_idx, flat_idx, analytic, numeric) tuples and
    raises AssertionError on the first disagreement that survives step
    refinement.
    """
    tensors = [t for t in tensors if t.requires_grad]
    if not tensors:
        raise ValueError("no tensors with requires_grad=True to check")
    for t in tensors:
        if t.dtype != torch.float64:
            raise ValueError("gradient checks must run at float64")

    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    rng = np.random.default_rng(seed)
    checked: list[tuple[int, int, float, float]] = []
    for _ in range(n_checks):
        ti = int(rng.integers(len(tensors)))
        fi = int(rng.integers(tensors[ti].numel()))
        grad = grads[ti]
        analytic = 0.0 if grad is None else float(grad.view(-1)[fi])

        step = h
        for attempt in range(refinements + 1):
            numeric = finite_difference_grad(loss_fn, tensors[ti], fi, h=step)
            err = abs(analytic - numeric)
            if err <= atol + rtol * max(abs(analytic), abs(numeric)):
                break
            if attempt == refinements:
                raise AssertionError(
                    f"gradient mismatch on tensor {ti} entry {fi}: "
                    f"analytic {analytic:.6e} vs numeric {numeric:.6e} "
                    f"(err {err:.2e} at h={step:.0e})"
                )
            step /= 10.0
        checked.append((ti, fi, analytic, numeric))
    return checked


def check_model_gradients(loss_fn: Callable[[], torch.Tensor],
                          model: torch.nn.Module, **kwargs) -> list:
    """Gradient-check a model's parameters against the numeric oracle."""
    return check_gradients(loss_fn, list(model.parameters()), **kwargs)
