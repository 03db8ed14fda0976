"""Reconstruction losses and the critic gradient penalty.

All functions accept torch tensors or anything ``torch.as_tensor`` takes,
preserve dtype (so float64 finite-difference checks work), and return
0-dim tensors that carry gradients when the inputs do.
"""

from __future__ import annotations

import torch

from .errors import NonFiniteError, ShapeError, ZeroNormError


def _as_pair(x, y) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(x)
    y = torch.as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if not x.is_floating_point():
        x = x.float()
    if not y.is_floating_point():
        y = y.float()
    return x, y


def l2_loss(x, y) -> torch.Tensor:
    """Mean squared difference over every element of the stacks."""
    x, y = _as_pair(x, y)
    return ((x - y) ** 2).mean()


def l1_loss(x, y) -> torch.Tensor:
    """Mean absolute difference over every element of the stacks."""
    x, y = _as_pair(x, y)
    return (x - y).abs().mean()


def cosine_distance(x, y) -> torch.Tensor:
    """1 minus the cosine of the angle between the vectorized stacks.

    Zero for positively collinear stacks, 1 for orthogonal ones; requires
    both stacks to have nonzero norm.
    """
    x, y = _as_pair(x, y)
    xf = x.reshape(-1)
    yf = y.reshape(-1)
    nx = torch.linalg.vector_norm(xf)
    ny = torch.linalg.vector_norm(yf)
    if float(nx.detach()) == 0.0 or float(ny.detach()) == 0.0:
        raise ZeroNormError("cosine distance undefined for an all-zero stack")
    distance = 1.0 - (xf * yf).sum() / (nx * ny)
    # identical stacks can round a hair below zero in float32
    return torch.clamp(distance, min=0.0)


def gradient_penalty(
    critic,
    real,
    fake,
    *,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Unit-gradient-norm penalty on random real/fake interpolates.

    ``critic`` maps a batch to per-sample scores; ``eps`` (uniform in
    [0, 1], one value per sample) is drawn from ``generator`` unless
    given explicitly.
    """
    real, fake = _as_pair(real, fake)
    if real.ndim < 1:
        raise ShapeError("gradient penalty needs a batch dimension")
    batch = real.shape[0]
    if eps is None:
        eps = torch.rand(batch, generator=generator, dtype=real.dtype)
    else:
        eps = torch.as_tensor(eps, dtype=real.dtype)
        if eps.numel() != batch:
            raise ShapeError(f"eps must hold one value per sample, got {eps.numel()}")
    eps = eps.reshape(batch, *([1] * (real.ndim - 1)))
    mixed = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    scores = torch.as_tensor(critic(mixed))
    if scores.grad_fn is None:  # constant critic: zero gradient everywhere
        grads = torch.zeros_like(mixed)
    else:
        grads = torch.autograd.grad(
            outputs=scores.sum(),
            inputs=mixed,
            create_graph=True,
            allow_unused=True,
        )[0]
        if grads is None:
            grads = torch.zeros_like(mixed)
    norms = grads.reshape(batch, -1).norm(2, dim=1)
    penalty = ((norms - 1.0) ** 2).mean()
    if not torch.isfinite(penalty):
        raise NonFiniteError("gradient penalty overflowed")
    return penalty
