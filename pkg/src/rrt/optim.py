"""Decoupled-weight-decay Adam and gradient clipping."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor

__all__ = ["AdamW", "clip_global_grad_norm", "global_grad_norm"]


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Moment buffers are zero-initialized at construction.  Weight decay is
    applied directly to the parameters, never through the moments.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-4,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """One in-place update; every parameter must carry a gradient."""
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"AdamW.step: parameter {i} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay != 0.0:
                p.data -= p.data.dtype.type(self.lr * self.weight_decay) * p.data
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.data.dtype, copy=False
            )


def global_grad_norm(params: Sequence[Tensor]) -> float:
    """Joint L2 norm of all gradients.  Per-tensor sums of squares come from
    a single pairwise-summed dot product; the scalars accumulate in
    float64."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.ravel()
            total += float(np.dot(g, g))
    return math.sqrt(total)


def clip_global_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip global norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * p.grad.dtype.type(factor)).astype(
                    p.grad.dtype, copy=False
                )
    return norm
