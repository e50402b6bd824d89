"""Smooth minimum over a finite set of branch values.

Each movement can serve its queued vehicles with several different crossing
splits, each with its own optimal cost.  Taking the hard minimum over those
branch costs would make the upper-level objective nondifferentiable exactly
where branches swap, so we blend them with the standard log-sum-exp softmin

    F = -(1/beta) * log(sum_b exp(-beta * F_b)),

which is smooth, sits within ``log(B)/beta`` below the true minimum, and
converges to it as ``beta`` grows.

The blend weights ``w_b`` form a softmax over ``-beta * F_b``.  When each
branch value depends on a parameter vector, the chain rule gives

    grad F   = sum_b w_b g_b
    hess F   = sum_b w_b H_b - beta * (sum_b w_b g_b g_b^T - gbar gbar^T)

with ``gbar = grad F``.  The correction term is the negative covariance of the
branch gradients under ``w``; it is what makes the composite Hessian agree
with finite differences of the composite gradient (verified in the tests).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SoftMinResult", "soft_min"]


@dataclass(frozen=True)
class SoftMinResult:
    value: float
    weights: np.ndarray          # (B,) convex combination over branches
    gradient: np.ndarray | None  # (d,) when branch gradients were given
    hessian: np.ndarray | None   # (d, d) when branch Hessians were given


def soft_min(
    values: np.ndarray,
    beta: float = 10.0,
    gradients: np.ndarray | None = None,
    hessians: np.ndarray | None = None,
) -> SoftMinResult:
    """Smooth minimum of ``values`` with optional chain-rule derivatives.

    ``gradients`` is (B, d) of per-branch gradients and ``hessians`` (B, d, d)
    of per-branch Hessians with respect to the same parameter vector; pass
    them to get the derivatives of the blended value.  Hessians require
    gradients.  Values may be arbitrarily large: the log-sum-exp is shifted
    by the minimum so only differences enter the exponentials.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("values must be a nonempty 1-d array")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if hessians is not None and gradients is None:
        raise ValueError("hessians require gradients")

    m = float(values.min())
    z = np.exp(-beta * (values - m))
    s = float(z.sum())
    value = m - np.log(s) / beta
    w = z / s

    gbar = None
    if gradients is not None:
        gradients = np.asarray(gradients, dtype=float)
        if gradients.shape[0] != values.size:
            raise ValueError("one gradient per branch required")
        gbar = w @ gradients

    hess = None
    if hessians is not None:
        hessians = np.asarray(hessians, dtype=float)
        if hessians.shape[0] != values.size:
            raise ValueError("one Hessian per branch required")
        hess = np.einsum("b,bij->ij", w, hessians)
        second_moment = np.einsum("b,bi,bj->ij", w, gradients, gradients)
        hess = hess - beta * (second_moment - np.outer(gbar, gbar))

    return SoftMinResult(float(value), w, gbar, hess)
