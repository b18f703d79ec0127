"""Finite-difference gradients and comparison against autograd."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from .types import GradCheckReport


def finite_diff_grad(scalar_fn: Callable[[np.ndarray], float], point, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``point``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    x = x0.copy()
    xf = x.reshape(-1)
    for k in range(xf.size):
        orig = xf[k]
        xf[k] = orig + eps
        f_plus = float(scalar_fn(x))
        xf[k] = orig - eps
        f_minus = float(scalar_fn(x))
        xf[k] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError(f"non-finite function value near coordinate {k}")
        flat[k] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def batched_finite_diff_grad(
    batch_fn: Callable[[np.ndarray], np.ndarray],
    point,
    eps: float = 1e-6,
    *,
    kink_rtol: float = 1e-3,
    max_shrinks: int = 3,
    chunk: int = 512,
) -> tuple[np.ndarray, int]:
    """Central differences with every perturbed point evaluated in batches.

    ``batch_fn`` maps ``[K, *shape]`` points to ``K`` values. A coordinate
    whose forward and backward one-sided slopes disagree by more than
    ``kink_rtol`` (relative) may straddle a non-differentiable point such as
    a ReLU or max-pool switch, so it is re-differenced with the step divided
    by 10. Smooth curvature shrinks that gap in proportion to the step, and
    the original estimate is kept. A gap that collapses means the kink has
    left the smaller step, so the refined value is taken. A gap that stays
    large means the kink is still inside, and the step keeps shrinking, up
    to ``max_shrinks`` times. A gap that grows is rounding noise; the
    previous estimate stands.

    Returns ``(grad, n_refined)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(point, dtype=np.float64)
    f0 = float(np.asarray(batch_fn(x0[None])).reshape(-1)[0])
    if not math.isfinite(f0):
        raise ValueError("non-finite function value at the base point")

    def slopes(coords, h):
        plus, minus = [], []
        for start in range(0, len(coords), chunk):
            idx = coords[start : start + chunk]
            pts = np.repeat(x0.reshape(1, -1), 2 * len(idx), axis=0)
            pts[np.arange(len(idx)), idx] += h
            pts[len(idx) + np.arange(len(idx)), idx] -= h
            vals = np.asarray(batch_fn(pts.reshape((-1,) + x0.shape)), dtype=np.float64).reshape(-1)
            plus.append(vals[: len(idx)])
            minus.append(vals[len(idx) :])
        fp, fm = np.concatenate(plus), np.concatenate(minus)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError("non-finite function value near the base point")
        return (fp - fm) / (2 * h), np.abs((fp - f0) - (f0 - fm)) / h, np.maximum(np.abs(fp - f0), np.abs(f0 - fm)) / h

    grad, gap, slope = slopes(np.arange(x0.size), eps)
    scale = max(float(np.abs(grad).max(initial=0.0)) * 1e-3, 1e-300)
    # one-sided slopes differing by a few ulps of f0 over h are just rounding
    noise = lambda h: 64 * np.finfo(np.float64).eps * max(abs(f0), 1e-300) / h
    active = np.flatnonzero((gap > kink_rtol * np.maximum(slope, scale)) & (gap > noise(eps)))
    refined = set(active.tolist())
    h = eps
    for _ in range(max_shrinks):
        if active.size == 0:
            break
        h /= 10.0
        g_new, gap_new, slope_new = slopes(active, h)
        ratio = gap_new / gap[active]
        # smooth curvature: the gap shrinks with the step, so the wider
        # (less rounding-prone) estimate stands
        smooth = (ratio >= 0.05) & (ratio <= 0.2)
        # rounding noise grows like 1/h, so a swelling gap means the smaller
        # step is the less trustworthy one
        noisy = ratio > 3.0
        take = ~smooth & ~noisy
        grad[active[take]] = g_new[take]
        kink = (ratio > 0.2) & ~noisy & (gap_new > kink_rtol * np.maximum(slope_new, scale)) & (gap_new > noise(h))
        gap[active] = gap_new
        active = active[kink]
    return grad.reshape(x0.shape), len(refined)


def max_relative_error(analytic, numeric, *, floor: float = 1e-3) -> float:
    """Largest per-entry ``|a - n| / max(|a|, |n|, s)``.

    ``s`` is ``floor`` times the largest numeric magnitude, which keeps
    entries that are zero up to rounding from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.max(np.abs(n), initial=0.0)) * floor, 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def check_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    *,
    name: str = "input",
    eps: float = 1e-6,
    threshold: float = 1e-3,
    batch_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> GradCheckReport:
    """Compare autograd's gradient of scalar ``fn`` at ``x`` with central differences.

    Runs in float64 regardless of the dtype of ``x``. With ``batch_fn``
    (stacked points ``[K, *x.shape]`` to ``K`` values of ``fn``) the
    differences come from :func:`batched_finite_diff_grad`.
    """
    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x64), x64)

    if batch_fn is not None:
        def many(arr):
            with torch.no_grad():
                return batch_fn(torch.from_numpy(arr)).numpy()

        numeric, _ = batched_finite_diff_grad(many, x64.detach().numpy(), eps)
        err = max_relative_error(analytic.numpy(), numeric)
        return GradCheckReport(name, err, err < threshold, threshold)

    def scalar(arr):
        with torch.no_grad():
            return fn(torch.from_numpy(arr)).item()

    numeric = finite_diff_grad(scalar, x64.detach().numpy(), eps)
    err = max_relative_error(analytic.numpy(), numeric)
    return GradCheckReport(name, err, err < threshold, threshold)
