"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def _rel_err(ad: np.ndarray, fd: np.ndarray) -> float:
    if ad.size == 0:
        return 0.0
    return float(np.max(np.abs(ad - fd) / np.maximum(1e-8, np.abs(ad) + np.abs(fd))))


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)."""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    f(xt).backward()
    ad = xt.grad if xt.grad is not None else np.zeros_like(base)
    fd = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(Tensor(base)).item()
        flat[i] = old - h
        down = f(Tensor(base)).item()
        flat[i] = old
        fd.reshape(-1)[i] = (up - down) / (2 * h)
    return _rel_err(ad, fd)


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Gradient check of a closure over named parameters.

    ``max_coords`` samples a subset of coordinates per parameter to bound cost.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for name, p in params.items():
        ad_full = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        ad = ad_full.reshape(-1)[idx]
        fd = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            fd[n] = (up - down) / (2 * h)
        worst = max(worst, _rel_err(ad, fd))
    return worst
