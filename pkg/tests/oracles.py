"""Reference implementations used only by the tests.

They are deliberately different from the package routines (bisection,
grids, finite differences) so that agreement is meaningful.
"""
from __future__ import annotations

import itertools

import numpy as np


def bisect_project_simplex(v, iters: int = 64) -> np.ndarray:
    """Euclidean projection onto the simplex by bisection on the threshold."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0)


def simplex_grid(n: int, res: float) -> np.ndarray:
    """All points of the n-simplex whose coordinates are multiples of ``res``."""
    N = int(round(1 / res))
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        a = np.arange(N + 1) / N
        return np.stack([a, 1 - a], axis=1)
    if n == 3:
        i, j = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="ij")
        keep = i + j <= N
        i, j = i[keep], j[keep]
        return np.stack([i, j, N - i - j], axis=1) / N
    pts = [c for c in itertools.product(range(N + 1), repeat=n - 1) if sum(c) <= N]
    return np.array([[*c, N - sum(c)] for c in pts]) / N


def extended_simplex_grid(achieved, res: float) -> np.ndarray:
    achieved = np.asarray(achieved, dtype=bool)
    sub = simplex_grid(int((~achieved).sum()), res)
    pts = np.zeros((len(sub), achieved.size))
    pts[:, ~achieved] = sub
    return pts


def grid_nearest(w, achieved, res: float):
    """Closest grid point of the extended simplex and its squared distance."""
    pts = extended_simplex_grid(achieved, res)
    d2 = ((pts - np.asarray(w)) ** 2).sum(axis=1)
    k = int(np.argmin(d2))
    return pts[k], float(d2[k])


def central_diff(f, x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), floor))


def random_simplex_point(rng, m: int) -> np.ndarray:
    w = rng.exponential(size=m)
    if rng.random() < 0.3:
        w[rng.random(m) < 0.3] = 0.0
    if w.sum() == 0:
        w[0] = 1.0
    return w / w.sum()


def pgd_minmax(losses, gamma: float, steps: int = 1000) -> np.ndarray:
    """Projected gradient descent on sum(w*f) + gamma/2 ||w - u||^2 (half step)."""
    losses = np.asarray(losses, float)
    m = losses.size
    u = np.full(m, 1.0 / m)
    w = u.copy()
    eta = 0.5 / gamma
    for _ in range(steps):
        w = bisect_project_simplex(w - eta * (losses + gamma * (w - u)))
    return w


def _near_relu_kink(model, x, h) -> bool:
    acts = model._forward_cache(np.asarray(x, float))
    return any(np.any(np.abs(a) < 10 * h * (1 + np.abs(a).max())) for a in acts[1:-1])


def model_gradient_error(rng, h: float = 1e-5) -> float:
    """Relative error of one random (model, input, loss-kind) gradient against central differences."""
    from tamoo.models import LossKind, init_classifier

    while True:
        d = int(rng.integers(1, 33))
        M = int(rng.integers(2, 9))
        hidden = [(), (int(rng.integers(2, 17)),), (int(rng.integers(2, 13)), int(rng.integers(2, 13)))][rng.integers(3)]
        model = init_classifier((d, *hidden, M), rng)
        model = type(model)(model.weights, tuple(rng.normal(0, 0.3, b.shape) for b in model.biases))
        x = rng.random(d)
        kind = LossKind(["ce", "kl", "cw"][rng.integers(3)], float(rng.random()))
        if kind.name == "kl":
            target = rng.dirichlet(np.ones(M))
        else:
            target = int(rng.integers(M))
        if _near_relu_kink(model, x, h):
            continue
        if kind.name == "cw":
            z = np.delete(model.logits(x), target)
            top2 = np.sort(z)[-2:] if z.size > 1 else np.array([0.0, 1.0])
            if top2[1] - top2[0] < 1e-3:
                continue
        g = model.grad_input(x, target, kind)
        fd = central_diff(lambda v: float(model.loss(v, target, kind)), x, h)
        return rel_err(g, fd)


def bundle_gradient_error(bundle, i, delta, h: float = 1e-5, params=None) -> float:
    """Relative error of a bundle task gradient against central differences."""
    if params is None:
        f = lambda v: bundle.eval_loss(i, v)
        g = bundle.eval_grad(i, delta)
    else:
        f = lambda v: float(bundle.loss_and_grad(i, v, params)[0])
        g = bundle.loss_and_grad(i, delta, params)[1]
    return rel_err(g, central_diff(f, delta, h))
