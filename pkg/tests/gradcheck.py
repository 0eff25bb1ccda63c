"""Central finite-difference checks along random unit directions.

Piecewise-linear pieces (relu, max pooling) make the loss non-smooth on a
measure-zero set. When a kink falls inside [-h, h] the central difference
is biased by roughly |f(h) - 2 f(0) + f(-h)| / 2h. Such draws are detected
through that second difference and redrawn; a wrong gradient on a smooth
neighbourhood still fails.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mmnas import tensor as T
from mmnas.tensor import Tensor

H = 1e-5
KINK_TOL = 1e-5  # caps kink bias of an accepted draw at a tenth of the 1e-4 tolerance
MAX_DRAWS = 10


def rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def projected(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalar loss sum(fn() * R) with a fixed random R, so every output entry matters."""
    holder = {}

    def loss():
        out = fn()
        if out.size == 1:
            return out
        if "r" not in holder:
            holder["r"] = rng.standard_normal(out.shape)
        return T.tsum(T.mul(out, Tensor(holder["r"])))
    return loss


def _analytic(loss_fn, leaves):
    for t in leaves:
        t.grad = None
    T.backward(loss_fn())
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in leaves]


def _along(loss_fn, leaves, dirs, h):
    base = [t.data.copy() for t in leaves]
    vals = []
    with T.no_grad():
        for s in (1.0, 0.0, -1.0):
            for t, b, v in zip(leaves, base, dirs):
                t.data = b + s * h * v
            vals.append(loss_fn().item())
    for t, b in zip(leaves, base):
        t.data = b
    up, mid, down = vals
    return (up - down) / (2 * h), abs(up - 2 * mid + down) / (2 * h)


def check_directions(loss_fn, leaves: Sequence[Tensor], draw: Callable[[], list[np.ndarray]],
                     h: float = H) -> float:
    """Relative error of <grad, v> against the central difference along a smooth draw of v."""
    grads = _analytic(loss_fn, leaves)
    err = 0.0
    for _ in range(MAX_DRAWS):
        dirs = draw()
        analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, dirs))
        numeric, kink = _along(loss_fn, leaves, dirs, h)
        err = rel_err(analytic, numeric)
        if kink <= KINK_TOL * max(abs(numeric), abs(analytic), 1e-300):
            return err
    return err


def unit_direction(rng, shapes) -> list[np.ndarray]:
    vs = [rng.standard_normal(s) for s in shapes]
    norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
    return [v / norm for v in vs]


def directional_errors(loss_fn, tensors: Sequence[Tensor], rng: np.random.Generator,
                       h: float = H) -> list[float]:
    """One check per tensor along a random unit direction in that tensor alone."""
    return [check_directions(loss_fn, [t], lambda t=t: unit_direction(rng, [t.shape]), h)
            for t in tensors]


def joint_error(loss_fn, tensors: Sequence[Tensor], rng: np.random.Generator, h: float = H) -> float:
    """A single check along a random unit direction spanning all tensors at once."""
    return check_directions(loss_fn, tensors, lambda: unit_direction(rng, [t.shape for t in tensors]), h)


def coordinate_error(loss_fn, t: Tensor, rng: np.random.Generator, h: float = H) -> float:
    """Check a single entry; each draw picks a fresh random entry."""
    def draw():
        v = np.zeros(t.shape)
        v[tuple(int(rng.integers(n)) for n in t.shape)] = 1.0
        return [v]
    return check_directions(loss_fn, [t], draw, h)
