"""Finite-difference gradient oracle and the differentiable-op table it is run over."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from machina import tensor as T

H = 1e-5
TOL = 1e-6


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords=None, h: float = H) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (modified in place and restored)."""
    coords = list(np.ndindex(arr.shape)) if coords is None else coords
    out = np.zeros(len(coords))
    for k, c in enumerate(coords):
        old = arr[c]
        arr[c] = old + h
        fp = f()
        arr[c] = old - h
        fm = f()
        arr[c] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def smooth_numeric_grad(f: Callable[[], float], arr: np.ndarray, coords, h: float = H):
    """Central differences plus a mask of coordinates where the function is smooth within +-h.

    Near a ReLU-style kink the central-difference error is O(h), elsewhere O(h^2); comparing
    steps h and h/2 separates the two, so coordinates straddling a kink can be left out.
    """
    g1 = numeric_grad(f, arr, coords, h)
    g2 = numeric_grad(f, arr, coords, h / 2)
    smooth = np.abs(g1 - g2) <= 1e-7 * np.maximum(np.abs(g1), 1.0)
    return g1, smooth


def check_op(build: Callable[..., T.Tensor], arrays: Sequence[np.ndarray], seed: int) -> float:
    """Max relative error between analytic and numeric gradients for every input array."""
    leaves = [T.tensor(a, requires_grad=True) for a in arrays]
    r = np.random.default_rng(10_000 + seed).standard_normal(build(*leaves).shape)

    def loss_of(ts):
        return T.tensor_sum(T.mul(build(*ts), T.constant(r)))

    T.backward(loss_of(leaves))
    worst = 0.0
    for leaf in leaves:
        def f():
            with T.no_grad():
                return loss_of([T.constant(x.data) for x in leaves]).item()

        num = numeric_grad(f, leaf.data)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _gdn_inputs(rng, c=3):
    return [rng.standard_normal((2, c, 3, 3)), rng.uniform(0.5, 1.5, c), rng.uniform(0.0, 0.3, (c, c))]


# name -> (build, input-maker); every builder returns a tensor that depends on all its inputs
OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b: T.add(a, b), lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))]),
    "add_bias": (lambda a, b: T.add(a, b), lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((1, 3, 1))]),
    "sub": (lambda a, b: T.sub(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
    "mul": (lambda a, b: T.mul(a, b), lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))]),
    "mul_bias": (lambda a, b: T.mul(a, b), lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((1, 3, 1))]),
    "scale": (lambda a: T.scale(a, -1.7), lambda r: [r.standard_normal((3, 4))]),
    "add_scalar": (lambda a: T.add_scalar(a, 0.3), lambda r: [r.standard_normal((3, 4))]),
    "square": (T.square, lambda r: [r.standard_normal((3, 4))]),
    "sqrt": (T.sqrt, lambda r: [r.uniform(0.5, 2.0, (3, 4))]),
    "exp": (T.exp, lambda r: [r.standard_normal((3, 4))]),
    "log": (T.log, lambda r: [r.uniform(0.5, 2.0, (3, 4))]),
    "sigmoid": (T.sigmoid, lambda r: [3 * r.standard_normal((3, 4))]),
    "softplus": (T.softplus, lambda r: [3 * r.standard_normal((3, 4))]),
    "tanh": (T.tanh, lambda r: [r.standard_normal((3, 4))]),
    "relu": (T.relu, lambda r: [_away_from_zero(r, (3, 4))]),
    "leaky_relu": (T.leaky_relu, lambda r: [_away_from_zero(r, (3, 4))]),
    "abs": (T.absolute, lambda r: [_away_from_zero(r, (3, 4))]),
    "lower_bound": (lambda a: T.lower_bound(a, 0.0), lambda r: [_away_from_zero(r, (3, 4))]),
    "sum_axis": (lambda a: T.tensor_sum(a, axis=(0, 2)), lambda r: [r.standard_normal((2, 3, 4))]),
    "sum_all": (T.tensor_sum, lambda r: [r.standard_normal((2, 3))]),
    "mean": (T.mean, lambda r: [r.standard_normal((2, 3))]),
    "reshape": (lambda a: T.reshape(a, (4, 6)), lambda r: [r.standard_normal((2, 3, 4))]),
    "permute": (lambda a: T.permute(a, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 4))]),
    "index_slice": (lambda a: T.index(a, (slice(None), slice(1, 3))), lambda r: [r.standard_normal((2, 4, 2))]),
    "index_fancy": (lambda a: T.index(a, (np.array([0, 1, 1, 0]), np.array([2, 0, 2, 2]))),
                    lambda r: [r.standard_normal((2, 3))]),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
               lambda r: [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)]),
    "conv2d_s1": (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=2),
                  lambda r: [r.standard_normal((1, 2, 4, 4)), r.standard_normal((2, 2, 5, 5)), r.standard_normal(2)]),
    "conv2d_transpose": (lambda x, w, b: T.conv2d_transpose(x, w, b, stride=2, padding=2, output_padding=1),
                         lambda r: [r.standard_normal((2, 2, 3, 3)), r.standard_normal((2, 3, 5, 5)),
                                    r.standard_normal(3)]),
    "conv2d_transpose_s1": (lambda x, w, b: T.conv2d_transpose(x, w, b, stride=1, padding=1),
                            lambda r: [r.standard_normal((1, 2, 3, 3)), r.standard_normal((2, 2, 3, 3)),
                                       r.standard_normal(2)]),
    "gdn": (lambda x, b, g: T.gdn(x, b, g), _gdn_inputs),
    "igdn": (lambda x, b, g: T.gdn(x, b, g, inverse=True), _gdn_inputs),
    "channel_matmul": (T.channel_matmul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5))]),
    "gaussian_likelihood": (T.gaussian_likelihood,
                            lambda r: [_away_from_zero(r, (3, 4), 0.1) * 2, r.uniform(0.2, 3.0, (3, 4))]),
    "bce_with_logits": (lambda z: T.bce_with_logits(z, (np.arange(12).reshape(3, 4) % 3 == 0).astype(float)),
                        lambda r: [2 * r.standard_normal((3, 4))]),
    "softmax_cross_entropy": (lambda z: T.softmax_cross_entropy(z, [0, 2, 1, 2]),
                              lambda r: [2 * r.standard_normal((4, 3))]),
    "smooth_l1": (lambda x: T.smooth_l1(x, np.linspace(-1, 1, 12).reshape(3, 4)),
                  lambda r: [np.linspace(-1, 1, 12).reshape(3, 4)
                             + np.where(r.random((3, 4)) < 0.5, 1, -1) * r.choice([0.3, 2.0], (3, 4))]),
}
