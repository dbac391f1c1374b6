"""Shared fixtures: finite-difference oracle and small datasets."""

import math

import numpy as np

from jpegdefense.nn import (
    Dense,
    Flatten,
    Model,
    NetworkSpec,
    Softmax,
    build_network,
    forward,
    loss_cross_entropy,
)
from jpegdefense.nn.layers import MaxPool, ReLU
from jpegdefense.nn.network import _run

FD_STEP = 1e-3


def gradient_check_fixture():
    """Toy-architecture net on 6x6 inputs (2659 parameters), batch of two.

    Seed 1 keeps every ReLU mask and pooling argmax fixed under all +-FD_STEP
    probes, so the loss is smooth inside each finite-difference stencil.
    """
    model = build_network("toy", (6, 6, 3), 3, seed=1)
    rng = np.random.default_rng(101)
    for name in model.params:
        if name.endswith(".b"):
            model.params[name] = (rng.standard_normal(model.params[name].shape) * 0.1).astype(np.float32)
    x = rng.random((2, 6, 6, 3)).astype(np.float32).astype(np.float64)
    return model, x, np.array([0, 1])


def _pattern(model, x):
    _, caches = _run(model, x, False, None, np.float64)
    return [c if isinstance(layer, ReLU) else c[0]
            for layer, c in zip(model.spec.layers, caches) if isinstance(layer, (ReLU, MaxPool))]


def numeric_gradients(model, x, y, train_seed=None):
    """Central differences of the mean cross-entropy, evaluated in float64.

    Raises if any probe changes the piecewise-linear activation pattern.
    """
    m64 = Model(model.spec, {k: np.array(v, dtype=np.float64) for k, v in model.params.items()})
    x64 = np.array(x, dtype=np.float64)
    reference = _pattern(m64, x64)

    def loss():
        rng = None if train_seed is None else np.random.default_rng(train_seed)
        probs = forward(m64, x64, train_mode=train_seed is not None, rng=rng, dtype=np.float64)
        return loss_cross_entropy(probs, y)

    out = {}
    for name, arr in list(m64.params.items()) + [("input", x64)]:
        grad = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + FD_STEP
            plus = loss()
            kinked = any(not np.array_equal(a, b) for a, b in zip(_pattern(m64, x64), reference))
            arr[idx] = orig - FD_STEP
            minus = loss()
            kinked = kinked or any(not np.array_equal(a, b)
                                   for a, b in zip(_pattern(m64, x64), reference))
            arr[idx] = orig
            if kinked:
                raise AssertionError(f"finite-difference probe crosses a kink at {name}{idx}")
            grad[idx] = (plus - minus) / (2 * FD_STEP)
        out[name] = grad
    return out


def relative_error(analytic, numeric):
    """Norm-wise relative error of one gradient tensor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def naive_dct(block):
    """Textbook four-loop DCT-II, kept independent of the matrix form."""
    out = np.zeros((8, 8))
    for u in range(8):
        for v in range(8):
            cu = 1 / math.sqrt(2) if u == 0 else 1.0
            cv = 1 / math.sqrt(2) if v == 0 else 1.0
            s = 0.0
            for x in range(8):
                for y in range(8):
                    s += (block[x][y]
                          * math.cos((2 * x + 1) * u * math.pi / 16)
                          * math.cos((2 * y + 1) * v * math.pi / 16))
            out[u, v] = 0.25 * cu * cv * s
    return out


def linear_model(weights, bias, dims):
    """Softmax regression on a flattened input; ``weights`` is (features, classes)."""
    weights = np.asarray(weights, np.float32)
    spec = NetworkSpec("linear", dims, weights.shape[1], (Flatten(), Dense(weights.shape[1]), Softmax()))
    return Model(spec, {"layer1.w": weights, "layer1.b": np.asarray(bias, np.float32)})


def brute_force_min_flip(m, x, n_dirs=20000, t_max=2.0):
    """Smallest step along sampled unit directions that changes the argmax (2-D input)."""
    angles = np.linspace(0, 2 * np.pi, n_dirs, endpoint=False)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    w = m.params["layer1.w"].astype(np.float64)
    b = m.params["layer1.b"].astype(np.float64)
    z = x @ w + b
    c = int(z.argmax())
    best = np.inf
    for k in range(w.shape[1]):
        if k == c:
            continue
        # along direction u the gap z_k - z_c changes linearly: gap + t * (u @ (w_k - w_c))
        gap = z[k] - z[c]
        rate = dirs @ (w[:, k] - w[:, c])
        t = np.where(rate > 0, -gap / np.where(rate > 0, rate, 1), np.inf)
        best = min(best, t.min())
    return best
