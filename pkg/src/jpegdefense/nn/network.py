"""Network specs, models, and exact forward/backward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    Conv,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool,
    ReLU,
    Softmax,
    conv_backward,
    conv_forward,
    conv_input_grad,
    output_shape,
    param_shapes,
    pool_backward,
    pool_forward,
    softmax,
)

PROB_FLOOR = 1e-12
ARCHITECTURES = ("cifar10", "gtsrb", "toy")
EVAL_CHUNK = 256


@dataclass(frozen=True)
class NetworkSpec:
    arch_id: str
    input_dims: tuple[int, int, int]
    classes: int
    layers: tuple[Layer, ...]

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-example activation shapes, one more entry than there are layers."""
        shapes = [tuple(self.input_dims)]
        for layer in self.layers:
            shapes.append(output_shape(layer, shapes[-1]))
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, (layer, shape) in enumerate(zip(self.layers, self.shapes())):
            for name, s in param_shapes(layer, shape).items():
                out[f"layer{i}.{name}"] = s
        return out

    def validate(self) -> None:
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ValueError("network must end with Softmax")
        shapes = self.shapes()
        if shapes[-1] != (self.classes,):
            raise ValueError(f"network output {shapes[-1]} does not match {self.classes} classes")
        for layer in self.layers:
            if isinstance(layer, Dropout) and not 0 <= layer.rate < 1:
                raise ValueError(f"dropout rate must be in [0, 1), got {layer.rate}")


@dataclass
class Model:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    rng_seed: int = 0

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.rng_seed)

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def _block(filters: int, pool: int) -> list[Layer]:
    return [Conv(filters), ReLU(), Conv(filters), ReLU(), MaxPool(pool, 2)]


def make_spec(arch_id: str, input_dims, classes: int, dropout: float = 0.5) -> NetworkSpec:
    input_dims = tuple(int(d) for d in input_dims)
    if len(input_dims) != 3 or min(input_dims) < 1:
        raise ValueError(f"input dims must be (H, W, C), got {input_dims}")
    if classes < 2:
        raise ValueError("need at least two classes")
    if arch_id == "cifar10":
        body = _block(32, 3) + _block(64, 3)
        head = [Dense(512), ReLU(), Dropout(dropout)]
        stages = 2
    elif arch_id == "gtsrb":
        body = _block(32, 2) + _block(64, 2) + _block(128, 2)
        head = [Dense(512), ReLU(), Dropout(dropout)]
        stages = 3
    elif arch_id == "toy":
        body = [Conv(8), ReLU(), MaxPool(2, 2)]
        head = [Dense(32), ReLU(), Dropout(dropout)]
        stages = 1
    else:
        raise ValueError(f"unknown architecture {arch_id!r}; expected one of {ARCHITECTURES}")
    step = 2 ** stages
    if input_dims[0] % step or input_dims[1] % step:
        raise ValueError(f"{arch_id} needs height and width divisible by {step}, got {input_dims}")
    spec = NetworkSpec(arch_id, input_dims, classes,
                       tuple(body + [Flatten()] + head + [Dense(classes), Softmax()]))
    spec.validate()
    return spec


def init_params(spec: NetworkSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".w"):
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return params


def build_network(arch_id: str, input_dims, classes: int, seed: int = 0,
                  dropout: float = 0.5) -> Model:
    spec = make_spec(arch_id, input_dims, classes, dropout)
    return Model(spec, init_params(spec, seed), seed)


def to_input(images: np.ndarray) -> np.ndarray:
    """Map ``uint8`` images to the network's ``[0, 1]`` float32 input space."""
    return np.asarray(images, dtype=np.float32) / np.float32(255.0)


def _check_batch(spec: NetworkSpec, batch: np.ndarray) -> None:
    if batch.ndim != 4 or batch.shape[1:] != tuple(spec.input_dims):
        raise ValueError(f"batch shape {batch.shape} does not match input dims {spec.input_dims}")


def _run(model: Model, x: np.ndarray, train_mode: bool, rng, dtype):
    """Forward pass returning logits and the per-layer cache."""
    spec = model.spec
    _check_batch(spec, x)
    x = x.astype(dtype, copy=False)
    caches = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            w = model.params[f"layer{i}.w"].astype(dtype, copy=False)
            b = model.params[f"layer{i}.b"].astype(dtype, copy=False)
            out, cols = conv_forward(x, w, b, layer.kernel)
            caches.append((cols, x.shape[-1]))
            x = out
        elif isinstance(layer, Dense):
            w = model.params[f"layer{i}.w"].astype(dtype, copy=False)
            b = model.params[f"layer{i}.b"].astype(dtype, copy=False)
            caches.append(x)
            x = x @ w + b
        elif isinstance(layer, ReLU):
            mask = x > 0
            caches.append(mask)
            x = x * mask
        elif isinstance(layer, MaxPool):
            x, cache = pool_forward(x, layer.size, layer.stride)
            caches.append(cache)
        elif isinstance(layer, Flatten):
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dropout):
            if train_mode and layer.rate > 0:
                if rng is None:
                    raise ValueError("train_mode forward needs an rng for dropout")
                keep = 1.0 - layer.rate
                mask = (rng.random(x.shape) < keep).astype(dtype) / dtype(keep)
                caches.append(mask)
                x = x * mask
            else:
                caches.append(None)
        elif isinstance(layer, Softmax):
            caches.append(None)
    return x, caches


def _unwind(model: Model, caches, dlogits, dtype, need_params=True, need_input=True):
    """Backpropagate ``dlogits`` (gradient w.r.t. pre-softmax scores)."""
    spec = model.spec
    grads = {}
    d = dlogits
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, cache = spec.layers[i], caches[i]
        if isinstance(layer, Softmax):
            continue
        if isinstance(layer, Dense):
            w = model.params[f"layer{i}.w"].astype(dtype, copy=False)
            if need_params:
                grads[f"layer{i}.w"] = cache.T @ d
                grads[f"layer{i}.b"] = d.sum(axis=0)
            d = d @ w.T
        elif isinstance(layer, Conv):
            cols, c = cache
            w = model.params[f"layer{i}.w"].astype(dtype, copy=False)
            want_dx = need_input or i > 0
            if need_params:
                d, grads[f"layer{i}.w"], grads[f"layer{i}.b"] = conv_backward(
                    d, cols, w, layer.kernel, c, want_dx)
            else:
                d = conv_input_grad(d, w, layer.kernel, c)
        elif isinstance(layer, ReLU):
            d = d * cache
        elif isinstance(layer, MaxPool):
            d = pool_backward(d, cache, layer.size, layer.stride)
        elif isinstance(layer, Flatten):
            d = d.reshape(cache)
        elif isinstance(layer, Dropout):
            if cache is not None:
                d = d * cache
    return grads, (d if need_input else None)


def logits(model: Model, batch: np.ndarray, dtype=np.float32) -> np.ndarray:
    return _run(model, np.asarray(batch), False, None, dtype)[0]


def forward(model: Model, batch: np.ndarray, train_mode: bool = False, rng=None,
            dtype=np.float32) -> np.ndarray:
    """Class probabilities for a ``(N, H, W, C)`` float batch."""
    z, _ = _run(model, np.asarray(batch), train_mode, rng, dtype)
    return softmax(z)


def loss_cross_entropy(probs: np.ndarray, labels) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"expected {probs.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"label out of range for {probs.shape[1]} classes")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def backward(model: Model, batch: np.ndarray, labels, train_mode: bool = False, rng=None,
             dtype=np.float32, need_params: bool = True, mean: bool = True):
    """Gradients of mean cross-entropy w.r.t. every parameter and the input.

    Returns ``(param_grads, input_grad, loss)``. With ``mean=False`` the
    gradients are of the summed loss, so each input-gradient row is that
    example's own loss gradient.
    """
    batch = np.asarray(batch)
    z, caches = _run(model, batch, train_mode, rng, dtype)
    probs = softmax(z)
    loss = loss_cross_entropy(probs, labels)
    dz = probs.copy()
    dz[np.arange(len(dz)), np.asarray(labels)] -= 1
    if mean:
        dz /= len(dz)
    grads, dx = _unwind(model, caches, dz.astype(dtype), dtype, need_params=need_params)
    return grads, dx, loss


def logit_jacobian(model: Model, x: np.ndarray, dtype=np.float32):
    """Logits of one example ``(H, W, C)`` and their input gradients ``(K, H, W, C)``."""
    k = model.spec.classes
    batch = np.repeat(np.asarray(x)[None], k, axis=0)
    z, caches = _run(model, batch, False, None, dtype)
    _, jac = _unwind(model, caches, np.eye(k, dtype=dtype), dtype, need_params=False)
    return z[0], jac


def predict_batch(model: Model, images: np.ndarray):
    """Labels and confidences for ``uint8`` images, ties to the lowest class."""
    images = np.asarray(images)
    labels = np.empty(len(images), dtype=np.int64)
    conf = np.empty(len(images), dtype=np.float32)
    for s in range(0, len(images), EVAL_CHUNK):
        probs = forward(model, to_input(images[s:s + EVAL_CHUNK]))
        labels[s:s + EVAL_CHUNK] = probs.argmax(axis=1)
        conf[s:s + EVAL_CHUNK] = probs.max(axis=1)
    return labels, conf


def predict_proba(model: Model, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    out = np.empty((len(images), model.spec.classes), dtype=np.float32)
    for s in range(0, len(images), EVAL_CHUNK):
        out[s:s + EVAL_CHUNK] = forward(model, to_input(images[s:s + EVAL_CHUNK]))
    return out


def predict(model: Model, image: np.ndarray) -> tuple[int, float]:
    """Class and confidence for one ``uint8`` image or one float ``[0, 1]`` array."""
    image = np.asarray(image)
    x = to_input(image) if image.dtype == np.uint8 else image.astype(np.float32)
    probs = forward(model, x[None])[0]
    label = int(probs.argmax())
    return label, float(probs[label])


def accuracy(model: Model, images: np.ndarray, labels) -> float:
    pred, _ = predict_batch(model, images)
    return float((pred == np.asarray(labels)).mean())
