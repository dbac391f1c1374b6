"""White-box FGSM and DeepFool attacks and the misclassification-success metric.

Single-example attacks work on float images in ``[0, 1]`` with shape
``(H, W, C)``. Dataset-level attacks take and return ``uint8`` datasets.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data_io import Dataset
from .nn import Model, backward, logit_jacobian, logits, predict_batch, to_input

METHODS = ("fgsm", "deepfool")
DEGENERATE_NORM = 1e-12
FGSM_CHUNK = 128


@dataclass(frozen=True)
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.02
    overshoot: float = 0.02
    max_iter: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    @property
    def tag(self) -> str:
        return self.method


@dataclass(frozen=True)
class AttackResult:
    """Outcome of one attack.

    ``label_before`` is the true label when one was supplied, otherwise the
    model's prediction on the clean input; ``success`` means the label after
    the attack differs from it.
    """

    x_original: np.ndarray
    x_adversarial: np.ndarray
    delta: np.ndarray
    label_before: int
    label_after: int
    success: bool
    linf_norm: float
    l2_norm: float
    iterations: int


def _result(model, x, x_adv, label_before, iterations) -> AttackResult:
    delta = x_adv - x
    label_after = int(logits(model, x_adv[None])[0].argmax())
    return AttackResult(x, x_adv, delta, int(label_before), label_after,
                        label_after != label_before, float(np.abs(delta).max(initial=0.0)),
                        float(np.linalg.norm(delta)), iterations)


def _as_input(x) -> np.ndarray:
    x = np.asarray(x)
    return to_input(x) if x.dtype == np.uint8 else x.astype(np.float32)


def fgsm(model: Model, x, y_true: int, epsilon: float) -> AttackResult:
    """One signed-gradient step of size ``epsilon`` on the training loss."""
    x = _as_input(x)
    if x.shape != tuple(model.spec.input_dims):
        raise ValueError(f"input shape {x.shape} does not match {model.spec.input_dims}")
    _, grad, _ = backward(model, x[None], [y_true], need_params=False)
    x_adv = np.clip(x + np.float32(epsilon) * np.sign(grad[0]), 0.0, 1.0).astype(np.float32)
    return _result(model, x, x_adv, y_true, 1)


def _quantized(x_adv: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x_adv * 255.0), 0, 255).astype(np.uint8)


def deepfool(model: Model, x, cfg: AttackConfig = AttackConfig(method="deepfool"),
             y_true: int | None = None, quantize: bool = False) -> AttackResult:
    """Iterative minimal-L2 attack that steps across the nearest linearised boundary.

    Intermediate iterates are not clamped. After each step the candidate
    ``clamp(x + (1 + overshoot) * total_step)`` is classified; the loop stops
    once that label differs from the original one. With ``quantize`` the
    candidate is rounded to 8-bit levels before the check, so the returned
    image stays adversarial when stored as ``uint8``.
    """
    x = _as_input(x)
    if x.shape != tuple(model.spec.input_dims):
        raise ValueError(f"input shape {x.shape} does not match {model.spec.input_dims}")
    x64 = x.astype(np.float64)
    z0 = logits(model, x[None])[0]
    original = int(z0.argmax())
    if y_true is not None and original != y_true:
        return _result(model, x, x.copy(), y_true, 0)

    def candidate(total):
        adv = np.clip(x64 + (1 + cfg.overshoot) * total, 0.0, 1.0)
        if quantize:
            return to_input(_quantized(adv))
        return adv.astype(np.float32)

    total = np.zeros_like(x64)
    xi = x64.copy()
    x_adv = x.copy()
    for it in range(1, cfg.max_iter + 1):
        z, jac = logit_jacobian(model, xi.astype(np.float32))
        z = z.astype(np.float64)
        jac = jac.reshape(len(z), -1).astype(np.float64)
        w = jac - jac[original]
        f = z - z[original]
        norms = np.linalg.norm(w, axis=1)
        others = [k for k in range(len(z)) if k != original and norms[k] >= DEGENERATE_NORM]
        if not others:
            return _result(model, x, x_adv, original if y_true is None else y_true, it - 1)
        ratios = np.array([abs(f[k]) / norms[k] for k in others])
        best = others[int(ratios.argmin())]
        step = (abs(f[best]) / norms[best] ** 2) * w[best]
        total += step.reshape(x.shape)
        xi = x64 + total
        x_adv = candidate(total)
        if int(logits(model, x_adv[None])[0].argmax()) != original:
            return _result(model, x, x_adv, original if y_true is None else y_true, it)
    return _result(model, x, x_adv, original if y_true is None else y_true, cfg.max_iter)


def _fgsm_batch(model: Model, images: np.ndarray, labels: np.ndarray, epsilon: float) -> np.ndarray:
    """FGSM on ``uint8`` images; the perturbation is truncated toward the original
    8-bit value so the L-infinity bound survives quantisation."""
    levels = np.floor(epsilon * 255.0 + 1e-6)
    out = images.copy()
    for s in range(0, len(images), FGSM_CHUNK):
        x = to_input(images[s:s + FGSM_CHUNK])
        _, grad, _ = backward(model, x, labels[s:s + FGSM_CHUNK], need_params=False, mean=False)
        moved = images[s:s + FGSM_CHUNK].astype(np.int32) + (levels * np.sign(grad)).astype(np.int32)
        out[s:s + FGSM_CHUNK] = np.clip(moved, 0, 255).astype(np.uint8)
    return out


def attack_dataset(model: Model, dataset: Dataset, cfg: AttackConfig, threads: int = 1):
    """Attack every instance the model classifies correctly; pass the rest through.

    Returns ``(adversarial_dataset, results)`` where ``results[i]`` is the
    :class:`AttackResult` for instance ``i`` (built from the stored 8-bit
    images) or ``None`` if it was not attacked.
    """
    if len(dataset) == 0:
        raise ValueError("cannot attack an empty dataset")
    pred, _ = predict_batch(model, dataset.images)
    correct = np.flatnonzero(pred == dataset.labels)
    adv_images = dataset.images.copy()
    iterations = dict.fromkeys(correct.tolist(), 1)

    if cfg.method == "fgsm":
        if len(correct) and cfg.epsilon > 0:
            adv_images[correct] = _fgsm_batch(model, dataset.images[correct],
                                              dataset.labels[correct], cfg.epsilon)
    else:
        def run(i):
            return deepfool(model, dataset.images[i], cfg, int(dataset.labels[i]), quantize=True)

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            outcomes = list(pool.map(run, correct.tolist()))
        for i, res in zip(correct.tolist(), outcomes):
            adv_images[i] = _quantized(res.x_adversarial)
            iterations[i] = res.iterations

    adv_pred, _ = predict_batch(model, adv_images)
    results: list[AttackResult | None] = [None] * len(dataset)
    for i in correct.tolist():
        x0 = to_input(dataset.images[i])
        xa = to_input(adv_images[i])
        delta = xa - x0
        results[i] = AttackResult(x0, xa, delta, int(dataset.labels[i]), int(adv_pred[i]),
                                  bool(adv_pred[i] != dataset.labels[i]),
                                  float(np.abs(delta).max(initial=0.0)),
                                  float(np.linalg.norm(delta)), iterations[i])
    meta = {"attack": cfg.method}
    if cfg.method == "fgsm":
        meta["epsilon"] = repr(cfg.epsilon)
    else:
        meta.update(overshoot=repr(cfg.overshoot), max_iter=str(cfg.max_iter))
    return dataset.with_images(adv_images, name=f"{dataset.name}-{cfg.method}", **meta), results


def success_rate(clean_pred, adv_pred, labels) -> float:
    clean_pred, adv_pred, labels = map(np.asarray, (clean_pred, adv_pred, labels))
    if not (clean_pred.shape == adv_pred.shape == labels.shape):
        raise ValueError("prediction and label arrays are not aligned")
    correct = clean_pred == labels
    if not correct.any():
        raise ValueError("no correctly classified instances; success rate undefined")
    return float((correct & (adv_pred != labels)).sum() / correct.sum())


def misclassification_success(model: Model, clean_set: Dataset, adv_set: Dataset) -> float:
    """Share of correctly classified clean instances whose adversarial twin is misclassified."""
    if len(clean_set) != len(adv_set) or not np.array_equal(clean_set.labels, adv_set.labels):
        raise ValueError("clean and adversarial sets are not aligned")
    clean_pred, _ = predict_batch(model, clean_set.images)
    adv_pred, _ = predict_batch(model, adv_set.images)
    return success_rate(clean_pred, adv_pred, clean_set.labels)


def calibrate_epsilon(model: Model, dataset: Dataset, target: float = 0.5,
                      candidates=None) -> tuple[float, float]:
    """Smallest FGSM epsilon from ``candidates`` reaching ``target`` success.

    Returns ``(epsilon, rate)``; raises if no candidate reaches the target.
    """
    if candidates is None:
        candidates = [k / 255 for k in range(1, 33)]
    rate = 0.0
    for eps in sorted(candidates):
        adv, _ = attack_dataset(model, dataset, AttackConfig("fgsm", eps))
        rate = misclassification_success(model, dataset, adv)
        if rate >= target:
            return float(eps), rate
    raise ValueError(f"no epsilon reached success {target}; best was {rate:.3f}")
