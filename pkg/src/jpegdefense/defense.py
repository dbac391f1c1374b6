"""JPEG-compression defenses: pre-processing, vaccination, and the voting ensemble."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import codec
from .attacks import AttackConfig, attack_dataset, success_rate
from .data_io import PHI, Dataset, SweepRecord
from .nn import Model, TrainConfig, predict, predict_batch, predict_proba, train

log = logging.getLogger(__name__)

DEFAULT_QUALITIES = (100, 90, 80, 70, 60, 50, 40, 30, 20)


@dataclass(frozen=True)
class QualityGrid:
    qualities: tuple[int, ...] = DEFAULT_QUALITIES

    def __post_init__(self):
        qs = tuple(codec.check_quality(q) for q in self.qualities)
        if not qs:
            raise ValueError("quality grid is empty")
        if any(a <= b for a, b in zip(qs, qs[1:])):
            raise ValueError(f"quality grid must be strictly decreasing, got {qs}")
        object.__setattr__(self, "qualities", qs)

    @classmethod
    def parse(cls, text: str) -> "QualityGrid":
        """``start:stop:step`` (inclusive, descending) or a comma-separated list."""
        text = text.strip()
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise ValueError(f"grid must look like start:stop:step, got {text!r}")
            start, stop, step = (int(p) for p in parts)
            if step <= 0 or start < stop:
                raise ValueError(f"grid {text!r} must descend with a positive step")
            return cls(tuple(range(start, stop - 1, -step)))
        return cls(tuple(int(p) for p in text.split(",") if p.strip()))

    def __iter__(self):
        return iter(self.qualities)

    def __len__(self):
        return len(self.qualities)

    def __str__(self):
        qs = self.qualities
        if len(qs) > 2 and len({a - b for a, b in zip(qs, qs[1:])}) == 1:
            return f"{qs[0]}:{qs[-1]}:{qs[0] - qs[1]}"
        return ",".join(map(str, qs))


@dataclass
class VaccinatedSuite:
    base_model: Model
    models: dict[int, Model]
    grid: QualityGrid

    def __post_init__(self):
        if list(self.models) != list(self.grid):
            raise ValueError("suite needs exactly one model per grid quality, in grid order")
        for m in self.models.values():
            if m.spec != self.base_model.spec:
                raise ValueError("all suite models must share the base network spec")

    def named_models(self, include_base: bool = True) -> list[tuple[str, Model]]:
        out = [("M", self.base_model)] if include_base else []
        return out + [(f"M{q}", m) for q, m in self.models.items()]


@dataclass
class EnsembleVerdict:
    label: int
    votes: np.ndarray
    total_votes: int
    aggregate_confidence: np.ndarray = field(repr=False)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def compress_images(images: np.ndarray, quality: int) -> np.ndarray:
    """``compress`` over a stack; :data:`PHI` returns the images untouched."""
    return images if quality == PHI else codec.compress_batch(images, quality)


def defend_predict(model: Model, image: np.ndarray, quality: int) -> tuple[int, float]:
    return predict(model, codec.compress(image, quality))


def vaccinate(base: Model, train_set: Dataset, grid: QualityGrid = QualityGrid(),
              cfg: TrainConfig = TrainConfig()) -> VaccinatedSuite:
    """Retrain along the grid, each model warm-started from the previous one.

    ``M_q`` trains on the training set compressed at ``q``, starting from the
    weights of the model before it in the grid (the base model for the first).
    """
    models = {}
    previous = base
    for q in grid:
        compressed = train_set.with_images(compress_images(train_set.images, q))
        previous = train(previous, compressed, replace(cfg, seed=cfg.seed + q))
        models[q] = previous
        log.info("vaccinated model for quality %d", q)
    return VaccinatedSuite(base, models, grid)


def _vote_tensor(models: list[Model], images: np.ndarray, qualities, threads: int) -> np.ndarray:
    """Probabilities indexed ``[model, quality, instance, class]``."""
    compressed = _map(lambda q: compress_images(images, q), list(qualities), threads)
    pairs = [(mi, qi) for mi in range(len(models)) for qi in range(len(compressed))]
    probs = _map(lambda p: predict_proba(models[p[0]], compressed[p[1]]), pairs, threads)
    out = np.empty((len(models), len(compressed), len(images), models[0].spec.classes), np.float32)
    for (mi, qi), pr in zip(pairs, probs):
        out[mi, qi] = pr
    return out


def _verdicts(tensor: np.ndarray) -> list[EnsembleVerdict]:
    n_models, n_q, n, k = tensor.shape
    labels = tensor.argmax(axis=3).reshape(n_models * n_q, n)
    # fixed summation order keeps tie-breaks independent of scheduling
    conf = np.zeros((n, k), np.float64)
    for row in tensor.reshape(n_models * n_q, n, k):
        conf += row
    out = []
    for i in range(n):
        votes = np.bincount(labels[:, i], minlength=k)
        tied = np.flatnonzero(votes == votes.max())
        best = tied[np.argmax(conf[i, tied])]  # argmax picks the lowest index on equal confidence
        out.append(EnsembleVerdict(int(best), votes, int(votes.sum()), conf[i]))
    return out


def ensemble_predict_batch(suite: VaccinatedSuite, images: np.ndarray, qualities=None,
                           threads: int = 1) -> list[EnsembleVerdict]:
    """Every suite model votes on every image compressed at every quality."""
    qualities = suite.grid if qualities is None else qualities
    models = list(suite.models.values())
    if not models:
        raise ValueError("empty suite")
    return _verdicts(_vote_tensor(models, np.asarray(images), list(qualities), threads))


def ensemble_predict(suite: VaccinatedSuite, image: np.ndarray, qualities=None,
                     threads: int = 1) -> EnsembleVerdict:
    return ensemble_predict_batch(suite, np.asarray(image)[None], qualities, threads)[0]


def ensemble_accuracy(suite: VaccinatedSuite, dataset: Dataset, qualities=None,
                      threads: int = 1) -> float:
    verdicts = ensemble_predict_batch(suite, dataset.images, qualities, threads)
    return float(np.mean([v.label == y for v, y in zip(verdicts, dataset.labels)]))


def evaluate(models, dataset: Dataset, qualities, clean: Dataset | None = None,
             attack: str = "benign", epsilon: float | None = None,
             threads: int = 1) -> list[SweepRecord]:
    """Accuracy (and misclassification success) per model and test quality.

    ``models`` is a :class:`VaccinatedSuite` or a list of
    ``(model_id, train_quality, model)`` triples. ``qualities`` may contain
    :data:`PHI`. When ``clean`` is given, success counts instances the model
    classifies correctly uncompressed and gets wrong on the compressed
    adversarial image.
    """
    if isinstance(models, VaccinatedSuite):
        entries = [("M", "base", models.base_model)]
        entries += [(f"M{q}", str(q), m) for q, m in models.models.items()]
    else:
        entries = list(models)
    qualities = list(qualities)
    if clean is not None and (len(clean) != len(dataset)
                              or not np.array_equal(clean.labels, dataset.labels)):
        raise ValueError("clean and evaluated sets are not aligned")

    compressed = _map(lambda q: compress_images(dataset.images, q), qualities, threads)
    pairs = [(e, qi) for e in range(len(entries)) for qi in range(len(qualities))]

    def cell(pair):
        e, qi = pair
        return predict_batch(entries[e][2], compressed[qi])[0]

    preds = _map(cell, pairs, threads)
    clean_preds = {}
    if clean is not None:
        clean_preds = dict(zip(range(len(entries)),
                               _map(lambda e: predict_batch(entries[e][2], clean.images)[0],
                                    range(len(entries)), threads)))
    records = []
    for (e, qi), pred in zip(pairs, preds):
        model_id, train_q, _ = entries[e]
        success = None
        if clean is not None:
            success = success_rate(clean_preds[e], pred, dataset.labels)
        records.append(SweepRecord(model_id, train_q, qualities[qi], attack, epsilon,
                                   float((pred == dataset.labels).mean()), success))
    return records


def transferability_matrix(suite: VaccinatedSuite, dataset: Dataset, attack_cfg: AttackConfig,
                           include_base: bool = True, threads: int = 1):
    """Accuracy of model ``j`` on adversarial examples crafted against model ``i``.

    Returns ``(model_ids, matrix)``; the diagonal holds self-attack accuracy.
    """
    named = suite.named_models(include_base)
    adv_sets = [attack_dataset(m, dataset, attack_cfg, threads)[0] for _, m in named]

    def row(i):
        return [float((predict_batch(m, adv_sets[i].images)[0] == dataset.labels).mean())
                for _, m in named]

    matrix = np.array(_map(row, range(len(named)), threads))
    return [name for name, _ in named], matrix


def table_summary(base: Model, suite: VaccinatedSuite, benign: Dataset,
                  adversarial: dict[str, tuple[Dataset, float | None]], qualities=None,
                  threads: int = 1) -> list[SweepRecord]:
    """Original-model vs ensemble rows for the benign set and each adversarial set."""
    grid_label = str(suite.grid if qualities is None else QualityGrid(tuple(qualities)))
    sets = [("benign", benign, None)] + [(tag, ds, eps) for tag, (ds, eps) in adversarial.items()]
    clean_pred = predict_batch(base, benign.images)[0]
    records = []
    for tag, ds, eps in sets:
        pred = predict_batch(base, ds.images)[0]
        verdicts = ensemble_predict_batch(suite, ds.images, qualities, threads)
        ens = np.array([v.label for v in verdicts])
        base_success = ens_success = None
        if tag != "benign":
            base_success = success_rate(clean_pred, pred, ds.labels)
            ens_success = success_rate(clean_pred, ens, ds.labels)
        records.append(SweepRecord("original", "base", PHI, tag, eps,
                                   float((pred == ds.labels).mean()), base_success))
        records.append(SweepRecord("ensemble", str(suite.grid), grid_label, tag, eps,
                                   float((ens == ds.labels).mean()), ens_success))
    return records
