"""Datasets, file formats, and persistence.

Formats handled here:

* CIFAR-10 binary batches: records of one label byte followed by the
  red, green and blue planes (32x32 each).
* Generic datasets in the same record layout with a ``.meta`` sidecar
  (``key=value`` lines) carrying dims, class count and attack provenance.
* Binary PPM (P6, maxval 255).
* ``CARM`` model files.
* Sweep CSVs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Model, NetworkSpec
from .nn import layers as L

CIFAR_DIMS = (32, 32, 3)
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

MODEL_MAGIC = b"CARM"
MODEL_VERSION = 1

PHI = 0
"""Reserved test-quality value meaning "no compression applied"."""

SWEEP_HEADER = ["model_id", "train_quality", "test_quality", "attack", "epsilon",
                "accuracy", "misclass_success"]


class DataFormatError(ValueError):
    """A file does not follow the expected layout."""


class ModelFileError(ValueError):
    pass


class BadMagicError(ModelFileError):
    pass


class VersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class SpecMismatchError(ModelFileError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be uint8 (N, H, W, 3), got {self.images.dtype} "
                             f"{self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def with_images(self, images, name=None, **meta) -> "Dataset":
        return Dataset(images, self.labels.copy(), self.class_count,
                       self.name if name is None else name, {**self.meta, **meta})

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.name,
                       dict(self.meta))


# -- record layout (CIFAR-10 style) ----------------------------------------------------------

def _decode_records(raw: bytes, dims) -> tuple[np.ndarray, np.ndarray]:
    h, w, c = dims
    record = 1 + h * w * c
    if len(raw) % record:
        raise DataFormatError(f"file size {len(raw)} is not a multiple of the {record}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape(-1, c, h, w).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def _encode_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    if labels.size and labels.max() > 255:
        raise ValueError("labels above 255 do not fit the one-byte record layout")
    planar = images.transpose(0, 3, 1, 2).reshape(len(images), int(np.prod(images.shape[1:])))
    return np.concatenate([labels.astype(np.uint8)[:, None], planar], axis=1).tobytes()


def read_cifar10_batch(path) -> Dataset:
    images, labels = _decode_records(Path(path).read_bytes(), CIFAR_DIMS)
    if labels.size and labels.max() >= CIFAR_CLASSES:
        raise DataFormatError(f"{path}: label {labels.max()} out of range for CIFAR-10")
    return Dataset(images, labels, CIFAR_CLASSES, Path(path).stem)


def write_cifar10_batch(dataset: Dataset, path) -> None:
    if dataset.dims != CIFAR_DIMS:
        raise ValueError(f"CIFAR-10 records are 32x32x3, got {dataset.dims}")
    Path(path).write_bytes(_encode_records(dataset.images, dataset.labels))


def load_cifar10(path, split: str = "train") -> Dataset:
    """Load one batch file, or the ``split`` batches from an extracted directory."""
    path = Path(path)
    if path.is_file():
        return read_cifar10_batch(path)
    names = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
    if names is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    files = [path / n for n in names]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 batch files: {', '.join(missing)}")
    parts = [read_cifar10_batch(f) for f in files]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), CIFAR_CLASSES, f"cifar10-{split}")


def save_dataset(dataset: Dataset, path) -> None:
    """Write records plus a ``<path>.meta`` sidecar."""
    path = Path(path)
    path.write_bytes(_encode_records(dataset.images, dataset.labels))
    h, w, _ = dataset.dims
    meta = {"name": dataset.name, "height": h, "width": w, "class_count": dataset.class_count,
            "count": len(dataset), **dataset.meta}
    lines = [f"{k}={v}" for k, v in meta.items()]
    Path(f"{path}.meta").write_text("\n".join(lines) + "\n")


def _read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta_path = Path(f"{path}.meta")
    if not meta_path.exists():
        return read_cifar10_batch(path)
    meta = _read_kv(meta_path)
    try:
        dims = (int(meta.pop("height")), int(meta.pop("width")), 3)
        class_count = int(meta.pop("class_count"))
        count = int(meta.pop("count"))
    except KeyError as exc:
        raise DataFormatError(f"{meta_path}: missing key {exc}") from None
    images, labels = _decode_records(path.read_bytes(), dims)
    if len(labels) != count:
        raise DataFormatError(f"{path}: expected {count} records, found {len(labels)}")
    if labels.size and labels.max() >= class_count:
        raise DataFormatError(f"{path}: label {labels.max()} >= class count {class_count}")
    name = meta.pop("name", path.stem)
    return Dataset(images, labels, class_count, name, meta)


# -- PPM ------------------------------------------------------------------------------------

def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(data, 4)
    if magic != b"P6":
        raise DataFormatError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise DataFormatError(f"{path}: bad dimensions {w}x{h}")
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataFormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM output needs a uint8 (H, W, 3) array")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def resize_nearest(img: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    h, w = img.shape[:2]
    th, tw = dims
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return img[rows][:, cols]


def load_gtsrb(directory, index_file: str = "labels.csv", dims=(48, 48)) -> Dataset:
    """PPM images listed in an index CSV (``Filename`` and ``ClassId`` columns).

    Both ``;`` (the GTSRB annotation files) and ``,`` delimiters are accepted.
    Images are rescaled to ``dims`` with nearest-neighbour sampling.
    """
    directory = Path(directory)
    text = (directory / index_file).read_text()
    dialect = ";" if ";" in text.splitlines()[0] else ","
    rows = list(csv.DictReader(io.StringIO(text), delimiter=dialect))
    if not rows or "Filename" not in rows[0] or "ClassId" not in rows[0]:
        raise DataFormatError(f"{index_file}: needs Filename and ClassId columns")
    images = np.stack([resize_nearest(read_ppm(directory / r["Filename"]), dims) for r in rows])
    labels = np.array([int(r["ClassId"]) for r in rows])
    return Dataset(images, labels, 43, "gtsrb")


# -- synthetic data ---------------------------------------------------------------------------

def _shape_mask(kind: str, h: int, w: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 - 0.5 + rng.uniform(-h / 10, h / 10)
    cx = w / 2 - 0.5 + rng.uniform(-w / 10, w / 10)
    s = rng.uniform(0.25, 0.36) * min(h, w)
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dx) <= s * 0.85) & (np.abs(dy) <= s * 0.85)
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= s ** 2
    if kind == "cross":
        arm = s / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= s)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= s))
    if kind == "stripes":
        period = max(4, round(min(h, w) / 4))
        phase = rng.integers(0, period)
        return ((xx + phase) // (period / 2)) % 2 == 0
    if kind == "triangle":
        return (dy <= s * 0.8) & (dy >= -s) & (np.abs(dx) <= (dy + s) * 0.6)
    if kind == "ring":
        r2 = dx ** 2 + dy ** 2
        return (r2 <= s ** 2) & (r2 >= (0.55 * s) ** 2)
    if kind == "bars":
        period = max(4, round(min(h, w) / 4))
        phase = rng.integers(0, period)
        return ((yy + phase) // (period / 2)) % 2 == 0
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= s * 1.1
    raise ValueError(kind)


SHAPES = ("square", "circle", "cross", "stripes", "triangle", "ring", "bars", "diamond")


def generate_synthetic(classes: int, per_class: int, dims=(32, 32), seed: int = 0,
                       noise: float = 12.0, name: str = "synthetic") -> Dataset:
    """Class ``k`` draws ``SHAPES[k]`` in a jittered light colour on a dark noisy background.

    Labels are interleaved (0, 1, ..., k-1, 0, 1, ...) so any prefix is balanced.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} synthetic classes are available")
    h, w = dims[:2]
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.tile(np.arange(classes), per_class)
    images = np.empty((n, h, w, 3), dtype=np.uint8)
    for i, label in enumerate(labels):
        bg = rng.uniform(0, 110, 3)
        fg = rng.uniform(140, 255, 3)
        mask = _shape_mask(SHAPES[label], h, w, rng)
        img = np.where(mask[..., None], fg, bg) + rng.normal(0, noise, (h, w, 3))
        images[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, classes, name, {"seed": str(seed)})


# -- model files ------------------------------------------------------------------------------

_LAYER_TYPES = {cls.__name__: cls for cls in
                (L.Conv, L.MaxPool, L.ReLU, L.Dropout, L.Flatten, L.Dense, L.Softmax)}


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "arch_id": spec.arch_id,
        "input_dims": list(spec.input_dims),
        "classes": spec.classes,
        "layers": [{"type": type(l).__name__, **vars(l)} for l in spec.layers],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    layers = []
    for item in d["layers"]:
        item = dict(item)
        cls = _LAYER_TYPES.get(item.pop("type"))
        if cls is None:
            raise DataFormatError(f"unknown layer type in descriptor: {item}")
        layers.append(cls(**item))
    spec = NetworkSpec(d["arch_id"], tuple(d["input_dims"]), int(d["classes"]), tuple(layers))
    spec.validate()
    return spec


def save_model(model: Model, path) -> None:
    desc = json.dumps(spec_to_dict(model.spec), sort_keys=True).encode()
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<HI", MODEL_VERSION, len(desc)) + desc
    out += struct.pack("<qI", model.rng_seed, len(model.params))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        encoded = name.encode()
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def load_model(path, expect: NetworkSpec | None = None) -> Model:
    """Read a model file; ``expect`` makes a descriptor mismatch an error."""
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise BadMagicError(f"{path}: not a model file")
    if len(data) < 14:
        raise ModelFileError(f"{path}: truncated")
    (crc,) = struct.unpack("<I", data[-4:])
    version, desc_len = struct.unpack_from("<HI", data, 4)
    if version != MODEL_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {MODEL_VERSION}")
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError(f"{path}: CRC mismatch")
    pos = 10
    spec = spec_from_dict(json.loads(data[pos:pos + desc_len]))
    pos += desc_len
    seed, count = struct.unpack_from("<qI", data, pos)
    pos += 12
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = math.prod(shape) * 4
        params[name] = np.frombuffer(data[pos:pos + size], dtype="<f4").reshape(shape).astype(np.float32)
        pos += size
    expected = spec.param_shapes()
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ModelFileError(f"{path}: tensors do not match the network descriptor")
    if expect is not None and spec != expect:
        raise SpecMismatchError(
            f"{path}: holds a {spec.arch_id} {spec.input_dims}/{spec.classes} network, "
            f"expected {expect.arch_id} {expect.input_dims}/{expect.classes}")
    return Model(spec, params, seed)


# -- sweep CSV ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRecord:
    """One evaluated (model, test quality, dataset) cell.

    ``test_quality`` is an int quality, :data:`PHI` for no compression, or a
    label such as ``"100:20:10"`` for ensemble rows.
    """

    model_id: str
    train_quality: str
    test_quality: int | str
    attack: str
    epsilon: float | None
    accuracy: float
    misclassification_success: float | None = None

    def __post_init__(self):
        for rate in (self.accuracy, self.misclassification_success):
            if rate is not None and not 0.0 <= rate <= 1.0:
                raise ValueError(f"rate {rate} outside [0, 1]")


def _fmt_quality(q) -> str:
    return "phi" if q == PHI and not isinstance(q, str) else str(q)


def _fmt_rate(x) -> str:
    return "" if x is None else f"{x:.6f}"


def sweep_rows(records) -> list[list[str]]:
    return [[r.model_id, str(r.train_quality), _fmt_quality(r.test_quality), r.attack,
             "" if r.epsilon is None else repr(float(r.epsilon)),
             _fmt_rate(r.accuracy), _fmt_rate(r.misclassification_success)]
            for r in records]


def write_sweep_csv(records, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    writer.writerows(sweep_rows(records))
    Path(path).write_text(buf.getvalue())


def read_sweep_csv(path) -> list[SweepRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_HEADER:
            raise DataFormatError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for row in reader:
            tq = row["test_quality"]
            test_quality = PHI if tq == "phi" else int(tq) if tq.isdigit() else tq
            out.append(SweepRecord(
                row["model_id"], row["train_quality"], test_quality, row["attack"],
                float(row["epsilon"]) if row["epsilon"] else None,
                float(row["accuracy"]),
                float(row["misclass_success"]) if row["misclass_success"] else None))
        return out
