"""Dataset container, binary I/O, and the compositional synthetic-shapes task."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .models import build_text_bank, load_text_bank, save_text_bank

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
RGB = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.90, 0.85, 0.15),
}


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    classes: tuple
    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = ""

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be N×C×H×W, got shape {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint32)
            if self.labels.shape != (self.images.shape[0],):
                raise DatasetFormatError("label count does not match image count")
            if self.labels.size and int(self.labels.max()) >= len(self.classes):
                raise DatasetFormatError("label outside class list")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def labeled(self):
        return self.labels is not None

    def subset(self, indices, split=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.classes,
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            self.split if split is None else split,
        )

    def unlabeled(self):
        return Dataset(self.classes, self.images, None, self.split)


def save_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "classes": list(ds.classes),
        "image_shape": list(ds.image_shape),
        "count": len(ds),
        "dtype": "f32le",
        "labeled": ds.labeled,
        "split": ds.split,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    ds.images.astype("<f4").tofile(os.path.join(out_dir, "images.bin"))
    labels_path = os.path.join(out_dir, "labels.bin")
    if ds.labeled:
        ds.labels.astype("<u4").tofile(labels_path)
    elif os.path.exists(labels_path):
        os.remove(labels_path)


def load_dataset(in_dir):
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    if meta.get("dtype", "f32le") != "f32le":
        raise DatasetFormatError(f"unsupported dtype {meta['dtype']!r}")
    shape = tuple(int(s) for s in meta["image_shape"])
    n = int(meta["count"])
    images = np.fromfile(os.path.join(in_dir, "images.bin"), dtype="<f4")
    if images.size != n * int(np.prod(shape)):
        raise DatasetFormatError(
            f"images.bin holds {images.size} floats, meta expects {n} × {shape}"
        )
    if not np.all(np.isfinite(images)):
        raise DatasetFormatError("images.bin contains non-finite pixels")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise DatasetFormatError("pixels outside [0, 1]")
    labels = None
    if meta.get("labeled", False):
        labels = np.fromfile(os.path.join(in_dir, "labels.bin"), dtype="<u4")
        if labels.size != n:
            raise DatasetFormatError(f"labels.bin holds {labels.size} labels, meta expects {n}")
    return Dataset(
        meta["classes"], images.astype(np.float32).reshape((n,) + shape),
        None if labels is None else labels.astype(np.uint32), meta.get("split", ""),
    )


# ---------------------------------------------------------------- synthetic task


def class_name(color, shape):
    return f"{color} {shape}"


def _checkerboard_split(shapes, colors):
    train, held = [], []
    for i, s in enumerate(shapes):
        for j, c in enumerate(colors):
            (train if (i + j) % 2 == 0 else held).append(class_name(c, s))
    return train, held


def _default_groups(held, colors, k=3):
    # same-colour classes share a group, so every task needs shape cues
    buckets = [[n for n in held if n.split()[0] == c] for c in colors]
    buckets = [b for b in buckets if b]
    groups = [[] for _ in range(min(k, len(buckets)))]
    for i, bucket in enumerate(buckets):
        groups[i % len(groups)].extend(bucket)
    return groups


@dataclass
class SynthSpec:
    """Recipe for the synthetic shapes-and-colours task.

    Classes are "<colour> <shape>".  By default train and held-out classes
    form a 4×4 checkerboard, so every held-out class shares its colour and
    its shape with some training class.
    """

    shapes: tuple = SHAPES
    colors: tuple = COLORS
    train_classes: tuple | None = None
    heldout_groups: tuple | None = None
    pretrain_per_class: int = 100
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 32
    noise: float = 0.05
    embed_dim: int = 32
    bank_sigma: float = 0.05
    seed: int = 0
    all_classes: tuple = field(init=False)

    def __post_init__(self):
        self.all_classes = tuple(class_name(c, s) for s in self.shapes for c in self.colors)
        train, held = _checkerboard_split(self.shapes, self.colors)
        if self.train_classes is None:
            self.train_classes = tuple(train)
        if self.heldout_groups is None:
            held = [c for c in self.all_classes if c not in self.train_classes]
            self.heldout_groups = tuple(tuple(g) for g in _default_groups(held, self.colors))
        self.train_classes = tuple(self.train_classes)
        self.heldout_groups = tuple(tuple(g) for g in self.heldout_groups)
        self.validate()

    @property
    def heldout_classes(self):
        return tuple(c for g in self.heldout_groups for c in g)

    def validate(self):
        known = set(self.all_classes)
        for name in self.train_classes + self.heldout_classes:
            if name not in known:
                raise ValueError(f"unknown class {name!r}")
        train = set(self.train_classes)
        held = self.heldout_classes
        if len(set(held)) != len(held):
            raise ValueError("held-out groups overlap")
        if train & set(held):
            raise ValueError(f"train and held-out classes overlap: {sorted(train & set(held))}")
        train_attrs = [set(n.split()) for n in train]
        for name in held:
            if not any(set(name.split()) & a for a in train_attrs):
                raise ValueError(f"held-out class {name!r} shares no attribute with training classes")


def _shape_mask(shape, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "triangle":
        top, height = -r, 1.8 * r
        frac = (dy - top) / height
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * r)
    if shape == "cross":
        t = r / 3.0
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render(color, shape, size, rng, noise):
    """One 3×size×size image: a coloured shape on a dark noisy background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = rng.uniform(0.22, 0.34) * size
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    mask = _shape_mask(shape, yy, xx, cy, cx, r)
    bg = rng.uniform(0.05, 0.2)
    gain = rng.uniform(0.8, 1.0)
    img = np.full((3, size, size), bg)
    for ch, v in enumerate(RGB[color]):
        img[ch][mask] = gain * v
    img += noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_split(classes, per_class, spec, stream, split):
    rng = np.random.default_rng([spec.seed, stream])
    images = np.empty((len(classes) * per_class, 3, spec.image_size, spec.image_size), np.float32)
    labels = np.repeat(np.arange(len(classes), dtype=np.uint32), per_class)
    for i, label in enumerate(labels):
        color, shape = classes[label].split()
        images[i] = render(color, shape, spec.image_size, rng, spec.noise)
    return Dataset(classes, images, labels, split)


@dataclass
class SynthBundle:
    spec: SynthSpec
    pretrain: Dataset
    train: Dataset
    train_test: Dataset
    heldout: list
    banks: dict

    def heldout_sets(self):
        return [(ds.split, ds, self.banks[ds.split]) for ds in self.heldout]


def gen_synthetic(spec=None):
    """Render every split of the synthetic task plus its compositional text banks.

    Splits: ``pretrain`` covers all classes (stands in for the broad data a
    dual encoder is pretrained on), ``train``/``train_test`` cover the
    adaptation classes, and ``heldout_<g>`` are the zero-shot tasks.
    """
    spec = spec or SynthSpec()
    spec.validate()

    def bank(names):
        return build_text_bank(names, spec.embed_dim, "compositional", spec.seed, spec.bank_sigma)

    pretrain = render_split(spec.all_classes, spec.pretrain_per_class, spec, 0, "pretrain")
    train = render_split(spec.train_classes, spec.train_per_class, spec, 1, "train")
    train_test = render_split(spec.train_classes, spec.test_per_class, spec, 2, "train_test")
    heldout = [
        render_split(group, spec.test_per_class, spec, 3 + g, f"heldout_{g}")
        for g, group in enumerate(spec.heldout_groups)
    ]
    banks = {"pretrain": bank(spec.all_classes), "train": bank(spec.train_classes)}
    banks["train_test"] = banks["train"]
    for ds in heldout:
        banks[ds.split] = bank(ds.classes)
    return SynthBundle(spec, pretrain, train, train_test, heldout, banks)


def save_bundle(bundle, out_dir):
    """Write every split as a dataset directory and every bank as ``banks/<split>.json``."""
    os.makedirs(os.path.join(out_dir, "banks"), exist_ok=True)
    for ds in [bundle.pretrain, bundle.train, bundle.train_test] + list(bundle.heldout):
        save_dataset(ds, os.path.join(out_dir, ds.split))
    for name, bank in sorted(bundle.banks.items()):
        save_text_bank(bank, os.path.join(out_dir, "banks", f"{name}.json"))
    spec = bundle.spec
    doc = {
        "shapes": list(spec.shapes), "colors": list(spec.colors),
        "train_classes": list(spec.train_classes),
        "heldout_groups": [list(g) for g in spec.heldout_groups],
        "pretrain_per_class": spec.pretrain_per_class, "train_per_class": spec.train_per_class,
        "test_per_class": spec.test_per_class, "image_size": spec.image_size, "noise": spec.noise,
        "embed_dim": spec.embed_dim, "bank_sigma": spec.bank_sigma, "seed": spec.seed,
    }
    with open(os.path.join(out_dir, "spec.json"), "w") as fh:
        json.dump(doc, fh, indent=1)


def dataset_dirs(data_dir, prefix="heldout_"):
    """Dataset directories under ``data_dir``: itself if it is one, else subdirs named ``prefix*``."""
    if os.path.exists(os.path.join(data_dir, "meta.json")):
        return [data_dir]
    found = sorted(
        os.path.join(data_dir, d) for d in os.listdir(data_dir)
        if d.startswith(prefix) and os.path.exists(os.path.join(data_dir, d, "meta.json"))
    )
    if not found:
        raise DatasetFormatError(f"no dataset directories matching {prefix}* in {data_dir}")
    return found


def load_eval_sets(data_dir, banks_dir, prefix="heldout_"):
    """(name, dataset, bank) tasks; each bank is ``banks_dir/<split>.json``."""
    sets = []
    for path in dataset_dirs(data_dir, prefix):
        ds = load_dataset(path)
        name = ds.split or os.path.basename(os.path.normpath(path))
        bank = load_text_bank(os.path.join(banks_dir, f"{name}.json"))
        if tuple(bank.names) != tuple(ds.classes):
            raise DatasetFormatError(f"bank {name}.json rows do not match the classes of {path}")
        sets.append((name, ds, bank))
    return sets


def load_bundle(in_dir):
    """Inverse of :func:`save_bundle`."""
    with open(os.path.join(in_dir, "spec.json")) as fh:
        doc = json.load(fh)
    doc["shapes"], doc["colors"] = tuple(doc["shapes"]), tuple(doc["colors"])
    doc["train_classes"] = tuple(doc["train_classes"])
    doc["heldout_groups"] = tuple(tuple(g) for g in doc["heldout_groups"])
    spec = SynthSpec(**doc)
    split = {name: load_dataset(os.path.join(in_dir, name)) for name in ("pretrain", "train", "train_test")}
    heldout = [load_dataset(os.path.join(in_dir, f"heldout_{g}")) for g in range(len(spec.heldout_groups))]
    banks = {}
    for fname in sorted(os.listdir(os.path.join(in_dir, "banks"))):
        if fname.endswith(".json"):
            banks[fname[:-5]] = load_text_bank(os.path.join(in_dir, "banks", fname))
    return SynthBundle(spec, split["pretrain"], split["train"], split["train_test"], heldout, banks)
