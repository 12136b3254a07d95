"""Datasets: synthetic generation, PGM folders, client partitioning, augmentation."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from fedmesh.pgm import PGMError, read_pgm, resize_nearest, write_pgm

log = logging.getLogger(__name__)

NORMAL, PNEUMONIA = 0, 1
CLASS_FOLDERS = {"normal": NORMAL, "pneumonia": PNEUMONIA}
FOLDER_NAMES = {NORMAL: "NORMAL", PNEUMONIA: "PNEUMONIA"}


class DataError(ValueError):
    pass


class PartitionError(DataError):
    def __init__(self, client_id, message):
        super().__init__(message)
        self.client_id = client_id


@dataclass(frozen=True, eq=False)
class Example:
    pixels: np.ndarray
    label: int
    source_id: str

    def __post_init__(self):
        if self.label not in (NORMAL, PNEUMONIA):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        self.pixels.flags.writeable = False

    def flat(self):
        return self.pixels.reshape(-1)


def as_arrays(examples):
    """Stack examples into ``(X [n, H*W] float64, y [n] int64)``."""
    if not examples:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    X = np.stack([ex.flat() for ex in examples]).astype(np.float64)
    y = np.array([ex.label for ex in examples], dtype=np.int64)
    return X, y


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: tuple
    test: tuple = ()

    def __post_init__(self):
        train_ids = {ex.source_id for ex in self.train}
        overlap = train_ids.intersection(ex.source_id for ex in self.test)
        if overlap:
            raise DataError(f"client {self.client_id}: examples in both train and test: {sorted(overlap)[:3]}")

    def train_arrays(self):
        return as_arrays(self.train)

    def histogram(self):
        labels = [ex.label for ex in self.train + self.test]
        return {"normal": labels.count(NORMAL), "pneumonia": labels.count(PNEUMONIA)}


# --- synthetic data -------------------------------------------------------------

def positive_count(n, imbalance):
    return int(math.floor(imbalance * n + 0.5))


def generate_synthetic(n, imbalance=0.7, image_side=14, seed=0):
    """Two Gaussian-blob texture classes; ``imbalance`` is the positive fraction.

    Normal images carry a blob in the upper-left quadrant, pneumonia images a
    wider, brighter blob in the lower right, both over a noisy background.
    """
    if n < 2 or image_side < 4 or not 0.0 < imbalance < 1.0:
        raise DataError(f"degenerate synthetic parameters n={n}, imbalance={imbalance}, side={image_side}")
    n_pos = positive_count(n, imbalance)
    if n_pos in (0, n):
        raise DataError(f"imbalance {imbalance} leaves one class empty at n={n}")

    rng = np.random.default_rng(seed)
    labels = np.array([PNEUMONIA] * n_pos + [NORMAL] * (n - n_pos))
    rng.shuffle(labels)

    side = image_side
    centers = np.where(labels[:, None] == PNEUMONIA, 0.65, 0.35) * (side - 1)
    centers = centers + rng.uniform(-0.08, 0.08, size=(n, 2)) * side
    sigma = np.where(labels == PNEUMONIA, 0.22, 0.16) * side * rng.uniform(0.9, 1.1, size=n)
    amp = np.where(labels == PNEUMONIA, 0.75, 0.55) * rng.uniform(0.85, 1.15, size=n)
    grid = np.arange(side, dtype=np.float64)
    dy = grid[None, :, None] - centers[:, 0, None, None]
    dx = grid[None, None, :] - centers[:, 1, None, None]
    blob = amp[:, None, None] * np.exp(-(dx ** 2 + dy ** 2) / (2 * sigma[:, None, None] ** 2))
    texture = 0.15 + rng.normal(0.0, 0.05, size=(n, side, side))
    images = np.clip(texture + blob, 0.0, 1.0)

    return [Example(images[i].copy(), int(labels[i]), f"synthetic-{seed}-{i}") for i in range(n)]


# --- image folders ----------------------------------------------------------------

class LoadedImages(list):
    """List of examples that also records how many files were skipped."""

    skipped = 0


def _class_of(folder):
    label = CLASS_FOLDERS.get(folder.lower())
    if label is None:
        raise DataError(f"unknown class folder {folder!r}; expected NORMAL or PNEUMONIA")
    return label


def _is_class_dir(name):
    return name.lower() in CLASS_FOLDERS


def load_image_folder(path, image_side=14):
    """Load ``<split>/<class>/<file>.pgm`` (or just ``<class>/<file>.pgm``).

    Images are resized to ``image_side`` square by nearest neighbor and
    scaled to [0, 1] by their maxval. Unreadable files are skipped.
    """
    if not os.path.isdir(path):
        raise DataError(f"no such dataset directory: {path}")
    entries = sorted(e for e in os.listdir(path) if os.path.isdir(os.path.join(path, e)))
    if entries and all(_is_class_dir(e) for e in entries):
        splits = [("", path)]
    else:
        splits = [(e, os.path.join(path, e)) for e in entries]

    out = LoadedImages()
    for split, split_dir in splits:
        for cls in sorted(os.listdir(split_dir)):
            cls_dir = os.path.join(split_dir, cls)
            if not os.path.isdir(cls_dir):
                continue
            label = _class_of(cls)
            for fname in sorted(os.listdir(cls_dir)):
                fpath = os.path.join(cls_dir, fname)
                if not os.path.isfile(fpath):
                    continue
                try:
                    raw, maxval = read_pgm(fpath)
                except (OSError, PGMError) as exc:
                    log.warning("skipping unreadable image %s: %s", fpath, exc)
                    out.skipped += 1
                    continue
                pixels = resize_nearest(raw, image_side).astype(np.float64) / maxval
                source = "/".join(p for p in (split, cls, fname) if p)
                out.append(Example(pixels, label, source))
    return out


def export_image_folder(examples, root, split="train"):
    """Write examples as 8-bit PGMs under ``root/split/<CLASS>/``."""
    for ex in examples:
        cls_dir = os.path.join(root, split, FOLDER_NAMES[ex.label])
        os.makedirs(cls_dir, exist_ok=True)
        name = ex.source_id.replace("/", "_") + ".pgm"
        write_pgm(os.path.join(cls_dir, name), np.floor(ex.pixels * 255 + 0.5), 255)


# --- partitioning -------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionPlan:
    num_clients: int
    strategy: str = "iid"
    alpha: float = 0.5
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.num_clients < 1:
            raise DataError("num_clients must be >= 1")
        if self.strategy not in ("iid", "label_skew"):
            raise DataError(f"unknown partition strategy {self.strategy!r}")
        if self.strategy == "label_skew" and not self.alpha > 0:
            raise DataError("label_skew needs alpha > 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise DataError("test_fraction must be in [0, 1)")


def assign_clients(labels, plan):
    """Per-client index lists, before the train/test split."""
    labels = np.asarray(labels)
    n, K = labels.size, plan.num_clients
    rng = np.random.default_rng(plan.seed)
    if plan.strategy == "iid":
        perm = rng.permutation(n)
        return [perm[k::K] for k in range(K)]

    shards = [[] for _ in range(K)]
    for cls in (NORMAL, PNEUMONIA):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(K, plan.alpha))
        cuts = (np.cumsum(props) * idx.size).astype(int)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            shards[k].extend(part.tolist())
    return [np.array(s, dtype=np.int64) for s in shards]


def partition(examples, plan):
    if len(examples) < plan.num_clients:
        raise DataError(f"{len(examples)} examples cannot cover {plan.num_clients} clients")
    shards = assign_clients([ex.label for ex in examples], plan)
    clients = []
    for k, shard in enumerate(shards):
        if len(shard) == 0:
            raise PartitionError(k, f"client {k} receives no examples under {plan.strategy}")
        order = np.random.default_rng([plan.seed, 1, k]).permutation(len(shard))
        n_test = int(len(shard) * plan.test_fraction)
        test = tuple(examples[shard[i]] for i in order[:n_test])
        train = tuple(examples[shard[i]] for i in order[n_test:])
        clients.append(ClientDataset(k, train, test))
    return clients


def central_test_set(clients):
    """Held-out evaluation set: every client's test split, in client order."""
    return [ex for c in clients for ex in c.test]


# --- augmentation -------------------------------------------------------------------

@dataclass(frozen=True)
class HorizontalFlip:
    probability: float = 1.0


@dataclass(frozen=True)
class Rotate:
    degrees: float


@dataclass(frozen=True)
class Shift:
    dx: int
    dy: int


@dataclass(frozen=True)
class Zoom:
    factor: float

    def __post_init__(self):
        if not self.factor > 0:
            raise DataError(f"zoom factor must be positive, got {self.factor}")


@dataclass(frozen=True)
class Brightness:
    scale: float


def _nearest(x):
    return np.floor(x + 0.5).astype(np.int64)


def _sample(img, src_i, src_j):
    h, w = img.shape
    ii, jj = _nearest(src_i), _nearest(src_j)
    inside = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
    out = np.zeros_like(img)
    out[inside] = img[ii[inside], jj[inside]]
    return out


def rotate(img, degrees):
    """Counter-clockwise rotation about the center, nearest neighbor, zero fill."""
    h, w = img.shape
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    i, j = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y = j - cj, ci - i
    xs = x * c + y * s
    ys = -x * s + y * c
    return _sample(img, ci - ys, cj + xs)


def shift(img, dx, dy):
    """Move content ``dx`` columns right and ``dy`` rows down, zero fill."""
    h, w = img.shape
    out = np.zeros_like(img)
    dx, dy = int(dx), int(dy)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        img[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    return out


def zoom(img, factor):
    if not factor > 0:
        raise DataError(f"zoom factor must be positive, got {factor}")
    h, w = img.shape
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    i, j = np.mgrid[0:h, 0:w].astype(np.float64)
    return _sample(img, ci + (i - ci) / factor, cj + (j - cj) / factor)


def augment(example, ops, seed=None):
    """Apply ``ops`` in order; the label is never touched."""
    rng = np.random.default_rng(seed)
    img = np.array(example.pixels, dtype=np.float64)
    for op in ops:
        if isinstance(op, HorizontalFlip):
            if op.probability >= 1.0 or rng.random() < op.probability:
                img = img[:, ::-1].copy()
        elif isinstance(op, Rotate):
            img = rotate(img, op.degrees)
        elif isinstance(op, Shift):
            img = shift(img, op.dx, op.dy)
        elif isinstance(op, Zoom):
            img = zoom(img, op.factor)
        elif isinstance(op, Brightness):
            img = np.clip(img * op.scale, 0.0, 1.0)
        else:
            raise DataError(f"unknown augmentation {op!r}")
    return Example(img, example.label, example.source_id)


@dataclass(frozen=True)
class AugmentPolicy:
    """Random ranges for the training-time augmentation set."""

    flip_probability: float = 0.5
    max_rotation: float = 10.0
    max_shift_fraction: float = 0.1
    zoom_range: float = 0.1
    brightness_range: float = 0.2

    def sample(self, rng, image_side):
        max_shift = int(round(self.max_shift_fraction * image_side))
        return [
            HorizontalFlip(self.flip_probability),
            Rotate(float(rng.uniform(-self.max_rotation, self.max_rotation))),
            Shift(int(rng.integers(-max_shift, max_shift + 1)), int(rng.integers(-max_shift, max_shift + 1))),
            Zoom(float(rng.uniform(1 - self.zoom_range, 1 + self.zoom_range))),
            Brightness(float(rng.uniform(1 - self.brightness_range, 1 + self.brightness_range))),
        ]


def augment_training_set(client, policy, seed):
    """Append one randomly augmented copy of every training example."""
    rng = np.random.default_rng([seed, 2, client.client_id])
    extra = []
    for ex in client.train:
        side = ex.pixels.shape[0]
        aug = augment(ex, policy.sample(rng, side), seed=int(rng.integers(2 ** 32)))
        extra.append(Example(aug.pixels, ex.label, ex.source_id + "+aug"))
    return ClientDataset(client.client_id, client.train + tuple(extra), client.test)
