"""Datasets: procedurally rendered localized-motif images and PPM directories."""

import os
from dataclasses import dataclass

import numpy as np

from .errors import UsageError

GLYPH = 12
MARGIN = 4


@dataclass
class ImageSet:
    images: np.ndarray  # uint8 [n, 3, R, R]
    labels: np.ndarray  # int64 [n]
    boxes: np.ndarray = None  # motif boxes [n, 4] (x0, y0, x1, y1), synthetic only

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self):
        return self.images.shape[-1]

    def subset(self, idx):
        return ImageSet(self.images[idx], self.labels[idx],
                        None if self.boxes is None else self.boxes[idx])


def _glyph_patterns(rng, count, min_distance=6):
    """Left-right symmetric 6x6 binary patterns, pairwise Hamming distance >= min_distance."""
    out = []
    while len(out) < count:
        half = rng.random((6, 3)) < 0.5
        pat = np.concatenate([half, half[:, ::-1]], axis=1)
        if pat.sum() < 8 or pat.sum() > 28:
            continue
        if all(np.sum(pat != o) >= min_distance for o in out):
            out.append(pat)
    return [np.kron(p, np.ones((2, 2), dtype=bool)) for p in out]


def _background(rng, r):
    coarse = rng.uniform(0.25, 0.75, size=(3, 5, 5))
    idx = np.linspace(0, 4, r)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, 4)
    f = idx - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i1] * f[None, :, None]
    img = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]
    return img + rng.normal(0.0, 0.04, size=img.shape)


def _stamp(img, pattern, x, y, rng):
    fg = rng.uniform(0.0, 0.2)
    bg = rng.uniform(0.8, 1.0)
    patch = np.where(pattern, fg, bg)
    img[:, y:y + GLYPH, x:x + GLYPH] = patch[None]


def _free_position(rng, r, taken):
    lo, hi = MARGIN, r - MARGIN - GLYPH
    for _ in range(200):
        x, y = rng.integers(lo, hi + 1, size=2)
        if all(abs(x - tx) >= GLYPH or abs(y - ty) >= GLYPH for tx, ty in taken):
            return int(x), int(y)
    raise UsageError(f"resolution {r} is too small to place the motifs")


def generate_synthetic(spec, seed=None, distractors=2):
    """Render ``classes * per_class`` images; class identity lives in one small glyph.

    Every image has a smooth colour background, ``distractors`` glyphs drawn
    from a pool shared by all classes, and the class glyph at a random
    position. Deterministic for a given ``seed`` (default ``spec.seed``).
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    r = spec.resolution
    patterns = _glyph_patterns(rng, spec.classes + 6)
    class_glyphs, pool = patterns[:spec.classes], patterns[spec.classes:]
    n = spec.classes * spec.per_class
    images = np.empty((n, 3, r, r), dtype=np.uint8)
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    boxes = np.empty((n, 4))
    for i, c in enumerate(labels):
        img = _background(rng, r)
        taken = []
        for _ in range(distractors):
            x, y = _free_position(rng, r, taken)
            taken.append((x, y))
            _stamp(img, pool[rng.integers(len(pool))], x, y, rng)
        x, y = _free_position(rng, r, taken)
        _stamp(img, class_glyphs[c], x, y, rng)
        boxes[i] = (x, y, x + GLYPH, y + GLYPH)
        images[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return ImageSet(images, labels.astype(np.int64), boxes)


def split(dataset, test_fraction):
    """Per-class split: the last ``test_fraction`` of each class goes to the held-out set."""
    train_idx, test_idx = [], []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        k = int(round(len(idx) * test_fraction))
        train_idx.extend(idx[:len(idx) - k])
        test_idx.extend(idx[len(idx) - k:])
    return dataset.subset(np.array(train_idx, dtype=int)), dataset.subset(np.array(test_idx, dtype=int))


def to_float(images):
    return images.astype(np.float64) / 255.0


def augment(images, rng, pad=MARGIN, flip=True):
    """Random crop (reflect-padded by ``pad``) and horizontal flip on a float batch."""
    b, _, r, _ = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
    flips = rng.random(b) < 0.5
    for i in range(b):
        y, x = offs[i]
        crop = padded[i, :, y:y + r, x:x + r]
        out[i] = crop[:, :, ::-1] if flip and flips[i] else crop
    return out


# -- PPM directory datasets -------------------------------------------------


def write_ppm(path, image):
    """Write a ``[3, H, W]`` uint8 array as binary PPM (P6)."""
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise UsageError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_directory(dataset, root):
    """One sub-directory per class (``class_000``), one PPM per image."""
    for c in np.unique(dataset.labels):
        os.makedirs(os.path.join(root, f"class_{c:03d}"), exist_ok=True)
    for i, (img, c) in enumerate(zip(dataset.images, dataset.labels)):
        write_ppm(os.path.join(root, f"class_{c:03d}", f"{i:05d}.ppm"), img)


def read_directory(root):
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise UsageError(f"{root}: no class sub-directories")
    images, labels = [], []
    for c, name in enumerate(classes):
        folder = os.path.join(root, name)
        for fname in sorted(os.listdir(folder)):
            if fname.endswith(".ppm"):
                images.append(read_ppm(os.path.join(folder, fname)))
                labels.append(c)
    if not images:
        raise UsageError(f"{root}: no .ppm images found")
    return ImageSet(np.stack(images), np.array(labels, dtype=np.int64))


def write_splits(train, test, root):
    write_directory(train, os.path.join(root, "train"))
    if len(test):
        write_directory(test, os.path.join(root, "test"))


def load_splits(root):
    """``(train, test)`` from a directory made by :func:`write_splits`; test may be None."""
    train_dir, test_dir = os.path.join(root, "train"), os.path.join(root, "test")
    if not os.path.isdir(train_dir):
        return read_directory(root), None
    test = read_directory(test_dir) if os.path.isdir(test_dir) else None
    return read_directory(train_dir), test


def load_eval_set(root):
    """The held-out split when ``root`` has one, else all class folders under ``root``."""
    if os.path.isdir(os.path.join(root, "test")):
        return read_directory(os.path.join(root, "test"))
    if os.path.isdir(os.path.join(root, "train")):
        return read_directory(os.path.join(root, "train"))
    return read_directory(root)


def build(spec):
    """``(train, test)`` for a :class:`~csqa.config.DatasetSpec`."""
    if spec.kind == "directory":
        train, test = load_splits(spec.path)
        return train, test
    return split(generate_synthetic(spec), spec.test_fraction)


def nearest_neighbor_accuracy(train_x, train_y, test_x, test_y):
    """1-NN (Euclidean) accuracy on flattened float features."""
    a = train_x.reshape(len(train_x), -1).astype(np.float64)
    b = test_x.reshape(len(test_x), -1).astype(np.float64)
    d = (b * b).sum(1)[:, None] - 2.0 * b @ a.T + (a * a).sum(1)[None]
    return float(np.mean(train_y[d.argmin(axis=1)] == test_y))


def motif_crops(dataset):
    out = np.empty((len(dataset), 3, GLYPH, GLYPH), dtype=np.uint8)
    for i, (x0, y0, x1, y1) in enumerate(dataset.boxes.astype(int)):
        out[i] = dataset.images[i, :, y0:y1, x0:x1]
    return out
