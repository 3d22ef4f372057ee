"""Datasets, noise sets and the operations that turn one into an unlearnable copy.

Images are float64 arrays of shape (n, C, H, W) in [0, 1]. Noise lives in the
same raw pixel space.
"""
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (CompatibilityError, ConsistencyError, FormatError, FormError,
                     MapError, ParameterError)

SAMPLEWISE = "samplewise"
CLASSWISE = "classwise"
FORMS = (SAMPLEWISE, CLASSWISE)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_SUBSET_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist_subset"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ConsistencyError(f"images must be (n, C, H, W), got shape {images.shape}")
        if len(labels) != len(images):
            raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ConsistencyError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConsistencyError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes,
                       name or self.name)


@dataclass(frozen=True)
class NoiseSet:
    """Sample-wise (one delta per example) or class-wise (one per class) noise.

    ``epsilon`` is kept at float32 precision because that is how noise files
    store it; generators project onto exactly this value.
    """
    form: str
    epsilon: float
    deltas: np.ndarray
    patch: tuple = None
    norm: str = "linf"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.form not in FORMS:
            raise FormError(f"form must be one of {FORMS}, got {self.form!r}")
        if self.norm != "linf":
            raise FormatError("only the L-infinity norm is supported")
        deltas = np.asarray(self.deltas, dtype=np.float64)
        if deltas.ndim != 4:
            raise ConsistencyError(f"deltas must be (count, C, h, w), got {deltas.shape}")
        eps = f32(self.epsilon)
        if deltas.size and np.abs(deltas).max() > eps:
            raise ConsistencyError(f"deltas exceed the epsilon ball ({np.abs(deltas).max()} > {eps})")
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "epsilon", eps)
        if self.patch is not None:
            object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
            if deltas.shape[2:] != self.patch:
                raise ConsistencyError(f"patch {self.patch} does not match delta shape {deltas.shape[1:]}")

    def __len__(self):
        return len(self.deltas)

    @property
    def delta_shape(self):
        return self.deltas.shape[1:]


def f32(x):
    """Round to the nearest float32, returned as a Python float."""
    return float(np.float32(x))


# ------------------------------------------------------------------- IDX

def _open_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, magic):
    raw = _open_bytes(path)
    if len(raw) < 8:
        raise OSError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise OSError(f"{path}: truncated IDX payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(dims)


def write_idx(path, array, compress=None):
    """Write a u8 array as IDX (gzip when ``compress`` or the name ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    blob = header + array.tobytes()
    path = Path(path)
    if compress or (compress is None and path.suffix == ".gz"):
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)


def load_idx(images_path, labels_path, num_classes=None, name=None):
    """Read an IDX image/label pair (raw or gzipped) into a :class:`Dataset`."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    k = int(labels.max()) + 1 if num_classes is None and labels.size else (num_classes or 1)
    return Dataset(images[:, None, :, :].astype(np.float64) / 255.0, labels.astype(np.int64), k,
                   name or Path(images_path).name)


def load_mnist_subset(root=None):
    """The bundled MNIST subset as ``(train, test)``."""
    root = Path(root) if root is not None else MNIST_SUBSET_DIR
    train = load_idx(root / "train-images-idx3-ubyte.gz", root / "train-labels-idx1-ubyte.gz", 10, "mnist-train")
    test = load_idx(root / "t10k-images-idx3-ubyte.gz", root / "t10k-labels-idx1-ubyte.gz", 10, "mnist-test")
    return train, test


# ----------------------------------------------------------------- blobs

def synth_blobs(num_classes, n_per_class, dims, spread, seed, centers=None, name="blobs"):
    """Gaussian clusters in [0, 1]^dims laid out as 1 x dims x 1 images.

    Centers are uniform in [0.2, 0.8]^dims unless given.
    """
    if num_classes < 2 or dims < 2:
        raise ParameterError("synth_blobs needs at least 2 classes and 2 dims")
    if spread <= 0:
        raise ParameterError("spread must be positive")
    if n_per_class < 1:
        raise ParameterError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.uniform(0.2, 0.8, size=(num_classes, dims))
    centers = np.asarray(centers, dtype=np.float64)
    points = centers[:, None, :] + spread * rng.standard_normal((num_classes, n_per_class, dims))
    points = np.clip(points, 0.0, 1.0).reshape(num_classes * n_per_class, dims)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    order = rng.permutation(len(labels))
    return Dataset(points[order].reshape(-1, 1, dims, 1), labels[order], num_classes, name)


def blob_centers(num_classes, dims, seed):
    """Centers :func:`synth_blobs` draws for the same seed."""
    return np.random.default_rng(seed).uniform(0.2, 0.8, size=(num_classes, dims))


def train_test_blobs(num_classes, n_train_per_class, n_test_per_class, dims, spread, seed):
    """Train and test blobs that share cluster centers."""
    centers = blob_centers(num_classes, dims, seed)
    train = synth_blobs(num_classes, n_train_per_class, dims, spread, seed + 1, centers, "blobs-train")
    test = synth_blobs(num_classes, n_test_per_class, dims, spread, seed + 2, centers, "blobs-test")
    return train, test


# ----------------------------------------------------------- applying noise

def _check_compatible(dataset, noise):
    c, h, w = dataset.image_shape
    dc, dh, dw = noise.delta_shape
    if dc != c or dh > h or dw > w:
        raise CompatibilityError(f"delta shape {noise.delta_shape} incompatible with images {dataset.image_shape}")
    if noise.form == SAMPLEWISE and len(noise) != len(dataset):
        raise CompatibilityError(f"{len(noise)} sample-wise deltas for {len(dataset)} examples")
    if noise.form == CLASSWISE and len(noise) != dataset.num_classes:
        raise CompatibilityError(f"{len(noise)} class-wise deltas for {dataset.num_classes} classes")


def is_patch(noise, image_shape):
    return noise.patch is not None or tuple(noise.delta_shape[1:]) != tuple(image_shape[1:])


def patch_locations(n, image_shape, patch_shape, rng):
    """Uniform top-left corners for ``n`` patches of ``patch_shape`` (ph, pw)."""
    _, h, w = image_shape
    ph, pw = patch_shape
    rows = rng.integers(0, h - ph + 1, size=n)
    cols = rng.integers(0, w - pw + 1, size=n)
    return np.stack([rows, cols], axis=1)


def expand_patches(patches, image_shape, locations):
    """Place (n, C, ph, pw) patches on zero canvases at ``locations``."""
    n = len(patches)
    out = np.zeros((n, *image_shape))
    ph, pw = patches.shape[2:]
    for i, (r, c) in enumerate(locations):
        out[i, :, r:r + ph, c:c + pw] = patches[i]
    return out


def per_example_deltas(noise, labels, n=None):
    """Delta selected for every example: row i for sample-wise, row y_i for class-wise."""
    if noise.form == SAMPLEWISE:
        return noise.deltas if n is None else noise.deltas[:n]
    return noise.deltas[np.asarray(labels, dtype=np.int64)]


def perturb(images, deltas, epsilon):
    """``clip(images + deltas, 0, 1)`` with ``|result - images| <= epsilon`` exactly.

    Rounding of the addition can overshoot the ball by one ulp; those pixels
    are stepped back toward the clean value.
    """
    out = np.clip(images + deltas, 0.0, 1.0)
    for _ in range(4):
        over = np.abs(out - images) > epsilon
        if not over.any():
            break
        out[over] = np.nextafter(out[over], images[over])
    return out


def apply_noise(clean, noise, patch_seed=None, mask=None):
    """Add the noise to every example (or only where ``mask`` is true) and clip to [0, 1].

    Deltas smaller than the image are patches placed at a uniformly random
    top-left corner per example, drawn from ``patch_seed``.
    """
    _check_compatible(clean, noise)
    deltas = per_example_deltas(noise, clean.labels)
    if is_patch(noise, clean.image_shape):
        rng = np.random.default_rng(patch_seed)
        loc = patch_locations(len(clean), clean.image_shape, noise.delta_shape[1:], rng)
        deltas = expand_patches(deltas, clean.image_shape, loc)
    if mask is not None:
        deltas = deltas * np.asarray(mask, dtype=bool)[:, None, None, None]
    images = perturb(clean.images, deltas, noise.epsilon)
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool)
        images[keep] = clean.images[keep]
    return replace(clean, images=images, name=f"{clean.name}+noise")


def mix_unlearnable(clean, unlearnable, fraction, seed):
    """Swap a seeded random ``fraction`` of examples for their unlearnable version.

    Returns ``(mixed, clean_only)`` where ``clean_only`` keeps just the
    examples that stayed clean.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError("fraction must lie in [0, 1]")
    if (len(clean) != len(unlearnable) or not np.array_equal(clean.labels, unlearnable.labels)
            or clean.image_shape != unlearnable.image_shape):
        raise ConsistencyError("clean and unlearnable datasets are not index-aligned")
    n = len(clean)
    k = int(round(fraction * n))
    chosen = np.zeros(n, dtype=bool)
    chosen[np.random.default_rng(seed).permutation(n)[:k]] = True
    images = np.where(chosen[:, None, None, None], unlearnable.images, clean.images)
    mixed = replace(clean, images=images, name=f"{clean.name}+mix{fraction:g}")
    clean_only = clean.subset(np.flatnonzero(~chosen), f"{clean.name}-cleanpart")
    return mixed, clean_only


def protect_classes(clean, noise, classes, patch_seed=None):
    """Perturb only the examples whose label is in ``classes``."""
    classes = sorted(set(int(c) for c in classes))
    if any(c < 0 or c >= clean.num_classes for c in classes):
        raise ParameterError(f"protected classes must lie in [0, {clean.num_classes})")
    mask = np.isin(clean.labels, classes)
    return apply_noise(clean, noise, patch_seed=patch_seed, mask=mask)


def transfer_noise(noise, class_map, num_classes=None):
    """Build destination class-wise noise: class k gets the source delta ``class_map[k]``."""
    if noise.form != CLASSWISE:
        raise FormError("only class-wise noise can be transferred between datasets")
    mapping = {int(k): int(v) for k, v in dict(class_map).items()}
    k_dst = num_classes if num_classes is not None else (max(mapping) + 1 if mapping else 0)
    missing = [k for k in range(k_dst) if k not in mapping]
    if missing:
        raise MapError(f"class map has no source for destination classes {missing}")
    bad = [v for v in mapping.values() if not 0 <= v < len(noise)]
    if bad:
        raise MapError(f"class map points at unknown source classes {bad}")
    deltas = np.stack([noise.deltas[mapping[k]] for k in range(k_dst)])
    return NoiseSet(CLASSWISE, noise.epsilon, deltas, noise.patch)


# --------------------------------------------------------------- UNLN files

_UNLN_MAGIC = b"UNLN"
_UNLN_VERSION = 1


def save_noise(noise, path):
    form = 0 if noise.form == SAMPLEWISE else 1
    dims = noise.delta_shape
    header = (_UNLN_MAGIC + struct.pack("<BBB", _UNLN_VERSION, form, 0)
              + struct.pack("<f", noise.epsilon) + struct.pack("<I", len(noise))
              + struct.pack("<B", len(dims)) + struct.pack(f"<{len(dims)}I", *dims))
    Path(path).write_bytes(header + np.ascontiguousarray(noise.deltas, dtype="<f8").tobytes())


def load_noise(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _UNLN_MAGIC:
        raise FormatError(f"{path}: not an UNLN noise file")
    if len(raw) < 16:
        raise OSError(f"{path}: truncated UNLN header")
    version, form, norm = struct.unpack("<BBB", raw[4:7])
    if version != _UNLN_VERSION:
        raise FormatError(f"{path}: unsupported UNLN version {version}")
    if form not in (0, 1) or norm != 0:
        raise FormatError(f"{path}: bad form/norm bytes {form}/{norm}")
    (eps,) = struct.unpack("<f", raw[7:11])
    (count,) = struct.unpack("<I", raw[11:15])
    rank = raw[15]
    pos = 16 + 4 * rank
    if len(raw) < pos:
        raise OSError(f"{path}: truncated UNLN header")
    dims = struct.unpack(f"<{rank}I", raw[16:pos])
    need = 8 * count * int(np.prod(dims))
    if len(raw) - pos != need:
        raise OSError(f"{path}: expected {need} bytes of deltas, found {len(raw) - pos}")
    deltas = np.frombuffer(raw[pos:], dtype="<f8").astype(np.float64).reshape(count, *dims)
    return NoiseSet(SAMPLEWISE if form == 0 else CLASSWISE, float(eps), deltas)
