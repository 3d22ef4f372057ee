"""Victim training, augmentation filters and evaluation metrics."""
import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import CLASSWISE, expand_patches, f32, patch_locations, perturb
from .errors import FormError, NumericError, ParameterError
from .models import forward, init_model, loss_grad_input, predict
from .optim import cosine_lr, sgd_momentum_step
from .seeds import derive_seed

AUGMENTATIONS = ("none", "standard", "cutout", "mixup", "cutmix", "fixed_policy")
SCHEDULES = ("cosine", "constant")
CURVE_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "clean_test_acc")


@dataclass
class AdvTrainConfig:
    epsilon: float = 8 / 255
    steps: int = 10
    alpha: float = None

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = self.epsilon / 4
        if self.epsilon <= 0 or self.steps < 0 or self.alpha <= 0:
            raise ParameterError("adversarial training needs epsilon > 0, steps >= 0, alpha > 0")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.025
    momentum: float = 0.9
    schedule: str = "cosine"
    seed: int = 0
    augmentation: str = "none"
    adv_train: AdvTrainConfig = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ParameterError("need lr > 0 and 0 <= momentum < 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be positive")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"schedule must be one of {SCHEDULES}")
        if self.augmentation not in AUGMENTATIONS:
            raise ParameterError(f"augmentation must be one of {AUGMENTATIONS}")
        if isinstance(self.adv_train, dict):
            self.adv_train = AdvTrainConfig(**self.adv_train)

    def to_dict(self):
        return asdict(self)


@dataclass
class EvaluationReport:
    config: dict
    seed: int
    curve: list = field(default_factory=list)
    confusion: list = None
    per_class_recall: list = None
    backdoor_asr: float = None
    converged: bool = None

    @property
    def final_acc(self):
        return self.curve[-1]["clean_test_acc"] if self.curve else None

    @property
    def max_acc(self):
        return max(r["clean_test_acc"] for r in self.curve) if self.curve else None

    def to_dict(self):
        return {
            "config": self.config,
            "seed": self.seed,
            "curve": self.curve,
            "confusion": self.confusion,
            "per_class_recall": self.per_class_recall,
            "backdoor_asr": self.backdoor_asr,
            "converged": self.converged,
        }


def write_curve_csv(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_FIELDS)
        for rec in report.curve:
            writer.writerow([rec["epoch"]] + [f"{rec[k]:.6f}" for k in CURVE_FIELDS[1:]])


def write_report_json(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------- augmentation

def _cutout_mask(n, h, w, side, rng):
    """Boolean mask (n, h, w) of a side x side square at a random center, clipped at borders."""
    cy = rng.integers(0, h, size=n)
    cx = rng.integers(0, w, size=n)
    rows = np.arange(h)[None, :]
    cols = np.arange(w)[None, :]
    top = (cy - side // 2)[:, None]
    left = (cx - side // 2)[:, None]
    in_r = (rows >= top) & (rows < top + side)
    in_c = (cols >= left) & (cols < left + side)
    return in_r[:, :, None] & in_c[:, None, :]


def _one_hot(y, k):
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def _rotate_nearest(img, degrees):
    """Rotate (C, H, W) about the center, nearest neighbour, zero fill."""
    c, h, w = img.shape
    t = np.deg2rad(degrees)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    sy = np.cos(t) * (yy - cy) - np.sin(t) * (xx - cx) + cy
    sx = np.sin(t) * (yy - cy) + np.cos(t) * (xx - cx) + cx
    sy = np.rint(sy).astype(np.int64)
    sx = np.rint(sx).astype(np.int64)
    ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros_like(img)
    out[:, ok] = img[:, sy[ok], sx[ok]]
    return out


def augment_batch(x, y, mode, rng, num_classes=None, lam=None):
    """Return ``(x_aug, targets)``.

    ``targets`` are the int labels unchanged, or (n, K) soft labels for mixup
    and cutmix. ``lam`` pins the mixing weight (otherwise drawn from Beta(1, 1)).
    """
    x = np.array(x, dtype=np.float64, copy=True)
    y = np.asarray(y, dtype=np.int64)
    n, _, h, w = x.shape
    side = max(1, min(h, w) // 2)
    if mode == "none":
        return x, y
    if mode == "standard":
        # pad-and-crop by up to an eighth of the side
        pad = max(1, min(h, w) // 8)
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        for i in range(n):
            x[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        return x, y
    if mode == "cutout":
        mask = _cutout_mask(n, h, w, side, rng)
        x[np.broadcast_to(mask[:, None], x.shape)] = 0.0
        return x, y
    if mode in ("mixup", "cutmix"):
        if num_classes is None:
            raise ParameterError(f"{mode} needs num_classes for soft labels")
        lam = float(rng.beta(1.0, 1.0)) if lam is None else float(lam)
        perm = rng.permutation(n)
        y1, y2 = _one_hot(y, num_classes), _one_hot(y[perm], num_classes)
        if mode == "mixup":
            return lam * x + (1 - lam) * x[perm], lam * y1 + (1 - lam) * y2
        bh = int(round(h * np.sqrt(1 - lam)))
        bw = int(round(w * np.sqrt(1 - lam)))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        x[:, :, top:top + bh, left:left + bw] = x[perm][:, :, top:top + bh, left:left + bw]
        kept = 1 - (bh * bw) / (h * w)
        return x, kept * y1 + (1 - kept) * y2
    if mode == "fixed_policy":
        for i in range(n):
            if rng.random() < 0.5:
                x[i] = np.clip(x[i] + rng.uniform(-0.2, 0.2), 0, 1)
            if rng.random() < 0.5:
                m = x[i].mean()
                x[i] = np.clip((x[i] - m) * (1 + rng.uniform(-0.2, 0.2)) + m, 0, 1)
            if rng.random() < 0.5:
                x[i] = _rotate_nearest(x[i], rng.uniform(-15, 15))
            if rng.random() < 0.5:
                x[i][:, _cutout_mask(1, h, w, side, rng)[0]] = 0.0
        return x, y
    raise ParameterError(f"unknown augmentation {mode!r}")


# --------------------------------------------------------------- metrics

def confusion_matrix(model_or_pred, dataset):
    """(K, K) int counts, rows = true class, columns = predicted class.

    The first argument is a model or an array of precomputed predictions.
    """
    k = dataset.num_classes
    pred = model_or_pred if isinstance(model_or_pred, np.ndarray) else predict(model_or_pred, dataset.images)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (dataset.labels, np.asarray(pred, dtype=np.int64)), 1)
    return cm


def per_class_recall(cm):
    """Diagonal over row sums; None for classes absent from the test set."""
    cm = np.asarray(cm)
    out = []
    for i in range(len(cm)):
        total = cm[i].sum()
        out.append(None if total == 0 else float(cm[i, i] / total))
    return out


def backdoor_asr(model, test_clean, noise, target_class, patch_seed=None):
    """Share of non-target test images classified as ``target_class`` once the
    target's class-wise delta is attached."""
    if noise.form != CLASSWISE:
        raise FormError("backdoor triggers must be class-wise noise")
    if not 0 <= target_class < test_clean.num_classes:
        raise ParameterError("target_class out of range")
    keep = test_clean.labels != target_class
    x = test_clean.images[keep]
    if len(x) == 0:
        return 0.0
    delta = noise.deltas[target_class]
    if delta.shape != x.shape[1:]:
        rng = np.random.default_rng(patch_seed)
        loc = patch_locations(len(x), x.shape[1:], delta.shape[1:], rng)
        full = expand_patches(np.broadcast_to(delta, (len(x), *delta.shape)), x.shape[1:], loc)
    else:
        full = np.broadcast_to(delta, x.shape)
    pred = predict(model, perturb(x, full, noise.epsilon))
    return float(np.mean(pred == target_class))


def accuracy(model, dataset):
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.images) == dataset.labels))


# --------------------------------------------------------------- training

def _soft_loss_grads(model, x, targets):
    params = {k: T.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    out = forward(model, x, params)
    loss = T.softmax_cross_entropy(out, targets)
    T.backward(loss, list(params.values()))
    return loss.item(), {k: t.grad for k, t in params.items()}, out.data


def _adv_batch(model, x, y, adv):
    """Maximize-direction PGD from a zero start against the current model."""
    eps = f32(adv.epsilon)
    xa = x
    for _ in range(adv.steps):
        g = loss_grad_input(model, xa, y)[1]
        d = np.clip(xa + adv.alpha * np.sign(g) - x, -eps, eps)
        xa = perturb(x, d, eps)
    return xa


def train_model(train, test_clean, spec, cfg):
    """Train a fresh model on ``train``; record clean test accuracy every epoch.

    A non-finite loss or gradient raises :class:`NumericError` whose
    ``report`` holds the epochs completed so far.
    """
    if len(train) == 0:
        raise ParameterError("empty training set")
    model = init_model(spec, derive_seed(cfg.seed, "victim", "init"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "victim", "shuffle"))
    report = EvaluationReport(config=cfg.to_dict(), seed=int(cfg.seed))
    velocity = {}
    n = len(train)
    bs = min(cfg.batch_size, n)
    k = train.num_classes
    x_all, y_all = train.images, train.labels
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr) if cfg.schedule == "cosine" else cfg.lr
        order = rng.permutation(n)
        loss_sum = correct = seen = 0.0
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.adv_train is not None and cfg.adv_train.steps > 0:
                xb = _adv_batch(model, xb, yb, cfg.adv_train)
            xb, targets = augment_batch(xb, yb, cfg.augmentation, rng, k)
            try:
                loss, grads, out = _soft_loss_grads(model, xb, targets)
                sgd_momentum_step(model.params, grads, velocity, lr, cfg.momentum)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}", report) from exc
            loss_sum += loss * len(idx)
            correct += float(np.sum(out.argmax(axis=1) == yb))
            seen += len(idx)
        report.curve.append({
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "clean_test_acc": accuracy(model, test_clean),
        })
    cm = confusion_matrix(model, test_clean)
    report.confusion = cm.tolist()
    report.per_class_recall = per_class_recall(cm)
    return model, report


def adversarial_train(train, test_clean, spec, cfg):
    """:func:`train_model` with every batch replaced by its PGD adversarial version."""
    if cfg.adv_train is None:
        raise ParameterError("adversarial_train needs cfg.adv_train")
    return train_model(train, test_clean, spec, cfg)


def dataset_checksum(dataset):
    h = hashlib.sha256(dataset.images.tobytes())
    h.update(dataset.labels.tobytes())
    return h.hexdigest()
