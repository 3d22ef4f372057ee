"""Perturbation generators.

Error-minimizing noise alternates a few SGD steps on the source model with
signed-gradient (PGD) updates that *decrease* the loss of every perturbed
example, until the source model's error on the perturbed data drops below the
stop threshold. Error-maximizing and random noise serve as baselines; the
penalty variant replaces PGD with Adam on ``c * ||delta||^2 + loss``.
"""
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .data import (CLASSWISE, FORMS, SAMPLEWISE, Dataset, NoiseSet, f32, patch_locations,
                   perturb, per_example_deltas)
from .errors import CompatibilityError, DimensionError, FormError, ParameterError
from .models import Model, init_model, loss_grad_input, loss_grad_params, predict
from .optim import sgd_momentum_step
from .seeds import derive_seed

MINIMIZE = "minimize"
MAXIMIZE = "maximize"


@dataclass
class BiLevelConfig:
    """Schedule for the min-min generation loop.

    ``model_steps`` SGD steps on the source model alternate with
    ``pgd_steps`` perturbation steps per example; generation stops once the
    error rate on the perturbed data falls below ``stop_error``.
    """
    epsilon: float = 8 / 255
    model_steps: int = 10
    pgd_steps: int = 20
    alpha: float = None
    stop_error: float = 0.01
    max_rounds: int = 50
    subset_fraction: float = 1.0
    batch_size: int = 128
    lr: float = 0.025
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = self.epsilon / 10
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ParameterError("alpha and epsilon must be positive")
        if not 0 < self.stop_error < 1:
            raise ParameterError("stop_error must lie in (0, 1)")
        if self.model_steps < 1 or self.pgd_steps < 1 or self.max_rounds < 1:
            raise ParameterError("model_steps, pgd_steps and max_rounds must be >= 1")
        if not 0 < self.subset_fraction <= 1:
            raise ParameterError("subset_fraction must lie in (0, 1]")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be positive")

    @classmethod
    def defaults(cls, form, epsilon=8 / 255, **overrides):
        """Published defaults: T=20, stop 0.01, full data for sample-wise;
        T=1, stop 0.1, a 20% subset for class-wise; alpha = epsilon / 10, M = 10."""
        if form == SAMPLEWISE:
            base = dict(pgd_steps=20, stop_error=0.01, subset_fraction=1.0)
        elif form == CLASSWISE:
            base = dict(pgd_steps=1, stop_error=0.1, subset_fraction=0.2)
        else:
            raise FormError(f"unknown form {form!r}")
        base.update(overrides)
        return cls(epsilon=epsilon, **base)


@dataclass
class PenaltyConfig:
    c: float = 1.0
    steps: int = 200
    lr: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.c <= 0 or self.steps < 1 or self.lr <= 0:
            raise ParameterError("penalty config needs c > 0, steps >= 1, lr > 0")


class GenerationResult(NamedTuple):
    noise: NoiseSet
    model: Model
    rounds: int
    converged: bool
    history: list


def generation_log(result, config, seed, extra=None):
    """JSON-ready record of one generation run."""
    cfg = asdict(config) if hasattr(config, "__dataclass_fields__") else dict(config)
    log = {
        "rounds": result.rounds,
        "train_error": [float(e) for e in result.history],
        "converged": bool(result.converged),
        "config": cfg,
        "seed": int(seed),
    }
    if extra:
        log.update(extra)
    return log


def write_generation_log(path, log):
    with open(path, "w") as fh:
        json.dump(log, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------- primitives

def project_linf(delta, epsilon):
    """Clamp every element to [-epsilon, epsilon]."""
    if epsilon <= 0:
        raise ParameterError("epsilon must be positive")
    data = delta.data if hasattr(delta, "data") and not isinstance(delta, np.ndarray) else delta
    return np.clip(np.asarray(data, dtype=np.float64), -epsilon, epsilon)


def _input_grad(model, x, y):
    if isinstance(model, Model):
        return loss_grad_input(model, x, y)[1]
    return np.asarray(model(x, y)[1], dtype=np.float64)


def pgd_step(model, x_adv, x0, y, alpha, epsilon, direction=MINIMIZE):
    """One signed-gradient step on the input, projected back to the epsilon-ball
    around ``x0`` and then clipped to the pixel range.

    ``model`` may also be a callable ``(x, y) -> (loss, grad_x)``.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x_adv.shape != x0.shape:
        raise DimensionError(f"x_adv {x_adv.shape} and x0 {x0.shape} differ in shape")
    g = _input_grad(model, x_adv, y)
    if direction == MINIMIZE:
        moved = x_adv - alpha * np.sign(g)
    elif direction == MAXIMIZE:
        moved = x_adv + alpha * np.sign(g)
    else:
        raise ParameterError(f"direction must be {MINIMIZE!r} or {MAXIMIZE!r}")
    return perturb(x0, project_linf(moved - x0, epsilon), epsilon)


class _BatchStream:
    """Endless shuffled mini-batches over ``indices`` (incomplete tails dropped)."""

    def __init__(self, indices, batch_size, rng):
        self.indices = np.asarray(indices)
        self.batch_size = min(batch_size, len(self.indices))
        self.rng = rng
        self._order = None
        self._pos = 0

    def next(self):
        if self._order is None or self._pos + self.batch_size > len(self._order):
            self._order = self.indices[self.rng.permutation(len(self.indices))]
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def _check_inputs(dataset, spec):
    if tuple(dataset.image_shape) != tuple(spec.input_shape):
        raise CompatibilityError(f"dataset images {dataset.image_shape} do not match model input {spec.input_shape}")
    if dataset.num_classes != spec.num_classes:
        raise CompatibilityError("dataset and model disagree on the class count")


def _train_source(model, velocity, stream, make_batch, cfg):
    for _ in range(cfg.model_steps):
        idx = stream.next()
        xb, yb = make_batch(idx)
        _, grads = loss_grad_params(model, xb, yb)
        sgd_momentum_step(model.params, grads, velocity, cfg.lr, cfg.momentum)


def error_rate(model, x, y, batch_size=1024):
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(model, x, batch_size) != np.asarray(y)))


def _chunks(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


# ------------------------------------------------------ error-minimizing

def generate_error_min_samplewise(dataset, spec, cfg):
    """Sample-wise error-minimizing noise: one delta per training example.

    Returns a :class:`GenerationResult`; when ``max_rounds`` runs out before
    the stop error is reached, the lowest-error noise seen is returned with
    ``converged=False``.
    """
    _check_inputs(dataset, spec)
    if cfg.subset_fraction != 1.0:
        raise ParameterError("sample-wise generation needs subset_fraction == 1 (every example gets a delta)")
    eps = f32(cfg.epsilon)
    x, y = dataset.images, dataset.labels
    rng = np.random.default_rng(derive_seed(cfg.seed, "samplewise", "noise"))
    model = init_model(spec, derive_seed(cfg.seed, "samplewise", "source-model"))
    velocity = {}
    delta = rng.uniform(-eps, eps, size=x.shape)
    delta = project_linf(perturb(x, delta, eps) - x, eps)
    stream = _BatchStream(np.arange(len(y)), cfg.batch_size, rng)
    chunk = max(cfg.batch_size, 256)
    history, best = [], (np.inf, None)
    converged = False
    for rnd in range(1, cfg.max_rounds + 1):
        _train_source(model, velocity, stream, lambda idx: (perturb(x[idx], delta[idx], eps), y[idx]), cfg)
        for sl in _chunks(len(y), chunk):
            x0 = x[sl]
            xa = perturb(x0, delta[sl], eps)
            for _ in range(cfg.pgd_steps):
                xa = pgd_step(model, xa, x0, y[sl], cfg.alpha, eps, MINIMIZE)
            delta[sl] = project_linf(xa - x0, eps)
        err = error_rate(model, perturb(x, delta, eps), y)
        history.append(err)
        if err < best[0]:
            best = (err, delta.copy())
        if err < cfg.stop_error:
            converged = True
            break
    final = delta if converged else best[1]
    return GenerationResult(NoiseSet(SAMPLEWISE, eps, final), model, rnd, converged, history)


def _classwise_inputs(x, labels, deltas, eps, patch, rng):
    """Perturbed copies of ``x`` under class-wise ``deltas`` (patches at random spots)."""
    d = deltas[labels]
    if patch is None:
        return perturb(x, d, eps)
    loc = patch_locations(len(x), x.shape[1:], patch, rng)
    full = np.zeros_like(x)
    ph, pw = patch
    for i, (r, c) in enumerate(loc):
        full[i, :, r:r + ph, c:c + pw] = d[i]
    return perturb(x, full, eps)


def generate_error_min_classwise(dataset, spec, cfg, patch=None):
    """Class-wise error-minimizing noise: one delta per class.

    A seeded ``subset_fraction`` of the data drives generation. Each subset
    example, visited in index order, takes ``pgd_steps`` minimizing steps on the
    delta of its class, so a class delta accumulates updates from all of its
    examples; the delta is projected after every update. With ``patch=(ph, pw)``
    each delta is a patch placed at a fresh random location for every step.
    """
    _check_inputs(dataset, spec)
    eps = f32(cfg.epsilon)
    x_all, y_all = dataset.images, dataset.labels
    n, k = len(y_all), dataset.num_classes
    c, h, w = dataset.image_shape
    if patch is not None:
        patch = (int(patch[0]), int(patch[1]))
        if not (1 <= patch[0] <= h and 1 <= patch[1] <= w):
            raise ParameterError(f"patch {patch} does not fit in {h}x{w} images")
    rng = np.random.default_rng(derive_seed(cfg.seed, "classwise", "noise"))
    model = init_model(spec, derive_seed(cfg.seed, "classwise", "source-model"))
    velocity = {}
    m = max(1, int(round(cfg.subset_fraction * n)))
    subset = np.sort(rng.permutation(n)[:m])
    x, y = x_all[subset], y_all[subset]
    dshape = (c, *patch) if patch is not None else (c, h, w)
    deltas = rng.uniform(-eps, eps, size=(k, *dshape))
    stream = _BatchStream(np.arange(m), cfg.batch_size, rng)
    history, best = [], (np.inf, None)
    converged = False
    for rnd in range(1, cfg.max_rounds + 1):
        _train_source(model, velocity, stream,
                      lambda idx: (_classwise_inputs(x[idx], y[idx], deltas, eps, patch, rng), y[idx]), cfg)
        for i in range(m):
            label = y[i]
            x0 = x[i:i + 1]
            for _ in range(cfg.pgd_steps):
                if patch is None:
                    g = _input_grad(model, perturb(x0, deltas[label][None], eps), y[i:i + 1])[0]
                else:
                    r, cc = patch_locations(1, (c, h, w), patch, rng)[0]
                    window = (slice(None), slice(r, r + patch[0]), slice(cc, cc + patch[1]))
                    xa = x0.copy()
                    xa[(0, *window)] = perturb(x0[(0, *window)], deltas[label], eps)
                    g = _input_grad(model, xa, y[i:i + 1])[(0, *window)]
                # the shared delta is not clipped to this example's pixel range
                deltas[label] = project_linf(deltas[label] - cfg.alpha * np.sign(g), eps)
        err = error_rate(model, _classwise_inputs(x, y, deltas, eps, patch, rng), y)
        history.append(err)
        if err < best[0]:
            best = (err, deltas.copy())
        if err < cfg.stop_error:
            converged = True
            break
    final = deltas if converged else best[1]
    noise = NoiseSet(CLASSWISE, eps, final, patch, meta={"subset": subset})
    return GenerationResult(noise, model, rnd, converged, history)


# ------------------------------------------------------------- penalty

def penalty_minimize(data_grad, delta0, c, steps, lr, betas=(0.9, 0.999), adam_eps=1e-8):
    """Adam on ``c * ||delta||^2 + data(delta)``; ``data_grad(delta)`` returns d data / d delta."""
    delta = np.array(delta0, dtype=np.float64, copy=True)
    m = np.zeros_like(delta)
    v = np.zeros_like(delta)
    b1, b2 = betas
    for t in range(1, steps + 1):
        g = 2.0 * c * delta + data_grad(delta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        delta = delta - lr * m_hat / (np.sqrt(v_hat) + adam_eps)
    return delta


def generate_penalty_noise(dataset, spec, cfg, pcfg):
    """Sample-wise error-minimizing noise with an unconstrained Adam inner solver.

    Each inner run minimizes ``c * ||delta_i||^2 + CE(x_i + delta_i, y_i)`` for
    every example, then the result is projected to the epsilon-ball and the
    pixel range. The outer loop and stopping rule match
    :func:`generate_error_min_samplewise`.
    """
    _check_inputs(dataset, spec)
    eps = f32(cfg.epsilon)
    x, y = dataset.images, dataset.labels
    rng = np.random.default_rng(derive_seed(cfg.seed, "penalty", "noise"))
    model = init_model(spec, derive_seed(cfg.seed, "penalty", "source-model"))
    velocity = {}
    delta = np.zeros_like(x)
    stream = _BatchStream(np.arange(len(y)), cfg.batch_size, rng)
    chunk = max(cfg.batch_size, 256)
    history, best = [], (np.inf, None)
    converged = False
    for rnd in range(1, cfg.max_rounds + 1):
        _train_source(model, velocity, stream, lambda idx: (perturb(x[idx], delta[idx], eps), y[idx]), cfg)
        for sl in _chunks(len(y), chunk):
            x0, yb = x[sl], y[sl]
            size = len(yb)

            def data_grad(d, x0=x0, yb=yb, size=size):
                # per-example losses are summed, so undo the batch mean
                return size * loss_grad_input(model, x0 + d, yb)[1]

            d = penalty_minimize(data_grad, delta[sl], pcfg.c, pcfg.steps, pcfg.lr)
            delta[sl] = project_linf(perturb(x0, project_linf(d, eps), eps) - x0, eps)
        err = error_rate(model, perturb(x, delta, eps), y)
        history.append(err)
        if err < best[0]:
            best = (err, delta.copy())
        if err < cfg.stop_error:
            converged = True
            break
    final = delta if converged else best[1]
    return GenerationResult(NoiseSet(SAMPLEWISE, eps, final), model, rnd, converged, history)


# ---------------------------------------------------------- baselines

def generate_error_max(dataset, pretrained, steps, alpha, epsilon, form, seed=0,
                       subset_fraction=0.2, batch_size=256):
    """Error-maximizing (adversarial) noise against a frozen pretrained model.

    Sample-wise: ``steps`` PGD ascent steps per example from a zero start.
    Class-wise: ``steps`` passes over a seeded ``subset_fraction`` of the data,
    each example taking one ascent step on its class delta (a simplified
    cumulative universal perturbation).
    """
    if form not in FORMS:
        raise FormError(f"unknown form {form!r}")
    if steps < 0:
        raise ParameterError("steps must be >= 0")
    eps = f32(epsilon)
    x, y = dataset.images, dataset.labels
    if form == SAMPLEWISE:
        delta = np.zeros_like(x)
        for sl in _chunks(len(y), batch_size):
            x0 = x[sl]
            xa = x0.copy()
            for _ in range(steps):
                xa = pgd_step(pretrained, xa, x0, y[sl], alpha, eps, MAXIMIZE)
            delta[sl] = project_linf(xa - x0, eps)
        return NoiseSet(SAMPLEWISE, eps, delta)
    rng = np.random.default_rng(derive_seed(seed, "error-max", "subset"))
    n = len(y)
    subset = np.sort(rng.permutation(n)[:max(1, int(round(subset_fraction * n)))])
    deltas = np.zeros((dataset.num_classes, *dataset.image_shape))
    for _ in range(steps):
        for i in subset:
            g = _input_grad(pretrained, perturb(x[i:i + 1], deltas[y[i]][None], eps), y[i:i + 1])[0]
            deltas[y[i]] = project_linf(deltas[y[i]] + alpha * np.sign(g), eps)
    return NoiseSet(CLASSWISE, eps, deltas, meta={"subset": subset})


def generate_random(target, epsilon, form, seed, image_shape=None, patch=None):
    """I.i.d. uniform noise in [-epsilon, epsilon].

    ``target`` is a :class:`Dataset` or a count (examples for sample-wise,
    classes for class-wise, in which case ``image_shape`` is required).
    """
    if form not in FORMS:
        raise FormError(f"unknown form {form!r}")
    if epsilon <= 0:
        raise ParameterError("epsilon must be positive")
    eps = f32(epsilon)
    if isinstance(target, Dataset):
        count = len(target) if form == SAMPLEWISE else target.num_classes
        image_shape = target.image_shape
    else:
        count = int(target)
        if image_shape is None:
            raise ParameterError("image_shape is required when target is a count")
    shape = tuple(image_shape)
    if patch is not None:
        shape = (shape[0], int(patch[0]), int(patch[1]))
    rng = np.random.default_rng(seed)
    deltas = np.clip(rng.uniform(-eps, eps, size=(count, *shape)), -eps, eps)
    return NoiseSet(form, eps, deltas, patch)


def mix_noises(a, b, mode, seed=0, labels=None):
    """Combine two noise sets.

    ``alternate``: every example takes its class delta from ``a`` or ``b`` at
    random (needs ``labels``); the result is sample-wise. ``add``: element-wise
    sum of class-wise ``a`` and random ``b`` projected back to the epsilon-ball;
    class-wise when ``b`` is class-wise, sample-wise (needs ``labels``) otherwise.
    """
    if a.delta_shape != b.delta_shape:
        raise CompatibilityError(f"delta shapes differ: {a.delta_shape} vs {b.delta_shape}")
    if a.form != CLASSWISE:
        raise FormError("the first noise set must be class-wise")
    eps = a.epsilon
    if mode == "alternate":
        if b.form != CLASSWISE:
            raise FormError("alternate mixing needs two class-wise noise sets")
        if len(a) != len(b):
            raise CompatibilityError("class-wise noise sets cover different class counts")
        if labels is None:
            raise ParameterError("alternate mixing needs the example labels")
        labels = np.asarray(labels, dtype=np.int64)
        pick_b = np.random.default_rng(seed).integers(0, 2, size=len(labels)).astype(bool)
        deltas = np.where(pick_b[:, None, None, None], b.deltas[labels], a.deltas[labels])
        return NoiseSet(SAMPLEWISE, eps, deltas, a.patch, meta={"assignment": pick_b.astype(np.int64)})
    if mode == "add":
        if b.form == CLASSWISE:
            if len(a) != len(b):
                raise CompatibilityError("class-wise noise sets cover different class counts")
            return NoiseSet(CLASSWISE, eps, project_linf(a.deltas + b.deltas, eps), a.patch)
        if labels is None or len(labels) != len(b):
            raise ParameterError("adding sample-wise noise needs one label per example")
        summed = per_example_deltas(a, labels) + b.deltas
        return NoiseSet(SAMPLEWISE, eps, project_linf(summed, eps), a.patch)
    raise ParameterError(f"mode must be 'alternate' or 'add', got {mode!r}")
