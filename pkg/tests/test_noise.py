import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unlearnable.data import (CLASSWISE, SAMPLEWISE, Dataset, NoiseSet, apply_noise, f32, save_noise,
                              synth_blobs)
from unlearnable.errors import CompatibilityError, DimensionError, FormError, ParameterError
from unlearnable.models import ModelSpec, init_model, mean_loss
from unlearnable.noise import (BiLevelConfig, PenaltyConfig, error_rate, generate_error_max,
                               generate_error_min_classwise, generate_error_min_samplewise,
                               generate_penalty_noise, generate_random, generation_log, mix_noises,
                               penalty_minimize, pgd_step, project_linf, write_generation_log)
from unlearnable.train import TrainConfig, accuracy, train_model

EPS = 8 / 255


def blob_setup(k=4, n=50, dims=8, spread=0.05, seed=0):
    ds = synth_blobs(k, n, dims, spread, seed)
    return ds, ModelSpec("mlp", ds.image_shape, k, (16, 16))


def quadratic(c):
    """(x, y) -> (sum((x - c)^2), grad) for use as a pgd_step model."""
    return lambda x, y: (float(np.sum((x - c) ** 2)), 2 * (x - c))


# project_linf

def test_project_inside_unchanged():
    d = np.array([0.01, -0.02])
    assert np.array_equal(project_linf(d, EPS), d)


def test_project_clamps():
    assert np.allclose(project_linf(np.array([0.5, -0.2]), EPS), [EPS, -EPS], rtol=0, atol=0)


def test_project_fuzz(rng):
    for _ in range(10_000 // 100):
        d = rng.normal(0, 0.05, size=(100, 7))
        out = project_linf(d, EPS)
        assert np.abs(out).max() <= EPS
        inside = np.abs(d) <= EPS
        assert np.array_equal(out[inside], d[inside])


def test_project_bad_eps():
    with pytest.raises(ParameterError):
        project_linf(np.zeros(2), 0.0)


# pgd_step

def test_pgd_zero_gradient_no_move():
    spec = ModelSpec("mlp", (1, 3, 1), 2, ())
    m = init_model(spec, 0)
    m.params["fc1.weight"][:] = 0.0
    x = np.full((2, 1, 3, 1), 0.4)
    assert np.array_equal(pgd_step(m, x, x, np.array([0, 1]), 0.01, EPS), x)


def test_pgd_quadratic_minimize_and_maximize():
    x0 = np.array([[0.3]])
    stepped = pgd_step(quadratic(0.6), x0, x0, None, 0.01, 0.1, "minimize")
    assert stepped.item() == pytest.approx(0.31, abs=1e-15)
    stepped = pgd_step(quadratic(0.6), x0, x0, None, 0.01, 0.1, "maximize")
    assert stepped.item() == pytest.approx(0.29, abs=1e-15)


def test_pgd_projects_and_clips():
    x0 = np.array([[0.0, 0.995]])
    x = x0
    for _ in range(10):
        x = pgd_step(quadratic(np.array([[-1.0, 2.0]])), x, x0, None, 0.01, 0.03, "minimize")
    assert x[0, 0] == 0.0 and x[0, 1] == 1.0
    x = x0
    for _ in range(10):
        x = pgd_step(quadratic(np.array([[-1.0, 2.0]])), x, x0, None, 0.01, 0.03, "maximize")
    assert x[0, 0] == pytest.approx(0.03) and x[0, 1] == pytest.approx(0.965)


def test_pgd_monotone_on_quadratic(rng):
    c = rng.uniform(0.3, 0.7, size=(1, 20))
    x0 = rng.uniform(0.3, 0.7, size=(1, 20))
    f = quadratic(c)
    x, losses = x0, [f(x0, None)[0]]
    for _ in range(20):
        x = pgd_step(f, x, x0, None, 0.002, 0.5, "minimize")
        losses.append(f(x, None)[0])
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_pgd_shape_mismatch():
    with pytest.raises(DimensionError):
        pgd_step(quadratic(0.0), np.zeros((1, 2)), np.zeros((1, 3)), None, 0.1, 0.1)


# configs

def test_bilevel_defaults():
    s = BiLevelConfig.defaults(SAMPLEWISE)
    c = BiLevelConfig.defaults(CLASSWISE)
    assert (s.pgd_steps, s.stop_error, s.subset_fraction, s.model_steps) == (20, 0.01, 1.0, 10)
    assert (c.pgd_steps, c.stop_error, c.subset_fraction, c.model_steps) == (1, 0.1, 0.2, 10)
    assert s.alpha == pytest.approx(EPS / 10)


@pytest.mark.parametrize("bad", [dict(alpha=-1), dict(epsilon=0), dict(stop_error=1.0), dict(stop_error=0.0),
                                 dict(model_steps=0), dict(pgd_steps=0), dict(max_rounds=0),
                                 dict(subset_fraction=0.0), dict(subset_fraction=1.5)])
def test_bilevel_invalid(bad):
    with pytest.raises(ParameterError):
        BiLevelConfig(**bad)


def test_penalty_config_invalid():
    with pytest.raises(ParameterError):
        PenaltyConfig(c=0)
    with pytest.raises(ParameterError):
        PenaltyConfig(steps=0)


# error-minimizing generators

def test_vacuous_stop_one_round():
    ds, spec = blob_setup()
    for form, gen in ((SAMPLEWISE, generate_error_min_samplewise), (CLASSWISE, generate_error_min_classwise)):
        r = gen(ds, spec, BiLevelConfig.defaults(form, epsilon=0.1, stop_error=0.999))
        assert r.rounds == 1 and r.converged


def test_samplewise_converges_on_separable_blobs():
    ds, spec = blob_setup()
    r = generate_error_min_samplewise(ds, spec, BiLevelConfig.defaults(SAMPLEWISE, epsilon=0.1, seed=3))
    assert r.converged and r.history[-1] < 0.01
    assert len(r.noise) == len(ds) and r.noise.form == SAMPLEWISE
    x = ds.images
    assert np.abs(r.noise.deltas).max() <= r.noise.epsilon
    assert (x + r.noise.deltas).min() >= 0 and (x + r.noise.deltas).max() <= 1
    # noise lowers the source model's loss relative to clean data
    assert mean_loss(r.model, apply_noise(ds, r.noise).images, ds.labels) < mean_loss(r.model, x, ds.labels)


def test_nonconvergence_flag_not_exception():
    ds, spec = blob_setup(spread=0.3)
    r = generate_error_min_samplewise(ds, spec, BiLevelConfig.defaults(SAMPLEWISE, epsilon=0.01, stop_error=1e-6,
                                                                       max_rounds=2))
    assert not r.converged and r.rounds == 2 and len(r.history) == 2
    assert min(r.history) <= r.history[-1]


def test_classwise_single_class():
    x = np.random.default_rng(0).uniform(size=(20, 1, 4, 1))
    ds = Dataset(x, np.zeros(20, dtype=np.int64), 1)
    spec = ModelSpec("mlp", ds.image_shape, 1, (4,))
    r = generate_error_min_classwise(ds, spec, BiLevelConfig.defaults(CLASSWISE, epsilon=0.1))
    assert len(r.noise) == 1
    out = apply_noise(ds, r.noise)
    assert np.allclose(out.images - x, r.noise.deltas[0], atol=0) or np.all(np.abs(out.images - x) <= 0.1)


def test_classwise_subset_count():
    ds, spec = blob_setup(k=4, n=250)
    r = generate_error_min_classwise(ds, spec, BiLevelConfig.defaults(CLASSWISE, epsilon=0.1, stop_error=0.999))
    subset = r.noise.meta["subset"]
    assert len(subset) == 200 and len(np.unique(subset)) == 200


def test_classwise_full_dataset_error_close_to_lambda():
    ds, spec = blob_setup(k=4, n=250, spread=0.1)
    cfg = BiLevelConfig.defaults(CLASSWISE, epsilon=0.1, seed=1)
    r = generate_error_min_classwise(ds, spec, cfg)
    assert r.converged
    full = apply_noise(ds, r.noise)
    assert error_rate(r.model, full.images, ds.labels) < cfg.stop_error + 0.05
    assert mean_loss(r.model, full.images, ds.labels) < mean_loss(r.model, ds.images, ds.labels)


def test_classwise_examples_share_delta():
    ds, spec = blob_setup()
    r = generate_error_min_classwise(ds, spec, BiLevelConfig.defaults(CLASSWISE, epsilon=0.1))
    assert r.noise.deltas.shape == (4, *ds.image_shape)
    flat = Dataset(np.full((8, *ds.image_shape), 0.5), np.repeat(np.arange(4), 2), 4)
    out = apply_noise(flat, r.noise).images
    for k in range(4):
        assert out[2 * k].tobytes() == out[2 * k + 1].tobytes()


def test_classwise_patch_generation():
    ds = Dataset(np.random.default_rng(0).uniform(size=(40, 1, 6, 6)), np.arange(40) % 2, 2)
    spec = ModelSpec("mlp", ds.image_shape, 2, (8,))
    r = generate_error_min_classwise(ds, spec, BiLevelConfig.defaults(CLASSWISE, epsilon=0.1, max_rounds=3),
                                     patch=(3, 2))
    assert r.noise.patch == (3, 2) and r.noise.deltas.shape == (2, 1, 3, 2)
    with pytest.raises(ParameterError):
        generate_error_min_classwise(ds, spec, BiLevelConfig.defaults(CLASSWISE, epsilon=0.1), patch=(7, 1))


def test_generation_deterministic(tmp_path):
    ds, spec = blob_setup()
    for form, gen in ((SAMPLEWISE, generate_error_min_samplewise), (CLASSWISE, generate_error_min_classwise)):
        cfg = BiLevelConfig.defaults(form, epsilon=0.1, seed=11)
        save_noise(gen(ds, spec, cfg).noise, tmp_path / "a.unln")
        save_noise(gen(ds, spec, cfg).noise, tmp_path / "b.unln")
        assert (tmp_path / "a.unln").read_bytes() == (tmp_path / "b.unln").read_bytes()


def test_incompatible_spec():
    ds, _ = blob_setup()
    with pytest.raises(CompatibilityError):
        generate_error_min_samplewise(ds, ModelSpec("mlp", (1, 9, 1), 4), BiLevelConfig.defaults(SAMPLEWISE))
    with pytest.raises(ParameterError):
        generate_error_min_samplewise(ds, ModelSpec("mlp", ds.image_shape, 4),
                                      BiLevelConfig.defaults(SAMPLEWISE, subset_fraction=0.5))


def test_generation_log(tmp_path):
    import json
    ds, spec = blob_setup()
    cfg = BiLevelConfig.defaults(CLASSWISE, epsilon=0.1, seed=2)
    r = generate_error_min_classwise(ds, spec, cfg)
    write_generation_log(tmp_path / "log.json", generation_log(r, cfg, 2))
    log = json.loads((tmp_path / "log.json").read_text())
    assert set(log) == {"rounds", "train_error", "converged", "config", "seed"}
    assert log["rounds"] == r.rounds == len(log["train_error"])


# penalty

def test_penalty_closed_form():
    x0, t = 0.2, 0.26
    for c in (1.0, 0.5, 3.0):
        d = penalty_minimize(lambda d: 2 * (x0 + d - t), np.zeros(1), c, 3000, 0.01)
        assert abs(d.item() - (t - x0) / (1 + c)) < 1e-3


def test_penalty_large_c_drives_delta_to_zero():
    d = penalty_minimize(lambda d: 2 * (0.2 + d - 0.9), np.zeros(3), 1e6, 2000, 0.01)
    assert np.abs(d).max() < 1e-4


def test_penalty_noise_in_ball():
    ds, spec = blob_setup()
    cfg = BiLevelConfig.defaults(SAMPLEWISE, epsilon=0.1, model_steps=20, max_rounds=5)
    r = generate_penalty_noise(ds, spec, cfg, PenaltyConfig(steps=30, lr=0.01))
    assert np.abs(r.noise.deltas).max() <= r.noise.epsilon
    out = apply_noise(ds, r.noise).images
    assert out.min() >= 0 and out.max() <= 1


# baselines

def test_error_max_zero_steps():
    ds, spec = blob_setup()
    m = init_model(spec, 0)
    for form in (SAMPLEWISE, CLASSWISE):
        assert not generate_error_max(ds, m, 0, 0.01, 0.1, form).deltas.any()


def test_error_max_hurts_pretrained():
    train = synth_blobs(4, 100, 8, 0.05, 1)
    spec = ModelSpec("mlp", train.image_shape, 4, (16, 16))
    model, _ = train_model(train, train, spec, TrainConfig(epochs=30, batch_size=32))
    clean_acc = accuracy(model, train)
    noise = generate_error_max(train, model, 20, 0.02, 0.2, SAMPLEWISE)
    assert np.abs(noise.deltas).max() <= noise.epsilon
    assert clean_acc - accuracy(model, apply_noise(train, noise)) >= 0.30
    cw = generate_error_max(train, model, 5, 0.02, 0.2, CLASSWISE)
    assert cw.deltas.shape == (4, *train.image_shape) and np.abs(cw.deltas).max() <= cw.epsilon


def test_random_noise():
    a = generate_random(50, 0.1, SAMPLEWISE, 3, image_shape=(1, 4, 4))
    b = generate_random(50, 0.1, SAMPLEWISE, 3, image_shape=(1, 4, 4))
    assert a.deltas.tobytes() == b.deltas.tobytes()
    assert np.abs(a.deltas).max() <= a.epsilon
    ds, _ = blob_setup()
    assert len(generate_random(ds, 0.1, CLASSWISE, 0)) == 4
    with pytest.raises(ParameterError):
        generate_random(3, 0.0, CLASSWISE, 0, (1, 2, 2))
    with pytest.raises(FormError):
        generate_random(3, 0.1, "pixelwise", 0, (1, 2, 2))


def test_random_noise_mean():
    eps = 0.1
    d = generate_random(10 ** 4, eps, SAMPLEWISE, 9, image_shape=(1, 10, 10)).deltas
    assert d.size == 10 ** 6
    sigma = eps / np.sqrt(3) / np.sqrt(d.size)
    assert abs(d.mean()) < 3 * sigma


# mixing

def test_mix_alternate_same_is_identity():
    ds, _ = blob_setup()
    a = generate_random(ds, 0.1, CLASSWISE, 1)
    mixed = mix_noises(a, a, "alternate", 5, ds.labels)
    assert np.array_equal(apply_noise(ds, mixed).images, apply_noise(ds, a).images)


def test_mix_alternate_assigns_both():
    ds, _ = blob_setup()
    a, b = generate_random(ds, 0.1, CLASSWISE, 1), generate_random(ds, 0.1, CLASSWISE, 2)
    mixed = mix_noises(a, b, "alternate", 5, ds.labels)
    pick = mixed.meta["assignment"].astype(bool)
    assert 0 < pick.sum() < len(ds)
    assert np.array_equal(mixed.deltas[pick], b.deltas[ds.labels[pick]])
    assert np.array_equal(mixed.deltas[~pick], a.deltas[ds.labels[~pick]])


def test_mix_add():
    ds, _ = blob_setup()
    a = generate_random(ds, 0.1, CLASSWISE, 1)
    zero = NoiseSet(SAMPLEWISE, 0.1, np.zeros((len(ds), *ds.image_shape)))
    summed = mix_noises(a, zero, "add", labels=ds.labels)
    assert np.array_equal(apply_noise(ds, summed).images, apply_noise(ds, a).images)
    u = generate_random(ds, 0.1, SAMPLEWISE, 4)
    summed = mix_noises(a, u, "add", labels=ds.labels)
    assert np.abs(summed.deltas).max() <= summed.epsilon
    cw = mix_noises(a, generate_random(ds, 0.1, CLASSWISE, 8), "add")
    assert cw.form == CLASSWISE and np.abs(cw.deltas).max() <= cw.epsilon


def test_mix_errors():
    ds, _ = blob_setup()
    a = generate_random(ds, 0.1, CLASSWISE, 1)
    u = generate_random(ds, 0.1, SAMPLEWISE, 1)
    with pytest.raises(FormError):
        mix_noises(u, a, "add", labels=ds.labels)
    with pytest.raises(FormError):
        mix_noises(a, u, "alternate", labels=ds.labels)
    with pytest.raises(ParameterError):
        mix_noises(a, a, "blend")


# property: generator outputs always respect the budget

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.floats(1e-3, 0.3))
def test_random_generator_budget(seed, eps):
    n = generate_random(7, eps, SAMPLEWISE, seed, image_shape=(1, 3, 3))
    assert np.abs(n.deltas).max() <= f32(eps)
