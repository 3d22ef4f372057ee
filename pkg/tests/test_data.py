import gzip
import struct

import numpy as np
import pytest

from unlearnable.data import (CLASSWISE, SAMPLEWISE, Dataset, NoiseSet, apply_noise, load_idx, load_mnist_subset,
                              load_noise, mix_unlearnable, protect_classes, save_noise, synth_blobs,
                              transfer_noise, write_idx)
from unlearnable.errors import (CompatibilityError, ConsistencyError, FormatError, FormError, MapError,
                                ParameterError)
from unlearnable.models import ModelSpec
from unlearnable.train import TrainConfig, accuracy, train_model


def raw_idx(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


@pytest.fixture
def idx_pair(tmp_path):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(raw_idx(0x803, (2, 2, 2), [0, 255, 255, 0, 255, 255, 0, 0]))
    lab.write_bytes(raw_idx(0x801, (2,), [1, 0]))
    return img, lab


def test_idx_scaling(idx_pair):
    ds = load_idx(*idx_pair)
    assert ds.images.shape == (2, 1, 2, 2)
    assert set(np.unique(ds.images)) == {0.0, 1.0}
    assert ds.images[0, 0].tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert ds.labels.tolist() == [1, 0] and ds.num_classes == 2


def test_idx_count_mismatch(tmp_path, idx_pair):
    lab = tmp_path / "lab3.idx"
    lab.write_bytes(raw_idx(0x801, (3,), [1, 0, 1]))
    with pytest.raises(ConsistencyError):
        load_idx(idx_pair[0], lab)


def test_idx_bad_magic(tmp_path, idx_pair):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(raw_idx(0x802, (2,), [1, 0]))
    with pytest.raises(FormatError):
        load_idx(idx_pair[0], bad)


def test_idx_truncated(tmp_path, idx_pair):
    cut = tmp_path / "cut.idx"
    cut.write_bytes(idx_pair[0].read_bytes()[:-3])
    with pytest.raises(OSError):
        load_idx(cut, idx_pair[1])


def test_idx_roundtrip_independent_writer(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(3, 5, 4), dtype=np.uint8)
    labels = np.array([2, 0, 1], dtype=np.uint8)
    # independent writer: plain struct packing
    ref_img = raw_idx(0x803, pixels.shape, pixels.tobytes())
    ref_lab = raw_idx(0x801, labels.shape, labels.tobytes())
    write_idx(tmp_path / "i.idx", pixels)
    write_idx(tmp_path / "l.idx", labels)
    assert (tmp_path / "i.idx").read_bytes() == ref_img
    assert (tmp_path / "l.idx").read_bytes() == ref_lab
    ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    back = np.rint(ds.images[:, 0] * 255).astype(np.uint8)
    assert back.tobytes() == pixels.tobytes()
    (tmp_path / "i.idx.gz").write_bytes(gzip.compress(ref_img))
    assert np.array_equal(load_idx(tmp_path / "i.idx.gz", tmp_path / "l.idx").images, ds.images)


def test_bundled_mnist_subset():
    train, test = load_mnist_subset()
    assert (len(train), len(test)) == (8000, 2000)
    assert train.image_shape == (1, 28, 28) and train.num_classes == 10
    assert set(np.unique(train.labels)) == set(range(10))


def test_dataset_invariants():
    with pytest.raises(ConsistencyError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((1, 1, 2, 2)), [2], 2)
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((2, 1, 2, 2)), [0], 2)


# blobs

def test_blobs_zero_spread_limit():
    ds = synth_blobs(3, 5, 4, 1e-12, 0)
    for k in range(3):
        pts = ds.images[ds.labels == k].reshape(5, 4)
        assert np.allclose(pts, pts[0], atol=1e-9)
    assert ds.image_shape == (1, 4, 1)


def test_blobs_deterministic():
    a, b = synth_blobs(4, 10, 3, 0.1, 7), synth_blobs(4, 10, 3, 0.1, 7)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_blobs_errors():
    with pytest.raises(ParameterError):
        synth_blobs(3, 5, 4, 0.0, 0)
    with pytest.raises(ParameterError):
        synth_blobs(1, 5, 4, 0.1, 0)


def test_blobs_linearly_separable():
    ds = synth_blobs(4, 100, 2, 0.02, 3)
    spec = ModelSpec("mlp", ds.image_shape, 4, ())
    model, _ = train_model(ds, ds, spec, TrainConfig(epochs=60, batch_size=16, lr=0.5, schedule="constant"))
    assert accuracy(model, ds) >= 0.99


# apply_noise and friends

def full_noise(form, ds, eps, seed=0, value=None):
    count = len(ds) if form == SAMPLEWISE else ds.num_classes
    r = np.random.default_rng(seed)
    d = r.uniform(-eps, eps, (count, *ds.image_shape)) if value is None else np.full((count, *ds.image_shape), value)
    return NoiseSet(form, eps, d)


def test_apply_zero_noise_identity():
    ds = synth_blobs(3, 4, 5, 0.1, 0)
    out = apply_noise(ds, full_noise(SAMPLEWISE, ds, 0.1, value=0.0))
    assert np.array_equal(out.images, ds.images)


def test_classwise_same_class_same_delta():
    x = np.full((3, 1, 2, 2), 0.5)
    ds = Dataset(x, [1, 1, 0], 2)
    out = apply_noise(ds, full_noise(CLASSWISE, ds, 0.1, seed=3))
    assert out.images[0].tobytes() == out.images[1].tobytes()
    assert out.images[0].tobytes() != out.images[2].tobytes()


def test_clip_at_one():
    ds = Dataset(np.ones((1, 1, 1, 1)), [0], 1)
    eps = 8 / 255
    out = apply_noise(ds, NoiseSet(SAMPLEWISE, eps, np.full((1, 1, 1, 1), np.float32(eps))))
    assert out.images.item() == 1.0


def test_apply_noise_incompatible():
    ds = synth_blobs(3, 4, 5, 0.1, 0)
    with pytest.raises(CompatibilityError):
        apply_noise(ds, NoiseSet(SAMPLEWISE, 0.1, np.zeros((5, 1, 5, 1))))
    with pytest.raises(CompatibilityError):
        apply_noise(ds, NoiseSet(CLASSWISE, 0.1, np.zeros((2, 1, 5, 1))))
    with pytest.raises(CompatibilityError):
        apply_noise(ds, NoiseSet(CLASSWISE, 0.1, np.zeros((3, 2, 5, 1))))


def test_apply_noise_stays_in_ball_and_range(rng):
    x = rng.choice([0.0, 1.0, 0.3, 0.999], size=(200, 1, 3, 3))
    ds = Dataset(x, rng.integers(0, 4, 200), 4)
    for eps in (8 / 255, 0.1, 1e-3):
        for form in (SAMPLEWISE, CLASSWISE):
            noise = full_noise(form, ds, eps, seed=int(eps * 1e4))
            out = apply_noise(ds, noise)
            assert out.images.min() >= 0.0 and out.images.max() <= 1.0
            assert np.abs(out.images - ds.images).max() <= noise.epsilon


def test_patch_noise_located_and_seeded():
    ds = Dataset(np.full((4, 1, 6, 6), 0.5), [0, 1, 0, 1], 2)
    noise = NoiseSet(CLASSWISE, 0.1, np.full((2, 1, 2, 3), 0.05), patch=(2, 3))
    a = apply_noise(ds, noise, patch_seed=4)
    b = apply_noise(ds, noise, patch_seed=4)
    assert np.array_equal(a.images, b.images)
    changed = (a.images != 0.5).reshape(4, -1).sum(axis=1)
    assert changed.tolist() == [6, 6, 6, 6]


def test_mix_unlearnable_edges():
    clean = synth_blobs(2, 500, 3, 0.1, 0)
    unl = apply_noise(clean, full_noise(SAMPLEWISE, clean, 0.1, value=0.05))
    mixed, rest = mix_unlearnable(clean, unl, 0.0, 1)
    assert np.array_equal(mixed.images, clean.images) and len(rest) == 1000
    mixed, rest = mix_unlearnable(clean, unl, 1.0, 1)
    assert np.array_equal(mixed.images, unl.images) and len(rest) == 0
    mixed, rest = mix_unlearnable(clean, unl, 0.8, 1)
    swapped = np.any(mixed.images != clean.images, axis=(1, 2, 3))
    assert swapped.sum() == 800 and len(rest) == 200
    again, _ = mix_unlearnable(clean, unl, 0.8, 1)
    assert np.array_equal(again.images, mixed.images)


def test_mix_unlearnable_misaligned():
    a = synth_blobs(2, 5, 3, 0.1, 0)
    b = synth_blobs(2, 6, 3, 0.1, 0)
    with pytest.raises(ConsistencyError):
        mix_unlearnable(a, b, 0.5, 0)


def test_protect_classes():
    ds = synth_blobs(4, 20, 5, 0.1, 0)
    noise = full_noise(CLASSWISE, ds, 0.1, seed=2)
    assert np.array_equal(protect_classes(ds, noise, []).images, ds.images)
    assert np.array_equal(protect_classes(ds, noise, range(4)).images, apply_noise(ds, noise).images)
    out = protect_classes(ds, noise, {2})
    keep = ds.labels != 2
    assert out.images[keep].tobytes() == ds.images[keep].tobytes()
    assert np.any(out.images[~keep] != ds.images[~keep])
    with pytest.raises(ParameterError):
        protect_classes(ds, noise, [4])


def same_noise(a, b):
    return a.form == b.form and a.epsilon == b.epsilon and a.deltas.tobytes() == b.deltas.tobytes()


def test_transfer_noise():
    ds = synth_blobs(3, 2, 4, 0.1, 0)
    noise = full_noise(CLASSWISE, ds, 0.1, seed=5)
    assert same_noise(transfer_noise(noise, {0: 0, 1: 1, 2: 2}), noise)
    shared = transfer_noise(noise, {0: 0, 1: 0, 2: 0})
    assert all(np.array_equal(d, noise.deltas[0]) for d in shared.deltas)
    perm = {0: 2, 1: 0, 2: 1}
    inv = {v: k for k, v in perm.items()}
    assert same_noise(transfer_noise(transfer_noise(noise, perm), inv), noise)
    with pytest.raises(FormError):
        transfer_noise(full_noise(SAMPLEWISE, ds, 0.1), {0: 0})
    with pytest.raises(MapError):
        transfer_noise(noise, {0: 0, 2: 1}, num_classes=3)


def test_noise_file_roundtrip(tmp_path, rng):
    noise = NoiseSet(SAMPLEWISE, 8 / 255, rng.uniform(-8 / 255, 8 / 255, (7, 3, 4, 5)) * 0.99)
    save_noise(noise, tmp_path / "n.unln")
    back = load_noise(tmp_path / "n.unln")
    assert back.form == SAMPLEWISE and back.deltas.tobytes() == noise.deltas.tobytes()
    assert back.epsilon == noise.epsilon == float(np.float32(8 / 255))
    raw = (tmp_path / "n.unln").read_bytes()
    assert raw[:4] == b"UNLN" and raw[4:7] == bytes([1, 0, 0])
    assert struct.unpack("<f", raw[7:11])[0] == np.float32(8 / 255)
    assert struct.unpack("<I", raw[11:15])[0] == 7 and raw[15] == 3
    assert struct.unpack("<3I", raw[16:28]) == (3, 4, 5)


def test_noise_file_errors(tmp_path):
    noise = NoiseSet(CLASSWISE, 0.1, np.zeros((2, 1, 3, 3)))
    save_noise(noise, tmp_path / "n.unln")
    raw = (tmp_path / "n.unln").read_bytes()
    (tmp_path / "cut.unln").write_bytes(raw[:-5])
    with pytest.raises(OSError):
        load_noise(tmp_path / "cut.unln")
    (tmp_path / "magic.unln").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_noise(tmp_path / "magic.unln")
    (tmp_path / "ver.unln").write_bytes(raw[:4] + b"\x02" + raw[5:])
    with pytest.raises(FormatError):
        load_noise(tmp_path / "ver.unln")


def test_noiseset_rejects_out_of_ball():
    with pytest.raises(ConsistencyError):
        NoiseSet(SAMPLEWISE, 0.1, np.full((1, 1, 1, 1), 0.2))
