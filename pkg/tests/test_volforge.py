import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdrformer import volforge as vf
from sdrformer.volforge import (AugmentationConfig, DatasetManifest, MultiPhaseSample,
                                PhaseVolume)


def sample_of(grid, n_phases=2, mask=None):
    phases = [PhaseVolume(grid + 100.0 * p, f"p{p}") for p in range(n_phases)]
    return MultiPhaseSample("s", phases, 0, "train", mask)


def coordinate_grid(shape):
    d, h, w = shape
    return (np.arange(d * h * w, dtype=np.float32)).reshape(shape)


# ---------------------------------------------------------------- VVOL


def test_round_trip_small_grid(tmp_path):
    grid = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    vf.write_volume(tmp_path / "a.vvol", grid)
    out = vf.read_volume(tmp_path / "a.vvol")
    assert out.voxels.shape == (2, 3, 4)
    assert np.array_equal(out.voxels, grid)


def test_header_layout(tmp_path):
    vf.write_volume(tmp_path / "a.vvol", np.zeros((2, 3, 4), np.float32))
    raw = (tmp_path / "a.vvol").read_bytes()
    assert struct.unpack_from("<4sIIIIII", raw) == (b"VVOL", 1, 3, 2, 3, 4, 0)
    assert len(raw) == 28 + 24 * 4


def test_full_size_grid(tmp_path):
    grid = np.random.default_rng(0).standard_normal((16, 128, 128)).astype(np.float32)
    vf.write_volume(tmp_path / "a.vvol", grid)
    assert vf.read_volume(tmp_path / "a.vvol").voxels.shape == (16, 128, 128)


def test_truncated_payload(tmp_path):
    p = tmp_path / "a.vvol"
    vf.write_volume(p, np.ones((2, 3, 4), np.float32))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(vf.TruncatedVolumeError):
        vf.read_volume(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "a.vvol"
    vf.write_volume(p, np.ones((2, 2, 2), np.float32))
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(vf.BadMagicError):
        vf.read_volume(p)


def test_payload_longer_than_header(tmp_path):
    p = tmp_path / "a.vvol"
    vf.write_volume(p, np.ones((2, 2, 2), np.float32))
    p.write_bytes(p.read_bytes() + b"\0\0\0\0")
    with pytest.raises(vf.DimensionMismatchError):
        vf.read_volume(p)


def test_error_types_are_distinct():
    kinds = {vf.BadMagicError, vf.TruncatedVolumeError, vf.DimensionMismatchError}
    assert len(kinds) == 3
    assert all(issubclass(k, vf.VolumeFormatError) for k in kinds)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_round_trip_is_bit_exact(tmp_path_factory, grid):
    p = tmp_path_factory.mktemp("v") / "g.vvol"
    vf.write_volume(p, grid)
    assert vf.read_volume(p).voxels.tobytes() == grid.tobytes()


# ---------------------------------------------------------------- normalization / resize


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-1e3, 1e3)))
def test_normalization_moments(grid):
    out = vf.normalize_volume(grid)
    if np.ptp(grid) < 1e-6:
        return
    assert abs(out.astype(np.float64).mean()) < 1e-4
    assert abs(out.astype(np.float64).std() - 1.0) < 1e-4


def test_constant_volume_normalizes_to_zero():
    assert not vf.normalize_volume(np.full((2, 3, 4), 5.0)).any()


def test_resize_constant():
    out = vf.resize_volume(PhaseVolume(np.full((5, 9, 7), 7.0, np.float32)), (16, 128, 128))
    assert out.voxels.shape == (16, 128, 128)
    np.testing.assert_allclose(out.voxels, 7.0, rtol=0, atol=1e-6)


def test_resize_identity_is_bitwise():
    grid = np.random.default_rng(1).standard_normal((3, 4, 5)).astype(np.float32)
    assert np.array_equal(vf.resize_volume(PhaseVolume(grid), (3, 4, 5)).voxels, grid)


def test_resize_linear_ramp_matches_closed_form():
    w_in, w_out = 8, 16
    ramp = np.broadcast_to(np.arange(w_in, dtype=np.float32), (2, 3, w_in)).copy()
    out = vf.resize_volume(PhaseVolume(ramp), (2, 3, w_out)).voxels
    expected = np.arange(w_out) * (w_in - 1) / (w_out - 1)
    np.testing.assert_allclose(out[1, 2], expected, atol=1e-5)


def test_resize_rejects_non_positive():
    with pytest.raises(ValueError):
        vf.resize_volume(PhaseVolume(np.zeros((2, 2, 2), np.float32)), (0, 2, 2))


# ---------------------------------------------------------------- crop / augment


def test_center_crop_offsets():
    assert vf.crop_offsets((16, 128, 128), (14, 112, 112), "center") == (1, 8, 8)


def test_random_crop_bounds_and_determinism():
    for seed in range(50):
        off = vf.crop_offsets((16, 128, 128), (14, 112, 112), "random", seed)
        assert 0 <= off[0] <= 2 and 0 <= off[1] <= 16 and 0 <= off[2] <= 16
        assert off == vf.crop_offsets((16, 128, 128), (14, 112, 112), "random", seed)


def test_crop_too_large():
    with pytest.raises(ValueError):
        vf.crop_offsets((4, 4, 4), (5, 4, 4), "center")


def test_crop_shares_offsets_across_phases():
    grid = coordinate_grid((6, 10, 10))
    out = vf.crop_sample(sample_of(grid, 3), (4, 6, 6), "random", seed=3)
    base = out.phases[0].voxels
    for p, vol in enumerate(out.phases):
        assert np.array_equal(vol.voxels - 100.0 * p, base)


def test_augment_identity_config():
    grid = coordinate_grid((4, 6, 6))
    cfg = AugmentationConfig(flip_prob=(0, 0, 0), rotation=(0,), erase_prob=0.0)
    out = vf.augment_sample(sample_of(grid), cfg, seed=5)
    assert np.array_equal(out.stack(), sample_of(grid).stack())


def test_flip_is_an_involution():
    grid = coordinate_grid((4, 6, 6))
    cfg = AugmentationConfig(flip_prob=(0, 0, 1), rotation=(0,), erase_prob=0.0)
    once = vf.augment_sample(sample_of(grid), cfg, seed=1)
    assert np.array_equal(once.phases[0].voxels, grid[:, :, ::-1])
    twice = vf.augment_sample(once, cfg, seed=1)
    assert np.array_equal(twice.stack(), sample_of(grid).stack())


@pytest.mark.parametrize("seed", range(20))
def test_erased_fraction_in_range(seed):
    grid = np.ones((8, 16, 16), np.float32)
    cfg = AugmentationConfig(flip_prob=(0, 0, 0), rotation=(0,), erase_prob=1.0)
    out = vf.augment_sample(sample_of(grid, 1), cfg, seed=seed).phases[0].voxels
    frac = float((out == 0).mean())
    assert 0.02 <= frac <= 0.10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_same_transform_on_every_phase(seed):
    grid = coordinate_grid((4, 6, 6))
    mask = grid > grid.mean()
    out = vf.augment_sample(sample_of(grid, 3, mask), AugmentationConfig(erase_prob=0.0), seed)
    base = out.phases[0].voxels
    for p, vol in enumerate(out.phases):
        assert np.array_equal(vol.voxels - 100.0 * p, base)
    assert np.array_equal(out.mask, base > grid.mean())
    again = vf.augment_sample(sample_of(grid, 3, mask), AugmentationConfig(erase_prob=0.0), seed)
    assert np.array_equal(again.stack(), out.stack())


def test_odd_rotation_skipped_for_non_square():
    grid = coordinate_grid((2, 4, 6))
    cfg = AugmentationConfig(flip_prob=(0, 0, 0), rotation=(1,), erase_prob=0.0)
    assert vf.augment_sample(sample_of(grid), cfg, seed=0).shape == (2, 4, 6)


@pytest.mark.parametrize("kw", [dict(flip_prob=(1.5, 0, 0)), dict(erase_prob=-0.1),
                                dict(erase_fraction_range=(0.0, 0.1)),
                                dict(erase_fraction_range=(0.2, 0.1)), dict(rotation=(5,))])
def test_augmentation_config_validation(kw):
    with pytest.raises(ValueError):
        AugmentationConfig(**kw)


def test_low_resolution_pools_hw_only():
    grid = np.arange(2 * 4 * 4, dtype=np.float64).reshape(2, 4, 4)
    low = vf.low_resolution(grid)
    assert low.shape == (2, 2, 2)
    assert low[0, 0, 0] == np.mean([0, 1, 4, 5])


# ---------------------------------------------------------------- synthetic data


def test_class_signature_separation():
    sig0 = vf.class_signature(0, 2, 3, 0.8)
    sig1 = vf.class_signature(1, 2, 3, 0.8)
    np.testing.assert_allclose(np.abs(sig0 - sig1), 0.8)


def test_noiseless_lesion_matches_signature():
    rng = np.random.default_rng(0)
    for label in range(3):
        vols, mask, _ = vf.synthesize_sample(label, 4, 3, (6, 16, 16), 0.5, 0.0, rng)
        means = vols[:, mask].mean(axis=1)
        np.testing.assert_allclose(means, vf.class_signature(label, 3, 4, 0.5), atol=1e-6)


def test_dataset_counts(tmp_path):
    path = vf.generate_synthetic_dataset(tmp_path, 250, 3, 2, dims=(2, 8, 8), seed=0)
    m = DatasetManifest.load(path)
    assert len(m.samples) == 250
    assert all(len(e["phases"]) == 3 for e in m.samples)
    for split in ("train", "val"):
        labels = [e["label"] for e in m.samples if e["split"] == split]
        assert abs(labels.count(0) - labels.count(1)) <= 1


def test_generator_is_byte_reproducible(tmp_path):
    a = vf.generate_synthetic_dataset(tmp_path / "a", 6, 2, 2, dims=(2, 8, 8), seed=4)
    b = vf.generate_synthetic_dataset(tmp_path / "b", 6, 2, 2, dims=(2, 8, 8), seed=4)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.vvol"))
    assert files_a
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert a.read_text() == b.read_text()


def test_noiseless_nearest_centroid_oracle(tmp_path):
    path = vf.generate_synthetic_dataset(tmp_path, 60, 3, 3, dims=(4, 12, 12), contrast=0.8,
                                         noise_sd=0.0, seed=2, split_fractions=(0.5, 0.5, 0))
    m = DatasetManifest.load(path)

    def features(split):
        xs, ys = [], []
        for s in m.load_samples(split):
            xs.append(s.stack()[:, s.mask].mean(axis=1))
            ys.append(s.label)
        return np.array(xs), np.array(ys)

    xtr, ytr = features("train")
    xva, yva = features("val")
    centroids = np.stack([xtr[ytr == k].mean(axis=0) for k in range(3)])
    pred = np.argmin(((xva[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == yva).mean() == 1.0


def test_decoy_phases_are_uninformative():
    rng = np.random.default_rng(0)
    hits = []
    for i in range(400):
        label = i % 2
        _, _, intensity = vf.synthesize_sample(label, 3, 2, (2, 8, 8), 0.8, 0.0, rng,
                                               signal_phases=[1])
        assert intensity[1] == vf.class_signature(label, 2, 3, 0.8)[1]
        hits.append(intensity[0] == vf.class_signature(label, 2, 3, 0.8)[0])
    assert 0.4 < np.mean(hits) < 0.6


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        vf.generate_synthetic_dataset(blocker / "sub", 2, 1, 2, dims=(2, 4, 4))


def test_manifest_rejects_bad_label(tmp_path):
    path = vf.generate_synthetic_dataset(tmp_path, 4, 2, 2, dims=(2, 4, 4))
    raw = json.loads(path.read_text())
    raw["samples"][0]["label"] = 7
    path.write_text(json.dumps(raw))
    with pytest.raises(vf.ManifestError):
        DatasetManifest.load(path)


def test_manifest_rejects_missing_file(tmp_path):
    path = vf.generate_synthetic_dataset(tmp_path, 4, 2, 2, dims=(2, 4, 4))
    next((tmp_path / "volumes").glob("*phase1.vvol")).unlink()
    with pytest.raises(vf.ManifestError):
        DatasetManifest.load(path)


def test_load_samples_phase_subset(tmp_path):
    m = DatasetManifest.load(vf.generate_synthetic_dataset(tmp_path, 4, 3, 2, dims=(2, 4, 4)))
    s = m.load_samples("train", ["phase2", "phase0"])[0]
    assert [p.phase_name for p in s.phases] == ["phase2", "phase0"]


# ---------------------------------------------------------------- MedMNIST3D


def fake_archive(path, n_classes, sizes=(6, 2, 2)):
    rng = np.random.default_rng(0)
    data = {}
    for split, n in zip(("train", "val", "test"), sizes):
        data[f"{split}_images"] = rng.integers(0, 256, (n, 28, 28, 28), dtype=np.uint8)
        data[f"{split}_labels"] = (np.arange(n) % n_classes).reshape(-1, 1)
    np.savez(path, **data)
    return path


def test_medmnist_nodule(tmp_path):
    manifest, samples = vf.load_medmnist3d(fake_archive(tmp_path / "nodulemnist3d.npz", 2))
    assert manifest.n_classes == 2
    assert all(s.n_phases == 1 and s.shape == (28, 28, 28) for s in samples)
    assert max(s.phases[0].voxels.max() for s in samples) <= 1.0
    assert [s.split for s in samples].count("val") == 2


def test_medmnist_organ_classes(tmp_path):
    manifest, _ = vf.load_medmnist3d(fake_archive(tmp_path / "organmnist3d.npz", 11, (11, 1, 1)))
    assert manifest.n_classes == 11


def test_medmnist_missing_collection(tmp_path):
    np.savez(tmp_path / "nodulemnist3d.npz", train_images=np.zeros((1, 28, 28, 28), np.uint8))
    with pytest.raises(vf.ManifestError):
        vf.load_medmnist3d(tmp_path / "nodulemnist3d.npz")


def test_medmnist_label_out_of_range(tmp_path):
    path = fake_archive(tmp_path / "nodulemnist3d.npz", 3)
    with pytest.raises(vf.ManifestError):
        vf.load_medmnist3d(path)
