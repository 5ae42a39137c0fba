import numpy as np
import pytest

from zdc_corrvae.container import read_container, write_container
from zdc_corrvae.datasets import (
    BadFractions, Dataset, DatasetError, EmptyDataset, NegativePixel, NonFinite, ShapeMismatch,
    STD_FLOOR, ToyShowerConfig, compute_normalization, empty_dataset, expected_responses,
    load_dataset, render_toy_responses, save_dataset, shower_centers, split_dataset,
    synthesize_toy_dataset,
)
from zdc_corrvae.physics import batch_center_of_mass, property_vector


def particles_at(centers, energy=10.0):
    """Particles whose deposit centers are ``centers`` (pz = 1, default position scale)."""
    centers = np.asarray(centers, dtype=np.float64)
    p = np.zeros((len(centers), 9))
    p[:, 2] = 1.0
    p[:, 8] = energy
    p[:, 0] = (centers[:, 0] - 21.5) / 10.0
    p[:, 1] = (centers[:, 1] - 21.5) / 10.0
    return p


def test_zero_energy_gives_zero_image():
    p = particles_at([[15.0, 30.0]], energy=0.0)
    img = render_toy_responses(p, ToyShowerConfig(), np.random.default_rng(0))
    assert img.shape == (1, 44, 44) and not img.any()


def test_centered_shower_is_symmetric():
    img = expected_responses(particles_at([[21.5, 21.5]]), ToyShowerConfig(poisson_noise=False))[0]
    np.testing.assert_allclose(img, img.T, atol=1e-12)
    np.testing.assert_allclose(batch_center_of_mass(img)[0], [21.5, 21.5], atol=1e-12)


def test_mean_total_deposit_matches_expectation():
    ds = synthesize_toy_dataset(10000, seed=3)
    cfg = ToyShowerConfig()
    observed = ds.images.sum(axis=(1, 2)).astype(np.float64).mean()
    expected = cfg.amplitude_per_energy * ds.particles[:, 8].astype(np.float64).mean()
    assert abs(observed / expected - 1) < 0.01


def test_synthesis_deterministic():
    a = synthesize_toy_dataset(50, seed=11)
    b = synthesize_toy_dataset(50, seed=11)
    assert a == b
    assert a != synthesize_toy_dataset(50, seed=12)


def test_synthesis_invariants():
    ds = synthesize_toy_dataset(200, seed=0)
    assert ds.images.shape == (200, 44, 44)
    assert (ds.images >= 0).all()
    p = ds.particles
    assert (np.abs(p[:, :2]) <= 1).all() and (p[:, 2] >= 1).all() and (p[:, 2] <= 2).all()
    assert (p[:, 8] >= 1).all() and (p[:, 8] <= 100).all()
    assert "particle_distributions" in ds.provenance


@pytest.mark.parametrize("sigma, lo, hi", [(1.5, 2.85, 40.15), (2.0, 4.2, 38.8), (3.0, 7.1, 35.9)])
def test_noise_free_com_tracks_center(sigma, lo, hi):
    cfg = ToyShowerConfig(sigma=sigma, poisson_noise=False)
    grid = np.linspace(lo, hi, 60)
    centers = np.stack(np.meshgrid(grid, grid), axis=-1).reshape(-1, 2)
    p = particles_at(centers)
    com = batch_center_of_mass(expected_responses(p, cfg))
    assert np.abs(com - shower_centers(p, cfg)).max() <= 0.05


def test_edge_truncation_bias_is_subpixel():
    # Centers near the clamp limits lose Gaussian mass off-grid; at the default
    # width the CoM bias stays well below a pixel.
    cfg = ToyShowerConfig(poisson_noise=False)
    p = particles_at([[2.0, 41.0], [41.0, 2.0]])
    com = batch_center_of_mass(expected_responses(p, cfg))
    err = np.abs(com - shower_centers(p, cfg)).max()
    assert 0.05 < err < 0.2


def test_centers_are_clamped():
    p = particles_at([[-50.0, 100.0]])
    np.testing.assert_array_equal(shower_centers(p, ToyShowerConfig()), [[2.0, 41.0]])


def test_property_vector_recovers_synthetic_center():
    cfg = ToyShowerConfig(poisson_noise=False)
    centers = np.array([[12.3, 30.1], [21.5, 21.5], [31.0, 11.9]])
    imgs = expected_responses(particles_at(centers), cfg)
    for img, (cx, cy) in zip(imgs, centers):
        np.testing.assert_allclose(property_vector(img), [cx / 21.5 - 1, cy / 21.5 - 1], atol=0.01)


def test_save_load_round_trip(tmp_path):
    ds = synthesize_toy_dataset(30, seed=1)
    a, b = tmp_path / "a.zdc1", tmp_path / "b.zdc1"
    save_dataset(ds, a)
    save_dataset(ds, b)
    assert a.read_bytes() == b.read_bytes()
    loaded = load_dataset(a)
    assert loaded == ds
    assert loaded.images.tobytes() == ds.images.tobytes()


def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "e.zdc1"
    save_dataset(empty_dataset(source="none"), path)
    loaded = load_dataset(path)
    assert len(loaded) == 0 and loaded.images.shape == (0, 44, 44)
    c = read_container(path)
    assert c.arrays["particles"].shape == (0, 9)


def test_normalization_persisted(tmp_path):
    ds = synthesize_toy_dataset(20, seed=1)
    ds = ds.with_normalization(compute_normalization(ds, "log1p"))
    save_dataset(ds, tmp_path / "n.zdc1")
    assert load_dataset(tmp_path / "n.zdc1").normalization == ds.normalization


def _write_raw(path, images, particles, kind="dataset"):
    write_container(path, {"format_kind": kind},
                    {"images": images.astype(np.float32), "particles": particles.astype(np.float32)})


def test_load_validation(tmp_path):
    path = tmp_path / "bad.zdc1"
    _write_raw(path, np.zeros((2, 32, 32)), np.zeros((2, 9)))
    with pytest.raises(ShapeMismatch):
        load_dataset(path)
    imgs = np.zeros((2, 44, 44))
    imgs[1, 3, 3] = np.nan
    _write_raw(path, imgs, np.zeros((2, 9)))
    with pytest.raises(NonFinite):
        load_dataset(path)
    imgs = np.zeros((2, 44, 44))
    imgs[0, 0, 0] = -1
    _write_raw(path, imgs, np.zeros((2, 9)))
    with pytest.raises(NegativePixel):
        load_dataset(path)
    _write_raw(path, np.zeros((2, 44, 44)), np.zeros((2, 9)), kind="samples")
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_split_sizes_and_determinism():
    ds = synthesize_toy_dataset(10, seed=0)
    tr, va, te = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    tr2, va2, te2 = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
    assert tr == tr2 and va == va2 and te == te2
    # remainder goes to train
    assert [len(s) for s in split_dataset(synthesize_toy_dataset(7, seed=0), (0.5, 0.25, 0.25))] == [5, 1, 1]


def test_split_partition():
    ds = synthesize_toy_dataset(103, seed=5)
    parts = split_dataset(ds, (0.7, 0.2, 0.1), seed=9)
    index = np.concatenate([p.index for p in parts])
    assert sorted(index.tolist()) == list(range(103))
    order = np.argsort(index)
    images = np.concatenate([p.images for p in parts])[order]
    particles = np.concatenate([p.particles for p in parts])[order]
    assert images.tobytes() == ds.images.tobytes()
    assert particles.tobytes() == ds.particles.tobytes()


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.8, 0.2), (-0.1, 0.6, 0.5)])
def test_bad_fractions(fractions):
    with pytest.raises(BadFractions):
        split_dataset(synthesize_toy_dataset(5), fractions)


def test_normalization_statistics():
    imgs = np.zeros((3, 44, 44), np.float32)
    same = Dataset(imgs, np.tile(np.arange(9, dtype=np.float32), (3, 1)))
    norm = compute_normalization(same)
    assert norm.particle_std == (STD_FLOOR,) * 9

    two = np.zeros((2, 9), np.float32)
    two[1] = 2.0
    norm = compute_normalization(Dataset(imgs[:2], two))
    assert norm.particle_mean == (1.0,) * 9 and norm.particle_std == (1.0,) * 9

    with pytest.raises(EmptyDataset):
        compute_normalization(empty_dataset())


def test_normalization_matches_two_pass_oracle():
    ds = synthesize_toy_dataset(300, seed=4)
    norm = compute_normalization(ds)
    x = ds.particles.astype(np.float64)
    for k in range(9):
        col = [float(v) for v in x[:, k]]
        mean = sum(col) / len(col)
        var = sum((v - mean) ** 2 for v in col) / len(col)
        assert norm.particle_mean[k] == pytest.approx(mean, abs=1e-6)
        assert norm.particle_std[k] == pytest.approx(max(var**0.5, STD_FLOOR), abs=1e-6)


def test_image_transform_inverse():
    ds = synthesize_toy_dataset(5, seed=0)
    norm = compute_normalization(ds, "log1p")
    back = norm.inverse_images(norm.transform_images(ds.images))
    np.testing.assert_allclose(back, ds.images, rtol=1e-5, atol=1e-4)
    assert (norm.inverse_images(np.full((44, 44), -3.0)) == 0).all()
