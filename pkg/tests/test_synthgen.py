import numpy as np
import pytest

import oracles
from cmcseg.io import LabelMask, Volume
from cmcseg.synthgen import (
    Ellipsoid, MisalignmentSpec, ModalityAppearance, PhantomSpec, apply_misalignment,
    generate_dataset, make_anatomy, rasterize_ellipsoids, render_modality, resample,
    rigid_affine, sample_ellipsoids,
)

APP_A = ModalityAppearance((0.0, 1.0, 0.5), noise_sigma=0.05)
APP_B = ModalityAppearance((1.0, 0.2, 0.6), noise_sigma=0.05)


def test_centered_ellipsoid_count():
    e = Ellipsoid((15.5, 15.5, 15.5), (4.0, 4.0, 4.0), 1)
    mask = rasterize_ellipsoids((32, 32, 32), [e], 2)
    assert np.count_nonzero(mask.data) == oracles.ellipsoid_count((32, 32, 32), e.center, e.semi_axes)


def test_sampled_ellipsoids_match_brute_force():
    spec = PhantomSpec(grid_shape=(16, 16, 16), num_classes=2, size_range=(2.5, 5.0), seed=3)
    (e,) = sample_ellipsoids(spec, np.random.default_rng(3))
    mask = rasterize_ellipsoids(spec.grid_shape, [e], 2)
    assert np.count_nonzero(mask.data) == oracles.ellipsoid_count(spec.grid_shape, e.center, e.semi_axes)


def test_anatomy_deterministic_and_complete():
    spec = PhantomSpec(num_classes=4, organs_per_class=2, seed=11)
    a, b = make_anatomy(spec), make_anatomy(spec)
    assert np.array_equal(a.data, b.data)
    counts = np.bincount(a.data.ravel(), minlength=4)
    assert (counts[1:] > 0).all()


def test_semi_axes_exceeding_grid():
    with pytest.raises(ValueError):
        PhantomSpec(grid_shape=(16, 16, 16), size_range=(4.0, 9.0))


def test_degenerate_rendering_is_binary():
    mask = make_anatomy(PhantomSpec(num_classes=2, seed=1))
    vol = render_modality(mask, ModalityAppearance((0.0, 1.0)), seed=0)
    assert np.array_equal(vol.data, mask.data.astype(np.float32))


def test_rendering_invertible_without_corruption():
    mask = make_anatomy(PhantomSpec(num_classes=3, seed=2))
    table = (0.3, 0.9, 0.1)
    vol = render_modality(mask, ModalityAppearance(table), seed=0)
    lookup = {np.float32(v): k for k, v in enumerate(table)}
    recovered = np.vectorize(lambda v: lookup[np.float32(v)])(vol.data)
    assert np.array_equal(recovered, mask.data)


def test_per_class_means_follow_appearance():
    mask = make_anatomy(PhantomSpec(num_classes=3, size_range=(5.0, 8.0), seed=4))
    for app in (APP_A, APP_B):
        vol = render_modality(mask, app, seed=9)
        for k, target in enumerate(app.class_intensity):
            sel = vol.data[mask.data == k].astype(np.float64)
            # mean of n Gaussian draws: 5 standard errors
            assert abs(sel.mean() - target) < 5 * app.noise_sigma / np.sqrt(sel.size)


def test_bias_and_gamma_change_output():
    mask = make_anatomy(PhantomSpec(num_classes=2, seed=1))
    plain = render_modality(mask, ModalityAppearance((0.2, 0.8)), seed=0)
    biased = render_modality(mask, ModalityAppearance((0.2, 0.8), bias_field_amplitude=0.3), seed=0)
    gamma = render_modality(mask, ModalityAppearance((0.2, 0.8), contrast_gamma=2.0), seed=0)
    assert not np.array_equal(plain.data, biased.data)
    ratio = biased.data[plain.data > 0] / plain.data[plain.data > 0]
    assert ratio.min() >= 0.7 - 1e-6 and ratio.max() <= 1.3 + 1e-6
    assert np.isclose(gamma.data[mask.data == 1][0], 0.64)


def test_render_deterministic():
    mask = make_anatomy(PhantomSpec(seed=0))
    app = ModalityAppearance((0.1, 0.5, 0.9), 0.1, 0.2, 1.3)
    assert np.array_equal(render_modality(mask, app, 5).data, render_modality(mask, app, 5).data)


def test_disabled_misalignment_is_identity():
    mask = make_anatomy(PhantomSpec(seed=0))
    vol = render_modality(mask, APP_A, 0)
    v2, m2, aff = apply_misalignment(vol, mask, MisalignmentSpec(enabled=False), seed=1)
    assert v2.data.tobytes() == vol.data.tobytes()
    assert np.array_equal(m2.data, mask.data)
    assert np.array_equal(aff, np.eye(4))


def test_integer_translation_shifts_mask():
    mask = make_anatomy(PhantomSpec(seed=5))
    vol = Volume(mask.data.astype(np.float32))
    shift = (2, -3, 1)
    _, moved = resample(vol, mask, rigid_affine(mask.shape, (0, 0, 0), shift))
    expected = np.roll(mask.data, shift, axis=(0, 1, 2))
    interior = (slice(3, -3),) * 3
    assert np.array_equal(moved.data[interior], expected[interior])


def test_rotation_preserves_class_counts():
    spec = PhantomSpec(num_classes=3, size_range=(4.0, 7.0), seed=8)
    mask = make_anatomy(spec)
    vol = render_modality(mask, APP_A, 0)
    affine = rigid_affine(mask.shape, (10.0, 0.0, 0.0), (3.0, 0.0, 0.0))
    v2, m2 = resample(vol, mask, affine)
    ours = np.bincount(m2.data.ravel(), minlength=3)
    brute = oracles.nearest_resample_counts(mask.data, affine, 3)
    orig = np.bincount(mask.data.ravel(), minlength=3)
    for k in (1, 2):
        assert abs(ours[k] - brute[k]) <= 0.15 * brute[k]
        assert abs(ours[k] - orig[k]) <= 0.15 * orig[k]
    assert v2.shape == vol.shape and v2.spacing == vol.spacing


def test_sampled_misalignment_returns_its_affine():
    mask = make_anatomy(PhantomSpec(seed=0))
    vol = render_modality(mask, APP_A, 0)
    spec = MisalignmentSpec(10.0, 3.0, enabled=True)
    v2, m2, aff = apply_misalignment(vol, mask, spec, seed=4)
    v3, m3 = resample(vol, mask, aff)
    assert np.array_equal(m2.data, m3.data) and np.array_equal(v2.data, v3.data)
    rot = aff[:3, :3]
    assert np.allclose(rot @ rot.T, np.eye(3))
    angle = np.degrees(np.arccos(np.clip((np.trace(rot) - 1) / 2, -1, 1)))
    assert angle <= 10.0 * np.sqrt(3) + 1e-9


def test_paired_dataset_shares_anatomy():
    spec = PhantomSpec(grid_shape=(16, 16, 16), size_range=(2.0, 4.0), seed=0)
    samples = generate_dataset(spec, APP_A, APP_B, MisalignmentSpec(), True, 3, seed=0)
    for s in samples:
        assert np.array_equal(s.mask_a.data, s.mask_b.data)
        assert not np.array_equal(s.vol_a.data, s.vol_b.data)


def test_unpaired_dataset_differs():
    spec = PhantomSpec(grid_shape=(16, 16, 16), size_range=(2.0, 4.0), seed=0)
    samples = generate_dataset(spec, APP_A, APP_B, MisalignmentSpec(), False, 3, seed=0)
    assert any(not np.array_equal(s.mask_a.data, s.mask_b.data) for s in samples)
    assert all(not s.paired for s in samples)


def test_dataset_ids_and_reproducibility():
    spec = PhantomSpec(grid_shape=(16, 16, 16), size_range=(2.0, 4.0), seed=0)
    mis = MisalignmentSpec(10, 3, enabled=True)
    a = generate_dataset(spec, APP_A, APP_B, mis, True, 40, seed=2)
    b = generate_dataset(spec, APP_A, APP_B, mis, True, 40, seed=2)
    assert [s.sample_id for s in a] == [f"s{i:03d}" for i in range(40)]
    for x, y in zip(a, b):
        assert np.array_equal(x.vol_b.data, y.vol_b.data)
        assert np.array_equal(x.misalignment, y.misalignment)
    # misalignment touches modality b only
    assert all(np.array_equal(s.vol_a.data, t.vol_a.data) for s, t in zip(
        a, generate_dataset(spec, APP_A, APP_B, MisalignmentSpec(), True, 40, seed=2)))


def test_invalid_specs():
    with pytest.raises(ValueError):
        ModalityAppearance((0, 1), noise_sigma=-1)
    with pytest.raises(ValueError):
        ModalityAppearance((0, 1), contrast_gamma=0)
    with pytest.raises(ValueError):
        PhantomSpec(num_classes=1)
    with pytest.raises(ValueError):
        generate_dataset(PhantomSpec(), APP_A, APP_B, MisalignmentSpec(), True, 0, seed=0)
