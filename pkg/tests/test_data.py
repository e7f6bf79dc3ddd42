from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from msmunet import data
from msmunet.data import AugmentConfig, CtSlice, PhantomSpec, WindowSpec


def test_hu_window_examples():
    got = data.hu_window(np.array([-100.0, 240.0, 70.0, -500.0, 1000.0]))
    assert got.tolist() == [0, 255, 128, 0, 255]
    assert got.dtype == np.uint8


def test_hu_window_rejects_inverted_window():
    with pytest.raises(ValueError):
        WindowSpec(10, 10)


@given(st.lists(st.floats(-2000, 3000, allow_nan=False), min_size=2, max_size=30))
def test_hu_window_monotone_and_clamp_idempotent(values):
    v = np.sort(np.array(values))
    out = data.hu_window(v)
    assert np.all(np.diff(out.astype(int)) >= 0)
    spec = WindowSpec()
    np.testing.assert_array_equal(data.hu_window(np.clip(v, spec.lo, spec.hi)), out)


def test_canny_empty_and_full_frame():
    assert data.canny_edges(np.zeros((16, 16))).sum() == 0
    assert data.canny_edges(np.ones((16, 16))).sum() == 0


def test_canny_rejects_non_2d():
    with pytest.raises(ValueError):
        data.canny_edges(np.zeros((2, 4, 4)))


def test_canny_disk_matches_boundary():
    yy, xx = np.indices((64, 64))
    disk = (np.hypot(yy - 31.7, xx - 32.2) <= 20).astype(np.uint8)
    f1 = data.f1_score(data.canny_edges(disk), data.morphological_boundary(disk))
    assert f1 >= 0.9


def test_canny_edges_lie_on_dilated_boundary():
    for seed in range(20):
        sl = data.generate_phantom(PhantomSpec(seed=seed))
        band = ndimage.binary_dilation(data.morphological_boundary(sl.mask), iterations=1)
        assert np.all(sl.edge <= band)


def test_morphological_boundary_square():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[1:5, 1:5] = 1
    b = data.morphological_boundary(m)
    assert b.sum() == 12 and b[2, 2] == 0


def test_f1_conventions():
    z = np.zeros((3, 3))
    assert data.f1_score(z, z) == 1.0
    assert data.f1_score(np.ones((3, 3)), z) == 0.0


@pytest.fixture(scope="module")
def phantom():
    return data.generate_phantom(PhantomSpec(seed=11))


def test_augment_identity_when_disabled(phantom, rng):
    assert data.augment(phantom, rng, AugmentConfig.disabled()) == phantom


def test_flip_twice_is_identity(phantom):
    assert data.flip_horizontal(data.flip_horizontal(phantom)) == phantom


def test_rotation_keeps_correspondence(phantom):
    rot = data.rotate90(phantom)
    np.testing.assert_array_equal(rot.mask, np.rot90(phantom.mask))
    np.testing.assert_array_equal(rot.image, np.rot90(phantom.image))
    np.testing.assert_array_equal(rot.edge, data.canny_edges(rot.mask))


@given(st.integers(0, 10_000))
def test_geometric_augment_preserves_mask_count(seed):
    sl = data.generate_phantom(PhantomSpec(seed=seed % 7))
    cfg = replace(AugmentConfig.disabled(), p_flip=0.5, p_rotate=0.5)
    out = data.augment(sl, np.random.default_rng(seed), cfg)
    assert out.mask.sum() == sl.mask.sum()
    assert sorted(out.image.ravel()) == sorted(sl.image.ravel())


def test_photometric_augment_leaves_labels(phantom):
    cfg = replace(AugmentConfig.disabled(), p_noise=1.0, p_contrast=1.0, p_smooth=1.0, p_shift=1.0)
    out = data.augment(phantom, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(out.mask, phantom.mask)
    np.testing.assert_array_equal(out.edge, phantom.edge)
    assert not np.array_equal(out.image, phantom.image)


def test_phantom_deterministic():
    assert data.generate_phantom(PhantomSpec(seed=4)) == data.generate_phantom(PhantomSpec(seed=4))
    assert data.generate_phantom(PhantomSpec(seed=4)) != data.generate_phantom(PhantomSpec(seed=5))


def test_phantom_area_fraction_over_seeds():
    fractions = [data.generate_phantom(PhantomSpec(seed=s)).mask.mean() for s in range(200)]
    assert min(fractions) > 0 and max(fractions) <= 0.05


def test_zero_contrast_hides_organ():
    spec = PhantomSpec(seed=2, distractors=0, lesion_count=(0, 0))
    hidden = data.generate_phantom(replace(spec, contrast_gap=0.0))
    shown = data.generate_phantom(spec)
    assert hidden.mask.sum() > 0
    np.testing.assert_array_equal(hidden.mask, shown.mask)
    # the organ's only trace in the image is the contrast gap
    changed = hidden.image != shown.image
    assert not np.any(changed & (hidden.mask == 0))
    assert changed[hidden.mask == 1].mean() > 0.5


def test_phantom_rejects_empty_or_large_organ():
    with pytest.raises(ValueError, match="empty"):
        data.generate_phantom(PhantomSpec(axes=(0.1, 0.1), center=(10.3, 10.3)))
    with pytest.raises(ValueError, match="covers"):
        data.generate_phantom(PhantomSpec(axes=(20.0, 20.0), center=(32.0, 32.0)))


def test_phantom_scales_with_size():
    sl = data.generate_phantom(PhantomSpec(size=128, seed=1))
    assert sl.image.shape == (128, 128) and 0 < sl.mask.mean() <= 0.05


def test_slice_validation():
    with pytest.raises(ValueError, match="binary"):
        CtSlice("a", np.zeros((4, 4)), np.full((4, 4), 2))
    with pytest.raises(ValueError, match="shape"):
        CtSlice("a", np.zeros((4, 4)), np.zeros((4, 5)))


def test_dataset_round_trip_and_order(tmp_path):
    slices = data.generate_dataset(4, first_seed=3)
    slices = [slices[2], slices[0], slices[3], slices[1]]
    data.save_dir(slices, tmp_path)
    assert (tmp_path / "manifest.txt").read_text().split() == [s.id for s in slices]
    assert data.load_dir(tmp_path) == slices


def test_missing_edges_are_regenerated(tmp_path):
    slices = data.generate_dataset(2)
    data.save_dir(slices, tmp_path)
    for f in (tmp_path / "edges").iterdir():
        f.unlink()
    assert data.load_dir(tmp_path) == slices


def test_non_binary_mask_rejected_naming_file(tmp_path):
    sl = data.generate_phantom(PhantomSpec(seed=0))
    data.save_dir([sl], tmp_path)
    bad = sl.mask * 255
    bad[0, 0] = 7
    data.write_pgm(tmp_path / "masks" / f"{sl.id}.pgm", bad)
    with pytest.raises(ValueError, match=f"{sl.id}.*masks.*7"):
        data.load_dir(tmp_path)


def test_missing_pair_and_size_mismatch(tmp_path):
    sl = data.generate_phantom(PhantomSpec(seed=0))
    data.save_dir([sl], tmp_path)
    data.write_pgm(tmp_path / "masks" / f"{sl.id}.pgm", np.zeros((32, 32), dtype=np.uint8))
    with pytest.raises(ValueError, match=f"{sl.id}.*size"):
        data.load_dir(tmp_path)
    (tmp_path / "masks" / f"{sl.id}.pgm").unlink()
    with pytest.raises(ValueError, match=sl.id):
        data.load_dir(tmp_path)


def test_pgm_header_with_comment(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 2\n255\n" + bytes(range(6)))
    np.testing.assert_array_equal(data.read_pgm(p), np.arange(6).reshape(2, 3))
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError, match="binary PGM"):
        data.read_pgm(p)


def test_stack_batch_scaling():
    images, masks, edges = data.stack_batch(data.generate_dataset(2))
    assert images.shape == masks.shape == edges.shape == (2, 1, 64, 64)
    np.testing.assert_allclose(images.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(images.std(axis=(2, 3)), 1.0, atol=1e-12)
    assert set(np.unique(masks)) <= {0.0, 1.0}


def test_standardize_flat_image_is_zero():
    assert not data.standardize(np.full((1, 1, 4, 4), 7.0)).any()
