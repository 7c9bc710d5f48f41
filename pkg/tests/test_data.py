import math

import cv2
import numpy as np
import pytest

from esrgan_plus.data import (
    IDENTITY_AUGMENTATION,
    AugmentationSpec,
    DataError,
    DatasetIndex,
    ImageIOError,
    apply_transform,
    augment,
    batch_iterator,
    bicubic_resize,
    degrade_x4,
    invert_transform,
    load_image,
    random_crop_pair,
    resize_weights,
    save_image,
)
from esrgan_plus.tensor import RngState

from conftest import make_dataset


def kernel(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def dense_matrix(n_in, n_out, antialias=True):
    """Row-normalised resampling matrix built pixel by pixel."""
    scale = n_out / n_in
    s = scale if antialias and scale < 1 else 1.0
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        for j in range(math.floor(center) - 20, math.ceil(center) + 21):
            w = s * kernel((center - j) * s)
            m[i, min(max(j, 0), n_in - 1)] += w
        m[i] /= m[i].sum()
    return m


class TestImageIO:
    def test_round_trip_lossless(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(3, 9, 7)) / 255.0
        save_image(img, tmp_path / "a.png")
        np.testing.assert_array_equal(load_image(tmp_path / "a.png"), img)

    def test_clamp_and_quantize(self, tmp_path):
        img = np.zeros((3, 2, 2))
        img[0, 0, 0], img[1, 0, 0], img[2, 0, 0] = 1.0, 1.2, -0.3
        img[0, 1, 1] = 0.5 / 255  # half step rounds up
        save_image(img, tmp_path / "b.png")
        raw = cv2.imread(str(tmp_path / "b.png"))[:, :, ::-1]
        assert tuple(raw[0, 0]) == (255, 255, 0)
        assert raw[1, 1, 0] == 1

    def test_gray_and_16bit(self, tmp_path):
        cv2.imwrite(str(tmp_path / "g.png"), np.full((4, 5), 51, np.uint8))
        g = load_image(tmp_path / "g.png")
        assert g.shape == (3, 4, 5) and np.all(g == 0.2)
        cv2.imwrite(str(tmp_path / "w.png"), np.full((2, 2, 3), 65535, np.uint16))
        assert np.all(load_image(tmp_path / "w.png") == 1.0)

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(ImageIOError, match="bad.png"):
            load_image(tmp_path / "bad.png")
        with pytest.raises(ImageIOError, match="missing.png"):
            load_image(tmp_path / "missing.png")


class TestBicubic:
    def test_kernel_matches_reference(self):
        xs = np.linspace(-2.5, 2.5, 101)
        from esrgan_plus.data import cubic

        np.testing.assert_allclose(cubic(xs), [kernel(x) for x in xs], atol=1e-15)

    @pytest.mark.parametrize("n_in,n_out", [(8, 2), (16, 4), (7, 3), (5, 11), (32, 8), (3, 1)])
    def test_partition_of_unity(self, n_in, n_out):
        _, w = resize_weights(n_in, n_out, antialias=True)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_constant_preserved(self):
        img = np.full((3, 13, 10), 0.37)
        for size in ((3, 2), (26, 20), (13, 10), (5, 17)):
            np.testing.assert_allclose(bicubic_resize(img, *size), 0.37, atol=1e-12)

    def test_identity_resize(self, rng):
        img = rng.random((3, 6, 9))
        np.testing.assert_array_equal(bicubic_resize(img, 6, 9), img)

    def test_dense_matrix_oracle_ramp(self):
        ramp = np.add.outer(np.arange(8.0), 2 * np.arange(8.0)) / 24
        expected = dense_matrix(8, 2) @ ramp @ dense_matrix(8, 2).T
        np.testing.assert_allclose(bicubic_resize(ramp[None], 2, 2)[0], expected, atol=1e-10, rtol=0)

    @pytest.mark.parametrize("shape,out,aa", [((8, 8), (2, 2), True), ((10, 7), (4, 13), True), ((6, 6), (3, 3), False)])
    def test_dense_matrix_oracle_random(self, rng, shape, out, aa):
        img = rng.random(shape)
        expected = dense_matrix(shape[0], out[0], aa) @ img @ dense_matrix(shape[1], out[1], aa).T
        np.testing.assert_allclose(bicubic_resize(img[None], *out, antialias=aa)[0], expected, atol=1e-10, rtol=0)

    def test_degrade_x4(self, rng):
        hr = rng.random((3, 128, 128))
        lr = degrade_x4(hr)
        assert lr.shape == (3, 32, 32)
        np.testing.assert_array_equal(lr, bicubic_resize(hr, 32, 32, antialias=True))
        np.testing.assert_allclose(degrade_x4(np.full((3, 8, 12), 0.6)), 0.6, atol=1e-12)
        with pytest.raises(ValueError):
            degrade_x4(rng.random((3, 10, 8)))

    def test_invalid_size(self, rng):
        with pytest.raises(ValueError):
            bicubic_resize(rng.random((3, 4, 4)), 0, 2)


class TestCrop:
    def test_shapes_and_alignment(self, photo):
        hr = photo[:, :256, :256]
        lr = degrade_x4(hr)
        hp, lp = random_crop_pair(hr, lr, 128, RngState(3))
        assert hp.shape == (3, 128, 128) and lp.shape == (3, 32, 32)
        top, left = np.argwhere(np.all(lr == lp[:, :1, :1], axis=0))[0]
        np.testing.assert_array_equal(hp, hr[:, 4 * top : 4 * top + 128, 4 * left : 4 * left + 128])

    def test_forced_origin(self, rng):
        hr = rng.random((3, 16, 16))
        lr = degrade_x4(hr)
        hp, lp = random_crop_pair(hr, lr, 16, RngState(0))
        np.testing.assert_array_equal(hp, hr)
        np.testing.assert_array_equal(lp, lr)

    @pytest.mark.parametrize("seed", range(5))
    def test_degrade_of_crop_matches_lr_crop_interior(self, photo, seed):
        # exact away from the patch border, where edge clamping differs
        hr = photo[:, :192, :192]
        lr = degrade_x4(hr)
        hp, lp = random_crop_pair(hr, lr, 64, RngState(seed))
        inner = slice(2, 16 - 2)
        np.testing.assert_allclose(degrade_x4(hp)[:, inner, inner], lp[:, inner, inner], atol=1e-12, rtol=0)

    def test_too_small(self, rng):
        hr = rng.random((3, 32, 32))
        with pytest.raises(DataError, match="tiny.png"):
            random_crop_pair(hr, degrade_x4(hr), 64, RngState(0), name="tiny.png")
        with pytest.raises(ValueError):
            random_crop_pair(hr, degrade_x4(hr), 30, RngState(0))


class TestAugment:
    def test_identity_spec(self, rng):
        hr, lr = rng.random((3, 8, 8)), rng.random((3, 2, 2))
        a, b = augment(hr, lr, IDENTITY_AUGMENTATION, RngState(0))
        np.testing.assert_array_equal(a, hr)
        np.testing.assert_array_equal(b, lr)

    def test_rot180_involution(self, rng):
        img = rng.random((3, 5, 7))
        np.testing.assert_array_equal(apply_transform(apply_transform(img, False, 180), False, 180), img)

    @pytest.mark.parametrize("flip", [False, True])
    @pytest.mark.parametrize("rot", [0, 90, 180, 270])
    def test_inverse(self, rng, flip, rot):
        img = rng.random((3, 4, 6))
        np.testing.assert_array_equal(invert_transform(apply_transform(img, flip, rot), flip, rot), img)

    @pytest.mark.parametrize("flip,rot", [(True, 0), (False, 90), (True, 270)])
    def test_commutes_with_degrade(self, rng, flip, rot):
        hr = rng.random((3, 32, 32))
        np.testing.assert_allclose(
            degrade_x4(apply_transform(hr, flip, rot)), apply_transform(degrade_x4(hr), flip, rot), atol=1e-12, rtol=0
        )

    def test_same_transform_on_both(self, rng):
        hr = rng.random((3, 32, 32))
        lr = degrade_x4(hr)
        for seed in range(8):
            a, b = augment(hr, lr, AugmentationSpec(), RngState(seed))
            np.testing.assert_allclose(degrade_x4(a), b, atol=1e-12)

    def test_all_transforms_reachable(self, rng):
        img = rng.random((1, 3, 3))
        seen = set()
        r = RngState(1)
        for _ in range(200):
            seen.add(augment(img, img, AugmentationSpec(), r)[0].tobytes())
        assert len(seen) == 8

    def test_invalid_rotation(self):
        with pytest.raises(ValueError):
            AugmentationSpec(rotations=(45,))


class TestDataset:
    def test_index_and_batches(self, tmp_path):
        index = DatasetIndex.from_dir(make_dataset(tmp_path, n=5, size=64))
        assert [r.stem for r in index.records] == [f"img{k:02d}" for k in range(5)]
        hr, lr = next(batch_iterator(index, 3, 32, AugmentationSpec(), RngState(0)))
        assert hr.shape == (3, 3, 32, 32) and lr.shape == (3, 3, 8, 8)

    def test_full_scale_batch_shape(self, tmp_path):
        index = DatasetIndex.from_dir(make_dataset(tmp_path, n=4, size=128))
        hr, lr = next(batch_iterator(index, 16, 128, AugmentationSpec(), RngState(0)))
        assert hr.shape == (16, 3, 128, 128) and lr.shape == (16, 3, 32, 32)

    def test_epoch_coverage(self, tmp_path):
        index = DatasetIndex.from_dir(make_dataset(tmp_path, n=7, size=32))
        it = batch_iterator(index, 1, 16, AugmentationSpec(), RngState(4))
        visits = [it.next_indices()[0] for _ in range(21)]
        for e in range(3):
            assert sorted(visits[7 * e : 7 * e + 7]) == list(range(7))

    def test_reproducible(self, tmp_path):
        index = DatasetIndex.from_dir(make_dataset(tmp_path, n=4, size=48))
        runs = []
        for _ in range(2):
            it = batch_iterator(index, 3, 16, AugmentationSpec(), RngState(9, stream=1))
            runs.append([next(it)[0].data for _ in range(4)])
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a, b)

    def test_state_resume(self, tmp_path):
        index = DatasetIndex.from_dir(make_dataset(tmp_path, n=3, size=32))
        it = batch_iterator(index, 2, 16, AugmentationSpec(), RngState(2))
        next(it)
        state = it.state_dict()
        expected = [next(it)[1].data for _ in range(3)]
        other = batch_iterator(index, 2, 16, AugmentationSpec(), RngState(77))
        other.load_state_dict(state)
        for e in expected:
            np.testing.assert_array_equal(next(other)[1].data, e)

    def test_paired_lr_directory(self, tmp_path):
        index = DatasetIndex.from_dir(make_dataset(tmp_path, n=2, size=32, with_lr=True))
        assert all(r.lr_path is not None for r in index.records)
        save_image(np.zeros((3, 5, 5)), tmp_path / "LR" / "img00.png")
        with pytest.raises(DataError, match="LR size"):
            DatasetIndex.from_dir(tmp_path)

    def test_missing_dirs(self, tmp_path):
        with pytest.raises(DataError, match="HR"):
            DatasetIndex.from_dir(tmp_path)
        (tmp_path / "HR").mkdir()
        with pytest.raises(DataError, match="no PNG"):
            DatasetIndex.from_dir(tmp_path)

    def test_bad_batch(self, tmp_path):
        index = DatasetIndex.from_dir(make_dataset(tmp_path, n=1, size=32))
        with pytest.raises(ValueError):
            batch_iterator(index, 0, 16, AugmentationSpec(), RngState(0))
