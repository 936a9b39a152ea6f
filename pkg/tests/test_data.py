import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.errors import ConfigurationError, ContractError, DataError
from app.schemas.config import DatasetConfig
from app.services.data import (
    assemble_patches,
    extract_patches,
    gen_seq1d,
    gen_toy2d,
    load_dataset,
    load_image_patches,
    make_dataset,
    save_dataset,
    split_records,
)
from app.services.tensor_io import write_tensor


class TestSplit:
    def test_first_tenth_is_the_test_set(self):
        records = np.arange(50.0)[:, None]
        train, test = split_records(records)
        assert_array_equal(test[:, 0], np.arange(5.0))
        assert len(train) == 45

    def test_tiny_sets_keep_one_test_record(self):
        train, test = split_records(np.zeros((4, 2)))
        assert (len(train), len(test)) == (3, 1)


class TestToyDensities:
    @pytest.mark.parametrize("kind", ["two_moons", "rings", "gaussian_grid"])
    def test_shape_and_standardization(self, kind):
        ds = gen_toy2d(kind, 2000, seed=0)
        assert ds.train.shape == (1800, 2) and ds.test.shape == (200, 2)
        everything = np.concatenate([ds.test, ds.train])
        assert_allclose(everything.mean(axis=0), np.zeros(2), atol=1e-12)
        assert_allclose(everything.std(axis=0), np.ones(2), atol=1e-12)
        assert len(ds.labels) == 2000
        assert ds.dims == 2 and not ds.integer_valued

    def test_regenerates_bit_identically(self):
        a, b = gen_toy2d("rings", 500, seed=4), gen_toy2d("rings", 500, seed=4)
        assert_array_equal(a.train, b.train)
        assert not np.array_equal(a.train, gen_toy2d("rings", 500, seed=5).train)

    def test_gaussian_grid_has_nine_components(self):
        assert set(gen_toy2d("gaussian_grid", 1000, seed=0).labels.tolist()) == set(range(9))

    def test_rejects_small_n(self):
        with pytest.raises(ContractError):
            gen_toy2d("two_moons", 99, seed=0)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            gen_toy2d("spirals", 1000, seed=0)


class TestSequences:
    def test_shape_and_normalization(self):
        ds = gen_seq1d(40, 64, seed=0)
        assert ds.train.shape == (36, 64)
        everything = np.concatenate([ds.test, ds.train])
        assert everything.mean() == pytest.approx(0.0, abs=1e-12)
        assert everything.std() == pytest.approx(1.0)

    def test_lag_one_autocorrelation_matches_the_process(self):
        ds = gen_seq1d(200, 256, seed=1, ar_coeffs=(0.9, -0.2))
        x = np.concatenate([ds.test, ds.train])
        rho = np.mean(x[:, 1:] * x[:, :-1]) / np.mean(x * x)
        assert rho == pytest.approx(0.9 / 1.2, abs=0.05)


class TestImagePatches:
    def test_extract_then_assemble(self):
        images = np.arange(2 * 3 * 8 * 16.0).reshape(2, 3, 8, 16)
        patches = extract_patches(images, 4)
        assert patches.shape == (16, 3, 4, 4)
        assert_array_equal(patches[1], images[0, :, 0:4, 4:8])
        assert_array_equal(assemble_patches(patches, (3, 8, 16)), images)

    def test_load_marks_integer_data(self, tmp_path):
        images = np.random.default_rng(0).integers(0, 256, (3, 16, 16)).astype(float)
        path = write_tensor(tmp_path / "images.nftn", images)
        ds = load_image_patches(path, patch=8, channels=1)
        assert ds.integer_valued and ds.levels == 256
        assert ds.record_shape == (1, 8, 8)
        assert ds.size == 12 and len(ds.test) == 1

    @pytest.mark.parametrize("bad", [0.5, 256.0, -1.0])
    def test_rejects_non_pixel_values(self, tmp_path, bad):
        images = np.zeros((1, 8, 8))
        images[0, 0, 0] = bad
        with pytest.raises(DataError):
            load_image_patches(write_tensor(tmp_path / "bad.nftn", images), patch=8)

    def test_rejects_channel_mismatch(self, tmp_path):
        path = write_tensor(tmp_path / "rgb.nftn", np.zeros((2, 3, 8, 8)))
        with pytest.raises(DataError):
            load_image_patches(path, patch=8, channels=1)


class TestDispatchAndPersistence:
    def test_make_dataset_dispatches_on_kind(self):
        ds = make_dataset(DatasetConfig(kind="seq1d", n=20, length=16, seed=2))
        assert ds.kind == "seq1d" and ds.record_shape == (16,)

    def test_image_patches_need_a_path(self):
        with pytest.raises(ConfigurationError):
            make_dataset(DatasetConfig(kind="image_patches"))

    def test_save_and_load(self, tmp_path):
        ds = gen_toy2d("two_moons", 300, seed=3)
        loaded = load_dataset(save_dataset(ds, tmp_path / "moons"))
        assert loaded.kind == "two_moons" and loaded.seed == 3
        assert_array_equal(loaded.train, ds.train)
        assert_array_equal(loaded.test, ds.test)
