import numpy as np
import pytest

from roadforest.features import FeatureStack, export_feature_stack, extract_hypercolumns
from roadforest.forest import ForestConfig
from roadforest.pipeline import (
    PRIOR_FLOOR,
    DatasetIndex,
    PriorMask,
    learn_prior,
    pool_scales,
    predict_image,
    resize_prior,
    train_pipeline,
    validate_scales,
)
from roadforest.raster import ConfidenceMap, LabelMask, load_image
from roadforest.svm import SvmConfig
from roadforest.synthetic import gabor_bank, write_dataset

SMALL = ForestConfig(num_trees=2, max_depth=4, svm=SvmConfig(max_epochs=100))
SCALES = (20, 40)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return write_dataset(tmp_path_factory.mktemp("ds"), n_train=3, n_test=2, width=48, height=40)


@pytest.fixture(scope="module")
def trained(dataset):
    index = DatasetIndex.from_root(dataset, "train")
    return train_pipeline(index, gabor_bank(), SCALES, SMALL, threads=1)


def test_validate_scales():
    assert validate_scales([400, 800]) == (400, 800)
    for bad in ([], [800, 400], [0, 10], [5, 5]):
        with pytest.raises(ValueError):
            validate_scales(bad)


def test_prior_is_floored_frequency():
    top = np.zeros((8, 8), np.uint8)
    top[4:] = 1
    prior = learn_prior([LabelMask(top), LabelMask(np.ones((8, 8), np.uint8))], 8, 8)
    np.testing.assert_allclose(prior.data[0], 0.5)
    np.testing.assert_allclose(prior.data[-1], 1.0)
    empty = learn_prior([LabelMask(np.zeros((5, 5), np.uint8))], 16, 8)
    assert empty.data.shape == (8, 16)
    np.testing.assert_allclose(empty.data, PRIOR_FLOOR)
    resized = resize_prior(empty, 7, 3)
    assert resized.shape == (3, 7) and resized.min() >= np.float32(PRIOR_FLOOR)


def test_pool_scales_is_exact_mean(rng):
    maps = [ConfidenceMap(rng.random((4, 5)).astype(np.float32)) for _ in range(3)]
    expected = (maps[0].data.astype(np.float64) + maps[1].data + maps[2].data) / 3
    np.testing.assert_array_equal(pool_scales(maps), expected)


def test_dataset_index(dataset, tmp_path):
    index = DatasetIndex.from_root(dataset, "test")
    assert index.stems() == ["test_0003", "test_0004"]
    assert index.features == {}
    with pytest.raises(FileNotFoundError):
        DatasetIndex.from_root(tmp_path, "train")


def test_dataset_index_missing_mask(dataset, tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "images" / "x.ppm").write_bytes((dataset / "images" / "train_0000.ppm").read_bytes())
    (tmp_path / "train.txt").write_text("x\n")
    with pytest.raises(FileNotFoundError, match="no mask"):
        DatasetIndex.from_root(tmp_path, "train")
    assert DatasetIndex.from_root(tmp_path, "train", require_masks=False).pairs[0][1] is None


def test_trained_bundle(trained):
    assert trained.scales == SCALES
    assert len(trained.models) == 2
    assert trained.prior is not None and trained.prior.data.shape == (256, 512)


def test_prediction_combines_scales_and_prior(dataset, trained):
    image = load_image(dataset / "images" / "test_0003.ppm")
    bank = gabor_bank()
    final, maps = predict_image(image, bank, trained.models, SCALES, trained.prior, return_scales=True)
    expected = np.clip(pool_scales(maps) * resize_prior(trained.prior, image.width, image.height), 0, 1)
    np.testing.assert_array_equal(final.data, expected.astype(np.float32))
    plain = predict_image(image, bank, trained.models, SCALES)
    np.testing.assert_array_equal(plain.data, pool_scales(maps).astype(np.float32))


def test_precomputed_features_are_used(dataset, trained, tmp_path):
    image = load_image(dataset / "images" / "test_0003.ppm")
    bank = gabor_bank()
    stack = extract_hypercolumns(image, bank)
    a = predict_image(image, bank, trained.models, SCALES, stack=stack)
    b = predict_image(image, bank, trained.models, SCALES)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ValueError, match="channels"):
        predict_image(image, bank, trained.models, SCALES, stack=FeatureStack(stack.data[:3]))


def test_feature_files_in_dataset(dataset, tmp_path):
    features = dataset / "features"
    features.mkdir(exist_ok=True)
    image = load_image(dataset / "images" / "train_0000.ppm")
    export_feature_stack(extract_hypercolumns(image, gabor_bank()), features / "train_0000.fstk")
    try:
        index = DatasetIndex.from_root(dataset, "train")
        assert list(index.features) == ["train_0000"]
    finally:
        (features / "train_0000.fstk").unlink()
        features.rmdir()


def test_scale_model_count_must_match(dataset, trained):
    image = load_image(dataset / "images" / "test_0003.ppm")
    with pytest.raises(ValueError):
        predict_image(image, gabor_bank(), trained.models[:1], SCALES)
