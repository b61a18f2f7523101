import numpy as np
import pytest
from PIL import Image

from singleclass.core import ParameterError
from singleclass.data import (CATEGORY_NAMES, load_image_folder, load_png, make_shapes, save_png,
                              to_uint8)


def test_generator_is_deterministic():
    a = make_shapes(3, 5, size=16)
    b = make_shapes(3, 5, size=16)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.fingerprint() == b.fingerprint()


def test_train_and_test_streams_differ():
    a = make_shapes(3, 5, "train", size=16)
    b = make_shapes(3, 5, "test", size=16)
    assert not any(np.array_equal(x, y) for x in a.images for y in b.images)


def test_shapes_are_valid_images():
    ds = make_shapes(2, 0, size=20, num_categories=10)
    assert ds.images.shape == (20, 3, 20, 20)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert list(ds.labels[:10]) == list(range(10))
    assert ds.names == CATEGORY_NAMES


def test_generator_rejects_bad_counts():
    with pytest.raises(ParameterError):
        make_shapes(1, 0, num_categories=11)
    with pytest.raises(ParameterError):
        make_shapes(0, 0)


def test_png_roundtrip_is_lossless_on_8bit_values(tmp_path, rng):
    img = to_uint8(rng.uniform(0, 1, (3, 6, 7))).astype(np.float32) / 255
    path = tmp_path / "x.png"
    save_png(path, img, meta={"seed": 3})
    np.testing.assert_array_equal(load_png(path), img)
    assert Image.open(path).text["seed"] == "3"


def test_gray_png_roundtrip(tmp_path):
    m = np.array([[0.0, 1.0], [0.5, 0.25]])
    save_png(tmp_path / "m.png", m)
    back = load_png(tmp_path / "m.png")[0]
    np.testing.assert_allclose(back, np.round(m * 255) / 255)


def test_image_folder_loader(tmp_path, rng):
    for name in ("b", "a"):
        (tmp_path / name).mkdir()
        save_png(tmp_path / name / "0.png", rng.uniform(0, 1, (3, 4, 4)))
    ds = load_image_folder(tmp_path)
    assert ds.names == ["a", "b"] and list(ds.labels) == [0, 1]
