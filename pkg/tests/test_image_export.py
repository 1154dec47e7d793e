import numpy as np
import pytest
from PIL import Image

from cmaxsim.core.errors import DataError
from cmaxsim.utils.image_export import export_image, to_grayscale


def test_zero_maps_to_mid_grey():
    img = to_grayscale(np.array([[-2.0, 0.0, 2.0]]))
    assert img.tolist() == [[0, 128, 255]]
    assert to_grayscale(np.zeros((2, 2))).tolist() == [[128, 128], [128, 128]]


def test_clip_saturates():
    img = to_grayscale(np.array([[-10.0, 0.5, 10.0]]), clip=1.0)
    assert img[0, 0] == 0 and img[0, 2] == 255
    assert img[0, 1] == 191


def test_export_round_trip(tmp_path):
    src = np.arange(12, dtype=float).reshape(3, 4) - 6.0
    path = export_image(src, tmp_path / "iwe.png")
    back = np.asarray(Image.open(path))
    assert back.shape == (3, 4)
    assert back.dtype == np.uint8
    assert np.array_equal(back, to_grayscale(src))


def test_rejects_stacks():
    with pytest.raises(DataError):
        to_grayscale(np.zeros((4, 3, 3)))
