"""Descriptor tests: golden values computed by hand where the statistic is
simple enough, determinism and discrimination properties otherwise."""

import numpy as np
import pytest

from chips_extractor import image_descriptor, text_descriptor
from chips_extractor.features import IMAGE_DESCRIPTOR_DIM, TEXT_DESCRIPTOR_DIM


def test_constant_image_descriptor_components():
    # 50 keeps the gray value safely interior to histogram bin 6 ([48, 56));
    # luma weights sum to 1 - ulp, so exact bin-edge values would be fragile
    arr = np.full((4, 5, 3), 50, dtype=np.uint8)
    desc = image_descriptor(arr)
    assert desc.shape == (IMAGE_DESCRIPTOR_DIM,)
    hist = desc[:32]
    assert hist[6] == pytest.approx(1.0)
    assert np.count_nonzero(hist) == 1
    assert desc[32:35] == pytest.approx(np.full(3, 50 / 255))  # channel means
    assert desc[35:38] == pytest.approx(np.zeros(3), abs=1e-15)  # channel stds
    assert desc[38] == pytest.approx(np.log1p(4) / 10)
    assert desc[39] == pytest.approx(np.log1p(5) / 10)
    assert desc[40:42] == pytest.approx(np.zeros(2))  # no gradients
    assert desc[42:48] == pytest.approx(np.full(6, 50 / 255))  # band profiles


def test_single_pixel_image_is_valid():
    desc = image_descriptor(np.array([[[255, 0, 0]]], dtype=np.uint8))
    assert np.all(np.isfinite(desc))
    assert desc[40] == 0.0 and desc[41] == 0.0


def test_image_descriptor_rejects_wrong_layout():
    with pytest.raises(ValueError, match="uint8"):
        image_descriptor(np.zeros((4, 4, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="uint8"):
        image_descriptor(np.zeros((4, 4), dtype=np.uint8))


def test_image_descriptor_is_deterministic():
    arr = np.random.default_rng(0).integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
    a = image_descriptor(arr)
    b = image_descriptor(arr.copy())
    assert np.array_equal(a, b)


def test_text_descriptor_is_unit_norm_and_deterministic():
    a = text_descriptor("a photo of a cat")
    assert a.shape == (TEXT_DESCRIPTOR_DIM,)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert np.array_equal(a, text_descriptor("a photo of a cat"))


def test_text_descriptor_separates_captions():
    a = text_descriptor("a photo of a cat")
    b = text_descriptor("a chest radiograph with consolidation")
    assert float(a @ b) < 0.9


def test_empty_caption_is_refused():
    with pytest.raises(ValueError, match="zero descriptor"):
        text_descriptor("")
