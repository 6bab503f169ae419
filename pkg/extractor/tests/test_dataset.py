"""Manifest and image-loading validation: every rejection names its line."""

import numpy as np
import pytest
from PIL import Image

from chips_extractor import DatasetError, Sample, load_pixels, read_manifest
from conftest import build_dataset


def test_valid_manifest_parses_in_order(tmp_path, dataset):
    samples = read_manifest(dataset)
    assert [s.id for s in samples] == [0, 1, 2, 3]
    assert samples[0].image_path == dataset.parent / "img-0.png"
    assert samples[0].tags == ("even",)
    assert samples[1].tags == ("odd",)
    assert "number 2" in samples[2].caption


def test_blank_lines_and_extra_keys_are_tolerated(tmp_path):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(
        '{"id": 0, "image": "a.png", "caption": "x", "license": "cc"}\n'
        "\n"
        '{"id": 1, "image": "b.png", "caption": "y"}\n'
    )
    samples = read_manifest(manifest)
    assert [s.id for s in samples] == [0, 1]
    assert samples[0].tags == ()


@pytest.mark.parametrize(
    "line,message",
    [
        ("not json", r"m\.jsonl:1: not valid JSON"),
        ("[1, 2]", "must be a JSON object"),
        ('{"id": 0, "image": "a.png"}', "missing key 'caption'"),
        ('{"id": 0, "caption": "x"}', "missing key 'image'"),
        ('{"image": "a.png", "caption": "x"}', "missing key 'id'"),
        ('{"id": -1, "image": "a.png", "caption": "x"}', "non-negative integer"),
        ('{"id": true, "image": "a.png", "caption": "x"}', "non-negative integer"),
        ('{"id": 0, "image": "a.png", "caption": "  "}', "non-empty string"),
        ('{"id": 0, "image": "", "caption": "x"}', "non-empty path"),
        ('{"id": 0, "image": "a.png", "caption": "x", "tags": ["", "b"]}', "tags"),
        ('{"id": 0, "image": "a.png", "caption": "x", "tags": "solo"}', "tags"),
    ],
)
def test_bad_lines_are_rejected_with_location(tmp_path, line, message):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(line + "\n")
    with pytest.raises(DatasetError, match=message):
        read_manifest(manifest)


def test_duplicate_ids_name_the_second_line(tmp_path):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(
        '{"id": 5, "image": "a.png", "caption": "x"}\n'
        '{"id": 5, "image": "b.png", "caption": "y"}\n'
    )
    with pytest.raises(DatasetError, match="m.jsonl:2: duplicate sample id 5"):
        read_manifest(manifest)


def test_missing_manifest_is_loud(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        read_manifest(tmp_path / "nope.jsonl")


def test_load_pixels_decodes_rgb_and_grayscale(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    Image.fromarray(rgb, "RGB").save(tmp_path / "rgb.png")
    gray = np.random.default_rng(1).integers(0, 256, size=(5, 4), dtype=np.uint8)
    Image.fromarray(gray, "L").save(tmp_path / "gray.png")

    out = load_pixels(Sample(0, tmp_path / "rgb.png", "x", ()))
    assert out.shape == (5, 4, 3) and out.dtype == np.uint8
    assert np.array_equal(out, rgb)

    out = load_pixels(Sample(1, tmp_path / "gray.png", "x", ()))
    assert out.shape == (5, 4, 3)
    assert np.array_equal(out[:, :, 0], gray)  # L -> RGB replicates the channel


def test_load_pixels_failures_name_the_sample(tmp_path):
    with pytest.raises(DatasetError, match="sample 4.*does not exist"):
        load_pixels(Sample(4, tmp_path / "missing.png", "x", ()))
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"this is not an image at all")
    with pytest.raises(DatasetError, match="sample 6.*not a decodable image"):
        load_pixels(Sample(6, junk, "x", ()))
