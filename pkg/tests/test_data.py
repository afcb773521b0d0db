import numpy as np
import pytest
from PIL import Image

from metainv.data import extract_patches, list_images, load_dataset, read_image, synthetic_image, write_image
from metainv.numerics import make_rng


def test_synthetic_generator_is_deterministic():
    a = load_dataset("synthetic", 16, 5, make_rng(3))
    b = load_dataset(None, 16, 5, make_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = load_dataset(None, 16, 5, make_rng(4))
    assert not np.array_equal(a[0], c[0])


def test_synthetic_range_over_many_samples():
    rng = make_rng(0)
    images = [synthetic_image((12, 12), rng) for _ in range(1000)]
    lo = min(im.min() for im in images)
    hi = max(im.max() for im in images)
    assert lo >= 0.0 and hi <= 1.0


def test_image_roundtrip_and_patches(tmp_path):
    rng = make_rng(1)
    img = np.round(rng.random((10, 12)) * 255) / 255
    write_image(tmp_path / "a.png", img)
    write_image(tmp_path / "b.pgm", img)
    np.testing.assert_allclose(read_image(tmp_path / "a.png"), img, atol=1e-12)
    np.testing.assert_allclose(read_image(tmp_path / "b.pgm"), img, atol=1e-12)
    assert [p.rsplit("/", 1)[-1] for p in list_images(tmp_path)] == ["a.png", "b.pgm"]
    whole = load_dataset(str(tmp_path), 10, 2, make_rng(0))
    assert whole[0].shape == (10, 10)
    same = extract_patches([img], 10, 1, make_rng(0))
    assert same[0].shape == (10, 10)
    full = extract_patches([img[:, :10]], 10, 1, make_rng(0))
    np.testing.assert_array_equal(full[0], img[:, :10])


def test_color_images_become_grayscale(tmp_path):
    Image.fromarray(np.full((4, 4, 3), 255, dtype=np.uint8), "RGB").save(tmp_path / "c.png")
    img = read_image(tmp_path / "c.png")
    assert img.shape == (4, 4) and np.allclose(img, 1.0)


def test_errors_name_the_file(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(ValueError, match="broken.png"):
        read_image(bad)
    with pytest.raises(ValueError):
        list_images(tmp_path / "missing")
    with pytest.raises(ValueError):
        extract_patches([np.zeros((4, 4))], 5, 1, make_rng(0))
    with pytest.raises(ValueError):
        load_dataset(None, 4, 0, make_rng(0))
