import math

import numpy as np
import pytest

from nerp.images import ImageGrid
from nerp.phantoms import (
    SHEPP_LOGAN_ELLIPSES,
    ImageFormatError,
    LesionSpec,
    lesion_mask,
    load_image,
    perturb_lesion,
    save_image,
    shepp_logan,
)


def test_phantom_uses_ten_ellipses():
    assert len(SHEPP_LOGAN_ELLIPSES) == 10


@pytest.mark.parametrize("size", [16, 64, 99])
def test_phantom_range_and_corners(size):
    ph = shepp_logan(size).values
    assert ph.shape == (size, size)
    assert ph.min() >= 0.0 and ph.max() <= 1.0
    # corners lie outside the skull ellipse
    assert ph[0, 0] == 0.0 and ph[-1, -1] == 0.0


def test_phantom_resolution_consistency():
    # box-downsampling the 128px phantom by 2 must agree with the 64px one
    a = shepp_logan(64).values
    b = shepp_logan(128).values.reshape(64, 2, 64, 2).mean(axis=(1, 3))
    assert np.abs(a - b).mean() < 0.02


def test_phantom_rejects_tiny_sizes():
    with pytest.raises(ValueError):
        shepp_logan(4)


def test_lesion_zero_delta_is_identity():
    img = shepp_logan(32)
    out = perturb_lesion(img, LesionSpec((0.5, 0.5), (0.2, 0.1), 0.3, 0.0))
    np.testing.assert_array_equal(out.values, img.values)


def test_lesion_outside_support_is_identity():
    img = shepp_logan(32)
    out = perturb_lesion(img, LesionSpec((5.0, 5.0), (0.05, 0.05), 0.0, 0.4))
    np.testing.assert_array_equal(out.values, img.values)


def test_lesion_changes_only_masked_pixels():
    img = shepp_logan(64)
    lesion = LesionSpec((0.45, 0.5), (0.12, 0.08), 0.7, 0.25)
    out = perturb_lesion(img, lesion)
    mask = lesion_mask((64, 64), lesion)
    changed = out.values != img.values
    assert not np.any(changed & ~mask)
    np.testing.assert_array_equal(out.values[~mask], img.values[~mask])


def test_lesion_pixel_count_matches_ellipse_area():
    size = 96
    lesion = LesionSpec((0.5, 0.5), (0.15, 0.1), 0.4, 0.2)
    img = ImageGrid(np.full((size, size), 0.3))
    out = perturb_lesion(img, lesion)
    changed = int(np.sum(out.values != img.values))
    expected = math.pi * 0.15 * 0.1 * size**2
    assert abs(changed - expected) / expected < 0.10


def test_lesion_clamp_is_idempotent():
    img = ImageGrid(np.full((32, 32), 0.9))
    lesion = LesionSpec((0.5, 0.5), (0.2, 0.2), 0.0, 0.5)  # pushes to 1.0
    once = perturb_lesion(img, lesion)
    twice = perturb_lesion(once, lesion)
    assert once.values.max() == 1.0
    np.testing.assert_array_equal(once.values, twice.values)


def test_lesion_validation():
    with pytest.raises(ValueError):
        LesionSpec((0.5, 0.5), (0.0, 0.1), 0.0, 0.1)
    with pytest.raises(ValueError):
        LesionSpec((0.5, 0.5), (0.1, 0.1), 0.0, 1.5)


# --- file I/O -------------------------------------------------------------------


def test_raw_round_trip_is_bitwise(tmp_path):
    img = shepp_logan(32)
    save_image(img, tmp_path / "a.raw")
    back = load_image(tmp_path / "a.raw")
    np.testing.assert_array_equal(back.values, img.values)
    assert back.source_range == img.source_range


def test_raw_truncated_file_errors(tmp_path):
    img = shepp_logan(32)
    path = tmp_path / "a.raw"
    save_image(img, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ImageFormatError, match="byte"):
        load_image(path)


def test_raw_missing_sidecar_errors(tmp_path):
    (tmp_path / "b.raw").write_bytes(b"\x00" * 64)
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "b.raw")


@pytest.mark.parametrize("fmt", ["pgm", "png"])
def test_quantized_round_trip_error_bound(tmp_path, fmt):
    img = shepp_logan(32)
    path = tmp_path / f"a.{fmt}"
    save_image(img, path, fmt)
    back = load_image(path, fmt)
    assert np.abs(back.values - img.values).max() <= 1.0 / (2 * 65535)
    # quantized formats record the actual data range as the scale
    assert back.source_range == (img.values.min(), img.values.max())


@pytest.mark.parametrize("fmt", ["pgm", "png"])
def test_quantized_round_trip_restores_scale(tmp_path, fmt):
    rng = np.random.default_rng(0)
    img = ImageGrid(rng.random((16, 16)) * 3.0 - 1.0)
    path = tmp_path / f"b.{fmt}"
    save_image(img, path, fmt)
    back = load_image(path, fmt)
    span = img.values.max() - img.values.min()
    assert np.abs(back.values - img.values).max() <= span / (2 * 65535) + 1e-12


def test_pgm_truncated_payload_errors(tmp_path):
    img = shepp_logan(16)
    path = tmp_path / "c.pgm"
    save_image(img, path, "pgm")
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(ImageFormatError, match="byte"):
        load_image(path, "pgm")


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_image(shepp_logan(16), tmp_path / "x.tif", "tif")
    with pytest.raises(ValueError):
        load_image(tmp_path / "x.tif", "tif")
