import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerlat import codec
from layerlat.errors import DimensionError, ParameterError
from layerlat.tensor import nearest_resize


def loop_encode(img, f):
    h, w, _ = img.shape
    out = np.zeros((3 * f * f, h // f, w // f), dtype=np.float32)
    for c in range(3):
        for dy in range(f):
            for dx in range(f):
                for y in range(h // f):
                    for x in range(w // f):
                        out[c * f * f + dy * f + dx, y, x] = np.float32(img[y * f + dy, x * f + dx, c] / 127.5 - 1)
    return out


def test_encode_matches_loop_oracle():
    img = np.random.default_rng(0).integers(0, 256, (8, 12, 3), dtype=np.uint8)
    np.testing.assert_array_equal(codec.encode(img), loop_encode(img, 4))


@given(st.sampled_from([1, 2, 4]), st.integers(2, 5), st.integers(2, 5), st.data())
def test_round_trip_bitwise(f, hb, wb, data):
    h, w = max(8, hb * f), max(8, wb * f)
    h, w = h - h % f, w - w % f
    img = data.draw(arrays(np.uint8, (h, w, 3)))
    lat = codec.encode(img, f)
    assert lat.shape == (3 * f * f, h // f, w // f)
    assert lat.min() >= -1 and lat.max() <= 1
    np.testing.assert_array_equal(codec.decode(lat, f), img)


def test_decode_clips_out_of_range():
    lat = np.full((48, 2, 2), 3.0, dtype=np.float32)
    lat[0] = -7
    img = codec.decode(lat)
    assert img.max() == 255 and img.min() == 0


def test_rejects_indivisible_images():
    with pytest.raises(DimensionError):
        codec.encode(np.zeros((10, 12, 3), np.uint8))
    with pytest.raises(DimensionError):
        codec.encode(np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(DimensionError):
        codec.decode(np.zeros((47, 2, 2), np.float32))


@given(arrays(np.float32, (16, 24), elements=st.sampled_from([0.0, 1.0])))
def test_mask_coverage(mask):
    lat = codec.mask_to_latent(mask)
    assert lat.shape == (4, 6)
    assert np.all(nearest_resize(lat, 16, 24) >= mask)


def test_round_half_up():
    assert [codec.round_half_up(v) for v in (2.5, 3.5, -2.5, 3.2, 0.49)] == [3, 4, -3, 3, 0]


def test_identity_resize_and_double_flip():
    img = np.random.default_rng(1).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    np.testing.assert_array_equal(codec.resize_image(img, 1.0, 1.0), img)
    np.testing.assert_array_equal(codec.flip(codec.flip(img, "horizontal"), "horizontal"), img)
    np.testing.assert_array_equal(codec.flip(img, "vertical"), img[::-1])


def test_flip_span_mirrors_in_place():
    m = np.zeros((1, 10), np.float32)
    m[0, 2:5] = [1, 2, 3]
    np.testing.assert_array_equal(codec.flip(m, "horizontal", (2, 4))[0, 2:5], [3, 2, 1])


def test_resize_about_center_keeps_center():
    mask = np.zeros((20, 20), np.float32)
    mask[8:12, 8:12] = 1
    big = codec.resize_mask(mask, 2.0, 2.0, center=(10, 10))
    ys, xs = np.nonzero(big)
    assert (ys.min(), ys.max(), xs.min(), xs.max()) == (6, 13, 6, 13)
    with pytest.raises(ParameterError):
        codec.resize_mask(mask, 0, 1)


def test_pan_paste_shifts_and_fills():
    img = np.random.default_rng(2).integers(0, 256, (16, 20, 3), dtype=np.uint8)
    out = codec.pan_paste(img, "right", 0.2, canvas="black")
    np.testing.assert_array_equal(out[:, :16], img[:, 4:])
    assert np.all(out[:, 16:] == 0)
    out = codec.pan_paste(img, "up", 0.25, canvas="white")
    np.testing.assert_array_equal(out[4:], img[:12])
    assert np.all(out[:4] == 255)
    # snapped to 4-pixel cells: round(0.2 * 5) = 1 cell
    out = codec.pan_paste(img, "right", 0.2, canvas="black", cell=4)
    np.testing.assert_array_equal(out[:, :16], img[:, 4:])


def test_pan_zoom_masks():
    m = codec.build_pan_zoom_mask("pan", 0.2, 16, 16, direction="left")
    assert m[:, :3].all() and m[:, 3:].sum() == 0
    m = codec.build_pan_zoom_mask("zoom", 2.0, 16, 16)
    assert m.sum() == 256 - 64 and m[4:12, 4:12].sum() == 0
    with pytest.raises(ParameterError):
        codec.build_pan_zoom_mask("pan", 1.5, 16, 16, direction="left")


def test_zoom_paste_places_shrunken_image():
    img = np.full((16, 16, 3), 200, np.uint8)
    out = codec.zoom_paste(img, 2.0, canvas="black")
    assert np.all(out[4:12, 4:12] == 200)
    assert out.sum() == 64 * 3 * 200
    lat = codec.encode(img)
    zl = codec.zoom_paste_latent(lat, 2.0, np.zeros_like(lat))
    assert np.all(zl[:, 1:3, 1:3] == lat[:, 1:3, 1:3]) and zl[:, 0].sum() == 0


def test_adjust_image_dispatch():
    img = np.random.default_rng(3).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    np.testing.assert_array_equal(codec.adjust_image(img, "flip", axis="horizontal"), img[:, ::-1])
    with pytest.raises(ParameterError):
        codec.adjust_image(img, "rotate")
