import numpy as np
import pytest
from hypothesis import given, strategies as st

from kdetect import augment as aug
from kdetect.synthdata import ImageSample


def _sample(rng, n_boxes=2):
    img = rng.integers(0, 256, (225, 225, 3), dtype=np.uint8)
    xy = rng.uniform(0, 150, (n_boxes, 2))
    boxes = np.hstack([xy, xy + rng.uniform(10, 70, (n_boxes, 2))])
    return ImageSample(img, boxes, np.arange(n_boxes) % 3, "x")


@st.composite
def frame_boxes(draw):
    w = draw(st.integers(20, 300))
    h = draw(st.integers(20, 300))
    x0 = draw(st.floats(0, w - 2))
    y0 = draw(st.floats(0, h - 2))
    x1 = draw(st.floats(x0 + 1, w))
    y1 = draw(st.floats(y0 + 1, h))
    return (x0, y0, x1, y1), (w, h)


class TestBoxTransforms:
    def test_hflip_worked(self):
        out = aug.hflip_boxes(np.array([[10.0, 20, 30, 40]]), 225)
        np.testing.assert_array_equal(out, [[195, 20, 215, 40]])

    def test_rot90_worked(self):
        assert aug.box_transform_rot90((0, 0, 10, 20), (225, 225), 1) == (0, 215, 20, 225)

    def test_rot90_zero(self):
        assert aug.box_transform_rot90((1, 2, 3, 4), (10, 10), 0) == (1, 2, 3, 4)

    def test_rot90_rejects_bad_turns(self):
        with pytest.raises(ValueError):
            aug.box_transform_rot90((1, 2, 3, 4), (10, 10), 4)

    @given(frame_boxes())
    def test_four_turns_identity(self, bf):
        box, frame = bf
        b, f = box, frame
        for _ in range(4):
            b = aug.box_transform_rot90(b, f, 1)
            f = (f[1], f[0])
        np.testing.assert_allclose(b, box, atol=1e-9)

    @given(frame_boxes(), st.integers(0, 3))
    def test_turns_compose_and_stay_valid(self, bf, k):
        box, frame = bf
        direct = aug.box_transform_rot90(box, frame, k)
        b, f = box, frame
        for _ in range(k):
            b = aug.box_transform_rot90(b, f, 1)
            f = (f[1], f[0])
        np.testing.assert_allclose(direct, b, atol=1e-9)
        assert direct[0] < direct[2] and direct[1] < direct[3]
        assert 0 <= direct[0] and direct[2] <= f[0] + 1e-9 and direct[3] <= f[1] + 1e-9

    def test_raster_and_box_agree_under_rotation(self):
        img = np.zeros((225, 225, 3), np.uint8)
        img[30:50, 60:100] = 255  # box (60, 30, 100, 50)
        s = ImageSample(img, [[60, 30, 100, 50]], [0], "r")
        for k in range(4):
            out = aug.rot90(s, k)
            ys, xs = np.nonzero(out.image[..., 0])
            np.testing.assert_array_equal(out.boxes[0], [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])


class TestRasterOps:
    def test_involutions_bit_exact(self, rng):
        s = _sample(rng)
        for op in (aug.hflip, aug.vflip):
            back = op(op(s))
            np.testing.assert_array_equal(back.image, s.image)
            np.testing.assert_allclose(back.boxes, s.boxes, rtol=0, atol=1e-12)

    def test_rot90_four_times(self, rng):
        s = _sample(rng)
        out = s
        for _ in range(4):
            out = aug.rot90(out, 1)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_allclose(out.boxes, s.boxes, atol=1e-12)

    def test_center_crop_keeps_size_and_drops_small(self):
        img = np.full((225, 225, 3), 128, np.uint8)
        # first box sits in the discarded border, second is central
        s = ImageSample(img, [[0, 0, 20, 20], [100, 100, 130, 130]], [0, 2], "c")
        out = aug.center_crop(s, 0.8)
        assert out.image.shape == (225, 225, 3)
        assert len(out.boxes) == 1 and out.labels.tolist() == [2]
        np.testing.assert_allclose(out.boxes[0], (np.array([100, 100, 130, 130]) - 22.5) / 0.8)

    def test_center_crop_rolls_back_when_empty(self):
        img = np.full((225, 225, 3), 128, np.uint8)
        s = ImageSample(img, [[0, 0, 20, 20]], [0], "c")
        assert aug.center_crop(s, 0.8) is s


class TestApply:
    def test_deterministic(self, rng):
        s = _sample(rng)
        p = aug.policy_variant("geometric+photometric", seed=4)
        a, b = aug.apply(s, p, 17), aug.apply(s, p, 17)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_photometric_never_touches_boxes(self, rng):
        s = _sample(rng)
        p = aug.AugmentPolicy(photometric=aug.PHOTOMETRIC_OPS, probability=1.0, seed=1)
        for draw in range(10):
            out = aug.apply(s, p, draw)
            np.testing.assert_array_equal(out.boxes, s.boxes)
            assert out.image.shape == s.image.shape

    def test_every_op_keeps_boxes_valid(self, rng):
        p = aug.policy_variant("geometric+photometric", seed=2, probability=0.7)
        for draw in range(40):
            s = _sample(rng, 3)
            out = aug.apply(s, p, draw)
            assert out.image.shape == (225, 225, 3) and out.image.dtype == np.uint8
            out.validate()

    def test_none_policy_is_identity(self, rng):
        s = _sample(rng)
        out = aug.apply(s, aug.policy_variant("none"), 3)
        np.testing.assert_array_equal(out.image, s.image)

    def test_stream_consumption_independent_of_enabled_ops(self, rng):
        s = _sample(rng)
        geo = aug.AugmentPolicy(geometric=aug.GEOMETRIC_OPS, probability=0.5, seed=8)
        both = aug.AugmentPolicy(geometric=aug.GEOMETRIC_OPS, photometric=aug.PHOTOMETRIC_OPS,
                                 probability=0.5, seed=8)
        for draw in range(10):
            np.testing.assert_array_equal(aug.apply(s, geo, draw).boxes, aug.apply(s, both, draw).boxes)

    def test_rejects_unknown_op(self):
        with pytest.raises(ValueError):
            aug.AugmentPolicy(geometric=("shear",))

    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            aug.AugmentPolicy(probability=1.5)

    def test_rejects_empty_range(self):
        with pytest.raises(ValueError):
            aug.AugmentPolicy(ranges={**aug.DEFAULT_RANGES, "contrast": (1.2, 0.9)})

    def test_policy_round_trip(self):
        p = aug.policy_variant("photometric", seed=3)
        assert aug.AugmentPolicy.from_dict(p.to_dict()) == p


class TestPhotometric:
    def test_equalize_is_per_channel(self):
        img = np.zeros((64, 64, 3), np.uint8)
        img[..., 0] = np.arange(64)[None, :] // 2
        img[..., 1] = 100
        from PIL import Image

        out = np.asarray(aug._photometric(Image.fromarray(img), "equalize", 0.0))
        assert out[..., 0].max() > 200  # red stretched on its own histogram
        assert len(np.unique(out[..., 1])) == 1

    def test_hue_shift_zero_is_near_identity(self, rng):
        from PIL import Image

        img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        out = np.asarray(aug._photometric(Image.fromarray(img), "hue", 0.0)).astype(int)
        assert np.abs(out - img.astype(int)).max() <= 8  # HSV quantisation only
