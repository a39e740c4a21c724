import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divergen.masks import (
    BitMask,
    BoundingBox,
    MaskError,
    RleMask,
    bbox_from_mask,
    box_blur_outside_mask,
    invert_mask,
    mask_iou,
    pad_and_crop_region,
    rle_decode,
    rle_encode,
)

from conftest import disk_bits


def naive_rle_counts(bits: np.ndarray) -> list[int]:
    """Independent column-scan run-length oracle, zeros first."""
    counts = []
    current = 0
    run = 0
    h, w = bits.shape
    for x in range(w):
        for y in range(h):
            v = 1 if bits[y, x] else 0
            if v == current:
                run += 1
            else:
                counts.append(run)
                current = v
                run = 1
    counts.append(run)
    return counts


def random_mask(rng: np.random.Generator) -> BitMask:
    h = int(rng.integers(1, 65))
    w = int(rng.integers(1, 65))
    return BitMask.from_array(rng.random((h, w)) < rng.random())


class TestRleCodec:
    def test_all_zero(self):
        assert rle_encode(BitMask.zeros(2, 2)).counts == (4,)

    def test_all_one(self):
        mask = BitMask.from_array(np.ones((2, 2), dtype=bool))
        assert rle_encode(mask).counts == (0, 4)

    def test_random_masks_match_naive_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(300):
            mask = random_mask(rng)
            rle = rle_encode(mask)
            assert list(rle.counts) == naive_rle_counts(mask.bits)
            assert sum(rle.counts) == mask.height * mask.width
            assert rle_decode(rle) == mask

    def test_decode_rejects_bad_sum(self):
        with pytest.raises(MaskError):
            RleMask(size=(2, 2), counts=(3,))

    def test_interior_zero_rejected(self):
        with pytest.raises(MaskError):
            RleMask(size=(2, 2), counts=(2, 0, 2))

    @given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, h, w, seed):
        rng = np.random.default_rng(seed)
        mask = BitMask.from_array(rng.random((h, w)) < 0.5)
        assert rle_decode(rle_encode(mask)) == mask


class TestInvert:
    def test_all_zero_becomes_all_one(self):
        out = invert_mask(BitMask.zeros(3, 5))
        assert out.popcount() == 15

    def test_involution_and_popcount(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            mask = random_mask(rng)
            assert invert_mask(invert_mask(mask)) == mask
            assert mask.popcount() + invert_mask(mask).popcount() == mask.height * mask.width

    def test_disk_on_white_fixture(self):
        bits = disk_bits(32, 32, 16, 16, 8)
        background = BitMask.from_array(~bits)
        inverted = invert_mask(background)
        assert np.array_equal(inverted.bits, bits)


class TestBboxFromMask:
    def test_single_bit(self):
        bits = np.zeros((8, 8), dtype=bool)
        bits[3, 5] = True
        assert bbox_from_mask(BitMask.from_array(bits)) == BoundingBox(x=5, y=3, w=1, h=1)

    def test_full_mask(self):
        mask = BitMask.from_array(np.ones((6, 9), dtype=bool))
        assert bbox_from_mask(mask) == BoundingBox(x=0, y=0, w=9, h=6)

    def test_empty_mask_error(self):
        with pytest.raises(MaskError):
            bbox_from_mask(BitMask.zeros(4, 4))

    def test_random_masks_match_minmax_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            mask = random_mask(rng)
            if mask.popcount() == 0:
                continue
            ys, xs = [], []
            for y in range(mask.height):
                for x in range(mask.width):
                    if mask.bits[y, x]:
                        ys.append(y)
                        xs.append(x)
            expect = BoundingBox(x=min(xs), y=min(ys),
                                 w=max(xs) - min(xs) + 1, h=max(ys) - min(ys) + 1)
            assert bbox_from_mask(mask) == expect

    def test_tightness(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            mask = random_mask(rng)
            if mask.popcount() == 0:
                continue
            box = bbox_from_mask(mask)
            sub = mask.bits[box.y : box.y + box.h, box.x : box.x + box.w]
            assert sub[0, :].any() and sub[-1, :].any()
            assert sub[:, 0].any() and sub[:, -1].any()


class TestMaskIou:
    def test_identical(self):
        bits = disk_bits(16, 16, 8, 8, 5)
        mask = BitMask.from_array(bits)
        assert mask_iou(mask, mask) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8), dtype=bool)
        b = np.zeros((8, 8), dtype=bool)
        a[:4] = True
        b[4:] = True
        assert mask_iou(BitMask.from_array(a), BitMask.from_array(b)) == 0.0

    def test_both_empty(self):
        assert mask_iou(BitMask.zeros(4, 4), BitMask.zeros(4, 4)) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(MaskError):
            mask_iou(BitMask.zeros(4, 4), BitMask.zeros(4, 5))

    def test_random_pairs_match_popcount_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            h, w = int(rng.integers(1, 33)), int(rng.integers(1, 33))
            a = BitMask.from_array(rng.random((h, w)) < 0.5)
            b = BitMask.from_array(rng.random((h, w)) < 0.5)
            inter = sum(
                1 for y in range(h) for x in range(w) if a.bits[y, x] and b.bits[y, x]
            )
            union = sum(
                1 for y in range(h) for x in range(w) if a.bits[y, x] or b.bits[y, x]
            )
            expect = 1.0 if union == 0 else inter / union
            assert abs(mask_iou(a, b) - expect) <= 1e-12
            assert mask_iou(a, b) == mask_iou(b, a)


def blur_oracle(image: np.ndarray, mask: BitMask, kh: int, kw: int) -> np.ndarray:
    """Direct convolution with in-bounds normalization and round-half-up."""
    h, w = image.shape[:2]
    out = image.copy()
    for y in range(h):
        for x in range(w):
            if mask.bits[y, x]:
                continue
            total = [0, 0, 0]
            count = 0
            for yy in range(y - (kh - 1) // 2, y + kh // 2 + 1):
                for xx in range(x - (kw - 1) // 2, x + kw // 2 + 1):
                    if 0 <= yy < h and 0 <= xx < w:
                        count += 1
                        for c in range(3):
                            total[c] += int(image[yy, xx, c])
            out[y, x] = [(2 * t + count) // (2 * count) for t in total]
    return out


class TestBoxBlurOutsideMask:
    def test_constant_image_unchanged(self):
        image = np.full((12, 9, 3), 137, dtype=np.uint8)
        mask = BitMask.from_array(np.random.default_rng(0).random((12, 9)) < 0.4)
        assert np.array_equal(box_blur_outside_mask(image, mask, (10, 10)), image)

    def test_all_ones_mask_unchanged(self):
        rng = np.random.default_rng(1)
        image = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        mask = BitMask.from_array(np.ones((16, 16), dtype=bool))
        assert np.array_equal(box_blur_outside_mask(image, mask, (5, 5)), image)

    def test_impulse_matches_direct_convolution_oracle(self):
        image = np.zeros((9, 9, 3), dtype=np.uint8)
        image[4, 4] = (90, 180, 255)
        mask = BitMask.zeros(9, 9)
        out = box_blur_outside_mask(image, mask, (3, 3))
        assert np.array_equal(out, blur_oracle(image, mask, 3, 3))

    def test_random_images_match_oracle(self):
        rng = np.random.default_rng(5)
        for kh, kw in [(3, 3), (10, 10), (2, 4), (1, 1)]:
            image = rng.integers(0, 256, (13, 11, 3), dtype=np.uint8)
            mask = BitMask.from_array(rng.random((13, 11)) < 0.5)
            out = box_blur_outside_mask(image, mask, (kh, kw))
            assert np.array_equal(out, blur_oracle(image, mask, kh, kw)), (kh, kw)

    def test_masked_pixels_bit_identical_and_range_bounded(self):
        rng = np.random.default_rng(6)
        image = rng.integers(10, 240, (20, 20, 3), dtype=np.uint8)
        mask = BitMask.from_array(rng.random((20, 20)) < 0.5)
        out = box_blur_outside_mask(image, mask, (7, 5))
        assert np.array_equal(out[mask.bits], image[mask.bits])
        assert out.min() >= image.min() and out.max() <= image.max()

    def test_dimension_mismatch(self):
        with pytest.raises(MaskError):
            box_blur_outside_mask(np.zeros((4, 4, 3), np.uint8), BitMask.zeros(4, 5), (3, 3))


def crop_bounds_oracle(x: int, w: int, min_width: int, limit: int) -> tuple[int, int]:
    """Reference interval logic: widen near-symmetrically, shift back in bounds."""
    if w >= min_width:
        return x, x + w
    deficit = min_width - w
    lo = x - deficit // 2
    hi = x + w + (deficit - deficit // 2)
    if lo < 0:
        hi = min(limit, hi - lo)
        lo = 0
    if hi > limit:
        lo = max(0, lo - (hi - limit))
        hi = limit
    return lo, hi


class TestPadAndCropRegion:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.image = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)

    def test_wide_box_untouched(self):
        box = BoundingBox(x=30, y=40, w=100, h=60)
        crop = pad_and_crop_region(self.image, box, 80)
        assert np.array_equal(crop, self.image[40:100, 30:130])

    def test_narrow_box_centered(self):
        box = BoundingBox(x=236, y=236, w=40, h=40)
        crop = pad_and_crop_region(self.image, box, 80)
        assert crop.shape == (80, 80, 3)
        assert np.array_equal(crop, self.image[216:296, 216:296])

    def test_flush_left_extends_right_only(self):
        box = BoundingBox(x=0, y=200, w=40, h=40)
        crop = pad_and_crop_region(self.image, box, 80)
        assert crop.shape[1] == 80
        assert np.array_equal(crop, self.image[180:260, 0:80])

    def test_random_boxes_match_bounds_oracle(self):
        rng = np.random.default_rng(13)
        image = rng.integers(0, 256, (100, 120, 3), dtype=np.uint8)
        for _ in range(200):
            w = int(rng.integers(1, 121))
            h = int(rng.integers(1, 101))
            x = int(rng.integers(0, 120 - w + 1))
            y = int(rng.integers(0, 100 - h + 1))
            min_width = int(rng.integers(1, 140))
            crop = pad_and_crop_region(image, BoundingBox(x=x, y=y, w=w, h=h), min_width)
            x0, x1 = crop_bounds_oracle(x, w, min_width, 120)
            if w >= min_width:
                y0, y1 = y, y + h
            else:
                y0, y1 = crop_bounds_oracle(y, h, h + (min_width - w), 100)
            assert np.array_equal(crop, image[y0:y1, x0:x1]), (x, y, w, h, min_width)

    def test_box_outside_image_error(self):
        with pytest.raises(MaskError):
            pad_and_crop_region(self.image, BoundingBox(x=500, y=0, w=30, h=10), 8)
