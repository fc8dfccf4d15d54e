import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qsplice.jpeg import (
    BASE_LUMA_TABLE,
    ZIGZAG,
    GridShift,
    LumaImage,
    QuantMatrix,
    blockwise_dct,
    blockwise_idct,
    compress_once,
    dequantize,
    double_compress,
    load_luma,
    quality_to_matrix,
    quantize_indices,
    save_luma,
    shift_back,
    shift_forward,
)


def random_image(seed, shape=(64, 64), lo=-100, hi=100):
    rng = np.random.default_rng(seed)
    return LumaImage(np.rint(rng.uniform(lo, hi, shape)))


class TestQualityToMatrix:
    def test_qf50_is_base_table(self):
        assert np.array_equal(quality_to_matrix(50).steps, BASE_LUMA_TABLE)

    def test_qf100_is_all_ones(self):
        assert np.array_equal(quality_to_matrix(100).steps, np.ones((8, 8)))

    def test_qf90_dc_step(self):
        # floor((16*20 + 50)/100) = 3
        assert quality_to_matrix(90).steps[0, 0] == 3

    @given(st.integers(1, 99))
    def test_monotone_in_quality(self, qf):
        a = quality_to_matrix(qf).steps
        b = quality_to_matrix(qf + 1).steps
        assert np.all(b <= a)

    @pytest.mark.parametrize("qf", [0, 101, -3])
    def test_rejects_out_of_range(self, qf):
        with pytest.raises(ValueError):
            quality_to_matrix(qf)

    def test_rejects_non_integer(self):
        with pytest.raises(ValueError):
            quality_to_matrix(75.5)


class TestQuantMatrix:
    def test_zigzag_has_64_entries_in_frequency_order(self):
        q = quality_to_matrix(50)
        z = q.zigzag()
        assert z.shape == (64,)
        assert ZIGZAG[:6] == [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]
        assert z[0] == q.steps[0, 0]
        assert z[1] == q.steps[0, 1]
        assert z[2] == q.steps[1, 0]

    def test_json_round_trip(self):
        q = quality_to_matrix(77)
        again = QuantMatrix.from_json(q.to_json())
        assert again == q
        assert again.label == "QF=77"

    def test_rejects_bad_steps(self):
        with pytest.raises(ValueError):
            QuantMatrix(steps=np.zeros((8, 8)))
        with pytest.raises(ValueError):
            QuantMatrix(steps=np.full((8, 8), 300))
        with pytest.raises(ValueError):
            QuantMatrix(steps=np.ones((4, 4)))


class TestGridShift:
    @pytest.mark.parametrize("r,c", [(-1, 0), (0, 8), (9, 9)])
    def test_rejects_out_of_range(self, r, c):
        with pytest.raises(ValueError):
            GridShift(r, c)

    @given(st.integers(0, 7), st.integers(0, 7))
    def test_round_trip_restores_interior(self, r, c):
        img = random_image(3, (48, 48))
        shift = GridShift(r, c)
        back = shift_back(shift_forward(img.pixels, shift), shift, img.shape)
        assert np.array_equal(back[r:, c:], img.pixels[r:, c:])


class TestCompressOnce:
    def test_unit_quantizer_is_near_identity(self):
        img = random_image(0)
        ones = QuantMatrix(steps=np.ones((8, 8), dtype=int))
        out = compress_once(img, ones, GridShift(0, 0))
        assert np.abs(out.pixels - img.pixels).max() <= 1.0

    def test_constant_image_quantizes_dc_only(self):
        value = 37.0
        q = quality_to_matrix(75)
        out = compress_once(LumaImage(np.full((32, 32), value)), q)
        dc_step = q.steps[0, 0]
        expected = np.rint(np.rint(8 * value / dc_step) * dc_step / 8)
        assert np.all(out.pixels == expected)

    def test_rejects_non_multiple_dims(self):
        with pytest.raises(ValueError):
            LumaImage(np.zeros((60, 64)))

    def test_dct_round_trip_energy(self):
        img = random_image(1)
        rec = blockwise_idct(blockwise_dct(img.pixels))
        assert np.abs(rec - img.pixels).max() < 1e-9

    def test_idempotent_within_one_bin(self):
        img = random_image(2)
        q = quality_to_matrix(75)
        once = compress_once(img, q)
        twice = compress_once(once, q)
        ia = quantize_indices(blockwise_dct(once.pixels), q)
        ib = quantize_indices(blockwise_dct(twice.pixels), q)
        assert np.abs(ia - ib).max() <= 1.0


class TestDoubleCompress:
    def test_same_matrix_third_pass_changes_nothing(self):
        img = random_image(4)
        q = quality_to_matrix(75)
        second = double_compress(img, q, GridShift(0, 0), q)
        third = compress_once(second, q)
        ib = quantize_indices(blockwise_dct(second.pixels), q)
        ic = quantize_indices(blockwise_dct(third.pixels), q)
        assert np.array_equal(ib, ic)

    def test_requantized_coefficients_are_exact_multiples(self):
        img = random_image(5)
        q = quality_to_matrix(75)
        out = double_compress(img, q, GridShift(0, 0), q)
        # all 64 blocks of the 64x64 image, re-quantized during a further pass
        coefs = dequantize(quantize_indices(blockwise_dct(out.pixels), q), q)
        remainder = coefs - q.steps * np.rint(coefs / q.steps)
        assert np.abs(remainder).max() == 0.0

    def test_shifted_first_grid_leaves_q1_periodicity(self, manifest):
        from qsplice.estimation import ZIGZAG as ZZ
        from qsplice.estimation import classical_scores
        from qsplice.forge import make_texture

        cfg = manifest["na_realigned_periodicity"]
        q1, q2 = quality_to_matrix(65), quality_to_matrix(90)
        img = make_texture(0, (192, 192))
        out = double_compress(img, q1, GridShift(3, 5), q2)
        realigned = out.pixels[3 : 3 + 176, 5 : 5 + 176]
        coefs = blockwise_dct(realigned)
        z1, z2 = q1.prefix(15), q2.prefix(15)
        matches = 0
        for v in range(1, 6):
            r, c = ZZ[v]
            scores = classical_scores(coefs[:, :, r, c].ravel(), int(z2[v]), 20)
            assert scores[z1[v] - 1] >= cfg["threshold_true_score"]
            matches += int(np.argmax(scores)) + 1 == z1[v]
        assert matches >= cfg["threshold_pick_matches"]

    def test_djpeg_differs_from_sjpeg(self):
        from qsplice.forge import make_texture

        img = make_texture(9, (128, 128))
        q65, q90 = quality_to_matrix(65), quality_to_matrix(90)
        djpeg = double_compress(img, q65, GridShift(0, 0), q90)
        sjpeg = compress_once(img, q90)
        frac = np.mean(djpeg.pixels != sjpeg.pixels)
        assert frac > 0.01


class TestImageIO:
    def test_gray_round_trip(self, tmp_path):
        img = random_image(6, (32, 40))
        path = tmp_path / "x.png"
        save_luma(img, path)
        again = load_luma(path)
        assert np.array_equal(again.pixels, img.pixels)

    def test_pgm_round_trip(self, tmp_path):
        img = random_image(7, (24, 24))
        path = tmp_path / "x.pgm"
        save_luma(img, path)
        assert np.array_equal(load_luma(path).pixels, img.pixels)

    def test_rgb_converted_with_luma_weights(self, tmp_path):
        from PIL import Image

        rgb = np.zeros((16, 16, 3), dtype=np.uint8)
        rgb[..., 0], rgb[..., 1], rgb[..., 2] = 200, 100, 50
        path = tmp_path / "rgb.png"
        Image.fromarray(rgb).save(path)
        img = load_luma(path)
        expected = np.rint(200 * 0.299 + 100 * 0.587 + 50 * 0.114) - 128.0
        assert np.all(img.pixels == expected)

    def test_crops_to_block_multiple(self, tmp_path):
        from PIL import Image

        arr = np.zeros((67, 70), dtype=np.uint8)
        path = tmp_path / "odd.png"
        Image.fromarray(arr, mode="L").save(path)
        img = load_luma(path)
        assert img.shape == (64, 64)
