import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from mgbp.tensor import (
    BoundaryRule,
    ImageFormatError,
    Kernel,
    as_tensor,
    convolve,
    delta,
    devectorize,
    load_tensor,
    read_image,
    read_raw,
    save_tensor,
    strided_convolve,
    transposed_convolve,
    vectorize,
    write_image,
    write_raw,
)
from oracles import conv2d_loop, downscale_loop, upscale_loop

RULES = list(BoundaryRule)


class TestKernel:
    def test_default_anchor_is_centre(self):
        assert Kernel(np.ones((3, 5))).anchor == (1, 2)

    def test_one_dimensional_taps_become_a_row(self):
        k = Kernel([1.0, 2.0, 3.0])
        assert k.shape == (1, 3)

    @pytest.mark.parametrize("taps", [np.zeros((0, 3)), np.array([[np.nan]]), np.array([[np.inf, 1.0]])])
    def test_rejects_empty_or_nonfinite(self, taps):
        with pytest.raises(ValueError):
            Kernel(taps)

    def test_polyphase_sums(self):
        k = Kernel(np.ones((2, 2)), anchor=(0, 0))
        np.testing.assert_array_equal(k.polyphase_sums(2), np.ones((2, 2)))


class TestConvolve:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((5, 4, 2))
        np.testing.assert_array_equal(convolve(x, Kernel([[1.0]])), x)

    @pytest.mark.parametrize("rule", [BoundaryRule.REPLICATE, BoundaryRule.REFLECT])
    def test_constant_preserved_by_normalized_kernel(self, rule):
        k = Kernel(np.full((3, 3), 1 / 9))
        out = convolve(np.full((6, 7, 1), 0.5), k, rule)
        np.testing.assert_allclose(out, 0.5, rtol=0, atol=1e-15)

    def test_matches_double_loop_oracle_zero_pad(self):
        rng = np.random.default_rng(5)
        x = rng.random((5, 5))
        taps = rng.normal(size=(3, 3))
        got = convolve(x, Kernel(taps), BoundaryRule.ZERO)
        np.testing.assert_allclose(got, conv2d_loop(x, taps, (1, 1), "zero-pad"), atol=1e-12)

    @pytest.mark.parametrize("rule", RULES)
    @pytest.mark.parametrize("shape,anchor", [((3, 3), (1, 1)), ((2, 4), (0, 3)), ((4, 1), (2, 0))])
    def test_all_rules_match_oracle(self, rule, shape, anchor):
        rng = np.random.default_rng(11)
        x = rng.random((6, 5, 2))
        taps = rng.normal(size=shape)
        got = convolve(x, Kernel(taps, anchor=anchor), rule)
        np.testing.assert_allclose(got, conv2d_loop(x, taps, anchor, rule.value), atol=1e-12)

    def test_true_convolution_orientation(self):
        # an asymmetric kernel applied to an impulse reproduces the kernel itself
        taps = np.arange(1.0, 7.0).reshape(2, 3)
        out = convolve(delta(5, 5, 1, (1, 1, 0)), Kernel(taps, anchor=(0, 0)), BoundaryRule.ZERO)
        np.testing.assert_array_equal(out[1:3, 1:4, 0], taps)

    def test_reflect_rejects_oversized_kernel(self):
        with pytest.raises(ValueError, match="kernel exceeds reflectable extent"):
            convolve(np.zeros((2, 2)), Kernel(np.ones((5, 5))), BoundaryRule.REFLECT)

    @settings(max_examples=30, deadline=None)
    @given(
        x=arrays(np.float64, (4, 5, 1), elements=st.floats(-10, 10)),
        y=arrays(np.float64, (4, 5, 1), elements=st.floats(-10, 10)),
        a=st.floats(-3, 3),
        b=st.floats(-3, 3),
        rule=st.sampled_from(RULES),
    )
    def test_linearity(self, x, y, a, b, rule):
        k = Kernel(np.array([[0.1, -0.4, 0.2], [0.3, 0.5, -0.2]]))
        lhs = convolve(a * x + b * y, k, rule)
        rhs = a * convolve(x, k, rule) + b * convolve(y, k, rule)
        scale = 1.0 + np.abs(lhs).max() + np.abs(rhs).max()
        assert np.abs(lhs - rhs).max() <= 1e-10 * scale


class TestResamplingPrimitives:
    @pytest.mark.parametrize("rule", RULES)
    def test_strided_matches_blur_then_decimate(self, rule):
        rng = np.random.default_rng(2)
        y = rng.random((8, 6, 1))
        taps = rng.random((3, 3))
        got = strided_convolve(y, Kernel(taps), 2, rule)
        np.testing.assert_allclose(got, downscale_loop(y, taps, (1, 1), 2, rule.value), atol=1e-13)

    @pytest.mark.parametrize("rule", RULES)
    def test_transposed_matches_zero_insert_oracle(self, rule):
        rng = np.random.default_rng(3)
        x = rng.random((3, 4, 2))
        taps = rng.random((4, 4))
        got = transposed_convolve(x, Kernel(taps, anchor=(2, 1)), 2, rule)
        np.testing.assert_allclose(got, upscale_loop(x, taps, (2, 1), 2, rule.value), atol=1e-13)

    def test_odd_extent_strided_output_rounds_up(self):
        assert strided_convolve(np.zeros((5, 7, 1)), Kernel([[1.0]]), 2).shape == (3, 4, 1)


class TestVectorize:
    def test_single_sample(self):
        np.testing.assert_array_equal(vectorize(np.full((1, 1, 1), 7.0)), [7.0])

    def test_row_major(self):
        np.testing.assert_array_equal(vectorize(np.array([[1.0, 2.0], [3.0, 4.0]])), [1, 2, 3, 4])

    def test_channel_is_fastest_axis(self):
        t = np.arange(12.0).reshape(2, 3, 2)
        assert vectorize(t)[1] == t[0, 0, 1]

    def test_round_trip_4x3x2(self):
        t = np.random.default_rng(1).random((4, 3, 2))
        np.testing.assert_array_equal(devectorize(vectorize(t), t.shape), t)

    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3)),
                  elements=st.floats(-1e6, 1e6)))
    def test_bijection(self, t):
        assert np.array_equal(devectorize(vectorize(t), t.shape), t)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            devectorize(np.zeros(5), (2, 2, 1))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            as_tensor(np.array([[np.nan]]))


class TestDelta:
    def test_scalar(self):
        np.testing.assert_array_equal(delta(1, 1, 1, (0, 0, 0)), [[[1.0]]])

    def test_position(self):
        np.testing.assert_array_equal(delta(2, 2, 1, (1, 0, 0))[:, :, 0], [[0, 0], [1, 0]])

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.data())
    def test_sums_to_one(self, h, w, c, data):
        at = (data.draw(st.integers(0, h - 1)), data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, c - 1)))
        assert delta(h, w, c, at).sum() == 1.0

    @pytest.mark.parametrize("at", [(2, 0, 0), (0, -1, 0), (0, 0, 1)])
    def test_out_of_bounds(self, at):
        with pytest.raises(ValueError):
            delta(2, 2, 1, at)


class TestImageIO:
    @pytest.mark.parametrize("value,expected", [(0, 0.0), (255, 1.0)])
    def test_solid_png(self, tmp_path, value, expected):
        Image.fromarray(np.full((4, 4), value, np.uint8), "L").save(tmp_path / "s.png")
        t = read_image(tmp_path / "s.png")
        assert t.shape == (4, 4, 1)
        assert np.all(t == expected)

    @pytest.mark.parametrize("ext", [".png", ".pgm", ".ppm"])
    def test_random_8bit_round_trip_bytes(self, tmp_path, ext):
        rng = np.random.default_rng(4)
        channels = 1 if ext == ".pgm" else 3
        raw = rng.integers(0, 256, size=(7, 9, channels), dtype=np.uint8)
        src = tmp_path / f"a{ext}"
        write_image(raw / 255.0, src)
        dst = tmp_path / f"b{ext}"
        write_image(read_image(src), dst)
        assert src.read_bytes() == dst.read_bytes()
        np.testing.assert_array_equal(np.rint(read_image(dst) * 255).astype(np.uint8), raw)

    def test_png_pixels_match_pillow(self, tmp_path):
        raw = np.random.default_rng(8).integers(0, 256, size=(5, 6, 3), dtype=np.uint8)
        Image.fromarray(raw, "RGB").save(tmp_path / "c.png")
        np.testing.assert_array_equal(read_image(tmp_path / "c.png") * 255, raw)

    def test_write_clamps_and_rounds(self, tmp_path):
        write_image(np.array([[-0.5, 0.5 / 255 + 1e-9, 2.0]]), tmp_path / "q.pgm")
        np.testing.assert_array_equal(read_image(tmp_path / "q.pgm")[0, :, 0] * 255, [0, 1, 255])

    def test_sixteen_bit_png_rejected(self, tmp_path):
        Image.new("I;16", (2, 2)).save(tmp_path / "d.png")
        with pytest.raises(ImageFormatError, match="bit"):
            read_image(tmp_path / "d.png")

    @pytest.mark.parametrize(
        "payload,field",
        [
            (b"P2\n2 2\n255\n", "magic"),
            (b"P5\nx 2\n255\n", "width"),
            (b"P5\n2 2\n65535\n", "maxval"),
            (b"P5\n2 2\n255\n\x00", "pixel data"),
        ],
    )
    def test_malformed_pnm_names_field(self, tmp_path, payload, field):
        (tmp_path / "bad.pgm").write_bytes(payload)
        with pytest.raises(ImageFormatError, match=field):
            read_image(tmp_path / "bad.pgm")

    def test_two_channel_write_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_image(np.zeros((2, 2, 2)), tmp_path / "x.png")


class TestRawTensor:
    def test_layout(self, tmp_path):
        t = np.arange(6.0).reshape(1, 3, 2)
        write_raw(t, tmp_path / "t.mgt")
        data = (tmp_path / "t.mgt").read_bytes()
        assert data[:4] == b"MGT1"
        assert np.frombuffer(data[4:16], "<u4").tolist() == [1, 3, 2]
        np.testing.assert_array_equal(np.frombuffer(data[16:], "<f8"), np.arange(6.0))

    def test_round_trip_exact(self, tmp_path):
        t = np.random.default_rng(0).normal(size=(3, 4, 5))
        save_tensor(t, tmp_path / "r.mgt")
        np.testing.assert_array_equal(load_tensor(tmp_path / "r.mgt"), t)
        np.testing.assert_array_equal(read_raw(tmp_path / "r.mgt"), t)

    def test_truncated(self, tmp_path):
        write_raw(np.zeros((2, 2, 1)), tmp_path / "r.mgt")
        p = tmp_path / "r.mgt"
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(ValueError):
            read_raw(p)
