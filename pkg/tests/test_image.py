import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lle.image import (
    TIERS,
    DegradeConfig,
    ImageDecodeError,
    TierPreset,
    UnreachableTargetError,
    center_crop,
    crop_offsets,
    fit_attenuation,
    load_image,
    mean_intensity,
    random_crop,
    save_image,
    synth_low_light,
)


def _write_png(path, rgb_bytes: np.ndarray, color_type=2, bit_depth=8):
    """Hand-rolled PNG encoder (no Pillow) used as an independent reference."""
    h, w = rgb_bytes.shape[:2]
    raw = b"".join(b"\x00" + rgb_bytes[y].tobytes() for y in range(h))

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw))
                     + chunk(b"IEND", b""))


def _write_ppm(path, rgb_bytes):
    h, w = rgb_bytes.shape[:2]
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb_bytes.tobytes())


class TestCodecs:
    def test_ppm_red_pixel(self, tmp_path):
        _write_ppm(tmp_path / "r.ppm", np.array([[[255, 0, 0]]], dtype=np.uint8))
        np.testing.assert_array_equal(load_image(tmp_path / "r.ppm"), [[[1.0, 0.0, 0.0]]])

    def test_ppm_black_pixel(self, tmp_path):
        _write_ppm(tmp_path / "k.ppm", np.zeros((1, 1, 3), dtype=np.uint8))
        np.testing.assert_array_equal(load_image(tmp_path / "k.ppm"), np.zeros((1, 1, 3)))

    def test_png_2x2_matches_independent_encoding(self, tmp_path):
        data = np.array([[[12, 200, 7], [255, 0, 128]], [[1, 2, 3], [90, 91, 250]]], dtype=np.uint8)
        _write_png(tmp_path / "a.png", data)
        np.testing.assert_allclose(load_image(tmp_path / "a.png"), data / 255.0, atol=1e-9)

    def test_rgba_drops_alpha_and_gray_replicates(self, tmp_path):
        rgba = np.array([[[10, 20, 30, 40]]], dtype=np.uint8)
        _write_png(tmp_path / "a.png", rgba, color_type=6)
        np.testing.assert_allclose(load_image(tmp_path / "a.png"), [[[10 / 255, 20 / 255, 30 / 255]]])
        gray = np.array([[77, 5]], dtype=np.uint8)[..., None]
        _write_png(tmp_path / "g.png", gray, color_type=0)
        out = load_image(tmp_path / "g.png")
        assert out.shape == (1, 2, 3)
        np.testing.assert_allclose(out[0, 0], [77 / 255] * 3)

    def test_16bit_png_rejected_with_bit_depth(self, tmp_path):
        data = np.zeros((2, 2, 6), dtype=np.uint8)
        _write_png(tmp_path / "d.png", data, color_type=2, bit_depth=16)
        with pytest.raises(ImageDecodeError, match="bit depth"):
            load_image(tmp_path / "d.png")

    def test_unknown_format_and_missing_file(self, tmp_path):
        (tmp_path / "x.bmp").write_bytes(b"BM" + b"\x00" * 50)
        with pytest.raises(ImageDecodeError, match="unsupported format"):
            load_image(tmp_path / "x.bmp")
        (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n1 2 3\n")
        with pytest.raises(ImageDecodeError, match="P3"):
            load_image(tmp_path / "a.ppm")
        with pytest.raises(ImageDecodeError, match="unreadable"):
            load_image(tmp_path / "nope.png")

    def test_save_clamps_and_rounds_half_away(self, tmp_path):
        img = np.array([[[1.5, 0.5, -0.2]]])
        save_image(img, tmp_path / "o.ppm")
        assert (tmp_path / "o.ppm").read_bytes().endswith(bytes([255, 128, 0]))

    @pytest.mark.parametrize("ext", [".png", ".ppm"])
    def test_roundtrip_within_half_level(self, tmp_path, ext):
        rng = np.random.default_rng(3)
        for k in range(5):
            img = rng.random((7, 5, 3))
            save_image(img, tmp_path / f"r{k}{ext}")
            assert np.max(np.abs(load_image(tmp_path / f"r{k}{ext}") - img)) <= 1 / 510 + 1e-12

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_identity_on_byte_grid(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 256, size=(3, 4, 3)) / 255.0
        path = tmp_path_factory.mktemp("rt") / "a.png"
        save_image(img, path)
        np.testing.assert_array_equal(load_image(path), img)

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(ValueError, match="extension"):
            save_image(np.zeros((1, 1, 3)), tmp_path / "a.jpg")


class TestCrops:
    def test_full_size_is_identity(self):
        img = np.random.default_rng(0).random((6, 6, 3))
        np.testing.assert_array_equal(random_crop(img, 6, 123), img)

    def test_same_seed_same_crop(self):
        img = np.random.default_rng(0).random((40, 30, 3))
        np.testing.assert_array_equal(random_crop(img, 16, 5), random_crop(img, 16, 5))

    def test_offsets_replay_generator(self):
        # first two draws of PCG64(7).integers(0, 257)
        assert crop_offsets(512, 512, 256, 7) == (242, 160)
        img = np.random.default_rng(1).random((512, 512, 3))
        np.testing.assert_array_equal(random_crop(img, 256, 7), img[242:498, 160:416])

    def test_small_image_edge_padded(self):
        img = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3)
        out = random_crop(img, 5, 0)
        assert out.shape == (5, 5, 3)
        assert set(np.unique(out)) <= set(np.unique(img))
        assert center_crop(img, 5).shape == (5, 5, 3)

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            random_crop(np.zeros((4, 4, 3)), 0, 1)


class TestSynthLowLight:
    def test_identity_attenuation_quantizes(self):
        img = np.random.default_rng(2).random((5, 5, 3))
        out = synth_low_light(img, DegradeConfig(1.0, 0.0, 8))
        np.testing.assert_array_equal(out * 255, np.round(out * 255))
        assert np.max(np.abs(out - img)) <= 0.5 / 255 + 1e-12

    def test_one_percent_of_white(self):
        out = synth_low_light(np.ones((3, 3, 3)), DegradeConfig(0.01, 0.0, 8))
        np.testing.assert_allclose(out, 3 / 255)

    def test_zero_attenuation(self):
        out = synth_low_light(np.random.default_rng(0).random((3, 3, 3)), DegradeConfig(0.0, 0.0, 8))
        np.testing.assert_array_equal(out, 0.0)

    def test_deterministic_with_noise(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        cfg = DegradeConfig(0.05, 0.01, 8, seed=11)
        np.testing.assert_array_equal(synth_low_light(img, cfg), synth_low_light(img, cfg))
        assert not np.array_equal(synth_low_light(img, cfg),
                                  synth_low_light(img, DegradeConfig(0.05, 0.01, 8, seed=12)))

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_attenuation(self, a1, a2, seed):
        img = np.random.default_rng(seed).random((4, 4, 3))
        lo, hi = sorted((a1, a2))
        out_lo = synth_low_light(img, DegradeConfig(lo, 0.0, None))
        out_hi = synth_low_light(img, DegradeConfig(hi, 0.0, None))
        assert np.all(out_lo <= out_hi)

    @given(st.floats(0.0, 1.0), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_mean_scales_linearly_without_quantization(self, alpha, seed):
        img = np.random.default_rng(seed).random((6, 6, 3))
        out = synth_low_light(img, DegradeConfig(alpha, 0.0, None))
        assert mean_intensity(out) == pytest.approx(alpha * mean_intensity(img), rel=1e-12, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DegradeConfig(1.5)
        with pytest.raises(ValueError):
            DegradeConfig(0.5, -1.0)
        with pytest.raises(ValueError):
            DegradeConfig(0.5, 0.0, 17)


class TestIntensity:
    def test_mean_intensity(self):
        assert mean_intensity(np.zeros((2, 2, 3))) == 0.0
        assert mean_intensity(np.full((2, 2, 3), 0.5)) == 127.5

    def test_tiers(self):
        assert {k: t.target_mean_255 for k, t in TIERS.items()} == {"LL-N": 3.2, "LL-H": 1.4, "LL-E": 0.9}

    def test_fit_constant_white(self):
        alpha = fit_attenuation([np.ones((4, 4, 3))] * 2, TIERS["LL-E"])
        # quantized mean only takes integer values here; crossing is at 0.5/255
        assert abs(alpha - 0.9 / 255) < 0.5 / 255

    def test_fit_bisection_hits_target(self):
        rng = np.random.default_rng(4)
        bright = [rng.random((32, 32, 3)) for _ in range(3)]
        alpha = fit_attenuation(bright, TIERS["LL-E"])
        degraded = [synth_low_light(b, DegradeConfig(alpha, 0.0, 8)) for b in bright]
        assert abs(255 * np.mean(degraded) - 0.9) <= 0.05

    def test_fit_current_mean_gives_unit_attenuation(self):
        bright = [np.full((4, 4, 3), 0.4)]
        alpha = fit_attenuation(bright, TierPreset("self", mean_intensity(bright[0])), quantize_bits=None)
        assert alpha == pytest.approx(1.0, abs=1e-9)

    def test_fit_unreachable(self):
        with pytest.raises(UnreachableTargetError, match="achievable"):
            fit_attenuation([np.zeros((4, 4, 3))], TIERS["LL-E"])

    def test_fit_empty(self):
        with pytest.raises(ValueError):
            fit_attenuation([], TIERS["LL-E"])
