import numpy as np
import pytest

from cfachain.cfa_io import (
    BayerPattern,
    CfaImage,
    QuadImage,
    cfa_to_quad,
    channel_mask,
    mosaic,
    quad_to_cfa,
    quantize,
    read_image,
    read_sequence,
    write_image,
    write_mask,
    write_sequence,
)
from cfachain.errors import ImageIOError, PatternError
from cfachain.imgseq import Image, Sequence

PATTERNS = [p.value for p in BayerPattern]


def rgb_planes(height=6, width=8):
    r = np.full((height, width), 10.0)
    g = np.full((height, width), 20.0)
    b = np.full((height, width), 30.0)
    return Image(np.stack([r, g, b], axis=-1))


class TestBayerPattern:
    def test_parse_is_case_insensitive(self):
        assert BayerPattern.parse("grbg") is BayerPattern.GRBG
        assert BayerPattern.parse(BayerPattern.BGGR) is BayerPattern.BGGR

    def test_unknown_pattern(self):
        with pytest.raises(PatternError):
            BayerPattern.parse("RGBW")

    def test_quad_sites(self):
        assert BayerPattern.RGGB.quad_sites == {"R": (0, 0), "G1": (0, 1), "G2": (1, 0), "B": (1, 1)}
        # G1 shares the red row
        assert BayerPattern.GRBG.quad_sites == {"G1": (0, 0), "R": (0, 1), "B": (1, 0), "G2": (1, 1)}
        assert BayerPattern.BGGR.quad_sites["G1"] == (1, 0)


class TestMosaic:
    def test_rggb_sites(self):
        cfa = mosaic(rgb_planes(), "RGGB")
        plane = cfa.img.plane
        assert plane[0, 0] == 10.0 and plane[0, 1] == 20.0
        assert plane[1, 0] == 20.0 and plane[1, 1] == 30.0

    def test_odd_dimensions(self):
        with pytest.raises(PatternError):
            mosaic(rgb_planes(5, 8), "RGGB")
        with pytest.raises(PatternError):
            CfaImage(Image(np.zeros((4, 3))), BayerPattern.RGGB)

    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_quad_round_trip(self, pattern, rng):
        cfa = CfaImage(Image(rng.uniform(0, 255, (8, 10))), pattern)
        quad = cfa_to_quad(cfa)
        assert quad.img.data.shape == (4, 5, 4)
        assert np.array_equal(quad_to_cfa(quad, pattern).img.data, cfa.img.data)

    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_quad_channels_carry_colors(self, pattern):
        quad = cfa_to_quad(mosaic(rgb_planes(), pattern))
        assert [float(quad.img.channel(i)[0, 0]) for i in range(4)] == [10.0, 20.0, 20.0, 30.0]

    def test_quad_needs_four_channels(self):
        with pytest.raises(ValueError):
            QuadImage(Image(np.zeros((2, 2, 3))))


class TestChannelMask:
    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_masks_partition_the_grid(self, pattern):
        masks = [channel_mask(pattern, c, 8, 6).plane for c in "RGB"]
        assert np.array_equal(sum(masks), np.ones((6, 8)))
        assert masks[1].sum() == 24
        # green forms a quincunx
        assert np.all(masks[1][:-1, :] + masks[1][1:, :] == 1)

    def test_unknown_channel(self):
        with pytest.raises(PatternError):
            channel_mask("RGGB", "W", 4, 4)


class TestNetpbm:
    def test_16_bit_gray_round_trip(self, tmp_path, rng):
        img = Image(rng.integers(0, 65536, (6, 8)).astype(float), range_hint=65535)
        path = write_image(tmp_path / "frame_0000.pgm", img, bitdepth=16)
        back = read_image(path)
        assert back.range_hint == 65535
        assert np.array_equal(back.data, img.data)

    def test_white_level_sets_range(self, tmp_path, rng):
        img = Image(rng.integers(0, 4096, (6, 8)).astype(float), range_hint=4095)
        write_sequence(tmp_path, Sequence((img, img)), bitdepth=16)
        back = read_sequence(tmp_path, white_level=4095)
        assert back.range_hint == 4095
        assert np.array_equal(back[0].data, img.data)
        assert read_sequence(tmp_path).range_hint == 65535

    def test_white_level_above_container(self, tmp_path):
        path = write_image(tmp_path / "a.pgm", Image(np.zeros((2, 2))), bitdepth=8)
        with pytest.raises(ImageIOError):
            read_image(path, white_level=4095)

    def test_8_bit_color_round_trip(self, tmp_path, rng):
        img = Image(rng.integers(0, 256, (4, 6, 3)).astype(float))
        path = write_image(tmp_path / "color", img, bitdepth=8)
        assert path.suffix == ".ppm"
        back = read_image(path)
        assert back.range_hint == 255
        assert np.array_equal(back.data, img.data)

    def test_out_of_range_rejected(self, tmp_path):
        with pytest.raises(ImageIOError):
            write_image(tmp_path / "a.pgm", Image(np.full((2, 2), 300.0)), bitdepth=8)

    def test_real_values_rejected(self, tmp_path):
        with pytest.raises(ImageIOError):
            write_image(tmp_path / "a.pgm", Image(np.full((2, 2), 1.5)), bitdepth=8)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ascii.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
        with pytest.raises(ImageIOError):
            read_image(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageIOError):
            read_image(tmp_path / "nope.pgm")

    def test_mask_is_stored_as_0_255(self, tmp_path):
        mask = channel_mask("RGGB", "R", 4, 4)
        back = read_image(write_mask(tmp_path / "mask.pgm", mask))
        assert set(np.unique(back.data)) == {0.0, 255.0}

    def test_sequence_round_trip_quantizes(self, tmp_path, rng):
        data = rng.uniform(-10, 270, (3, 4, 6))
        paths = write_sequence(tmp_path, Sequence.from_array(data), bitdepth=8)
        assert [p.name for p in paths] == ["frame_0000.pgm", "frame_0001.pgm", "frame_0002.pgm"]
        back = read_sequence(tmp_path)
        assert np.array_equal(back.stack()[..., 0], np.clip(np.round(data), 0, 255))

    def test_quantize(self):
        out = quantize(Image(np.array([[-3.2, 12.6], [70000.0, 5.0]])), bitdepth=16)
        assert out.plane.tolist() == [[0.0, 13.0], [65535.0, 5.0]]

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ImageIOError):
            read_sequence(tmp_path)
