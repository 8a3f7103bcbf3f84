import numpy as np
import pytest

from cfachain.config import FlowParams, OcclusionParams
from cfachain.errors import FlowError, ImageIOError
from cfachain.flow import (
    FlowField,
    GlobalShiftRegistration,
    TVL1Registration,
    divergence,
    flows_to_reference,
    make_registration,
    occlusion_mask,
    read_flo,
    tvl1_flow,
    warp,
    write_flo,
)
from cfachain.imgseq import Image

MARGIN = 16


def interior(a):
    return a[MARGIN:-MARGIN, MARGIN:-MARGIN]


class TestFlowField:
    def test_rejects_mismatched_components(self):
        with pytest.raises(FlowError):
            FlowField(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_rejects_nan(self):
        u = np.zeros((2, 2))
        u[0, 0] = np.nan
        with pytest.raises(FlowError):
            FlowField(u, np.zeros((2, 2)))

    def test_constant(self):
        flow = FlowField.constant(3, 4, 1.0, -2.0)
        assert flow.shape == (3, 4)
        assert flow.mean_shift() == (1.0, -2.0)
        assert np.all(flow.u == 1.0) and np.all(flow.v == -2.0)


class TestTVL1:
    def test_identical_frames_give_zero_flow(self, texture_factory, renderer):
        img = renderer(texture_factory(seed=2), 48, 48)
        flow = tvl1_flow(img, img)
        assert np.all(flow.u == 0) and np.all(flow.v == 0)

    def test_translation(self, texture_factory, renderer):
        texture = texture_factory(seed=4, amplitude=20.0)
        src = renderer(texture, 96, 96)
        dst = renderer(texture, 96, 96, dx=3.0, dy=2.0)
        flow = tvl1_flow(src, dst)
        epe = np.hypot(flow.u - 3.0, flow.v - 2.0)
        assert interior(epe).mean() < 0.25

    def test_subpixel_translation(self, texture_factory, renderer):
        texture = texture_factory(seed=5, amplitude=20.0)
        src = renderer(texture, 80, 80)
        dst = renderer(texture, 80, 80, dx=-0.5, dy=1.25)
        flow = tvl1_flow(src, dst)
        assert interior(flow.u).mean() == pytest.approx(-0.5, abs=0.1)
        assert interior(flow.v).mean() == pytest.approx(1.25, abs=0.1)

    @pytest.mark.slow
    def test_rotation(self, texture_factory):
        texture = texture_factory(seed=6, amplitude=20.0)
        size = 128
        c = (size - 1) / 2.0
        y, x = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
        angle = np.deg2rad(1.0)
        cos, sin = np.cos(angle), np.sin(angle)
        src = texture(x, y)
        # dst(R(p - c) + c) = src(p)
        dst = texture(cos * (x - c) + sin * (y - c) + c, -sin * (x - c) + cos * (y - c) + c)
        true_u = cos * (x - c) - sin * (y - c) + c - x
        true_v = sin * (x - c) + cos * (y - c) + c - y

        flow = tvl1_flow(src, dst)
        num = flow.u * true_u + flow.v * true_v + 1.0
        den = np.sqrt((flow.u ** 2 + flow.v ** 2 + 1.0) * (true_u ** 2 + true_v ** 2 + 1.0))
        angular = np.degrees(np.arccos(np.clip(num / den, -1.0, 1.0)))
        assert interior(angular).mean() < 5.0

    def test_size_mismatch(self):
        with pytest.raises(FlowError):
            tvl1_flow(np.zeros((16, 16)), np.zeros((16, 18)))

    def test_small_frames_use_fewer_scales(self, log_messages, texture_factory, renderer):
        img = renderer(texture_factory(seed=1), 32, 32)
        tvl1_flow(img, renderer(texture_factory(seed=1), 32, 32, dx=1.0))
        assert any("pyramid scales" in m for m in log_messages)

    def test_registration_strategies(self, texture_factory, renderer):
        texture = texture_factory(seed=7, amplitude=20.0)
        src = renderer(texture, 64, 64)
        dst = renderer(texture, 64, 64, dx=1.0, dy=-1.0)
        assert isinstance(make_registration(FlowParams(registration="tvl1")), TVL1Registration)
        reg = make_registration(FlowParams(registration="global"))
        assert isinstance(reg, GlobalShiftRegistration)
        flow = reg.estimate(src, dst)
        assert np.all(flow.u == flow.u[0, 0]) and np.all(flow.v == flow.v[0, 0])
        assert flow.u[0, 0] == pytest.approx(1.0, abs=0.2)
        assert flow.v[0, 0] == pytest.approx(-1.0, abs=0.2)

    @pytest.mark.asyncio
    async def test_flows_to_reference(self, texture_factory, renderer):
        texture = texture_factory(seed=8)
        planes = [renderer(texture, 32, 32, dx=float(n)) for n in range(3)]
        flows = await flows_to_reference(planes, 1, TVL1Registration(), workers=2)
        assert len(flows) == 3
        assert np.all(flows[1].u == 0) and np.all(flows[1].v == 0)


class TestWarp:
    def ramp(self, size=48):
        y, x = np.mgrid[0:size, 0:size].astype(float)
        return Image(2.0 * x + 3.0 * y)

    def test_zero_flow_is_identity(self, rng):
        img = Image(rng.uniform(0, 255, (12, 10, 3)))
        assert np.array_equal(warp(img, FlowField.zeros(12, 10)).data, img.data)

    def test_integer_flow(self):
        img = self.ramp()
        out = warp(img, FlowField.constant(48, 48, 1.0, 0.0))
        assert np.array_equal(out.plane[:, :-1], img.plane[:, :-1] + 2.0)

    def test_half_pixel_on_ramp(self):
        img = self.ramp()
        out = warp(img, FlowField.constant(48, 48, 0.5, 0.0))
        assert np.max(np.abs(interior(out.plane) - interior(img.plane) - 1.0)) < 1e-6

    def test_size_mismatch(self):
        with pytest.raises(FlowError):
            warp(Image(np.zeros((4, 4))), FlowField.zeros(4, 5))


class TestOcclusion:
    def test_divergence_of_linear_field(self):
        y, x = np.mgrid[0:10, 0:12].astype(float)
        assert np.allclose(divergence(FlowField(x, y)), 2.0)

    def test_converging_disk(self):
        size, radius = 40, 10
        c = size / 2.0
        y, x = np.mgrid[0:size, 0:size].astype(float)
        dist = np.hypot(x - c, y - c)
        inside = dist < radius
        flow = FlowField(np.where(inside, -(x - c), 0.0), np.where(inside, -(y - c), 0.0))
        img = Image(np.zeros((size, size)))
        mask = occlusion_mask(flow, img, img, tau_div=1.0, tau_color=1e9).mask
        assert np.all(mask[dist < radius - 2])
        assert not np.any(mask[dist > radius + 2])

    def test_color_block(self):
        ref = Image(np.zeros((20, 20, 3)))
        warped = np.zeros((20, 20, 3))
        warped[5:10, 5:10, 1] = 100.0
        mask = occlusion_mask(FlowField.zeros(20, 20), ref, Image(warped), tau_color=30.0).mask
        assert np.all(mask[5:10, 5:10])
        assert mask.sum() == 25

    def test_lower_thresholds_flag_more(self, rng):
        flow = FlowField(rng.normal(0, 2, (24, 24)), rng.normal(0, 2, (24, 24)))
        ref = Image(rng.uniform(0, 255, (24, 24)))
        warped = Image(rng.uniform(0, 255, (24, 24)))
        strict = occlusion_mask(flow, ref, warped, tau_div=2.0, tau_color=100.0).mask
        loose = occlusion_mask(flow, ref, warped, tau_div=0.5, tau_color=30.0).mask
        assert np.all(loose[strict])
        assert loose.sum() > strict.sum()

    def test_smoothing_drops_flow_noise(self, rng):
        flow = FlowField(rng.normal(0, 0.3, (48, 48)), rng.normal(0, 0.3, (48, 48)))
        img = Image(np.zeros((48, 48)))
        raw = occlusion_mask(flow, img, img, tau_div=0.5, tau_color=1e9)
        cleaned = occlusion_mask(flow, img, img, tau_div=0.5, tau_color=1e9, smoothing=1.5, min_region=3)
        assert raw.fraction > 0.02
        assert cleaned.fraction < 0.005

    def test_opening_keeps_converging_disk(self):
        size, radius = 40, 10
        c = size / 2.0
        y, x = np.mgrid[0:size, 0:size].astype(float)
        dist = np.hypot(x - c, y - c)
        inside = dist < radius
        flow = FlowField(np.where(inside, -(x - c), 0.0), np.where(inside, -(y - c), 0.0))
        img = Image(np.zeros((size, size)))
        mask = occlusion_mask(flow, img, img, tau_div=1.0, tau_color=1e9, min_region=3).mask
        assert np.all(mask[dist < radius - 3])
        assert not np.any(mask[dist > radius + 2])

    def test_noisy_translation_is_not_occluded(self, texture_factory, renderer):
        texture = texture_factory(seed=8, amplitude=20.0)
        noise = np.random.default_rng(5)
        src = renderer(texture, 64, 64) + 10.0 * noise.standard_normal((64, 64))
        dst = renderer(texture, 64, 64, dx=1.0, dy=1.0) + 10.0 * noise.standard_normal((64, 64))
        flow = tvl1_flow(src, dst)
        ref = Image(src)
        warped = warp(Image(dst), flow)
        occ = OcclusionParams()
        raw = occlusion_mask(flow, ref, warped, occ.tau_div, tau_color=1e9)
        cleaned = occlusion_mask(flow, ref, warped, occ.tau_div, tau_color=1e9,
                                 smoothing=occ.flow_smoothing, min_region=occ.min_region)
        assert cleaned.fraction < 0.02
        assert cleaned.fraction <= raw.fraction


class TestFloFiles:
    def test_round_trip(self, tmp_path):
        u = np.arange(12, dtype=float).reshape(3, 4) * 0.5
        flow = FlowField(u, -u)
        back = read_flo(write_flo(tmp_path / "f.flo", flow))
        assert np.array_equal(back.u, flow.u) and np.array_equal(back.v, flow.v)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(b"\x00" * 32)
        with pytest.raises(ImageIOError):
            read_flo(path)

    def test_truncated(self, tmp_path):
        path = write_flo(tmp_path / "t.flo", FlowField.zeros(4, 4))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ImageIOError):
            read_flo(path)
