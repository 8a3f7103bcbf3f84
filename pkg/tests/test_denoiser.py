import math

import numpy as np
import pytest

from cfachain.cfa_io import cfa_to_quad, mosaic
from cfachain.config import DenoiseParams, PipelineConfig
from cfachain.denoiser import (
    CfaDenoiser,
    PatchGroup,
    SequenceDenoiser,
    auto_tau,
    build_extended_patch,
    denoise_frame,
    find_group,
    pca_denoise_group,
    window_any,
)
from cfachain.errors import ImageError
from cfachain.flow import FlowField
from cfachain.imgseq import Image, Sequence, rmse


def zero_flows(n, height, width):
    return [FlowField.zeros(height, width) for _ in range(n)]


def static_quads(texture, frames, size, noise=0.0, seed=0):
    """4-channel static sequence of one texture, optionally with white noise"""
    y, x = np.mgrid[0:size, 0:size].astype(float)
    g = texture(x, y)
    clean = np.stack([0.9 * g + 10, g, g + 0.5, 0.8 * g + 20], axis=-1)
    rng = np.random.default_rng(seed)
    data = np.stack([clean + noise * rng.standard_normal(clean.shape) for _ in range(frames)])
    return Sequence.from_array(data), clean


class TestExtendedPatch:
    def test_identical_frames(self, rng):
        plane = rng.normal(size=(12, 12))
        seq = Sequence.from_array(np.stack([plane] * 3))
        ext = build_extended_patch(seq, (2, 3), 4)
        assert ext.size == 3 * 16
        for member in ext.members:
            assert np.array_equal(member.values, ext.base.values)

    def test_single_frame(self, rng):
        seq = Sequence.from_array(rng.normal(size=(1, 8, 8)))
        ext = build_extended_patch(seq, (1, 1), 4)
        assert len(ext.members) == 1
        assert np.array_equal(ext.samples[0], ext.base.values)

    def test_occluded_member_falls_back(self, rng):
        seq = Sequence.from_array(rng.normal(size=(3, 10, 10)))
        occlusion = [np.zeros((10, 10), dtype=bool) for _ in range(3)]
        occlusion[2][4, 4] = True
        ext = build_extended_patch(seq, (3, 3), 4, occlusion=occlusion)
        assert np.array_equal(ext.members[2].values, ext.base.values)
        assert not np.array_equal(ext.members[1].values, ext.base.values)

    def test_window_any(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[2, 3] = True
        hits = window_any(mask, 2)
        assert hits.shape == (5, 5)
        assert set(zip(*np.nonzero(hits))) == {(1, 2), (1, 3), (2, 2), (2, 3)}


class TestFindGroup:
    def brute_force(self, planes, side, origin, radius, k):
        x, y = origin
        limit = planes[0].shape[0] - side
        scored = []
        for oy in range(max(0, y - radius), min(limit, y + radius) + 1):
            for ox in range(max(0, x - radius), min(limit, x + radius) + 1):
                d = sum(np.sum((p[oy:oy + side, ox:ox + side] - p[y:y + side, x:x + side]) ** 2) for p in planes)
                scored.append((d, len(scored), (ox, oy)))
        scored.sort()
        return [s[2] for s in scored[:k]]

    def test_matches_brute_force(self, rng):
        planes = rng.normal(size=(3, 16, 16))
        seq = Sequence.from_array(planes)
        params = DenoiseParams(side=4, k=4, search_radius=21)
        for origin in [(0, 0), (5, 7), (12, 12)]:
            group = find_group(build_extended_patch(seq, origin, 4), seq, params)
            assert [tuple(o) for o in group.origins] == self.brute_force(list(planes), 4, origin, 21, 4)
            assert group.members.shape == (4, 3, 4, 4)

    def test_k1_is_reference(self, rng):
        seq = Sequence.from_array(rng.normal(size=(2, 12, 12)))
        ref = build_extended_patch(seq, (4, 4), 4)
        group = find_group(ref, seq, DenoiseParams(side=4, k=1))
        assert group.k == 1
        assert tuple(group.origins[0]) == (4, 4)
        assert group.distances[0] == 0.0
        assert np.array_equal(group.members[0, 0], ref.base.values[:, :, 0])

    def test_identical_frames_scale_distance(self, rng):
        plane = rng.normal(size=(12, 12))
        single = Sequence.from_array(plane[np.newaxis])
        triple = Sequence.from_array(np.stack([plane] * 3))
        params = DenoiseParams(side=4, k=5, search_radius=3)
        one = find_group(build_extended_patch(single, (4, 4), 4), single, params)
        three = find_group(build_extended_patch(triple, (4, 4), 4), triple, params)
        assert np.array_equal(one.origins, three.origins)
        assert np.allclose(three.distances, 3 * one.distances)

    def test_small_window_returns_all(self, rng):
        seq = Sequence.from_array(rng.normal(size=(1, 5, 5)))
        group = find_group(build_extended_patch(seq, (0, 0), 4), seq, DenoiseParams(side=4, k=16))
        assert group.k == 4


class TestPCA:
    def test_identical_patches_unchanged(self):
        vectors = np.tile(np.arange(4.0), (6, 1))
        assert np.array_equal(pca_denoise_group(vectors, sigma=5.0, tau=1.0), vectors)

    def test_toy_group_keeps_principal_direction(self):
        vectors = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
        out = pca_denoise_group(vectors, sigma=0.1, tau=1.0)
        assert np.max(np.abs(out - vectors)) < 1e-12

    def test_toy_group_collapses_above_threshold(self):
        vectors = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
        out = pca_denoise_group(vectors, sigma=1.0, tau=math.sqrt(2.0 / 3.0) + 0.01)
        assert np.allclose(out, 0.0, atol=1e-12)

    def test_mean_preserved_and_energy_contracted(self, rng):
        vectors = rng.normal(size=(40, 9)) + rng.normal(size=9) * 5
        out = pca_denoise_group(vectors, sigma=1.0, tau=1.0)
        mean = vectors.mean(axis=0)
        assert np.allclose(out.mean(axis=0), mean)
        assert np.linalg.norm(out - mean) <= np.linalg.norm(vectors - mean) + 1e-9

    def test_group_layout_preserved(self, rng):
        members = rng.normal(size=(3, 2, 4, 4))
        group = PatchGroup(reference=None, origins=np.zeros((3, 2)), distances=np.zeros(3), members=members)
        assert pca_denoise_group(group, 1.0, 1.0).shape == members.shape

    def test_empty_group(self):
        with pytest.raises(ImageError):
            pca_denoise_group(np.empty((0, 4)), 1.0, 1.0)

    def test_auto_tau(self):
        assert auto_tau(8, 128) == pytest.approx(1.2 * (1 + math.sqrt(0.5)))


class TestDenoiseFrame:
    def test_zero_noise_static_sequence(self, texture_factory):
        seq, _ = static_quads(texture_factory(seed=3), frames=4, size=32)
        params = DenoiseParams(sigma=0.0)
        out = denoise_frame(seq, 1, params, flows=zero_flows(4, 32, 32))
        assert np.max(np.abs(out.data - seq[1].data)) < 1e-4 * np.max(np.abs(seq[1].data))

    def test_flat_sequence_unit_noise(self):
        rng = np.random.default_rng(21)
        data = 100.0 + rng.standard_normal((8, 64, 64, 4))
        seq = Sequence.from_array(data)
        out = denoise_frame(seq, 4, DenoiseParams(sigma=1.0), flows=zero_flows(8, 64, 64))
        assert np.std(out.data - 100.0) < 0.15

    def test_group_size_is_inflated(self, log_messages, texture_factory):
        seq, _ = static_quads(texture_factory(seed=2), frames=2, size=16, noise=1.0)
        denoise_frame(seq, 0, DenoiseParams(sigma=1.0), flows=zero_flows(2, 16, 16))
        assert any("raising K to 33" in m for m in log_messages)

    def test_temporal_radius_limits_flows(self, texture_factory):
        seq, _ = static_quads(texture_factory(seed=2), frames=5, size=16, noise=1.0)
        params = DenoiseParams(sigma=1.0, temporal_radius=1)
        out = denoise_frame(seq, 2, params, flows=zero_flows(3, 16, 16))
        assert out.data.shape == (16, 16, 4)
        with pytest.raises(ImageError):
            denoise_frame(seq, 2, params, flows=zero_flows(5, 16, 16))

    def test_bad_inputs(self):
        seq = Sequence.from_array(np.zeros((2, 16, 16, 3)))
        with pytest.raises(ImageError):
            denoise_frame(seq, 0, DenoiseParams())
        seq4 = Sequence.from_array(np.zeros((2, 16, 16, 4)))
        with pytest.raises(ImageError):
            denoise_frame(seq4, 2, DenoiseParams())

    @pytest.mark.slow
    def test_reduces_error_with_estimated_flow(self, texture_factory):
        noisy, clean = static_quads(texture_factory(seed=9), frames=5, size=48, noise=1.0, seed=4)
        out = denoise_frame(noisy, 2, DenoiseParams(sigma=1.0))
        assert rmse(out, Image(clean)) < rmse(noisy[2], Image(clean))

    @pytest.mark.asyncio
    async def test_sequence_denoiser(self, texture_factory):
        seq, _ = static_quads(texture_factory(seed=1), frames=3, size=16, noise=1.0)
        out = await SequenceDenoiser(DenoiseParams(sigma=1.0, k=24)).denoise(seq)
        assert len(out) == 3
        assert out.channels == 4


class TestCfaDenoiser:
    @pytest.mark.asyncio
    async def test_zero_sigma_passes_through(self, color_sequence):
        cfa_seq = [mosaic(f, "RGGB") for f in color_sequence(0, 2, 16, 16)]
        cfg = PipelineConfig(noise={"mode": "fixed", "sigma": 0.0})
        out = await CfaDenoiser(cfg).denoise(cfa_seq)
        assert all(a is b for a, b in zip(out, cfa_seq))

    @pytest.mark.slow
    @pytest.mark.asyncio
    async def test_fixed_sigma_reduces_error(self, color_sequence):
        clean = [mosaic(f, "GRBG") for f in color_sequence(2, 4, 48, 48, amplitude=6.0, periods=(20.0, 60.0))]
        rng = np.random.default_rng(8)
        noisy = [type(c)(c.img.with_data(c.img.data + 5.0 * rng.standard_normal(c.img.data.shape)), c.pattern)
                 for c in clean]
        cfg = PipelineConfig(noise={"mode": "fixed", "sigma": 5.0})
        denoiser = CfaDenoiser(cfg)
        out = await denoiser.denoise(noisy)
        assert [o.pattern for o in out] == [c.pattern for c in clean]
        assert denoiser.state["c"] > 0
        assert denoiser.state["yuvw"].shape == (4, 24, 24, 4)
        before = np.mean([rmse(n.img, c.img) for n, c in zip(noisy, clean)])
        after = np.mean([rmse(o.img, c.img) for o, c in zip(out, clean)])
        assert after < before

    @pytest.mark.slow
    def test_auto_noise_model_records_observations(self, color_sequence):
        clean = [mosaic(f, "RGGB") for f in color_sequence(3, 4, 64, 64)]
        rng = np.random.default_rng(2)
        noisy = [type(c)(c.img.with_data(c.img.data + 3.0 * rng.standard_normal(c.img.data.shape)), c.pattern)
                 for c in clean]
        denoiser = CfaDenoiser(PipelineConfig())
        quads = Sequence(tuple(cfa_to_quad(c).img for c in noisy))
        model = denoiser.noise_model(quads)
        assert len(model) == 4
        assert "observations" in denoiser.state
