"""
Spatio-Temporal Patch Denoiser
Motion-compensated patch-group PCA on stabilized (R, G1, G2, B) sequences, run per
YUVW component with groups selected on Y
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence as Seq, Tuple

import cv2
import numpy as np
from loguru import logger

from .cfa_io import CfaImage, cfa_to_quad, quad_to_cfa, QuadImage
from .colorspace import YUVW
from .config import DenoiseParams, FlowParams, OcclusionParams, PipelineConfig
from .errors import ImageError
from .flow import FlowField, Registration, flows_to_reference, make_registration, occlusion_mask, warp
from .imgseq import Accumulator, Image, Patch, PatchStack, Sequence, extract_patch, grid_positions
from .noise_model import (
    NoiseEstimator,
    NoiseModel,
    Stabilizer,
    build_stabilizer,
    calibrate_c,
    stabilize,
    unstabilize,
)
from .parallel import gather_threads, run_sync

# box size of the averaged post-warp difference used for the color occlusion test
COLOR_TEST_WINDOW = 5
TAU_MARGIN = 1.2
TILE_BANDS = 16


@dataclass(frozen=True)
class ExtendedPatch:
    """A reference patch and its motion-compensated copies, one per warped frame"""

    base: Patch
    members: Tuple[Patch, ...]

    @property
    def samples(self) -> np.ndarray:
        return np.stack([m.values for m in self.members])

    @property
    def size(self) -> int:
        return len(self.members) * self.base.side * self.base.side


@dataclass(frozen=True)
class PatchGroup:
    reference: ExtendedPatch
    origins: np.ndarray  # (K, 2) of (x, y), reference first
    distances: np.ndarray
    members: np.ndarray  # (K, M, side, side)

    @property
    def k(self) -> int:
        return len(self.origins)

    def flattened(self) -> np.ndarray:
        k, m, s, _ = self.members.shape
        return self.members.reshape(k * m, s * s)


def window_any(mask: np.ndarray, side: int) -> np.ndarray:
    """True at each patch origin whose side x side window holds a flagged pixel"""
    counts = np.pad(np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1), ((1, 0), (1, 0)))
    total = counts[side:, side:] - counts[:-side, side:] - counts[side:, :-side] + counts[:-side, :-side]
    return total > 0


def build_extended_patch(seq_warped: Sequence, origin: Tuple[int, int], side: int, ref_index: int = 0,
                         occlusion: Optional[Seq[np.ndarray]] = None, channel: int = 0) -> ExtendedPatch:
    """
    Stack the same window from every warped frame

    Members whose window touches an occluded pixel are replaced by the base patch.
    """
    ref = seq_warped[ref_index]
    plane = Image(ref.channel(channel), range_hint=ref.range_hint)
    base = extract_patch(plane, origin, side, ref_index)
    members = []
    for n, frame in enumerate(seq_warped):
        patch = extract_patch(Image(frame.channel(channel), range_hint=frame.range_hint), base.origin, side, n)
        if occlusion is not None and n != ref_index:
            x, y = base.origin
            if np.any(occlusion[n][y:y + side, x:x + side]):
                patch = Patch(base.origin, side, n, base.values.copy())
        members.append(patch)
    return ExtendedPatch(base=base, members=tuple(members))


def make_stack(planes: List[np.ndarray], side: int, ref_index: int,
               occlusion: Optional[Seq[np.ndarray]] = None) -> PatchStack:
    fallback = None
    if occlusion is not None:
        fallback = [window_any(m, side) for m in occlusion]
    return PatchStack(planes, side, fallback=fallback, base_index=ref_index)


def find_group(ref: ExtendedPatch, seq_warped: Sequence, params: DenoiseParams,
               stack: Optional[PatchStack] = None, occlusion: Optional[Seq[np.ndarray]] = None,
               channel: int = 0) -> PatchGroup:
    """
    K extended patches closest to ref by summed squared distance over all members

    Candidates are the origins within search_radius, scanned row-major; ties keep scan
    order. Fewer than K candidates means the whole window is returned.
    """
    ref_index = ref.base.frame_index
    if stack is None:
        stack = make_stack(seq_warped.planes(channel), ref.base.side, ref_index, occlusion)
    origins, dists = stack.nearest(ref.base.origin, params.k, params.search_radius)
    members = stack.gather(seq_warped.planes(channel), origins)
    return PatchGroup(reference=ref, origins=origins, distances=dists, members=members)


def auto_tau(side: int, group_size: int) -> float:
    """Just above the largest principal std a noise-only group of this shape produces"""
    return TAU_MARGIN * (1.0 + math.sqrt(side * side / group_size))


def pca_denoise_group(group, sigma: float, tau: float) -> np.ndarray:
    """
    Cancel the principal directions of a patch group whose std falls below tau * sigma

    Args:
        group: PatchGroup or an (n, d) array of patch vectors
        sigma: noise std of the group samples
        tau: threshold factor

    Returns:
        Denoised vectors in the input layout
    """
    if isinstance(group, PatchGroup):
        vectors = group.flattened()
        shape = group.members.shape
    else:
        vectors = np.asarray(group, dtype=np.float64)
        shape = vectors.shape
    if vectors.shape[0] == 0:
        raise ImageError("Cannot denoise an empty patch group")

    mean = vectors.mean(axis=0)
    centered = vectors - mean
    if not np.any(centered):
        return vectors.reshape(shape).copy()

    cov = centered.T @ centered / vectors.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    stds = np.sqrt(np.clip(evals, 0.0, None))
    cancel = stds < tau * sigma
    if not np.any(cancel):
        return vectors.reshape(shape).copy()
    coeffs = centered @ evecs
    coeffs[:, cancel] = 0.0
    return (coeffs @ evecs.T + mean).reshape(shape)


def _effective_k(params: DenoiseParams, members: int) -> int:
    dim = params.side * params.side
    if params.k * members > dim:
        return params.k
    k = dim // members + 1
    logger.warning(f"Denoiser: K={params.k} x M={members} <= {dim}, raising K to {k}")
    return k


def _window(n_frames: int, k: int, radius: Optional[int]) -> List[int]:
    if radius is None:
        return list(range(n_frames))
    return list(range(max(0, k - radius), min(n_frames, k + radius + 1)))


@dataclass
class _FrameContext:
    warped: Sequence  # YUVW frames registered on the reference
    ref_index: int
    occlusion: List[np.ndarray]
    stack: PatchStack
    params: DenoiseParams
    k: int
    tau: float


def _denoise_rows(ctx: _FrameContext, rows: List[int], cols: List[int]) -> Accumulator:
    """Denoise every reference patch in a band of grid rows"""
    side = ctx.params.side
    ref = ctx.warped[ctx.ref_index]
    acc = Accumulator.like(ref)
    planes = [ctx.warped.planes(ch) for ch in range(ref.channels)]
    for y in rows:
        for x in cols:
            origins, _ = ctx.stack.nearest((x, y), ctx.k, ctx.params.search_radius)
            for ch, ch_planes in enumerate(planes):
                members = ctx.stack.gather(ch_planes, origins)
                k, m, _, _ = members.shape
                denoised = pca_denoise_group(members.reshape(k * m, side * side), ctx.params.sigma, ctx.tau)
                denoised = denoised.reshape(k, m, side, side)
                for j, (ox, oy) in enumerate(origins):
                    acc.sum[oy:oy + side, ox:ox + side, ch] += denoised[j, ctx.ref_index]
            for ox, oy in origins:
                acc.weight[oy:oy + side, ox:ox + side] += 1.0
    return acc


async def denoise_frame_async(seq: Sequence, k: int, params: DenoiseParams,
                              flows: Optional[List[FlowField]] = None,
                              registration: Optional[Registration] = None,
                              occ: Optional[OcclusionParams] = None,
                              workers: int = 0) -> Image:
    if seq.channels != 4:
        raise ImageError(f"Denoiser needs 4-channel frames, got {seq.channels}")
    if not 0 <= k < len(seq):
        raise ImageError(f"Frame index {k} outside sequence of {len(seq)}")
    occ = occ or OcclusionParams()
    window = _window(len(seq), k, params.temporal_radius)
    ref_index = window.index(k)
    yuvw = [seq[n].with_data(YUVW.apply(seq[n].data)) for n in window]

    if flows is None:
        registration = registration or make_registration(FlowParams())
        planes = [frame.channel(0) for frame in yuvw]
        flows = await flows_to_reference(planes, ref_index, registration, workers)
    elif len(flows) != len(window):
        raise ImageError(f"{len(flows)} flows for a window of {len(window)} frames")

    warped = Sequence(tuple(warp(frame, flow) for frame, flow in zip(yuvw, flows)))
    ref = warped[ref_index]
    size = COLOR_TEST_WINDOW
    ref_smooth = ref.with_data(cv2.blur(ref.data, (size, size)).reshape(ref.data.shape))
    occlusion = []
    for n, (frame, flow) in enumerate(zip(warped, flows)):
        if n == ref_index:
            occlusion.append(np.zeros((ref.height, ref.width), dtype=bool))
            continue
        smooth = frame.with_data(cv2.blur(frame.data, (size, size)).reshape(frame.data.shape))
        mask = occlusion_mask(flow, ref_smooth, smooth, occ.tau_div, occ.tau_color_factor * params.sigma,
                              smoothing=occ.flow_smoothing, min_region=occ.min_region)
        logger.debug(f"frame {n}: {100.0 * mask.fraction:.1f}% occluded")
        occlusion.append(mask.mask)

    members = len(window)
    k_eff = _effective_k(params, members)
    tau = params.tau if params.tau is not None else auto_tau(params.side, k_eff * members)
    stack = make_stack(warped.planes(0), params.side, ref_index, occlusion)
    ctx = _FrameContext(warped, ref_index, occlusion, stack, params, k_eff, tau)

    rows = grid_positions(ref.height, params.side, params.step)
    cols = grid_positions(ref.width, params.side, params.step)
    # fixed band split keeps the merge order independent of the worker count
    n_bands = min(len(rows), TILE_BANDS)
    bands = [rows[i::n_bands] for i in range(n_bands)]
    partials = await gather_threads(lambda band: _denoise_rows(ctx, band, cols), bands, workers)
    acc = partials[0]
    for other in partials[1:]:
        acc.merge(other)
    out = acc.finalize(fallback=ref.data, range_hint=ref.range_hint)
    return out.with_data(YUVW.invert(out.data))


def denoise_frame(seq: Sequence, k: int, params: DenoiseParams, **kwargs) -> Image:
    """
    Denoise frame k of a stabilized 4-channel sequence

    Args:
        seq: (R, G1, G2, B) frames stabilized to noise std params.sigma
        k: reference frame index
        params: patch, group and threshold settings
        **kwargs: flows, registration, occ, workers

    Returns:
        Denoised frame k in (R, G1, G2, B)
    """
    return run_sync(denoise_frame_async(seq, k, params, **kwargs))


class SequenceDenoiser:
    """Applies denoise_frame to every frame of a stabilized sequence"""

    def __init__(self, params: Optional[DenoiseParams] = None, flow_params: Optional[FlowParams] = None,
                 occ: Optional[OcclusionParams] = None, workers: int = 0):
        self.stage_name = "SequenceDenoiser"
        self.params = params or DenoiseParams()
        self.registration = make_registration(flow_params)
        self.occ = occ or OcclusionParams()
        self.workers = workers
        logger.info(f"{self.stage_name} initialized (side={self.params.side}, K={self.params.k})")

    async def denoise(self, seq: Sequence) -> Sequence:
        out = []
        for k in range(len(seq)):
            logger.info(f"{self.stage_name}: frame {k + 1}/{len(seq)}")
            out.append(
                await denoise_frame_async(
                    seq, k, self.params, registration=self.registration, occ=self.occ, workers=self.workers
                )
            )
        logger.success(f"{self.stage_name}: {len(seq)} frames denoised")
        return Sequence(tuple(out))


class CfaDenoiser:
    """
    Full CFA denoising stage

    CFA -> quad channels -> noise model -> stabilization -> patch-group denoising ->
    inverse stabilization -> CFA
    """

    def __init__(self, cfg: Optional[PipelineConfig] = None):
        self.stage_name = "CfaDenoiser"
        self.cfg = cfg or PipelineConfig()
        self.state: Dict[str, object] = {}
        logger.info(f"{self.stage_name} initialized (noise={self.cfg.noise.mode})")

    def noise_model(self, quads: Sequence) -> NoiseModel:
        data = quads.stack()
        if self.cfg.noise.mode == "fixed":
            lo, hi = float(data.min()), float(data.max())
            if hi <= lo:
                hi = lo + 1.0
            return NoiseModel.constant(self.cfg.noise.sigma, channels=4, value_range=(lo, hi))
        model, observations = NoiseEstimator(self.cfg.noise.bins).estimate(quads)
        self.state["observations"] = observations
        return model

    def stabilizers(self, model: NoiseModel, quads: Sequence) -> Tuple[List[Stabilizer], float]:
        data = quads.stack()
        value_range = (float(data.min()), float(data.max()))
        c = self.cfg.noise.c or calibrate_c(list(model.channels), value_range)
        return [build_stabilizer(curve, c) for curve in model.channels], c

    async def denoise(self, cfa_seq: List[CfaImage]) -> List[CfaImage]:
        if not cfa_seq:
            raise ImageError("Empty CFA sequence")
        pattern = cfa_seq[0].pattern
        quads = Sequence(tuple(cfa_to_quad(cfa).img for cfa in cfa_seq))
        model = self.noise_model(quads)
        if self.cfg.noise.mode == "fixed" and self.cfg.noise.sigma == 0:
            logger.warning(f"{self.stage_name}: noise sigma is 0, nothing to denoise")
            return list(cfa_seq)
        stabilizers, c = self.stabilizers(model, quads)
        logger.info(f"{self.stage_name}: stabilized noise std c = {c:.4f}")

        stabilized = Sequence(tuple(stabilize(q, stabilizers) for q in quads))
        params = self.cfg.denoise.model_copy(update={"sigma": c})
        denoiser = SequenceDenoiser(params, self.cfg.flow, self.cfg.occlusion, self.cfg.workers)
        denoised = await denoiser.denoise(stabilized)

        self.state.update({"model": model, "c": c, "yuvw": np.stack([YUVW.apply(f.data) for f in denoised])})
        result = [
            quad_to_cfa(QuadImage(unstabilize(frame, stabilizers)), pattern) for frame in denoised
        ]
        logger.success(f"{self.stage_name}: {len(result)} CFA frames denoised")
        return result


def denoise_sequence(cfa_seq: List[CfaImage], cfg: Optional[PipelineConfig] = None) -> List[CfaImage]:
    return run_sync(CfaDenoiser(cfg).denoise(cfa_seq))
