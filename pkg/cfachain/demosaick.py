"""
Spatio-Temporal Demosaicking
Directional single-frame initialization refined by motion-compensated, mask-aware
patch averaging (green first, then red-green and blue-green differences)
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy import ndimage

from .cfa_io import CfaImage, DecimationMask, channel_mask
from .colorspace import rgb_to_yuv
from .config import FlowParams, InterpConfig
from .errors import ImageError
from .flow import FlowField, Registration, flows_to_reference, make_registration
from .imgseq import Accumulator, Image, PatchStack, Sequence, grid_positions
from .parallel import gather_threads, run_sync

DIRECTIONS = ("N", "S", "E", "W")
# (dy, dx) towards the neighbor each direction interpolates from
_STEPS = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}

BILINEAR_KERNEL = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])
TILE_BANDS = 16

SigmaFn = Callable[[float], float]


@dataclass(frozen=True)
class DirectionalEstimate:
    images: Tuple[Image, ...]  # full-color N, S, E, W reconstructions
    choice: np.ndarray  # per-pixel index into DIRECTIONS

    @property
    def final(self) -> Image:
        stacked = np.stack([img.data for img in self.images])
        picked = np.take_along_axis(stacked, self.choice[np.newaxis, :, :, np.newaxis], axis=0)[0]
        return self.images[0].with_data(picked)


def _shift(padded: np.ndarray, dy: int, dx: int, pad: int, shape) -> np.ndarray:
    height, width = shape
    return padded[pad + dy:pad + dy + height, pad + dx:pad + dx + width]


def _normalized_interp(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    num = ndimage.convolve(values * mask, BILINEAR_KERNEL, mode="mirror")
    den = ndimage.convolve(mask, BILINEAR_KERNEL, mode="mirror")
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def chroma_variation(img: Image) -> np.ndarray:
    """Sum over a 3x3 window of |grad U| + |grad V| in orthonormal YUV"""
    yuv = rgb_to_yuv(img.data)
    total = np.zeros(yuv.shape[:2])
    for ch in (1, 2):
        gy, gx = np.gradient(yuv[:, :, ch])
        total += np.abs(gx) + np.abs(gy)
    return ndimage.convolve(total, np.ones((3, 3)), mode="mirror")


def directional_estimates(cfa: CfaImage) -> DirectionalEstimate:
    """
    Four directional reconstructions of a CFA frame and the per-pixel choice among them

    Green at red/blue sites follows a second-order corrected neighbor, e.g. east:
    G(x+1) + (C(x) - C(x+2)) / 2. Red and blue come from bilinear interpolation of the
    G - R and G - B differences.
    """
    plane = cfa.img.plane
    shape = plane.shape
    width, height = cfa.width, cfa.height
    m_r = channel_mask(cfa.pattern, "R", width, height).plane
    m_g = channel_mask(cfa.pattern, "G", width, height).plane
    m_b = channel_mask(cfa.pattern, "B", width, height).plane

    pad = 2
    # reflect padding keeps the Bayer parity of mirrored samples
    padded = np.pad(plane, pad, mode="reflect")
    images = []
    for name in DIRECTIONS:
        dy, dx = _STEPS[name]
        near = _shift(padded, dy, dx, pad, shape)
        far = _shift(padded, 2 * dy, 2 * dx, pad, shape)
        green = np.where(m_g > 0, plane, near + (plane - far) / 2.0)
        red = green - _normalized_interp(green - plane, m_r)
        blue = green - _normalized_interp(green - plane, m_b)
        images.append(Image(np.stack([red, green, blue], axis=-1), range_hint=cfa.img.range_hint))

    variation = np.stack([chroma_variation(img) for img in images])
    choice = np.argmin(variation, axis=0)
    return DirectionalEstimate(images=tuple(images), choice=choice)


def directional_init(cfa: CfaImage) -> Image:
    return directional_estimates(cfa).final


# ---------------------------------------------------------------------------
# weighted patch interpolation
# ---------------------------------------------------------------------------

def patch_weights(ref_guide: np.ndarray, guides: np.ndarray, h: float) -> np.ndarray:
    """exp(-||g_ref - g||^2 / h^2) per candidate; the leading axes of guides are kept"""
    diff = guides - ref_guide
    d2 = np.sum(diff * diff, axis=(-2, -1))
    return np.exp(-d2 / (h * h))


def nonlocal_patch_estimate(ref_guide: np.ndarray, guides: np.ndarray, values: np.ndarray,
                            masks: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Masked, similarity-weighted average of candidate patches

    Args:
        ref_guide: (s, s) guide window of the reference patch
        guides: (..., s, s) guide windows of the candidates
        values: (..., s, s) candidate samples
        masks: (..., s, s) 1 where the candidate sample is an original CFA sample
        h: similarity bandwidth in patch-norm units

    Returns:
        (estimate, normalization); estimate is 0 where normalization is 0
    """
    if h <= 0:
        raise ImageError(f"h must be positive, got {h}")
    side = ref_guide.shape[-1]
    w = patch_weights(ref_guide, guides, h).reshape(-1, 1, 1)
    values = values.reshape(-1, side, side)
    masks = masks.reshape(-1, side, side)
    num = np.sum(w * masks * values, axis=0)
    norm = np.sum(w * masks, axis=0)
    estimate = np.where(norm > 0, num / np.where(norm > 0, norm, 1.0), 0.0)
    return estimate, norm


def _center_shifts(flow: FlowField, side: int) -> np.ndarray:
    """Integer (dy, dx) per patch origin from the flow at the patch center"""
    height, width = flow.shape
    half = side // 2
    grid_h, grid_w = height - side + 1, width - side + 1
    u = flow.u[half:half + grid_h, half:half + grid_w]
    v = flow.v[half:half + grid_h, half:half + grid_w]
    return np.stack([np.rint(v), np.rint(u)], axis=-1).astype(np.int64)


def _bandwidth(cfg: InterpConfig, ref_guide: np.ndarray, sigma_fn: Optional[SigmaFn]) -> float:
    if cfg.h is not None:
        return cfg.h
    sigma = cfg.residual_sigma
    if sigma_fn is not None:
        # aliasing keeps a floor under the bandwidth even on clean frames
        sigma = max(float(sigma_fn(float(ref_guide.mean()))), cfg.residual_sigma)
    return cfg.h_factor * sigma * cfg.side


def _interp_rows(stack: PatchStack, tilde: List[np.ndarray], masks: List[np.ndarray], ref_index: int,
                 cfg: InterpConfig, sigma_fn: Optional[SigmaFn], rows: List[int], cols: List[int]) -> Accumulator:
    side = cfg.side
    height, width = tilde[ref_index].shape
    acc = Accumulator(height, width, 1)
    ref_guide_plane = stack.frames[ref_index]
    ref_tilde = tilde[ref_index]
    for y in rows:
        for x in cols:
            origins, _ = stack.nearest((x, y), cfg.k, cfg.search_radius)
            ref_guide = ref_guide_plane[y:y + side, x:x + side]
            guides = stack.gather(stack.frames, origins)
            values = stack.gather(tilde, origins)
            member_masks = stack.gather(masks, origins)
            estimate, norm = nonlocal_patch_estimate(
                ref_guide, guides, values, member_masks, _bandwidth(cfg, ref_guide, sigma_fn)
            )
            estimate = np.where(norm > 0, estimate, ref_tilde[y:y + side, x:x + side])
            acc.add((x, y), estimate)
    return acc


async def st_interpolate_async(tilde_seq: Sequence, guide_seq: Sequence, mask: DecimationMask,
                               flows: List[FlowField], cfg: InterpConfig, ref_index: int,
                               sigma_fn: Optional[SigmaFn] = None, workers: int = 0) -> Image:
    if len(tilde_seq) == 0 or len(guide_seq) != len(tilde_seq):
        raise ImageError("tilde and guide sequences must be non-empty and of equal length")
    if tilde_seq.channels != 1 or guide_seq.channels != 1:
        raise ImageError("st_interpolate works on single-channel sequences")
    shape = (tilde_seq.height, tilde_seq.width)
    if mask.plane.shape != shape or (guide_seq.height, guide_seq.width) != shape:
        raise ImageError(f"Mask {mask.plane.shape} or guide does not match frames {shape}")
    if len(flows) != len(tilde_seq):
        raise ImageError(f"{len(flows)} flows for {len(tilde_seq)} frames")
    if not 0 <= ref_index < len(tilde_seq):
        raise ImageError(f"Reference index {ref_index} outside sequence")

    shifts = [_center_shifts(flow, cfg.side) for flow in flows]
    stack = PatchStack(guide_seq.planes(0), cfg.side, shifts=shifts)
    tilde = tilde_seq.planes(0)
    masks = [mask.plane] * len(tilde_seq)

    rows = grid_positions(shape[0], cfg.side, cfg.step)
    cols = grid_positions(shape[1], cfg.side, cfg.step)
    n_bands = min(len(rows), TILE_BANDS)
    bands = [rows[i::n_bands] for i in range(n_bands)]
    partials = await gather_threads(
        lambda band: _interp_rows(stack, tilde, masks, ref_index, cfg, sigma_fn, band, cols), bands, workers
    )
    acc = partials[0]
    for other in partials[1:]:
        acc.merge(other)
    ref = tilde_seq[ref_index]
    return acc.finalize(fallback=ref.data, range_hint=ref.range_hint)


def st_interpolate(tilde_seq: Sequence, guide_seq: Sequence, mask: DecimationMask, flows: List[FlowField],
                   cfg: InterpConfig, ref_index: int, sigma_fn: Optional[SigmaFn] = None,
                   workers: int = 0) -> Image:
    """
    Refine frame ref_index by averaging original samples of similar motion-compensated patches

    Args:
        tilde_seq: fully interpolated single-channel frames
        guide_seq: frames the patch similarity is measured on
        mask: 1 at the original samples of the channel
        flows: flow from the reference guide frame to every frame
        cfg: patch side, K, search radius and bandwidth
        ref_index: frame to refine
        sigma_fn: noise std at an intensity, used for the default bandwidth

    Returns:
        Refined frame; pixels no original sample reached keep their tilde value
    """
    return run_sync(
        st_interpolate_async(tilde_seq, guide_seq, mask, flows, cfg, ref_index, sigma_fn, workers)
    )


class SequenceDemosaicker:
    """Directional initialization plus the spatio-temporal refinement of every frame"""

    def __init__(self, cfg: Optional[InterpConfig] = None, flow_params: Optional[FlowParams] = None,
                 registration: Optional[Registration] = None, workers: int = 0):
        self.stage_name = "SequenceDemosaicker"
        self.cfg = cfg or InterpConfig()
        self.registration = registration or make_registration(flow_params)
        self.workers = workers
        self.state = {}
        logger.info(f"{self.stage_name} initialized (side={self.cfg.side}, K={self.cfg.k})")

    async def initialize(self, cfa_seq: List[CfaImage]) -> Sequence:
        if not cfa_seq:
            raise ImageError("Empty CFA sequence")
        frames = await gather_threads(directional_init, cfa_seq, self.workers)
        return Sequence(tuple(frames))

    async def demosaick(self, cfa_seq: List[CfaImage], sigma_fn: Optional[SigmaFn] = None) -> Sequence:
        """
        Args:
            cfa_seq: denoised or raw CFA frames
            sigma_fn: noise std at an intensity when the frames were not denoised

        Returns:
            Full-color sequence
        """
        logger.info(f"{self.stage_name}: directional initialization of {len(cfa_seq)} frames")
        init = await self.initialize(cfa_seq)
        self.state["init"] = init
        pattern = cfa_seq[0].pattern
        width, height = cfa_seq[0].width, cfa_seq[0].height
        range_hint = init.range_hint

        green = [frame.channel(1) for frame in init]
        green_seq = Sequence(tuple(Image(g, range_hint=range_hint) for g in green))
        masks = {c: channel_mask(pattern, c, width, height) for c in ("R", "G", "B")}

        out = []
        for k in range(len(init)):
            logger.info(f"{self.stage_name}: frame {k + 1}/{len(init)}")
            flows = await flows_to_reference(green, k, self.registration, self.workers)
            ug = await st_interpolate_async(
                green_seq, green_seq, masks["G"], flows, self.cfg, k, sigma_fn, self.workers
            )
            out.append((k, ug, flows))

        updated_green = Sequence(tuple(ug for _, ug, _ in out))
        # red and blue are refined as differences to the updated green
        diffs = {
            name: Sequence(tuple(
                Image(init[n].channel(index) - updated_green[n].plane, range_hint=range_hint)
                for n in range(len(init))
            ))
            for name, index in (("R", 0), ("B", 2))
        }
        result = []
        for k, ug, flows in out:
            channels = {"G": ug.plane}
            for name in ("R", "B"):
                refined = await st_interpolate_async(
                    diffs[name], updated_green, masks[name], flows, self.cfg, k, sigma_fn, self.workers
                )
                channels[name] = refined.plane + ug.plane
            result.append(Image(np.stack([channels["R"], channels["G"], channels["B"]], axis=-1),
                                range_hint=range_hint))
        logger.success(f"{self.stage_name}: {len(result)} frames demosaicked")
        return Sequence(tuple(result))


def demosaick_sequence(cfa_seq: List[CfaImage], cfg: Optional[InterpConfig] = None,
                       flow_params: Optional[FlowParams] = None, sigma_fn: Optional[SigmaFn] = None,
                       workers: int = 0) -> Sequence:
    return run_sync(SequenceDemosaicker(cfg, flow_params, workers=workers).demosaick(cfa_seq, sigma_fn))
