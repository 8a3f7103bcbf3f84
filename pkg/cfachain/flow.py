"""
Optical Flow and Registration
TV-L1 flow (duality-based alternation, coarse-to-fine), backward warping,
occlusion detection and Middlebury .flo files
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Union

import cv2
import numpy as np
from loguru import logger
from scipy import ndimage

from .config import FlowParams
from .errors import FlowError, ImageIOError
from .imgseq import Image
from .parallel import gather_threads

FLO_MAGIC = 202021.25
MIN_PYRAMID_SIDE = 16
GRAD_IS_ZERO = 1e-10

PlaneLike = Union[Image, np.ndarray]


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement; u horizontal, v vertical, in pixels"""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise FlowError(f"Flow components must be equal 2D arrays, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise FlowError("Flow contains NaN or Inf")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, height: int, width: int, dx: float, dy: float) -> "FlowField":
        return cls(np.full((height, width), float(dx)), np.full((height, width), float(dy)))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def mean_shift(self):
        return float(self.u.mean()), float(self.v.mean())


@dataclass(frozen=True)
class OcclusionMask:
    mask: np.ndarray  # True = unreliable

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def _plane(img: PlaneLike) -> np.ndarray:
    if isinstance(img, Image):
        return img.plane
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise FlowError(f"Flow needs single-channel input, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _sample(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """plane(x + u, y + v); bicubic, border-clamped, exact at integer offsets"""
    height, width = plane.shape
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    if np.all(u == np.rint(u)) and np.all(v == np.rint(v)):
        r = np.clip(rows + v.astype(np.int64), 0, height - 1)
        c = np.clip(cols + u.astype(np.int64), 0, width - 1)
        return plane[r, c]
    coords = np.stack([rows + v, cols + u])
    return ndimage.map_coordinates(plane, coords, order=3, mode="nearest")


def warp(img: Image, flow: FlowField) -> Image:
    """
    Backward warp: out(x) = img(x + flow(x))

    With flow estimated from ref to frame n, warp(frame_n, flow) lands frame n on ref.
    """
    if (img.height, img.width) != flow.shape:
        raise FlowError(f"Flow {flow.shape} does not match image {img.height}x{img.width}")
    out = np.empty_like(img.data)
    for ch in range(img.channels):
        out[:, :, ch] = _sample(img.data[:, :, ch], flow.u, flow.v)
    return img.with_data(out)


# ---------------------------------------------------------------------------
# differential operators
# ---------------------------------------------------------------------------

def divergence(flow: FlowField) -> np.ndarray:
    """du/dx + dv/dy by central differences, one-sided at the borders"""
    if min(flow.shape) < 2:
        return np.zeros(flow.shape)
    return np.gradient(flow.u, axis=1) + np.gradient(flow.v, axis=0)


def _forward_gradient(f: np.ndarray):
    fx = np.zeros_like(f)
    fy = np.zeros_like(f)
    fx[:, :-1] = f[:, 1:] - f[:, :-1]
    fy[:-1, :] = f[1:, :] - f[:-1, :]
    return fx, fy


def _dual_divergence(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Backward-difference divergence, the negative adjoint of _forward_gradient"""
    div = np.zeros_like(p1)
    div[:, 0] = p1[:, 0]
    div[:, 1:-1] = p1[:, 1:-1] - p1[:, :-2]
    div[:, -1] = -p1[:, -2]
    div[0, :] += p2[0, :]
    div[1:-1, :] += p2[1:-1, :] - p2[:-2, :]
    div[-1, :] += -p2[-2, :]
    return div


def _centered_gradient(f: np.ndarray):
    gy, gx = np.gradient(f)
    return gx, gy


# ---------------------------------------------------------------------------
# TV-L1
# ---------------------------------------------------------------------------

def _normalize_pair(a: np.ndarray, b: np.ndarray):
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi - lo <= 0:
        return a - lo, b - lo
    scale = 255.0 / (hi - lo)
    return (a - lo) * scale, (b - lo) * scale


def _pyramid_depth(height: int, width: int, p: FlowParams) -> int:
    depth = 1
    while depth < p.pyramid_scales:
        factor = p.scale_factor ** depth
        if min(height, width) * factor < MIN_PYRAMID_SIDE:
            break
        depth += 1
    if depth < p.pyramid_scales:
        logger.warning(
            f"TV-L1: {width}x{height} frames allow {depth} of {p.pyramid_scales} pyramid scales"
        )
    return depth


def _zoom_out(f: np.ndarray, factor: float) -> np.ndarray:
    height, width = f.shape
    new_size = (max(1, int(round(width * factor))), max(1, int(round(height * factor))))
    sigma = 0.6 * np.sqrt(1.0 / (factor * factor) - 1.0)
    smoothed = cv2.GaussianBlur(f, (0, 0), sigma, borderType=cv2.BORDER_REFLECT)
    return cv2.resize(smoothed, new_size, interpolation=cv2.INTER_CUBIC)


def _zoom_flow(u: np.ndarray, v: np.ndarray, shape):
    height, width = shape
    sy = height / u.shape[0]
    sx = width / u.shape[1]
    u_up = cv2.resize(u, (width, height), interpolation=cv2.INTER_CUBIC) * sx
    v_up = cv2.resize(v, (width, height), interpolation=cv2.INTER_CUBIC) * sy
    return u_up, v_up


def _tvl1_single_scale(i0: np.ndarray, i1: np.ndarray, u1: np.ndarray, u2: np.ndarray, p: FlowParams):
    """Primal-dual alternation at one pyramid level, warping i1 towards i0"""
    l_t = p.lambda_ * p.theta
    taut = p.tau / p.theta
    p11 = np.zeros_like(i0)
    p12 = np.zeros_like(i0)
    p21 = np.zeros_like(i0)
    p22 = np.zeros_like(i0)
    i1x, i1y = _centered_gradient(i1)

    for _ in range(p.warps):
        i1w = _sample(i1, u1, u2)
        i1wx = _sample(i1x, u1, u2)
        i1wy = _sample(i1y, u1, u2)
        grad = i1wx * i1wx + i1wy * i1wy
        rho_c = i1w - i1wx * u1 - i1wy * u2 - i0

        for _ in range(p.inner_iterations):
            rho = rho_c + i1wx * u1 + i1wy * u2

            # thresholding step
            d1 = np.zeros_like(u1)
            d2 = np.zeros_like(u2)
            low = rho < -l_t * grad
            high = rho > l_t * grad
            mid = ~low & ~high & (grad > GRAD_IS_ZERO)
            d1[low] = l_t * i1wx[low]
            d2[low] = l_t * i1wy[low]
            d1[high] = -l_t * i1wx[high]
            d2[high] = -l_t * i1wy[high]
            fi = np.zeros_like(rho)
            fi[mid] = -rho[mid] / grad[mid]
            d1[mid] = fi[mid] * i1wx[mid]
            d2[mid] = fi[mid] * i1wy[mid]
            v1 = u1 + d1
            v2 = u2 + d2

            new_u1 = v1 + p.theta * _dual_divergence(p11, p12)
            new_u2 = v2 + p.theta * _dual_divergence(p21, p22)
            error = np.mean((new_u1 - u1) ** 2 + (new_u2 - u2) ** 2)
            u1, u2 = new_u1, new_u2

            u1x, u1y = _forward_gradient(u1)
            u2x, u2y = _forward_gradient(u2)
            ng1 = 1.0 + taut * np.sqrt(u1x * u1x + u1y * u1y)
            ng2 = 1.0 + taut * np.sqrt(u2x * u2x + u2y * u2y)
            p11 = (p11 + taut * u1x) / ng1
            p12 = (p12 + taut * u1y) / ng1
            p21 = (p21 + taut * u2x) / ng2
            p22 = (p22 + taut * u2y) / ng2

            if error < p.epsilon * p.epsilon:
                break
    return u1, u2


def tvl1_flow(src: PlaneLike, dst: PlaneLike, p: Optional[FlowParams] = None,
              init: Optional[FlowField] = None) -> FlowField:
    """
    Dense TV-L1 flow from src to dst

    The returned field satisfies dst(x + flow(x)) ~ src(x), so warp(dst, flow) is
    registered on src.

    Args:
        src: reference plane
        dst: plane to register
        p: solver parameters
        init: optional initial field at full resolution

    Returns:
        FlowField of the src dimensions
    """
    p = p or FlowParams()
    i0 = _plane(src)
    i1 = _plane(dst)
    if i0.shape != i1.shape:
        raise FlowError(f"Flow frames differ in size: {i0.shape} vs {i1.shape}")
    i0, i1 = _normalize_pair(i0, i1)

    depth = _pyramid_depth(*i0.shape, p)
    levels0 = [i0]
    levels1 = [i1]
    for _ in range(1, depth):
        levels0.append(_zoom_out(levels0[-1], p.scale_factor))
        levels1.append(_zoom_out(levels1[-1], p.scale_factor))

    coarse = levels0[-1].shape
    if init is None:
        u1 = np.zeros(coarse)
        u2 = np.zeros(coarse)
    else:
        if init.shape != i0.shape:
            raise FlowError(f"Initial flow {init.shape} does not match frames {i0.shape}")
        u1, u2 = init.u, init.v
        if depth > 1:
            u1, u2 = _zoom_flow(init.u, init.v, coarse)

    for level in range(depth - 1, -1, -1):
        u1, u2 = _tvl1_single_scale(levels0[level], levels1[level], u1, u2, p)
        if level > 0:
            u1, u2 = _zoom_flow(u1, u2, levels0[level - 1].shape)
    return FlowField(u1, u2)


# ---------------------------------------------------------------------------
# occlusions
# ---------------------------------------------------------------------------

def occlusion_mask(flow: FlowField, ref: Image, warped: Image, tau_div: float = 0.5,
                   tau_color: float = 30.0, smoothing: float = 0.0, min_region: int = 1) -> OcclusionMask:
    """
    Flag pixels with strongly negative flow divergence or large post-warp difference

    The color test uses the per-pixel maximum absolute difference over channels.
    ``smoothing`` is the Gaussian std applied to the flow before differentiation and
    ``min_region`` the side of the square opening that removes isolated divergence
    flags; the defaults leave the raw tests untouched.
    """
    if ref.data.shape != warped.data.shape or (ref.height, ref.width) != flow.shape:
        raise FlowError("Occlusion inputs differ in size")
    if smoothing > 0:
        flow = FlowField(cv2.GaussianBlur(flow.u, (0, 0), smoothing),
                         cv2.GaussianBlur(flow.v, (0, 0), smoothing))
    folding = divergence(flow) < -tau_div
    if min_region > 1:
        kernel = np.ones((min_region, min_region), dtype=np.uint8)
        folding = cv2.morphologyEx(folding.astype(np.uint8), cv2.MORPH_OPEN, kernel).astype(bool)
    color = np.max(np.abs(ref.data - warped.data), axis=2)
    return OcclusionMask(folding | (color > tau_color))


# ---------------------------------------------------------------------------
# registration strategies
# ---------------------------------------------------------------------------

class Registration(Protocol):
    def estimate(self, src: PlaneLike, dst: PlaneLike) -> FlowField:
        ...


class TVL1Registration:
    """Dense per-pixel motion"""

    def __init__(self, params: Optional[FlowParams] = None):
        self.params = params or FlowParams()

    def estimate(self, src: PlaneLike, dst: PlaneLike) -> FlowField:
        return tvl1_flow(src, dst, self.params)


class GlobalShiftRegistration:
    """Single translation per frame pair: the mean of the TV-L1 field (burst captures)"""

    def __init__(self, params: Optional[FlowParams] = None):
        self.params = params or FlowParams()

    def estimate(self, src: PlaneLike, dst: PlaneLike) -> FlowField:
        dense = tvl1_flow(src, dst, self.params)
        dx, dy = dense.mean_shift()
        return FlowField.constant(*dense.shape, dx, dy)


def make_registration(params: Optional[FlowParams] = None) -> Registration:
    params = params or FlowParams()
    if params.registration == "global":
        return GlobalShiftRegistration(params)
    return TVL1Registration(params)


async def flows_to_reference(planes: List[np.ndarray], ref_index: int, registration: Registration,
                             workers: int = 0) -> List[FlowField]:
    """
    Flow from the reference plane to every plane, computed independently per pair

    The reference itself gets the zero field.
    """
    height, width = planes[ref_index].shape

    def solve(n: int) -> FlowField:
        if n == ref_index:
            return FlowField.zeros(height, width)
        flow = registration.estimate(planes[ref_index], planes[n])
        logger.debug(f"flow {ref_index}->{n}: mean |w| = {flow.magnitude().mean():.3f} px")
        return flow

    return await gather_threads(solve, range(len(planes)), workers)


# ---------------------------------------------------------------------------
# .flo files
# ---------------------------------------------------------------------------

def write_flo(path: Union[str, Path], flow: FlowField) -> Path:
    """Middlebury layout: float magic, int32 width, int32 height, interleaved float32 (u, v)"""
    path = Path(path)
    height, width = flow.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([width, height], dtype="<i4").tofile(f)
        np.stack([flow.u, flow.v], axis=-1).astype("<f4").tofile(f)
    return path


def read_flo(path: Union[str, Path]) -> FlowField:
    path = Path(path)
    try:
        with path.open("rb") as f:
            magic = np.fromfile(f, "<f4", count=1)
            if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
                raise ImageIOError(f"{path}: not a .flo file")
            dims = np.fromfile(f, "<i4", count=2)
            if dims.size != 2 or np.any(dims <= 0):
                raise ImageIOError(f"{path}: bad .flo header")
            width, height = int(dims[0]), int(dims[1])
            data = np.fromfile(f, "<f4", count=2 * width * height)
    except OSError as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e
    if data.size != 2 * width * height:
        raise ImageIOError(f"{path}: truncated flow data")
    data = data.reshape(height, width, 2).astype(np.float64)
    return FlowField(data[..., 0], data[..., 1])
