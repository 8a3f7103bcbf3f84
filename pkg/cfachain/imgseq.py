"""
Image and Sequence Containers
Frames, patches, patch aggregation and the extended-patch search shared by all stages
"""
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ImageError

ALLOWED_CHANNELS = (1, 3, 4)


@dataclass(frozen=True)
class Image:
    """
    Immutable frame stored as float64 samples of shape (height, width, channels)

    Args:
        data: 2D or 3D array; 2D input becomes a single-channel image
        range_hint: nominal maximum sample value (255, 4095, 65535, ...)
    """

    data: np.ndarray
    range_hint: float = 255.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3 or arr.shape[2] not in ALLOWED_CHANNELS:
            raise ImageError(f"Unsupported image shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ImageError("Image has no pixels")
        if not np.all(np.isfinite(arr)):
            raise ImageError("Image contains NaN or Inf samples")
        if self.range_hint <= 0:
            raise ImageError(f"range_hint must be positive, got {self.range_hint}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The (height, width) view of a single-channel image"""
        if self.channels != 1:
            raise ImageError(f"plane requires one channel, image has {self.channels}")
        return self.data[:, :, 0]

    def channel(self, index: int) -> np.ndarray:
        return self.data[:, :, index]

    def with_data(self, data: np.ndarray) -> "Image":
        return Image(data, range_hint=self.range_hint)

    @classmethod
    def from_planes(cls, planes: Iterable[np.ndarray], range_hint: float = 255.0) -> "Image":
        return cls(np.stack(list(planes), axis=-1), range_hint=range_hint)


@dataclass(frozen=True)
class Sequence:
    """Ordered, non-empty list of frames sharing width, height and channel count"""

    frames: Tuple[Image, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ImageError("Sequence must contain at least one frame")
        shape = frames[0].data.shape
        for index, frame in enumerate(frames):
            if frame.data.shape != shape:
                raise ImageError(
                    f"Frame {index} has shape {frame.data.shape}, expected {shape}"
                )
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[Image]:
        return iter(self.frames)

    def __getitem__(self, index: int) -> Image:
        return self.frames[index]

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def channels(self) -> int:
        return self.frames[0].channels

    @property
    def range_hint(self) -> float:
        return self.frames[0].range_hint

    @property
    def central_index(self) -> int:
        return len(self.frames) // 2

    def stack(self) -> np.ndarray:
        """All samples as one (frames, height, width, channels) array"""
        return np.stack([frame.data for frame in self.frames])

    def planes(self, channel: int) -> List[np.ndarray]:
        return [frame.data[:, :, channel] for frame in self.frames]

    @classmethod
    def from_array(cls, data: np.ndarray, range_hint: float = 255.0) -> "Sequence":
        return cls(tuple(Image(frame, range_hint=range_hint) for frame in data))


@dataclass(frozen=True)
class Patch:
    origin: Tuple[int, int]  # (x, y) of the top-left pixel
    side: int
    frame_index: int
    values: np.ndarray  # (side, side, channels)


def clamp_origin(origin: Tuple[int, int], side: int, width: int, height: int) -> Tuple[int, int]:
    """Move a patch origin so the side x side window lies inside the frame"""
    x, y = origin
    return (int(min(max(x, 0), width - side)), int(min(max(y, 0), height - side)))


def extract_patch(img: Image, origin: Tuple[int, int], side: int, frame_index: int = 0) -> Patch:
    """
    Copy a side x side window out of an image

    Args:
        img: source image
        origin: requested (x, y) top-left corner, clamped to fit
        side: window side in pixels
        frame_index: index of the frame the patch belongs to

    Returns:
        Patch holding a copy of the window
    """
    if side <= 0 or side > img.width or side > img.height:
        raise ImageError(f"Patch side {side} does not fit a {img.width}x{img.height} image")
    x, y = clamp_origin(origin, side, img.width, img.height)
    values = img.data[y:y + side, x:x + side, :].copy()
    return Patch(origin=(x, y), side=side, frame_index=frame_index, values=values)


class Accumulator:
    """Running weighted sums for patch aggregation; finalize divides where weight > 0"""

    def __init__(self, height: int, width: int, channels: int = 1):
        self.sum = np.zeros((height, width, channels), dtype=np.float64)
        self.weight = np.zeros((height, width), dtype=np.float64)

    @classmethod
    def like(cls, img: Image) -> "Accumulator":
        return cls(img.height, img.width, img.channels)

    def add(self, origin: Tuple[int, int], values: np.ndarray, weight: float = 1.0) -> None:
        if weight < 0:
            raise ImageError(f"Aggregation weight must be non-negative, got {weight}")
        if values.ndim == 2:
            values = values[:, :, np.newaxis]
        x, y = origin
        rows, cols = values.shape[:2]
        self.sum[y:y + rows, x:x + cols, :] += weight * values
        self.weight[y:y + rows, x:x + cols] += weight

    def merge(self, other: "Accumulator") -> "Accumulator":
        """Fold another worker's accumulator into this one (elementwise sum)"""
        if other.sum.shape != self.sum.shape:
            raise ImageError("Cannot merge accumulators of different shapes")
        self.sum += other.sum
        self.weight += other.weight
        return self

    def finalize(self, fallback: Optional[np.ndarray] = None, range_hint: float = 255.0) -> Image:
        """
        Divide sums by weights

        Pixels that never received weight take the fallback values (or 0).
        """
        covered = self.weight > 0
        out = np.zeros_like(self.sum)
        out[covered] = self.sum[covered] / self.weight[covered][:, np.newaxis]
        if fallback is not None:
            fallback = np.asarray(fallback, dtype=np.float64).reshape(self.sum.shape)
            out[~covered] = fallback[~covered]
        return Image(out, range_hint=range_hint)


def aggregate(acc: Accumulator, patch: Patch, weight: float = 1.0) -> Accumulator:
    acc.add(patch.origin, patch.values, weight)
    return acc


def rmse(a: Image, b: Image) -> float:
    """Root mean square error over every sample of two same-shaped images"""
    if a.data.shape != b.data.shape:
        raise ImageError(f"Shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    return float(np.sqrt(np.mean(diff * diff)))


def grid_positions(length: int, side: int, stride: int) -> List[int]:
    """Patch origins along one axis: every stride pixels, plus the last valid origin"""
    last = length - side
    positions = list(range(0, last + 1, max(1, stride)))
    if positions[-1] != last:
        positions.append(last)
    return positions


@dataclass
class PatchStack:
    """
    Extended patches of a frame list on the reference origin grid

    Member n of the extended patch at origin q is the side x side window of frame n at
    q + shift_n(q) (clamped into the frame). Where fallback_n(q) is set the member is
    replaced by the window of the base frame at q.

    Args:
        frames: M single-channel planes of equal shape
        side: patch side
        shifts: optional per-frame integer (dy, dx) arrays of shape (Hs, Ws, 2)
        fallback: optional per-frame boolean arrays of shape (Hs, Ws)
        base_index: frame used by the fallback rule
    """

    frames: List[np.ndarray]
    side: int
    shifts: Optional[List[np.ndarray]] = None
    fallback: Optional[List[np.ndarray]] = None
    base_index: int = 0
    stack: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.frames:
            raise ImageError("PatchStack needs at least one frame")
        height, width = self.frames[0].shape
        if self.side > height or self.side > width:
            raise ImageError(f"Patch side {self.side} exceeds frame {width}x{height}")
        self.grid_height = height - self.side + 1
        self.grid_width = width - self.side + 1
        rows, cols = np.meshgrid(
            np.arange(self.grid_height), np.arange(self.grid_width), indexing="ij"
        )
        self.member_rows: List[np.ndarray] = []
        self.member_cols: List[np.ndarray] = []
        for n in range(len(self.frames)):
            if self.shifts is None:
                self.member_rows.append(rows)
                self.member_cols.append(cols)
            else:
                shift = self.shifts[n]
                self.member_rows.append(np.clip(rows + shift[..., 0], 0, self.grid_height - 1))
                self.member_cols.append(np.clip(cols + shift[..., 1], 0, self.grid_width - 1))
        self.stack = self._gather_all(self.frames)

    @property
    def members(self) -> int:
        return len(self.frames)

    def _windows(self, frames: List[np.ndarray]) -> List[np.ndarray]:
        return [sliding_window_view(np.asarray(f, dtype=np.float64), (self.side, self.side)) for f in frames]

    def _gather_all(self, frames: List[np.ndarray]) -> np.ndarray:
        windows = self._windows(frames)
        dim = self.side * self.side
        stack = np.empty((len(frames), self.grid_height, self.grid_width, dim))
        for n, win in enumerate(windows):
            stack[n] = win[self.member_rows[n], self.member_cols[n]].reshape(
                self.grid_height, self.grid_width, dim
            )
        if self.fallback is not None:
            for n, occluded in enumerate(self.fallback):
                if n != self.base_index and np.any(occluded):
                    stack[n][occluded] = stack[self.base_index][occluded]
        return stack

    def candidates(self, origin: Tuple[int, int], radius: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Extended distances from the patch at origin to every origin within radius

        Returns:
            origins as an (n, 2) array of (x, y) in row-major scan order, and distances
        """
        x, y = origin
        y0, y1 = max(0, y - radius), min(self.grid_height - 1, y + radius)
        x0, x1 = max(0, x - radius), min(self.grid_width - 1, x + radius)
        block = self.stack[:, y0:y1 + 1, x0:x1 + 1, :]
        ref = self.stack[:, y, x, :]
        diff = block - ref[:, np.newaxis, np.newaxis, :]
        dist = np.einsum("nijd,nijd->ij", diff, diff)
        ys, xs = np.meshgrid(np.arange(y0, y1 + 1), np.arange(x0, x1 + 1), indexing="ij")
        origins = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return origins, dist.ravel()

    def nearest(self, origin: Tuple[int, int], k: int, radius: int) -> Tuple[np.ndarray, np.ndarray]:
        """K closest extended patches; ties keep scan order; fewer when the window is small"""
        origins, dist = self.candidates(origin, radius)
        order = np.argsort(dist, kind="stable")[:k]
        return origins[order], dist[order]

    def gather(self, frames: List[np.ndarray], origins: np.ndarray) -> np.ndarray:
        """
        Member windows of other planes at the extended patches' member positions

        Args:
            frames: M planes aligned with the stack frames
            origins: (n, 2) array of (x, y) origins

        Returns:
            (n, M, side, side) array
        """
        windows = self._windows(frames)
        xs, ys = origins[:, 0], origins[:, 1]
        out = np.empty((len(origins), self.members, self.side, self.side))
        for n, win in enumerate(windows):
            out[:, n] = win[self.member_rows[n][ys, xs], self.member_cols[n][ys, xs]]
        if self.fallback is not None:
            base = windows[self.base_index][ys, xs]
            for n, occluded in enumerate(self.fallback):
                if n == self.base_index:
                    continue
                hit = occluded[ys, xs]
                if np.any(hit):
                    out[hit, n] = base[hit]
        return out
