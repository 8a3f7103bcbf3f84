"""
CFA Bookkeeping and Image Files
Bayer layouts, CFA <-> 4-channel repacking, decimation masks and netpbm frame I/O
"""
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
from loguru import logger

from .errors import ImageError, ImageIOError, PatternError
from .imgseq import Image, Sequence

QUAD_CHANNELS = ("R", "G1", "G2", "B")
COLOR_INDEX = {"R": 0, "G": 1, "B": 2}
FRAME_TEMPLATE = "frame_{:04d}"

PathLike = Union[str, Path]


class BayerPattern(str, Enum):
    RGGB = "RGGB"
    GRBG = "GRBG"
    GBRG = "GBRG"
    BGGR = "BGGR"

    @property
    def cell(self) -> Tuple[Tuple[str, str], Tuple[str, str]]:
        """Colors of the 2x2 unit cell, row-major"""
        v = self.value
        return ((v[0], v[1]), (v[2], v[3]))

    @property
    def quad_sites(self) -> Dict[str, Tuple[int, int]]:
        """
        (row, col) offset inside the 2x2 cell of each quad channel

        G1 is the green sharing a row with red, G2 the green sharing a row with blue.
        """
        sites: Dict[str, Tuple[int, int]] = {}
        red_row = 0 if "R" in self.cell[0] else 1
        for row in range(2):
            for col in range(2):
                color = self.cell[row][col]
                if color == "G":
                    sites["G1" if row == red_row else "G2"] = (row, col)
                else:
                    sites[color] = (row, col)
        return sites

    @classmethod
    def parse(cls, value: Union[str, "BayerPattern"]) -> "BayerPattern":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise PatternError(f"Unknown Bayer pattern '{value}'") from None


def _check_even(width: int, height: int) -> None:
    if width % 2 or height % 2:
        raise PatternError(f"CFA dimensions must be even, got {width}x{height}")


@dataclass(frozen=True)
class CfaImage:
    img: Image
    pattern: BayerPattern

    def __post_init__(self):
        if self.img.channels != 1:
            raise PatternError(f"CFA image must be single-channel, got {self.img.channels}")
        _check_even(self.img.width, self.img.height)
        object.__setattr__(self, "pattern", BayerPattern.parse(self.pattern))

    @property
    def width(self) -> int:
        return self.img.width

    @property
    def height(self) -> int:
        return self.img.height


@dataclass(frozen=True)
class QuadImage:
    """Half-resolution (R, G1, G2, B) repacking of a CFA frame"""

    img: Image

    def __post_init__(self):
        if self.img.channels != 4:
            raise ImageError(f"QuadImage needs 4 channels, got {self.img.channels}")


@dataclass(frozen=True)
class DecimationMask:
    """Full-resolution {0,1} map of the original samples of one color"""

    mask: Image
    channel: str

    @property
    def plane(self) -> np.ndarray:
        return self.mask.plane


def mosaic(color: Image, pattern: Union[str, BayerPattern]) -> CfaImage:
    """
    Sample a 3-channel image through a Bayer pattern

    Args:
        color: (R, G, B) image with even dimensions
        pattern: Bayer layout

    Returns:
        CfaImage where each pixel keeps the color its CFA site dictates
    """
    pattern = BayerPattern.parse(pattern)
    if color.channels != 3:
        raise ImageError(f"mosaic needs a 3-channel image, got {color.channels}")
    _check_even(color.width, color.height)
    out = np.empty((color.height, color.width))
    for row in range(2):
        for col in range(2):
            index = COLOR_INDEX[pattern.cell[row][col]]
            out[row::2, col::2] = color.data[row::2, col::2, index]
    return CfaImage(Image(out, range_hint=color.range_hint), pattern)


def cfa_to_quad(cfa: CfaImage) -> QuadImage:
    plane = cfa.img.plane
    planes = []
    for name in QUAD_CHANNELS:
        row, col = cfa.pattern.quad_sites[name]
        planes.append(plane[row::2, col::2])
    return QuadImage(Image.from_planes(planes, range_hint=cfa.img.range_hint))


def quad_to_cfa(quad: QuadImage, pattern: Union[str, BayerPattern]) -> CfaImage:
    """Exact inverse of cfa_to_quad"""
    pattern = BayerPattern.parse(pattern)
    data = quad.img.data
    out = np.empty((2 * quad.img.height, 2 * quad.img.width))
    for index, name in enumerate(QUAD_CHANNELS):
        row, col = pattern.quad_sites[name]
        out[row::2, col::2] = data[:, :, index]
    return CfaImage(Image(out, range_hint=quad.img.range_hint), pattern)


def channel_mask(pattern: Union[str, BayerPattern], channel: str, width: int, height: int) -> DecimationMask:
    pattern = BayerPattern.parse(pattern)
    channel = channel.upper()
    if channel not in COLOR_INDEX:
        raise PatternError(f"Unknown color channel '{channel}'")
    _check_even(width, height)
    mask = np.zeros((height, width))
    for row in range(2):
        for col in range(2):
            if pattern.cell[row][col] == channel:
                mask[row::2, col::2] = 1.0
    return DecimationMask(Image(mask, range_hint=1.0), channel)


# ---------------------------------------------------------------------------
# netpbm frames
# ---------------------------------------------------------------------------

def _max_value(bitdepth: int) -> int:
    if bitdepth not in (8, 16):
        raise ImageIOError(f"Unsupported bit depth {bitdepth}")
    return (1 << bitdepth) - 1


def read_image(path: PathLike, white_level: Optional[float] = None) -> Image:
    """
    Read an 8- or 16-bit binary PGM (P5) or PPM (P6)

    Color files come back in (R, G, B) order. range_hint is white_level when given
    (12-bit data stored in 16-bit files), else the container maximum 255 or 65535.
    """
    path = Path(path)
    try:
        with path.open("rb") as f:
            magic = f.read(2)
    except OSError as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e
    if magic not in (b"P5", b"P6"):
        raise ImageIOError(f"{path}: unsupported magic {magic!r}")

    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise ImageIOError(f"{path}: could not decode image")
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    container = 65535.0 if data.dtype == np.uint16 else 255.0
    if white_level is not None and white_level > container:
        raise ImageIOError(f"{path}: white level {white_level:g} exceeds the {container:g} container")
    range_hint = float(white_level) if white_level is not None else container
    return Image(data.astype(np.float64), range_hint=range_hint)


def write_image(path: PathLike, img: Image, bitdepth: int = 16) -> Path:
    """
    Write a 1-channel image as PGM or a 3-channel image as PPM

    Samples must already be integers inside [0, 2**bitdepth - 1]; use quantize() first
    for real-valued results.
    """
    path = Path(path)
    max_value = _max_value(bitdepth)
    data = img.data
    if data.min() < 0 or data.max() > max_value:
        raise ImageIOError(
            f"{path}: samples [{data.min():g}, {data.max():g}] outside 0..{max_value}"
        )
    if not np.array_equal(data, np.round(data)):
        raise ImageIOError(f"{path}: samples must be integer-valued, quantize first")

    dtype = np.uint8 if bitdepth == 8 else np.uint16
    if img.channels == 1:
        out = data[:, :, 0].astype(dtype)
        suffix = ".pgm"
    elif img.channels == 3:
        out = cv2.cvtColor(data.astype(dtype), cv2.COLOR_RGB2BGR)
        suffix = ".ppm"
    else:
        raise ImageIOError(f"{path}: cannot store {img.channels} channels in netpbm")
    if path.suffix.lower() != suffix:
        path = path.with_suffix(suffix)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out, [cv2.IMWRITE_PXM_BINARY, 1]):
        raise ImageIOError(f"{path}: write failed")
    return path


def quantize(img: Image, bitdepth: int = 16) -> Image:
    """Round and clip real samples into the storage range of a bit depth"""
    max_value = _max_value(bitdepth)
    return img.with_data(np.clip(np.round(img.data), 0, max_value))


def write_mask(path: PathLike, mask: DecimationMask) -> Path:
    """Masks are stored as 8-bit PGM with values {0, 255}"""
    return write_image(path, Image(mask.plane * 255.0), bitdepth=8)


def frame_paths(directory: PathLike) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError(f"{directory} is not a directory")
    paths = sorted(
        p for p in directory.iterdir()
        if p.name.startswith("frame_") and p.suffix.lower() in (".pgm", ".ppm")
    )
    if not paths:
        raise ImageIOError(f"No frame_%04d.pgm/ppm files in {directory}")
    return paths


def read_sequence(directory: PathLike, white_level: Optional[float] = None) -> Sequence:
    paths = frame_paths(directory)
    logger.debug(f"Reading {len(paths)} frames from {directory}")
    return Sequence(tuple(read_image(p, white_level) for p in paths))


def read_cfa_sequence(directory: PathLike, pattern: Union[str, BayerPattern],
                      white_level: Optional[float] = None) -> List[CfaImage]:
    return [CfaImage(frame, pattern) for frame in read_sequence(directory, white_level)]


def write_sequence(directory: PathLike, frames: Sequence, bitdepth: int = 16) -> List[Path]:
    """Quantize and write every frame as frame_%04d.pgm/.ppm"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for index, frame in enumerate(frames):
        target = directory / FRAME_TEMPLATE.format(index)
        written.append(write_image(target, quantize(frame, bitdepth), bitdepth))
    logger.debug(f"Wrote {len(written)} frames to {directory}")
    return written
