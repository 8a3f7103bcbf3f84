"""
Color Transforms
YUVW decorrelation of (R, G1, G2, B) frames and the display imaging chain
"""
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .cfa_io import QuadImage
from .errors import ImageError
from .imgseq import Image

# Rows are the principal vectors of (R, G1, G2, B) CFA samples, used as printed.
YUVW_MATRIX = np.array(
    [
        [0.5, 0.5, 0.5, 0.5],
        [-0.5, 0.5, 0.5, -0.5],
        [0.65, 0.2784, -0.2784, -0.65],
        [-0.2784, 0.65, -0.65, 0.2784],
    ]
)

# Orthonormal YUV used to judge chrominance variation in the directional demosaick.
YUV_MATRIX = np.array(
    [
        [1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0)],
        [1.0 / np.sqrt(2.0), 0.0, -1.0 / np.sqrt(2.0)],
        [1.0 / np.sqrt(6.0), -2.0 / np.sqrt(6.0), 1.0 / np.sqrt(6.0)],
    ]
)


@dataclass(frozen=True)
class ColorTransform:
    matrix: np.ndarray
    inverse: np.ndarray = field(init=False)

    def __post_init__(self):
        # the printed YUVW entries are orthonormal to ~1.3e-5
        object.__setattr__(self, "inverse", self.matrix.T.copy())

    @property
    def orthonormality_defect(self) -> float:
        eye = np.eye(self.matrix.shape[0])
        return float(np.max(np.abs(self.matrix @ self.matrix.T - eye)))

    def apply(self, data: np.ndarray) -> np.ndarray:
        return data @ self.matrix.T

    def invert(self, data: np.ndarray) -> np.ndarray:
        return data @ self.inverse.T


YUVW = ColorTransform(YUVW_MATRIX)
YUV = ColorTransform(YUV_MATRIX)

QuadLike = Union[QuadImage, Image]


def _quad_image(q: QuadLike) -> Image:
    img = q.img if isinstance(q, QuadImage) else q
    if img.channels != 4:
        raise ImageError(f"YUVW needs 4 channels, got {img.channels}")
    return img


def yuvw_forward(q: QuadLike) -> QuadImage:
    """Per-pixel (R, G1, G2, B) -> (Y, U, V, W)"""
    img = _quad_image(q)
    return QuadImage(img.with_data(YUVW.apply(img.data)))


def yuvw_inverse(q: QuadLike) -> QuadImage:
    img = _quad_image(q)
    return QuadImage(img.with_data(YUVW.invert(img.data)))


def rgb_to_yuv(data: np.ndarray) -> np.ndarray:
    return YUV.apply(data)


def gray_world_wb(img: Image) -> Image:
    """
    White balance by gray mean

    Red and blue are scaled so their means match the green mean.
    """
    if img.channels != 3:
        raise ImageError(f"White balance needs 3 channels, got {img.channels}")
    means = img.data.reshape(-1, 3).mean(axis=0)
    if np.any(np.abs(means) < 1e-12):
        raise ImageError(f"Cannot white balance a zero-mean channel (means {means})")
    gains = means[1] / means
    return img.with_data(img.data * gains)


def gamma_correct(img: Image, gamma: float) -> Image:
    if gamma <= 0:
        raise ImageError(f"gamma must be positive, got {gamma}")
    scale = img.range_hint
    normalized = np.maximum(img.data, 0.0) / scale
    return img.with_data(np.power(normalized, gamma) * scale)
