"""
Shared fixtures: analytic textures, synthetic sequences and a loguru capture sink
"""
from typing import Callable, List, Tuple

import numpy as np
import pytest
from loguru import logger

from cfachain.imgseq import Image, Sequence

TextureFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def make_texture(seed: int = 0, terms: int = 8, amplitude: float = 8.0,
                 periods: Tuple[float, float] = (12.0, 40.0), base: float = 128.0) -> TextureFn:
    """Sum of plane waves, evaluable at any real (x, y)"""
    rng = np.random.default_rng(seed)
    omegas = 2 * np.pi / rng.uniform(*periods, terms)
    angles = rng.uniform(0, np.pi, terms)
    phases = rng.uniform(0, 2 * np.pi, terms)

    def texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.full(np.broadcast(x, y).shape, base, dtype=np.float64)
        for w, a, p in zip(omegas, angles, phases):
            out += amplitude * np.sin(w * (np.cos(a) * x + np.sin(a) * y) + p)
        return out

    return texture


def render(texture: TextureFn, height: int, width: int, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
    """texture sampled on the pixel grid, content moved by (dx, dy)"""
    y, x = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return texture(x - dx, y - dy)


def color_frames(seed: int, frames: int, height: int, width: int,
                 shifts: List[Tuple[int, int]] = None, **texture_kw) -> Sequence:
    """3-channel sequence of one texture moved by per-frame shifts"""
    texture = make_texture(seed, **texture_kw)
    shifts = shifts or [(0, 0)] * frames
    out = []
    for dx, dy in shifts[:frames]:
        g = render(texture, height, width, dx, dy)
        out.append(Image(np.stack([0.9 * g + 15.0, g, 0.8 * g + 30.0], axis=-1)))
    return Sequence(tuple(out))


@pytest.fixture
def texture_factory():
    return make_texture


@pytest.fixture
def renderer():
    return render


@pytest.fixture
def color_sequence():
    return color_frames


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def log_messages():
    """Messages logged at WARNING or above while the test runs"""
    messages: List[str] = []
    handler_id = logger.add(lambda m: messages.append(m.record["message"]), level="WARNING")
    yield messages
    logger.remove(handler_id)
