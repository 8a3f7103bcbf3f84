"""
Noise Model
Intensity-dependent noise estimation, two-segment linear fit and variance stabilization
"""
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view
from scipy import integrate
from scipy.fft import dctn

from .errors import NoiseEstimationError, StabilizerError
from .imgseq import Image, Sequence

DCT_SIDE = 8
FLAT_QUANTILE = 0.005
MIN_BIN_PATCHES = 50
DEFAULT_BINS = 16
BREAKPOINT_CANDIDATES = 64
FLOOR_FRACTION = 1e-3
LUT_SIZE = 4096
OBSERVATION_COLUMNS = ["channel", "bin_center", "sigma", "count"]


@dataclass(frozen=True)
class NoiseObservation:
    x: float
    sigma: float
    count: int
    channel: int = 0


class NoiseCurve(Protocol):
    value_range: Tuple[float, float]

    def sigma(self, x: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class ChannelNoiseModel:
    """
    Continuous two-segment linear sigma(x) for one channel

    Below the breakpoint sigma follows (slope1, intercept1), above it (slope2,
    intercept2); the result never drops under floor.
    """

    slope1: float
    intercept1: float
    slope2: float
    intercept2: float
    breakpoint: float
    x_min: float
    x_max: float
    floor: float = 0.0
    residual: float = 0.0
    single_segment: bool = False

    @property
    def value_range(self) -> Tuple[float, float]:
        return (self.x_min, self.x_max)

    @property
    def discontinuity(self) -> float:
        left = self.slope1 * self.breakpoint + self.intercept1
        right = self.slope2 * self.breakpoint + self.intercept2
        return abs(left - right)

    def sigma(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        raw = np.where(
            x < self.breakpoint,
            self.slope1 * x + self.intercept1,
            self.slope2 * x + self.intercept2,
        )
        return np.maximum(raw, self.floor)


@dataclass(frozen=True)
class NoiseModel:
    channels: Tuple[ChannelNoiseModel, ...]

    def __len__(self) -> int:
        return len(self.channels)

    def __getitem__(self, index: int) -> ChannelNoiseModel:
        return self.channels[index]

    @property
    def fallback(self) -> bool:
        """True when any channel had too few observations for the two-segment fit"""
        return any(ch.single_segment for ch in self.channels)

    @classmethod
    def constant(cls, sigma: float, channels: int = 4, value_range: Tuple[float, float] = (0.0, 255.0)) -> "NoiseModel":
        lo, hi = value_range
        flat = ChannelNoiseModel(0.0, sigma, 0.0, sigma, hi, lo, hi, floor=_floor(lo, hi))
        return cls(tuple(flat for _ in range(channels)))

    def to_text(self) -> str:
        lines = []
        for index, ch in enumerate(self.channels):
            lines.append(
                f"{index} {ch.slope1!r} {ch.intercept1!r} {ch.slope2!r} "
                f"{ch.intercept2!r} {ch.breakpoint!r} {ch.x_min!r} {ch.x_max!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NoiseModel":
        channels = []
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise NoiseEstimationError(f"Malformed noise model line: {line!r}")
            s1, i1, s2, i2, bp, lo, hi = (float(p) for p in parts[1:])
            channels.append(ChannelNoiseModel(s1, i1, s2, i2, bp, lo, hi, floor=_floor(lo, hi)))
        if not channels:
            raise NoiseEstimationError("Noise model text holds no channels")
        return cls(tuple(channels))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NoiseModel":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class FunctionNoiseCurve:
    """Arbitrary sigma(x) on a value range (used for synthetic curves)"""

    fn: Callable[[np.ndarray], np.ndarray]
    value_range: Tuple[float, float]

    def sigma(self, x) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def _floor(lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        span = max(abs(hi), 1.0)
    return FLOOR_FRACTION * span


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

def _dct_masks(side: int) -> Tuple[np.ndarray, np.ndarray]:
    i, j = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    quarter = side // 2
    low = (i < quarter) & (j < quarter)
    low[0, 0] = False
    high = (i + j) >= side
    return low, high


def _patch_statistics(plane: np.ndarray, side: int, step: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per patch: mean, low-frequency energy and the high-frequency DCT coefficients"""
    blocks = sliding_window_view(plane, (side, side))[::step, ::step]
    blocks = blocks.reshape(-1, side, side)
    coefs = dctn(blocks, axes=(1, 2), norm="ortho")
    low, high = _dct_masks(side)
    means = blocks.mean(axis=(1, 2))
    low_energy = np.sum(coefs[:, low] ** 2, axis=1)
    return means, low_energy, coefs[:, high]


def estimate_channel_curve(
    planes: List[np.ndarray],
    bins: int = DEFAULT_BINS,
    side: int = DCT_SIDE,
    step: int = 1,
    quantile: float = FLAT_QUANTILE,
    min_patches: int = MIN_BIN_PATCHES,
    channel: int = 0,
) -> List[NoiseObservation]:
    """
    Noise observations for one channel, pooling patches from every frame

    Patches are binned by their mean; in each bin the flattest ones (lowest
    low-frequency DCT energy) give sigma from the energy of their high-frequency
    coefficients.
    """
    stats = [_patch_statistics(p, side, step) for p in planes if min(p.shape) >= side]
    if not stats:
        raise NoiseEstimationError(f"Frames smaller than the {side}x{side} DCT patch")
    means = np.concatenate([s[0] for s in stats])
    low_energy = np.concatenate([s[1] for s in stats])
    high = np.concatenate([s[2] for s in stats])

    lo, hi = float(means.min()), float(means.max())
    if hi - lo <= 1e-12:
        edges = np.array([lo, hi])
    else:
        edges = np.linspace(lo, hi, bins + 1)
    index = np.clip(np.searchsorted(edges, means, side="right") - 1, 0, len(edges) - 2)

    observations = []
    for b in range(len(edges) - 1):
        members = np.flatnonzero(index == b)
        if members.size < min_patches:
            continue
        keep = min(members.size, max(int(math.ceil(quantile * members.size)), min_patches))
        flattest = members[np.argpartition(low_energy[members], keep - 1)[:keep]]
        sigma = float(np.sqrt(np.mean(high[flattest] ** 2)))
        # located at the mean of the contributing patches, not the bin midpoint
        center = float(np.mean(means[flattest]))
        observations.append(NoiseObservation(x=center, sigma=sigma, count=int(keep), channel=channel))
    return observations


def estimate_noise_curve(seq: Sequence, bins: int = DEFAULT_BINS, **kwargs) -> Dict[int, List[NoiseObservation]]:
    """
    Estimate noise observations independently for each channel of a sequence

    Args:
        seq: 4-channel (quad) sequence, all frames share one noise model
        bins: number of intensity bins over the observed range

    Returns:
        Mapping channel index -> observations (bins with too few patches dropped)
    """
    if bins < 2:
        raise NoiseEstimationError(f"Need at least 2 bins, got {bins}")
    result = {}
    for ch in range(seq.channels):
        result[ch] = estimate_channel_curve(seq.planes(ch), bins=bins, channel=ch, **kwargs)
        logger.debug(f"Channel {ch}: {len(result[ch])} noise observations")
    if not any(result.values()):
        raise NoiseEstimationError("Every intensity bin was empty; cannot estimate noise")
    return result


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _arrays(obs: List[NoiseObservation]) -> Tuple[np.ndarray, np.ndarray]:
    return (
        np.array([o.x for o in obs], dtype=np.float64),
        np.array([o.sigma for o in obs], dtype=np.float64),
    )


def _resolve_range(x: np.ndarray, value_range: Optional[Tuple[float, float]]) -> Tuple[float, float]:
    if value_range is not None:
        return float(value_range[0]), float(value_range[1])
    return float(x.min()), float(x.max())


def fit_single_linear(obs: List[NoiseObservation], value_range: Optional[Tuple[float, float]] = None) -> ChannelNoiseModel:
    """Least-squares line sigma = a + b x (a constant for a single observation)"""
    if not obs:
        raise NoiseEstimationError("Cannot fit a noise model without observations")
    x, y = _arrays(obs)
    lo, hi = _resolve_range(x, value_range)
    if len(obs) == 1:
        slope, intercept = 0.0, float(y[0])
    else:
        design = np.column_stack([np.ones_like(x), x])
        (intercept, slope), *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.sum((intercept + slope * x - y) ** 2))
    return ChannelNoiseModel(
        float(slope), float(intercept), float(slope), float(intercept), hi, lo, hi,
        floor=_floor(lo, hi), residual=residual, single_segment=True,
    )


def fit_piecewise_linear(
    obs: List[NoiseObservation],
    value_range: Optional[Tuple[float, float]] = None,
    candidates: int = BREAKPOINT_CANDIDATES,
) -> ChannelNoiseModel:
    """
    Continuous two-segment least-squares fit with an optimized breakpoint

    The model a + b*x + c*max(x - t, 0) is continuous by construction; t is scanned over
    evenly spaced candidates between the 5th and 95th percentiles of the observed
    intensities and the constrained least-squares problem is solved at each one.
    """
    if len(obs) < 3:
        logger.warning(f"Only {len(obs)} noise observations; falling back to a single linear fit")
        return fit_single_linear(obs, value_range)

    x, y = _arrays(obs)
    lo, hi = _resolve_range(x, value_range)
    p5, p95 = np.percentile(x, [5, 95])
    best = None
    for t in np.linspace(p5, p95, candidates):
        design = np.column_stack([np.ones_like(x), x, np.maximum(x - t, 0.0)])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        residual = float(np.sum((design @ coef - y) ** 2))
        if best is None or residual < best[0]:
            best = (residual, float(t), coef)

    residual, t, (a, b, c) = best
    return ChannelNoiseModel(
        slope1=float(b),
        intercept1=float(a),
        slope2=float(b + c),
        intercept2=float(a - c * t),
        breakpoint=t,
        x_min=lo,
        x_max=hi,
        floor=_floor(lo, hi),
        residual=residual,
    )


def fit_noise_model(
    observations: Dict[int, List[NoiseObservation]],
    value_ranges: Optional[Dict[int, Tuple[float, float]]] = None,
) -> NoiseModel:
    channels = []
    for ch in sorted(observations):
        rng = value_ranges.get(ch) if value_ranges else None
        channels.append(fit_piecewise_linear(observations[ch], rng))
    return NoiseModel(tuple(channels))


class NoiseEstimator:
    """Estimates the per-channel noise model shared by every frame of a quad sequence"""

    def __init__(self, bins: int = DEFAULT_BINS):
        self.stage_name = "NoiseEstimator"
        self.bins = bins
        logger.info(f"{self.stage_name} initialized ({bins} bins)")

    def estimate(self, quads: Sequence) -> Tuple[NoiseModel, Dict[int, List[NoiseObservation]]]:
        logger.info(f"{self.stage_name}: estimating noise over {len(quads)} frames")
        observations = estimate_noise_curve(quads, bins=self.bins)
        data = quads.stack()
        ranges = {
            ch: (float(data[..., ch].min()), float(data[..., ch].max()))
            for ch in range(quads.channels)
        }
        for ch, obs in observations.items():
            if not obs:
                logger.warning(f"{self.stage_name}: channel {ch} has no usable bins, borrowing channel data")
                observations[ch] = [o for other in observations.values() for o in other]
                observations[ch] = [replace(o, channel=ch) for o in observations[ch]]
        model = fit_noise_model(observations, ranges)
        for ch, m in enumerate(model.channels):
            logger.debug(
                f"{self.stage_name}: ch{ch} sigma = {m.slope1:.4f}x + {m.intercept1:.3f} | "
                f"{m.slope2:.4f}x + {m.intercept2:.3f} @ {m.breakpoint:.1f}"
            )
        logger.success(f"{self.stage_name}: noise model fitted")
        return model, observations


def observations_to_frame(observations: Dict[int, List[NoiseObservation]]) -> pd.DataFrame:
    rows = [
        {"channel": o.channel, "bin_center": o.x, "sigma": o.sigma, "count": o.count}
        for ch in sorted(observations)
        for o in observations[ch]
    ]
    return pd.DataFrame(rows, columns=OBSERVATION_COLUMNS)


def observations_to_csv(observations: Dict[int, List[NoiseObservation]], path: Union[str, Path]) -> Path:
    path = Path(path)
    observations_to_frame(observations).to_csv(path, index=False)
    return path


def observations_from_csv(path: Union[str, Path]) -> Dict[int, List[NoiseObservation]]:
    frame = pd.read_csv(path)
    missing = set(OBSERVATION_COLUMNS) - set(frame.columns)
    if missing:
        raise NoiseEstimationError(f"{path}: missing columns {sorted(missing)}")
    result: Dict[int, List[NoiseObservation]] = {}
    for row in frame.itertuples(index=False):
        ch = int(row.channel)
        result.setdefault(ch, []).append(
            NoiseObservation(x=float(row.bin_center), sigma=float(row.sigma), count=int(row.count), channel=ch)
        )
    return result


# ---------------------------------------------------------------------------
# stabilization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stabilizer:
    """
    Tabulated f(u) = integral from 0 to u of c / sigma(t) dt and its inverse

    Both directions interpolate linearly on the same nodes, values outside the
    tabulated range are clamped.
    """

    curve: NoiseCurve
    c: float
    grid: np.ndarray = field(repr=False)
    table: np.ndarray = field(repr=False)

    @property
    def value_range(self) -> Tuple[float, float]:
        return (float(self.grid[0]), float(self.grid[-1]))

    def forward(self, u) -> np.ndarray:
        return np.interp(np.asarray(u, dtype=np.float64), self.grid, self.table)

    def inverse(self, v) -> np.ndarray:
        return np.interp(np.asarray(v, dtype=np.float64), self.table, self.grid)


def build_stabilizer(curve: NoiseCurve, c: float, size: int = LUT_SIZE) -> Stabilizer:
    """
    Tabulate the generalized variance-stabilizing transform of a noise curve

    Args:
        curve: anything with sigma(x) and value_range
        c: noise amplitude after stabilization
        size: tabulation nodes over the value range

    Returns:
        Stabilizer whose forward map is strictly increasing over the range
    """
    if c <= 0:
        raise StabilizerError(f"c must be positive, got {c}")
    lo, hi = (float(v) for v in curve.value_range)
    if not hi > lo:
        raise StabilizerError(f"Empty stabilization range [{lo}, {hi}]")
    grid = np.linspace(lo, hi, size)
    sigma = curve.sigma(grid)
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise StabilizerError("Noise curve is not strictly positive over its range")

    integrand = c / sigma
    table = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(grid))])
    if lo != 0.0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            anchor, _ = integrate.quad(lambda t: c / float(curve.sigma(t)), 0.0, lo, limit=200)
        table += anchor
    if np.any(np.diff(table) <= 0):
        raise StabilizerError("Stabilizing transform is not strictly increasing")
    return Stabilizer(curve=curve, c=float(c), grid=grid, table=table)


def classical_anscombe(img: Image) -> Image:
    """2 * sqrt(u + 3/8) with negative inputs clamped to 0"""
    return img.with_data(2.0 * np.sqrt(np.maximum(img.data, 0.0) + 0.375))


def calibrate_c(curves: List[NoiseCurve], value_range: Tuple[float, float]) -> float:
    """
    Common c for all channels so the stabilized range matches the classical Anscombe range

    The widest unit-c channel range is matched, which keeps one noise level for every
    channel after stabilization.
    """
    lo, hi = value_range
    target = 2.0 * (math.sqrt(max(hi, 0.0) + 0.375) - math.sqrt(max(lo, 0.0) + 0.375))
    spans = []
    for curve in curves:
        unit = build_stabilizer(curve, 1.0)
        spans.append(float(unit.table[-1] - unit.table[0]))
    widest = max(spans)
    if target <= 0 or widest <= 0:
        raise StabilizerError(f"Cannot calibrate c over range [{lo}, {hi}]")
    return target / widest


StabilizerArg = Union[Stabilizer, List[Stabilizer], Tuple[Stabilizer, ...]]


def _per_channel(img: Image, s: StabilizerArg) -> List[Stabilizer]:
    if isinstance(s, Stabilizer):
        return [s] * img.channels
    if len(s) != img.channels:
        raise StabilizerError(f"{len(s)} stabilizers for {img.channels} channels")
    return list(s)


def stabilize(img: Image, s: StabilizerArg) -> Image:
    out = np.empty_like(img.data)
    for ch, stab in enumerate(_per_channel(img, s)):
        out[..., ch] = stab.forward(img.data[..., ch])
    return img.with_data(out)


def unstabilize(img: Image, s: StabilizerArg) -> Image:
    out = np.empty_like(img.data)
    for ch, stab in enumerate(_per_channel(img, s)):
        out[..., ch] = stab.inverse(img.data[..., ch])
    return img.with_data(out)
