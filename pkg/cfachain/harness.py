"""
Experiment Harness
Noisy CFA simulation, central-frame RMSE reports, variant sweeps and noise-curve plots
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from .cfa_io import BayerPattern, CfaImage, QUAD_CHANNELS, mosaic  # noqa: E402
from .config import VARIANTS, PipelineConfig  # noqa: E402
from .errors import ImageError  # noqa: E402
from .imgseq import Sequence, rmse  # noqa: E402
from .noise_model import NoiseCurve, NoiseModel, fit_piecewise_linear, fit_single_linear, observations_from_csv  # noqa: E402

AVERAGE_ROW = "average"
REPORT_HEADER = "# central-frame RMSE on unclipped real-valued outputs"


def _check_color_frames(seq: Sequence) -> None:
    if seq.channels != 3:
        raise ImageError(f"Simulation needs 3-channel frames, got {seq.channels}")


def simulate(clean_seq: Sequence, pattern: Union[str, BayerPattern], sigma: float, seed: int = 0) -> List[CfaImage]:
    """
    Mosaic every frame and add i.i.d. Gaussian noise of std sigma

    No imaging chain is applied. The same seed gives bit-identical frames.
    """
    _check_color_frames(clean_seq)
    if sigma < 0:
        raise ImageError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    out = []
    for frame in clean_seq:
        cfa = mosaic(frame, pattern)
        if sigma > 0:
            noisy = cfa.img.plane + rng.normal(0.0, sigma, cfa.img.plane.shape)
            cfa = CfaImage(cfa.img.with_data(noisy), cfa.pattern)
        out.append(cfa)
    logger.debug(f"Simulated {len(out)} CFA frames at sigma={sigma} (seed {seed})")
    return out


def simulate_signal_dependent(clean_seq: Sequence, pattern: Union[str, BayerPattern], curve: NoiseCurve,
                              seed: int = 0) -> List[CfaImage]:
    """Like simulate, but the noise std at each sample is curve.sigma(clean value)"""
    _check_color_frames(clean_seq)
    rng = np.random.default_rng(seed)
    out = []
    for frame in clean_seq:
        cfa = mosaic(frame, pattern)
        plane = cfa.img.plane
        noisy = plane + rng.standard_normal(plane.shape) * curve.sigma(plane)
        out.append(CfaImage(cfa.img.with_data(noisy), cfa.pattern))
    return out


@dataclass
class EvalReport:
    """RMSE table: one row per sequence, one column per variant"""

    table: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def averages(self) -> pd.Series:
        return self.table.mean(axis=0)

    def to_frame(self) -> pd.DataFrame:
        frame = self.table.copy()
        frame.loc[AVERAGE_ROW] = self.averages
        frame.index.name = "sequence"
        return frame

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            f.write(REPORT_HEADER + "\n")
            self.to_frame().to_csv(f, float_format="%.4f")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "EvalReport":
        frame = pd.read_csv(path, comment="#", index_col=0)
        return cls(frame.drop(index=AVERAGE_ROW, errors="ignore"))

    def to_text(self) -> str:
        return REPORT_HEADER + "\n" + self.to_frame().to_string(float_format=lambda v: f"{v:.2f}")

    @classmethod
    def combine(cls, reports: Iterable["EvalReport"]) -> "EvalReport":
        """Stack per-sequence reports into one multi-sequence table"""
        tables = [r.table for r in reports]
        if not tables:
            return cls()
        return cls(pd.concat(tables, axis=0))


def evaluate(result_seqs: Dict[str, Sequence], truth: Sequence, name: str = "sequence") -> EvalReport:
    """
    Central-frame RMSE of every variant against the ground truth

    Args:
        result_seqs: variant name -> reconstructed sequence
        truth: clean sequence
        name: row label of this sequence

    Returns:
        Single-row EvalReport
    """
    k = truth.central_index
    row = {}
    for variant, seq in result_seqs.items():
        if len(seq) != len(truth):
            raise ImageError(f"{variant}: {len(seq)} frames, truth has {len(truth)}")
        row[variant] = rmse(seq[k], truth[k])
    return EvalReport(pd.DataFrame([row], index=[name]))


def run_variants(cfa_seq: List[CfaImage], cfg: Optional[PipelineConfig] = None,
                 variants: Optional[Iterable[str]] = None) -> Dict[str, Sequence]:
    """Run the pipeline once per named variant on the same CFA input"""
    from .orchestrator import run_pipeline

    cfg = cfg or PipelineConfig()
    results = {}
    for name in variants or VARIANTS:
        if name not in VARIANTS:
            raise KeyError(f"Unknown variant '{name}', expected one of {sorted(VARIANTS)}")
        logger.info(f"Variant {name}")
        results[name] = run_pipeline(cfa_seq, cfg.with_stages(**VARIANTS[name]))
    return results


def plot_noise_curve(csv_path: Union[str, Path], png_path: Union[str, Path],
                     model: Optional[NoiseModel] = None) -> Path:
    """
    Render noise observations with the two-segment and single-segment fits

    The fits are recomputed from the CSV when no model is given.
    """
    observations = observations_from_csv(csv_path)
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    colors = ["tab:red", "tab:green", "tab:olive", "tab:blue"]
    for ch in sorted(observations):
        obs = observations[ch]
        x = np.array([o.x for o in obs])
        s = np.array([o.sigma for o in obs])
        color = colors[ch % len(colors)]
        label = QUAD_CHANNELS[ch] if ch < len(QUAD_CHANNELS) else f"ch{ch}"
        ax.scatter(x, s, s=14, color=color, label=f"{label} observed")
        two = model[ch] if model is not None else fit_piecewise_linear(obs)
        one = fit_single_linear(obs)
        grid = np.linspace(*two.value_range, 200)
        ax.plot(grid, two.sigma(grid), color=color)
        ax.plot(grid, one.sigma(grid), color=color, linestyle="--", alpha=0.6)
    ax.set_xlabel("intensity")
    ax.set_ylabel("noise std")
    ax.set_title("Noise curve (solid: two-segment, dashed: single-segment)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return png_path
