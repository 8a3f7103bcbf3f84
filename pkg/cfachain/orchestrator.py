"""
Chain Orchestrator
Runs the enabled stages of the CFA chain in order and reports per-phase timing
"""
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
from loguru import logger

from .cfa_io import CfaImage, cfa_to_quad
from .colorspace import gamma_correct, gray_world_wb
from .config import PipelineConfig
from .demosaick import SequenceDemosaicker
from .denoiser import CfaDenoiser
from .errors import ImageError, PipelineError
from .imgseq import Sequence
from .noise_model import NoiseEstimator, NoiseModel
from .parallel import run_sync


class ChainOrchestrator:
    """
    Coordinates noise estimation, denoising, demosaicking and the display chain
    """

    def __init__(self, cfg: Optional[PipelineConfig] = None):
        self.cfg = cfg or PipelineConfig()
        self.stage_name = "ChainOrchestrator"

        logger.info("=" * 60)
        logger.info(f"{self.stage_name} initialized")
        logger.info(
            f"stages: denoise={self.cfg.stages.denoise} demosaick_st={self.cfg.stages.demosaick_st} "
            f"imaging_chain={self.cfg.stages.imaging_chain}"
        )
        logger.info("=" * 60)

    def _validate(self, cfa_seq: List[CfaImage]) -> None:
        if not cfa_seq:
            raise ImageError("Empty CFA sequence")
        first = cfa_seq[0]
        for index, cfa in enumerate(cfa_seq):
            if (cfa.width, cfa.height) != (first.width, first.height):
                raise ImageError(f"Frame {index} is {cfa.width}x{cfa.height}, expected {first.width}x{first.height}")
            if cfa.pattern != first.pattern:
                raise ImageError(f"Frame {index} uses {cfa.pattern.value}, expected {first.pattern.value}")

    def _sigma_fn(self, cfa_seq: List[CfaImage]) -> Callable[[float], float]:
        """Green noise std as a function of intensity, for frames that were not denoised"""
        quads = Sequence(tuple(cfa_to_quad(cfa).img for cfa in cfa_seq))
        if self.cfg.noise.mode == "fixed":
            model = NoiseModel.constant(self.cfg.noise.sigma)
        else:
            model, _ = NoiseEstimator(self.cfg.noise.bins).estimate(quads)
        g1, g2 = model[1], model[2]
        return lambda x: 0.5 * float(g1.sigma(x) + g2.sigma(x))

    async def run(self, cfa_seq: List[CfaImage], dump_dir: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
        """
        Process a CFA sequence end to end

        Args:
            cfa_seq: raw CFA frames sharing size and pattern
            dump_dir: where to save .npy intermediates, or None

        Returns:
            Result dict; "output" holds the full-color Sequence when "success" is True
        """
        start_time = datetime.now()
        timings: Dict[str, float] = {}
        phase = "validation"

        try:
            logger.info("PHASE 1: Input Validation")
            self._validate(cfa_seq)
            logger.success(f"✓ {len(cfa_seq)} frames {cfa_seq[0].width}x{cfa_seq[0].height} {cfa_seq[0].pattern.value}")

            frames = list(cfa_seq)
            intermediates: Dict[str, np.ndarray] = {}

            phase = "denoising"
            if self.cfg.stages.denoise:
                logger.info("\nPHASE 2: CFA Denoising")
                t0 = datetime.now()
                denoiser = CfaDenoiser(self.cfg)
                frames = await denoiser.denoise(frames)
                timings[phase] = (datetime.now() - t0).total_seconds()
                intermediates["denoised_cfa"] = np.stack([f.img.plane for f in frames])
                if "yuvw" in denoiser.state:
                    intermediates["yuvw"] = denoiser.state["yuvw"]
                logger.success(f"✓ Denoising done in {timings[phase]:.1f}s")
            else:
                logger.info("\nPHASE 2: CFA Denoising (skipped)")

            phase = "demosaicking"
            logger.info("\nPHASE 3: Demosaicking")
            t0 = datetime.now()
            demosaicker = SequenceDemosaicker(self.cfg.interp, self.cfg.flow, workers=self.cfg.workers)
            if self.cfg.stages.demosaick_st:
                sigma_fn = None if self.cfg.stages.denoise else self._sigma_fn(frames)
                output = await demosaicker.demosaick(frames, sigma_fn)
                intermediates["init"] = demosaicker.state["init"].stack()
            else:
                output = await demosaicker.initialize(frames)
                intermediates["init"] = output.stack()
            timings[phase] = (datetime.now() - t0).total_seconds()
            logger.success(f"✓ Demosaicking done in {timings[phase]:.1f}s")

            phase = "imaging_chain"
            if self.cfg.stages.imaging_chain:
                logger.info("\nPHASE 4: Imaging Chain")
                t0 = datetime.now()
                output = self._imaging_chain(output)
                timings[phase] = (datetime.now() - t0).total_seconds()
            else:
                logger.info("\nPHASE 4: Imaging Chain (skipped)")

            intermediates["output"] = output.stack()
            if dump_dir is not None:
                phase = "dump"
                self._dump(intermediates, Path(dump_dir))

            processing_time = (datetime.now() - start_time).total_seconds()
            logger.info("=" * 60)
            logger.success(f"Pipeline complete in {processing_time:.1f} seconds")
            logger.info("=" * 60)

            return {
                "success": True,
                "output": output,
                "timings": timings,
                "metadata": {
                    "processing_time_seconds": processing_time,
                    "timestamp": datetime.now().isoformat(),
                    "frames": len(cfa_seq),
                    "stages": self.cfg.stages.model_dump(),
                },
            }

        except Exception as e:
            logger.error(f"Orchestrator error in {phase}: {str(e)}")
            import traceback
            logger.error(traceback.format_exc())

            return {
                "success": False,
                "error": str(e),
                "phase": phase,
            }

    def _imaging_chain(self, seq: Sequence) -> Sequence:
        frames = []
        for frame in seq:
            if self.cfg.imaging.white_balance:
                frame = gray_world_wb(frame)
            frames.append(gamma_correct(frame, self.cfg.imaging.gamma))
        return Sequence(tuple(frames))

    def _dump(self, intermediates: Dict[str, np.ndarray], directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        for name, data in intermediates.items():
            np.save(directory / f"{name}.npy", data)
        logger.info(f"Intermediates written to {directory}")

    def get_stage_status(self) -> Dict[str, str]:
        stages = self.cfg.stages
        return {
            "directional_init": "✓ Enabled",
            "denoise": "✓ Enabled" if stages.denoise else "- Skipped",
            "demosaick_st": "✓ Enabled" if stages.demosaick_st else "- Skipped",
            "imaging_chain": "✓ Enabled" if stages.imaging_chain else "- Skipped",
        }


def run_pipeline(cfa_seq: List[CfaImage], cfg: Optional[PipelineConfig] = None,
                 dump_dir: Optional[Union[str, Path]] = None) -> Sequence:
    """Synchronous pipeline entry point; raises PipelineError when a phase fails"""
    result = run_sync(ChainOrchestrator(cfg).run(cfa_seq, dump_dir))
    if not result["success"]:
        raise PipelineError(result["error"], result["phase"])
    return result["output"]
