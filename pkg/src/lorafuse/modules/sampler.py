"""Deterministic reverse-diffusion sampling with fusion and optional guidance."""

from dataclasses import dataclass
from typing import Iterator, Optional, Union

from ..core.diffusion import NoiseSchedule, NoiseSource, SamplerConfig, ddim_step
from ..core.numerics import Tensor
from ..utils.logger import get_logger
from .fusion import LayerSelection, LoRAFusion, SelectionTrace
from .guidance import GuidanceContext, guided_step


@dataclass(frozen=True)
class SampleResult:
    """Final image plus everything recorded on the way.

    ``trajectory[0]`` is the initial noise x_T and ``trajectory[i + 1]`` the
    latent after step i. ``residuals[i]`` is the guidance residual at step i,
    or None where guidance did not run.
    """

    image: Tensor
    trace: SelectionTrace
    trajectory: tuple[Tensor, ...]
    residuals: tuple[Optional[float], ...]

    def __iter__(self) -> Iterator[Union[Tensor, SelectionTrace]]:
        yield self.image
        yield self.trace

    @property
    def final_residual(self) -> Optional[float]:
        """Residual of the last guided step, if any."""
        for r in reversed(self.residuals):
            if r is not None:
                return r
        return None


def sample(
    fusion: LoRAFusion,
    config: Optional[SamplerConfig] = None,
    guidance: Optional[GuidanceContext] = None,
    schedule: Optional[NoiseSchedule] = None,
) -> SampleResult:
    """Run the reverse process from seeded Gaussian noise to a clean image.

    Args:
        fusion: Model, adapters and fusion policy.
        config: Step count and seed.
        guidance: Optional reference guidance; applied at the steps its stride admits.
        schedule: Noise schedule.

    Returns:
        The final image, the per-step selection trace, the latent trajectory
        and the per-step residuals.

    Raises:
        GuidanceError: If a guided correction fails; carries the 0-based step index.
    """
    config = config or SamplerConfig()
    schedule = schedule or NoiseSchedule()
    logger = get_logger()

    x = NoiseSource(config.seed).normal(fusion.model.input_dim)
    trace = SelectionTrace()
    trajectory = [x]
    residuals: list[Optional[float]] = []

    for index, (t, t_prev) in enumerate(config.step_pairs(schedule)):
        if guidance is not None and guidance.applies_at(index):
            step = guided_step(guidance, fusion, x, t, t_prev, schedule, step_index=index)
            x = step.x_prev
            row: list[LayerSelection] = list(step.selections)
            residuals.append(step.residual)
        else:
            row = []
            eps = fusion.predict(x, t, row=row)
            x = ddim_step(x, eps, t, t_prev, schedule)
            residuals.append(None)
            logger.metric("sample_step", step=index, t=t, selections=len(row))
        trace.append(row)
        trajectory.append(x)

    return SampleResult(
        image=x,
        trace=trace,
        trajectory=tuple(trajectory),
        residuals=tuple(residuals),
    )
