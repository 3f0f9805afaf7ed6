"""Noise schedule, forward noising, x0 prediction, and the deterministic DDIM step."""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ..utils.validators import (
    ContractError,
    DimensionError,
    ValidationError,
    validate_non_negative_integer,
    validate_positive_integer,
)
from .numerics import Tensor, add, as_tensor, mul, sub

DEFAULT_TRAIN_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_SAMPLING_STEPS = 50

# t_prev used for the last reverse step; its alpha-bar is exactly 1.
FINAL_STEP = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cumulative alpha products."""

    train_steps: int = DEFAULT_TRAIN_STEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        validate_positive_integer(self.train_steps, "train_steps")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ValidationError(
                f"need 0 < beta_start < beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        betas = np.linspace(self.beta_start, self.beta_end, self.train_steps)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for array in (betas, alphas, alpha_bars):
            array.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def check_step(self, t: int) -> int:
        """Validate a timestep index.

        Raises:
            ContractError: If t is outside [0, train_steps).
        """
        t = int(t)
        if not 0 <= t < self.train_steps:
            raise ContractError(f"timestep {t} outside [0, {self.train_steps})")
        return t

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at t; the final step (t = -1) maps to 1."""
        if t == FINAL_STEP:
            return 1.0
        return float(self.alpha_bars[self.check_step(t)])

    def timesteps(self, num_steps: int) -> list[int]:
        """Sampling timesteps in decreasing order with a uniform stride over [0, T)."""
        num_steps = validate_positive_integer(num_steps, "num_steps")
        if num_steps > self.train_steps:
            raise ValidationError(f"num_steps {num_steps} exceeds train_steps {self.train_steps}")
        stride = self.train_steps // num_steps
        return [i * stride for i in range(num_steps)][::-1]


@dataclass(frozen=True)
class SamplerConfig:
    """Deterministic (eta = 0) DDIM sampling settings."""

    num_steps: int = DEFAULT_SAMPLING_STEPS
    seed: int = 0
    eta: float = 0.0

    def __post_init__(self) -> None:
        validate_positive_integer(self.num_steps, "num_steps")
        validate_non_negative_integer(self.seed, "seed")
        if self.eta != 0.0:
            raise ValidationError("only deterministic sampling (eta = 0) is supported")

    def step_pairs(self, schedule: NoiseSchedule) -> list[tuple[int, int]]:
        """(t, t_prev) pairs visited by the reverse process, ending at t_prev = -1."""
        steps = schedule.timesteps(self.num_steps)
        return list(zip(steps, steps[1:] + [FINAL_STEP]))


class NoiseSource:
    """Seedable standard-normal source.

    Uses NumPy's PCG64 bit generator and ``Generator.standard_normal``
    (ziggurat), so any PCG64 implementation seeded through ``SeedSequence``
    reproduces the same draws.
    """

    ALGORITHM = "numpy.random.PCG64/standard_normal"

    def __init__(self, seed: int) -> None:
        """Initialize the source.

        Args:
            seed: Non-negative integer seed.
        """
        self.seed = validate_non_negative_integer(seed, "seed")
        self._rng = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape: Union[int, tuple[int, ...]]) -> Tensor:
        """Draw standard-normal values."""
        return Tensor(self._rng.standard_normal(shape))


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def q_sample(
    x0: Tensor,
    t: int,
    noise: Tensor,
    schedule: Optional[NoiseSchedule] = None,
) -> Tensor:
    """Forward noising sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise.

    Raises:
        ContractError: If t is out of range.
        DimensionError: If noise and x0 differ in shape.
    """
    schedule = schedule or NoiseSchedule()
    x0, noise = as_tensor(x0), as_tensor(noise)
    _same_shape(x0, noise, "q_sample")
    abar = schedule.alpha_bar(schedule.check_step(t))
    return add(mul(x0, np.sqrt(abar)), mul(noise, np.sqrt(1.0 - abar)))


def predict_x0(
    x_t: Tensor,
    eps_hat: Tensor,
    t: int,
    schedule: Optional[NoiseSchedule] = None,
) -> Tensor:
    """Clean-image estimate (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t), unclipped."""
    schedule = schedule or NoiseSchedule()
    x_t, eps_hat = as_tensor(x_t), as_tensor(eps_hat)
    _same_shape(x_t, eps_hat, "predict_x0")
    abar = schedule.alpha_bar(schedule.check_step(t))
    return mul(sub(x_t, mul(eps_hat, np.sqrt(1.0 - abar))), 1.0 / np.sqrt(abar))


def ddim_step(
    x_t: Tensor,
    eps_hat: Tensor,
    t: int,
    t_prev: int,
    schedule: Optional[NoiseSchedule] = None,
) -> Tensor:
    """Deterministic DDIM update from t to t_prev (eta = 0).

    Args:
        x_t: Latent at step t.
        eps_hat: Predicted noise at step t.
        t: Current timestep.
        t_prev: Earlier timestep, or -1 for the final step to the clean image.
        schedule: Noise schedule.

    Returns:
        sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps_hat.

    Raises:
        ContractError: If t_prev is not strictly below t.
    """
    schedule = schedule or NoiseSchedule()
    if t_prev >= t:
        raise ContractError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    x0_hat = predict_x0(x_t, eps_hat, t, schedule)
    abar_prev = schedule.alpha_bar(t_prev)
    return add(mul(x0_hat, np.sqrt(abar_prev)), mul(eps_hat, np.sqrt(1.0 - abar_prev)))
