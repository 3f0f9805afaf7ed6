"""Toy training: the base denoiser and low-rank adapters on a frozen base.

Both objectives are the epsilon-prediction MSE at uniformly sampled
timesteps, optimized with Adam. Training is single-threaded and fully
determined by the seed.
"""

import csv
import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..core.diffusion import NoiseSchedule
from ..core.model import (
    DEFAULT_RANK,
    AdapterLayer,
    DenoiserModel,
    LinearLayer,
    LoRAAdapter,
    forward_layer,
)
from ..core.numerics import GradientTrace, Tensor, gradients, mean, square, sub
from ..utils.logger import get_logger
from ..utils.validators import (
    NonFiniteError,
    TrainingDivergedError,
    ValidationError,
    validate_finite_scalar,
    validate_non_negative_integer,
    validate_positive_integer,
)
from .dataset import (
    CONTENT_ADAPTER_CELLS,
    STYLE_ADAPTER_CELLS,
    ContentClass,
    LabeledImage,
    StyleClass,
    as_matrix,
    select_cells,
)


class AdapterRole(str, Enum):
    CONTENT = "content"
    STYLE = "style"

    @property
    def cells(self) -> tuple[tuple[ContentClass, StyleClass], ...]:
        return CONTENT_ADAPTER_CELLS if self is AdapterRole.CONTENT else STYLE_ADAPTER_CELLS


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for one training run."""

    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    log_every: int = 100

    def __post_init__(self) -> None:
        validate_non_negative_integer(self.steps, "steps")
        if validate_finite_scalar(self.learning_rate, "learning_rate") <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        validate_positive_integer(self.batch_size, "batch_size")
        validate_non_negative_integer(self.seed, "seed")
        validate_positive_integer(self.log_every, "log_every")


class Adam:
    """Adam over plain NumPy arrays (beta1 = 0.9, beta2 = 0.999, eps = 1e-8 by default)."""

    def __init__(
        self,
        parameters: Sequence[np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in parameters]
        self.v = [np.zeros_like(p) for p in parameters]

    def step(self, parameters: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Return updated copies of the parameters."""
        if len(parameters) != len(self.m) or len(grads) != len(self.m):
            raise ValidationError(
                f"Adam tracks {len(self.m)} parameters, got {len(parameters)} and {len(grads)} gradients"
            )
        self.t += 1
        updated = []
        for i, (param, grad) in enumerate(zip(parameters, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            updated.append(param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return updated


@dataclass(frozen=True)
class BaseTrainingResult:
    model: DenoiserModel
    losses: tuple[float, ...]


@dataclass(frozen=True)
class AdapterTrainingResult:
    adapter: LoRAAdapter
    losses: tuple[float, ...]


def _draw_batch(
    rng: np.random.Generator,
    data: np.ndarray,
    batch_size: int,
    schedule: NoiseSchedule,
) -> tuple[np.ndarray, list[int], np.ndarray]:
    rows = rng.integers(0, data.shape[0], size=batch_size)
    steps = rng.integers(0, schedule.train_steps, size=batch_size)
    noise = rng.standard_normal((batch_size, data.shape[1]))
    abar = schedule.alpha_bars[steps][:, None]
    x_t = np.sqrt(abar) * data[rows] + np.sqrt(1.0 - abar) * noise
    return x_t, [int(t) for t in steps], noise


def _check_data(data: np.ndarray, input_dim: int) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValidationError(f"training data must be a non-empty (N, D) array, got {data.shape}")
    if data.shape[1] != input_dim:
        raise ValidationError(f"training images have {data.shape[1]} values, model expects {input_dim}")
    return data


def _check_loss(loss: Tensor, step: int) -> float:
    value = float(loss)
    if not np.isfinite(value):
        raise TrainingDivergedError(step, value)
    return value


def train_base(
    data: np.ndarray,
    config: TrainConfig,
    model: Optional[DenoiserModel] = None,
    schedule: Optional[NoiseSchedule] = None,
) -> BaseTrainingResult:
    """Fit every base weight and bias to predict the added noise.

    Args:
        data: Clean images, shape (N, D).
        config: Optimizer settings.
        model: Starting model; a fresh default-sized model seeded from
            ``config.seed`` when None.
        schedule: Noise schedule.

    Returns:
        The trained model and the loss of every step (before its update).

    Raises:
        TrainingDivergedError: If the loss stops being finite.
    """
    schedule = schedule or NoiseSchedule()
    model = model or DenoiserModel.initialize(input_dim=np.shape(data)[-1], seed=config.seed)
    data = _check_data(data, model.input_dim)
    logger = get_logger()
    rng = np.random.default_rng(config.seed)

    params = [a for layer in model.layers for a in (layer.w0.numpy(), layer.bias.numpy())]
    optimizer = Adam(params, lr=config.learning_rate)
    losses = []

    for step in range(config.steps):
        x_t, steps, noise = _draw_batch(rng, data, config.batch_size, schedule)
        try:
            with GradientTrace() as trace:
                leaves = [trace.register(Tensor(p)) for p in params]
                layers = [LinearLayer(w0=w, bias=b) for w, b in zip(leaves[0::2], leaves[1::2])]
                pred = model.with_layers(layers).forward(Tensor(x_t), steps)
                loss = mean(square(sub(pred, noise)))
            grads = gradients(trace, loss, leaves)
        except NonFiniteError as e:
            raise TrainingDivergedError(step, float("nan")) from e
        losses.append(_check_loss(loss, step))
        params = optimizer.step(params, [g.data for g in grads])
        if step % config.log_every == 0:
            logger.metric("base_train", step=step, loss=losses[-1])

    layers = [
        LinearLayer(w0=Tensor(w), bias=Tensor(b)) for w, b in zip(params[0::2], params[1::2])
    ]
    return BaseTrainingResult(model=model.with_layers(layers), losses=tuple(losses))


def train_adapter(
    model: DenoiserModel,
    data: np.ndarray,
    config: TrainConfig,
    rank: int = DEFAULT_RANK,
    alpha: Optional[float] = None,
    name: str = "adapter",
    schedule: Optional[NoiseSchedule] = None,
) -> AdapterTrainingResult:
    """Fit a low-rank adapter on a frozen base model.

    Only the down/up projections are registered on the trace; the base
    weights are constants and come back untouched.

    Args:
        model: Frozen base model.
        data: Clean images, shape (N, D).
        config: Optimizer settings; the seed drives both the adapter
            initialization and the batches.
        rank: Adapter rank.
        alpha: Scale numerator (defaults to rank).
        name: Adapter label.
        schedule: Noise schedule.

    Returns:
        The trained adapter and the per-step losses.

    Raises:
        TrainingDivergedError: If the loss stops being finite.
    """
    schedule = schedule or NoiseSchedule()
    data = _check_data(data, model.input_dim)
    logger = get_logger()
    adapter = LoRAAdapter.initialize(model, rank=rank, alpha=alpha, seed=config.seed, name=name)
    rng = np.random.default_rng([config.seed, 1])

    indices = adapter.indices
    alphas = {i: adapter.layers[i].alpha for i in indices}
    params = [a for i in indices for a in (adapter.layers[i].down.numpy(), adapter.layers[i].up.numpy())]
    optimizer = Adam(params, lr=config.learning_rate)
    losses = []

    for step in range(config.steps):
        x_t, steps, noise = _draw_batch(rng, data, config.batch_size, schedule)
        try:
            with GradientTrace() as trace:
                leaves = [trace.register(Tensor(p)) for p in params]
                deltas = {
                    i: AdapterLayer(down=d, up=u, alpha=alphas[i]).delta()
                    for i, d, u in zip(indices, leaves[0::2], leaves[1::2])
                }
                pred = model.forward(
                    Tensor(x_t), steps, lambda i, layer, h: forward_layer(layer, deltas[i], h)
                )
                loss = mean(square(sub(pred, noise)))
            grads = gradients(trace, loss, leaves)
        except NonFiniteError as e:
            raise TrainingDivergedError(step, float("nan")) from e
        losses.append(_check_loss(loss, step))
        params = optimizer.step(params, [g.data for g in grads])
        if step % config.log_every == 0:
            logger.metric("adapter_train", adapter=name, step=step, loss=losses[-1])

    layers = {
        i: AdapterLayer(down=Tensor(d), up=Tensor(u), alpha=alphas[i])
        for i, d, u in zip(indices, params[0::2], params[1::2])
    }
    return AdapterTrainingResult(adapter=LoRAAdapter(layers=layers, name=name), losses=tuple(losses))


def adapter_training_data(images: Sequence[LabeledImage], role: Union[AdapterRole, str]) -> np.ndarray:
    """Images of the cells an adapter of the given role specializes in.

    Raises:
        ValidationError: If none of the images belong to those cells.
    """
    role = AdapterRole(role)
    return as_matrix(select_cells(images, role.cells))


def loss_csv_text(losses: Sequence[float]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("step", "loss"))
    for step, loss in enumerate(losses):
        writer.writerow((step, repr(float(loss))))
    return buffer.getvalue()


def write_loss_csv(path: Union[str, Path], losses: Sequence[float]) -> Path:
    """One row per optimizer step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(loss_csv_text(losses), encoding="utf-8")
    return path
