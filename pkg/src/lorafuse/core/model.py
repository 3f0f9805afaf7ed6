"""Toy epsilon-prediction denoiser and low-rank adapters.

The denoiser is a stack of affine layers with SiLU between hidden layers and a
sinusoidal time embedding concatenated to the noisy input. Adapters store the
weight update of a layer as ``(alpha / r) * up @ down``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from ..utils.validators import (
    ContractError,
    DimensionError,
    ValidationError,
    validate_even,
    validate_finite_scalar,
    validate_non_negative_integer,
    validate_positive_integer,
)
from .numerics import Tensor, add, as_tensor, concat, matmul, mul, silu, transpose

DEFAULT_TIME_EMBED_DIM = 16
DEFAULT_RANK = 4
ADAPTER_INIT_STD = 0.02

LayerFn = Callable[[int, "LinearLayer", Tensor], Tensor]


def time_embedding(t: int, dim: int = DEFAULT_TIME_EMBED_DIM) -> Tensor:
    """Sinusoidal embedding of a timestep.

    Entry 2k is sin(t * w_k) and entry 2k+1 is cos(t * w_k) with
    w_k = 10000 ** (-2k / dim).

    Raises:
        ContractError: If dim is odd.
    """
    return Tensor(_embedding_rows(np.array([validate_non_negative_integer(t, "t")]), dim)[0])


def time_embeddings(ts: Sequence[int], dim: int = DEFAULT_TIME_EMBED_DIM) -> Tensor:
    """Stack of time embeddings, one row per timestep."""
    steps = np.asarray([validate_non_negative_integer(int(t), "t") for t in ts])
    return Tensor(_embedding_rows(steps, dim))


def _embedding_rows(steps: np.ndarray, dim: int) -> np.ndarray:
    dim = validate_even(dim, "time embedding dim")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    angles = steps.astype(np.float64)[:, None] * omega[None, :]
    out = np.empty((steps.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


@dataclass(frozen=True)
class LinearLayer:
    """Affine layer holding the frozen base weights W0."""

    w0: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if self.w0.ndim != 2 or min(self.w0.shape) < 1:
            raise DimensionError(f"w0 must be a non-empty matrix, got {self.w0.shape}")
        if self.bias.shape != (self.w0.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match w0 rows {self.w0.shape[0]}"
            )

    @property
    def in_features(self) -> int:
        return self.w0.shape[1]

    @property
    def out_features(self) -> int:
        return self.w0.shape[0]


def forward_layer(layer: LinearLayer, adapter_delta: Optional[Tensor], x: Tensor) -> Tensor:
    """Apply (W0 + delta) to a vector or to each row of a matrix, then add the bias.

    Args:
        layer: Layer with base weights.
        adapter_delta: Effective weight update with the shape of W0, or None.
        x: Input vector of length n or a batch of shape (B, n).

    Returns:
        Output vector of length m or batch of shape (B, m).

    Raises:
        DimensionError: If the shapes do not chain.
    """
    weight = layer.w0
    if adapter_delta is not None:
        if adapter_delta.shape != layer.w0.shape:
            raise DimensionError(
                f"adapter delta {adapter_delta.shape} does not match layer {layer.w0.shape}"
            )
        weight = add(layer.w0, adapter_delta)

    x = as_tensor(x)
    if x.ndim == 1:
        return add(matmul(weight, x), layer.bias)
    if x.ndim == 2:
        return add(matmul(x, transpose(weight)), layer.bias)
    raise DimensionError(f"layer input must be a vector or a batch, got {x.shape}")


@dataclass(frozen=True)
class AdapterLayer:
    """Low-rank update for one layer: delta = (alpha / r) * up @ down."""

    down: Tensor
    up: Tensor
    alpha: float

    def __post_init__(self) -> None:
        if self.down.ndim != 2 or self.up.ndim != 2:
            raise DimensionError("adapter factors must be matrices")
        if self.up.shape[1] != self.down.shape[0]:
            raise DimensionError(
                f"up {self.up.shape} and down {self.down.shape} disagree on the rank"
            )
        if self.rank > min(self.out_features, self.in_features):
            raise ContractError(
                f"rank {self.rank} exceeds min({self.out_features}, {self.in_features})"
            )
        if validate_finite_scalar(self.alpha, "alpha") <= 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def in_features(self) -> int:
        return self.down.shape[1]

    @property
    def out_features(self) -> int:
        return self.up.shape[0]

    @property
    def scale(self) -> float:
        return float(self.alpha) / self.rank

    def delta(self) -> Tensor:
        """Effective update (alpha / r) * up @ down."""
        return mul(matmul(self.up, self.down), self.scale)

    def apply(self, x: Tensor) -> Tensor:
        """Low-rank path (alpha / r) * up @ (down @ x), for a vector or batch rows."""
        x = as_tensor(x)
        if x.ndim == 1:
            return mul(matmul(self.up, matmul(self.down, x)), self.scale)
        return mul(matmul(matmul(x, transpose(self.down)), transpose(self.up)), self.scale)


@dataclass(frozen=True)
class LoRAAdapter:
    """Per-layer low-rank adapters for a ``DenoiserModel``."""

    layers: Mapping[int, AdapterLayer]
    name: str = "adapter"
    _deltas: dict[int, Tensor] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        ranks = {layer.rank for layer in self.layers.values()}
        if len(ranks) > 1:
            raise ValidationError(f"adapter '{self.name}' mixes ranks {sorted(ranks)}")
        # filled once here so concurrent readers never write to it
        self._deltas.update({index: layer.delta() for index, layer in self.layers.items()})

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(sorted(self.layers))

    @property
    def rank(self) -> int:
        return next(iter(self.layers.values())).rank if self.layers else 0

    def delta(self, index: int) -> Optional[Tensor]:
        """Effective update for a layer, or None if the layer is not adapted."""
        return self._deltas.get(index)

    def is_noop(self) -> bool:
        """True when every up-projection is exactly zero."""
        return all(not np.any(layer.up.data) for layer in self.layers.values())

    def validate_against(self, model: "DenoiserModel") -> None:
        """Check that this adapter covers and fits the model's adapted layers.

        Raises:
            ValidationError: Naming the first layer that is missing or mis-shaped.
        """
        for index in model.adapted_layer_indices:
            if index not in self.layers:
                raise ValidationError(f"adapter '{self.name}' has no entry for layer {index}")
        for index, layer in sorted(self.layers.items()):
            if index not in model.adapted_layer_indices:
                raise ValidationError(
                    f"adapter '{self.name}' references layer {index}, "
                    f"which the model does not adapt"
                )
            host = model.layers[index]
            if (layer.out_features, layer.in_features) != host.w0.shape:
                raise ValidationError(
                    f"adapter '{self.name}' layer {index} has shape "
                    f"{(layer.out_features, layer.in_features)}, model layer is {host.w0.shape}"
                )

    @classmethod
    def initialize(
        cls,
        model: "DenoiserModel",
        rank: int = DEFAULT_RANK,
        alpha: Optional[float] = None,
        seed: int = 0,
        name: str = "adapter",
        std: float = ADAPTER_INIT_STD,
    ) -> "LoRAAdapter":
        """Fresh adapter: down ~ N(0, std^2), up = 0, so it starts as a no-op.

        Args:
            model: Host model; one adapter layer per adapted model layer.
            rank: Rank r of every update.
            alpha: Scale numerator; defaults to the rank (scale 1).
            seed: Seed for the down-projections.
            name: Label used in messages and reports.
            std: Standard deviation of the down-projections.

        Returns:
            The new adapter.
        """
        rank = validate_positive_integer(rank, "rank")
        rng = np.random.default_rng(seed)
        layers = {}
        for index in model.adapted_layer_indices:
            host = model.layers[index]
            layers[index] = AdapterLayer(
                down=Tensor(rng.normal(0.0, std, size=(rank, host.in_features))),
                up=Tensor.zeros((host.out_features, rank)),
                alpha=float(rank if alpha is None else alpha),
            )
        return cls(layers=layers, name=name)

    def to_named_tensors(self) -> dict[str, Tensor]:
        """Flatten into ``lora.{i}.down``, ``lora.{i}.up``, ``lora.{i}.alpha``."""
        tensors = {}
        for index, layer in sorted(self.layers.items()):
            tensors[f"lora.{index}.down"] = layer.down
            tensors[f"lora.{index}.up"] = layer.up
            tensors[f"lora.{index}.alpha"] = Tensor([layer.alpha])
        return tensors

    @classmethod
    def from_named_tensors(cls, tensors: Mapping[str, Tensor], name: str = "adapter") -> "LoRAAdapter":
        """Rebuild an adapter from ``to_named_tensors`` output.

        Raises:
            ValidationError: If a layer is missing one of its three tensors.
        """
        indices = sorted({_layer_index(key, "lora") for key in tensors})
        layers = {}
        for index in indices:
            try:
                down = tensors[f"lora.{index}.down"]
                up = tensors[f"lora.{index}.up"]
                alpha = tensors[f"lora.{index}.alpha"]
            except KeyError as e:
                raise ValidationError(f"adapter '{name}' layer {index} is missing {e}") from e
            layers[index] = AdapterLayer(down=down, up=up, alpha=alpha.item())
        return cls(layers=layers, name=name)


def _layer_index(key: str, prefix: str) -> int:
    parts = key.split(".")
    if len(parts) != 3 or parts[0] != prefix or not parts[1].isdigit():
        raise ValidationError(f"unexpected tensor name '{key}' (expected '{prefix}.<i>.<field>')")
    return int(parts[1])


@dataclass(frozen=True)
class DenoiserModel:
    """Stack of affine layers predicting the noise in x_t."""

    layers: tuple[LinearLayer, ...]
    time_embed_dim: int = DEFAULT_TIME_EMBED_DIM
    adapted_layers: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValidationError("model needs at least one layer")
        validate_even(self.time_embed_dim, "time_embed_dim")

        expected = self.input_dim + self.time_embed_dim
        for index, layer in enumerate(self.layers):
            if layer.in_features != expected:
                raise DimensionError(
                    f"layer {index} expects {layer.in_features} inputs, previous layer gives {expected}"
                )
            expected = layer.out_features

        if self.adapted_layers is not None:
            for index in self.adapted_layers:
                if not 0 <= index < len(self.layers):
                    raise ValidationError(f"adapted layer {index} does not exist")

    @property
    def input_dim(self) -> int:
        """Latent size D (the output size of the last layer)."""
        return self.layers[-1].out_features

    @property
    def adapted_layer_indices(self) -> tuple[int, ...]:
        if self.adapted_layers is None:
            return tuple(range(len(self.layers)))
        return tuple(sorted(set(self.adapted_layers)))

    @classmethod
    def initialize(
        cls,
        input_dim: int = 256,
        hidden_width: int = 256,
        hidden_layers: int = 3,
        time_embed_dim: int = DEFAULT_TIME_EMBED_DIM,
        seed: int = 0,
        adapted_layers: Optional[Sequence[int]] = None,
    ) -> "DenoiserModel":
        """Randomly initialized model with N(0, 1/fan_in) weights and zero biases."""
        input_dim = validate_positive_integer(input_dim, "input_dim")
        hidden_width = validate_positive_integer(hidden_width, "hidden_width")
        hidden_layers = validate_non_negative_integer(hidden_layers, "hidden_layers")

        rng = np.random.default_rng(seed)
        sizes = [input_dim + time_embed_dim] + [hidden_width] * hidden_layers + [input_dim]
        layers = tuple(
            LinearLayer(
                w0=Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_out, n_in))),
                bias=Tensor.zeros((n_out,)),
            )
            for n_in, n_out in zip(sizes[:-1], sizes[1:])
        )
        return cls(
            layers=layers,
            time_embed_dim=time_embed_dim,
            adapted_layers=None if adapted_layers is None else tuple(adapted_layers),
        )

    def with_layers(self, layers: Sequence[LinearLayer]) -> "DenoiserModel":
        """Copy of this model with replaced layers."""
        return DenoiserModel(
            layers=tuple(layers),
            time_embed_dim=self.time_embed_dim,
            adapted_layers=self.adapted_layers,
        )

    def forward(
        self,
        x_t: Union[Tensor, np.ndarray],
        t: Union[int, Sequence[int]],
        layer_fn: Optional[LayerFn] = None,
    ) -> Tensor:
        """Run the denoiser.

        Args:
            x_t: Noisy latent of length D, or a batch of shape (B, D).
            t: Timestep, or one timestep per batch row.
            layer_fn: Optional hook computing the output of each adapted layer;
                the base layer is used when it is None.

        Returns:
            Predicted noise, shaped like x_t.
        """
        x_t = as_tensor(x_t)
        if x_t.ndim not in (1, 2) or x_t.shape[-1] != self.input_dim:
            raise DimensionError(f"model expects latents of size {self.input_dim}, got {x_t.shape}")

        if x_t.ndim == 1:
            emb = time_embedding(int(t), self.time_embed_dim)  # type: ignore[arg-type]
        else:
            steps = [int(t)] * x_t.shape[0] if np.ndim(t) == 0 else list(t)  # type: ignore[arg-type]
            if len(steps) != x_t.shape[0]:
                raise DimensionError(f"{len(steps)} timesteps for a batch of {x_t.shape[0]}")
            emb = time_embeddings(steps, self.time_embed_dim)

        h = concat([x_t, emb], axis=-1)
        adapted = set(self.adapted_layer_indices)
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            if layer_fn is not None and index in adapted:
                h = layer_fn(index, layer, h)
            else:
                h = forward_layer(layer, None, h)
            if index < last:
                h = silu(h)
        return h

    def predict_epsilon(
        self,
        x_t: Union[Tensor, np.ndarray],
        t: int,
        deltas: Optional[Mapping[int, Tensor]] = None,
    ) -> Tensor:
        """Predict the noise with fixed per-layer weight updates.

        Args:
            x_t: Noisy latent.
            t: Timestep.
            deltas: Effective update per adapted layer; missing layers use W0.

        Returns:
            Predicted noise.
        """
        if not deltas:
            return self.forward(x_t, t)
        return self.forward(
            x_t,
            t,
            layer_fn=lambda i, layer, h: forward_layer(layer, deltas.get(i), h),
        )

    def to_named_tensors(self) -> dict[str, Tensor]:
        """Flatten into ``layers.{i}.w0`` and ``layers.{i}.bias``."""
        tensors = {}
        for index, layer in enumerate(self.layers):
            tensors[f"layers.{index}.w0"] = layer.w0
            tensors[f"layers.{index}.bias"] = layer.bias
        return tensors

    @classmethod
    def from_named_tensors(
        cls,
        tensors: Mapping[str, Tensor],
        time_embed_dim: int = DEFAULT_TIME_EMBED_DIM,
        adapted_layers: Optional[Sequence[int]] = None,
    ) -> "DenoiserModel":
        """Rebuild a model from ``to_named_tensors`` output.

        Raises:
            ValidationError: If layer indices are not contiguous or a tensor is missing.
        """
        indices = sorted({_layer_index(key, "layers") for key in tensors})
        if indices != list(range(len(indices))):
            raise ValidationError(f"model layers are not contiguous: {indices}")
        layers = []
        for index in indices:
            try:
                layers.append(
                    LinearLayer(w0=tensors[f"layers.{index}.w0"], bias=tensors[f"layers.{index}.bias"])
                )
            except KeyError as e:
                raise ValidationError(f"model layer {index} is missing {e}") from e
        return cls(
            layers=tuple(layers),
            time_embed_dim=time_embed_dim,
            adapted_layers=None if adapted_layers is None else tuple(adapted_layers),
        )
