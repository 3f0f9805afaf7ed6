"""Reference-image guidance of the reverse-diffusion trajectory.

Two small seeded encoders stand in for large pretrained image encoders: the
content encoder projects raw pixels, the style encoder projects per-patch
(mean, std) statistics. The residual

    R(x0) = 1 - (S1 + S2 + S3) / 3

averages three cosine similarities to the reference images, and each guided
step moves the DDIM update against the gradient of R with respect to x_t.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from ..core.diffusion import NoiseSchedule, SamplerConfig, ddim_step, predict_x0
from ..core.model import DenoiserModel, LoRAAdapter
from ..core.numerics import (
    GradientTrace,
    Tensor,
    add,
    as_tensor,
    concat,
    cosine_similarity,
    gradient,
    l2_normalize,
    matmul,
    mean,
    mul,
    reshape,
    sqrt,
    square,
    sub,
    transpose,
)
from ..core.weights import load_weights, save_weights
from ..utils.images import image_side
from ..utils.logger import get_logger
from ..utils.validators import (
    DegenerateInputError,
    DimensionError,
    GuidanceError,
    NumericError,
    ValidationError,
    validate_finite_scalar,
    validate_non_negative,
    validate_positive_integer,
)

if TYPE_CHECKING:
    from .fusion import LayerSelection, LoRAFusion

DEFAULT_SCALE = 10.0
DEFAULT_EMBED_DIM = 32
DEFAULT_ENCODER_SEED = 1234
PATCH_SIZE = 4
STD_EPS = 1e-8

EMBEDDING_NAMES = ("ref_content.content", "ref_style.content", "ref_style.style")


class EncoderKind(str, Enum):
    CONTENT = "content"
    STYLE = "style"


def patch_statistics(x: Tensor, side: int) -> Tensor:
    """Per-patch mean followed by per-patch standard deviation of a square image.

    Patches are ``PATCH_SIZE`` x ``PATCH_SIZE``, row-major; the standard
    deviation is sqrt(var + 1e-8) so it stays differentiable on flat patches.
    """
    if side % PATCH_SIZE != 0 or x.shape != (side * side,):
        raise DimensionError(f"cannot cut {x.shape} into {PATCH_SIZE}x{PATCH_SIZE} patches of a {side}-px image")
    per_side = side // PATCH_SIZE
    grid = reshape(x, (per_side, PATCH_SIZE, per_side, PATCH_SIZE))
    columns = transpose(reshape(transpose(grid, (0, 2, 1, 3)), (per_side * per_side, PATCH_SIZE * PATCH_SIZE)))
    mu = mean(columns, axis=0)
    var = mean(square(sub(columns, mu)), axis=0)
    return concat([mu, sqrt(add(var, STD_EPS))], axis=-1)


@dataclass(frozen=True)
class MetricEncoder:
    """Seeded linear embedding of an image, L2-normalized."""

    kind: EncoderKind
    projection: Tensor
    image_side: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EncoderKind(self.kind))
        if self.projection.ndim != 2 or self.projection.shape[1] != self.feature_dim:
            raise DimensionError(
                f"{self.kind.value} encoder projection must have {self.feature_dim} columns, "
                f"got shape {self.projection.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.image_side * self.image_side

    @property
    def feature_dim(self) -> int:
        if self.kind is EncoderKind.CONTENT:
            return self.input_dim
        return 2 * self.input_dim // (PATCH_SIZE * PATCH_SIZE)

    @property
    def embed_dim(self) -> int:
        return self.projection.shape[0]

    @classmethod
    def create(
        cls,
        kind: Union[EncoderKind, str],
        input_dim: int,
        embed_dim: int = DEFAULT_EMBED_DIM,
        seed: int = DEFAULT_ENCODER_SEED,
    ) -> "MetricEncoder":
        """Encoder with a N(0, 1/f) projection drawn from ``seed``.

        Raises:
            DimensionError: If input_dim is not a square image whose side is a
                multiple of the patch size.
        """
        kind = EncoderKind(kind)
        side = image_side(validate_positive_integer(input_dim, "input_dim"))
        if side % PATCH_SIZE != 0:
            raise DimensionError(f"image side {side} is not a multiple of {PATCH_SIZE}")
        features = input_dim if kind is EncoderKind.CONTENT else 2 * input_dim // (PATCH_SIZE * PATCH_SIZE)
        stream = 0 if kind is EncoderKind.CONTENT else 1
        rng = np.random.default_rng([seed, stream])
        projection = rng.normal(0.0, 1.0 / math.sqrt(features), size=(embed_dim, features))
        return cls(kind=kind, projection=Tensor(projection), image_side=side)

    def features(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape != (self.input_dim,):
            raise DimensionError(f"encoder expects an image of {self.input_dim} values, got {x.shape}")
        if self.kind is EncoderKind.CONTENT:
            return x
        return patch_statistics(x, self.image_side)

    def embed(self, x: Tensor) -> Tensor:
        """Unit-norm embedding of an image.

        Raises:
            DegenerateInputError: If the projected features are all zero.
        """
        return l2_normalize(matmul(self.projection, self.features(x)))


@dataclass(frozen=True)
class ReferenceEmbeddings:
    """Cached unit-norm embeddings of the two reference images."""

    content_content: Tensor
    style_content: Tensor
    style_style: Tensor

    def to_named_tensors(self) -> dict[str, Tensor]:
        return dict(zip(EMBEDDING_NAMES, (self.content_content, self.style_content, self.style_style)))

    @classmethod
    def from_named_tensors(cls, tensors: Mapping[str, Tensor]) -> "ReferenceEmbeddings":
        """Read and re-normalize imported embeddings.

        Raises:
            ValidationError: If one of the three names is missing.
            DegenerateInputError: If an embedding is all zeros.
        """
        missing = [name for name in EMBEDDING_NAMES if name not in tensors]
        if missing:
            raise ValidationError(f"embedding file is missing {', '.join(missing)}")
        vectors = [l2_normalize(reshape(tensors[name], (tensors[name].size,))) for name in EMBEDDING_NAMES]
        return cls(*vectors)


class References(NamedTuple):
    """Reference images generated from the single adapters."""

    content: Tensor
    style: Tensor
    seed: int


@dataclass(frozen=True)
class GuidanceContext:
    """Everything the guided correction needs, fixed for a run."""

    content_encoder: MetricEncoder
    style_encoder: MetricEncoder
    embeddings: ReferenceEmbeddings
    m: float = DEFAULT_SCALE
    stride: int = 1
    ref_content: Optional[Tensor] = None
    ref_style: Optional[Tensor] = None

    def __post_init__(self) -> None:
        validate_non_negative(validate_finite_scalar(self.m, "m"), "m")
        validate_positive_integer(self.stride, "stride")
        dims = {
            "ref_content.content": (self.embeddings.content_content, self.content_encoder),
            "ref_style.content": (self.embeddings.style_content, self.content_encoder),
            "ref_style.style": (self.embeddings.style_style, self.style_encoder),
        }
        for name, (vector, encoder) in dims.items():
            if vector.shape != (encoder.embed_dim,):
                raise DimensionError(
                    f"embedding '{name}' has shape {vector.shape}, encoder gives ({encoder.embed_dim},)"
                )
            if abs(float(np.linalg.norm(vector.data)) - 1.0) > 1e-9:
                raise ValidationError(f"embedding '{name}' is not unit-norm")

    @classmethod
    def from_references(
        cls,
        ref_content: Tensor,
        ref_style: Tensor,
        m: float = DEFAULT_SCALE,
        stride: int = 1,
        embed_dim: int = DEFAULT_EMBED_DIM,
        encoder_seed: int = DEFAULT_ENCODER_SEED,
        content_encoder: Optional[MetricEncoder] = None,
        style_encoder: Optional[MetricEncoder] = None,
    ) -> "GuidanceContext":
        """Build a context by embedding two reference images.

        Args:
            ref_content: Content reference image (flat, model space).
            ref_style: Style reference image.
            m: Scaling factor of the correction.
            stride: Apply guidance every ``stride`` sampling steps.
            embed_dim: Embedding size of the default encoders.
            encoder_seed: Seed of the default encoders.
            content_encoder: Optional replacement content encoder.
            style_encoder: Optional replacement style encoder.
        """
        ref_content, ref_style = as_tensor(ref_content).detach(), as_tensor(ref_style).detach()
        input_dim = ref_content.size
        content_encoder = content_encoder or MetricEncoder.create(
            EncoderKind.CONTENT, input_dim, embed_dim, encoder_seed
        )
        style_encoder = style_encoder or MetricEncoder.create(
            EncoderKind.STYLE, input_dim, embed_dim, encoder_seed
        )
        embeddings = ReferenceEmbeddings(
            content_content=content_encoder.embed(ref_content),
            style_content=content_encoder.embed(ref_style),
            style_style=style_encoder.embed(ref_style),
        )
        return cls(
            content_encoder=content_encoder,
            style_encoder=style_encoder,
            embeddings=embeddings,
            m=m,
            stride=stride,
            ref_content=ref_content,
            ref_style=ref_style,
        )

    @classmethod
    def from_embedding_file(
        cls,
        path: Union[str, Path],
        input_dim: int,
        m: float = DEFAULT_SCALE,
        stride: int = 1,
        encoder_seed: int = DEFAULT_ENCODER_SEED,
    ) -> "GuidanceContext":
        """Build a context from externally computed reference embeddings.

        The file uses the weight-file format with the tensors
        ``ref_content.content``, ``ref_style.content`` and ``ref_style.style``;
        the encoders are created with the embedding size found in the file.
        """
        embeddings = ReferenceEmbeddings.from_named_tensors(load_weights(path))
        return cls(
            content_encoder=MetricEncoder.create(
                EncoderKind.CONTENT, input_dim, embeddings.content_content.size, encoder_seed
            ),
            style_encoder=MetricEncoder.create(
                EncoderKind.STYLE, input_dim, embeddings.style_style.size, encoder_seed
            ),
            embeddings=embeddings,
            m=m,
            stride=stride,
        )

    def export_embeddings(self, path: Union[str, Path]) -> Path:
        return save_weights(path, self.embeddings.to_named_tensors())

    def with_scale(self, m: float) -> "GuidanceContext":
        return replace(self, m=m)

    def applies_at(self, step_index: int) -> bool:
        """Whether the correction runs at the given sampling step (0-based)."""
        return step_index % self.stride == 0

    def similarities(self, x0_hat: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(S1, S2, S3): content-ref/content-space, style-ref/content-space, style-ref/style-space."""
        content = self.content_encoder.embed(x0_hat)
        style = self.style_encoder.embed(x0_hat)
        return (
            cosine_similarity(self.embeddings.content_content, content),
            cosine_similarity(self.embeddings.style_content, content),
            cosine_similarity(self.embeddings.style_style, style),
        )


def residual(ctx: GuidanceContext, x0_hat: Tensor) -> Tensor:
    """1 - mean of the three reference similarities.

    In [0, 2] up to rounding: when all three similarities are 1 the value can
    come out around -1e-16. Reported residuals are clamped at 0.
    """
    s1, s2, s3 = ctx.similarities(as_tensor(x0_hat))
    return sub(1.0, mul(add(add(s1, s2), s3), 1.0 / 3.0))


@dataclass(frozen=True)
class GuidedStep:
    """Result of one guided update."""

    x_prev: Tensor
    x_ori: Tensor
    grad: Tensor
    residual: float
    selections: tuple["LayerSelection", ...]

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad.data))


def guided_step(
    ctx: GuidanceContext,
    fusion: "LoRAFusion",
    x_t: Tensor,
    t: int,
    t_prev: int,
    schedule: Optional[NoiseSchedule] = None,
    step_index: Optional[int] = None,
) -> GuidedStep:
    """DDIM step corrected by -m * grad_x_t R(x0_hat).

    The forward pass runs once under a private trace with x_t registered;
    branch selections made in that pass are constants on the trace, so the
    value pass and the gradient pass use the same choices.

    Args:
        ctx: Guidance context.
        fusion: Model, adapters and fusion policy.
        x_t: Current latent.
        t: Current timestep.
        t_prev: Timestep of the returned latent.
        schedule: Noise schedule.
        step_index: Position of this step in the sampling loop, reported on failure.

    Raises:
        GuidanceError: If the residual, its gradient or the corrected update
            cannot be computed; carries the step index, t, the residual and
            the gradient norm when they are known.
    """
    schedule = schedule or NoiseSchedule()
    x_t = as_tensor(x_t).detach()
    row: list["LayerSelection"] = []
    r_value: Optional[float] = None
    g_norm: Optional[float] = None

    try:
        with GradientTrace() as trace:
            x = trace.register(x_t)
            eps = fusion.predict(x, t, row=row)
            r = residual(ctx, predict_x0(x, eps, t, schedule))
            # rounding can leave 1 - mean(cos) a few ulps below zero
            r_value = max(float(r), 0.0)
        g = gradient(trace, r, x)
        norm = float(np.linalg.norm(g.data))
        g_norm = norm if np.isfinite(norm) else None
        x_ori = ddim_step(x_t, eps.detach(), t, t_prev, schedule)
        x_prev = sub(x_ori, mul(g, ctx.m))
    except (NumericError, DegenerateInputError) as e:
        raise GuidanceError(
            str(e), step=step_index, residual=r_value, grad_norm=g_norm, timestep=t
        ) from e

    result = GuidedStep(x_prev=x_prev, x_ori=x_ori, grad=g, residual=r_value, selections=tuple(row))
    get_logger().metric("guided_step", t=t, residual=r_value, grad_norm=result.grad_norm)
    return result


def residual_along(
    ctx: GuidanceContext,
    fusion: "LoRAFusion",
    x_t: Tensor,
    t: int,
    direction: Tensor,
    s: float,
    selections: Sequence["LayerSelection"],
    schedule: Optional[NoiseSchedule] = None,
) -> float:
    """phi(s) = R(x0_hat(x_t - s * direction)) with branch choices held fixed."""
    schedule = schedule or NoiseSchedule()
    x = sub(as_tensor(x_t).detach(), mul(as_tensor(direction).detach(), s))
    eps = fusion.predict(x, t, frozen=selections)
    return float(residual(ctx, predict_x0(x, eps, t, schedule)))


def generate_references(
    model: DenoiserModel,
    adapter_c: Optional[LoRAAdapter],
    adapter_s: Optional[LoRAAdapter],
    config: SamplerConfig,
    schedule: Optional[NoiseSchedule] = None,
) -> References:
    """Sample the content reference with the content adapter alone and the
    style reference with the style adapter alone, unguided, from the same seed.

    A missing adapter falls back to the base model.
    """
    from .fusion import FusionPolicy, LoRAFusion
    from .sampler import sample

    content_policy = FusionPolicy.content_only() if adapter_c is not None else FusionPolicy.base_only()
    style_policy = FusionPolicy.style_only() if adapter_s is not None else FusionPolicy.base_only()
    content = sample(LoRAFusion(model, adapter_c, None, content_policy), config, schedule=schedule)
    style = sample(LoRAFusion(model, None, adapter_s, style_policy), config, schedule=schedule)
    return References(content=content.image, style=style.image, seed=config.seed)
