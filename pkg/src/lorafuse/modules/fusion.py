"""Per-layer content/style adapter selection and static fusion baselines.

At every adapted layer the selecting policy computes the base feature and
both adapted features from the same incoming feature, measures how far each
adapted feature moved away from the base one, and forwards the branch that
moved more. Decisions are recorded per sampling step in a ``SelectionTrace``.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..core.model import DenoiserModel, LinearLayer, LoRAAdapter, forward_layer
from ..core.numerics import (
    Tensor,
    add,
    cosine_similarity,
    kl_divergence,
    mul,
    softmax,
)
from ..utils.validators import (
    ContractError,
    DimensionError,
    TraceParseError,
    ValidationError,
    validate_finite_scalar,
    validate_positive_integer,
)

TRACE_HEADER = ("step", "layer", "choice", "d_c", "d_s")
TOPK_FRACTION = 0.01
TOPK_MINIMUM = 8


class Choice(str, Enum):
    """Branch picked at one layer."""

    CONTENT = "C"
    STYLE = "S"


class Criterion(str, Enum):
    """How far an adapted feature moved from the base feature (larger = more)."""

    KL = "kl"
    JS = "js"
    COSINE = "cosine"
    DOT = "dot"


class PolicyKind(str, Enum):
    """Fusion strategies."""

    BASE = "base"
    CONTENT = "content"
    STYLE = "style"
    MERGE = "merge"
    KL = "kl"
    TOPK = "topk"


@dataclass(frozen=True)
class FusionPolicy:
    """One fusion strategy and its parameters.

    ``PolicyKind.KL`` is the dynamic selector; ``criterion`` picks the
    divergence it uses, so the KL/JS/cosine/dot ablation shares one code path.
    """

    kind: PolicyKind
    criterion: Criterion = Criterion.KL
    lambda_content: float = 1.0
    lambda_style: float = 1.0
    k: Optional[int] = None
    temperature: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        validate_finite_scalar(self.lambda_content, "lambda_content")
        validate_finite_scalar(self.lambda_style, "lambda_style")
        if self.k is not None:
            validate_positive_integer(self.k, "k")
        if validate_finite_scalar(self.temperature, "temperature") <= 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")

    @classmethod
    def base_only(cls) -> "FusionPolicy":
        return cls(PolicyKind.BASE)

    @classmethod
    def content_only(cls) -> "FusionPolicy":
        return cls(PolicyKind.CONTENT)

    @classmethod
    def style_only(cls) -> "FusionPolicy":
        return cls(PolicyKind.STYLE)

    @classmethod
    def direct_merge(cls, lambda_content: float = 1.0, lambda_style: float = 1.0) -> "FusionPolicy":
        return cls(PolicyKind.MERGE, lambda_content=lambda_content, lambda_style=lambda_style)

    @classmethod
    def kl_select(
        cls, criterion: Union[Criterion, str] = Criterion.KL, temperature: float = 1.0
    ) -> "FusionPolicy":
        return cls(PolicyKind.KL, criterion=Criterion(criterion), temperature=temperature)

    @classmethod
    def magnitude_top_k(cls, k: Optional[int] = None) -> "FusionPolicy":
        return cls(PolicyKind.TOPK, k=k)

    @property
    def uses_adapters(self) -> bool:
        return self.kind is not PolicyKind.BASE

    @property
    def label(self) -> str:
        """Short name used in reports."""
        if self.kind is PolicyKind.MERGE:
            return f"merge({self.lambda_content:g},{self.lambda_style:g})"
        if self.kind is PolicyKind.KL:
            return f"select[{self.criterion.value}]"
        if self.kind is PolicyKind.TOPK:
            return "topk" if self.k is None else f"topk({self.k})"
        return self.kind.value


@dataclass(frozen=True)
class LayerSelection:
    """Decision at one adapted layer and the two scores behind it."""

    layer: int
    choice: Choice
    d_c: float
    d_s: float


@dataclass(frozen=True)
class LayerFrequency:
    """How often one layer picked each branch over a trace."""

    layer: int
    content: float
    style: float
    count: int


@dataclass
class SelectionTrace:
    """Step x layer record of branch choices; one row per sampling step."""

    rows: list[tuple[LayerSelection, ...]] = field(default_factory=list)

    def append(self, row: Sequence[LayerSelection]) -> None:
        self.rows.append(tuple(row))

    @property
    def num_steps(self) -> int:
        return len(self.rows)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted({s.layer for row in self.rows for s in row}))

    def choices(self) -> list[tuple[Choice, ...]]:
        """Choices only, row by row."""
        return [tuple(s.choice for s in row) for row in self.rows]

    def selection_count(self) -> int:
        return sum(len(row) for row in self.rows)

    def is_complete(self, layers: Sequence[int]) -> bool:
        """True when every row holds exactly one finite decision per given layer."""
        expected = sorted(layers)
        for row in self.rows:
            if sorted(s.layer for s in row) != expected:
                return False
            if not all(math.isfinite(s.d_c) and math.isfinite(s.d_s) for s in row):
                return False
        return True

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for step, row in enumerate(self.rows):
            for s in row:
                writer.writerow([step, s.layer, s.choice.value, repr(s.d_c), repr(s.d_s)])
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv_text(), encoding="utf-8")
        return path

    @classmethod
    def from_csv_text(cls, text: str) -> "SelectionTrace":
        """Parse ``to_csv_text`` output.

        Raises:
            TraceParseError: With the 1-based line number of the first bad line.
        """
        lines = text.splitlines()
        if not lines:
            raise TraceParseError("empty trace file", line=1)
        if tuple(h.strip() for h in lines[0].split(",")) != TRACE_HEADER:
            raise TraceParseError(f"expected header {','.join(TRACE_HEADER)}", line=1)

        cells: dict[int, dict[int, LayerSelection]] = {}
        for number, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            fields = next(csv.reader([line]))
            if len(fields) != len(TRACE_HEADER):
                raise TraceParseError(f"expected 5 fields, got {len(fields)}", line=number)
            try:
                step, layer = int(fields[0]), int(fields[1])
                choice = Choice(fields[2].strip())
                d_c, d_s = float(fields[3]), float(fields[4])
            except ValueError as e:
                raise TraceParseError(str(e), line=number) from e
            if step < 0 or layer < 0:
                raise TraceParseError("step and layer must be non-negative", line=number)
            if not (math.isfinite(d_c) and math.isfinite(d_s)):
                raise TraceParseError("d-values must be finite", line=number)
            row = cells.setdefault(step, {})
            if layer in row:
                raise TraceParseError(f"duplicate cell (step {step}, layer {layer})", line=number)
            row[layer] = LayerSelection(layer, choice, d_c, d_s)

        num_steps = max(cells) + 1 if cells else 0
        return cls(
            rows=[
                tuple(row[layer] for layer in sorted(row))
                for row in (cells.get(step, {}) for step in range(num_steps))
            ]
        )

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "SelectionTrace":
        return cls.from_csv_text(Path(path).read_text(encoding="utf-8"))

    def frequencies(self) -> list[LayerFrequency]:
        """Per-layer share of Content and Style picks; the two shares sum to 1."""
        result = []
        for layer in self.layers:
            picks = [s.choice for row in self.rows for s in row if s.layer == layer]
            content = sum(1 for c in picks if c is Choice.CONTENT)
            result.append(
                LayerFrequency(
                    layer=layer,
                    content=content / len(picks),
                    style=(len(picks) - content) / len(picks),
                    count=len(picks),
                )
            )
        return result

    def matrix(self) -> np.ndarray:
        """Step x layer matrix: 1 for Content, 0 for Style, -1 where no decision was made."""
        layers = self.layers
        column = {layer: j for j, layer in enumerate(layers)}
        grid = np.full((self.num_steps, len(layers)), -1, dtype=np.int64)
        for i, row in enumerate(self.rows):
            for s in row:
                grid[i, column[s.layer]] = 1 if s.choice is Choice.CONTENT else 0
        return grid


def branch_features(
    layer: LinearLayer,
    delta_c: Optional[Tensor],
    delta_s: Optional[Tensor],
    features: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """Base, content-adapted and style-adapted outputs of one layer.

    All three are computed from the same incoming features; a missing delta
    means that branch equals the base output.
    """
    base = forward_layer(layer, None, features)
    content = forward_layer(layer, delta_c, features) if delta_c is not None else base
    style = forward_layer(layer, delta_s, features) if delta_s is not None else base
    return base, content, style


def divergence(
    criterion: Union[Criterion, str],
    f_hat: Tensor,
    f: Tensor,
    temperature: float = 1.0,
) -> float:
    """Score how much an adapted feature differs from the base feature.

    KL and JS compare softmax(features / temperature); cosine returns
    1 - cos; dot returns -(f_hat . f). Larger always means more change.

    Raises:
        DimensionError: If the features differ in shape or are not vectors.
        DegenerateInputError: For zero-norm features under the cosine criterion.
    """
    criterion = Criterion(criterion)
    if f_hat.shape != f.shape or f.ndim != 1:
        raise DimensionError(f"divergence needs equal vectors, got {f_hat.shape} and {f.shape}")
    f_hat, f = f_hat.detach(), f.detach()

    if criterion is Criterion.KL:
        return kl_divergence(softmax(mul(f_hat, 1.0 / temperature)), softmax(mul(f, 1.0 / temperature)))
    if criterion is Criterion.JS:
        p = softmax(mul(f_hat, 1.0 / temperature))
        q = softmax(mul(f, 1.0 / temperature))
        m = mul(add(p, q), 0.5)
        return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)
    if criterion is Criterion.COSINE:
        return 1.0 - float(cosine_similarity(f_hat, f))
    return -float(np.dot(f_hat.data, f.data))


def select_layer(d_c: float, d_s: float) -> Choice:
    """Content when d_c >= d_s, else Style.

    Raises:
        ContractError: If either score is NaN.
    """
    if math.isnan(d_c) or math.isnan(d_s):
        raise ContractError(f"cannot select with NaN scores (d_c={d_c}, d_s={d_s})")
    return Choice.CONTENT if d_c >= d_s else Choice.STYLE


def batch_decision(scores: Sequence[tuple[float, float]]) -> tuple[Choice, float, float]:
    """Average (d_c, d_s) over a batch, then select.

    Returns:
        The choice and the two batch means.

    Raises:
        ContractError: If the batch is empty.
    """
    if not scores:
        raise ContractError("batch_decision needs at least one sample")
    d_c = float(np.mean([c for c, _ in scores]))
    d_s = float(np.mean([s for _, s in scores]))
    return select_layer(d_c, d_s), d_c, d_s


def top_k_default(numel: int) -> int:
    """1% of the element count, at least 8, never more than the element count."""
    return min(numel, max(TOPK_MINIMUM, int(numel * TOPK_FRACTION)))


def magnitude_score(delta: Optional[Tensor], k: Optional[int] = None) -> float:
    """Sum of the k largest absolute entries of an effective update."""
    if delta is None:
        return 0.0
    flat = np.abs(delta.data).ravel()
    k = min(flat.size, top_k_default(flat.size) if k is None else k)
    return float(np.sum(np.partition(flat, flat.size - k)[flat.size - k:]))


class LoRAFusion:
    """Denoiser plus content/style adapters under one fusion policy.

    Immutable after construction; input-independent quantities (merged
    updates, magnitude decisions) are computed once here.
    """

    def __init__(
        self,
        model: DenoiserModel,
        adapter_c: Optional[LoRAAdapter],
        adapter_s: Optional[LoRAAdapter],
        policy: FusionPolicy,
    ) -> None:
        """Initialize the fusion.

        Args:
            model: Base denoiser.
            adapter_c: Content adapter; may be None only for the base policy.
            adapter_s: Style adapter; may be None only for the base policy.
            policy: Fusion strategy.

        Raises:
            ValidationError: If a required adapter is missing or does not fit the model.
        """
        self.model = model
        self.adapter_c = adapter_c
        self.adapter_s = adapter_s
        self.policy = policy

        if policy.uses_adapters:
            needed = {
                PolicyKind.CONTENT: (adapter_c,),
                PolicyKind.STYLE: (adapter_s,),
            }.get(policy.kind, (adapter_c, adapter_s))
            if any(a is None for a in needed):
                raise ValidationError(f"policy '{policy.label}' needs both adapters it uses")
            for adapter in needed:
                adapter.validate_against(model)  # type: ignore[union-attr]

        self._merged: dict[int, Tensor] = {}
        self._static: dict[int, LayerSelection] = {}
        if policy.kind is PolicyKind.MERGE:
            for i in model.adapted_layer_indices:
                self._merged[i] = add(
                    mul(adapter_c.delta(i), policy.lambda_content),  # type: ignore[union-attr,arg-type]
                    mul(adapter_s.delta(i), policy.lambda_style),  # type: ignore[union-attr,arg-type]
                )
        elif policy.kind is PolicyKind.TOPK:
            for i in model.adapted_layer_indices:
                score_c = magnitude_score(adapter_c.delta(i), policy.k)  # type: ignore[union-attr]
                score_s = magnitude_score(adapter_s.delta(i), policy.k)  # type: ignore[union-attr]
                self._static[i] = LayerSelection(i, select_layer(score_c, score_s), score_c, score_s)

    @property
    def static_selections(self) -> tuple[LayerSelection, ...]:
        """Input-independent decisions of the magnitude baseline (empty otherwise)."""
        return tuple(self._static[i] for i in sorted(self._static))

    def with_policy(self, policy: FusionPolicy) -> "LoRAFusion":
        return LoRAFusion(self.model, self.adapter_c, self.adapter_s, policy)

    def _delta(self, adapter: Optional[LoRAAdapter], index: int) -> Optional[Tensor]:
        return None if adapter is None else adapter.delta(index)

    def predict(
        self,
        x_t: Tensor,
        t: int,
        row: Optional[list[LayerSelection]] = None,
        frozen: Optional[Sequence[LayerSelection]] = None,
    ) -> Tensor:
        """Predict the noise in x_t under the policy.

        Args:
            x_t: Latent of length D, or a batch of shape (B, D) sharing one
                decision per layer.
            t: Timestep.
            row: If given, receives one ``LayerSelection`` per adapted layer for
                selecting policies.
            frozen: Reuse these decisions instead of recomputing them.

        Returns:
            Predicted noise, shaped like x_t.
        """
        kind = self.policy.kind
        if kind is PolicyKind.BASE:
            return self.model.forward(x_t, t)
        if kind is PolicyKind.CONTENT:
            return self.model.forward(
                x_t, t, lambda i, layer, h: forward_layer(layer, self._delta(self.adapter_c, i), h)
            )
        if kind is PolicyKind.STYLE:
            return self.model.forward(
                x_t, t, lambda i, layer, h: forward_layer(layer, self._delta(self.adapter_s, i), h)
            )
        if kind is PolicyKind.MERGE:
            return self.model.forward(
                x_t, t, lambda i, layer, h: forward_layer(layer, self._merged[i], h)
            )

        decisions = {s.layer: s for s in frozen} if frozen is not None else None
        if kind is PolicyKind.TOPK:
            decisions = self._static
        return self.model.forward(
            x_t, t, lambda i, layer, h: self._select(i, layer, h, row, decisions)
        )

    def _select(
        self,
        index: int,
        layer: LinearLayer,
        h: Tensor,
        row: Optional[list[LayerSelection]],
        decisions: Optional[dict[int, LayerSelection]],
    ) -> Tensor:
        delta_c = self._delta(self.adapter_c, index)
        delta_s = self._delta(self.adapter_s, index)

        if decisions is not None:
            if index not in decisions:
                raise ContractError(f"no frozen decision for layer {index}")
            selection = decisions[index]
            out = forward_layer(layer, delta_c if selection.choice is Choice.CONTENT else delta_s, h)
        else:
            base, content, style = branch_features(layer, delta_c, delta_s, h)
            criterion, temperature = self.policy.criterion, self.policy.temperature
            if h.ndim == 1:
                d_c = divergence(criterion, content, base, temperature)
                d_s = divergence(criterion, style, base, temperature)
                choice = select_layer(d_c, d_s)
            else:
                scores = [
                    (
                        divergence(criterion, Tensor(c), Tensor(b), temperature),
                        divergence(criterion, Tensor(s), Tensor(b), temperature),
                    )
                    for b, c, s in zip(base.data, content.data, style.data)
                ]
                choice, d_c, d_s = batch_decision(scores)
            selection = LayerSelection(index, choice, d_c, d_s)
            out = content if choice is Choice.CONTENT else style

        if row is not None:
            row.append(selection)
        return out


def fused_forward(
    model: DenoiserModel,
    adapter_c: Optional[LoRAAdapter],
    adapter_s: Optional[LoRAAdapter],
    policy: FusionPolicy,
    x_t: Tensor,
    t: int,
    trace_row: Optional[list[LayerSelection]] = None,
) -> Tensor:
    """One-shot form of ``LoRAFusion(...).predict``."""
    return LoRAFusion(model, adapter_c, adapter_s, policy).predict(x_t, t, row=trace_row)
