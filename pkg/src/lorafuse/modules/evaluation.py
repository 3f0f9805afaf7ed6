"""Comparison harness: sample every policy over many seeds and score it
against the per-seed reference images.

Scores per sample are the three guidance similarities:
``content_sim_c`` (content encoder vs content reference), ``content_sim_s``
(content encoder vs style reference) and ``style_sim`` (style encoder vs style
reference). ``combined`` is their mean, i.e. one minus the guidance residual.
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar, Union

import numpy as np

from ..core.config import GUIDED_SUFFIX, FusionSection, GuidanceSection
from ..core.diffusion import NoiseSchedule, SamplerConfig
from ..core.model import DenoiserModel, LoRAAdapter
from ..utils.logger import get_logger
from ..utils.validators import ValidationError, validate_positive_integer
from .fusion import Criterion, FusionPolicy, LoRAFusion, PolicyKind
from .guidance import GuidanceContext, generate_references
from .sampler import sample

T = TypeVar("T")

ABLATION_AXES = ("criterion", "m", "component")
COMPONENTS = ("merge", "selection", "guidance", "selection+guidance")


@dataclass(frozen=True)
class PolicyRun:
    """A named policy, optionally with guidance at a given scale."""

    name: str
    policy: FusionPolicy
    guided: bool = False
    m: Optional[float] = None

    @classmethod
    def from_name(cls, name: str, fusion: Optional[FusionSection] = None) -> "PolicyRun":
        """Parse names like ``kl``, ``merge`` or ``kl+guide``.

        Raises:
            ValidationError: If the policy name is unknown.
        """
        fusion = fusion or FusionSection()
        guided = name.endswith(GUIDED_SUFFIX)
        return cls(name=name, policy=policy_from_name(name.removesuffix(GUIDED_SUFFIX), fusion), guided=guided)


def policy_from_name(name: str, fusion: Optional[FusionSection] = None) -> FusionPolicy:
    """Build a policy from its short name and the fusion settings.

    Raises:
        ValidationError: If the name is unknown.
    """
    fusion = fusion or FusionSection()
    try:
        kind = PolicyKind(name)
    except ValueError as e:
        raise ValidationError(f"unknown fusion policy '{name}'") from e
    if kind is PolicyKind.MERGE:
        return FusionPolicy.direct_merge(fusion.lambda_content, fusion.lambda_style)
    if kind is PolicyKind.KL:
        return FusionPolicy.kl_select(fusion.criterion, fusion.temperature)
    if kind is PolicyKind.TOPK:
        return FusionPolicy.magnitude_top_k(fusion.k)
    return FusionPolicy(kind)


@dataclass(frozen=True)
class SeedScore:
    run: str
    seed: int
    content_sim_c: float
    content_sim_s: float
    style_sim: float

    @property
    def combined(self) -> float:
        return (self.content_sim_c + self.content_sim_s + self.style_sim) / 3.0


@dataclass(frozen=True)
class PolicyScore:
    """Mean and (population) standard deviation of one run over all seeds."""

    run: str
    runs: int
    style_sim: tuple[float, float]
    content_sim_c: tuple[float, float]
    content_sim_s: tuple[float, float]
    combined: tuple[float, float]

    @classmethod
    def aggregate(cls, run: str, scores: Sequence[SeedScore]) -> "PolicyScore":
        def stats(values: list[float]) -> tuple[float, float]:
            return float(np.mean(values)), float(np.std(values))

        return cls(
            run=run,
            runs=len(scores),
            style_sim=stats([s.style_sim for s in scores]),
            content_sim_c=stats([s.content_sim_c for s in scores]),
            content_sim_s=stats([s.content_sim_s for s in scores]),
            combined=stats([s.combined for s in scores]),
        )


REPORT_COLUMNS = (
    "policy",
    "runs",
    "style_sim_mean",
    "style_sim_std",
    "content_sim_c_mean",
    "content_sim_c_std",
    "content_sim_s_mean",
    "content_sim_s_std",
    "combined_mean",
    "combined_std",
)


@dataclass
class ScoreReport:
    """Per-run aggregates plus the per-seed scores behind them."""

    rows: list[PolicyScore]
    scores: list[SeedScore]
    seeds: tuple[int, ...]
    criterion: str
    config_hash: str = ""

    def row(self, run: str) -> PolicyScore:
        for row in self.rows:
            if row.run == run:
                return row
        raise KeyError(run)

    def header_comment(self) -> str:
        seeds = ",".join(str(s) for s in self.seeds)
        return (
            f"# config_hash={self.config_hash} seeds={seeds} criterion={self.criterion} "
            f"topk=magnitude-stand-in dot=negated"
        )

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        buffer.write(self.header_comment() + "\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow(
                [row.run, row.runs]
                + [
                    repr(v)
                    for pair in (row.style_sim, row.content_sim_c, row.content_sim_s, row.combined)
                    for v in pair
                ]
            )
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv_text(), encoding="utf-8")
        return path


@dataclass
class AblationGrid:
    """One ablation axis: label, then mean style/content/combined scores."""

    axis: str
    rows: list[tuple[str, float, float, float]] = field(default_factory=list)

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow((self.axis, "style_sim", "content_sim", "combined"))
        for label, style, content, combined in self.rows:
            writer.writerow((label, repr(style), repr(content), repr(combined)))
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv_text(), encoding="utf-8")
        return path


class Evaluator:
    """Scores policies on a shared, immutable model and adapter pair."""

    def __init__(
        self,
        model: DenoiserModel,
        adapter_c: LoRAAdapter,
        adapter_s: LoRAAdapter,
        num_steps: int = 50,
        guidance: Optional[GuidanceSection] = None,
        fusion: Optional[FusionSection] = None,
        schedule: Optional[NoiseSchedule] = None,
        workers: int = 1,
    ) -> None:
        """Initialize the evaluator.

        Args:
            model: Base denoiser.
            adapter_c: Content adapter.
            adapter_s: Style adapter.
            num_steps: Sampling steps per image.
            guidance: Guidance settings (scale, stride, encoders, reference seed).
            fusion: Fusion settings used to build named policies.
            schedule: Noise schedule.
            workers: Threads used to fan out seeds.
        """
        adapter_c.validate_against(model)
        adapter_s.validate_against(model)
        self.model = model
        self.adapter_c = adapter_c
        self.adapter_s = adapter_s
        self.num_steps = validate_positive_integer(num_steps, "num_steps")
        self.guidance = guidance or GuidanceSection()
        self.fusion = fusion or FusionSection()
        self.schedule = schedule or NoiseSchedule()
        self.workers = validate_positive_integer(workers, "workers")
        self._contexts: dict[int, GuidanceContext] = {}
        self.logger = get_logger()

    def _map(self, fn: Callable[[int], T], seeds: Sequence[int]) -> list[T]:
        if self.workers == 1 or len(seeds) < 2:
            return [fn(s) for s in seeds]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, seeds))

    def _build_context(self, seed: int) -> GuidanceContext:
        ref_seed = seed if self.guidance.reference_seed is None else self.guidance.reference_seed
        refs = generate_references(
            self.model,
            self.adapter_c,
            self.adapter_s,
            SamplerConfig(num_steps=self.num_steps, seed=ref_seed),
            self.schedule,
        )
        return GuidanceContext.from_references(
            refs.content,
            refs.style,
            m=self.guidance.m,
            stride=self.guidance.stride,
            embed_dim=self.guidance.embed_dim,
            encoder_seed=self.guidance.encoder_seed,
        )

    def prepare(self, seeds: Sequence[int]) -> None:
        """Generate the reference images of every seed not seen yet."""
        missing = [s for s in seeds if s not in self._contexts]
        for seed, ctx in zip(missing, self._map(self._build_context, missing)):
            self._contexts[seed] = ctx

    def context(self, seed: int) -> GuidanceContext:
        self.prepare([seed])
        return self._contexts[seed]

    def score(self, run: PolicyRun, seed: int) -> SeedScore:
        """Sample one image for a run and score it against the seed's references."""
        ctx = self.context(seed)
        fusion = LoRAFusion(self.model, self.adapter_c, self.adapter_s, run.policy)
        guidance = None
        if run.guided:
            guidance = ctx if run.m is None else ctx.with_scale(run.m)
        result = sample(
            fusion,
            SamplerConfig(num_steps=self.num_steps, seed=seed),
            guidance=guidance,
            schedule=self.schedule,
        )
        s1, s2, s3 = (float(s) for s in ctx.similarities(result.image))
        self.logger.metric("score", run=run.name, seed=seed, s1=s1, s2=s2, s3=s3)
        return SeedScore(run=run.name, seed=seed, content_sim_c=s1, content_sim_s=s2, style_sim=s3)

    def _scores(self, run: PolicyRun, seeds: Sequence[int]) -> list[SeedScore]:
        self.prepare(seeds)
        return self._map(lambda s: self.score(run, s), seeds)

    def evaluate(self, runs: Sequence[PolicyRun], seeds: Sequence[int], config_hash: str = "") -> ScoreReport:
        """Score every run on every seed; rows keep the order of ``runs``."""
        if not seeds:
            raise ValidationError("evaluation needs at least one seed")
        rows, scores = [], []
        for run in runs:
            self.logger.milestone("evaluating", run=run.name, seeds=len(seeds))
            run_scores = self._scores(run, seeds)
            rows.append(PolicyScore.aggregate(run.name, run_scores))
            scores.extend(run_scores)
        return ScoreReport(
            rows=rows,
            scores=scores,
            seeds=tuple(seeds),
            criterion=self.fusion.criterion,
            config_hash=config_hash,
        )

    def _grid(self, axis: str, runs: Sequence[PolicyRun], seeds: Sequence[int]) -> AblationGrid:
        grid = AblationGrid(axis=axis)
        for run in runs:
            agg = PolicyScore.aggregate(run.name, self._scores(run, seeds))
            grid.rows.append((run.name, agg.style_sim[0], agg.content_sim_c[0], agg.combined[0]))
        return grid

    def criterion_ablation(self, criteria: Sequence[str], seeds: Sequence[int]) -> AblationGrid:
        """Selection with guidance, one row per divergence criterion."""
        runs = [
            PolicyRun(name=c, policy=FusionPolicy.kl_select(Criterion(c), self.fusion.temperature), guided=True)
            for c in criteria
        ]
        return self._grid("criterion", runs, seeds)

    def m_ablation(self, m_values: Sequence[float], seeds: Sequence[int]) -> AblationGrid:
        """Selection with guidance, one row per scaling factor."""
        policy = policy_from_name("kl", self.fusion)
        runs = [PolicyRun(name=f"{m:g}", policy=policy, guided=True, m=float(m)) for m in m_values]
        return self._grid("m", runs, seeds)

    def component_ablation(self, seeds: Sequence[int]) -> AblationGrid:
        """Direct merge, selection alone, merge plus guidance, selection plus guidance."""
        merge = policy_from_name("merge", self.fusion)
        select = policy_from_name("kl", self.fusion)
        runs = [
            PolicyRun(name=COMPONENTS[0], policy=merge),
            PolicyRun(name=COMPONENTS[1], policy=select),
            PolicyRun(name=COMPONENTS[2], policy=merge, guided=True),
            PolicyRun(name=COMPONENTS[3], policy=select, guided=True),
        ]
        return self._grid("component", runs, seeds)


def evaluate(
    model: DenoiserModel,
    adapter_c: LoRAAdapter,
    adapter_s: LoRAAdapter,
    policies: Sequence[Union[str, PolicyRun]],
    n_seeds: int,
    first_seed: int = 0,
    **kwargs: object,
) -> ScoreReport:
    """One-shot comparison over seeds ``first_seed .. first_seed + n_seeds - 1``.

    Extra keyword arguments go to ``Evaluator``.
    """
    n_seeds = validate_positive_integer(n_seeds, "n_seeds")
    evaluator = Evaluator(model, adapter_c, adapter_s, **kwargs)  # type: ignore[arg-type]
    runs = [p if isinstance(p, PolicyRun) else PolicyRun.from_name(p, evaluator.fusion) for p in policies]
    return evaluator.evaluate(runs, list(range(first_seed, first_seed + n_seeds)))
