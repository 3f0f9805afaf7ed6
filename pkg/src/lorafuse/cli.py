"""Main CLI entrypoint for LoraFuse."""

import hashlib
import json
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import click

from .core.config import DEFAULT_RUN_CONFIG, POLICY_NAMES, RunConfig, get_config
from .core.diffusion import NoiseSchedule, SamplerConfig
from .core.model import DenoiserModel, LoRAAdapter
from .core.weights import load_weights, save_weights
from .modules.dataset import (
    LabeledImage,
    SyntheticSpec,
    as_matrix,
    make_dataset,
    make_round_robin,
    read_dataset,
    write_dataset,
)
from .modules.evaluation import ABLATION_AXES, Evaluator, PolicyRun, policy_from_name
from .modules.fusion import LoRAFusion, SelectionTrace
from .modules.guidance import GuidanceContext, generate_references
from .modules.sampler import sample
from .modules.training import (
    AdapterRole,
    TrainConfig,
    adapter_training_data,
    train_adapter,
    train_base,
    write_loss_csv,
)
from .utils.images import write_pgm
from .utils.logger import get_logger
from .utils.output import Console
from .utils.validators import NumericError, ValidationError

EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


@contextmanager
def _exit_on_error(console: Console) -> Iterator[None]:
    """Report library errors and exit with the matching status code."""
    try:
        yield
    except ValidationError as e:
        console.error(f"Error: {e}")
        sys.exit(EXIT_USAGE)
    except NumericError as e:
        console.error(f"Numeric failure: {e}")
        sys.exit(EXIT_NUMERIC)
    except OSError as e:
        console.error(f"I/O error: {e}")
        sys.exit(EXIT_IO)


def _load_run_config(path: Optional[str]) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _write_digest(path: Path) -> Path:
    """Write ``<file>.sha256`` next to an artifact."""
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    sidecar = path.with_name(path.name + ".sha256")
    sidecar.write_text(f"{digest}  {path.name}\n", encoding="utf-8")
    return sidecar


def _write_directory_digest(directory: Path) -> Path:
    """Write ``SHA256SUMS`` covering every other file in the directory."""
    lines = []
    for path in sorted(directory.iterdir()):
        if path.is_file() and path.name != "SHA256SUMS":
            lines.append(f"{hashlib.sha256(path.read_bytes()).hexdigest()}  {path.name}\n")
    out = directory / "SHA256SUMS"
    out.write_text("".join(lines), encoding="utf-8")
    return out


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}{suffix}")


def _load_model(path: str, run: RunConfig) -> DenoiserModel:
    return DenoiserModel.from_named_tensors(
        load_weights(path),
        time_embed_dim=run.model.time_embed_dim,
        adapted_layers=run.model.adapted_tuple,
    )


def _load_adapter(path: Optional[str], name: str) -> Optional[LoRAAdapter]:
    if path is None:
        return None
    return LoRAAdapter.from_named_tensors(load_weights(path), name=name)


def _schedule(run: RunConfig) -> NoiseSchedule:
    return NoiseSchedule(run.schedule.train_steps, run.schedule.beta_start, run.schedule.beta_end)


def _synthetic_spec(run: RunConfig, seed: Optional[int] = None) -> SyntheticSpec:
    return SyntheticSpec(
        image_side=run.data.image_side,
        noise=run.data.noise,
        seed=run.data.seed if seed is None else seed,
    )


@click.group(invoke_without_command=True)
@click.option("--version", is_flag=True, help="Show version and exit.")
@click.pass_context
def main(ctx: click.Context, version: bool) -> None:
    """LoraFuse - training-free fusion of content and style LoRAs on a toy denoiser.

    Run 'lorafuse init' to write a default run configuration.
    """
    if version:
        from . import __version__

        click.echo(f"LoraFuse v{__version__}")
        ctx.exit(0)

    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@main.command()
@click.option("--force", is_flag=True, help="Overwrite an existing lorafuse.yaml.")
def init(force: bool) -> None:
    """Write a commented default run configuration to ./lorafuse.yaml.

    Examples:
        lorafuse init
        lorafuse init --force
    """
    console = Console()

    with _exit_on_error(console):
        config_file = Path.cwd() / "lorafuse.yaml"
        if config_file.exists() and not force:
            console.warning(f"{config_file} already exists (use --force to overwrite)")
            return
        config_file.write_text(DEFAULT_RUN_CONFIG, encoding="utf-8")
        console.success(f"Wrote {config_file}")


@main.command()
@click.option(
    "--global-config",
    "global_scope",
    is_flag=True,
    help="Show or modify global settings.",
)
@click.option("--set", "set_key", help="Set setting key=value.")
def config(global_scope: bool, set_key: Optional[str]) -> None:
    """Show or change application settings (log_level, log_to_file, log_dir, workers).

    Examples:
        lorafuse config
        lorafuse config --set workers=4
        lorafuse config --global-config --set log_level=DEBUG
    """
    console = Console()

    with _exit_on_error(console):
        cfg = get_config()

        if set_key:
            if "=" not in set_key:
                raise click.UsageError("Invalid format. Use: key=value")
            key, value = set_key.split("=", 1)
            settings = cfg.global_config if global_scope else cfg.project_config
            settings[key] = value
            cfg.save_config(settings, global_scope)
            console.success(f"Set {key}={value}")
            return

        settings = cfg.global_config if global_scope else cfg.project_config
        scope = "Global" if global_scope else "Project"
        if not settings:
            console.info(f"No {scope.lower()} settings found.")
        else:
            console.settings(settings, title=f"{scope} Settings")


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, default=0, show_default=True, help="Generator seed.")
@click.option("--n", "count", type=int, default=24, show_default=True, help="Total number of images.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Run configuration.")
def gen_data(out_dir: str, seed: int, count: int, config_path: Optional[str]) -> None:
    """Write synthetic images (PGM) and a labels.csv manifest.

    Images are spread over the content x style cells in turn.

    Examples:
        lorafuse gen-data --out data --n 240
    """
    console = Console()

    with _exit_on_error(console):
        run = _load_run_config(config_path).with_section("data", seed=seed)
        images = make_round_robin(_synthetic_spec(run, seed), count)
        out = Path(out_dir)
        write_dataset(images, out)
        run.write_resolved(out / "config.yaml")
        _write_directory_digest(out)
        get_logger().milestone("gen-data", images=len(images), out=out)
        console.success(f"Wrote {len(images)} images to {out}")


def _training_images(run: RunConfig, data_dir: Optional[str]) -> list[LabeledImage]:
    if data_dir is not None:
        return read_dataset(data_dir)
    return make_dataset(_synthetic_spec(run), run.data.n_per_cell)


def _train_config(run: RunConfig, steps: int) -> TrainConfig:
    return TrainConfig(
        steps=steps,
        learning_rate=run.training.learning_rate,
        batch_size=run.training.batch_size,
        seed=run.training.seed,
        log_every=run.training.log_every,
    )


@main.command("train-base")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Run configuration.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Weight file to write.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), help="gen-data directory.")
@click.option("--steps", type=int, help="Override training.base_steps.")
@click.option("--seed", type=int, help="Override training.seed.")
def train_base_cmd(
    config_path: Optional[str],
    out_path: str,
    data_dir: Optional[str],
    steps: Optional[int],
    seed: Optional[int],
) -> None:
    """Train the base denoiser on every content x style cell.

    Writes the weight file, <stem>.loss.csv and <stem>.config.yaml.

    Examples:
        lorafuse train-base --config lorafuse.yaml --out weights/base.lfw
    """
    console = Console()

    with _exit_on_error(console):
        run = _load_run_config(config_path)
        if steps is not None:
            run = run.with_section("training", base_steps=steps)
        if seed is not None:
            run = run.with_section("training", seed=seed)

        images = _training_images(run, data_dir)
        model = DenoiserModel.initialize(
            input_dim=run.model.input_dim,
            hidden_width=run.model.hidden_width,
            hidden_layers=run.model.hidden_layers,
            time_embed_dim=run.model.time_embed_dim,
            seed=run.model.seed,
            adapted_layers=run.model.adapted_layers,
        )
        with console.working(f"Training base model ({run.training.base_steps} steps)..."):
            result = train_base(
                as_matrix(images), _train_config(run, run.training.base_steps), model, _schedule(run)
            )

        out = save_weights(out_path, result.model.to_named_tensors())
        write_loss_csv(_sidecar(out, ".loss.csv"), result.losses)
        run.write_resolved(_sidecar(out, ".config.yaml"))
        _write_digest(out)
        get_logger().milestone("train-base", out=out)
        console.success(f"Wrote {out}")
        if result.losses:
            console.info(f"loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}")


@main.command("train-lora")
@click.option("--which", type=click.Choice([r.value for r in AdapterRole]), required=True, help="Adapter role.")
@click.option("--base", "base_path", type=click.Path(dir_okay=False), help="Frozen base weights.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Run configuration.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Adapter file to write.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), help="gen-data directory.")
@click.option("--steps", type=int, help="Override training.adapter_steps.")
@click.option("--seed", type=int, help="Override training.seed.")
def train_lora_cmd(
    which: str,
    base_path: Optional[str],
    config_path: Optional[str],
    out_path: str,
    data_dir: Optional[str],
    steps: Optional[int],
    seed: Optional[int],
) -> None:
    """Train a content or style adapter on a frozen base model.

    Examples:
        lorafuse train-lora --which content --base weights/base.lfw --out weights/content.lfw
        lorafuse train-lora --which style --base weights/base.lfw --out weights/style.lfw
    """
    console = Console()

    if base_path is None:
        raise click.UsageError("train-lora requires --base weights")
    if not Path(base_path).is_file():
        raise click.UsageError(f"base weights not found: {base_path}")

    with _exit_on_error(console):
        run = _load_run_config(config_path)
        if steps is not None:
            run = run.with_section("training", adapter_steps=steps)
        if seed is not None:
            run = run.with_section("training", seed=seed)

        model = _load_model(base_path, run)
        role = AdapterRole(which)
        data = adapter_training_data(_training_images(run, data_dir), role)
        with console.working(f"Training {which} adapter ({run.training.adapter_steps} steps)..."):
            result = train_adapter(
                model,
                data,
                _train_config(run, run.training.adapter_steps),
                rank=run.model.rank,
                alpha=run.model.alpha,
                name=which,
                schedule=_schedule(run),
            )

        out = save_weights(out_path, result.adapter.to_named_tensors())
        write_loss_csv(_sidecar(out, ".loss.csv"), result.losses)
        run.write_resolved(_sidecar(out, ".config.yaml"))
        _write_digest(out)
        get_logger().milestone("train-lora", adapter=which, out=out)
        console.success(f"Wrote {out}")


@main.command()
@click.option("--base", "base_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Base weights.")
@click.option("--content", "content_path", type=click.Path(exists=True, dir_okay=False), help="Content adapter.")
@click.option("--style", "style_path", type=click.Path(exists=True, dir_okay=False), help="Style adapter.")
@click.option("--fusion", "fusion_name", type=click.Choice(sorted(POLICY_NAMES)), help="Fusion policy.")
@click.option("--guide", type=click.Choice(["on", "off"]), help="Reference guidance.")
@click.option("--m", "scale", type=float, help="Guidance scaling factor.")
@click.option("--seed", type=int, help="Sampling seed.")
@click.option("--steps", type=int, help="Sampling steps.")
@click.option("--embeddings", "embeddings_path", type=click.Path(exists=True, dir_okay=False), help="Precomputed reference embeddings.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Run configuration.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="PGM image to write.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), help="Selection trace CSV.")
def generate(
    base_path: str,
    content_path: Optional[str],
    style_path: Optional[str],
    fusion_name: Optional[str],
    guide: Optional[str],
    scale: Optional[float],
    seed: Optional[int],
    steps: Optional[int],
    embeddings_path: Optional[str],
    config_path: Optional[str],
    out_path: str,
    trace_path: Optional[str],
) -> None:
    """Sample one image with the chosen fusion policy and optional guidance.

    Writes the image, the selection trace, <stem>.json metadata and
    <stem>.config.yaml. Guided runs that build their own references also
    write <stem>.embeddings.lfw, which --embeddings accepts later.

    Examples:
        lorafuse generate --base b.lfw --content c.lfw --style s.lfw --fusion kl --guide on --out out.pgm
        lorafuse generate --base b.lfw --content c.lfw --style s.lfw --fusion merge --guide off --out merge.pgm
    """
    console = Console()

    with _exit_on_error(console):
        run = _load_run_config(config_path)
        if fusion_name is not None:
            run = run.with_section("fusion", policy=fusion_name)
        if guide is not None:
            run = run.with_section("guidance", enabled=guide == "on")
        if scale is not None:
            run = run.with_section("guidance", m=scale)
        if seed is not None:
            run = run.with_section("sampler", seed=seed)
        if steps is not None:
            run = run.with_section("sampler", num_steps=steps)

        schedule = _schedule(run)
        model = _load_model(base_path, run)
        adapter_c = _load_adapter(content_path, "content")
        adapter_s = _load_adapter(style_path, "style")
        fusion = LoRAFusion(model, adapter_c, adapter_s, policy_from_name(run.fusion.policy, run.fusion))
        sampler_config = SamplerConfig(num_steps=run.sampler.num_steps, seed=run.sampler.seed)

        ctx = None
        if run.guidance.enabled:
            if embeddings_path is not None:
                ctx = GuidanceContext.from_embedding_file(
                    embeddings_path,
                    model.input_dim,
                    m=run.guidance.m,
                    stride=run.guidance.stride,
                    encoder_seed=run.guidance.encoder_seed,
                )
            else:
                ref_seed = run.guidance.reference_seed
                refs = generate_references(
                    model,
                    adapter_c,
                    adapter_s,
                    SamplerConfig(
                        num_steps=run.sampler.num_steps,
                        seed=run.sampler.seed if ref_seed is None else ref_seed,
                    ),
                    schedule,
                )
                ctx = GuidanceContext.from_references(
                    refs.content,
                    refs.style,
                    m=run.guidance.m,
                    stride=run.guidance.stride,
                    embed_dim=run.guidance.embed_dim,
                    encoder_seed=run.guidance.encoder_seed,
                )
                embeddings_file = ctx.export_embeddings(_sidecar(Path(out_path), ".embeddings.lfw"))
                _write_digest(embeddings_file)

        with console.working(f"Sampling ({run.sampler.num_steps} steps)..."):
            result = sample(fusion, sampler_config, guidance=ctx, schedule=schedule)

        out = write_pgm(out_path, result.image.data)
        trace_file = result.trace.write_csv(trace_path or _sidecar(out, ".trace.csv"))
        metadata = {
            "config_hash": run.config_hash(),
            "policy": fusion.policy.label,
            "guided": ctx is not None,
            "m": run.guidance.m if ctx is not None else None,
            "seed": run.sampler.seed,
            "num_steps": run.sampler.num_steps,
            "final_residual": result.final_residual,
            "trace": trace_file.name,
            "noise_source": "numpy.random.PCG64",
        }
        meta_file = _sidecar(out, ".json")
        meta_file.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        run.write_resolved(_sidecar(out, ".config.yaml"))
        for artifact in (out, trace_file, meta_file):
            _write_digest(artifact)

        get_logger().milestone("generate", policy=fusion.policy.label, guided=ctx is not None, out=out)
        console.success(f"Wrote {out}")
        if result.final_residual is not None:
            console.info(f"final residual {result.final_residual:.6f}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Run configuration.")
@click.option("--seeds", "n_seeds", type=int, help="Seeds per policy (default evaluation.seeds).")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Report CSV to write.")
@click.option("--base", "base_path", type=click.Path(dir_okay=False), help="Base weights (default paths.base).")
@click.option("--content", "content_path", type=click.Path(dir_okay=False), help="Content adapter (default paths.content).")
@click.option("--style", "style_path", type=click.Path(dir_okay=False), help="Style adapter (default paths.style).")
@click.option("--ablate", type=click.Choice(ABLATION_AXES), multiple=True, help="Extra ablation grid (repeatable).")
@click.option("--workers", type=int, help="Worker threads (default from application settings).")
def evaluate(
    config_path: Optional[str],
    n_seeds: Optional[int],
    out_path: str,
    base_path: Optional[str],
    content_path: Optional[str],
    style_path: Optional[str],
    ablate: tuple[str, ...],
    workers: Optional[int],
) -> None:
    """Score every configured policy over many seeds.

    Ablation grids go to <stem>.<axis>.csv next to the report.

    Examples:
        lorafuse evaluate --config lorafuse.yaml --seeds 20 --out report.csv
        lorafuse evaluate --config lorafuse.yaml --out report.csv --ablate criterion --ablate m
    """
    console = Console()

    with _exit_on_error(console):
        run = _load_run_config(config_path)
        if n_seeds is not None:
            run = run.with_section("evaluation", seeds=n_seeds)

        model = _load_model(base_path or run.paths.base, run)
        adapter_c = _load_adapter(content_path or run.paths.content, "content")
        adapter_s = _load_adapter(style_path or run.paths.style, "style")
        evaluator = Evaluator(
            model,
            adapter_c,  # type: ignore[arg-type]
            adapter_s,  # type: ignore[arg-type]
            num_steps=run.sampler.num_steps,
            guidance=run.guidance,
            fusion=run.fusion,
            schedule=_schedule(run),
            workers=workers if workers is not None else get_config().workers,
        )
        seeds = [run.sampler.seed + i for i in range(run.evaluation.seeds)]
        runs = [PolicyRun.from_name(name, run.fusion) for name in run.evaluation.policies]

        with console.working(f"Evaluating {len(runs)} policies x {len(seeds)} seeds..."):
            report = evaluator.evaluate(runs, seeds, config_hash=run.config_hash())
            grids = []
            for axis in dict.fromkeys(ablate):
                if axis == "criterion":
                    grids.append(evaluator.criterion_ablation(run.evaluation.criteria, seeds))
                elif axis == "m":
                    grids.append(evaluator.m_ablation(run.evaluation.m_values, seeds))
                else:
                    grids.append(evaluator.component_ablation(seeds))

        out = report.write_csv(out_path)
        written = [out]
        for grid in grids:
            written.append(grid.write_csv(_sidecar(out, f".{grid.axis}.csv")))
        run.write_resolved(_sidecar(out, ".config.yaml"))
        for artifact in written:
            _write_digest(artifact)

        console.score_table(report.rows, len(seeds))
        get_logger().milestone("evaluate", out=out)
        console.success(f"Wrote {out}")


@main.command("inspect-trace")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Trace CSV.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Summary CSV to write.")
def inspect_trace(in_path: str, out_path: str) -> None:
    """Summarize a selection trace.

    Writes per-layer Content/Style frequencies and <stem>.matrix.csv, a
    step x layer grid with 1 for Content and 0 for Style.

    Examples:
        lorafuse inspect-trace --in out.trace.csv --out summary.csv
    """
    console = Console()

    with _exit_on_error(console):
        trace = SelectionTrace.read_csv(in_path)
        frequencies = trace.frequencies()

        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            "layer,content_freq,style_freq,count\n"
            + "".join(f"{f.layer},{f.content!r},{f.style!r},{f.count}\n" for f in frequencies),
            encoding="utf-8",
        )

        matrix = trace.matrix()
        matrix_file = _sidecar(out, ".matrix.csv")
        matrix_file.write_text(
            ",".join(["step"] + [f"layer{layer}" for layer in trace.layers])
            + "\n"
            + "".join(
                ",".join([str(step)] + [str(v) for v in row]) + "\n"
                for step, row in enumerate(matrix.tolist())
            ),
            encoding="utf-8",
        )
        for artifact in (out, matrix_file):
            _write_digest(artifact)

        console.frequency_table(frequencies, trace.num_steps)
        console.success(f"Wrote {out}")


if __name__ == "__main__":
    main()
