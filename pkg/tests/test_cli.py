"""Tests for the command-line interface."""

import json
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
from click.testing import CliRunner

from lorafuse import __version__
from lorafuse.cli import main
from lorafuse.core.config import DEFAULT_RUN_CONFIG
from lorafuse.utils.validators import GuidanceError


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def trained(runner: CliRunner, tiny_run_config: Path, tmp_path: Path) -> dict[str, Path]:
    """Base, content and style weights trained with the tiny configuration."""
    weights = tmp_path / "weights"
    paths = {
        "config": tiny_run_config,
        "base": weights / "base.lfw",
        "content": weights / "content.lfw",
        "style": weights / "style.lfw",
    }
    result = runner.invoke(main, ["train-base", "--config", str(tiny_run_config), "--out", str(paths["base"])])
    assert result.exit_code == 0, result.output
    for which in ("content", "style"):
        result = runner.invoke(
            main,
            [
                "train-lora",
                "--which",
                which,
                "--base",
                str(paths["base"]),
                "--config",
                str(tiny_run_config),
                "--out",
                str(paths[which]),
            ],
        )
        assert result.exit_code == 0, result.output
    return paths


def generate_args(trained: dict[str, Path], out: Path, *extra: str) -> list[str]:
    return [
        "generate",
        "--config",
        str(trained["config"]),
        "--base",
        str(trained["base"]),
        "--content",
        str(trained["content"]),
        "--style",
        str(trained["style"]),
        "--out",
        str(out),
        *extra,
    ]


class TestMainGroup:
    """Test suite for the top-level command group."""

    def test_version(self, runner: CliRunner) -> None:
        """Test the --version flag."""
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert f"LoraFuse v{__version__}" in result.output

    def test_help_without_command(self, runner: CliRunner) -> None:
        """Test that the bare group prints its help."""
        result = runner.invoke(main, [])
        assert result.exit_code == 0
        assert "gen-data" in result.output

    def test_init_writes_template(self, runner: CliRunner) -> None:
        """Test that init writes the default run configuration once."""
        with runner.isolated_filesystem():
            assert runner.invoke(main, ["init"]).exit_code == 0
            assert Path("lorafuse.yaml").read_text(encoding="utf-8") == DEFAULT_RUN_CONFIG
            Path("lorafuse.yaml").write_text("model: {}\n", encoding="utf-8")
            assert runner.invoke(main, ["init"]).exit_code == 0
            assert Path("lorafuse.yaml").read_text(encoding="utf-8") == "model: {}\n"

    def test_config_set(self, runner: CliRunner) -> None:
        """Test that config --set writes a project setting."""
        with runner.isolated_filesystem():
            result = runner.invoke(main, ["config", "--set", "workers=4"])
            assert result.exit_code == 0
            assert "workers: '4'" in Path(".lorafuse/config.yaml").read_text(encoding="utf-8")

    def test_config_set_needs_equals(self, runner: CliRunner) -> None:
        """Test that a malformed --set is a usage error."""
        result = runner.invoke(main, ["config", "--set", "workers"])
        assert result.exit_code == 2


class TestGenData:
    """Test suite for gen-data."""

    def test_deterministic(self, runner: CliRunner, tiny_run_config: Path, tmp_path: Path) -> None:
        """Test that two runs with one seed write identical files."""
        sums = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(
                main, ["gen-data", "--out", str(out), "--seed", "3", "--n", "8", "--config", str(tiny_run_config)]
            )
            assert result.exit_code == 0, result.output
            sums.append((out / "SHA256SUMS").read_text(encoding="utf-8"))
        assert sums[0] == sums[1]
        assert len(list((tmp_path / "a").glob("*.pgm"))) == 8
        assert "labels.csv" in sums[0]

    def test_zero_images(self, runner: CliRunner, tiny_run_config: Path, tmp_path: Path) -> None:
        """Test that --n 0 writes a header-only manifest."""
        out = tmp_path / "empty"
        result = runner.invoke(main, ["gen-data", "--out", str(out), "--n", "0", "--config", str(tiny_run_config)])
        assert result.exit_code == 0, result.output
        assert (out / "labels.csv").read_text(encoding="utf-8").count("\n") == 1
        assert not list(out.glob("*.pgm"))

    def test_negative_count(self, runner: CliRunner, tmp_path: Path) -> None:
        """Test that a negative count exits with the usage code."""
        result = runner.invoke(main, ["gen-data", "--out", str(tmp_path / "x"), "--n", "-1"])
        assert result.exit_code == 2

    def test_unknown_config_key(self, runner: CliRunner, tmp_path: Path) -> None:
        """Test that an unknown key is named and exits with the usage code."""
        config = tmp_path / "bad.yaml"
        config.write_text("sampler:\n  steps: 10\n", encoding="utf-8")
        result = runner.invoke(main, ["gen-data", "--out", str(tmp_path / "x"), "--config", str(config)])
        assert result.exit_code == 2
        assert "sampler.steps" in result.output


class TestTraining:
    """Test suite for train-base and train-lora."""

    def test_outputs(self, trained: dict[str, Path]) -> None:
        """Test weight files, loss logs, resolved configs and digests."""
        base = trained["base"]
        assert (base.parent / "base.loss.csv").read_text(encoding="utf-8").count("\n") == 6
        assert (base.parent / "base.config.yaml").exists()
        assert (base.parent / "base.lfw.sha256").read_text(encoding="utf-8").endswith("  base.lfw\n")
        assert (base.parent / "style.loss.csv").read_text(encoding="utf-8").count("\n") == 4

    def test_train_lora_requires_base(self, runner: CliRunner, tmp_path: Path) -> None:
        """Test that a missing --base is a usage error."""
        result = runner.invoke(main, ["train-lora", "--which", "style", "--out", str(tmp_path / "s.lfw")])
        assert result.exit_code == 2
        assert "--base" in result.output

    def test_train_lora_missing_base_file(self, runner: CliRunner, tmp_path: Path) -> None:
        """Test that a base path that does not exist is a usage error."""
        result = runner.invoke(
            main,
            ["train-lora", "--which", "content", "--base", str(tmp_path / "nope.lfw"), "--out", str(tmp_path / "c.lfw")],
        )
        assert result.exit_code == 2

    def test_train_from_data_directory(self, runner: CliRunner, tiny_run_config: Path, tmp_path: Path) -> None:
        """Test that base and adapter training read a gen-data directory."""
        data = tmp_path / "data"
        config = str(tiny_run_config)
        result = runner.invoke(main, ["gen-data", "--out", str(data), "--n", "12", "--config", config])
        assert result.exit_code == 0, result.output
        base = tmp_path / "w" / "base.lfw"
        result = runner.invoke(main, ["train-base", "--config", config, "--data", str(data), "--out", str(base)])
        assert result.exit_code == 0, result.output
        result = runner.invoke(
            main,
            [
                "train-lora",
                "--which",
                "style",
                "--base",
                str(base),
                "--config",
                config,
                "--data",
                str(data),
                "--out",
                str(tmp_path / "w" / "style.lfw"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "w" / "style.lfw.sha256").exists()

    def test_missing_data_directory(self, runner: CliRunner, tmp_path: Path) -> None:
        """Test that a data directory that does not exist is a usage error."""
        result = runner.invoke(
            main, ["train-base", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "b.lfw")]
        )
        assert result.exit_code == 2


class TestGenerate:
    """Test suite for generate."""

    def test_writes_artifacts(self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path) -> None:
        """Test the image, trace, metadata and digests."""
        out = tmp_path / "out" / "image.pgm"
        result = runner.invoke(main, generate_args(trained, out, "--fusion", "kl", "--guide", "on"))
        assert result.exit_code == 0, result.output
        assert out.read_bytes().startswith(b"P5\n8 8\n255\n")
        assert (out.parent / "image.trace.csv").read_text(encoding="utf-8").startswith("step,")
        metadata = json.loads((out.parent / "image.json").read_text(encoding="utf-8"))
        assert metadata["guided"] is True
        assert metadata["num_steps"] == 4
        assert metadata["final_residual"] is not None
        assert (out.parent / "image.pgm.sha256").exists()

    def test_zero_scale_matches_unguided(
        self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test that --guide on --m 0 writes the same image as --guide off."""
        guided = tmp_path / "guided.pgm"
        plain = tmp_path / "plain.pgm"
        assert runner.invoke(main, generate_args(trained, guided, "--guide", "on", "--m", "0")).exit_code == 0
        assert runner.invoke(main, generate_args(trained, plain, "--guide", "off")).exit_code == 0
        assert guided.read_bytes() == plain.read_bytes()

    def test_deterministic(self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path) -> None:
        """Test that the same seed writes the same image and trace."""
        for name in ("a", "b"):
            result = runner.invoke(main, generate_args(trained, tmp_path / name / "x.pgm", "--seed", "5"))
            assert result.exit_code == 0, result.output
        assert (tmp_path / "a" / "x.pgm").read_bytes() == (tmp_path / "b" / "x.pgm").read_bytes()
        assert (tmp_path / "a" / "x.trace.csv").read_text() == (tmp_path / "b" / "x.trace.csv").read_text()

    def test_incompatible_adapter(self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path) -> None:
        """Test that an adapter trained for another base exits with the usage code."""
        wide = tmp_path / "wide.yaml"
        wide.write_text(
            trained["config"].read_text(encoding="utf-8").replace("hidden_width: 16", "hidden_width: 8"),
            encoding="utf-8",
        )
        other_base = tmp_path / "other" / "base.lfw"
        result = runner.invoke(main, ["train-base", "--config", str(wide), "--out", str(other_base), "--steps", "1"])
        assert result.exit_code == 0, result.output
        result = runner.invoke(
            main,
            [
                "generate",
                "--config",
                str(wide),
                "--base",
                str(other_base),
                "--content",
                str(trained["content"]),
                "--style",
                str(trained["style"]),
                "--out",
                str(tmp_path / "x.pgm"),
                "--guide",
                "off",
            ],
        )
        assert result.exit_code == 2

    def test_guidance_failure(self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path) -> None:
        """Test that a numeric guidance failure exits with the numeric code."""
        with patch("lorafuse.cli.sample", side_effect=GuidanceError("gradient is not finite", step=620)):
            result = runner.invoke(main, generate_args(trained, tmp_path / "x.pgm", "--guide", "on"))
        assert result.exit_code == 3
        assert "step 620" in result.output

    def test_reuse_exported_embeddings(
        self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test that the embeddings written by a guided run can drive a second run."""
        first = tmp_path / "first.pgm"
        result = runner.invoke(main, generate_args(trained, first, "--guide", "on"))
        assert result.exit_code == 0, result.output
        embeddings = tmp_path / "first.embeddings.lfw"
        assert embeddings.exists()
        assert (tmp_path / "first.embeddings.lfw.sha256").exists()

        second = tmp_path / "second.pgm"
        result = runner.invoke(
            main, generate_args(trained, second, "--guide", "on", "--embeddings", str(embeddings))
        )
        assert result.exit_code == 0, result.output
        assert not (tmp_path / "second.embeddings.lfw").exists()
        # stored as f32, so allow one gray level of drift
        a = np.frombuffer(first.read_bytes()[-64:], dtype=np.uint8).astype(int)
        b = np.frombuffer(second.read_bytes()[-64:], dtype=np.uint8).astype(int)
        assert np.abs(a - b).max() <= 1

    def test_unguided_run_writes_no_embeddings(
        self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test that --guide off leaves no embeddings file."""
        out = tmp_path / "plain.pgm"
        assert runner.invoke(main, generate_args(trained, out, "--guide", "off")).exit_code == 0
        assert not (tmp_path / "plain.embeddings.lfw").exists()


class TestEvaluate:
    """Test suite for evaluate."""

    def evaluate_args(self, trained: dict[str, Path], out: Path, *extra: str) -> list[str]:
        return [
            "evaluate",
            "--config",
            str(trained["config"]),
            "--base",
            str(trained["base"]),
            "--content",
            str(trained["content"]),
            "--style",
            str(trained["style"]),
            "--out",
            str(out),
            *extra,
        ]

    def test_report_is_deterministic(self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path) -> None:
        """Test that two evaluations write the same report."""
        for name in ("a", "b"):
            result = runner.invoke(main, self.evaluate_args(trained, tmp_path / name / "report.csv"))
            assert result.exit_code == 0, result.output
        first = (tmp_path / "a" / "report.csv").read_text(encoding="utf-8")
        assert first == (tmp_path / "b" / "report.csv").read_text(encoding="utf-8")
        lines = first.splitlines()
        assert lines[0].startswith("# config_hash=")
        assert "seeds=0,1" in lines[0]
        assert [line.split(",")[0] for line in lines[2:]] == ["base", "merge", "kl", "kl+guide"]

    def test_ablation_grids(self, runner: CliRunner, trained: dict[str, Path], tmp_path: Path) -> None:
        """Test that each requested axis gets its own grid file."""
        out = tmp_path / "report.csv"
        result = runner.invoke(
            main, self.evaluate_args(trained, out, "--seeds", "1", "--ablate", "m", "--ablate", "component")
        )
        assert result.exit_code == 0, result.output
        m_grid = (tmp_path / "report.m.csv").read_text(encoding="utf-8").splitlines()
        assert m_grid[0] == "m,style_sim,content_sim,combined"
        assert len(m_grid) == 3
        assert len((tmp_path / "report.component.csv").read_text(encoding="utf-8").splitlines()) == 5
        assert not (tmp_path / "report.criterion.csv").exists()

    def test_missing_weights(self, runner: CliRunner, tiny_run_config: Path, tmp_path: Path) -> None:
        """Test that missing weight files exit with the I/O code."""
        result = runner.invoke(
            main,
            ["evaluate", "--config", str(tiny_run_config), "--base", str(tmp_path / "none.lfw"), "--out", str(tmp_path / "r.csv")],
        )
        assert result.exit_code == 1


class TestInspectTrace:
    """Test suite for inspect-trace."""

    def test_summary(self, runner: CliRunner, tmp_path: Path) -> None:
        """Test per-layer frequencies and the step x layer matrix."""
        trace = tmp_path / "t.csv"
        trace.write_text(
            "step,layer,choice,d_c,d_s\n0,0,C,0.5,0.1\n0,1,S,0.1,0.5\n1,0,C,0.4,0.2\n1,1,C,0.3,0.2\n",
            encoding="utf-8",
        )
        out = tmp_path / "summary.csv"
        result = runner.invoke(main, ["inspect-trace", "--in", str(trace), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert out.read_text(encoding="utf-8") == (
            "layer,content_freq,style_freq,count\n0,1.0,0.0,2\n1,0.5,0.5,2\n"
        )
        assert (tmp_path / "summary.matrix.csv").read_text(encoding="utf-8") == "step,layer0,layer1\n0,1,0\n1,1,1\n"

    def test_malformed_line(self, runner: CliRunner, tmp_path: Path) -> None:
        """Test that a bad row is reported by line number with the usage code."""
        trace = tmp_path / "t.csv"
        trace.write_text("step,layer,choice,d_c,d_s\n0,0,C,0.5,0.1\n0,1,X,0.1,0.5\n", encoding="utf-8")
        result = runner.invoke(main, ["inspect-trace", "--in", str(trace), "--out", str(tmp_path / "s.csv")])
        assert result.exit_code == 2
        assert "line 3" in result.output
