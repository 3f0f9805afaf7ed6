"""Pytest configuration and shared fixtures for LoraFuse tests."""

from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import pytest
import yaml

from lorafuse.core.model import AdapterLayer, DenoiserModel, LoRAAdapter
from lorafuse.core.numerics import Tensor


@pytest.fixture
def temp_config_dir(tmp_path: Path) -> Iterator[Path]:
    """Create a temporary application config directory.

    Args:
        tmp_path: Pytest's tmp_path fixture.

    Yields:
        Path to temporary config directory.
    """
    config_dir = tmp_path / ".lorafuse"
    config_dir.mkdir(parents=True, exist_ok=True)
    yield config_dir


@pytest.fixture
def sample_yaml_config(temp_config_dir: Path) -> Path:
    """Create a global settings file.

    Args:
        temp_config_dir: Fixture for temporary config directory.

    Returns:
        Path to created config file.
    """
    config_file = temp_config_dir / "config.yaml"
    with open(config_file, "w", encoding="utf-8") as f:
        yaml.dump({"log_level": "DEBUG", "workers": 3}, f)
    return config_file


@pytest.fixture(autouse=True)
def isolated_config(tmp_path_factory: pytest.TempPathFactory) -> Iterator[None]:
    """Point the config singleton at a throwaway directory and reset both singletons.

    Yields:
        None
    """
    import lorafuse.core.config as config_module
    import lorafuse.utils.logger as logger_module

    original_config = config_module._config
    original_logger = logger_module._logger
    config_module._config = config_module.Config(config_dir=tmp_path_factory.mktemp("lorafuse-home"))
    logger_module._logger = None

    yield

    config_module._config = original_config
    logger_module._logger = original_logger


@pytest.fixture
def small_model() -> DenoiserModel:
    """Seeded 8x8-image denoiser with two hidden layers of width 16."""
    return DenoiserModel.initialize(
        input_dim=64, hidden_width=16, hidden_layers=2, time_embed_dim=8, seed=7
    )


@pytest.fixture
def adapter_factory() -> Callable[..., LoRAAdapter]:
    """Build adapters with random non-zero up and down projections.

    Returns:
        Factory ``(model, seed, rank=2, scale=0.3, name="adapter")``.
    """

    def make(
        model: DenoiserModel,
        seed: int,
        rank: int = 2,
        scale: float = 0.3,
        name: str = "adapter",
    ) -> LoRAAdapter:
        rng = np.random.default_rng(seed)
        layers = {}
        for index in model.adapted_layer_indices:
            host = model.layers[index]
            layers[index] = AdapterLayer(
                down=Tensor(rng.normal(0.0, scale, size=(rank, host.in_features))),
                up=Tensor(rng.normal(0.0, scale, size=(host.out_features, rank))),
                alpha=float(rank),
            )
        return LoRAAdapter(layers=layers, name=name)

    return make


@pytest.fixture
def adapter_pair(
    small_model: DenoiserModel, adapter_factory: Callable[..., LoRAAdapter]
) -> tuple[LoRAAdapter, LoRAAdapter]:
    """Distinct content and style adapters for ``small_model``."""
    return (
        adapter_factory(small_model, seed=11, name="content"),
        adapter_factory(small_model, seed=12, name="style"),
    )


@pytest.fixture
def zero_adapter(small_model: DenoiserModel) -> LoRAAdapter:
    """Freshly initialized (no-op) adapter for ``small_model``."""
    return LoRAAdapter.initialize(small_model, rank=2, seed=5, name="zero")


@pytest.fixture
def tiny_run_config(tmp_path: Path) -> Path:
    """Run configuration small enough for CLI round trips.

    Returns:
        Path to the YAML file.
    """
    config = {
        "model": {
            "input_dim": 64,
            "hidden_width": 16,
            "hidden_layers": 1,
            "time_embed_dim": 8,
            "rank": 2,
        },
        "sampler": {"num_steps": 4, "seed": 0},
        "guidance": {"m": 10.0, "embed_dim": 8},
        "training": {"base_steps": 5, "adapter_steps": 3, "batch_size": 4, "log_every": 1},
        "data": {"image_side": 8, "n_per_cell": 2},
        "evaluation": {
            "seeds": 2,
            "policies": ["base", "merge", "kl", "kl+guide"],
            "criteria": ["kl", "cosine"],
            "m_values": [0.0, 10.0],
        },
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


@pytest.fixture
def temp_project_dir(tmp_path: Path) -> Iterator[Path]:
    """Create a temporary project directory.

    Args:
        tmp_path: Pytest's tmp_path fixture.

    Yields:
        Path to temporary project directory.
    """
    project_dir = tmp_path / "project"
    project_dir.mkdir(parents=True, exist_ok=True)
    yield project_dir
