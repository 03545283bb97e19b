import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from pathlib import Path  # noqa: E402

import pytest  # noqa: E402
import yaml  # noqa: E402

from modules.config import RunConfig, build_configs, resolve_config  # noqa: E402
from modules.phantom import phantom_generate, write_phantom_dataset  # noqa: E402

TINY = {
    "seed": 3,
    "phantom": {
        "n_source_scans": 2,
        "n_target_scans": 2,
        "n_val_scans": 1,
        "slices_per_scan": 2,
        "native_size": 20,
    },
    "model": {
        "image_size": 16,
        "gen_base_filters": 4,
        "n_res_blocks": 1,
        "disc_base_filters": 4,
        "disc_layers": 1,
    },
    "train": {
        "epochs": 2,
        "eval_every": 1,
        "history_buffer": 2,
        "steps_per_epoch": 2,
    },
}


def tiny_run(*overrides: str) -> RunConfig:
    return build_configs(resolve_config(TINY, list(overrides)))


@pytest.fixture
def tiny() -> RunConfig:
    return tiny_run()


@pytest.fixture
def tiny_dataset(tmp_path: Path, tiny: RunConfig) -> Path:
    root = tmp_path / "dataset"
    write_phantom_dataset(phantom_generate(tiny.phantom), root, tiny.hash)
    return root


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY), encoding="utf-8")
    return path
