from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

TINY_MODEL = {"image_size": 16, "patch_size": 4, "n_layers": 1, "n_heads": 2, "embed_dim": 16, "n_classes": 2, "mlp_ratio": 2.0}


def tiny_payload() -> dict:
    """Seconds-scale experiment on synthetic 16x16 images."""

    return {
        "schema_version": 1,
        "seed": 3,
        "dataset": {"kind": "synthetic", "classes": [0, 1], "train_size": 48, "test_size": 16, "image_size": 16, "seed": 3},
        "surrogate": {"model": dict(TINY_MODEL), "train": {"epochs": 2, "learning_rate": 0.01, "batch_size": 16, "seed": 3}},
        "victim": {"model": dict(TINY_MODEL), "train": {"epochs": 2, "learning_rate": 0.01, "batch_size": 16, "seed": 3}},
        "attack": {"target_label": 0, "source_label": 1},
        "trigger": {"width": 4, "height": 4, "top": 4, "left": 4, "max_iters": 3, "seed": 3},
        "poison": {"poison_count": 4, "K": 4, "steps": 2, "lr": 0.01, "seed": 3},
        "evaluation": {"sub_trigger_index": 0, "shifts": [0, 1, 2], "ssim": {"window": 4}},
        "defense": {"enabled": True, "drop_rate": 0.25, "shuffle": True, "seed": 3},
    }


@pytest.fixture
def tiny_config_path(tmp_path: Path) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_payload()), encoding="utf-8")
    return path
