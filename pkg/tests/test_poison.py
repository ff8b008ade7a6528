from __future__ import annotations

import math
from pathlib import Path

import pytest
import torch
import torch.nn as nn

from megatron.datasets import make_blobs
from megatron.errors import InputError
from megatron.metrics import psnr
from megatron.poison import (
    PoisonConfig,
    build_poisoned_dataset,
    poison_sample,
    project_linf,
    quantize_in_band,
    read_poisoned_dataset,
    write_poisoned_dataset,
)
from megatron.rollout import PixelRect
from megatron.trigger import Trigger, make_sub_triggers
from megatron.vit import ImageSample, ModelConfig, build_model

EPSILON = 16 / 255
SMALL = ModelConfig(image_size=8, patch_size=4, n_layers=1, n_heads=1, embed_dim=8, n_classes=2)


class LinearFeatures(nn.Module):
    """``f(x) = W x`` behind the transformer's call signature."""

    def __init__(self, weight: torch.Tensor) -> None:
        super().__init__()
        self.config = ModelConfig(image_size=2, patch_size=1, n_layers=1, n_heads=1, embed_dim=4, n_classes=2)
        self.head = nn.Linear(1, 2).double()
        self.weight = nn.Parameter(weight, requires_grad=False)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64

    def forward(self, x, attention_overrides=None):
        features = x.flatten(1) @ self.weight.T
        attention = torch.full((x.shape[0], 1, 5, 5), 0.2, dtype=x.dtype)
        return torch.zeros(x.shape[0], 2, dtype=x.dtype), features, [attention]


def _linear_model(seed: int = 0) -> LinearFeatures:
    generator = torch.Generator().manual_seed(seed)
    q, _ = torch.linalg.qr(torch.randn(12, 12, dtype=torch.float64, generator=generator))
    return LinearFeatures(q)


def _sample(seed: int, label: int, name: str) -> ImageSample:
    pixels = torch.rand(3, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    return ImageSample(pixels, label, name)


def _trigger_set(k: int):
    pattern = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(0))
    return make_sub_triggers(Trigger(pattern=pattern, rect=PixelRect(4, 4, 4, 4)), k)


def test_project_linf_examples():
    center = torch.full((3, 4, 4), 0.5)
    inside = center + 0.05
    assert torch.equal(project_linf(inside, center, 0.1), inside)
    assert torch.allclose(project_linf(center + 0.3, center, 0.1), center + 0.1)
    assert torch.equal(project_linf(torch.rand(3, 4, 4), center, 0.0), center)


def test_project_linf_respects_unit_range():
    center = torch.full((2, 2), 0.95)
    out = project_linf(torch.full((2, 2), 2.0), center, 0.2)
    assert torch.equal(out, torch.ones(2, 2))


def test_quantize_in_band_stays_on_grid_and_inside_budget():
    center = torch.round(torch.rand(3, 8, 8) * 255) / 255
    x = project_linf(center + torch.randn(3, 8, 8) * 0.2, center, EPSILON)
    quantized, linf = quantize_in_band(x, center, EPSILON)
    assert linf <= EPSILON
    assert float((quantized.double() - center.double()).abs().max()) <= EPSILON + 1e-6
    assert torch.allclose(quantized * 255, torch.round(quantized * 255), atol=1e-4)


def test_poison_sample_without_steps_returns_target():
    model = _linear_model()
    x_t, x_a = _sample(1, 0, "t"), _sample(2, 1, "a")
    record = poison_sample(model, x_t, x_a, PoisonConfig(steps=0, quantize=False))
    assert torch.equal(record.poisoned.pixels, x_t.pixels)
    assert record.final_feature_dist == record.initial_feature_dist
    assert record.linf_used == 0.0


def test_poison_sample_with_zero_budget_returns_target():
    model = _linear_model()
    x_t, x_a = _sample(1, 0, "t"), _sample(2, 1, "a")
    record = poison_sample(model, x_t, x_a, PoisonConfig(epsilon=0.0, steps=10, quantize=False))
    assert torch.equal(record.poisoned.pixels, x_t.pixels)


def test_poison_sample_matches_constrained_optimum_of_linear_features():
    model = _linear_model(4)
    x_t, x_a = _sample(5, 0, "t"), _sample(6, 1, "a")
    pcfg = PoisonConfig(epsilon=0.1, steps=60, lr=0.25, quantize=False)
    record = poison_sample(model, x_t, x_a, pcfg)
    # orthogonal W: the constrained minimiser is x_a clamped into the band
    expected = torch.minimum(torch.maximum(x_a.pixels, (x_t.pixels - 0.1).clamp(0, 1)), (x_t.pixels + 0.1).clamp(0, 1))
    assert torch.allclose(record.poisoned.pixels, expected, atol=1e-6)
    assert record.linf_used <= 0.1 + 1e-8
    assert record.poisoned.label == 0


def test_poison_sample_halves_feature_distance_when_band_permits():
    model = _linear_model(7)
    x_t, x_a = _sample(8, 0, "t"), _sample(9, 1, "a")
    record = poison_sample(model, x_t, x_a, PoisonConfig(epsilon=1.0, steps=20, lr=0.25, quantize=False))
    assert math.sqrt(record.final_feature_dist) <= 0.5 * math.sqrt(record.initial_feature_dist)


def test_poison_sample_records_best_iterate():
    model = build_model(SMALL, seed=0)
    samples = make_blobs(2, image_size=8, seed=0)
    pcfg = PoisonConfig(steps=5, lr=5.0)
    record = poison_sample(model, samples[0], samples[1], pcfg)
    assert record.final_feature_dist <= record.initial_feature_dist
    assert record.linf_used <= EPSILON + 1e-8
    assert float((record.poisoned.pixels - samples[0].pixels).abs().max()) <= EPSILON + 1e-6


def test_build_poisoned_dataset_without_poison_is_unchanged():
    data = make_blobs(20, image_size=8, seed=0)
    model = build_model(SMALL, seed=0)
    dataset, records = build_poisoned_dataset(data, model, _trigger_set(4), 0, PoisonConfig(poison_count=0, K=4), source_label=1)
    assert records == []
    assert all(a is b for a, b in zip(dataset, data))


def test_build_poisoned_dataset_uses_each_sub_trigger_once():
    data = make_blobs(40, image_size=8, seed=1)
    model = build_model(SMALL, seed=0)
    pcfg = PoisonConfig(poison_count=8, K=8, steps=1, seed=4)
    dataset, records = build_poisoned_dataset(data, model, _trigger_set(8), 0, pcfg, source_label=1)
    assert sorted(record.sub_trigger_index for record in records) == list(range(8))
    assert [sample.label for sample in dataset] == [sample.label for sample in data]
    origins = {record.target_origin for record in records}
    assert len(origins) == 8
    for original, current in zip(data, dataset):
        if original.sample_id not in origins:
            assert current is original


def test_build_poisoned_dataset_rate_and_budget():
    data = make_blobs(2000, image_size=8, seed=2)
    model = build_model(SMALL, seed=0)
    pcfg = PoisonConfig(poison_rate=0.1, K=8, steps=1, seed=0)
    _, records = build_poisoned_dataset(data, model, _trigger_set(8), 0, pcfg, source_label=1, jobs=2)
    assert len(records) == 200
    targets = {sample.sample_id: sample for sample in data}
    for record in records:
        assert record.linf_used <= EPSILON + 1e-8
        original = targets[record.target_origin].pixels
        assert psnr(record.poisoned.pixels, original) >= 24.0
        assert record.final_feature_dist <= record.initial_feature_dist


def test_build_poisoned_dataset_is_deterministic():
    data = make_blobs(40, image_size=8, seed=3)
    model = build_model(SMALL, seed=0)
    pcfg = PoisonConfig(poison_count=6, K=2, steps=2, mode="any-to-one", seed=9)
    first, _ = build_poisoned_dataset(data, model, _trigger_set(2), 0, pcfg)
    second, _ = build_poisoned_dataset(data, model, _trigger_set(2), 0, pcfg, jobs=3)
    for a, b in zip(first, second):
        assert torch.equal(a.pixels, b.pixels)


def test_build_poisoned_dataset_insufficient_pool():
    data = make_blobs(10, image_size=8, seed=0)
    model = build_model(SMALL, seed=0)
    with pytest.raises(InputError):
        build_poisoned_dataset(data, model, _trigger_set(2), 0, PoisonConfig(poison_count=6, K=2), source_label=1)


def test_one_to_one_requires_source_label():
    data = make_blobs(10, image_size=8, seed=0)
    model = build_model(SMALL, seed=0)
    with pytest.raises(InputError):
        build_poisoned_dataset(data, model, _trigger_set(2), 0, PoisonConfig(poison_count=2, K=2))


def test_poisoned_dataset_directory_round_trip(tmp_path: Path):
    data = make_blobs(24, image_size=8, seed=5)
    model = build_model(SMALL, seed=0)
    pcfg = PoisonConfig(poison_count=4, K=2, steps=2, seed=1)
    dataset, records = build_poisoned_dataset(data, model, _trigger_set(2), 0, pcfg, source_label=1)
    manifest = write_poisoned_dataset(dataset, records, tmp_path / "a")
    write_poisoned_dataset(dataset, records, tmp_path / "b")
    assert manifest.read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()

    samples, rows = read_poisoned_dataset(tmp_path / "a")
    assert len(samples) == len(dataset)
    for written, read in zip(dataset, samples):
        assert written.sample_id == read.sample_id
        assert written.label == read.label
        assert torch.equal(written.pixels, read.pixels)
    assert sorted(row["sample_id"] for row in rows) == sorted(record.poisoned.sample_id for record in records)
    assert all(row["linf_used"] <= EPSILON + 1e-8 for row in rows)
