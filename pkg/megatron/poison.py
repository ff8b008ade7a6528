"""Clean-label poisoned sample crafting under an L-infinity budget."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm.auto import tqdm

from .datasets import read_dataset_dir, write_dataset_dir
from .errors import DimensionError, InputError, OptimizationError
from .trigger import SubTrigger, patch_image, split_pools
from .vit import ImageSample, VisionTransformer, forward, grad_wrt_input

LOGGER = logging.getLogger("megatron.poison")

POISON_MODES = ("one-to-one", "any-to-one")
STEP_RULES = ("gradient", "sign")
PIXEL_LEVELS = 255


@dataclass(frozen=True)
class PoisonConfig:
    epsilon: float = 16 / 255
    steps: int = 100
    lr: float = 0.01
    poison_count: int = 0
    K: int = 8
    mode: str = "one-to-one"
    poison_rate: Optional[float] = None
    tau: float = 0.0
    decay_coeff: float = 1.0
    decay_every: int = 0
    step_rule: str = "gradient"
    phi_a: float = 0.5
    phi_d: float = 0.1
    quantize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise InputError(f"epsilon={self.epsilon} fora de [0, 1]")
        if self.steps < 0:
            raise InputError("steps deve ser >= 0")
        if self.poison_count < 0:
            raise InputError("poison_count deve ser >= 0")
        if self.K < 1:
            raise InputError("K deve ser >= 1")
        if self.mode not in POISON_MODES:
            raise InputError(f"mode deve ser um de {POISON_MODES}")
        if self.step_rule not in STEP_RULES:
            raise InputError(f"step_rule deve ser um de {STEP_RULES}")
        if self.poison_rate is not None and not 0.0 <= self.poison_rate <= 1.0:
            raise InputError(f"poison_rate={self.poison_rate} fora de [0, 1]")
        if self.decay_every < 0 or self.decay_coeff <= 0:
            raise InputError("decay_every deve ser >= 0 e decay_coeff > 0")

    def resolve_count(self, dataset_size: int) -> int:
        if self.poison_rate is None:
            return self.poison_count
        return int(round(self.poison_rate * dataset_size))


@dataclass
class PoisonRecord:
    poisoned: ImageSample
    target_origin: str
    patched_source_id: str
    sub_trigger_index: int
    initial_feature_dist: float
    final_feature_dist: float
    linf_used: float
    steps_used: int = 0

    def manifest_fields(self) -> Dict[str, Any]:
        fields = asdict(self)
        fields.pop("poisoned")
        return fields


def project_linf(x: torch.Tensor, center: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp ``x`` into ``[center - epsilon, center + epsilon]`` intersected with ``[0, 1]``."""

    if x.shape != center.shape:
        raise DimensionError(f"Formatos diferentes: {tuple(x.shape)} vs {tuple(center.shape)}")
    lower = (center - epsilon).clamp(0.0, 1.0)
    upper = (center + epsilon).clamp(0.0, 1.0)
    return torch.maximum(torch.minimum(x, upper), lower)


def quantize_in_band(x: torch.Tensor, center: torch.Tensor, epsilon: float) -> Tuple[torch.Tensor, float]:
    """Round to the 8-bit grid without leaving the budget; returns ``(pixels, linf)``.

    ``center`` must already lie on the grid. The L-infinity distance is exact
    in grid steps.
    """

    budget = math.floor(epsilon * PIXEL_LEVELS + 1e-6)
    center_codes = torch.round(center.double() * PIXEL_LEVELS)
    codes = torch.round(x.double() * PIXEL_LEVELS)
    codes = torch.minimum(torch.maximum(codes, center_codes - budget), center_codes + budget)
    codes = codes.clamp(0, PIXEL_LEVELS)
    steps = int((codes - center_codes).abs().max()) if codes.numel() else 0
    return (codes / PIXEL_LEVELS).to(x.dtype), steps / PIXEL_LEVELS


def _on_grid(pixels: torch.Tensor) -> bool:
    scaled = pixels.double() * PIXEL_LEVELS
    return bool((scaled - torch.round(scaled)).abs().max() < 1e-4)


def _feature_distance(model: VisionTransformer, pixels: torch.Tensor, reference: torch.Tensor) -> float:
    features = forward(model, pixels).features
    return float(((features - reference) ** 2).sum())


def poison_sample(
    surrogate: VisionTransformer,
    x_t: ImageSample,
    x_a: ImageSample,
    pcfg: PoisonConfig,
    *,
    sub_trigger_index: int = 0,
) -> PoisonRecord:
    """Start from ``x_t`` and descend ``|f(x_p) - f(x_a)|^2`` inside the budget around ``x_t``.

    The best iterate is kept, so the final feature distance never exceeds the
    initial one.
    """

    if x_t.pixels.shape != x_a.pixels.shape:
        raise DimensionError("x_t e x_a com formatos diferentes")
    dtype = surrogate.dtype
    center = x_t.pixels.to(dtype)
    reference = forward(surrogate, x_a.pixels.to(dtype)).features.detach()

    def selector(stack):
        return ((stack.features - reference) ** 2).sum()

    current = center.clone()
    initial = _feature_distance(surrogate, current, reference)
    best, best_loss = current, initial
    lr = pcfg.lr
    steps_used = 0
    for step in range(pcfg.steps):
        if best_loss <= pcfg.tau or pcfg.epsilon == 0:
            break
        grad = grad_wrt_input(surrogate, current, selector)
        direction = torch.sign(grad) if pcfg.step_rule == "sign" else grad
        current = project_linf(current - lr * direction, center, pcfg.epsilon)
        loss = _feature_distance(surrogate, current, reference)
        steps_used = step + 1
        if not math.isfinite(loss):
            raise OptimizationError(
                "Perda não finita ao envenenar amostra",
                diagnostic={"target": x_t.sample_id, "source": x_a.sample_id, "step": step, "lr": lr},
            )
        if loss < best_loss:
            best, best_loss = current, loss
        if pcfg.decay_every and steps_used % pcfg.decay_every == 0:
            lr *= pcfg.decay_coeff

    if torch.equal(best, center):
        linf = 0.0
    elif pcfg.quantize and _on_grid(center):
        candidate, linf = quantize_in_band(best, center, pcfg.epsilon)
        candidate_loss = _feature_distance(surrogate, candidate, reference)
        if candidate_loss > initial:
            candidate, linf, candidate_loss = center.clone(), 0.0, initial
        best, best_loss = candidate, candidate_loss
    else:
        linf = float((best.double() - center.double()).abs().max())

    return PoisonRecord(
        poisoned=x_t.with_pixels(best.to(x_t.pixels.dtype)),
        target_origin=x_t.sample_id,
        patched_source_id=x_a.sample_id,
        sub_trigger_index=sub_trigger_index,
        initial_feature_dist=initial,
        final_feature_dist=best_loss,
        linf_used=linf,
        steps_used=steps_used,
    )


def plan_poisoning(
    clean_train: Sequence[ImageSample],
    target_label: int,
    pcfg: PoisonConfig,
    *,
    source_label: Optional[int] = None,
) -> List[Tuple[int, ImageSample, int]]:
    """Seeded ``(dataset position of x_t, source sample, sub-trigger index)`` triples."""

    count = pcfg.resolve_count(len(clean_train))
    if count == 0:
        return []
    if pcfg.mode == "one-to-one" and source_label is None:
        raise InputError("Modo one-to-one exige source_label")
    sources, _ = split_pools(clean_train, target_label, source_label if pcfg.mode == "one-to-one" else None)
    target_positions = [index for index, sample in enumerate(clean_train) if sample.label == target_label]
    if count > len(target_positions):
        raise InputError(f"Q={count} excede as {len(target_positions)} amostras do rótulo alvo")
    if count > len(sources):
        raise InputError(f"Q={count} excede as {len(sources)} amostras de origem disponíveis")
    rng = np.random.default_rng(pcfg.seed)
    chosen_targets = rng.choice(len(target_positions), size=count, replace=False)
    chosen_sources = rng.choice(len(sources), size=count, replace=False)
    return [
        (target_positions[int(t)], sources[int(s)], j % pcfg.K)
        for j, (t, s) in enumerate(zip(chosen_targets, chosen_sources))
    ]


def build_poisoned_dataset(
    clean_train: Sequence[ImageSample],
    surrogate: VisionTransformer,
    trigger_set: Sequence[SubTrigger],
    target_label: int,
    pcfg: PoisonConfig,
    *,
    source_label: Optional[int] = None,
    jobs: int = 1,
    progress: bool = False,
) -> Tuple[List[ImageSample], List[PoisonRecord]]:
    """Replace ``Q`` target-label samples by their poisoned versions; labels are never changed.

    The ``j``-th poisoned sample uses sub-trigger ``j % K``, so each group of
    ``K`` consecutive samples covers every sub-trigger once.
    """

    if len(trigger_set) != pcfg.K:
        raise InputError(f"Esperados {pcfg.K} sub-triggers, recebidos {len(trigger_set)}")
    plan = plan_poisoning(clean_train, target_label, pcfg, source_label=source_label)
    if not plan:
        LOGGER.info("Q=0: dataset mantido sem alterações")
        return list(clean_train), []

    LOGGER.info(
        "Envenenando %s amostras (K=%s, %s grupos, epsilon=%.5f, modo %s)",
        len(plan),
        pcfg.K,
        math.ceil(len(plan) / pcfg.K),
        pcfg.epsilon,
        pcfg.mode,
    )

    def craft(item: Tuple[int, ImageSample, int]) -> PoisonRecord:
        position, source, index = item
        patched = patch_image(source, trigger_set[index])
        return poison_sample(surrogate, clean_train[position], patched, pcfg, sub_trigger_index=index)

    surrogate.eval()
    bar = tqdm(total=len(plan), desc="envenenamento", disable=not progress, leave=False)
    records: List[PoisonRecord] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            for record in executor.map(craft, plan):
                records.append(record)
                bar.update(1)
    else:
        for item in plan:
            records.append(craft(item))
            bar.update(1)
    bar.close()

    dataset = list(clean_train)
    for (position, _, _), record in zip(plan, records):
        dataset[position] = record.poisoned
    improved = sum(record.final_feature_dist < record.initial_feature_dist for record in records)
    LOGGER.info("%s de %s amostras reduziram a distância de features", improved, len(records))
    return dataset, records


def write_poisoned_dataset(dataset: Sequence[ImageSample], records: Sequence[PoisonRecord], directory: Path) -> Path:
    extra = {record.poisoned.sample_id: record.manifest_fields() for record in records}
    return write_dataset_dir(dataset, directory, extra)


def read_poisoned_dataset(directory: Path) -> Tuple[List[ImageSample], List[Dict[str, Any]]]:
    """Samples plus the manifest rows of the poisoned ones."""

    samples, frame = read_dataset_dir(directory)
    poisoned = frame[frame["is_poisoned"].astype(bool)]
    return samples, poisoned.to_dict(orient="records")


__all__ = [
    "POISON_MODES",
    "PoisonConfig",
    "PoisonRecord",
    "build_poisoned_dataset",
    "plan_poisoning",
    "poison_sample",
    "project_linf",
    "quantize_in_band",
    "read_poisoned_dataset",
    "write_poisoned_dataset",
]
