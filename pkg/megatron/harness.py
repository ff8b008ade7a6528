"""End-to-end attack pipeline: stages, run directory, artifact integrity and evaluation."""
from __future__ import annotations

import dataclasses
import logging
import shutil
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from einops import rearrange

from .config import ExperimentConfig
from .datasets import Split, load_dataset
from .errors import ConfigError, InputError, MegatronError, MissingArtifactError, StageError, UnsafeOverwriteError
from .metrics import AttackReport, cda, sasr, scda, stealth_summary
from .poison import build_poisoned_dataset, read_poisoned_dataset, write_poisoned_dataset
from .rollout import PixelRect, export_importance_grid, importance_for
from .trigger import (
    SIDECAR_FILE,
    SubTrigger,
    Trigger,
    generate_trigger,
    load_trigger,
    make_sub_triggers,
    place_patch,
    save_trigger,
    split_pools,
)
from .utils import (
    StageTimer,
    directory_is_empty,
    ensure_directory,
    file_sha256,
    json_sha256,
    log_to_file,
    read_json,
    safe_write_json,
)
from .vit import ImageSample, ModelConfig, TrainConfig, VisionTransformer, load_checkpoint, save_checkpoint, train

LOGGER = logging.getLogger("megatron.harness")

STAGES = ("train-surrogate", "gen-trigger", "poison", "train-victim", "evaluate")

CONFIG_FILE = "config.json"
INDEX_FILE = "artifacts.json"
TIMINGS_FILE = "timings.csv"
REPORT_FILE = "report.json"
LOGS_DIR = "logs"

ARTIFACT_PATHS = {
    "surrogate": "surrogate/model.pt",
    "trigger": "trigger",
    "poisoned": "poisoned",
    "victim": "victim/model.pt",
    "baseline": "baseline/model.pt",
    "report": REPORT_FILE,
}

Shift = Union[int, Sequence[int]]


# Artifact index ----------------------------------------------------------------

def _content_hash(path: Path) -> str:
    if path.is_dir():
        entries = {
            str(item.relative_to(path)): file_sha256(item) for item in sorted(path.rglob("*")) if item.is_file()
        }
        return json_sha256(entries)
    return file_sha256(path)


class ArtifactIndex:
    """Content hashes of every artifact in a run directory, persisted as ``artifacts.json``."""

    def __init__(self, run_dir: Path) -> None:
        self.run_dir = run_dir
        self.path = run_dir / INDEX_FILE
        self._entries: Dict[str, Dict[str, Any]] = read_json(self.path) if self.path.exists() else {}

    def path_of(self, name: str) -> Path:
        return self.run_dir / ARTIFACT_PATHS[name]

    def record(self, name: str, inputs: Optional[Dict[str, str]] = None) -> str:
        digest = _content_hash(self.path_of(name))
        self._entries[name] = {"path": ARTIFACT_PATHS[name], "sha256": digest, "inputs": dict(inputs or {})}
        safe_write_json(self.path, self._entries)
        return digest

    def verify(self, name: str) -> str:
        """Hash of ``name`` after checking it exists and matches the recorded hash."""

        target = self.path_of(name)
        entry = self._entries.get(name)
        if entry is None or not target.exists():
            raise MissingArtifactError(f"Artefato '{name}' ausente em {target}", artifact=name)
        digest = _content_hash(target)
        if digest != entry["sha256"]:
            raise MissingArtifactError(
                f"Artefato '{name}' corrompido: hash {digest[:12]} difere do registrado {entry['sha256'][:12]}",
                artifact=name,
            )
        return digest

    def has(self, name: str) -> bool:
        return name in self._entries and self.path_of(name).exists()


# Helpers -----------------------------------------------------------------------

def prepare_run_dir(run_dir: Path, *, force: bool = False) -> None:
    if not directory_is_empty(run_dir) and not force:
        raise UnsafeOverwriteError(f"Diretório {run_dir} não está vazio. Use --force para sobrescrever.")
    ensure_directory(run_dir)


def write_config_snapshot(config: ExperimentConfig, run_dir: Path) -> Path:
    target = run_dir / CONFIG_FILE
    safe_write_json(target, config.to_dict())
    return target


def sync_config_snapshot(config: ExperimentConfig, run_dir: Path, *, force: bool = False) -> Path:
    """Keep ``config.json`` equal to the configuration the next stage runs with.

    A differing snapshot is replaced only under ``force``.
    """

    target = run_dir / CONFIG_FILE
    if target.exists() and read_json(target) != config.to_dict():
        if not force:
            raise ConfigError(
                f"A configuração difere do snapshot em {target}. Use --force para substituí-lo.",
                key_path=CONFIG_FILE,
            )
        LOGGER.warning("Snapshot %s substituído pela configuração atual", target)
    return write_config_snapshot(config, run_dir)


def attack_pools(split: Split, config: ExperimentConfig) -> Tuple[List[ImageSample], List[ImageSample]]:
    """``(attacker pool, victim pool)``; identical unless ``attacker_pool`` is ``disjoint``."""

    if config.attack.attacker_pool == "shared":
        return list(split.train), list(split.train)
    order = np.random.default_rng(config.seed).permutation(len(split.train))
    half = len(order) // 2
    attacker = [split.train[index] for index in sorted(order[:half])]
    victim = [split.train[index] for index in sorted(order[half:])]
    return attacker, victim


def source_samples(samples: Sequence[ImageSample], config: ExperimentConfig) -> List[ImageSample]:
    source_label = config.attack.source_label if config.poison.mode == "one-to-one" else None
    sources, _ = split_pools(samples, config.attack.target_label, source_label)
    return sources


def _sub_triggers(trigger: Trigger, config: ExperimentConfig) -> List[SubTrigger]:
    return make_sub_triggers(trigger, config.poison.K, config.poison.phi_a, config.poison.phi_d)


def _model_metadata(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Dict[str, Any]:
    return {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)}


# Stages ------------------------------------------------------------------------

def train_surrogate_stage(config: ExperimentConfig, run_dir: Path, *, progress: bool = False) -> Path:
    split = load_dataset(config.dataset)
    attacker, _ = attack_pools(split, config)
    result = train(config.surrogate.model, config.surrogate.train, attacker, progress=progress)
    index = ArtifactIndex(run_dir)
    target = save_checkpoint(
        result.model,
        index.path_of("surrogate"),
        metadata={**_model_metadata(config.surrogate.model, config.surrogate.train), "epoch_losses": result.epoch_losses},
    )
    _write_history(run_dir / "surrogate" / "history.csv", result.epoch_losses, result.epoch_accuracy)
    index.record("surrogate", {"dataset": json_sha256(dataclasses.asdict(config.dataset))})
    return target


def gen_trigger_stage(config: ExperimentConfig, run_dir: Path, *, progress: bool = False) -> Path:
    index = ArtifactIndex(run_dir)
    surrogate_hash = index.verify("surrogate")
    surrogate = load_checkpoint(index.path_of("surrogate"))
    split = load_dataset(config.dataset)
    attacker, _ = attack_pools(split, config)
    source_label = config.attack.source_label if config.poison.mode == "one-to-one" else None
    trigger = generate_trigger(
        surrogate,
        attacker,
        config.attack.target_label,
        config.trigger,
        source_label=source_label,
        progress=progress,
    )
    directory = index.path_of("trigger")
    if directory.exists():
        shutil.rmtree(directory)
    save_trigger(trigger, directory, metadata={"target_label": config.attack.target_label})
    sources = source_samples(attacker, config)
    if sources:
        patched = sources[0].with_pixels(place_patch(sources[0].pixels, trigger.pattern.to(sources[0].pixels.dtype), trigger.rect))
        scores = importance_for(surrogate, patched, config.attack.target_label, clamp=config.trigger.clamp_rollout)
        export_importance_grid(scores, directory / "importance.txt", directory / "importance.png")
    index.record("trigger", {"surrogate": surrogate_hash})
    return directory / SIDECAR_FILE


def poison_stage(config: ExperimentConfig, run_dir: Path, *, jobs: int = 1, progress: bool = False) -> Path:
    index = ArtifactIndex(run_dir)
    inputs = {"surrogate": index.verify("surrogate"), "trigger": index.verify("trigger")}
    surrogate = load_checkpoint(index.path_of("surrogate"))
    trigger = load_trigger(index.path_of("trigger"))
    split = load_dataset(config.dataset)
    _, victim_pool = attack_pools(split, config)
    dataset, records = build_poisoned_dataset(
        victim_pool,
        surrogate,
        _sub_triggers(trigger, config),
        config.attack.target_label,
        config.poison,
        source_label=config.attack.source_label,
        jobs=jobs,
        progress=progress,
    )
    directory = index.path_of("poisoned")
    if directory.exists():
        shutil.rmtree(directory)
    manifest = write_poisoned_dataset(dataset, records, directory)
    index.record("poisoned", inputs)
    return manifest


def train_victim_model(
    dataset: Sequence[ImageSample], model_config: ModelConfig, train_config: TrainConfig, *, progress: bool = False
) -> VisionTransformer:
    """Benign trainer: plain cross-entropy on whatever dataset it is handed."""

    return train(model_config, train_config, dataset, progress=progress).model


def train_victim_stage(config: ExperimentConfig, run_dir: Path, *, progress: bool = False) -> Path:
    index = ArtifactIndex(run_dir)
    poisoned_hash = index.verify("poisoned")
    samples, _ = read_poisoned_dataset(index.path_of("poisoned"))
    metadata = _model_metadata(config.victim.model, config.victim.train)
    victim = train_victim_model(samples, config.victim.model, config.victim.train, progress=progress)
    target = save_checkpoint(victim, index.path_of("victim"), metadata=metadata)
    index.record("victim", {"poisoned": poisoned_hash})

    split = load_dataset(config.dataset)
    _, clean_pool = attack_pools(split, config)
    baseline = train_victim_model(clean_pool, config.victim.model, config.victim.train, progress=progress)
    save_checkpoint(baseline, index.path_of("baseline"), metadata=metadata)
    index.record("baseline", {"dataset": json_sha256(dataclasses.asdict(config.dataset))})
    return target


def evaluate_stage(config: ExperimentConfig, run_dir: Path) -> Path:
    index = ArtifactIndex(run_dir)
    inputs = {name: index.verify(name) for name in ("victim", "baseline", "trigger", "poisoned")}
    victim = load_checkpoint(index.path_of("victim"))
    baseline = load_checkpoint(index.path_of("baseline"))
    trigger = load_trigger(index.path_of("trigger"))
    poisoned_samples, poisoned_rows = read_poisoned_dataset(index.path_of("poisoned"))
    split = load_dataset(config.dataset)
    _, clean_pool = attack_pools(split, config)

    evaluation = config.evaluation
    sub = _sub_triggers(trigger, config)[evaluation.sub_trigger_index]
    location = tuple(evaluation.location) if evaluation.location is not None else sub.rect
    sources = source_samples(split.test, config)
    target_label = config.attack.target_label
    source_label = config.attack.source_label if config.poison.mode == "one-to-one" else None

    shifts = shift_evaluation(victim, sources, sub, location, evaluation.shifts, target_label)

    clean_by_id = {sample.sample_id: sample for sample in clean_pool}
    poisoned_by_id = {sample.sample_id: sample for sample in poisoned_samples}
    pairs = [
        (poisoned_by_id[row["sample_id"]].pixels, clean_by_id[row["target_origin"]].pixels)
        for row in poisoned_rows
    ]
    stealth = stealth_summary(pairs, evaluation.ssim)
    linf_max = max((float(row["linf_used"]) for row in poisoned_rows), default=None)

    defense = None
    if config.defense.enabled:
        defense = defense_metrics(victim, split.test, sources, sub, location, config)

    report = AttackReport(
        cda=cda(victim, split.test),
        sasr=sasr(victim, sources, sub, location, target_label),
        scda=scda(victim, sources, source_label),
        baseline_cda=cda(baseline, split.test),
        baseline_sasr=sasr(baseline, sources, sub, location, target_label),
        psnr_mean=stealth.psnr_mean,
        psnr_min=stealth.psnr_min,
        ssim_mean=stealth.ssim_mean,
        l1_mean=stealth.l1_mean,
        lpips_mean=stealth.lpips_mean,
        linf_max=linf_max,
        poison_count=len(poisoned_rows),
        sub_trigger_index=evaluation.sub_trigger_index,
        shift_sasr=shifts,
        defense=defense,
        trigger_final_loss=read_json(index.path_of("trigger") / SIDECAR_FILE).get("final_loss"),
        seed=config.seed,
        config=config.to_dict(),
    )
    target = report.save(index.path_of("report"))
    index.record("report", inputs)
    LOGGER.info(
        "Relatório: CDA=%.4f SASR=%.4f (baseline %.4f) SCDA=%.4f",
        report.cda,
        report.sasr,
        report.baseline_sasr,
        report.scda,
    )
    return target


# Evaluation helpers ------------------------------------------------------------

def _shift_key(shift: Shift) -> Tuple[str, int, int]:
    if isinstance(shift, (int, np.integer)):
        return str(int(shift)), 0, int(shift)
    dy, dx = (int(value) for value in shift)
    return f"{dy},{dx}", dy, dx


def shift_evaluation(
    victim: VisionTransformer,
    source_set: Sequence[ImageSample],
    sub: SubTrigger,
    base_location: Union[PixelRect, Tuple[int, int]],
    shifts: Sequence[Shift],
    target_label: int,
) -> Dict[str, float]:
    """SASR with the sub-trigger displaced by whole tokens.

    An integer shift moves the patch right by that many tokens; a pair is
    ``(down, right)``.
    """

    if isinstance(base_location, PixelRect):
        base = base_location
    else:
        base = PixelRect(int(base_location[0]), int(base_location[1]), sub.rect.height, sub.rect.width)
    patch_size = victim.config.patch_size
    results: Dict[str, float] = {}
    for shift in shifts:
        key, dy, dx = _shift_key(shift)
        rect = base.shifted(dy * patch_size, dx * patch_size)
        if not rect.inside(victim.config.image_size):
            raise InputError(f"Deslocamento {key} leva o trigger para fora da imagem ({rect})")
        results[key] = sasr(victim, source_set, sub, rect if (dy or dx) else base_location, target_label)
        LOGGER.info("SASR com deslocamento %s tokens: %.4f", key, results[key])
    return results


def patch_defense_probe(
    image: torch.Tensor, drop_rate: float, shuffle: bool, seed: int, patch_size: int = 4
) -> torch.Tensor:
    """Zero a random ``drop_rate`` fraction of patches and optionally permute the survivors."""

    if not 0.0 <= drop_rate < 1.0:
        raise InputError(f"drop_rate={drop_rate} deve estar em [0, 1)")
    channels, height, width = image.shape
    if height % patch_size or width % patch_size:
        raise InputError(f"Imagem {height}x{width} não divisível em patches de {patch_size}")
    if drop_rate == 0.0 and not shuffle:
        return image.clone()
    rows, cols = height // patch_size, width // patch_size
    patches = rearrange(image, "c (h p1) (w p2) -> (h w) c p1 p2", p1=patch_size, p2=patch_size).clone()
    count = rows * cols
    rng = np.random.default_rng(seed)
    order = rng.permutation(count)
    n_drop = int(round(drop_rate * count))
    patches[torch.as_tensor(order[:n_drop], dtype=torch.long)] = 0.0
    if shuffle:
        survivors = torch.as_tensor(np.sort(order[n_drop:]), dtype=torch.long)
        permutation = torch.as_tensor(rng.permutation(len(survivors)), dtype=torch.long)
        patches[survivors] = patches[survivors][permutation]
    return rearrange(patches, "(h w) c p1 p2 -> c (h p1) (w p2)", h=rows, w=cols)


def defense_metrics(
    victim: VisionTransformer,
    test_set: Sequence[ImageSample],
    sources: Sequence[ImageSample],
    sub: SubTrigger,
    location: Union[PixelRect, Tuple[int, int]],
    config: ExperimentConfig,
) -> Dict[str, float]:
    probe = config.defense
    patch_size = victim.config.patch_size

    def transform(pixels: torch.Tensor, position: int) -> torch.Tensor:
        return patch_defense_probe(pixels, probe.drop_rate, probe.shuffle, probe.seed + position, patch_size)

    probed = [sample.with_pixels(transform(sample.pixels, position)) for position, sample in enumerate(test_set)]
    result = {
        "cda": cda(victim, probed),
        "sasr": sasr(victim, sources, sub, location, config.attack.target_label, transform=transform),
    }
    LOGGER.info("Sonda de defesa (drop=%.2f, shuffle=%s): CDA=%.4f SASR=%.4f", probe.drop_rate, probe.shuffle, result["cda"], result["sasr"])
    return result


# Orchestration -----------------------------------------------------------------

def _write_history(path: Path, losses: Sequence[float], accuracy: Sequence[float]) -> None:
    ensure_directory(path.parent)
    frame = pd.DataFrame({"epoch": range(1, len(losses) + 1), "loss": losses, "accuracy": accuracy})
    frame.to_csv(path, index=False)


def _append_timings(run_dir: Path, timer: StageTimer) -> None:
    path = run_dir / TIMINGS_FILE
    fresh = pd.DataFrame(timer.rows, columns=["stage", "seconds", "status"])
    if path.exists():
        previous = pd.read_csv(path)
        previous = previous[~previous["stage"].isin(fresh["stage"])]
        fresh = pd.concat([previous, fresh], ignore_index=True)
    fresh.to_csv(path, index=False)


@contextmanager
def stage_context(name: str, run_dir: Path, timer: StageTimer) -> Iterator[None]:
    """Per-stage log file, timing row, and stage-tagged errors."""

    with log_to_file(run_dir / LOGS_DIR / f"{name}.log"):
        try:
            with timer.stage(name):
                yield
        except StageError:
            raise
        except MegatronError as exc:
            raise StageError(name, str(exc), exit_code=exc.exit_code) from exc
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        finally:
            _append_timings(run_dir, timer)


def run_stage(
    name: str,
    config: ExperimentConfig,
    run_dir: Path,
    *,
    jobs: int = 1,
    force: bool = False,
    progress: bool = False,
) -> Path:
    """Run one pipeline stage from the artifacts already persisted in ``run_dir``."""

    handlers: Dict[str, Callable[[], Path]] = {
        "train-surrogate": lambda: train_surrogate_stage(config, run_dir, progress=progress),
        "gen-trigger": lambda: gen_trigger_stage(config, run_dir, progress=progress),
        "poison": lambda: poison_stage(config, run_dir, jobs=jobs, progress=progress),
        "train-victim": lambda: train_victim_stage(config, run_dir, progress=progress),
        "evaluate": lambda: evaluate_stage(config, run_dir),
    }
    if name not in handlers:
        raise InputError(f"Etapa desconhecida: {name}")
    ensure_directory(run_dir)
    sync_config_snapshot(config, run_dir, force=force)
    timer = StageTimer()
    with stage_context(name, run_dir, timer):
        return handlers[name]()


def run_experiment(
    config: ExperimentConfig,
    out_dir: Path,
    *,
    jobs: int = 1,
    force: bool = False,
    progress: bool = False,
) -> AttackReport:
    """Every stage in order; artifacts of completed stages survive a failure."""

    prepare_run_dir(out_dir, force=force)
    write_config_snapshot(config, out_dir)
    LOGGER.info("Experimento iniciado em %s (seed %s)", out_dir, config.seed)
    for name in STAGES:
        run_stage(name, config, out_dir, jobs=jobs, progress=progress)
    report = AttackReport.load(out_dir / REPORT_FILE)
    LOGGER.info("Experimento concluído: relatório em %s", out_dir / REPORT_FILE)
    return report


def poison_rate_sweep(
    config: ExperimentConfig,
    rates: Sequence[float],
    out_dir: Path,
    *,
    jobs: int = 1,
    force: bool = False,
) -> pd.DataFrame:
    """One full experiment per poison rate; returns and saves a summary table."""

    if not rates:
        raise InputError("Lista de taxas vazia")
    prepare_run_dir(out_dir, force=force)
    rows: List[Dict[str, Any]] = []
    for rate in rates:
        run_dir = out_dir / f"rate-{rate:.3f}"
        report = run_experiment(config.with_poison(poison_rate=float(rate)), run_dir, jobs=jobs, force=True)
        rows.append(
            {
                "poison_rate": float(rate),
                "poison_count": report.poison_count,
                "cda": report.cda,
                "sasr": report.sasr,
                "baseline_sasr": report.baseline_sasr,
                "psnr_mean": report.psnr_mean,
            }
        )
    frame = pd.DataFrame(rows)
    frame.to_csv(out_dir / "sweep.csv", index=False)
    return frame


__all__ = [
    "ArtifactIndex",
    "STAGES",
    "attack_pools",
    "defense_metrics",
    "evaluate_stage",
    "gen_trigger_stage",
    "patch_defense_probe",
    "poison_rate_sweep",
    "poison_stage",
    "prepare_run_dir",
    "run_experiment",
    "run_stage",
    "sync_config_snapshot",
    "shift_evaluation",
    "train_surrogate_stage",
    "train_victim_model",
    "train_victim_stage",
]
