"""Attack effectiveness (CDA, SASR, SCDA) and stealth metrics (PSNR, SSIM, L1)."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, InputError, MetricUnavailable
from .trigger import Location, SubTrigger, patch_image
from .utils import read_json, safe_write_json
from .vit import ImageSample, VisionTransformer, predict, stack_samples

LOGGER = logging.getLogger("megatron.metrics")

PSNR_CAP = 100.0
REPORT_SCHEMA = Path(__file__).resolve().parent / "schemas" / "attack_report.schema.json"

ImageArray = Union[torch.Tensor, np.ndarray]
PixelTransform = Callable[[torch.Tensor, int], torch.Tensor]
PerceptualProvider = Callable[[np.ndarray, np.ndarray], float]


# Effectiveness -----------------------------------------------------------------

def _predictions(model: VisionTransformer, samples: Sequence[ImageSample]) -> torch.Tensor:
    pixels, _ = stack_samples(samples)
    return predict(model, pixels)


def cda(model: VisionTransformer, clean_set: Sequence[ImageSample]) -> float:
    """Clean data accuracy."""

    if not clean_set:
        raise InputError("Conjunto limpo vazio")
    labels = torch.tensor([sample.label for sample in clean_set])
    return int((_predictions(model, clean_set) == labels).sum()) / len(clean_set)


def sasr(
    model: VisionTransformer,
    source_set: Sequence[ImageSample],
    sub: SubTrigger,
    location: Location,
    target_label: int,
    *,
    transform: Optional[PixelTransform] = None,
) -> float:
    """Fraction of patched source samples classified as ``target_label``.

    ``transform(pixels, position)`` runs on each patched image before
    inference (used by the defense probe).
    """

    if not source_set:
        raise InputError("Conjunto de origem vazio")
    patched = [patch_image(sample, sub, location) for sample in source_set]
    if transform is not None:
        patched = [sample.with_pixels(transform(sample.pixels, index)) for index, sample in enumerate(patched)]
    predictions = _predictions(model, patched)
    return int((predictions == target_label).sum()) / len(source_set)


def scda(model: VisionTransformer, source_set: Sequence[ImageSample], source_label: Optional[int] = None) -> float:
    """Accuracy on unpatched source samples."""

    if not source_set:
        raise InputError("Conjunto de origem vazio")
    labels = torch.tensor([sample.label for sample in source_set])
    if source_label is not None and bool((labels != source_label).any()):
        raise InputError(f"Conjunto de origem contém rótulos diferentes de {source_label}")
    return int((_predictions(model, source_set) == labels).sum()) / len(source_set)


# Stealth -----------------------------------------------------------------------

def _as_array(image: ImageArray) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        return image.detach().cpu().double().numpy()
    return np.asarray(image, dtype=np.float64)


def _pair(a: ImageArray, b: ImageArray) -> Tuple[np.ndarray, np.ndarray]:
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DimensionError(f"Imagens com formatos diferentes: {x.shape} vs {y.shape}")
    return x, y


def psnr(a: ImageArray, b: ImageArray, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical images give ``PSNR_CAP``."""

    if peak <= 0:
        raise InputError("peak deve ser > 0")
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


def l1_distance(a: ImageArray, b: ImageArray) -> float:
    x, y = _pair(a, b)
    return float(np.mean(np.abs(x - y)))


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 8
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    peak: float = 1.0
    c1: Optional[float] = None
    c2: Optional[float] = None

    def __post_init__(self) -> None:
        if self.window < 1:
            raise InputError("window deve ser >= 1")
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InputError(f"{name}={value} fora de [0, 1]")

    @property
    def stabilizers(self) -> Tuple[float, float, float]:
        c1 = (0.01 * self.peak) ** 2 if self.c1 is None else self.c1
        c2 = (0.03 * self.peak) ** 2 if self.c2 is None else self.c2
        return c1, c2, c2 / 2.0


def _signed_power(values: np.ndarray, exponent: float) -> np.ndarray:
    if exponent == 1.0:
        return values
    return np.sign(values) * np.abs(values) ** exponent


def _ssim_channel(x: np.ndarray, y: np.ndarray, cfg: SSIMConfig) -> float:
    c1, c2, c3 = cfg.stabilizers
    shape = (cfg.window, cfg.window)
    wx = sliding_window_view(x, shape)
    wy = sliding_window_view(y, shape)
    mu_x = wx.mean(axis=(-1, -2))
    mu_y = wy.mean(axis=(-1, -2))
    var_x = np.maximum(wx.var(axis=(-1, -2)), 0.0)
    var_y = np.maximum(wy.var(axis=(-1, -2)), 0.0)
    cov = (wx * wy).mean(axis=(-1, -2)) - mu_x * mu_y
    sigma_x, sigma_y = np.sqrt(var_x), np.sqrt(var_y)
    luminance = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    contrast = (2 * sigma_x * sigma_y + c2) / (var_x + var_y + c2)
    structure = (cov + c3) / (sigma_x * sigma_y + c3)
    combined = (
        _signed_power(luminance, cfg.alpha)
        * _signed_power(contrast, cfg.beta)
        * _signed_power(structure, cfg.gamma)
    )
    return float(combined.mean())


def ssim(a: ImageArray, b: ImageArray, cfg: Optional[SSIMConfig] = None) -> float:
    """Mean over sliding windows of luminance, contrast and structure terms; channels averaged.

    Accepts (H, W) or (C, H, W) images.
    """

    cfg = cfg or SSIMConfig()
    x, y = _pair(a, b)
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise DimensionError(f"Esperado (C, H, W) ou (H, W), recebido {x.shape}")
    if cfg.window > min(x.shape[1:]):
        raise InputError(f"Janela {cfg.window} maior que a imagem {x.shape[1:]}")
    if np.array_equal(x, y):
        return 1.0
    return float(np.mean([_ssim_channel(x[c], y[c], cfg) for c in range(x.shape[0])]))


def lpips_stub(a: ImageArray, b: ImageArray, provider: Optional[PerceptualProvider] = None) -> Optional[float]:
    """Perceptual distance from an external provider, or ``None`` when none is configured."""

    if provider is None:
        return None
    x, y = _pair(a, b)
    try:
        value = float(provider(x, y))
    except Exception as exc:
        raise MetricUnavailable(f"Provedor perceptual falhou: {exc}") from exc
    if not math.isfinite(value):
        raise MetricUnavailable("Provedor perceptual devolveu valor não finito")
    return value


@dataclass
class StealthSummary:
    psnr_mean: Optional[float] = None
    psnr_min: Optional[float] = None
    ssim_mean: Optional[float] = None
    l1_mean: Optional[float] = None
    lpips_mean: Optional[float] = None


def stealth_summary(
    pairs: Iterable[Tuple[ImageArray, ImageArray]],
    ssim_cfg: Optional[SSIMConfig] = None,
    provider: Optional[PerceptualProvider] = None,
) -> StealthSummary:
    """Means of the stealth metrics over ``(x_p, x_t)`` pairs."""

    rows: List[Dict[str, Optional[float]]] = []
    for poisoned, target in pairs:
        rows.append(
            {
                "psnr": psnr(poisoned, target),
                "ssim": ssim(poisoned, target, ssim_cfg),
                "l1": l1_distance(poisoned, target),
                "lpips": lpips_stub(poisoned, target, provider),
            }
        )
    if not rows:
        return StealthSummary()
    frame = pd.DataFrame(rows)
    lpips_mean = None if frame["lpips"].isna().all() else float(frame["lpips"].mean())
    return StealthSummary(
        psnr_mean=float(frame["psnr"].mean()),
        psnr_min=float(frame["psnr"].min()),
        ssim_mean=float(frame["ssim"].mean()),
        l1_mean=float(frame["l1"].mean()),
        lpips_mean=lpips_mean,
    )


# Report ------------------------------------------------------------------------

FRACTION_FIELDS = ("cda", "sasr", "scda", "baseline_cda", "baseline_sasr")


@dataclass
class AttackReport:
    cda: float
    sasr: float
    scda: float
    baseline_cda: float
    baseline_sasr: float
    psnr_mean: Optional[float] = None
    psnr_min: Optional[float] = None
    ssim_mean: Optional[float] = None
    l1_mean: Optional[float] = None
    lpips_mean: Optional[float] = None
    linf_max: Optional[float] = None
    poison_count: int = 0
    sub_trigger_index: int = 0
    shift_sasr: Dict[str, float] = field(default_factory=dict)
    defense: Optional[Dict[str, float]] = None
    trigger_final_loss: Optional[float] = None
    seed: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = [(name, getattr(self, name)) for name in FRACTION_FIELDS]
        values += [(f"shift_sasr.{key}", value) for key, value in self.shift_sasr.items()]
        values += [(f"defense.{key}", value) for key, value in (self.defense or {}).items()]
        for name, value in values:
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"Campo {name}={value} fora de [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttackReport":
        known = {item.name for item in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"Campos desconhecidos no relatório: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"

    def save(self, path: Path) -> Path:
        data = self.to_dict()
        validate_report(data)
        safe_write_json(path, data)
        return path

    @classmethod
    def load(cls, path: Path) -> "AttackReport":
        data = read_json(path)
        validate_report(data)
        return cls.from_dict(data)

    def summary_table(self) -> pd.DataFrame:
        rows: List[Tuple[str, Any]] = [
            ("CDA", self.cda),
            ("SASR", self.sasr),
            ("SCDA", self.scda),
            ("CDA (baseline)", self.baseline_cda),
            ("SASR (baseline)", self.baseline_sasr),
            ("PSNR médio (dB)", self.psnr_mean),
            ("PSNR mínimo (dB)", self.psnr_min),
            ("SSIM médio", self.ssim_mean),
            ("L1 médio", self.l1_mean),
            ("LPIPS médio", self.lpips_mean),
            ("L-inf máximo", self.linf_max),
            ("Amostras envenenadas", self.poison_count),
        ]
        rows += [(f"SASR deslocamento {key}", value) for key, value in sorted(self.shift_sasr.items())]
        rows += [(f"Defesa {key.upper()}", value) for key, value in sorted((self.defense or {}).items())]
        return pd.DataFrame(rows, columns=["métrica", "valor"])


def validate_report(data: Dict[str, Any]) -> None:
    """Check ``data`` against the published report schema."""

    import jsonschema

    schema = read_json(REPORT_SCHEMA)
    try:
        jsonschema.validate(instance=data, schema=schema)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(part) for part in exc.absolute_path) or "<raiz>"
        raise ContractError(f"Relatório inválido em {path}: {exc.message}") from exc


__all__ = [
    "AttackReport",
    "PSNR_CAP",
    "SSIMConfig",
    "StealthSummary",
    "cda",
    "l1_distance",
    "lpips_stub",
    "psnr",
    "sasr",
    "scda",
    "ssim",
    "stealth_summary",
    "validate_report",
]
