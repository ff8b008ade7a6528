"""Trigger generation (latent + diffusion loss with gradient surgery) and sub-trigger masking."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm.auto import tqdm

from .datasets import to_png_image
from .errors import DimensionError, InputError, OptimizationError
from .rollout import (
    DiffusionArea,
    PixelRect,
    diffusion_area,
    diffusion_loss,
    grad_attention_rollout,
    importance_scores,
)
from .utils import ensure_directory, read_json, safe_write_json
from .vit import (
    AttentionStack,
    ImageSample,
    VisionTransformer,
    attention_gradients,
    forward,
    forward_with_graph,
)

LOGGER = logging.getLogger("megatron.trigger")

INIT_MODES = ("uniform", "zeros")
PCGRAD_MODES = ("standard", "literal")


@dataclass(frozen=True)
class TriggerConfig:
    width: int = 8
    height: int = 8
    top: int = 12
    left: int = 12
    gamma: float = 1.0
    lr: float = 0.01
    max_iters: int = 200
    tau: float = 0.0
    init_mode: str = "uniform"
    diffusion_radius: int = 0
    pcgrad_mode: str = "standard"
    clamp_rollout: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise InputError("gamma deve ser >= 0")
        if self.max_iters < 0:
            raise InputError("max_iters deve ser >= 0")
        if self.width <= 0 or self.height <= 0:
            raise InputError("Dimensões do trigger devem ser positivas")
        if self.init_mode not in INIT_MODES:
            raise InputError(f"init_mode deve ser um de {INIT_MODES}")
        if self.pcgrad_mode not in PCGRAD_MODES:
            raise InputError(f"pcgrad_mode deve ser um de {PCGRAD_MODES}")

    @property
    def rect(self) -> PixelRect:
        return PixelRect(self.top, self.left, self.height, self.width)


@dataclass
class Trigger:
    pattern: torch.Tensor
    rect: PixelRect
    final_loss: float = math.inf
    iterations_used: int = 0
    loss_history: List[float] = field(default_factory=list)

    @property
    def location(self) -> Tuple[int, int]:
        return (self.rect.top, self.rect.left)


@dataclass
class SubTrigger:
    """Blend ``phi_a * M_i * T + phi_d * (M_T - M_i) * T`` of one mask band."""

    pattern: torch.Tensor
    mask: torch.Tensor
    index: int
    phi_a: float
    phi_d: float
    rect: PixelRect


# Losses and gradient surgery -------------------------------------------------

def latent_loss(attn_last_patched: torch.Tensor, attn_last_target: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance between head-averaged last-layer attention maps."""

    if attn_last_patched.shape != attn_last_target.shape:
        raise DimensionError(
            f"Atenções com formatos diferentes: {tuple(attn_last_patched.shape)} vs {tuple(attn_last_target.shape)}"
        )
    a = attn_last_patched.mean(dim=0) if attn_last_patched.dim() == 3 else attn_last_patched
    b = attn_last_target.mean(dim=0) if attn_last_target.dim() == 3 else attn_last_target
    return ((a - b) ** 2).sum()


def pcgrad(g_alpha: torch.Tensor, g_beta: torch.Tensor, mode: str = "standard") -> torch.Tensor:
    """Combine two objective gradients, projecting on conflict.

    Non-conflicting (cosine >= 0, or a zero gradient): plain sum. Conflicting:
    ``standard`` returns ``g_alpha`` with its ``g_beta`` component removed;
    ``literal`` returns ``g_alpha + (g_alpha.g_beta / |g_beta|^2) g_beta``.
    """

    if g_alpha.shape != g_beta.shape:
        raise DimensionError(f"Gradientes com formatos diferentes: {tuple(g_alpha.shape)} vs {tuple(g_beta.shape)}")
    if mode not in PCGRAD_MODES:
        raise InputError(f"pcgrad_mode deve ser um de {PCGRAD_MODES}")
    dot = torch.sum(g_alpha * g_beta)
    beta_sq = torch.sum(g_beta * g_beta)
    if beta_sq == 0 or torch.sum(g_alpha * g_alpha) == 0 or dot >= 0:
        return g_alpha + g_beta
    coefficient = dot / beta_sq
    if mode == "standard":
        return g_alpha - coefficient * g_beta
    return g_alpha + coefficient * g_beta


# Patching --------------------------------------------------------------------

def place_patch(pixels: torch.Tensor, pattern: torch.Tensor, rect: PixelRect) -> torch.Tensor:
    """Add ``pattern`` at ``rect`` and clip to [0, 1] on the support only (differentiable)."""

    channels, height, width = pixels.shape
    if pattern.shape != (channels, rect.height, rect.width):
        raise DimensionError(f"Padrão {tuple(pattern.shape)} incompatível com o retângulo {rect}")
    if rect.top < 0 or rect.left < 0 or rect.top + rect.height > height or rect.left + rect.width > width:
        raise InputError(f"Posição {rect} fora da imagem {height}x{width}")
    padding = (rect.left, width - rect.left - rect.width, rect.top, height - rect.top - rect.height)
    canvas = F.pad(pattern, padding)
    support = F.pad(torch.ones_like(pattern), padding) > 0.5
    return torch.where(support, (pixels + canvas).clamp(0.0, 1.0), pixels)


Location = Union[PixelRect, Tuple[int, int], None]


def _resolve_rect(sub: SubTrigger, location: Location) -> PixelRect:
    if location is None:
        return sub.rect
    if isinstance(location, PixelRect):
        return location
    top, left = location
    return PixelRect(int(top), int(left), sub.rect.height, sub.rect.width)


def patch_image(image: ImageSample, sub: SubTrigger, location: Location = None) -> ImageSample:
    rect = _resolve_rect(sub, location)
    patched = place_patch(image.pixels, sub.pattern.to(image.pixels.dtype), rect)
    return image.with_pixels(patched)


# Masking ---------------------------------------------------------------------

def split_masks(height: int, width: int, k: int) -> torch.Tensor:
    """``k`` disjoint binary masks (k, height, width) of contiguous row-major bands.

    Each band holds ``height*width // k`` pixels; the remainder goes to the last band.
    """

    total = height * width
    if k < 1 or k > total:
        raise InputError(f"K={k} inválido para um trigger de {total} pixels")
    chunk = total // k
    flat = torch.zeros(k, total)
    for index in range(k):
        end = total if index == k - 1 else (index + 1) * chunk
        flat[index, index * chunk : end] = 1.0
    return flat.reshape(k, height, width)


def make_sub_trigger(
    trigger: Trigger,
    mask: torch.Tensor,
    phi_a: float = 0.5,
    phi_d: float = 0.1,
    index: int = 0,
) -> SubTrigger:
    for name, value in (("phi_a", phi_a), ("phi_d", phi_d)):
        if not 0.0 <= value <= 1.0:
            raise InputError(f"{name}={value} fora de [0, 1]")
    if tuple(mask.shape) != tuple(trigger.pattern.shape[1:]):
        raise DimensionError(f"Máscara {tuple(mask.shape)} incompatível com o trigger {tuple(trigger.pattern.shape)}")
    mask = mask.to(trigger.pattern.dtype)
    active = mask.unsqueeze(0)
    rest = (1.0 - mask).unsqueeze(0)
    pattern = phi_a * active * trigger.pattern + phi_d * rest * trigger.pattern
    return SubTrigger(pattern=pattern, mask=mask, index=index, phi_a=phi_a, phi_d=phi_d, rect=trigger.rect)


def make_sub_triggers(trigger: Trigger, k: int, phi_a: float = 0.5, phi_d: float = 0.1) -> List[SubTrigger]:
    masks = split_masks(trigger.rect.height, trigger.rect.width, k)
    return [make_sub_trigger(trigger, masks[index], phi_a, phi_d, index=index) for index in range(k)]


# Generation ------------------------------------------------------------------

def _initial_pattern(tcfg: TriggerConfig, channels: int, dtype: torch.dtype) -> torch.Tensor:
    if tcfg.init_mode == "zeros":
        return torch.zeros(channels, tcfg.height, tcfg.width, dtype=dtype)
    generator = torch.Generator().manual_seed(tcfg.seed)
    return torch.rand(channels, tcfg.height, tcfg.width, generator=generator, dtype=dtype)


def split_pools(
    dataset: Sequence[ImageSample], target_label: int, source_label: Optional[int]
) -> Tuple[List[ImageSample], List[ImageSample]]:
    """Source pool (given label, or every non-target label) and target pool."""

    if source_label is None:
        sources = [sample for sample in dataset if sample.label != target_label]
    else:
        sources = [sample for sample in dataset if sample.label == source_label]
    targets = [sample for sample in dataset if sample.label == target_label]
    return sources, targets


def _trigger_objective(
    model: VisionTransformer,
    pattern: torch.Tensor,
    source: ImageSample,
    reference: AttentionStack,
    target_label: int,
    tcfg: TriggerConfig,
    area: DiffusionArea,
    grid: Tuple[int, int],
) -> Tuple[float, float, torch.Tensor, torch.Tensor]:
    """``(combined loss, latent loss, dL_alpha/dT, gamma * dL_beta/dT)`` at ``pattern``."""

    variable = pattern.detach().clone().requires_grad_(True)
    patched = place_patch(source.pixels.to(variable.dtype), variable, tcfg.rect)
    stack = forward_with_graph(model, patched)
    l_alpha = latent_loss(stack.last_layer(), reference.last_layer())
    (g_alpha,) = torch.autograd.grad(l_alpha, variable, retain_graph=tcfg.gamma > 0)
    total = l_alpha.detach()
    g_beta = torch.zeros_like(g_alpha)
    if tcfg.gamma > 0:
        grads = attention_gradients(stack, target_label, create_graph=True)
        graded = AttentionStack(attn=stack.attn, logits=stack.logits, features=stack.features, attn_grad=grads)
        scores = importance_scores(grad_attention_rollout(graded, clamp=tcfg.clamp_rollout), grid)
        l_beta = diffusion_loss(scores, area)
        (weighted,) = torch.autograd.grad(tcfg.gamma * l_beta, variable, allow_unused=True)
        if weighted is not None:
            g_beta = weighted
        total = total + tcfg.gamma * l_beta.detach()
    return float(total), float(l_alpha), g_alpha, g_beta


def generate_trigger(
    model: VisionTransformer,
    dataset: Sequence[ImageSample],
    target_label: int,
    tcfg: TriggerConfig,
    *,
    source_label: Optional[int] = None,
    progress: bool = False,
) -> Trigger:
    """Optimise the trigger on ``model`` until the combined loss reaches ``tau`` or ``max_iters``.

    Each iteration draws one source and one target sample, patches the source,
    and descends ``pcgrad(dL_alpha/dT, gamma * dL_beta/dT)`` with clipping to [0, 1].
    ``loss_history[i]`` is the loss measured before update ``i``; ``final_loss`` is
    the loss of the returned pattern.
    """

    config = model.config
    sources, targets = split_pools(dataset, target_label, source_label)
    if not sources:
        raise InputError("Nenhuma amostra de origem disponível para gerar o trigger")
    if not targets:
        raise InputError("Nenhuma amostra do rótulo alvo disponível para gerar o trigger")
    rect = tcfg.rect
    if not rect.inside(config.image_size):
        raise InputError(f"Trigger {rect} fora da imagem de {config.image_size}px")
    area = diffusion_area(rect, config, tcfg.diffusion_radius)
    grid = (config.grid_size, config.grid_size)

    model.eval()
    pattern = _initial_pattern(tcfg, config.channels, model.dtype)
    rng = np.random.default_rng(tcfg.seed)
    trigger = Trigger(pattern=pattern.clone(), rect=rect)
    LOGGER.info(
        "Gerando trigger %sx%s em (%s, %s): gamma=%s, m=%s, q=%s, E=%s",
        rect.height,
        rect.width,
        rect.top,
        rect.left,
        tcfg.gamma,
        area.m,
        area.q,
        tcfg.max_iters,
    )

    def evaluate(current: torch.Tensor, iteration: int) -> Tuple[float, torch.Tensor, torch.Tensor]:
        source = sources[int(rng.integers(len(sources)))]
        reference = forward(model, targets[int(rng.integers(len(targets)))])
        total, latent, g_alpha, g_beta = _trigger_objective(
            model, current, source, reference, target_label, tcfg, area, grid
        )
        if not math.isfinite(total):
            raise OptimizationError(
                "Perda não finita durante a geração do trigger",
                diagnostic={"iteration": iteration, "latent_loss": latent},
            )
        return total, g_alpha, g_beta

    loss_value = math.inf
    iteration = 0
    bar = tqdm(total=tcfg.max_iters, desc="trigger", disable=not progress, leave=False)
    while iteration < tcfg.max_iters:
        loss_value, g_alpha, g_beta = evaluate(pattern, iteration)
        trigger.loss_history.append(loss_value)
        if loss_value <= tcfg.tau:
            break
        delta = pcgrad(g_alpha, g_beta, tcfg.pcgrad_mode)
        pattern = (pattern - tcfg.lr * delta).clamp(0.0, 1.0).detach()
        iteration += 1
        bar.update(1)
        if iteration % 50 == 0:
            LOGGER.debug("Iteração %s: perda=%.6f", iteration, loss_value)
    bar.close()
    if iteration and iteration == len(trigger.loss_history):
        loss_value, _, _ = evaluate(pattern, iteration)

    trigger.pattern = pattern
    trigger.final_loss = loss_value
    trigger.iterations_used = iteration
    LOGGER.info("Trigger gerado em %s iterações (perda final %s)", iteration, loss_value)
    return trigger


# Artifacts -------------------------------------------------------------------

PATTERN_FILE = "pattern.npy"
PREVIEW_FILE = "pattern.png"
SIDECAR_FILE = "trigger.json"


def save_trigger(trigger: Trigger, directory: Path, *, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Persist the exact pattern (.npy), a PNG preview and a JSON sidecar."""

    ensure_directory(directory)
    np.save(directory / PATTERN_FILE, trigger.pattern.detach().cpu().numpy(), allow_pickle=False)
    if trigger.pattern.shape[0] == 3:
        to_png_image(trigger.pattern).save(directory / PREVIEW_FILE, format="PNG")
    sidecar = {
        "location": {"top": trigger.rect.top, "left": trigger.rect.left},
        "size": {"height": trigger.rect.height, "width": trigger.rect.width},
        "final_loss": trigger.final_loss if math.isfinite(trigger.final_loss) else None,
        "iterations_used": trigger.iterations_used,
        "loss_history": trigger.loss_history,
    }
    sidecar.update(metadata or {})
    safe_write_json(directory / SIDECAR_FILE, sidecar)
    LOGGER.info("Trigger salvo em %s", directory)
    return directory / PATTERN_FILE


def load_trigger(directory: Path) -> Trigger:
    sidecar = read_json(directory / SIDECAR_FILE)
    pattern = torch.from_numpy(np.load(directory / PATTERN_FILE, allow_pickle=False))
    rect = PixelRect(
        sidecar["location"]["top"],
        sidecar["location"]["left"],
        sidecar["size"]["height"],
        sidecar["size"]["width"],
    )
    final_loss = sidecar.get("final_loss")
    return Trigger(
        pattern=pattern,
        rect=rect,
        final_loss=math.inf if final_loss is None else float(final_loss),
        iterations_used=int(sidecar.get("iterations_used", 0)),
        loss_history=list(sidecar.get("loss_history", [])),
    )


__all__ = [
    "INIT_MODES",
    "Location",
    "PCGRAD_MODES",
    "SubTrigger",
    "Trigger",
    "TriggerConfig",
    "generate_trigger",
    "latent_loss",
    "load_trigger",
    "make_sub_trigger",
    "make_sub_triggers",
    "patch_image",
    "pcgrad",
    "place_patch",
    "save_trigger",
    "split_masks",
    "split_pools",
]
