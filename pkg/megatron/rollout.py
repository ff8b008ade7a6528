"""Gradient-attention rollout, importance scores and the attention diffusion area."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import BoundError, ContractError, DimensionError, InputError
from .vit import AttentionStack, ImageLike, ModelConfig, VisionTransformer, grad_wrt_attention

LOGGER = logging.getLogger("megatron.rollout")

# q <= DIFFUSION_BOUND * m
DIFFUSION_BOUND = 3

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class PixelRect:
    top: int
    left: int
    height: int
    width: int

    def inside(self, image_size: int) -> bool:
        return (
            self.top >= 0
            and self.left >= 0
            and self.height > 0
            and self.width > 0
            and self.top + self.height <= image_size
            and self.left + self.width <= image_size
        )

    def shifted(self, dy: int, dx: int) -> "PixelRect":
        return PixelRect(self.top + dy, self.left + dx, self.height, self.width)


@dataclass
class ImportanceScores:
    """Row 0 of the rolled-out matrix; entry 0 is the class token's self term."""

    scores: torch.Tensor
    grid_rows: int
    grid_cols: int

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def patch_grid(self) -> np.ndarray:
        return self.scores[1:].detach().cpu().double().numpy().reshape(self.grid_rows, self.grid_cols)


@dataclass(frozen=True)
class DiffusionArea:
    token_indices: FrozenSet[int]
    trigger_tokens: FrozenSet[int]
    radius: int

    @property
    def q(self) -> int:
        return len(self.token_indices)

    @property
    def m(self) -> int:
        return len(self.trigger_tokens)


def grad_attention_rollout(stack: AttentionStack, *, clamp: bool = False) -> torch.Tensor:
    """Roll ``head_mean(A_l) * head_mean(dy_t/dA_l)`` through the layers.

    ``A_0 = fused_0`` and ``A_l = fused_l @ A_{l-1}``. With ``clamp`` negative
    fused entries are zeroed before the product.
    """

    if stack.attn_grad is None:
        raise ContractError("Rollout exige gradientes da atenção (attn_grad ausente)")
    if not stack.attn:
        raise ContractError("Pilha de atenção vazia")
    rolled: Optional[torch.Tensor] = None
    for attn, grad in zip(stack.attn, stack.attn_grad):
        if attn.shape != grad.shape:
            raise DimensionError("Atenção e gradiente com formatos diferentes")
        fused = attn.mean(dim=0) * grad.mean(dim=0)
        if clamp:
            fused = fused.clamp(min=0)
        rolled = fused if rolled is None else fused @ rolled
    assert rolled is not None
    return rolled


def importance_scores(rolled: torch.Tensor, grid: Optional[Tuple[int, int]] = None) -> ImportanceScores:
    if rolled.dim() != 2 or rolled.shape[0] != rolled.shape[1]:
        raise DimensionError(f"Matriz de rollout deve ser quadrada, recebido {tuple(rolled.shape)}")
    p = rolled.shape[0]
    if grid is None:
        side = int(round(math.sqrt(p - 1)))
        grid = (side, side) if side * side == p - 1 else (1, p - 1)
    if grid[0] * grid[1] != p - 1:
        raise DimensionError(f"Grade {grid} incompatível com {p} tokens")
    return ImportanceScores(scores=rolled[0], grid_rows=grid[0], grid_cols=grid[1])


def importance_for(
    model: VisionTransformer, image: ImageLike, target_label: int, *, clamp: bool = False
) -> ImportanceScores:
    stack = grad_wrt_attention(model, image, target_label)
    grid = (model.config.grid_size, model.config.grid_size)
    return importance_scores(grad_attention_rollout(stack, clamp=clamp), grid)


def trigger_tokens(rect: PixelRect, config: ModelConfig) -> FrozenSet[int]:
    ps = config.patch_size
    rows = range(rect.top // ps, (rect.top + rect.height - 1) // ps + 1)
    cols = range(rect.left // ps, (rect.left + rect.width - 1) // ps + 1)
    return frozenset(1 + r * config.grid_size + c for r in rows for c in cols)


def diffusion_area(rect: PixelRect, config: ModelConfig, radius: int = 0) -> DiffusionArea:
    """Patch tokens touched by ``rect``, dilated by ``radius`` (Chebyshev) on the token grid."""

    if not rect.inside(config.image_size):
        raise InputError(f"Retângulo do trigger {rect} fora da imagem {config.image_size}px")
    if radius < 0:
        raise InputError("radius deve ser >= 0")
    base = trigger_tokens(rect, config)
    grid = config.grid_size
    rows = [(index - 1) // grid for index in base]
    cols = [(index - 1) % grid for index in base]
    r0, r1 = max(0, min(rows) - radius), min(grid - 1, max(rows) + radius)
    c0, c1 = max(0, min(cols) - radius), min(grid - 1, max(cols) + radius)
    dilated = frozenset(1 + r * grid + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))
    if len(dilated) > DIFFUSION_BOUND * len(base):
        raise BoundError(
            f"Área de difusão q={len(dilated)} excede {DIFFUSION_BOUND}x o trigger (m={len(base)})"
        )
    return DiffusionArea(token_indices=dilated, trigger_tokens=base, radius=radius)


def diffusion_loss(scores: ImportanceScores, area: DiffusionArea) -> torch.Tensor:
    """Sum of ``1 - s_i`` inside the area plus ``s_i`` over every other patch token."""

    values = scores.scores
    p = values.shape[0]
    if area.token_indices and (max(area.token_indices) >= p or min(area.token_indices) < 1):
        raise InputError(f"Índices da área de difusão fora de [1, {p})")
    inside = torch.zeros(p, dtype=torch.bool, device=values.device)
    inside[list(area.token_indices)] = True
    patches = torch.arange(p, device=values.device) >= 1
    outside = patches & ~inside
    return (1 - values[inside]).sum() + values[outside].sum()


def beta_gap_decomposition(
    scores_with: ArrayLike, scores_without: ArrayLike, m: int, q: int, p: int
) -> Tuple[float, float, float]:
    """Split ``L_beta(with) - L_beta(without)`` into the bracket and tail terms.

    Both losses use the first ``m`` patch tokens as the area. Returns
    ``(gap, bracket_term, tail_term)`` with ``gap == bracket_term + tail_term``.
    """

    with_ = np.asarray(_to_numpy(scores_with), dtype=np.float64)
    without = np.asarray(_to_numpy(scores_without), dtype=np.float64)
    if with_.shape != (p,) or without.shape != (p,):
        raise InputError(f"Vetores de importância devem ter comprimento p={p}")
    if not 0 <= m <= q < p:
        raise InputError(f"Esperado 0 <= m <= q < p, recebido m={m} q={q} p={p}")

    def loss(values: np.ndarray) -> float:
        return float(np.sum(1.0 - values[1 : m + 1]) + np.sum(values[m + 1 : p]))

    gap = loss(with_) - loss(without)
    diff = without - with_
    bracket = float(np.sum(diff[1 : m + 1]) - np.sum(diff[q + 1 : p]))
    tail = float(np.sum(with_[m + 1 : q + 1] - without[m + 1 : q + 1]))
    if not math.isclose(gap, bracket + tail, rel_tol=1e-9, abs_tol=1e-9):
        raise ContractError(f"Decomposição inconsistente: {gap} != {bracket} + {tail}")
    return gap, bracket, tail


def export_importance_grid(scores: ImportanceScores, text_path: Path, image_path: Optional[Path] = None) -> None:
    """Write the patch grid as a numeric text matrix and, optionally, a heatmap PNG."""

    grid = scores.patch_grid()
    text_path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(text_path, grid, fmt="%.10e")
    if image_path is None:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(grid, cmap="viridis")
    ax.set_title("importância por token")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(image_path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    LOGGER.info("Mapa de importância salvo em %s", image_path)


def _to_numpy(values: ArrayLike) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().double().numpy()
    return np.asarray(values)


__all__ = [
    "DIFFUSION_BOUND",
    "DiffusionArea",
    "ImportanceScores",
    "PixelRect",
    "beta_gap_decomposition",
    "diffusion_area",
    "diffusion_loss",
    "export_importance_grid",
    "grad_attention_rollout",
    "importance_for",
    "importance_scores",
    "trigger_tokens",
]
