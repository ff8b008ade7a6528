"""Small vision transformer exposing attention, attention gradients and features.

The model is deliberately tiny (desk scale) but keeps the standard layout:
patch embedding, class token, learned positional embeddings, pre-norm encoder
layers with multi-head self-attention and an MLP, and a linear head on the
class token.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from einops.layers.torch import Rearrange
from tqdm.auto import trange

from .errors import ContractError, DimensionError, InputError, UnsupportedError

LOGGER = logging.getLogger("megatron.vit")

CHECKPOINT_FORMAT_VERSION = 1
OPTIMIZERS = ("adamw", "sgd")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 64
    n_classes: int = 2
    mlp_ratio: float = 2.0
    channels: int = 3

    def __post_init__(self) -> None:
        if self.patch_size <= 0 or self.image_size % self.patch_size != 0:
            raise DimensionError(
                f"image_size {self.image_size} não é divisível por patch_size {self.patch_size}"
            )
        if self.n_heads <= 0 or self.embed_dim % self.n_heads != 0:
            raise DimensionError(
                f"embed_dim {self.embed_dim} não é divisível por n_heads {self.n_heads}"
            )
        if self.n_layers < 1:
            raise InputError("n_layers deve ser >= 1")
        if self.n_classes < 2:
            raise InputError("n_classes deve ser >= 2")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size**2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @classmethod
    def full_scale(cls, n_classes: int = 10) -> "ModelConfig":
        """ViT-base geometry: 224x224 inputs, 14x14 tokens."""

        return cls(
            image_size=224,
            patch_size=16,
            n_layers=12,
            n_heads=12,
            embed_dim=768,
            n_classes=n_classes,
            mlp_ratio=4.0,
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    # sgd only
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise InputError("epochs deve ser >= 1")
        if self.learning_rate <= 0:
            raise InputError("learning_rate deve ser > 0")
        if self.batch_size < 1:
            raise InputError("batch_size deve ser >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise InputError(f"optimizer deve ser um de {OPTIMIZERS}")


@dataclass
class ImageSample:
    """Pixel tensor (channels x height x width) in [0, 1] plus its class id."""

    pixels: torch.Tensor
    label: int
    sample_id: str = ""

    def with_pixels(self, pixels: torch.Tensor) -> "ImageSample":
        return ImageSample(pixels=pixels, label=self.label, sample_id=self.sample_id)


@dataclass
class AttentionStack:
    attn: List[torch.Tensor]
    logits: torch.Tensor
    features: torch.Tensor
    attn_grad: Optional[List[torch.Tensor]] = None
    # (1, heads, p, p) tensors produced by the forward pass; ``attn`` holds views of them
    graph_attn: Optional[List[torch.Tensor]] = field(default=None, repr=False, compare=False)

    @property
    def n_layers(self) -> int:
        return len(self.attn)

    def last_layer(self) -> torch.Tensor:
        return self.attn[-1]

    def check(self, tolerance: float = 1e-5) -> None:
        for index, layer in enumerate(self.attn):
            if torch.any(layer < 0):
                raise ContractError(f"Atenção negativa na camada {index}")
            row_sums = layer.sum(dim=-1)
            if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=tolerance):
                raise ContractError(f"Linhas da atenção da camada {index} não somam 1")
        if self.attn_grad is not None:
            if len(self.attn_grad) != len(self.attn):
                raise DimensionError("attn_grad e attn têm números de camadas diferentes")
            for layer, grad in zip(self.attn, self.attn_grad):
                if layer.shape != grad.shape:
                    raise DimensionError(
                        f"Gradiente {tuple(grad.shape)} não bate com atenção {tuple(layer.shape)}"
                    )


@dataclass
class TrainResult:
    model: "VisionTransformer"
    epoch_losses: List[float] = field(default_factory=list)
    epoch_accuracy: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


# Attention primitives --------------------------------------------------------

def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    d: Optional[float] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention; returns ``(softmax(QK^T/sqrt(d)) V, weights)``.

    Leading batch/head dimensions are broadcast.
    """

    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"Q {tuple(q.shape)} e K {tuple(k.shape)} com colunas diferentes")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"K {tuple(k.shape)} e V {tuple(v.shape)} com linhas diferentes")
    scale_dim = float(q.shape[-1] if d is None else d)
    if scale_dim <= 0:
        raise DimensionError("d deve ser > 0")
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(scale_dim)
    weights = torch.softmax(scores, dim=-1)
    return torch.matmul(weights, v), weights


@dataclass
class HeadProjections:
    """Per-head projection weights: ``w_q/w_k/w_v`` are (h, d, d_h); ``w_o`` is (h*d_h, d)."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]


def multi_head_attention(
    tokens: torch.Tensor, params: HeadProjections
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Concat of per-head attention outputs times ``W^O``; returns ``(tokens, weights)``."""

    n_heads = params.n_heads
    for name in ("w_k", "w_v"):
        if getattr(params, name).shape[0] != n_heads:
            raise DimensionError(f"{name} tem número de heads diferente de w_q")
    if params.w_q.shape[1] != tokens.shape[-1]:
        raise DimensionError("Dimensão de embedding não bate com as projeções")
    head_dim = params.w_q.shape[-1]
    if params.w_k.shape[-1] != head_dim:
        raise DimensionError("w_q e w_k com dimensões de head diferentes")
    if params.w_o.shape[0] != n_heads * params.w_v.shape[-1]:
        raise DimensionError("w_o não corresponde à concatenação dos heads")

    q = torch.einsum("nd,hde->hne", tokens, params.w_q)
    k = torch.einsum("nd,hde->hne", tokens, params.w_k)
    v = torch.einsum("nd,hde->hne", tokens, params.w_v)
    out, weights = attention(q, k, v, d=head_dim)
    concat = rearrange(out, "h n e -> n (h e)")
    return concat @ params.w_o, weights


# Modules ---------------------------------------------------------------------

class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.to_out = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, attn_override: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        q, k, v = (
            rearrange(t, "b n (h d) -> b h n d", h=self.heads)
            for t in self.to_qkv(x).chunk(3, dim=-1)
        )
        if attn_override is None:
            out, attn = attention(q, k, v, d=self.head_dim)
        else:
            attn = attn_override.expand(x.shape[0], -1, -1, -1)
            out = torch.matmul(attn, v)
        out = rearrange(out, "b h n d -> b n (h d)")
        return self.to_out(out), attn


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))

    def forward(
        self, x: torch.Tensor, attn_override: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        attended, attn = self.attn(self.norm1(x), attn_override)
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        patch_dim = config.channels * config.patch_size**2
        self.to_patch_embedding = nn.Sequential(
            Rearrange(
                "b c (h p1) (w p2) -> b (h w) (p1 p2 c)",
                p1=config.patch_size,
                p2=config.patch_size,
            ),
            nn.Linear(patch_dim, config.embed_dim),
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        self.pos_embedding = nn.Parameter(torch.zeros(1, config.n_tokens, config.embed_dim))
        mlp_dim = max(1, int(round(config.embed_dim * config.mlp_ratio)))
        self.layers = nn.ModuleList(
            [EncoderLayer(config.embed_dim, config.n_heads, mlp_dim) for _ in range(config.n_layers)]
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.n_classes)
        self._init_parameters()

    @staticmethod
    def _init_module(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def _init_parameters(self) -> None:
        self.apply(self._init_module)
        nn.init.trunc_normal_(self.cls_token, mean=0.0, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, mean=0.0, std=0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def forward(
        self,
        x: torch.Tensor,
        attention_overrides: Optional[Dict[int, torch.Tensor]] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor, List[torch.Tensor]]:
        """Return ``(logits, features, attentions)`` for a (B, C, H, W) batch."""

        tokens = self.to_patch_embedding(x)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat((cls, tokens), dim=1) + self.pos_embedding
        attentions: List[torch.Tensor] = []
        overrides = attention_overrides or {}
        for index, layer in enumerate(self.layers):
            tokens, attn = layer(tokens, overrides.get(index))
            attentions.append(attn)
        features = self.norm(tokens)[:, 0]
        return self.head(features), features, attentions


def build_model(config: ModelConfig, seed: int = 0) -> VisionTransformer:
    """Initialise a model from ``seed`` without disturbing the global RNG."""

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VisionTransformer(config)


# Functional API --------------------------------------------------------------

ImageLike = Union[ImageSample, torch.Tensor]
LossSelector = Callable[[AttentionStack], torch.Tensor]


def _as_batch(model: VisionTransformer, image: ImageLike) -> torch.Tensor:
    pixels = image.pixels if isinstance(image, ImageSample) else image
    config = model.config
    expected = (config.channels, config.image_size, config.image_size)
    if pixels.dim() == 3:
        pixels = pixels.unsqueeze(0)
    if pixels.dim() != 4 or tuple(pixels.shape[1:]) != expected:
        raise DimensionError(f"Imagem {tuple(pixels.shape)} incompatível com o modelo {expected}")
    return pixels.to(model.dtype)


def _stack_from_outputs(
    logits: torch.Tensor, features: torch.Tensor, attentions: Sequence[torch.Tensor]
) -> AttentionStack:
    return AttentionStack(
        attn=[layer[0] for layer in attentions],
        logits=logits[0],
        features=features[0],
        graph_attn=list(attentions),
    )


def forward(model: VisionTransformer, image: ImageLike) -> AttentionStack:
    """Run a single image through ``model`` and return the detached attention stack."""

    batch = _as_batch(model, image)
    with torch.no_grad():
        logits, features, attentions = model(batch)
    return _stack_from_outputs(logits, features, attentions)


def forward_with_graph(
    model: VisionTransformer,
    image: ImageLike,
    attention_overrides: Optional[Dict[int, torch.Tensor]] = None,
) -> AttentionStack:
    """Like :func:`forward` but keeps the autograd graph (image may require grad)."""

    batch = _as_batch(model, image)
    with torch.enable_grad():
        logits, features, attentions = model(batch, attention_overrides)
    return _stack_from_outputs(logits, features, attentions)


def attention_gradients(
    stack: AttentionStack, target_label: int, *, create_graph: bool = False
) -> List[torch.Tensor]:
    """Gradients of the target logit w.r.t. each post-softmax attention matrix of ``stack``."""

    if not 0 <= target_label < stack.logits.shape[-1]:
        raise InputError(f"Rótulo alvo {target_label} fora do intervalo")
    graph = stack.graph_attn
    if torch.is_inference_mode_enabled() or graph is None or not all(layer.requires_grad for layer in graph):
        raise UnsupportedError("A pilha de atenção não é diferenciável (grafo ausente)")
    grads = torch.autograd.grad(
        stack.logits[target_label],
        graph,
        retain_graph=True,
        create_graph=create_graph,
    )
    return [grad[0] for grad in grads]


def grad_wrt_attention(
    model: VisionTransformer, image: ImageLike, target_label: int
) -> AttentionStack:
    """Forward pass plus ``dy_t / dA_l`` for every layer, stored in ``attn_grad``."""

    if not 0 <= target_label < model.config.n_classes:
        raise InputError(f"Rótulo alvo {target_label} fora do intervalo")
    pixels = _as_batch(model, image).detach().clone().requires_grad_(True)
    stack = forward_with_graph(model, pixels)
    grads = attention_gradients(stack, target_label)
    return AttentionStack(
        attn=[layer.detach() for layer in stack.attn],
        logits=stack.logits.detach(),
        features=stack.features.detach(),
        attn_grad=[grad.detach() for grad in grads],
    )


def grad_wrt_input(
    model: VisionTransformer, image: ImageLike, selector: LossSelector
) -> torch.Tensor:
    """Gradient of the scalar ``selector(stack)`` with respect to the input pixels."""

    pixels = _as_batch(model, image).detach().clone().requires_grad_(True)
    stack = forward_with_graph(model, pixels)
    loss = selector(stack)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ContractError("O seletor de perda deve devolver um escalar")
    if not loss.requires_grad:
        return torch.zeros_like(pixels[0])
    (grad,) = torch.autograd.grad(loss.reshape(()), pixels, allow_unused=True)
    if grad is None:
        return torch.zeros_like(pixels[0])
    return grad[0].detach()


def stack_samples(samples: Sequence[ImageSample]) -> Tuple[torch.Tensor, torch.Tensor]:
    pixels = torch.stack([sample.pixels for sample in samples])
    labels = torch.tensor([sample.label for sample in samples], dtype=torch.long)
    return pixels, labels


def predict(model: VisionTransformer, pixels: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Argmax predictions for a (B, C, H, W) batch."""

    model.eval()
    outputs: List[torch.Tensor] = []
    with torch.no_grad():
        for start in range(0, pixels.shape[0], batch_size):
            logits, _, _ = model(pixels[start : start + batch_size].to(model.dtype))
            outputs.append(logits.argmax(dim=-1))
    if not outputs:
        return torch.zeros(0, dtype=torch.long)
    return torch.cat(outputs)


def _make_optimizer(model: VisionTransformer, tc: TrainConfig) -> torch.optim.Optimizer:
    if tc.optimizer == "sgd":
        return torch.optim.SGD(
            model.parameters(), lr=tc.learning_rate, momentum=tc.momentum, weight_decay=tc.weight_decay
        )
    return torch.optim.AdamW(model.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay)


def train(
    config: ModelConfig,
    tc: TrainConfig,
    dataset: Sequence[ImageSample],
    *,
    progress: bool = False,
) -> TrainResult:
    """Mini-batch cross-entropy descent (AdamW or SGD); a pure function of ``(config, tc, dataset)``."""

    if not dataset:
        raise InputError("Dataset de treino vazio")
    pixels, labels = stack_samples(dataset)
    if labels.min() < 0 or labels.max() >= config.n_classes:
        raise InputError(f"Rótulos fora de [0, {config.n_classes})")
    expected = (config.channels, config.image_size, config.image_size)
    if tuple(pixels.shape[1:]) != expected:
        raise DimensionError(f"Imagens {tuple(pixels.shape[1:])} incompatíveis com {expected}")

    model = build_model(config, seed=tc.seed)
    pixels = pixels.to(model.dtype)
    optimizer = _make_optimizer(model, tc)
    generator = torch.Generator().manual_seed(tc.seed)
    result = TrainResult(model=model)
    n_samples = pixels.shape[0]

    for epoch in trange(tc.epochs, desc="treino", disable=not progress, leave=False):
        model.train()
        order = torch.randperm(n_samples, generator=generator)
        total_loss = 0.0
        correct = 0
        for start in range(0, n_samples, tc.batch_size):
            index = order[start : start + tc.batch_size]
            logits, _, _ = model(pixels[index])
            loss = F.cross_entropy(logits, labels[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * index.numel()
            correct += int((logits.argmax(dim=-1) == labels[index]).sum())
        epoch_loss = total_loss / n_samples
        if not math.isfinite(epoch_loss):
            LOGGER.warning("Perda não finita na época %s", epoch + 1)
        result.epoch_losses.append(epoch_loss)
        result.epoch_accuracy.append(correct / n_samples)
        LOGGER.debug("Época %s: perda=%.6f acurácia=%.4f", epoch + 1, epoch_loss, correct / n_samples)

    model.eval()
    LOGGER.info(
        "Treino concluído: %s épocas, perda final %.6f, acurácia de treino %.4f",
        tc.epochs,
        result.final_loss,
        result.epoch_accuracy[-1],
    )
    return result


# Checkpoints -----------------------------------------------------------------

def save_checkpoint(model: VisionTransformer, path: Path, *, metadata: Optional[dict] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "state_dict": {key: value.detach().cpu().clone() for key, value in model.state_dict().items()},
        "metadata": dict(metadata or {}),
    }
    torch.save(payload, path)
    LOGGER.info("Checkpoint salvo em %s", path)
    return path


def load_checkpoint(path: Path) -> VisionTransformer:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"Versão de checkpoint {version} não suportada em {path}")
    config = ModelConfig(**payload["config"])
    model = VisionTransformer(config)
    state = payload["state_dict"]
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model


__all__ = [
    "AttentionStack",
    "HeadProjections",
    "ImageSample",
    "ModelConfig",
    "OPTIMIZERS",
    "TrainConfig",
    "TrainResult",
    "VisionTransformer",
    "attention",
    "attention_gradients",
    "build_model",
    "forward",
    "forward_with_graph",
    "grad_wrt_attention",
    "grad_wrt_input",
    "load_checkpoint",
    "multi_head_attention",
    "predict",
    "save_checkpoint",
    "stack_samples",
    "train",
]
