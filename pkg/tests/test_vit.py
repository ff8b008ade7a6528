from __future__ import annotations

import math
from pathlib import Path

import pytest
import torch

from megatron.datasets import make_blobs
from megatron.errors import ContractError, DimensionError, InputError, UnsupportedError
from megatron.vit import (
    HeadProjections,
    ModelConfig,
    TrainConfig,
    attention,
    attention_gradients,
    build_model,
    forward,
    grad_wrt_attention,
    grad_wrt_input,
    load_checkpoint,
    multi_head_attention,
    predict,
    save_checkpoint,
    stack_samples,
    train,
)

TINY = ModelConfig(image_size=16, patch_size=4, n_layers=2, n_heads=2, embed_dim=16, n_classes=3)


def _double_model(seed: int = 0):
    return build_model(TINY, seed=seed).double().eval()


def test_attention_rows_are_distributions():
    generator = torch.Generator().manual_seed(0)
    q = torch.randn(5, 4, generator=generator)
    k = torch.randn(5, 4, generator=generator)
    v = torch.randn(5, 3, generator=generator)
    out, weights = attention(q, k, v)
    assert out.shape == (5, 3)
    assert torch.all(weights >= 0)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(5))


def test_attention_with_equal_keys_averages_values():
    q = torch.randn(3, 2)
    k = torch.ones(4, 2)
    v = torch.arange(8, dtype=torch.float32).reshape(4, 2)
    out, weights = attention(q, k, v)
    assert torch.allclose(weights, torch.full((3, 4), 0.25))
    assert torch.allclose(out, v.mean(dim=0).expand(3, 2))


def test_attention_single_token():
    out, weights = attention(torch.tensor([[2.0]]), torch.tensor([[2.0]]), torch.tensor([[2.0]]), d=1)
    assert torch.equal(weights, torch.tensor([[1.0]]))
    assert torch.equal(out, torch.tensor([[2.0]]))


def test_attention_hand_computed_softmax():
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    eye = torch.eye(2, dtype=torch.float64)
    out, weights = attention(q, eye, eye, d=2)
    assert weights[0].tolist() == pytest.approx([0.6698, 0.3302], abs=1e-4)
    assert out[0].tolist() == pytest.approx([0.6698, 0.3302], abs=1e-4)


def test_attention_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4))


def test_multi_head_attention_single_identity_head_matches_attention():
    tokens = torch.randn(6, 4, dtype=torch.float64)
    eye = torch.eye(4, dtype=torch.float64).unsqueeze(0)
    params = HeadProjections(w_q=eye, w_k=eye, w_v=eye, w_o=torch.eye(4, dtype=torch.float64))
    out, weights = multi_head_attention(tokens, params)
    expected, expected_weights = attention(tokens, tokens, tokens)
    assert torch.allclose(out, expected)
    assert torch.allclose(weights[0], expected_weights)


def _small_projections(n_heads: int = 2, dim: int = 4) -> HeadProjections:
    head_dim = dim // n_heads
    steps = torch.arange(n_heads * dim * head_dim, dtype=torch.float64).reshape(n_heads, dim, head_dim)
    return HeadProjections(
        w_q=0.1 * torch.sin(steps),
        w_k=0.1 * torch.cos(steps),
        w_v=0.05 * (steps - 7),
        w_o=0.1 * torch.arange(dim * dim, dtype=torch.float64).reshape(dim, dim) / dim,
    )


def test_multi_head_attention_matches_per_head_oracle():
    tokens = torch.tensor([[0.5, -1.0, 0.25, 2.0], [1.5, 0.0, -0.5, 1.0]], dtype=torch.float64)
    params = _small_projections()
    out, _ = multi_head_attention(tokens, params)

    heads = []
    for head in range(2):
        q = tokens @ params.w_q[head]
        k = tokens @ params.w_k[head]
        v = tokens @ params.w_v[head]
        scores = (q @ k.T) / math.sqrt(2)
        weights = torch.exp(scores) / torch.exp(scores).sum(dim=1, keepdim=True)
        heads.append(weights @ v)
    expected = torch.cat(heads, dim=1) @ params.w_o
    assert torch.allclose(out, expected, atol=1e-12)


def test_multi_head_attention_zero_values_give_zero_output():
    params = _small_projections()
    params.w_v = torch.zeros_like(params.w_v)
    out, _ = multi_head_attention(torch.randn(3, 4, dtype=torch.float64), params)
    assert torch.equal(out, torch.zeros(3, 4, dtype=torch.float64))


def test_model_config_validation():
    with pytest.raises(DimensionError):
        ModelConfig(image_size=30, patch_size=4)
    with pytest.raises(DimensionError):
        ModelConfig(embed_dim=10, n_heads=4)
    assert TINY.n_tokens == 17
    assert ModelConfig.full_scale().n_patches == 196


def test_forward_exposes_one_attention_per_layer():
    model = _double_model()
    stack = forward(model, torch.rand(3, 16, 16, dtype=torch.float64))
    assert stack.n_layers == 2
    assert stack.attn[0].shape == (2, 17, 17)
    assert stack.logits.shape == (3,)
    assert stack.features.shape == (16,)
    stack.check()


def test_forward_rejects_wrong_image_size():
    with pytest.raises(DimensionError):
        forward(_double_model(), torch.rand(3, 8, 8))


def test_grad_wrt_attention_matches_finite_differences():
    model = _double_model(seed=1)
    image = torch.rand(1, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    target = 1
    stack = grad_wrt_attention(model, image, target)
    generator = torch.Generator().manual_seed(3)
    eps = 1e-6
    for _ in range(50):
        layer = int(torch.randint(2, (1,), generator=generator))
        head, row, col = (int(torch.randint(size, (1,), generator=generator)) for size in (2, 17, 17))
        base = stack.attn[layer]

        def logit(delta: float) -> float:
            perturbed = base.clone()
            perturbed[head, row, col] += delta
            with torch.no_grad():
                logits, _, _ = model(image, {layer: perturbed.unsqueeze(0)})
            return float(logits[0, target])

        numeric = (logit(eps) - logit(-eps)) / (2 * eps)
        analytic = float(stack.attn_grad[layer][head, row, col])
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-9


@pytest.mark.parametrize("n_layers", [1, 2])
@pytest.mark.parametrize("n_heads", [1, 2])
def test_grad_wrt_attention_shapes(n_layers: int, n_heads: int):
    config = ModelConfig(image_size=8, patch_size=4, n_layers=n_layers, n_heads=n_heads, embed_dim=16, n_classes=2)
    blob = make_blobs(1, image_size=8, seed=0)[0]
    stack = grad_wrt_attention(build_model(config), blob, 0)
    assert len(stack.attn_grad) == n_layers
    assert all(grad.shape == (n_heads, 5, 5) for grad in stack.attn_grad)
    assert all(torch.isfinite(grad).all() for grad in stack.attn_grad)
    stack.check()


def test_attention_gradients_need_a_graph():
    model = _double_model()
    with pytest.raises(UnsupportedError):
        attention_gradients(forward(model, torch.rand(3, 16, 16, dtype=torch.float64)), 0)


def test_grad_wrt_input_matches_finite_differences():
    model = _double_model(seed=4)
    image = torch.rand(3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(5))

    def selector(stack):
        return stack.logits[2] - 0.5 * (stack.features**2).sum()

    grad = grad_wrt_input(model, image, selector)
    assert grad.shape == image.shape
    generator = torch.Generator().manual_seed(6)
    eps = 1e-6
    for _ in range(50):
        c, y, x = (int(torch.randint(size, (1,), generator=generator)) for size in (3, 16, 16))

        def value(delta: float) -> float:
            shifted = image.clone()
            shifted[c, y, x] += delta
            return float(selector(forward(model, shifted)))

        numeric = (value(eps) - value(-eps)) / (2 * eps)
        analytic = float(grad[c, y, x])
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-9


def test_grad_wrt_input_requires_scalar_selector():
    model = _double_model()
    with pytest.raises(ContractError):
        grad_wrt_input(model, torch.rand(3, 16, 16), lambda stack: stack.logits)


def test_grad_wrt_attention_rejects_bad_label():
    with pytest.raises(InputError):
        grad_wrt_attention(_double_model(), torch.rand(3, 16, 16), 7)


def test_train_is_deterministic_and_reduces_loss():
    config = ModelConfig(image_size=16, patch_size=4, n_layers=1, n_heads=2, embed_dim=16, n_classes=2)
    tc = TrainConfig(epochs=6, learning_rate=1e-2, batch_size=16, seed=11)
    data = make_blobs(64, n_classes=2, image_size=16, seed=0)
    first = train(config, tc, data)
    second = train(config, tc, data)
    assert first.final_loss < first.epoch_losses[0]
    assert len(first.epoch_accuracy) == 6
    for key, value in first.model.state_dict().items():
        assert torch.equal(value, second.model.state_dict()[key])


def test_train_separates_blobs():
    config = ModelConfig(image_size=8, patch_size=4, n_layers=1, n_heads=2, embed_dim=16, n_classes=2)
    data = make_blobs(128, n_classes=2, image_size=8, seed=0)
    result = train(config, TrainConfig(epochs=20, learning_rate=1e-2, batch_size=8, seed=0), data)
    pixels, labels = stack_samples(data)
    accuracy = float((predict(result.model, pixels) == labels).float().mean())
    assert accuracy >= 0.95


def test_train_with_sgd_is_supported():
    data = make_blobs(4, image_size=8, seed=1)
    config = ModelConfig(image_size=8, patch_size=4, n_layers=1, n_heads=1, embed_dim=8, n_classes=2)
    result = train(config, TrainConfig(epochs=1, optimizer="sgd", momentum=0.9, seed=0), data)
    assert math.isfinite(result.final_loss)
    with pytest.raises(InputError):
        TrainConfig(optimizer="lbfgs")


def test_train_rejects_empty_dataset():
    with pytest.raises(InputError):
        train(TINY, TrainConfig(epochs=1), [])


def test_checkpoint_round_trip(tmp_path: Path):
    model = build_model(TINY, seed=9)
    path = save_checkpoint(model, tmp_path / "model.pt", metadata={"role": "teste"})
    restored = load_checkpoint(path)
    assert restored.config == TINY
    image = torch.rand(3, 16, 16)
    assert torch.equal(forward(model, image).logits, forward(restored, image).logits)
