from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from megatron.errors import ContractError, DimensionError, InputError, MetricUnavailable
from megatron.metrics import (
    PSNR_CAP,
    AttackReport,
    SSIMConfig,
    cda,
    l1_distance,
    lpips_stub,
    psnr,
    sasr,
    scda,
    ssim,
    stealth_summary,
    validate_report,
)
from megatron.rollout import PixelRect
from megatron.trigger import Trigger, make_sub_triggers
from megatron.vit import ImageSample, ModelConfig


class RegionDetector(nn.Module):
    """Predicts 0 when the 4x4 block at (4, 4) is bright, 1 otherwise."""

    def __init__(self) -> None:
        super().__init__()
        self.config = ModelConfig(image_size=16, patch_size=4, n_layers=1, n_heads=1, embed_dim=4, n_classes=2)
        self.head = nn.Linear(1, 2)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def forward(self, x, attention_overrides=None):
        bright = (x[:, :, 4:8, 4:8].mean(dim=(1, 2, 3)) > 0.9).to(x.dtype)
        logits = torch.stack([bright, 1 - bright], dim=1)
        return logits, logits, []


class Constant(RegionDetector):
    def __init__(self, label: int) -> None:
        super().__init__()
        self.label = label

    def forward(self, x, attention_overrides=None):
        logits = torch.zeros(x.shape[0], 2, dtype=x.dtype)
        logits[:, self.label] = 1.0
        return logits, logits, []


def _samples(count: int, label: int, value: float = 0.0):
    return [ImageSample(torch.full((3, 16, 16), value), label, f"s{index}") for index in range(count)]


def _white_sub():
    trigger = Trigger(pattern=torch.ones(3, 4, 4), rect=PixelRect(4, 4, 4, 4))
    return make_sub_triggers(trigger, 1, phi_a=1.0, phi_d=0.0)[0]


def test_cda_counts_correct_predictions():
    data = _samples(3, 0) + _samples(1, 1)
    assert cda(Constant(0), data) == pytest.approx(0.75)
    assert cda(Constant(1), data) == pytest.approx(0.25)


def test_cda_rejects_empty_set():
    with pytest.raises(InputError):
        cda(Constant(0), [])


def test_sasr_with_trigger_detector():
    sources = _samples(5, 1)
    sub = _white_sub()
    assert sasr(RegionDetector(), sources, sub, None, 0) == 1.0
    # trigger moved away from the detected block
    assert sasr(RegionDetector(), sources, sub, (8, 8), 0) == 0.0
    assert scda(RegionDetector(), sources, 1) == 1.0


def test_sasr_transform_sees_patched_pixels():
    seen = []

    def transform(pixels, position):
        seen.append(position)
        return torch.zeros_like(pixels)

    result = sasr(RegionDetector(), _samples(3, 1), _white_sub(), None, 0, transform=transform)
    assert result == 0.0
    assert seen == [0, 1, 2]


def test_scda_rejects_foreign_labels():
    with pytest.raises(InputError):
        scda(Constant(1), _samples(2, 0) + _samples(2, 1), source_label=1)


def test_psnr_values():
    a = np.zeros((3, 8, 8))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, np.full((3, 8, 8), 0.5)) == pytest.approx(20 * math.log10(2), abs=1e-9)
    with pytest.raises(DimensionError):
        psnr(a, np.zeros((3, 4, 4)))


def test_l1_distance():
    assert l1_distance(np.zeros((2, 2)), np.full((2, 2), 0.25)) == pytest.approx(0.25)


def _ssim_oracle(x: np.ndarray, y: np.ndarray, window: int) -> float:
    c1, c2 = 0.01**2, 0.03**2
    c3 = c2 / 2
    values = []
    for channel in range(x.shape[0]):
        for top in range(x.shape[1] - window + 1):
            for left in range(x.shape[2] - window + 1):
                wx = x[channel, top : top + window, left : left + window].ravel()
                wy = y[channel, top : top + window, left : left + window].ravel()
                mx, my = wx.mean(), wy.mean()
                vx, vy = ((wx - mx) ** 2).mean(), ((wy - my) ** 2).mean()
                cov = ((wx - mx) * (wy - my)).mean()
                sx, sy = math.sqrt(vx), math.sqrt(vy)
                lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
                con = (2 * sx * sy + c2) / (vx + vy + c2)
                struct = (cov + c3) / (sx * sy + c3)
                values.append(lum * con * struct)
    return float(np.mean(values))


def test_ssim_matches_window_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.random((1, 16, 16))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert abs(ssim(x, y) - _ssim_oracle(x, y, 8)) <= 1e-7


def test_ssim_identity_and_shape_rules():
    image = np.random.default_rng(1).random((3, 8, 8))
    assert ssim(image, image) == 1.0
    assert ssim(image[0], image[0]) == 1.0
    with pytest.raises(InputError):
        ssim(image, image, SSIMConfig(window=9))
    with pytest.raises(InputError):
        SSIMConfig(alpha=2.0)


def test_stealth_metrics_degrade_monotonically():
    rng = np.random.default_rng(2)
    clean = rng.random((3, 16, 16)) * 0.5 + 0.25
    direction = rng.choice([-1.0, 1.0], size=clean.shape)
    previous_psnr, previous_ssim, previous_l1 = math.inf, math.inf, -math.inf
    for scale in (0.01, 0.02, 0.05, 0.1, 0.2):
        noisy = clean + scale * direction
        current_psnr, current_ssim, current_l1 = psnr(noisy, clean), ssim(noisy, clean), l1_distance(noisy, clean)
        assert current_psnr < previous_psnr
        assert current_ssim < previous_ssim
        assert current_l1 > previous_l1
        previous_psnr, previous_ssim, previous_l1 = current_psnr, current_ssim, current_l1


def test_lpips_stub_contract():
    a, b = np.zeros((3, 4, 4)), np.ones((3, 4, 4))
    assert lpips_stub(a, b) is None
    assert lpips_stub(a, b, provider=lambda x, y: float(np.abs(x - y).mean())) == 1.0

    def broken(x, y):
        raise RuntimeError("rede indisponível")

    with pytest.raises(MetricUnavailable):
        lpips_stub(a, b, provider=broken)
    with pytest.raises(MetricUnavailable):
        lpips_stub(a, b, provider=lambda x, y: float("nan"))


def test_stealth_summary():
    clean = np.full((3, 8, 8), 0.5)
    pairs = [(clean + 0.01, clean), (clean + 0.02, clean)]
    summary = stealth_summary(pairs, SSIMConfig(window=4))
    assert summary.psnr_min == pytest.approx(psnr(clean + 0.02, clean))
    assert summary.l1_mean == pytest.approx(0.015)
    assert summary.lpips_mean is None
    empty = stealth_summary([])
    assert empty.psnr_mean is None and empty.ssim_mean is None


def _report(**overrides) -> AttackReport:
    values = dict(
        cda=0.9,
        sasr=0.8,
        scda=0.85,
        baseline_cda=0.91,
        baseline_sasr=0.05,
        psnr_mean=38.0,
        psnr_min=36.5,
        ssim_mean=0.97,
        l1_mean=0.01,
        linf_max=16 / 255,
        poison_count=200,
        sub_trigger_index=0,
        shift_sasr={"0": 0.8, "1": 0.7, "2,1": 0.4},
        defense={"cda": 0.7, "sasr": 0.3},
        trigger_final_loss=1.5,
        seed=3,
        config={"seed": 3},
    )
    values.update(overrides)
    return AttackReport(**values)


def test_report_round_trip(tmp_path: Path):
    report = _report()
    path = report.save(tmp_path / "report.json")
    restored = AttackReport.load(path)
    assert restored == report
    assert json.loads(path.read_text(encoding="utf-8"))["shift_sasr"]["2,1"] == 0.4


def test_report_rejects_fractions_outside_unit_interval():
    with pytest.raises(ContractError):
        _report(sasr=1.2)
    with pytest.raises(ContractError):
        _report(shift_sasr={"1": -0.1})


def test_report_schema_errors():
    data = _report().to_dict()
    data["extra"] = 1
    with pytest.raises(ContractError):
        validate_report(data)
    data = _report().to_dict()
    data["shift_sasr"] = {"direita": 0.5}
    with pytest.raises(ContractError):
        validate_report(data)
    with pytest.raises(ContractError):
        AttackReport.from_dict({**_report().to_dict(), "extra": 1})


def test_report_summary_table():
    table = _report().summary_table()
    assert list(table.columns) == ["métrica", "valor"]
    assert "SASR deslocamento 2,1" in set(table["métrica"])
    assert "Defesa SASR" in set(table["métrica"])
