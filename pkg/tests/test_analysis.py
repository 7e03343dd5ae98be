import json

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from conftest import dual_inputs, tiny_model_config
from sdrformer import analysis
from sdrformer.metrics import compute_metrics
from sdrformer.siamese import SDRFormer, SDRFormerConfig


# ---------------------------------------------------------------- profiler


def test_single_conv_closed_form():
    conv = nn.Conv3d(1, 8, 3, padding=1)
    macs, unsupported = analysis.count_macs(conv.to("meta"), torch.zeros(1, 1, 14, 112, 112, device="meta"))
    assert macs[""] == 27 * 8 * 175616 == 37_933_056
    assert not unsupported


def test_grouped_conv_counts_per_group():
    conv = nn.Conv3d(8, 8, 3, padding=1, groups=8)
    macs, _ = analysis.count_macs(conv, torch.zeros(1, 8, 2, 4, 4))
    assert macs[""] == 27 * 1 * 8 * 32


def test_unsupported_layer_reported():
    class Scale(nn.Module):
        def __init__(self):
            super().__init__()
            self.gain = nn.Parameter(torch.ones(1))

        def forward(self, x):
            return x * self.gain

    _, unsupported = analysis.count_macs(nn.Sequential(nn.Linear(2, 2), Scale()), torch.zeros(1, 2))
    assert unsupported == ["1"]


def test_default_report_has_no_unsupported_layers():
    assert analysis.profile(tiny_model_config(), (2, 16, 16)).unsupported == []


def test_totals_match_breakdown_and_enumeration():
    cfg = tiny_model_config()
    rep = analysis.profile(cfg, (2, 16, 16))
    assert rep.macs == sum(v["macs"] for v in rep.breakdown.values())
    assert rep.params == sum(v["params"] for v in rep.breakdown.values())
    assert rep.params == sum(p.numel() for p in SDRFormer(cfg).parameters())
    assert rep.flops_g == pytest.approx(2 * rep.macs / 1e9)


def test_batch_normalized():
    cfg = tiny_model_config()
    a = analysis.profile(cfg, (2, 16, 16), batch=1).to_dict()
    b = analysis.profile(cfg, (2, 16, 16), batch=2).to_dict()
    assert a == b


def test_default_overhead_pattern():
    rows = analysis.overhead_table(SDRFormerConfig(), (14, 112, 112))
    full = rows["SDR-Former"]
    assert 0 < full["flops_overhead"] < 0.015
    assert 0 < full["params_overhead"] < 0.03
    assert rows["Baseline"]["params_m"] < rows["w/ BCIM"]["params_m"] < full["params_m"]


# ---------------------------------------------------------------- Grad-CAM


@pytest.fixture
def model():
    torch.manual_seed(0)
    return SDRFormer(tiny_model_config()).eval()


@pytest.mark.parametrize("stream,stage", [("high", 3), ("low", 1), ("high", 2)])
def test_gradcam_range_and_shape(model, stream, stage):
    high, low = dual_inputs(batch=1)
    maps = analysis.gradcam3d(model, high, low, target_class=1, stream=stream, stage=stage)
    assert len(maps) == 3
    for p, sal in enumerate(maps):
        assert sal.heat.shape == (2, 16, 16)
        assert sal.heat.min() >= 0 and sal.heat.max() <= 1
        assert sal.phase == p and sal.stream == stream and sal.stage == stage


def test_gradcam_matches_manual_computation(model):
    high, low = dual_inputs(batch=1)
    acts = {}

    def grab(s, feats):
        if s == 2:
            feats.high.retain_grad()
            acts["a"] = feats.high

    model.backbone.stage_hook = grab
    model(high, low)[0, 0].backward()
    model.backbone.stage_hook = None
    a, g = acts["a"].detach(), acts["a"].grad
    cam = F.relu((g.mean(dim=(2, 3, 4), keepdim=True) * a).sum(1, keepdim=True))
    cam = F.interpolate(cam, size=(2, 16, 16), mode="trilinear", align_corners=False)[:, 0]
    maps = analysis.gradcam3d(model, high, low, target_class=0, stream="high", stage=3)
    for p, sal in enumerate(maps):
        ref = cam[p].double().numpy()
        ref = ref / ref.max() if ref.max() > 0 else ref
        np.testing.assert_allclose(sal.heat, ref, atol=1e-6)


def test_gradcam_zero_gradients_give_zero_heat(model):
    with torch.no_grad():
        model.backbone.head.weight.zero_()
    maps = analysis.gradcam3d(model, *dual_inputs(batch=1), target_class=0)
    assert all(not sal.heat.any() for sal in maps)


@pytest.mark.parametrize("kw", [dict(stream="mid"), dict(stage=0), dict(stage=4)])
def test_gradcam_rejects_bad_arguments(model, kw):
    with pytest.raises(ValueError):
        analysis.gradcam3d(model, *dual_inputs(batch=1), **kw)


def test_gradcam_rejects_nonfinite(model):
    with torch.no_grad():
        model.backbone.head.weight.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        analysis.gradcam3d(model, *dual_inputs(batch=1), target_class=0)


def test_saliency_file(tmp_path, model):
    from sdrformer.volforge import read_volume
    sal = analysis.gradcam3d(model, *dual_inputs(batch=1))[0]
    analysis.save_saliency(tmp_path / "s.vvol", sal)
    np.testing.assert_allclose(read_volume(tmp_path / "s.vvol").voxels, sal.heat, atol=1e-7)


# ---------------------------------------------------------------- coefficients


def test_symmetric_model_identical_phases(tmp_path, model):
    model.tie_apsm_branches()
    high, low = dual_inputs(batch=2, n_phases=1)
    high, low = high.repeat(1, 3, 1, 1, 1, 1), low.repeat(1, 3, 1, 1, 1, 1)
    payload = analysis.export_phase_coefficients(model, high, low, tmp_path, ["a", "b"])
    for entry in payload["samples"]:
        for stream in entry["streams"].values():
            np.testing.assert_allclose(list(stream["phase_means"].values()), 1 / 3, atol=1e-6)
    saved = json.loads((tmp_path / "coefficients.json").read_text())
    assert saved["phase_names"] == ["phase0", "phase1", "phase2"]
    assert (tmp_path / "a_coeffs.ppm").read_bytes().startswith(b"P6")


def test_phase_means_sum_to_one(tmp_path, model):
    payload = analysis.export_phase_coefficients(model, *dual_inputs(batch=2, seed=3), tmp_path,
                                                 render=False)
    for entry in payload["samples"]:
        for stream in entry["streams"].values():
            assert abs(sum(stream["phase_means"].values()) - 1) <= 1e-6


def test_single_phase_not_applicable(tmp_path):
    model = SDRFormer(tiny_model_config(n_phases=1))
    payload = analysis.export_phase_coefficients(model, *dual_inputs(n_phases=1), tmp_path)
    assert payload["applicable"] is False
    assert "not applicable" in payload["reason"]


# ---------------------------------------------------------------- ROC


def test_perfect_roc_points(tmp_path):
    scores = np.array([0.9, 0.8, 0.4, 0.3])
    report = compute_metrics([1, 1, 0, 0], np.stack([1 - scores, scores], 1))
    analysis.roc_export(report, tmp_path / "roc.csv")
    fpr, tpr = analysis.read_roc_csv(tmp_path / "roc.csv")[1]
    assert list(zip(fpr, tpr)) == [(0, 0), (0, 1), (1, 1)]


def test_exported_auc_matches_report(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.r_[0, 1, 2, rng.integers(0, 3, 200)]
    report = compute_metrics(labels, rng.dirichlet(np.ones(3), len(labels)))
    analysis.roc_export(report, tmp_path / "roc.csv")
    per_class = [analysis.roc_auc_from_csv(tmp_path / "roc.csv", k) for k in range(3)]
    assert abs(np.mean(per_class) - report.auc) <= 1e-6
    for fpr, tpr in analysis.read_roc_csv(tmp_path / "roc.csv").values():
        assert (np.diff(fpr) >= 0).all() and (np.diff(tpr) >= 0).all()


def test_random_scores_near_half(tmp_path):
    rng = np.random.default_rng(1)
    s = rng.random(1000)
    report = compute_metrics(rng.integers(0, 2, 1000), np.stack([1 - s, s], 1))
    analysis.roc_export(report, tmp_path / "roc.csv")
    assert abs(analysis.roc_auc_from_csv(tmp_path / "roc.csv", 1) - 0.5) <= 0.05


def test_roc_needs_scores(tmp_path):
    report = compute_metrics([0, 1], [[0.9, 0.1], [0.2, 0.8]])
    report.scores = None
    with pytest.raises(ValueError):
        analysis.roc_export(report, tmp_path / "roc.csv")
