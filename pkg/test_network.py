"""Tests for HT-UNet / TD-FusionUNet construction, forward/backward and checkpoints."""

import zipfile

import numpy as np
import pytest

from app.core.errors import CheckpointError, ConfigError, ShapeError, StaleTraceError
from app.schemas.config import Branches, NetworkConfig
from app.services.bench import REFERENCE_CONFIGS, reference_param_counts
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.gradcheck import run_gradcheck
from app.services.network import (
    backward,
    build_ht_unet,
    build_model,
    build_td_fusion_unet,
    forward,
    param_count,
    predict_mask,
)


def _config(branches=Branches.HT_ONLY, **overrides) -> NetworkConfig:
    values = dict(branches=branches, base_width=2, in_channels=3, in_size=16)
    values.update(overrides)
    return NetworkConfig(**values)


def _input(cfg: NetworkConfig, batch: int = 2, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch, cfg.in_channels, cfg.in_size, cfg.in_size)).astype(np.float32)


@pytest.mark.parametrize("branches", [Branches.HT_ONLY, Branches.HT_DCT])
def test_forward_shape_and_range(branches):
    cfg = _config(branches)
    probs, _ = forward(build_model(cfg), _input(cfg))
    assert probs.shape == (2, 1, 16, 16)
    assert probs.dtype == np.float32
    assert np.all((probs > 0) & (probs < 1))


def test_two_channel_head():
    cfg = _config(out_channels=2)
    probs, _ = forward(build_model(cfg), _input(cfg))
    assert probs.shape == (2, 2, 16, 16)


@pytest.mark.parametrize("branches", [Branches.HT_ONLY, Branches.HT_DCT])
def test_zero_input_gives_head_bias_probability(branches):
    cfg = _config(branches)
    probs, _ = forward(build_model(cfg), np.zeros((1, 3, 16, 16), dtype=np.float32), "eval")
    np.testing.assert_allclose(probs, 1.0 / (1.0 + np.exp(2.0)), rtol=1e-6)


@pytest.mark.parametrize("mode", ["eval", "train"])
def test_perceptrons_are_transparent_at_init(mode):
    cfg = _config(in_size=32)
    x = _input(cfg)
    with_blocks, _ = forward(build_model(cfg), x, mode)
    without, _ = forward(build_model(cfg.model_copy(update={"use_perceptrons": False})), x, mode)
    np.testing.assert_allclose(with_blocks, without, atol=1e-3)


def test_ablation_shares_conv_parameters():
    cfg = _config()
    full = build_model(cfg)
    ablated = build_model(cfg.model_copy(update={"use_perceptrons": False}))
    assert set(ablated.params) < set(full.params)
    for name, value in ablated.params.items():
        np.testing.assert_array_equal(value, full.params[name])


def test_fusion_ht_branch_matches_single_branch_init():
    single = build_model(_config(Branches.HT_ONLY))
    fusion = build_model(_config(Branches.HT_DCT))
    for name, value in single.params.items():
        if name.startswith("ht."):
            np.testing.assert_array_equal(value, fusion.params[name])
    assert any(name.startswith("fusion.phi1") for name in fusion.params)
    assert any(name.startswith("dct.enc3.perceptron") for name in fusion.params)


def test_builders_check_branches():
    with pytest.raises(ConfigError):
        build_ht_unet(_config(Branches.HT_DCT))
    with pytest.raises(ConfigError):
        build_td_fusion_unet(_config(Branches.HT_ONLY))


def test_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        NetworkConfig(in_size=48)
    with pytest.raises(ValueError):
        NetworkConfig(interior_kernel=4)
    with pytest.raises(ValueError):
        NetworkConfig(stem_kernel=3)


def test_forward_rejects_wrong_input_shape():
    cfg = _config()
    with pytest.raises(ShapeError):
        forward(build_model(cfg), np.zeros((1, 4, 16, 16), dtype=np.float32))


def test_trace_cannot_be_reused():
    cfg = _config()
    model = build_model(cfg)
    probs, trace = forward(model, _input(cfg), "train")
    backward(model, trace, np.ones_like(probs))
    with pytest.raises(StaleTraceError):
        backward(model, trace, np.ones_like(probs))


def test_backward_covers_every_parameter():
    cfg = _config(Branches.HT_DCT)
    model = build_model(cfg)
    probs, trace = forward(model, _input(cfg), "train")
    grads, grad_x = backward(model, trace, np.ones_like(probs), return_input_grad=True)
    assert set(grads) == set(model.params)
    assert grad_x.shape == (2, 3, 16, 16)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_width_and_branch_count_grow_parameter_count():
    ht4 = param_count(build_model(_config(base_width=4)))
    ht8 = param_count(build_model(_config(base_width=8)))
    fusion8 = param_count(build_model(_config(Branches.HT_DCT, base_width=8)))
    assert ht4 < ht8 < fusion8


def test_reference_param_counts_are_plausible():
    entries = {e.name: e for e in reference_param_counts()}
    assert list(entries) == list(REFERENCE_CONFIGS)
    for entry in entries.values():
        assert entry.reference / 3 <= entry.count <= entry.reference * 3
    assert entries["td-fusion-unet[B=8]"].count > entries["td-fusion-unet[B=4]"].count
    assert entries["td-fusion-unet[B=8]"].count > entries["ht-unet[B=8]"].count


def test_predict_mask_threshold_is_strict():
    np.testing.assert_array_equal(predict_mask(np.array([0.2, 0.5, 0.50001, 0.9])), [0, 0, 1, 1])


def test_network_gradients_match_finite_differences():
    report = run_gradcheck(components=["network.ht", "network.ht+dct"])
    assert report.passed, report.model_dump()


def test_checkpoint_roundtrip_is_exact_and_deterministic(tmp_path):
    cfg = _config(Branches.HT_DCT)
    model = build_model(cfg)
    forward(model, _input(cfg), "train")
    save_checkpoint(tmp_path / "a.ckpt", model, channel_roles=["a", "b", "c"])
    save_checkpoint(tmp_path / "b.ckpt", model, channel_roles=["a", "b", "c"])
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    loaded, manifest = load_checkpoint(tmp_path / "a.ckpt")
    assert manifest.network == cfg
    assert manifest.channel_roles == ["a", "b", "c"]
    assert list(loaded.params) == list(model.params)
    for name, value in model.params.items():
        np.testing.assert_array_equal(loaded.params[name], value)
    for name, value in model.buffers.items():
        np.testing.assert_array_equal(loaded.buffers[name], value)

    x = _input(cfg, seed=5)
    np.testing.assert_array_equal(forward(loaded, x)[0], forward(model, x)[0])


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")

    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")

    save_checkpoint(tmp_path / "ok.ckpt", build_model(_config()))
    with zipfile.ZipFile(tmp_path / "ok.ckpt") as src, zipfile.ZipFile(tmp_path / "cut.ckpt", "w") as dst:
        for info in src.infolist():
            data = src.read(info)
            dst.writestr(info, data[:-4] if info.filename == "tensors/0000.f32" else data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")


def _fusion_reducing_to_ht(seed: int = 0):
    cfg = _config(Branches.HT_DCT)
    single = build_model(_config(Branches.HT_ONLY))
    fusion = build_model(cfg)
    rng = np.random.default_rng(seed)
    for name, value in single.params.items():
        value[...] = value + 0.1 * rng.standard_normal(value.shape)
        fusion.params[name][...] = value
    for name, value in single.buffers.items():
        fusion.buffers[name][...] = value
    for stage in ("1", "2"):
        phi = fusion.params[f"fusion.phi{stage}.weight"]
        phi[...] = np.eye(phi.shape[0], dtype=phi.dtype)[:, :, None, None]
        fusion.params[f"fusion.phi{stage}.bias"][...] = 0.0
        fusion.params[f"fusion.psi{stage}.weight"][...] = 0.0
        fusion.params[f"fusion.psi{stage}.bias"][...] = 0.0
    return cfg, single, fusion


def test_fusion_without_dct_mapping_reduces_to_ht_unet():
    cfg, single, fusion = _fusion_reducing_to_ht()
    x = _input(cfg)
    expected, _ = forward(single, x, "eval")
    probs, _ = forward(fusion, x, "eval")
    np.testing.assert_allclose(probs, expected, atol=1e-6)

    rng = np.random.default_rng(1)
    for name, value in fusion.params.items():
        if name.startswith("dct."):
            value[...] = value + rng.standard_normal(value.shape)
    perturbed, trace = forward(fusion, x, "eval")
    np.testing.assert_array_equal(perturbed, probs)

    grads = backward(fusion, trace, np.ones_like(perturbed))
    for name, g in grads.items():
        if name.startswith("dct."):
            assert not np.any(g), name
