import time

import pytest
import torch

from mcnet.errors import DimensionMismatchError
from mcnet.fusion import (Decoder, MCNet, ModelConfig, SDCFusion, build_model, count_flops,
                          count_parameters)
from mcnet.losses import total_loss


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="module")
def toy_model():
    torch.manual_seed(0)
    return build_model("toy").eval()


def lf_pyramid(batch=1, scale=1.0):
    return [scale * torch.randn(batch, 64, s, s) for s in (24, 12, 6, 3)]


def test_decoder_shapes():
    dec = Decoder().eval()
    agg, logits = dec(lf_pyramid(), (96, 96))
    assert agg.shape == (1, 64, 24, 24) and logits.shape == (1, 1, 96, 96)
    with pytest.raises(DimensionMismatchError):
        dec(lf_pyramid()[:3])


def test_decoder_zero_input_constant_logits():
    dec = Decoder().eval()
    _, logits = dec([torch.zeros(1, 64, s, s) for s in (24, 12, 6, 3)], (96, 96))
    assert torch.all(logits == logits.flatten()[0])


def test_decoder_deepest_level_connectivity():
    dec = Decoder().eval()
    feats = lf_pyramid()
    _, a = dec(feats, (96, 96))
    feats[3] = feats[3] * 2
    _, b = dec(feats, (96, 96))
    assert (a - b).abs().max() > 0


def test_sdc_shapes():
    sdc = SDCFusion().eval()
    out = sdc(torch.randn(1, 64, 24, 24), torch.randn(1, 64, 24, 24))
    assert out["SDC_in"].shape == (1, 128, 24, 24)
    assert [tuple(o.shape) for o in out["SDC_out"]] == [(1, 128, s, s) for s in (24, 12, 6, 3)]
    for key in ("DF_rgb", "DF_t"):
        assert [tuple(o.shape) for o in out[key]] == [(1, 64, s, s) for s in (24, 12, 6, 3)]
    with pytest.raises(DimensionMismatchError):
        sdc(torch.randn(1, 64, 24, 24), torch.randn(1, 64, 12, 12))


def test_sdc_input_concat():
    sdc = SDCFusion().eval()
    a = torch.randn(1, 64, 8, 8)
    out = sdc(a, torch.zeros(1, 64, 8, 8))
    assert torch.equal(out["SDC_in"][:, :64], a) and not out["SDC_in"][:, 64:].any()


@pytest.mark.parametrize("gamma", [1, 3, 5, 7])
def test_dilated_conv_receptive_field(gamma):
    sdc = SDCFusion()
    conv = sdc.blocks[sdc.dilations.index(gamma)][2][0]
    x = torch.zeros(1, 128, 31, 31, requires_grad=True)
    conv(x)[0, :, 15, 15].sum().backward()
    rows = x.grad[0].abs().sum(dim=(0, 2)).nonzero().flatten()
    assert rows.max() - rows.min() + 1 == 2 * gamma + 1


def test_forward_shapes_and_time():
    model = build_model("toy").eval()
    rgb, t = torch.rand(1, 3, 96, 96), torch.rand(1, 3, 96, 96)
    start = time.perf_counter()
    with torch.no_grad():
        out = model(rgb, t)
    elapsed = time.perf_counter() - start
    for p in (out.pred_rgb, out.pred_t, out.pred_fusion):
        assert p.shape == (1, 1, 96, 96)
    assert elapsed < 10


def test_forward_single_channel_thermal_and_errors(toy_model):
    with torch.no_grad():
        a = toy_model(torch.rand(3, 96, 96), torch.rand(1, 96, 96))
        assert a.pred_fusion.shape == (1, 1, 96, 96)
        with pytest.raises(DimensionMismatchError):
            toy_model(torch.rand(1, 3, 96, 96), torch.rand(1, 3, 64, 64))


def test_forward_deterministic(toy_model):
    x, t = torch.rand(1, 3, 96, 96), torch.rand(1, 3, 96, 96)
    with torch.no_grad():
        a, b = toy_model(x, t), toy_model(x, t)
    assert torch.equal(a.logits_fusion, b.logits_fusion) and torch.equal(a.logits_rgb, b.logits_rgb)


def test_probabilities_valid_on_random_pairs(toy_model):
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for _ in range(10):
            rgb = torch.rand(10, 3, 96, 96, generator=g)
            t = torch.rand(10, 3, 96, 96, generator=g)
            out = toy_model(rgb, t)
            for p in (out.pred_rgb, out.pred_t, out.pred_fusion):
                assert torch.isfinite(p).all() and (p >= 0).all() and (p <= 1).all()


@pytest.mark.parametrize("sdc", [True, False])
def test_superposition_identity(sdc):
    model = build_model("toy", sdc=sdc).eval()
    with torch.no_grad():
        out = model(torch.rand(2, 3, 96, 96), torch.rand(2, 3, 96, 96), zero_df=True)
        full = model(torch.rand(2, 3, 96, 96), torch.rand(2, 3, 96, 96))
    assert torch.equal(out.logits_rgb, out.first_rgb) and torch.equal(out.logits_t, out.first_t)
    assert not torch.equal(full.logits_rgb, full.first_rgb)


def test_superposition_identity_train_mode():
    model = build_model("toy", sdc=False).train()
    out = model(torch.rand(2, 3, 96, 96), torch.rand(2, 3, 96, 96), zero_df=True)
    assert torch.equal(out.logits_rgb, out.first_rgb) and torch.equal(out.logits_t, out.first_t)


def test_fusion_head_sees_both_branches(toy_model):
    head = toy_model.fusion_head
    base = torch.randn(1, 2, 16, 16)
    with torch.no_grad():
        ref = head(base)
        for ch in (0, 1):
            pert = base.clone()
            pert[:, ch] += 0.5
            assert (head(pert) - ref).abs().max() > 0


def test_gradient_reaches_every_parameter():
    model = build_model("toy").train()
    rgb, t = torch.rand(2, 3, 96, 96), torch.rand(2, 3, 96, 96)
    gt = (torch.rand(2, 1, 96, 96) > 0.5).float()
    soft = torch.rand(2, 1, 96, 96)
    out = model(rgb, t)
    total_loss(out.pred_rgb, out.pred_t, out.pred_fusion, gt, soft, 1 - soft).total.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or p.grad.norm() == 0]
    assert not dead


def mirrored_state(model):
    """State dict for the same network with the two modality streams exchanged."""
    state = model.state_dict()
    out = {}
    for k, v in state.items():
        k2 = k.replace(".rgb.", ".@.").replace(".t.", ".rgb.").replace(".@.", ".t.")
        out[k2] = v.clone()
    c = model.cfg.channels
    # the shared feature concatenates (product, rgb, t); swapping streams swaps the last two blocks
    perm = torch.cat([torch.arange(c), torch.arange(2 * c, 3 * c), torch.arange(c, 2 * c)])
    for i in range(len(model.interaction.levels)):
        pre = f"interaction.levels.{i}."
        out[pre + "ca.mlp.0.weight"] = out[pre + "ca.mlp.0.weight"][:, perm]
        out[pre + "ca.mlp.2.weight"] = out[pre + "ca.mlp.2.weight"][perm]
        for m in ("rgb", "t"):
            out[pre + f"shared.{m}.0.weight"] = out[pre + f"shared.{m}.0.weight"][:, perm]
    first = "fusion.blocks.0.0.0.weight"
    out[first] = torch.cat([out[first][:, c:], out[first][:, :c]], dim=1)
    out["fusion_head.0.0.weight"] = out["fusion_head.0.0.weight"].flip(1)
    return out


def test_mirror_symmetry():
    model = build_model("toy").double().eval()
    mirror = build_model("toy").double().eval()
    mirror.load_state_dict(mirrored_state(model))
    rgb = torch.rand(1, 3, 96, 96, dtype=torch.float64)
    t = torch.rand(1, 3, 96, 96, dtype=torch.float64)
    with torch.no_grad():
        a = model(rgb, t)
        b = mirror(t, rgb)
    torch.testing.assert_close(b.logits_rgb, a.logits_t, rtol=0, atol=1e-9)
    torch.testing.assert_close(b.logits_t, a.logits_rgb, rtol=0, atol=1e-9)
    torch.testing.assert_close(b.logits_fusion, a.logits_fusion, rtol=0, atol=1e-9)


def test_ablation_parameter_counts():
    counts = {}
    for name, kw in [("full", {}), ("no_sdc", {"sdc": False}), ("share", {"attention": "share"}),
                     ("cross", {"attention": "cross"}), ("noninteraction", {"attention": "noninteraction"})]:
        counts[name] = count_parameters(build_model("toy", **kw))
    assert counts["full"] == 7_184_807
    for name in ("no_sdc", "share", "cross", "noninteraction"):
        assert counts[name] != counts["full"]
    assert len({counts["full"], counts["no_sdc"], counts["share"], counts["cross"]}) == 4


def test_independent_backbones(toy_model):
    a = toy_model.backbones["rgb"].patch_embed.proj.weight
    b = toy_model.backbones["t"].patch_embed.proj.weight
    assert a.data_ptr() != b.data_ptr() and not torch.equal(a, b)


def test_parameter_groups_partition(toy_model):
    groups = toy_model.parameter_groups()
    names = [n for n, _ in groups["backbone"]] + [n for n, _ in groups["other"]]
    assert sorted(names) == sorted(n for n, _ in toy_model.named_parameters())
    assert all(n.startswith("backbones.") for n, _ in groups["backbone"])
    assert any(n.startswith("interaction.squeeze") for n, _ in groups["other"])


def test_model_config_round_trip():
    cfg = ModelConfig(attention="share", sdc=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert MCNet(cfg).cfg.attention == "share"


def test_flop_counter(toy_model):
    assert count_flops(toy_model) > 1e9
