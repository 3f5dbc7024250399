import numpy as np
import pytest
import torch

from ccreid.model import (ABLATION_FLAGS, CSSCModel, ModelConfig, SMRTemplate,
                          build_model, count_params, load_model_archive,
                          save_model_archive)
from ccreid.backbone import BackboneConfig, Bottleneck
from ccreid.weights import save_weight_archive

from conftest import toy_model_config


def toy_model(seed=0, num_ids=5, **flags):
    return build_model(toy_model_config(num_ids=num_ids, **flags), seed=seed)


def rand_images(n=4, seed=0):
    return torch.rand(n, 3, 64, 32, generator=torch.Generator().manual_seed(seed))


class TestBuild:
    def test_archive_module_paths(self):
        model = toy_model()
        names = set(model.state_dict())
        for prefix in ("backbone.", "branch1.smr_c.", "branch1.smr_s.",
                       "branch2.smr_s.", "branch2.smr_c.", "fusion."):
            assert any(n.startswith(prefix) for n in names), prefix

    def test_same_seed_identical(self):
        a, b = toy_model(seed=5), toy_model(seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_channel_chain_validation(self):
        cfg = toy_model_config()
        bad = ModelConfig(backbone=cfg.backbone,
                          smr=SMRTemplate(num_parts=4, embed_channels=60,
                                          part_channels=16, reduction_ratio=8),
                          num_train_identities=5)
        with pytest.raises(ValueError, match="divide"):
            build_model(bad)

    def test_baseline_reduces_to_single_conv_head(self):
        model = toy_model(disable_branch2=True, disable_second_smr=True,
                          disable_local_mining=True, disable_refinement=True)
        assert model.branch2 is None
        assert model.fusion is None
        assert list(model.branch1.keys()) == ["smr_c"]
        smr = model.branch1["smr_c"]
        assert smr.part_reduce is None
        assert not hasattr(smr, "gate_fc1")
        assert smr.cfg.mode == "content"

    def test_swap_preserves_parameter_count(self):
        total, _ = count_params(toy_model())
        swapped, _ = count_params(toy_model(swap_branch_order=True))
        assert total == swapped

    def test_swap_flips_branch_orders(self):
        model = toy_model(swap_branch_order=True)
        assert model.cfg.branch1_modes == ("salient", "content")
        assert model.cfg.branch2_modes == ("content", "salient")


class TestForward:
    def test_all_fields_present_with_consistent_shapes(self):
        model = toy_model().train()
        out = model(rand_images())
        assert out.branch1_first.mode == "content"
        assert out.branch1_second.mode == "salient"
        assert out.branch2_first.mode == "salient"
        assert out.branch2_second.mode == "content"
        assert out.fused_map.shape == (4, 64, 8, 4)
        assert out.final_feat.shape == (4, 64)
        assert out.final_logits.shape == (4, 5)

    def test_wiring_second_smr_consumes_first_refined_map(self):
        model = toy_model().train()
        captured = {}

        def hook(module, args, output):
            captured["input"] = args[0]

        model.branch1["smr_s"].register_forward_hook(hook)
        out = model(rand_images())
        assert captured["input"] is out.branch1_first.refined_map

    def test_fusion_commutes(self):
        model = toy_model().eval()
        gen = torch.Generator().manual_seed(2)
        a = torch.randn(2, 64, 8, 4, generator=gen)
        b = torch.randn(2, 64, 8, 4, generator=gen)
        with torch.no_grad():
            assert torch.equal(model.fuse_maps(a, b), model.fuse_maps(b, a))

    def test_fusion_of_zeros_constant_across_batch(self):
        model = toy_model().eval()
        with torch.no_grad():
            out = model.fuse_maps(torch.zeros(3, 64, 8, 4),
                                  torch.zeros(3, 64, 8, 4))
        assert torch.equal(out[0], out[1])
        assert torch.equal(out[1], out[2])

    def test_eval_forward_deterministic(self):
        model = toy_model().eval()
        x = rand_images(seed=3)
        with torch.no_grad():
            a, b = model(x), model(x)
        assert a.final_logits is None
        assert torch.equal(a.final_feat, b.final_feat)

    def test_final_feat_is_max_pool_of_fused_map(self):
        from ccreid.smr import global_pool
        model = toy_model().eval()
        with torch.no_grad():
            out = model(rand_images(seed=4))
        assert torch.equal(out.final_feat, global_pool(out.fused_map, "salient"))

    def test_single_branch_keeps_fusion(self):
        model = toy_model(disable_branch2=True).train()
        out = model(rand_images())
        assert out.branch2_first is None and out.branch2_second is None
        assert out.final_logits is not None

    def test_baseline_uses_avg_pooled_head_feature(self):
        model = toy_model(disable_branch2=True, disable_second_smr=True,
                          disable_local_mining=True,
                          disable_refinement=True).eval()
        with torch.no_grad():
            out = model(rand_images(seed=5))
        from ccreid.smr import global_pool
        assert torch.equal(out.final_feat,
                           global_pool(out.branch1_first.conv_map, "content"))
        assert out.final_logits is None


class TestEmbed:
    def test_embed_requires_eval_mode(self):
        model = toy_model().train()
        with pytest.raises(RuntimeError, match="evaluation mode"):
            model.embed(rand_images())

    def test_embed_dim_and_purity(self):
        model = toy_model().eval()
        img = rand_images(1, seed=7)
        batch = torch.cat([img, img])
        with torch.no_grad():
            emb = model.embed(batch)
        assert emb.shape == (2, 64)
        assert torch.equal(emb[0], emb[1])

    def test_neck_disabled_returns_raw_feature(self):
        model = build_model(toy_model_config(num_ids=5, neck_enabled=False),
                            seed=0).eval()
        with torch.no_grad():
            out = model(rand_images(seed=8))
            emb = model.embed(rand_images(seed=8))
        assert torch.equal(emb, out.final_feat)

    def test_single_smr_embed_matches_necked_global_slice(self):
        model = toy_model(disable_branch2=True, disable_second_smr=True).eval()
        x = rand_images(seed=9)
        with torch.no_grad():
            emb = model.embed(x)
            out = model(x)
            necked = model.branch1["smr_c"].neck(out.branch1_first.concat_feat)
        assert torch.allclose(emb, necked[:, :64])


class TestParamCount:
    def test_hand_counted_toy_case(self):
        # single conv (3x3, 2->2, no bias) + bias-free classifier 2->3
        module = torch.nn.Sequential(
            torch.nn.Conv2d(2, 2, 3, bias=False),
            torch.nn.Linear(2, 3, bias=False))
        total, breakdown = count_params(module)
        assert total == 3 * 3 * 2 * 2 + 2 * 3

    def test_full_scale_accounting(self, full_scale_model):
        total, breakdown = count_params(full_scale_model)
        assert total == 54_348_864
        assert 40_000_000 <= total <= 65_000_000
        assert set(breakdown) == {"backbone", "branch1.smr_c", "branch1.smr_s",
                                  "branch2.smr_s", "branch2.smr_c", "fusion"}
        assert sum(breakdown.values()) == total

    def test_disabling_local_mining_strictly_reduces(self):
        full, _ = count_params(toy_model())
        ablated, _ = count_params(toy_model(disable_local_mining=True))
        assert ablated < full

    def test_every_single_flag_reduces_or_preserves(self):
        full, _ = count_params(toy_model())
        for flag in ABLATION_FLAGS:
            ablated, _ = count_params(toy_model(**{flag: True}))
            assert ablated <= full


class TestWeightArchive:
    def test_save_load_round_trip(self, tmp_path):
        model = toy_model(seed=1)
        path = tmp_path / "weights.npz"
        save_model_archive(model, path)
        other = toy_model(seed=2)
        load_model_archive(other, path)
        for (na, pa), (nb, pb) in zip(model.state_dict().items(),
                                      other.state_dict().items()):
            assert na == nb
            assert torch.equal(pa, pb), na

    def test_stage5_templates_initialize_conv_blocks(self, tmp_path):
        cfg = toy_model_config(num_ids=5)
        d = cfg.smr.embed_channels
        with torch.random.fork_rng():
            torch.manual_seed(99)
            templates = {
                "stage5.block1": Bottleneck(cfg.backbone.channels_out, d),
                "stage5.block2": Bottleneck(d, d),
                "stage5.block3": Bottleneck(d, d),
            }
        tensors = {}
        for prefix, block in templates.items():
            for name, t in block.state_dict().items():
                tensors[f"{prefix}.{name}"] = t
        path = tmp_path / "stage5.npz"
        save_weight_archive(tensors, path)

        cfg = toy_model_config(
            num_ids=5,
            backbone=BackboneConfig(scale="toy", input_height=64,
                                    input_width=32, channels_out=64,
                                    toy_stage_widths=(16, 32, 64),
                                    external_weights_path=str(path)))
        model = build_model(cfg, seed=0)
        b1 = templates["stage5.block1"].state_dict()
        b2 = templates["stage5.block2"].state_dict()
        for _, pos, module in model.smr_modules():
            ref = b1 if pos == "first" else b2
            for name, t in module.conv_block.state_dict().items():
                assert torch.equal(t, ref[name])
        b3 = templates["stage5.block3"].state_dict()
        for name, t in model.fusion.conv_block.state_dict().items():
            assert torch.equal(t, b3[name])
        # independent copies, not shared storage
        first_positions = [m for _, pos, m in model.smr_modules()
                           if pos == "first"]
        p0 = first_positions[0].conv_block.conv1.weight
        p1 = first_positions[1].conv_block.conv1.weight
        assert p0.data_ptr() != p1.data_ptr()

    def test_shape_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.npz"
        save_weight_archive(
            {"stage5.block1.conv1.weight": torch.zeros(4, 4, 1, 1)}, path)
        cfg = toy_model_config(
            num_ids=5,
            backbone=BackboneConfig(scale="toy", input_height=64,
                                    input_width=32, channels_out=64,
                                    toy_stage_widths=(16, 32, 64),
                                    external_weights_path=str(path)))
        with pytest.raises(ValueError, match="shape mismatch"):
            build_model(cfg, seed=0)
