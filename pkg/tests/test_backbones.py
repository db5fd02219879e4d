import copy

import numpy as np
import pytest
import torch

from gaitfrail.backbones import (
    BackboneKind,
    CheckpointError,
    ConfigError,
    FREEZE_PRESETS,
    FreezeError,
    apply_freeze,
    build_backbone,
    cyclic_shift,
    freeze_config,
    load_checkpoint,
    parameter_groups,
    save_checkpoint,
    toy_deepgaitv2_config,
    toy_swingait_config,
    trainable_parameters,
)
from gaitfrail.backbones.swin import window_partition, window_reverse
from gaitfrail.objective import FrailtyHead, FrailtyModel
from gaitfrail.trainer import TrainConfig, build_model, group_state_hashes, make_optimizer


def swin_shape_oracle(h: int, w: int, window: int, channels: tuple[int, ...]):
    """Independent arithmetic: stem /4, one merge per extra stage, width padded
    until every stage grid divides its (halving) window and merges stay even."""
    gh = h // 4
    wp = w
    while True:
        if wp % 4 == 0:
            gw = wp // 4
            ok = True
            win = window
            for stage in range(len(channels)):
                if gw % win != 0 or gh % win != 0:
                    ok = False
                    break
                if stage < len(channels) - 1:
                    if gw % 2 or gh % 2:
                        ok = False
                        break
                    gw //= 2
                    gh //= 2
                    win //= 2
            if ok:
                return channels[-1], gh, gw, wp
            gh = h // 4
        wp += 1


class TestShapes:
    def test_swin_shape_oracle(self):
        cfg = toy_swingait_config((64, 44))
        c, fh, fw, wp = swin_shape_oracle(64, 44, 4, (16, 32))
        assert cfg.padded_width == wp == 48
        assert cfg.feature_shape() == (c, fh, fw) == (32, 8, 6)
        model = build_backbone(cfg, init_seed=0)
        out = model(torch.rand(2, 8, 64, 44))
        assert tuple(out.shape) == (2, 8, c, fh, fw)

    def test_deepgait_shape_oracle(self):
        cfg = toy_deepgaitv2_config((64, 44))
        model = build_backbone(cfg, init_seed=0)
        out = model(torch.rand(2, 8, 64, 44))
        # stem keeps resolution; exactly two stride-2 stages follow
        assert tuple(out.shape) == (2, 8, 128, 64 // 4, 44 // 4)

    def test_zero_input_finite(self):
        for cfg in (toy_swingait_config((64, 44)), toy_deepgaitv2_config((64, 44))):
            model = build_backbone(cfg, init_seed=1)
            model.eval()
            out = model(torch.zeros(1, 4, 64, 44))
            assert torch.isfinite(out).all()

    def test_indivisible_geometry_rejected_at_construction(self):
        with pytest.raises(ConfigError):
            toy_deepgaitv2_config((30, 22))  # 30 and 22 are not divisible by 4
        with pytest.raises(ConfigError):
            toy_swingait_config((62, 44))  # height cannot be padded

    def test_wrong_input_shape_rejected(self):
        model = build_backbone(toy_deepgaitv2_config((64, 44)), init_seed=0)
        with pytest.raises(ConfigError, match="does not match"):
            model(torch.rand(1, 4, 32, 24))


class TestSwinMechanics:
    def test_cyclic_shift_inverse_is_identity(self):
        x = torch.rand(2, 8, 6, 5)
        shifted = cyclic_shift(x, (2, 3))
        restored = cyclic_shift(shifted, (-2, -3))
        assert torch.equal(restored, x)

    def test_window_partition_reverse_round_trip(self):
        x = torch.rand(3, 8, 12, 7)
        windows = window_partition(x, 4)
        assert windows.shape == (3 * 2 * 3, 16, 7)
        assert torch.equal(window_reverse(windows, 4, 8, 12), x)

    def test_constant_tokens_shift_invariant(self):
        # attention over constant tokens returns the same weighted average no
        # matter how windows are partitioned, so shifting cannot matter
        cfg = toy_swingait_config((64, 44))
        model = build_backbone(cfg, init_seed=3)
        model.eval()
        unshifted = copy.deepcopy(model)
        for stage_name in ("swin_stage1", "swin_stage2"):
            for block in unshifted.groups[stage_name].blocks:
                block.shift = (0, 0)
                block.attn_mask = None
        gh, gw = model.grids[0]
        tokens = torch.full((2, gh * gw, cfg.channels[0]), 0.37)
        with torch.no_grad():
            a = model.groups["swin_stage2"](model.groups["swin_stage1"](tokens))
            b = unshifted.groups["swin_stage2"](unshifted.groups["swin_stage1"](tokens))
        assert torch.allclose(a, b, atol=1e-6)

    def test_shifted_blocks_matter_on_structured_input(self):
        cfg = toy_swingait_config((64, 44))
        model = build_backbone(cfg, init_seed=3)
        model.eval()
        unshifted = copy.deepcopy(model)
        for stage_name in ("swin_stage1", "swin_stage2"):
            for block in unshifted.groups[stage_name].blocks:
                block.shift = (0, 0)
                block.attn_mask = None
        x = torch.rand(1, 2, 64, 44)
        with torch.no_grad():
            assert not torch.allclose(model(x), unshifted(x), atol=1e-5)


class TestDeepGaitMechanics:
    def test_residual_identity_layer1(self):
        cfg = toy_deepgaitv2_config((64, 44))
        model = build_backbone(cfg, init_seed=0)
        model.eval()
        with torch.no_grad():
            for block in model.groups["layer1"]:
                block.bn2.weight.zero_()
        x = torch.rand(1, 3, 64, 44).unsqueeze(1)
        with torch.no_grad():
            stem_out = model.groups["layer0"](x)
            layer1_out = model.groups["layer1"](stem_out)
        assert torch.allclose(layer1_out, stem_out, atol=1e-6)

    def test_receptive_field_of_single_pixel(self):
        cfg = toy_deepgaitv2_config((64, 44))
        model = build_backbone(cfg, init_seed=2)
        model.eval()
        x = torch.zeros(1, 4, 64, 44)
        cy, cx = 32, 22
        x[0, 2, cy, cx] = 1.0
        with torch.no_grad():
            out = model(x)  # (1, 4, C, 16, 11)
        # receptive-field oracle over the spatial conv schedule (kernel, stride)
        convs = [(3, 1)]  # stem
        convs += [(3, 1)] * 4  # layer1: 2 blocks x 2 spatial convs
        convs += [(3, 2), (3, 1)]  # layer2 spatial convs
        convs += [(3, 2), (3, 1)]  # layer3
        convs += [(3, 1), (3, 1)]  # layer4
        rf, jump = 1, 1
        for k, s in convs:
            rf += (k - 1) * jump
            jump *= s
        # an output cell at index i covers input [i*jump - rf//2 ... i*jump + rf//2]
        nz = out[0].abs().sum(dim=(0, 1)) > 0
        ys, xs = torch.nonzero(nz, as_tuple=True)
        for i, j in zip(ys.tolist(), xs.tolist()):
            assert abs(i * 4 - cy) <= rf // 2 + 4
            assert abs(j * 4 - cx) <= rf // 2 + 4
        assert nz.any()

    def test_zero_input_zero_output_at_init(self):
        model = build_backbone(toy_deepgaitv2_config((64, 44)), init_seed=0)
        model.eval()
        with torch.no_grad():
            out = model(torch.zeros(1, 3, 64, 44))
        assert torch.equal(out, torch.zeros_like(out))

    def test_temporal_length_preserved(self):
        model = build_backbone(toy_deepgaitv2_config((32, 24)), init_seed=0)
        for t in (1, 5, 9):
            out = model(torch.rand(1, t, 32, 24))
            assert out.shape[1] == t


class TestParameterGroups:
    def test_swin_group_names_and_partition(self):
        model = build_backbone(toy_swingait_config((64, 44)), init_seed=0)
        groups = parameter_groups(model)
        assert groups.names() == ["cnn_stem", "patch_embed", "swin_stage1", "swin_stage2"]
        assert groups.total() == sum(p.numel() for p in model.parameters())

    def test_deepgait_group_names_and_partition(self):
        model = build_backbone(toy_deepgaitv2_config((64, 44)), init_seed=0)
        groups = parameter_groups(model)
        assert groups.names() == ["layer0", "layer1", "layer2", "layer3", "layer4"]
        assert groups.total() == sum(p.numel() for p in model.parameters())

    def test_model_adds_head_group(self):
        cfg = toy_deepgaitv2_config((32, 24))
        model = build_model(cfg, TrainConfig(seed=0))
        assert set(model.groups) == {"layer0", "layer1", "layer2", "layer3", "layer4", "head"}

    def test_group_membership_stable_across_runs(self):
        a = parameter_groups(build_backbone(toy_swingait_config((64, 44)), init_seed=0))
        b = parameter_groups(build_backbone(toy_swingait_config((64, 44)), init_seed=5))
        for name in a.names():
            assert list(a.groups[name]) == list(b.groups[name])


class TestFreezePresets:
    @pytest.mark.parametrize("name,frozen", [
        ("M1", set()),
        ("M2", {"cnn_stem"}),
        ("M3", {"cnn_stem", "patch_embed"}),
        ("M4", {"cnn_stem", "patch_embed", "swin_stage1"}),
        ("M5", {"cnn_stem", "patch_embed", "swin_stage1", "swin_stage2"}),
        ("D0", set()),
        ("D1", {"layer0"}),
        ("D2", {"layer0", "layer1"}),
        ("D3", {"layer0", "layer1", "layer2"}),
        ("D4", {"layer0", "layer1", "layer2", "layer3"}),
        ("D5", {"layer0", "layer1", "layer2", "layer3", "layer4"}),
    ])
    def test_preset_contents(self, name, frozen):
        assert FREEZE_PRESETS[name].frozen_groups == frozenset(frozen)

    def test_requires_grad_flags(self):
        cfg = toy_swingait_config((64, 44))
        model = build_backbone(cfg, init_seed=0)
        apply_freeze(model, freeze_config("M2"))
        for p in model.groups["cnn_stem"].parameters():
            assert not p.requires_grad
        for name in ("patch_embed", "swin_stage1", "swin_stage2"):
            assert all(p.requires_grad for p in model.groups[name].parameters())

    def test_kind_mismatch_rejected(self):
        model = build_backbone(toy_deepgaitv2_config((64, 44)), init_seed=0)
        with pytest.raises(FreezeError, match="swingait"):
            apply_freeze(model, freeze_config("M3"))

    def test_unknown_name_rejected(self):
        with pytest.raises(FreezeError, match="unknown"):
            freeze_config("M9")

    def test_m5_backbone_grads_absent(self):
        cfg = toy_swingait_config((32, 24))
        model = build_model(cfg, TrainConfig(seed=0))
        apply_freeze(model, freeze_config("M5"))
        logits, embeddings, _ = model(torch.rand(2, 4, 32, 24))
        logits.sum().backward()
        for name in ("cnn_stem", "patch_embed", "swin_stage1", "swin_stage2"):
            for p in model.groups[name].parameters():
                assert p.grad is None
        assert any(p.grad is not None for p in model.head.parameters())

    def test_frozen_bn_statistics_pinned(self):
        cfg = toy_deepgaitv2_config((32, 24))
        model = build_model(cfg, TrainConfig(seed=0))
        apply_freeze(model, freeze_config("D1"))
        model.train()
        bn = model.backbone.groups["layer0"][1]
        before = bn.running_mean.clone()
        model.backbone(torch.rand(2, 4, 32, 24) + 0.5)
        assert torch.equal(bn.running_mean, before)
        trainable_bn = model.backbone.groups["layer1"][0].bn1
        before = trainable_bn.running_mean.clone()
        model.backbone(torch.rand(2, 4, 32, 24) + 0.5)
        assert not torch.equal(trainable_bn.running_mean, before)


class TestFreezeDiscipline:
    @pytest.mark.parametrize("backbone,preset", [("swingait", "M3"), ("deepgaitv2", "D2")])
    def test_frozen_bitwise_unchanged_after_steps(self, backbone, preset):
        cfg = (toy_swingait_config if backbone == "swingait" else toy_deepgaitv2_config)((32, 24))
        train_cfg = TrainConfig(seed=1, learning_rate=1e-3)
        model = build_model(cfg, train_cfg)
        apply_freeze(model, freeze_config(preset))
        optimizer = make_optimizer(model, train_cfg)
        before = group_state_hashes(model)
        torch_labels = torch.tensor([0, 1, 2, 1])
        for _ in range(5):
            model.train()
            logits, embeddings, _ = model(torch.rand(4, 4, 32, 24))
            loss = torch.nn.functional.cross_entropy(logits, torch_labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        after = group_state_hashes(model)
        frozen = FREEZE_PRESETS[preset].frozen_groups
        for name in model.groups:
            if name in frozen:
                assert after[name] == before[name], f"frozen group {name} changed"
            else:
                assert after[name] != before[name], f"trainable group {name} did not change"

    def test_optimizer_state_only_for_trainable(self):
        cfg = toy_deepgaitv2_config((32, 24))
        train_cfg = TrainConfig(seed=0)
        model = build_model(cfg, train_cfg)
        apply_freeze(model, freeze_config("D5"))
        optimizer = make_optimizer(model, train_cfg)
        optimizer_params = {id(p) for g in optimizer.param_groups for p in g["params"]}
        backbone_params = {id(p) for p in model.backbone.parameters()}
        head_params = {id(p) for p in model.head.parameters()}
        assert optimizer_params == head_params
        assert not (optimizer_params & backbone_params)


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        a = build_backbone(toy_swingait_config((64, 44)), init_seed=11)
        b = build_backbone(toy_swingait_config((64, 44)), init_seed=11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_forward_deterministic_in_eval(self):
        model = build_backbone(toy_deepgaitv2_config((32, 24)), init_seed=4)
        model.eval()
        x = torch.rand(2, 4, 32, 24)
        with torch.no_grad():
            assert torch.equal(model(x), model(x))


class TestCheckpoint:
    def _model_pair(self):
        cfg = toy_deepgaitv2_config((32, 24))
        model = build_model(cfg, TrainConfig(seed=0))
        other = build_model(cfg, TrainConfig(seed=99))
        return cfg, model, other

    def test_round_trip(self, tmp_path):
        cfg, model, other = self._model_pair()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, {"backbone": model.backbone, "head": model.head},
                        cfg.fingerprint())
        load_checkpoint(path, {"backbone": other.backbone, "head": other.head},
                        expected_fingerprint=cfg.fingerprint())
        for pa, pb in zip(model.parameters(), other.parameters()):
            assert torch.equal(pa, pb)

    def test_fingerprint_mismatch(self, tmp_path):
        cfg, model, other = self._model_pair()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, {"backbone": model.backbone}, cfg.fingerprint())
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(path, {"backbone": other.backbone}, expected_fingerprint="nope")

    def test_shape_mismatch_refused(self, tmp_path):
        cfg, model, _ = self._model_pair()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, {"head": model.head}, cfg.fingerprint())
        bigger = FrailtyHead(in_channels=model.head.in_channels,
                             feature_height=8, part_count=4, embed_dim=128)
        with pytest.raises(CheckpointError, match="refusing to reshape"):
            load_checkpoint(path, {"head": bigger})

    def test_missing_keys_refused(self, tmp_path):
        cfg, model, other = self._model_pair()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, {"backbone": model.backbone}, cfg.fingerprint())
        with pytest.raises(CheckpointError, match="missing|unexpected"):
            load_checkpoint(path, {"backbone": other.backbone, "head": other.head})
