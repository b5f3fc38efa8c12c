"""Graph construction, UIB structure, decode/NMS, checkpoints."""

import dataclasses

import numpy as np
import pytest

from msyolo import tensor as T
from msyolo.checkpoint import checkpoint_bytes, load_checkpoint_bytes
from msyolo.config import ModelConfig, UIBSpec, load_config, packaged_config_path
from msyolo.errors import ConfigurationError, UsageError
from msyolo.model import (Detection, build_msyolo, build_uib, decode_predictions,
                          nms)
from msyolo.tensor import Tensor


def uib_node_kinds(spec):
    graph = build_uib(spec)
    return [n.name for n in graph.nodes if n.name.startswith("uib.")]


def uib_param_count(spec):
    graph = build_uib(spec)
    return sum(p.data.size for name, p in graph.named_parameters() if name.startswith("uib."))


def expected_uib_params(spec):
    mid = spec.expanded
    total = 0
    if spec.k1 > 0:
        total += spec.k1 * spec.k1 * spec.c_in + 2 * spec.c_in
    total += spec.c_in * mid + 2 * mid
    if spec.k2 > 0:
        total += spec.k2 * spec.k2 * mid + 2 * mid
    total += mid * spec.c_out + 2 * spec.c_out
    return total


class TestUIB:
    def test_zero_kernels_yield_pure_pointwise_block(self):
        spec = UIBSpec(k1=0, k2=0, s=1, r=2.0, c_in=8, c_out=8)
        names = uib_node_kinds(spec)
        assert not any(".dw1." in n or ".dw2." in n for n in names)
        assert any(".expand." in n for n in names)
        assert any(".project." in n for n in names)
        assert any(n.endswith(".residual") for n in names)  # s=1, c_in==c_out

    def test_residual_condition(self):
        with_res = UIBSpec(k1=3, k2=3, s=1, r=2.0, c_in=8, c_out=8)
        assert any(n.endswith(".residual") for n in uib_node_kinds(with_res))
        no_res_stride = UIBSpec(k1=3, k2=3, s=2, r=2.0, c_in=8, c_out=8)
        assert not any(n.endswith(".residual") for n in uib_node_kinds(no_res_stride))
        no_res_channels = UIBSpec(k1=3, k2=3, s=1, r=2.0, c_in=8, c_out=16)
        assert not any(n.endswith(".residual") for n in uib_node_kinds(no_res_channels))

    def test_stride_on_sole_depthwise_stage(self):
        # k1=3, k2=0, s=2: the stride rides dw1; (1,16,32,32) -> (1,32,16,16)
        spec = UIBSpec(k1=3, k2=0, s=2, r=4.0, c_in=16, c_out=32)
        graph = build_uib(spec)
        shapes = graph.infer_shapes((1, 1, 32, 32))
        assert shapes[graph.output_ids[0]] == (1, 32, 16, 16)
        out = graph.forward(np.zeros((1, 1, 32, 32), dtype=np.float32))
        assert out[0].shape == (1, 32, 16, 16)

    def test_invalid_kernel_rejected(self):
        with pytest.raises(ConfigurationError, match="k1"):
            UIBSpec(k1=7, k2=3, s=1, r=2.0, c_in=8, c_out=8)

    def test_expanded_width_rounding(self):
        assert UIBSpec(k1=0, k2=0, s=1, r=2.5, c_in=3, c_out=3).expanded == 8
        assert UIBSpec(k1=0, k2=0, s=1, r=0.1, c_in=3, c_out=3).expanded == 1

    @pytest.mark.parametrize("k1,k2,s", [
        (0, 0, 1), (0, 3, 1), (0, 5, 1), (3, 0, 1), (3, 3, 1), (3, 5, 1),
        (5, 0, 1), (5, 3, 1), (5, 5, 1), (3, 3, 2), (0, 3, 2), (3, 0, 2),
    ])
    def test_param_count_matrix(self, k1, k2, s):
        spec = UIBSpec(k1=k1, k2=k2, s=s, r=3.0, c_in=6, c_out=6 if s == 1 else 12)
        assert uib_param_count(spec) == expected_uib_params(spec)

    def test_zeroed_block_passes_residual_through(self):
        spec = UIBSpec(k1=3, k2=3, s=1, r=2.0, c_in=4, c_out=4)
        graph = build_uib(spec)
        for name, p in graph.named_parameters():
            p.data[...] = 0.0
        # identity adapter: replicate the single input channel
        adapt = dict(graph.named_parameters())["adapt.weight"]
        adapt.data[...] = 1.0
        x = np.random.default_rng(0).standard_normal((1, 1, 6, 6)).astype(np.float32)
        out = graph.forward(x)
        expected = np.repeat(x, 4, axis=1)  # adapter output; zeroed UIB adds nothing
        np.testing.assert_allclose(out[0].data, expected, atol=1e-6)


@pytest.fixture(scope="module")
def desk_config():
    cfg, _ = load_config(packaged_config_path("msyolo-small"))
    return dataclasses.replace(cfg, width_scale=0.25, num_classes=4)


class TestBuildMsyolo:
    def test_desk_scale_head_map_sizes(self, desk_config):
        graph = build_msyolo(desk_config, seed=0)
        shapes = graph.output_shapes((1, 1, 160, 160))
        assert [s[2:] for s in shapes] == [(20, 20), (10, 10), (5, 5)]

    def test_full_scale_head_map_sizes(self):
        cfg, _ = load_config(packaged_config_path("msyolo-small"))
        graph = build_msyolo(cfg, seed=0)
        shapes = graph.output_shapes((1, 1, 640, 640))
        assert [s[2:] for s in shapes] == [(80, 80), (40, 40), (20, 20)]

    def test_single_class_head_channels(self):
        cfg, _ = load_config(packaged_config_path("msyolo-small"))
        cfg = dataclasses.replace(cfg, num_classes=1, width_scale=0.25)
        graph = build_msyolo(cfg, seed=0)
        assert all(s[1] == 5 for s in graph.output_shapes((1, 1, 160, 160)))

    def test_inferred_shapes_agree_with_execution(self, desk_config):
        for cfg_name in ("msyolo-small", "baseline-small"):
            cfg, _ = load_config(packaged_config_path(cfg_name))
            cfg = dataclasses.replace(cfg, width_scale=0.25, num_classes=3)
            graph = build_msyolo(cfg, seed=1)
            inferred = graph.output_shapes((2, 1, 96, 96))
            outs = graph.forward(np.zeros((2, 1, 96, 96), dtype=np.float32))
            assert [tuple(o.shape) for o in outs] == [tuple(s) for s in inferred]

    def test_missing_tap_stride_lists_achievable(self):
        cfg, _ = load_config(packaged_config_path("msyolo-small"))
        truncated = dataclasses.replace(cfg, backbone=cfg.backbone[:5])
        with pytest.raises(ConfigurationError, match="achievable strides"):
            build_msyolo(truncated, seed=0)

    def test_indivisible_input_suggests_letterbox(self, desk_config):
        graph = build_msyolo(desk_config, seed=0)
        with pytest.raises(UsageError, match="letterbox"):
            graph.forward(np.zeros((1, 1, 150, 150), dtype=np.float32))

    def test_gray_to_rgb_adapter(self):
        cfg, _ = load_config(packaged_config_path("msyolo-small"))
        cfg = dataclasses.replace(cfg, input_channels=3, width_scale=0.25)
        graph = build_msyolo(cfg, seed=0)
        out = graph.forward(np.zeros((1, 1, 96, 96), dtype=np.float32))
        assert out[0].shape[0] == 1


class TestForward:
    def test_zero_weights_give_zero_logits(self, desk_config):
        graph = build_msyolo(desk_config, seed=0)
        for p in graph.parameters():
            p.data[...] = 0.0
        outs = graph.forward(np.zeros((1, 1, 160, 160), dtype=np.float32))
        for o in outs:
            cls = o.data[:, 4:]
            assert np.all(cls == 0.0)
            assert np.all(T._sigmoid_np(cls) == 0.5)

    def test_batch_independence(self, desk_config, rng):
        graph = build_msyolo(desk_config, seed=0)
        img = rng.random((1, 160, 160)).astype(np.float32)
        batch = np.stack([img, img])
        with T.no_grad():
            outs = graph.forward(Tensor(batch), training=False)
        for o in outs:
            np.testing.assert_array_equal(o.data[0], o.data[1])

    def test_seeded_determinism(self, desk_config, rng):
        img = rng.random((1, 1, 160, 160)).astype(np.float32)
        a = build_msyolo(desk_config, seed=7).forward(img)
        b = build_msyolo(desk_config, seed=7).forward(img)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_translation_consistency_at_stride_granularity(self, desk_config):
        graph = build_msyolo(desk_config, seed=3)
        canvas = np.full((1, 1, 160, 160), 0.1, dtype=np.float32)
        img_a = canvas.copy()
        img_a[0, 0, 64:96, 32:64] = 1.0
        img_b = canvas.copy()
        img_b[0, 0, 64:96, 64:96] = 1.0  # shifted right by 32 px (one deep stride)
        with T.no_grad():
            ra = graph.forward(img_a)[0].data[0]
            rb = graph.forward(img_b)[0].data[0]
        # hottest class response on the stride-8 map, excluding a border ring
        def interior_argmax(resp):
            m = resp[4:].max(axis=0)[2:-2, 2:-2]
            return np.unravel_index(np.argmax(m), m.shape)
        ia, ja = interior_argmax(ra)
        ib, jb = interior_argmax(rb)
        assert ib == ia
        assert jb == ja + 4  # 32 px / stride 8


class TestDecode:
    def make_maps(self, m=3):
        return [np.full((1, 4 + m, h, w), -30.0, dtype=np.float32)
                for h, w in ((4, 4), (2, 2), (1, 1))]

    def test_hot_cell_decodes_to_hand_computed_box(self):
        maps = self.make_maps()
        # cell (1, 2) on stride 8: distances softplus(0) = log 2 cells
        maps[0][0, :4, 1, 2] = 0.0
        maps[0][0, 4 + 1, 1, 2] = 2.0  # class 1 logit
        dets = decode_predictions(maps, conf_threshold=0.25)
        assert len(dets[0]) == 1
        d = dets[0][0]
        lv = float(np.log1p(np.exp(0.0)))
        cx, cy = (2 + 0.5) * 8, (1 + 0.5) * 8
        np.testing.assert_allclose(
            d.box, (cx - lv * 8, cy - lv * 8, cx + lv * 8, cy + lv * 8), rtol=1e-6)
        assert d.class_id == 1
        assert d.confidence == pytest.approx(1 / (1 + np.exp(-2.0)), rel=1e-6)

    def test_conf_threshold_above_one_clamps_to_empty(self):
        maps = self.make_maps()
        maps[0][0, 4, 1, 1] = 50.0
        assert decode_predictions(maps, conf_threshold=1.0 + 1e-9) == [[]]

    def test_degenerate_boxes_filtered(self):
        maps = self.make_maps()
        maps[0][0, :4, 1, 1] = -80.0  # softplus underflows to exactly 0 width
        maps[0][0, 4, 1, 1] = 5.0
        assert decode_predictions(maps, conf_threshold=0.25) == [[]]

    def test_score_exactly_at_threshold_kept(self):
        maps = self.make_maps()
        maps[0][0, :4, 0, 0] = 0.0
        maps[0][0, 4, 0, 0] = 0.0  # sigmoid -> exactly 0.5
        dets = decode_predictions(maps, conf_threshold=0.5)
        assert len(dets[0]) == 1


class TestNMS:
    def test_single_detection_unchanged(self):
        d = [Detection((0, 0, 10, 10), 0, 0.9)]
        assert nms(d, 0.45) == d

    def test_identical_boxes_same_class(self):
        dets = [Detection((0, 0, 10, 10), 0, 0.9), Detection((0, 0, 10, 10), 0, 0.8)]
        kept = nms(dets, 0.45)
        assert len(kept) == 1 and kept[0].confidence == 0.9

    def test_identical_boxes_different_classes_both_survive(self):
        dets = [Detection((0, 0, 10, 10), 0, 0.9), Detection((0, 0, 10, 10), 1, 0.8)]
        assert len(nms(dets, 0.45)) == 2

    def test_output_sorted_by_confidence(self, rng):
        dets = [Detection((float(10 * i), 0, float(10 * i + 8), 8), 0, float(c))
                for i, c in enumerate(rng.random(10))]
        kept = nms(dets, 0.45)
        confs = [d.confidence for d in kept]
        assert confs == sorted(confs, reverse=True)

    def test_subset_and_idempotence(self, rng):
        for _ in range(20):
            dets = []
            for _ in range(int(rng.integers(1, 12))):
                x = float(rng.integers(0, 40))
                y = float(rng.integers(0, 40))
                dets.append(Detection((x, y, x + float(rng.integers(4, 20)),
                                       y + float(rng.integers(4, 20))),
                                      int(rng.integers(0, 3)), float(rng.random())))
            once = nms(dets, 0.45)
            assert all(d in dets for d in once)
            assert nms(once, 0.45) == once

    def test_threshold_domain_validated(self):
        with pytest.raises(UsageError):
            nms([Detection((0, 0, 1, 1), 0, 0.5)], 1.5)


class TestCheckpoint:
    def test_round_trip_byte_exact(self, desk_config):
        graph = build_msyolo(desk_config, seed=5)
        blob = checkpoint_bytes(graph)
        again = checkpoint_bytes(load_checkpoint_bytes(blob))
        assert blob == again

    def test_loaded_graph_reproduces_forward(self, desk_config, rng):
        graph = build_msyolo(desk_config, seed=5)
        img = rng.random((1, 1, 160, 160)).astype(np.float32)
        ref = [o.data for o in graph.forward(img)]
        loaded = load_checkpoint_bytes(checkpoint_bytes(graph))
        out = [o.data for o in loaded.forward(img)]
        for a, b in zip(ref, out):
            np.testing.assert_array_equal(a, b)

    def test_config_echo_preserved(self, desk_config):
        graph = build_msyolo(desk_config, seed=0)
        loaded = load_checkpoint_bytes(checkpoint_bytes(graph))
        assert loaded.config.to_dict() == desk_config.to_dict()


class TestConfigParsing:
    def test_packaged_configs_parse(self):
        for name in ("msyolo-small", "baseline-small"):
            cfg, extra = load_config(packaged_config_path(name))
            assert len(cfg.backbone) >= 5
            assert "train" in extra and "loss" in extra and "nms" in extra

    def test_head_strides_fixed(self):
        with pytest.raises(ConfigurationError, match="strides"):
            ModelConfig(head_strides=(4, 8, 16))

    def test_unknown_stage_type_rejected(self):
        from msyolo.config import parse_config_text
        text = "[model]\nname=x\n[backbone.1]\ntype = mystery\nk = 3\n"
        with pytest.raises(Exception, match="mystery"):
            parse_config_text(text)
