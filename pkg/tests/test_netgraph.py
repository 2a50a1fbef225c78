from dataclasses import replace

import numpy as np
import pytest
import torch

from mtprune.config import ConfigError, MtpConfig
from mtprune.model import GraphNet
from mtprune.netgraph import (
    LayerSpec,
    NetworkGraph,
    StructuralError,
    build_desk_network,
    extract_scaling_factors,
    replace_layer,
    validate,
)


def test_desk_network_is_valid(desk):
    assert validate(desk) == []


def test_block_output_convs_are_not_prunable():
    g = build_desk_network(MtpConfig(depth=2, width=8))
    for i in (1, 2):
        assert g.layer(f"b{i}_c1_conv").prunable
        assert g.layer(f"b{i}_c2_conv").prunable
        assert not g.layer(f"b{i}_c3_conv").prunable
    assert not g.layer("b2_proj_conv").prunable
    assert not g.layer("stem_conv").prunable


def test_width_one_network_still_valid():
    g = build_desk_network(MtpConfig(width=1, decoder_width=1))
    assert validate(g) == []
    out = GraphNet(g)(torch.randn(2, 3, 32, 32))
    assert out.shape == (2, 4, 32, 32)


def test_invalid_width_rejected():
    with pytest.raises(ConfigError):
        MtpConfig(width=0)
    with pytest.raises(ConfigError):
        MtpConfig(depth=-1)


def test_prunable_count_hand_enumeration(desk):
    # blocks of width 8, 16, 32 with two prunable convs each
    assert desk.prunable_count("backbone") == 2 * (8 + 16 + 32)
    # three atrous branches, the pooled branch and the projection, 16 wide each
    assert desk.prunable_count("decoder") == 5 * 16
    assert desk.prunable_count() == 192


def test_topological_order(desk):
    for u, v in desk.edges:
        assert desk.index(u) < desk.index(v)


def test_prunability_closure(desk):
    for spec in desk.layers:
        if spec.kind == "elementwise-add":
            for src in desk.inputs(spec.id):
                node = src
                while desk.layer(node).kind != "conv":
                    node = desk.inputs(node)[0]
                assert not desk.layer(node).prunable


def test_residual_groups_stay_in_backbone(desk):
    for spec in desk.layers:
        if spec.residual_group is not None:
            assert spec.partition == "backbone"


def test_extract_lengths(desk):
    net = GraphNet(desk)
    assert len(extract_scaling_factors(desk, net, "backbone")) == 112
    assert len(extract_scaling_factors(desk, net, "decoder")) == 80


def test_extract_constant_init(desk):
    net = GraphNet(desk)
    for m in net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.weight.data.fill_(0.5)
    vec = extract_scaling_factors(desk, net, "backbone")
    assert set(vec.values.tolist()) == {0.5}


def test_extract_injected_zero(desk):
    net = GraphNet(desk)
    net.aspp_b1_bn.weight.data[3] = 0.0
    vec = extract_scaling_factors(desk, net, "decoder")
    zeros = [(l, c) for l, c, v in vec.entries if v == 0.0]
    assert zeros == [("aspp_b1_conv", 3)]


def test_extract_is_bijection(desk):
    vec = extract_scaling_factors(desk, GraphNet(desk), "backbone")
    keys = [(l, c) for l, c, _ in vec.entries]
    expected = [(l.id, c) for l in desk.prunable_layers("backbone") for c in range(l.out_channels)]
    assert keys == expected
    assert len(set(keys)) == len(keys)


def test_extract_missing_scale(desk):
    state = GraphNet(desk).state_dict()
    del state["b2_c1_bn.weight"]
    with pytest.raises(StructuralError):
        extract_scaling_factors(desk, state, "backbone")


def test_validate_channel_mismatch(desk):
    # b1_c2_conv consumes the 8-channel output of b1_c1_act
    bad = replace_layer(desk, "b1_c2_conv", in_channels=7)
    problems = validate(bad)
    assert len(problems) == 1
    assert "channel mismatch" in problems[0] and "b1_c2_conv" in problems[0]


def test_validate_prunable_block_output(desk):
    bad = replace_layer(desk, "b1_c3_conv", prunable=True)
    problems = validate(bad)
    assert len(problems) == 1
    assert "prunability" in problems[0] and "b1_c3_conv" in problems[0]


def test_validate_cycle_and_order():
    layers = (LayerSpec("a", "conv", 3, 4), LayerSpec("b", "batchnorm", 4, 4))
    g = NetworkGraph(layers, (("input", "a"), ("b", "a"), ("a", "b")), (3, 4, 4))
    assert any("topological" in p for p in validate(g))


def test_validate_mixed_partition_group(desk):
    bad = replace_layer(desk, "b2_c3_bn", partition="decoder")
    assert any("spans partitions" in p for p in validate(bad))


def test_json_round_trip(desk, tmp_path):
    path = tmp_path / "g.json"
    desk.save(path)
    again = NetworkGraph.load(path)
    assert again == desk
    assert again.to_json() == desk.to_json()


def test_json_rejects_other_version(desk):
    doc = desk.to_dict()
    doc["version"] = 99
    with pytest.raises(StructuralError):
        NetworkGraph.from_dict(doc)


def test_forward_shapes(desk):
    net = GraphNet(desk)
    x = torch.randn(3, 3, 32, 32)
    assert net(x, "cls").shape == (3, 10)
    assert net(x, "seg").shape == (3, 4, 32, 32)
