import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mtprune.model import GraphNet
from mtprune.netgraph import (
    LayerSpec,
    NetworkGraph,
    ScalingVector,
    StructuralError,
    extract_scaling_factors,
    validate,
)
from mtprune.profiler import count_params
from mtprune.pruner import (
    PruningPlan,
    apply_plan,
    build_plan,
    compute_thresholds,
    pruned_indices,
    uniform_plan,
)

from conftest import randomize_bn


def vec(values, layer="l", partition="backbone"):
    return ScalingVector(tuple((layer, i, float(v)) for i, v in enumerate(values)), partition)


def sort_oracle(values, p):
    """Indices cut by sort-and-cut, ties by position."""
    k = math.floor(p / 100 * len(values))
    order = sorted(range(len(values)), key=lambda i: (abs(values[i]), i))
    return sorted(order[:k])


def two_conv_graph(w1=4, w2=3):
    """input -> c1/bn1/a1 (backbone) -> c2/bn2/a2 (decoder) -> head."""
    layers = (
        LayerSpec("c1", "conv", 2, w1, kernel_size=3, prunable=True),
        LayerSpec("bn1", "batchnorm", w1, w1),
        LayerSpec("a1", "activation", w1, w1),
        LayerSpec("c2", "conv", w1, w2, partition="decoder", prunable=True),
        LayerSpec("bn2", "batchnorm", w2, w2, partition="decoder"),
        LayerSpec("a2", "activation", w2, w2, partition="decoder"),
        LayerSpec("head", "segmentation-head", w2, 2, partition="decoder", bias=True),
    )
    edges = (("input", "c1"), ("c1", "bn1"), ("bn1", "a1"), ("a1", "c2"), ("c2", "bn2"),
             ("bn2", "a2"), ("a2", "head"))
    return NetworkGraph(layers, edges, (2, 5, 5), {"seg": "head"})


def test_threshold_example_independent():
    gb, gd = [0.1, 0.2, 0.3, 0.4], [1, 2, 3, 4]
    assert compute_thresholds(gb, gd, 50, "independent") == (0.2, 2.0)
    cut_b, cut_d = pruned_indices(gb, gd, 50, "independent")
    assert cut_b.tolist() == [0, 1] and cut_d.tolist() == [0, 1]


def test_threshold_example_unified():
    gb, gd = [0.1, 0.2, 0.3, 0.4], [1, 2, 3, 4]
    assert compute_thresholds(gb, gd, 50, "unified") == (0.4, 0.4)
    cut_b, cut_d = pruned_indices(gb, gd, 50, "unified")
    assert cut_b.tolist() == [0, 1, 2, 3] and cut_d.tolist() == []


def test_threshold_empty_cut():
    tau1, tau2 = compute_thresholds([0.1, 0.2, 0.3], [1.0, 2.0], 10)
    assert tau1 == tau2 == float("-inf")
    cut_b, cut_d = pruned_indices([0.1, 0.2, 0.3], [1.0, 2.0], 10)
    assert cut_b.size == 0 and cut_d.size == 0


def test_threshold_errors():
    with pytest.raises(ValueError):
        compute_thresholds([], [1.0], 50)
    with pytest.raises(ValueError):
        compute_thresholds([1.0], [1.0], 100)
    with pytest.raises(ValueError):
        compute_thresholds([1.0], [1.0], 50, "global")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=30),
       st.lists(st.integers(-5, 5), min_size=1, max_size=30),
       st.floats(0.5, 99.5))
def test_cut_matches_sort_oracle_with_ties(gb, gd, p):
    gb = [v / 4 for v in gb]
    gd = [v / 4 for v in gd]
    cut_b, cut_d = pruned_indices(gb, gd, p, "independent")
    assert cut_b.tolist() == sort_oracle(gb, p)
    assert cut_d.tolist() == sort_oracle(gd, p)
    both = sort_oracle(gb + gd, p)
    ub, ud = pruned_indices(gb, gd, p, "unified")
    assert ub.tolist() == [i for i in both if i < len(gb)]
    assert ud.tolist() == [i - len(gb) for i in both if i >= len(gb)]


def test_all_equal_gamma_canonical_order(desk):
    net = GraphNet(desk)
    for m in net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.weight.data.fill_(0.5)
    gb = extract_scaling_factors(desk, net, "backbone")
    gd = extract_scaling_factors(desk, net, "decoder")
    plan = build_plan(desk, gb, gd, 50)
    assert plan.cut_backbone == 56 and plan.cut_decoder == 40
    # canonical order: the first 56 backbone channels are b1_c1 (8), b1_c2 (8),
    # b2_c1 (16), b2_c2 (16) and half of b3_c1
    assert plan.keep_masks["b3_c1_conv"] == (False,) * 8 + (True,) * 24
    assert all(v for v in plan.keep_masks["b3_c2_conv"])
    # fully cut layers keep their first channel
    for layer in ("b1_c1_conv", "b1_c2_conv", "b2_c1_conv", "b2_c2_conv"):
        assert plan.keep_masks[layer][0] and sum(plan.keep_masks[layer]) == 1


def test_plan_ratio_below_one(desk):
    net = randomize_bn(GraphNet(desk))
    plan = build_plan(desk, extract_scaling_factors(desk, net, "backbone"),
                      extract_scaling_factors(desk, net, "decoder"), 50)
    assert 0 < plan.predicted_params_ratio < 1
    assert 0 < plan.predicted_flops_ratio < 1


def test_plan_hand_mask():
    g = two_conv_graph()
    gb = ScalingVector((("c1", 0, 0.9), ("c1", 1, -0.05), ("c1", 2, 0.3), ("c1", 3, 0.2)), "backbone")
    gd = ScalingVector((("c2", 0, 0.01), ("c2", 1, 0.5), ("c2", 2, -0.4)), "decoder")
    plan = build_plan(g, gb, gd, 50)
    # backbone: floor(2) smallest |g| are 0.05 and 0.2; decoder: floor(1.5)=1 -> 0.01
    assert plan.keep_masks == {"c1": (True, False, True, False), "c2": (False, True, True)}
    assert plan.tau1 == 0.2 and plan.tau2 == 0.01


def test_plan_rejects_mismatched_vector():
    g = two_conv_graph()
    with pytest.raises(StructuralError):
        build_plan(g, vec([1, 2, 3], "c1"), vec([1, 2, 3], "c2", "decoder"), 50)


def test_plan_floor_keeps_largest():
    g = two_conv_graph()
    gb = vec([0.1, 0.2, 0.15, 0.05], "c1")
    gd = vec([5, 6, 7], "c2", "decoder")
    plan = build_plan(g, gb, gd, 50, "unified")
    # unified cut takes 3 of the 7 smallest: all in c1, one channel survives anyway
    assert plan.cut_backbone == 3
    assert plan.keep_masks["c1"] == (False, True, False, False)


def test_independent_mask_invariant_to_decoder_scale(desk):
    net = randomize_bn(GraphNet(desk), seed=4)
    gb = extract_scaling_factors(desk, net, "backbone")
    gd = extract_scaling_factors(desk, net, "decoder")
    base = build_plan(desk, gb, gd, 50, "independent")
    scaled = build_plan(desk, gb, gd.scaled(10.0), 50, "independent")
    back = [l.id for l in desk.prunable_layers("backbone")]
    assert all(base.keep_masks[l] == scaled.keep_masks[l] for l in back)
    shrunk = build_plan(desk, gb.scaled(0.01), gd, 50, "independent")
    dec = [l.id for l in desk.prunable_layers("decoder")]
    assert all(base.keep_masks[l] == shrunk.keep_masks[l] for l in dec)


def test_unified_mask_depends_on_decoder_scale():
    gb, gd = [0.3, 0.1, 0.5, 0.2], [0.25, 0.4, 0.15, 0.6]
    a, _ = pruned_indices(gb, gd, 50, "unified")
    b, _ = pruned_indices(gb, [10 * v for v in gd], 50, "unified")
    assert a.tolist() != b.tolist()


def test_plan_deterministic(desk):
    net = randomize_bn(GraphNet(desk), seed=9)
    gb = extract_scaling_factors(desk, net, "backbone")
    gd = extract_scaling_factors(desk, net, "decoder")
    texts = {build_plan(desk, gb, gd, 37.5, pol).to_text()
             for pol in ("independent",) for _ in range(3)}
    assert len(texts) == 1


def test_plan_text_round_trip(desk, tmp_path):
    net = randomize_bn(GraphNet(desk), seed=2)
    plan = build_plan(desk, extract_scaling_factors(desk, net, "backbone"),
                      extract_scaling_factors(desk, net, "decoder"), 25, "unified")
    plan.save(tmp_path / "plan.txt")
    again = PruningPlan.load(tmp_path / "plan.txt")
    assert again == plan
    assert "[masks]" in plan.to_text()
    assert plan.bitstrings()["b1_c1_conv"] in plan.to_text()


# surgery

def all_true(graph):
    return PruningPlan({l.id: (True,) * l.out_channels for l in graph.prunable_layers()},
                       0.0, 0.0, 1.0, "independent")


def test_identity_plan(desk):
    w = GraphNet(desk).state_dict()
    pg, pw = apply_plan(desk, w, all_true(desk))
    assert pg == desk
    assert pw.keys() == w.keys()
    assert all(torch.equal(pw[k], w[k]) for k in w)


def test_slicing_oracle():
    layers = (
        LayerSpec("c1", "conv", 3, 8, kernel_size=3, prunable=True),
        LayerSpec("bn1", "batchnorm", 8, 8),
        LayerSpec("c2", "conv", 8, 4, kernel_size=3, partition="decoder"),
    )
    g = NetworkGraph(layers, (("input", "c1"), ("c1", "bn1"), ("bn1", "c2")), (3, 6, 6),
                     {"seg": "c2"})
    torch.manual_seed(0)
    w = GraphNet(g).state_dict()
    mask = (True, False, True, True, False, True, False, True)
    plan = PruningPlan({"c1": mask}, 0.0, 0.0, 37.5, "independent")
    pg, pw = apply_plan(g, w, plan)
    assert (pg.layer("c1").in_channels, pg.layer("c1").out_channels) == (3, 5)
    assert (pg.layer("c2").in_channels, pg.layer("c2").out_channels) == (5, 4)
    keep = [0, 2, 3, 5, 7]
    for j, i in enumerate(keep):
        assert torch.equal(pw["c1.weight"][j], w["c1.weight"][i])
        assert torch.equal(pw["bn1.weight"][j], w["bn1.weight"][i])
        assert torch.equal(pw["c2.weight"][:, j], w["c2.weight"][:, i])


def test_concat_slicing(desk):
    net = randomize_bn(GraphNet(desk), seed=1)
    plan = build_plan(desk, extract_scaling_factors(desk, net, "backbone"),
                      extract_scaling_factors(desk, net, "decoder"), 50)
    pg, pw = apply_plan(desk, net.state_dict(), plan)
    widths = [sum(plan.keep_masks[f"aspp_{b}_conv"]) for b in ("b0", "b1", "b2", "gp")]
    assert pg.layer("aspp_cat").in_channels == sum(widths)
    assert pg.layer("aspp_proj_conv").in_channels == sum(widths)
    assert pw["aspp_proj_conv.weight"].shape[1] == sum(widths)


def test_surgery_sound_and_counted(desk):
    net = randomize_bn(GraphNet(desk), seed=3)
    plan = build_plan(desk, extract_scaling_factors(desk, net, "backbone"),
                      extract_scaling_factors(desk, net, "decoder"), 60, "unified")
    pg, pw = apply_plan(desk, net.state_dict(), plan)
    assert validate(pg) == []
    assert count_params(pg) == plan.predicted_params
    pruned_net = GraphNet(pg)
    pruned_net.load_state_dict(pw)
    assert sum(p.numel() for p in pruned_net.parameters()) == plan.predicted_params


def test_exact_zero_equivalence(desk):
    net = randomize_bn(GraphNet(desk), seed=5)
    plan = build_plan(desk, extract_scaling_factors(desk, net, "backbone"),
                      extract_scaling_factors(desk, net, "decoder"), 50)
    state = net.state_dict()
    for layer, mask in plan.keep_masks.items():
        bn = desk.scale_layer(layer).id
        dead = torch.tensor([not k for k in mask])
        state[f"{bn}.weight"][dead] = 0.0
        state[f"{bn}.bias"][dead] = 0.0
    net.load_state_dict(state)
    pg, pw = apply_plan(desk, state, plan)
    small = GraphNet(pg)
    small.load_state_dict(pw)
    net.eval(), small.eval()
    x = torch.randn(4, 3, 32, 32)
    with torch.no_grad():
        for head in ("seg", "cls"):
            a, b = net(x, head), small(x, head)
            assert float((a - b).norm() / a.norm()) < 1e-5


def test_apply_rejects_bad_plans(desk):
    w = GraphNet(desk).state_dict()
    plan = all_true(desk)
    bad = dict(plan.keep_masks)
    bad["b1_c3_conv"] = (True,) * 7 + (False,)
    with pytest.raises(StructuralError):
        apply_plan(desk, w, PruningPlan(bad, 0, 0, 1, "independent"))
    bad = dict(plan.keep_masks)
    bad["b1_c1_conv"] = (True,) * 3
    with pytest.raises(StructuralError):
        apply_plan(desk, w, PruningPlan(bad, 0, 0, 1, "independent"))
    bad = dict(plan.keep_masks)
    bad["b1_c1_conv"] = (False,) * 8
    with pytest.raises(StructuralError):
        apply_plan(desk, w, PruningPlan(bad, 0, 0, 1, "independent"))


# uniform baseline plan

def test_uniform_identity(desk):
    net = randomize_bn(GraphNet(desk))
    plan = uniform_plan(desk, extract_scaling_factors(desk, net, "backbone"),
                        extract_scaling_factors(desk, net, "decoder"), 1.0)
    assert all(all(m) for m in plan.keep_masks.values())
    assert plan.predicted_params == count_params(desk)


def test_uniform_ceiling(desk):
    net = randomize_bn(GraphNet(desk))
    plan = uniform_plan(desk, extract_scaling_factors(desk, net, "backbone"),
                        extract_scaling_factors(desk, net, "decoder"), 0.75)
    assert sum(plan.keep_masks["b1_c1_conv"]) == 6
    gamma = np.abs(net.b1_c1_bn.weight.detach().numpy())
    kept = [i for i, k in enumerate(plan.keep_masks["b1_c1_conv"]) if k]
    assert set(kept) == set(np.argsort(-gamma, kind="stable")[:6].tolist())


def test_uniform_rejects_bad_fraction(desk):
    net = GraphNet(desk)
    gb = extract_scaling_factors(desk, net, "backbone")
    gd = extract_scaling_factors(desk, net, "decoder")
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            uniform_plan(desk, gb, gd, bad)


def test_uniform_params_ratio_conv_chain():
    # c2 sits between two pruned layers, so its weight shrinks by keep^2
    layers = (
        LayerSpec("c1", "conv", 4, 16, kernel_size=3, prunable=True),
        LayerSpec("bn1", "batchnorm", 16, 16),
        LayerSpec("c2", "conv", 16, 16, kernel_size=3, prunable=True, partition="decoder"),
        LayerSpec("bn2", "batchnorm", 16, 16, partition="decoder"),
    )
    g = NetworkGraph(layers, (("input", "c1"), ("c1", "bn1"), ("bn1", "c2"), ("c2", "bn2")),
                     (4, 8, 8), {"seg": "bn2"})
    plan = uniform_plan(g, vec(range(1, 17), "c1"), vec(range(1, 17), "c2", "decoder"), 0.5)
    pg, _ = apply_plan(g, GraphNet(g).state_dict(), plan)
    c2 = pg.layer("c2")
    assert c2.in_channels * c2.out_channels * 9 == pytest.approx(0.25 * 16 * 16 * 9)
