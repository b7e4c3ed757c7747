from __future__ import annotations

import numpy as np
import pytest

from autorig.autodiff import AdamW, Tensor, backward, mul, no_grad, sum_
from autorig.model import NetworkConfig, RiggingNetwork, load_model, loss_total, prepare_input, save_model
from autorig.model.attention import CrossAttention
from autorig.model.encoders import MeshEncoder, PointTransformerBlock, SkeletonEncoder
from autorig.model.pointcloud import build_levels, farthest_point_sample, knn
from autorig.skeleton import mixamo_topology
from oracles import central_difference, point_segment_dist, rel_err

SMALL = NetworkConfig(channels=16, heads=2, depth=2, k=4, seed=1)


def cloud(m: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(m, 3))
    return 0.4 * p / np.linalg.norm(p, axis=1, keepdims=True) * rng.uniform(0.5, 1.0, size=(m, 1))


def targets(m: int, seed: int = 0):
    rng = np.random.default_rng(seed + 100)
    joints = rng.uniform(-0.4, 0.4, size=(22, 3))
    coarse = joints + rng.normal(scale=0.02, size=(22, 3))
    skin = np.eye(22)[rng.integers(0, 22, size=m)]
    return coarse, joints, skin


def randomize_heads(model: RiggingNetwork, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if "head" in name:
            p.data = rng.normal(scale=0.2, size=p.shape)


def jitter_biases(module, seed: int = 0) -> None:
    """Zero biases put ReLUs exactly on their kink for zero inputs; move them off it."""
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data = rng.normal(scale=0.1, size=p.shape)


def spot_gradcheck(fn, params, per_tensor: int = 2, h: float = 1e-5, seed: int = 0) -> float:
    """Backprop vs central differences on a few random entries of every tensor.

    Errors are relative to the larger of the two values, floored at 1e-6 of the
    largest gradient entry overall: some entries are exactly zero (a bias in
    front of a softmax over the axis it is constant on) and there the ratio is
    pure rounding noise.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    backward(fn())
    floor = 1e-6 * max(np.abs(p.grad).max() for p in params if p.grad is not None)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        analytic = np.zeros(len(idx)) if p.grad is None else p.grad.reshape(-1)[idx]
        num = np.empty(len(idx))
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                num[n] = (fp - fm) / (2 * h)
        scale = max(np.abs(analytic).max(), np.abs(num).max(), floor)
        worst = max(worst, float(np.abs(analytic - num).max() / scale))
    return worst


# --- shapes and basic contracts -------------------------------------------------

def test_output_shapes_and_row_stochastic():
    v = cloud(120)
    coarse, _, _ = targets(120)
    cfg = NetworkConfig(channels=16, heads=4, k=8, seed=0)
    model = RiggingNetwork(cfg)
    randomize_heads(model)
    pred = model(prepare_input(v, coarse, cfg))
    assert pred.joints.shape == (22, 3)
    assert pred.skinning.shape == (120, 22)
    assert np.abs(pred.skinning.data.sum(axis=1) - 1).max() < 1e-9
    assert np.all(pred.skinning.data > 0)


def test_zero_init_returns_coarse_skeleton():
    v = cloud(100)
    coarse, _, _ = targets(100)
    cfg = NetworkConfig(channels=16, heads=2, depth=2, k=4, seed=1, skin_prior_falloff=0.0)
    pred = RiggingNetwork(cfg)(prepare_input(v, coarse, cfg))
    assert np.array_equal(pred.joints.data, coarse)
    # zero logits and no prior -> uniform skinning
    assert np.allclose(pred.skinning.data, 1 / 22, atol=1e-15)


def test_zero_init_skinning_is_bone_distance_prior():
    v = cloud(60)
    coarse, _, _ = targets(60)
    pred = RiggingNetwork(SMALL)(prepare_input(v, coarse, SMALL))
    parents = mixamo_topology().parent
    want = np.empty((60, 22))
    for i, p in enumerate(v):
        row = [-50.0 if parents[j] < 0 else -(point_segment_dist(p, coarse[parents[j]], coarse[j]) / 0.05) ** 2
               for j in range(22)]
        row = np.maximum(np.array(row) - max(row), -50.0)
        want[i] = np.exp(row) / np.exp(row).sum()
    assert np.abs(pred.skinning.data - want).max() < 1e-12


def test_ablation_expert_passes_coarse_through():
    v = cloud(100)
    coarse, _, _ = targets(100)
    cfg = NetworkConfig(channels=16, heads=2, k=4, use_msman=False)
    model = RiggingNetwork(cfg)
    randomize_heads(model)
    pred = model(prepare_input(v, coarse, cfg))
    assert np.array_equal(pred.joints.data, coarse)
    assert not any(n.startswith("msman") for n, _ in model.named_parameters())


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(channels=10, heads=4)
    with pytest.raises(ValueError):
        NetworkConfig(depth=2, ratios=(0.5,))
    with pytest.raises(ValueError):
        NetworkConfig.from_dict({"channels": 16, "bogus": 1})


def test_too_few_vertices():
    cfg = NetworkConfig(k=16)
    with pytest.raises(ValueError, match="k=16"):
        prepare_input(cloud(10), targets(10)[0], cfg)


# --- encoders ----------------------------------------------------------------------

def test_skeleton_encoder_per_joint():
    enc = SkeletonEncoder(np.random.default_rng(0), 16)
    j = np.random.default_rng(1).normal(size=(22, 3))
    perm = np.random.default_rng(2).permutation(22)
    a = enc(Tensor(j)).data
    b = enc(Tensor(j[perm])).data
    assert a.shape == (22, 16)
    assert np.array_equal(a[perm], b)


def test_skeleton_encoder_gradient():
    enc = SkeletonEncoder(np.random.default_rng(0), 8)
    j = np.random.default_rng(1).normal(size=(22, 3))
    w = np.random.default_rng(2).normal(size=(22, 8))
    t = Tensor(j, requires_grad=True)
    backward(sum_(mul(enc(t), w)))
    num = central_difference(lambda x: float((enc(Tensor(x)).data * w).sum()), j)
    assert rel_err(t.grad, num) < 1e-4


def test_point_transformer_weights_sum_to_one():
    pts = cloud(30)
    lvl = build_levels(pts, (), 6)[0]
    block = PointTransformerBlock(np.random.default_rng(0), 8)
    block(Tensor(np.random.default_rng(1).normal(size=(30, 8))), lvl.neighbors, lvl.rel)
    assert np.abs(block._last_weights.sum(axis=1) - 1).max() < 1e-9


def test_point_transformer_k1_is_pointwise():
    pts = cloud(12)
    lvl = build_levels(pts, (), 1)[0]
    assert np.array_equal(lvl.neighbors[:, 0], np.arange(12))
    block = PointTransformerBlock(np.random.default_rng(0), 8)
    x = np.random.default_rng(1).normal(size=(12, 8))
    out = block(Tensor(x), lvl.neighbors, lvl.rel).data
    # only neighbour is self: weight 1, delta = pos_enc(0); each row depends on its own input only
    for i in range(12):
        row = block(Tensor(x[i:i + 1]), lvl.neighbors[i:i + 1] * 0, lvl.rel[i:i + 1]).data
        assert np.allclose(out[i], row[0], atol=1e-14)
    assert np.all(block._last_weights == 1.0)


def test_point_transformer_gradient():
    pts = cloud(12, seed=3)
    lvl = build_levels(pts, (), 4)[0]
    block = PointTransformerBlock(np.random.default_rng(0), 8)
    jitter_biases(block)
    x0 = np.random.default_rng(1).normal(size=(12, 8))
    w = np.random.default_rng(2).normal(size=(12, 8))
    x = Tensor(x0, requires_grad=True)
    backward(sum_(mul(block(x, lvl.neighbors, lvl.rel), w)))
    num = central_difference(lambda a: float((block(Tensor(a), lvl.neighbors, lvl.rel).data * w).sum()), x0)
    assert rel_err(x.grad, num) < 1e-4
    params = block.parameters()
    assert spot_gradcheck(lambda: sum_(mul(block(Tensor(x0), lvl.neighbors, lvl.rel), w)), params, 3) < 1e-4


def test_point_transformer_too_few_points():
    block = PointTransformerBlock(np.random.default_rng(0), 8)
    with pytest.raises(ValueError):
        block(Tensor(np.zeros((3, 8))), np.zeros((3, 4), dtype=np.int64), np.zeros((3, 4, 3)))


def test_mesh_encoder_shape_and_rotation_sensitivity():
    pts = cloud(80)
    feats = np.concatenate([pts, np.random.default_rng(0).normal(size=(80, 22))], axis=1)
    enc = MeshEncoder(np.random.default_rng(0), 25, 16, 2)
    out = enc(Tensor(feats), build_levels(pts, (0.25, 0.25), 8)).data
    assert out.shape == (80, 16)
    rot = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.float64)
    pr = pts @ rot.T
    f2 = feats.copy()
    f2[:, :3] = pr
    out2 = enc(Tensor(f2), build_levels(pr, (0.25, 0.25), 8)).data
    assert out2.shape == out.shape and not np.allclose(out, out2)


def test_permutation_equivariance():
    v = cloud(90, seed=4)
    coarse, _, _ = targets(90)
    cfg = NetworkConfig(channels=16, heads=2, k=6, seed=2)
    model = RiggingNetwork(cfg)
    randomize_heads(model)
    perm = np.random.default_rng(5).permutation(90)
    a = model(prepare_input(v, coarse, cfg))
    b = model(prepare_input(v[perm], coarse, cfg))
    inv = np.argsort(perm)
    assert np.allclose(b.skinning.data[inv], a.skinning.data, atol=1e-12)
    assert np.allclose(b.joints.data, a.joints.data, atol=1e-12)


def test_fps_and_knn():
    pts = cloud(50)
    sel = farthest_point_sample(pts, 10)
    assert len(set(sel.tolist())) == 10
    c = pts.mean(axis=0)
    assert sel[0] == np.argmax(((pts - c) ** 2).sum(axis=1))
    nb = knn(pts, pts, 5)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    brute = np.sort(d, axis=1)[:, :5]
    assert np.allclose(np.take_along_axis(d, nb, axis=1), brute, atol=0)


# --- attention ---------------------------------------------------------------------

def _np_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def test_single_head_matches_loop_oracle():
    rng = np.random.default_rng(0)
    att = CrossAttention(rng, 8, 1)
    q_in = rng.normal(size=(5, 8))
    kv_in = rng.normal(size=(7, 8))
    out = att(Tensor(q_in), Tensor(kv_in)).data

    def lin(layer, x):
        return x @ layer.weight.data + layer.bias.data

    qn = _np_layer_norm(q_in) * att.norm_q.gain.data + att.norm_q.bias.data
    kn = _np_layer_norm(kv_in) * att.norm_kv.gain.data + att.norm_kv.bias.data
    q, k, v = lin(att.q, qn), lin(att.k, kn), lin(att.v, kn)
    want = np.zeros((5, 8))
    for i in range(5):
        scores = [sum(q[i, t] * k[j, t] for t in range(8)) / np.sqrt(8) for j in range(7)]
        mx = max(scores)
        e = [np.exp(s - mx) for s in scores]
        z = sum(e)
        for t in range(8):
            want[i, t] = sum(e[j] / z * v[j, t] for j in range(7))
    want = q_in + lin(att.out, want)
    assert np.allclose(out, want, atol=1e-12)


def test_attention_rows_sum_to_one_both_directions():
    v = cloud(60)
    coarse, _, _ = targets(60)
    cfg = NetworkConfig(channels=16, heads=4, k=6)
    model = RiggingNetwork(cfg)
    model(prepare_input(v, coarse, cfg))
    a1 = model.msman.mesh_to_skeleton._last_attention
    a2 = model.msman.skeleton_to_mesh._last_attention
    assert a1.shape == (4, 22, 60) and a2.shape == (4, 60, 22)
    assert np.abs(a1.sum(-1) - 1).max() < 1e-9 and np.abs(a2.sum(-1) - 1).max() < 1e-9


# --- end to end -------------------------------------------------------------------

def test_end_to_end_gradient():
    v = cloud(40, seed=7)
    coarse, joints, skin = targets(40, seed=7)
    model = RiggingNetwork(SMALL)
    randomize_heads(model, 3)
    jitter_biases(model, 4)
    inp = prepare_input(v, coarse, SMALL)

    def fn():
        p = model(inp)
        return loss_total(p.joints, p.skinning, joints, skin, p.log_skinning)

    # h=1e-6: with h=1e-5 a few ReLU/max-pool switch points on this mesh fall inside the stencil
    assert spot_gradcheck(fn, model.parameters(), per_tensor=3, h=1e-6) < 1e-3


def test_ten_steps_strictly_decrease():
    v = cloud(60, seed=8)
    coarse, joints, skin = targets(60, seed=8)
    model = RiggingNetwork(SMALL)
    inp = prepare_input(v, coarse, SMALL)
    opt = AdamW(model.parameters(), lr=1e-3)
    losses = []
    for _ in range(11):
        p = model(inp)
        loss = loss_total(p.joints, p.skinning, joints, skin, p.log_skinning)
        losses.append(loss.item())
        backward(loss)
        opt.step()
        opt.zero_grad()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_forward_is_deterministic():
    v = cloud(70)
    coarse, _, _ = targets(70)
    outs = []
    for _ in range(2):
        model = RiggingNetwork(SMALL)
        randomize_heads(model)
        outs.append(model(prepare_input(v, coarse, SMALL)).skinning.data)
    assert np.array_equal(*outs)


def test_save_load_round_trip(tmp_path):
    model = RiggingNetwork(SMALL)
    randomize_heads(model)
    save_model(model, tmp_path / "m.ckpt", {"extra.x": np.arange(3.0)})
    back, extra = load_model(tmp_path / "m.ckpt")
    assert back.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    assert np.array_equal(extra["extra.x"], np.arange(3.0))


def test_load_mismatched_config_names_tensor(tmp_path):
    save_model(RiggingNetwork(SMALL), tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="tensor '"):
        load_model(tmp_path / "m.ckpt", NetworkConfig(channels=32, heads=2, k=4))

