"""End-to-end acceptance suite; prints one ``ACCEPTANCE <name>: PASS|FAIL`` line per criterion.

The training-based criteria (overfit, ablation, diversity) take tens of
minutes on one core.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest

from autorig.autodiff import Tensor, backward, mul, no_grad, sum_
from autorig.evaluation import (
    cd_b2b,
    cd_j2b,
    cd_j2j,
    deformation_error,
    skinning_l1,
    skinning_precision,
)
from autorig.geometry import back_project_ray, project_points
from autorig.model import NetworkConfig, RiggingNetwork, loss_total, prepare_input
from autorig.model.attention import CrossAttention
from autorig.model.encoders import MeshEncoder, PointTransformerBlock, SkeletonEncoder, TransitionDown, TransitionUp
from autorig.model.layers import MLP, LayerNorm, Linear
from autorig.model.pointcloud import build_levels
from autorig.pgse import Provenance, estimate_coarse_skeleton
from autorig.skeleton import Pose, linear_blend_skinning
from autorig.synthetic import CharacterSpec, generate_character, generate_dataset, save_dataset
from autorig.training import TrainConfig, coarse_skeletons, evaluate_split, train
from capsule_oracle import midpoint_bounds
from oracles import bone_samples, brute_chamfer, brute_j2b, brute_l1, brute_precision, central_difference, rel_err
from test_autodiff import PRIMITIVES
from test_evaluation import random_instance
from test_network import cloud, jitter_biases, randomize_heads, spot_gradcheck, targets

EPOCHS = 300
OVERFIT_NET = dict(channels=16, heads=2, k=8)
ABLATION_SEEDS = (0, 1, 2)
ABLATION_NET = dict(channels=16, heads=2, k=8)
DIVERSITY_BINS = (2.0, 3.5, 5.0, 7.0, 9.0)
DIVERSITY_PER_BIN = 10


@pytest.fixture
def announce(capsys):
    def say(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    return say


# --- gradient integrity --------------------------------------------------------------

def _layer_error(fn, inputs: list[np.ndarray], params, h: float = 1e-5) -> float:
    """Worst relative error over the input arrays and every parameter entry.

    Each tensor is scaled by its own largest gradient, floored at 1e-6 of the
    layer-wide largest so that exactly-invariant tensors (a key bias under
    softmax) compare FD noise against a meaningful scale.
    """
    ts = [Tensor(x, requires_grad=True) for x in inputs]
    for p in params:
        p.grad = None
    backward(fn(*ts))
    pairs = []
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [Tensor(xi if j == i else y) for j, y in enumerate(inputs)]
            with no_grad():
                return fn(*args).item()
        pairs.append((ts[i].grad, central_difference(f, x, h)))
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        orig = p.data.copy()

        def g(v, p=p):
            p.data = v
            with no_grad():
                return fn(*[Tensor(y) for y in inputs]).item()
        num = central_difference(g, orig, h)
        p.data = orig
        pairs.append((analytic, num))
    floor = 1e-6 * max(np.abs(a).max(initial=0.0) for a, _ in pairs)
    return max(float(np.abs(a - b).max(initial=0.0)) / max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0),
                                                           floor, 1e-300)
               for a, b in pairs)


def _weighted(layer_out_fn, out_shape, seed=0):
    w = np.random.default_rng(seed).normal(size=out_shape)
    return lambda *xs: sum_(mul(layer_out_fn(*xs), w))


def test_gradient_integrity(announce):
    t0 = time.perf_counter()
    errors = {}
    for name, (op, *shapes) in PRIMITIVES.items():
        rng = np.random.default_rng(len(name))
        xs = [rng.normal(size=s) for s in shapes]
        out = op(*[Tensor(x) for x in xs]).shape
        errors[f"op:{name}"] = _layer_error(_weighted(op, out), xs, [])

    rng = np.random.default_rng(0)
    pts = cloud(12, seed=3)
    lvl0 = build_levels(pts, (), 4)[0]
    levels = build_levels(cloud(24, seed=5), (0.5,), 4)
    layers = {
        "Linear": (Linear(rng, 3, 4), lambda m: m, [(5, 3)], (5, 4)),
        "MLP": (MLP(rng, [3, 6, 4]), lambda m: m, [(5, 3)], (5, 4)),
        "LayerNorm": (LayerNorm(6), lambda m: m, [(4, 6)], (4, 6)),
        "SkeletonEncoder": (SkeletonEncoder(rng, 6), lambda m: m, [(22, 3)], (22, 6)),
        "PointTransformerBlock": (PointTransformerBlock(rng, 6),
                                  lambda m: (lambda x: m(x, lvl0.neighbors, lvl0.rel)), [(12, 6)], (12, 6)),
        "TransitionDown": (TransitionDown(rng, 6), lambda m: (lambda x: m(x, levels[1])), [(24, 6)], (12, 6)),
        "TransitionUp": (TransitionUp(rng, 6), lambda m: (lambda c, s: m(c, s, levels[1])),
                         [(12, 6), (24, 6)], (24, 6)),
        "CrossAttention": (CrossAttention(rng, 6, 2), lambda m: m, [(5, 6), (8, 6)], (5, 6)),
        "MeshEncoder": (MeshEncoder(rng, 5, 6, 1), lambda m: (lambda x: m(x, levels)), [(24, 5)], (24, 6)),
    }
    for name, (module, call, in_shapes, out_shape) in layers.items():
        jitter_biases(module, 1)
        xs = [rng.normal(size=s) for s in in_shapes]
        errors[f"layer:{name}"] = _layer_error(_weighted(call(module), out_shape), xs, module.parameters())

    v = cloud(40, seed=7)
    coarse, joints, skin = targets(40, seed=7)
    cfg = NetworkConfig(channels=16, heads=2, depth=2, k=4, seed=1)
    model = RiggingNetwork(cfg)
    randomize_heads(model, 3)
    jitter_biases(model, 4)
    inp = prepare_input(v, coarse, cfg)

    def fn():
        p = model(inp)
        return loss_total(p.joints, p.skinning, joints, skin, p.log_skinning)

    e2e = spot_gradcheck(fn, model.parameters(), per_tensor=3, h=1e-6)
    elapsed = time.perf_counter() - t0
    worst_layer = max(errors.values())
    ok = worst_layer < 1e-4 and e2e < 1e-3 and elapsed < 60
    announce("gradient-integrity", ok,
             f"worst per-op/layer {worst_layer:.2e} ({max(errors, key=errors.get)}), end-to-end {e2e:.2e}, "
             f"{elapsed:.1f}s")
    assert ok, errors


# --- geometric oracles ---------------------------------------------------------------

def test_geometric_oracles(announce):
    rng = np.random.default_rng(20)
    samples = [generate_character(CharacterSpec.sample(rng, rng.uniform(2, 9), noise_sigma=0.0)) for _ in range(20)]
    t0 = time.perf_counter()
    coarse = [estimate_coarse_skeleton(s.mesh, s.camera, s.joints2d) for s in samples]
    pgse_time = time.perf_counter() - t0
    worst_px = worst_line = 0.0
    violations = 0
    for s, c in zip(samples, coarse):
        for q, gt_joint in zip(s.joints2d, s.gt_rig.joints):
            ray = back_project_ray(s.camera, q)
            mu = float((gt_joint - ray.origin) @ ray.direction)
            worst_px = max(worst_px, float(np.abs(project_points(s.camera, [ray.point(mu)])[0] - q).max()))
        for q, p, prov in zip(s.joints2d, c.positions, c.provenance):
            if prov is Provenance.MIDPOINT:
                worst_line = max(worst_line, back_project_ray(s.camera, q).distance_to(p))
        err = np.linalg.norm(c.positions - s.gt_rig.joints, axis=1)
        violations += int(np.sum(err > midpoint_bounds(s, s.joints2d)))
    ok = worst_px < 1e-6 and worst_line < 1e-9 and violations == 0 and pgse_time < 10
    announce("geometric-oracles", ok, f"round trip {worst_px:.1e}px, line distance {worst_line:.1e}, "
                                      f"bound violations {violations}/440, PGSE {pgse_time:.1f}s for 20 samples")
    assert ok


# --- deformation identity ------------------------------------------------------------

def test_deformation_identity(announce):
    rng = np.random.default_rng(30)
    exact = zero = True
    for _ in range(5):
        s = generate_character(CharacterSpec.sample(rng, rng.uniform(2, 9)))
        v, rig = s.mesh.vertices, s.gt_rig
        exact &= bool(np.array_equal(linear_blend_skinning(v, rig, rig.skinning, Pose.identity()), v))
        zero &= deformation_error(v, rig, rig.skinning, pose_count=10, max_deg=10.0,
                                  seed=int(rng.integers(1000))) == 0.0
    ok = exact and zero
    announce("deformation-identity", ok, f"identity LBS exact={exact}, GT-vs-GT error zero={zero}")
    assert ok


# --- metric oracle equivalence -------------------------------------------------------

def test_metric_oracle_equivalence(announce):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(40)
    for _ in range(50):
        _, pred, gt = random_instance(rng)
        bones = gt.topology.bones
        pw, gw = pred.skinning.weights, gt.skinning.weights
        pairs = [
            (cd_j2j(pred, gt), brute_chamfer(pred.joints, gt.joints)),
            (cd_j2b(pred, gt), brute_j2b(pred.joints, gt.joints, bones)),
            (cd_b2b(pred, gt), brute_chamfer(bone_samples(pred.joints, bones, 16), bone_samples(gt.joints, bones, 16))),
            (skinning_precision(pw, gw), brute_precision(pw, gw, 1e-4)),
            (skinning_l1(pw, gw), brute_l1(pw, gw)),
        ]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 30
    announce("metric-oracle-equivalence", ok, f"max |fast - brute| {worst:.1e} over 50 instances, {elapsed:.1f}s")
    assert ok


# --- overfit -----------------------------------------------------------------------------

def test_overfit_regression(announce, tmp_path):
    root = tmp_path / "data"
    save_dataset(generate_dataset(10, "uniform", seed=0), root)
    cfg = TrainConfig(dataset=str(root), out_dir=str(tmp_path / "run"), epochs=EPOCHS, batch_size=1, val_every=100,
                      network=NetworkConfig(**OVERFIT_NET))
    t0 = time.perf_counter()
    final, _ = train(cfg)
    ids, _, mean = evaluate_split(final, root, "train")
    elapsed = time.perf_counter() - t0
    ok = len(ids) == 8 and mean.cd_j2j < 0.01 and mean.l1 < 0.15 and elapsed < 15 * 60
    announce("overfit-regression", ok, f"train cd_j2j {mean.cd_j2j:.4f} (<0.01), L1 {mean.l1:.4f} (<0.15), "
                                       f"{elapsed:.0f}s")
    assert ok


# --- ablation trend ---------------------------------------------------------------------

def _coarse_cd(root: Path, split: str) -> float:
    from autorig.synthetic import load_dataset, load_splits

    ds = load_dataset(root)
    ids = load_splits(root)[split]
    samples = ds.split(split)
    coarse = coarse_skeletons(samples, ids, None, None, 0)
    return float(np.mean([cd_j2j(c.positions, s.gt_rig.joints) for c, s in zip(coarse, samples)]))


def test_ablation_trend(announce, tmp_path):
    root = tmp_path / "data"
    save_dataset(generate_dataset(100, "uniform", seed=0), root)
    t0 = time.perf_counter()
    coarse_cd = _coarse_cd(root, "test")
    skel_wins = skin_wins = 0
    rows = []
    for seed in ABLATION_SEEDS:
        full_cfg = TrainConfig(dataset=str(root), out_dir=str(tmp_path / f"full{seed}"), seed=seed, epochs=EPOCHS,
                               val_every=50,
                               network=NetworkConfig(**ABLATION_NET))
        expert_cfg = TrainConfig(dataset=str(root), out_dir=str(tmp_path / f"expert{seed}"), seed=seed,
                                 epochs=EPOCHS, val_every=50,
                                 network=NetworkConfig(**ABLATION_NET, use_msman=False))
        full = evaluate_split(train(full_cfg)[0], root, "test")[2]
        expert = evaluate_split(train(expert_cfg)[0], root, "test")[2]
        skel_wins += full.cd_j2j <= coarse_cd
        skin_wins += full.l1 <= expert.l1
        rows.append(f"seed {seed}: cd {full.cd_j2j:.4f} vs coarse {coarse_cd:.4f}, L1 {full.l1:.4f} vs expert "
                    f"{expert.l1:.4f}")
    elapsed = time.perf_counter() - t0
    ok = skel_wins >= 2 and skin_wins >= 2 and elapsed < 2 * 3600
    announce("ablation-trend", ok, f"skeleton {skel_wins}/3, skinning {skin_wins}/3, {elapsed / 60:.0f} min; "
                                   + "; ".join(rows))
    assert ok


# --- diversity trend --------------------------------------------------------------------

def _bin_metrics(checkpoint: Path, bins: dict[float, Path]) -> dict[float, float]:
    return {r: evaluate_split(checkpoint, root, "test")[2].l1 for r, root in bins.items()}


def test_diversity_trend(announce, tmp_path):
    t0 = time.perf_counter()
    bins = {}
    for n, ratio in enumerate(DIVERSITY_BINS):
        root = tmp_path / f"bin{ratio}"
        save_dataset(generate_dataset(DIVERSITY_PER_BIN, f"point:{ratio}", seed=1000 + n), root)
        ids = " ".join(f"{i:04d}" for i in range(DIVERSITY_PER_BIN))
        (root / "split.txt").write_text(f"test {ids}\n")
        bins[ratio] = root
    metrics = {}
    for name, dist in (("ratio5", "point:5"), ("uniform", "uniform")):
        root = tmp_path / f"train_{name}"
        save_dataset(generate_dataset(100, dist, seed=7), root)
        cfg = TrainConfig(dataset=str(root), out_dir=str(tmp_path / f"run_{name}"), epochs=EPOCHS, val_every=50,
                          network=NetworkConfig(**ABLATION_NET))
        metrics[name] = _bin_metrics(train(cfg)[0], bins)
    elapsed = time.perf_counter() - t0
    r5 = metrics["ratio5"]
    left = [r5[r] for r in DIVERSITY_BINS if r <= 5.0][::-1]  # 5 -> 2
    right = [r5[r] for r in DIVERSITY_BINS if r >= 5.0]  # 5 -> 9

    def rising(seq):
        # trend, not strict monotonicity: endpoint above the center and a positive fitted slope
        return seq[-1] > seq[0] and np.polyfit(np.arange(len(seq)), seq, 1)[0] > 0

    spread = {k: max(m.values()) - min(m.values()) for k, m in metrics.items()}
    ok = rising(left) and rising(right) and spread["uniform"] < spread["ratio5"] and elapsed < 2 * 3600
    fmt = lambda m: " ".join(f"{r:g}:{v:.3f}" for r, v in m.items())  # noqa: E731
    announce("diversity-trend", ok, f"skinning L1 by test ratio; ratio-5 model [{fmt(r5)}], uniform model "
                                    f"[{fmt(metrics['uniform'])}], spread {spread['ratio5']:.3f} vs "
                                    f"{spread['uniform']:.3f}, {elapsed / 60:.0f} min")
    assert ok


# --- determinism ------------------------------------------------------------------------

def _pipeline(out: Path) -> None:
    from autorig.cli import main

    assert main(["synth", "--count", "10", "--seed", "9", "--out", str(out / "data")]) == 0
    cfg = TrainConfig(dataset=str(out / "data"), out_dir=str(out / "run"), epochs=4, batch_size=4, val_every=2,
                      network=NetworkConfig(channels=8, heads=2, k=4))
    (out / "cfg.json").write_text(cfg.to_json())
    assert main(["train", "--config", str(out / "cfg.json")]) == 0
    assert main(["eval", "--checkpoint", str(out / "run" / "final.ckpt"), "--dataset", str(out / "data"),
                 "--split", "test", "--out", str(out / "report.csv")]) == 0


def test_determinism(announce, tmp_path, capsys):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    capsys.readouterr()
    a_files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b_files = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    # paths inside config.json differ by design; compare it with the root prefix removed
    differ = []
    for rel in a_files:
        if rel.name == "timing.csv":
            continue  # wall-clock times, kept out of the reproducible log on purpose
        x = (tmp_path / "a" / rel).read_bytes().replace(str(tmp_path / "a").encode(), b"ROOT")
        y = (tmp_path / "b" / rel).read_bytes().replace(str(tmp_path / "b").encode(), b"ROOT")
        if x != y:
            differ.append(str(rel))
    ok = a_files == b_files and not differ
    n_ckpt = sum(p.suffix == ".ckpt" for p in a_files)
    announce("determinism", ok, f"{len(a_files)} files compared ({n_ckpt} checkpoints), differing: {differ or 'none'}")
    assert ok
