"""Command-line entry point: ``autorig {synth,pgse,train,rig,eval,deform}``.

Exit codes: 0 success, 1 computation failure, 2 bad input or flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAILURE, EXIT_BAD_INPUT = 0, 1, 2


class BadInput(Exception):
    pass


def _print_config(command: str, resolved: dict) -> None:
    print(f"config {command} " + json.dumps(resolved, sort_keys=True))


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _load(what: str, fn, *args):
    """Run an input loader, turning any failure into a ``BadInput``."""
    try:
        return fn(*args)
    except FileNotFoundError as exc:
        raise BadInput(f"{what}: file not found: {exc.filename}") from None
    except (ValueError, OSError, KeyError) as exc:
        raise BadInput(f"{what}: {exc}") from None


def _inputs(args):
    from .geometry import load_camera, load_obj
    from .pgse import load_joints2d

    mesh = _load("mesh", load_obj, args.mesh)
    camera = _load("camera", load_camera, args.camera)
    j2d = _load("joints2d", load_joints2d, args.joints2d)
    return mesh, camera, j2d


def cmd_synth(args) -> int:
    from .synthetic import generate_dataset, parse_ratio_distribution, save_dataset

    _print_config("synth", {"count": args.count, "ratio_dist": args.ratio_dist, "seed": args.seed,
                            "noise_sigma": args.noise_sigma, "out": args.out})
    if args.count < 10:
        raise BadInput(f"--count must be at least 10, got {args.count}")
    _load("--ratio-dist", parse_ratio_distribution, args.ratio_dist)
    overrides = {} if args.noise_sigma is None else {"noise_sigma": args.noise_sigma}
    dataset = generate_dataset(args.count, args.ratio_dist, args.seed, **overrides)
    save_dataset(dataset, args.out)
    sizes = " ".join(f"{k}={len(v)}" for k, v in dataset.splits.items())
    print(f"synth wrote {len(dataset.samples)} samples to {args.out} ({sizes})")
    return EXIT_OK


def cmd_pgse(args) -> int:
    from .pgse import estimate_coarse_skeleton
    from .skeleton import JOINT_BOX, Rig, mixamo_topology, save_rig

    _print_config("pgse", _args_dict(args))
    mesh, camera, j2d = _inputs(args)
    coarse = estimate_coarse_skeleton(mesh, camera, j2d)
    topo = mixamo_topology()
    for name, prov in zip(topo.joint_names, coarse.provenance):
        print(f"joint {name} {prov.value}")
    save_rig(Rig(topo, np.clip(coarse.positions, -JOINT_BOX, JOINT_BOX)), args.out)
    counts = {p.value: sum(q is p for q in coarse.provenance) for p in dict.fromkeys(coarse.provenance)}
    print(f"pgse wrote {args.out} " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import load_config, train

    config = _load("config", load_config, args.config)
    if args.seed is not None:
        config.seed = args.seed
    _print_config("train", config.to_dict())
    if not (Path(config.dataset) / "split.txt").exists():
        raise BadInput(f"dataset {config.dataset!r} has no split.txt")
    final, log = train(config, resume=args.resume)
    last = log.rows[-1]
    print(f"train wrote {final} epochs={len(log.rows)} loss_total={last['loss_total']!r}")
    return EXIT_OK


def cmd_rig(args) -> int:
    from .model.network import load_model
    from .skeleton import save_rig
    from .training import rig_mesh

    _print_config("rig", _args_dict(args))
    model, _ = _load("checkpoint", load_model, args.checkpoint)
    mesh, camera, j2d = _inputs(args)
    rig, coarse = rig_mesh(model, mesh, camera, j2d)
    save_rig(rig, args.out)
    n_fallback = sum(p.value == "fallback" for p in coarse.provenance)
    print(f"rig wrote {args.out} joints={rig.topology.n_joints} vertices={mesh.n_vertices} fallback={n_fallback}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import report_table
    from .training import evaluate_split

    _print_config("eval", _args_dict(args))
    if not args.oracle and args.checkpoint is None:
        raise BadInput("--checkpoint is required unless --oracle is given")
    if not (Path(args.dataset) / "split.txt").exists():
        raise BadInput(f"dataset {args.dataset!r} has no split.txt")
    if args.checkpoint is not None and not Path(args.checkpoint).exists():
        raise BadInput(f"checkpoint not found: {args.checkpoint}")
    ids, reports, mean = evaluate_split(args.checkpoint, args.dataset, args.split, oracle=args.oracle,
                                        noise_sigma=args.noise_sigma, seed=args.seed)
    Path(args.out).write_text(report_table(ids, reports))
    Path(args.out).with_suffix(".json").write_text(mean.to_json() + "\n")
    print(f"eval wrote {args.out} split={args.split} n={len(ids)} " +
          " ".join(f"{k}={v!r}" for k, v in json.loads(mean.to_json()).items()))
    return EXIT_OK


def _load_pose(path):
    from .skeleton import N_JOINTS, Pose

    doc = json.loads(Path(path).read_text())
    rot = np.asarray(doc["pose"] if isinstance(doc, dict) else doc, dtype=np.float64)
    if rot.shape != (N_JOINTS, 3):
        raise ValueError(f"pose must hold {N_JOINTS} axis-angle triples, got shape {rot.shape}")
    return Pose(rot)


def cmd_deform(args) -> int:
    from .geometry import TriMesh, load_obj, save_obj
    from .skeleton import linear_blend_skinning, load_rig

    _print_config("deform", _args_dict(args))
    mesh = _load("mesh", load_obj, args.mesh)
    rig = _load("rig", load_rig, args.rig)
    pose = _load("pose", _load_pose, args.pose)
    if rig.skinning is None:
        raise BadInput("rig has no skinning weights")
    if rig.skinning.shape[0] != mesh.n_vertices:
        raise BadInput(f"rig skinning has {rig.skinning.shape[0]} rows, mesh has {mesh.n_vertices} vertices")
    out = linear_blend_skinning(mesh.vertices, rig, rig.skinning, pose)
    save_obj(TriMesh(out, mesh.faces), args.out)
    print(f"deform wrote {args.out} vertices={mesh.n_vertices}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_BAD_INPUT)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autorig", description="Humanoid auto-rigging from a mesh and 2D joints.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic rigged dataset")
    s.add_argument("--count", type=int, required=True, help="number of characters (>= 10)")
    s.add_argument("--ratio-dist", default="uniform", help="'uniform' over [2, 9] or 'point:R'")
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--noise-sigma", type=float, default=None, help="2D joint noise in pixels (default 1%% of width)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pgse", help="coarse skeleton from mesh, camera and 2D joints")
    s.add_argument("--mesh", required=True, help="OBJ mesh (normalized)")
    s.add_argument("--camera", required=True, help="camera JSON")
    s.add_argument("--joints2d", required=True, help="2D joints JSON")
    s.add_argument("--out", required=True, help="output rig file (joints only)")
    s.set_defaults(func=cmd_pgse)

    s = sub.add_parser("train", help="train the rigging network")
    s.add_argument("--config", required=True, help="train config JSON")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rig", help="predict a full rig for one mesh")
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--mesh", required=True, help="OBJ mesh (normalized)")
    s.add_argument("--camera", required=True, help="camera JSON")
    s.add_argument("--joints2d", required=True, help="2D joints JSON")
    s.add_argument("--out", required=True, help="output rig file")
    s.set_defaults(func=cmd_rig)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    s.add_argument("--checkpoint", default=None, help="trained checkpoint")
    s.add_argument("--dataset", required=True, help="dataset directory")
    s.add_argument("--split", choices=["train", "val", "test"], default="test", help="split to score")
    s.add_argument("--out", required=True, help="output CSV report (a .json mean is written alongside)")
    s.add_argument("--oracle", action="store_true", help="score the GT rig against itself (no network)")
    s.add_argument("--noise-sigma", type=float, default=None, help="re-synthesize 2D joints with this noise")
    s.add_argument("--seed", type=int, default=0, help="seed for noise and deformation poses")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("deform", help="pose a rigged mesh with linear blend skinning")
    s.add_argument("--mesh", required=True, help="OBJ mesh")
    s.add_argument("--rig", required=True, help="rig file with skinning")
    s.add_argument("--pose", required=True, help="JSON list of 22 axis-angle triples")
    s.add_argument("--out", required=True, help="output OBJ")
    s.set_defaults(func=cmd_deform)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BadInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # noqa: BLE001 - any computation failure maps to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
