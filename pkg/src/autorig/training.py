"""Two-stage training: cached coarse skeletons, then the network under AdamW + step decay."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import AdamW, backward, multistep_lr, no_grad
from .evaluation import EvalReport, evaluate_rig
from .geometry import CameraModel, TriMesh
from .model.losses import loss_skeleton, loss_skinning, loss_skinning_forward
from .model.network import NetworkConfig, NetworkInput, RiggingNetwork, load_model, prepare_input, save_model
from .pgse import CoarseSkeleton, Provenance, estimate_coarse_skeleton, synthesize_j2d
from .skeleton import JOINT_BOX, Rig, SkinningMatrix, mixamo_topology
from .synthetic import RiggedSample, load_dataset, load_splits

OBJECTIVES = ("symmetric", "reverse")
_OPT_PREFIX = "optim."


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    epochs: int = 300
    base_lr: float = 1e-3
    milestones: list[int] = field(default_factory=lambda: [50])
    gamma: float = 0.5
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 0
    # None keeps the joints2d stored with each sample; a number re-synthesizes them
    noise_sigma: float | None = None
    checkpoint_every: int = 0  # 0: only best and final
    val_every: int = 10
    # "symmetric" adds KL(G||P) to the reported loss; "reverse" trains on the reported loss alone
    skinning_objective: str = "symmetric"
    skeleton_weight: float = 1.0  # scales the joint term of the training objective only
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        self.milestones = [int(m) for m in self.milestones]
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.skinning_objective not in OBJECTIVES:
            raise ValueError(f"skinning_objective must be one of {OBJECTIVES}")
        if self.milestones != sorted(self.milestones):
            raise ValueError("milestones must be ascending")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path: str | Path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: {exc}") from None
    return TrainConfig.from_dict(doc)


LOG_COLUMNS = ["epoch", "lr", "loss_total", "loss_skeleton", "loss_skinning",
               "val_loss_total"] + [f"val_{f.name}" for f in fields(EvalReport)]


@dataclass
class TrainLog:
    """One row per completed epoch; validation columns are blank between validations.

    Wall time lives in ``wall_time`` and is written to a separate file, so the
    main log is reproducible byte for byte.
    """

    rows: list[dict] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def append(self, row: dict, seconds: float) -> None:
        self.rows.append(row)
        self.wall_time.append(seconds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.rows:
            w.writerow(["" if row.get(c) is None else repr(row[c]) for c in LOG_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        log = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            row = {c: (None if rec[c] == "" else float(rec[c])) for c in LOG_COLUMNS}
            row["epoch"] = int(row["epoch"])
            log.rows.append(row)
            log.wall_time.append(float("nan"))
        return log

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.rows])


@dataclass
class PreparedSample:
    sample_id: str
    sample: RiggedSample
    coarse: CoarseSkeleton
    inp: NetworkInput


def _sample_j2d(sample: RiggedSample, index: int, noise_sigma: float | None, seed: int) -> np.ndarray:
    if noise_sigma is None:
        return sample.joints2d
    return synthesize_j2d(sample.camera, sample.gt_rig.joints, noise_sigma, [seed, index])


def coarse_skeletons(samples: list[RiggedSample], ids: list[str], cache_dir: str | Path | None,
                     noise_sigma: float | None = None, seed: int = 0) -> list[CoarseSkeleton]:
    """Stage one: PGSE per sample, read from / written to ``cache_dir`` when given."""
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    tag = "stored" if noise_sigma is None else f"sigma{noise_sigma!r}-seed{seed}"
    out = []
    for index, (sid, sample) in enumerate(zip(ids, samples)):
        path = cache / f"{sid}.{tag}.json" if cache is not None else None
        if path is not None and path.exists():
            doc = json.loads(path.read_text())
            out.append(CoarseSkeleton(np.asarray(doc["positions"], dtype=np.float64),
                                      tuple(Provenance(p) for p in doc["provenance"])))
            continue
        j2d = _sample_j2d(sample, int(sid) if sid.isdigit() else index, noise_sigma, seed)
        coarse = estimate_coarse_skeleton(sample.mesh, sample.camera, j2d)
        if path is not None:
            doc = {"positions": coarse.positions.tolist(), "provenance": [p.value for p in coarse.provenance]}
            path.write_text(json.dumps(doc) + "\n")
        out.append(coarse)
    return out


def _training_loss(model: RiggingNetwork, item: PreparedSample, objective: str, skeleton_weight: float = 1.0):
    pred = model(item.inp)
    gt = item.sample.gt_rig
    l_skel = loss_skeleton(pred.joints, gt.joints)
    l_skin = loss_skinning(pred.skinning, gt.skinning.weights, pred.log_skinning)
    obj = (l_skel * skeleton_weight if skeleton_weight != 1.0 else l_skel) + l_skin
    if objective == "symmetric":
        obj = obj + loss_skinning_forward(pred.log_skinning, gt.skinning.weights)
    return obj, l_skel.item(), l_skin.item()


def _prediction_to_rig(joints: np.ndarray, skinning: np.ndarray) -> Rig:
    w = skinning / skinning.sum(axis=1, keepdims=True)
    return Rig(mixamo_topology(), np.clip(joints, -JOINT_BOX, JOINT_BOX), SkinningMatrix(w))


def predict(model: RiggingNetwork, vertices: np.ndarray, coarse: np.ndarray, inp: NetworkInput | None = None) -> Rig:
    """Frozen forward pass returning a complete rig."""
    if inp is None:
        inp = prepare_input(vertices, coarse, model.config)
    with no_grad():
        pred = model(inp)
    return _prediction_to_rig(pred.joints.data, pred.skinning.data)


def rig_mesh(model: RiggingNetwork, mesh: TriMesh, camera: CameraModel, j2d) -> tuple[Rig, CoarseSkeleton]:
    """Full inference: PGSE, then the network."""
    coarse = estimate_coarse_skeleton(mesh, camera, j2d, model.config.n_joints)
    return predict(model, mesh.vertices, coarse.positions), coarse


def _validate(model: RiggingNetwork, items: list[PreparedSample], seed: int) -> tuple[float, EvalReport]:
    losses, reports = [], []
    with no_grad():
        for item in items:
            pred = model(item.inp)
            gt = item.sample.gt_rig
            total = loss_skeleton(pred.joints, gt.joints) + loss_skinning(
                pred.skinning, gt.skinning.weights, pred.log_skinning)
            losses.append(total.item())
            rig = _prediction_to_rig(pred.joints.data, pred.skinning.data)
            reports.append(evaluate_rig(item.sample.mesh.vertices, rig, gt, seed=seed))
    return float(np.mean(losses)), EvalReport.mean(reports)


def _optimizer_tensors(opt: AdamW, model: RiggingNetwork, epoch: int, best: float) -> dict[str, np.ndarray]:
    names = [n for n, _ in model.named_parameters()]
    out = {
        _OPT_PREFIX + "step": np.array([opt.state.step], dtype=np.float64),
        _OPT_PREFIX + "epoch": np.array([epoch], dtype=np.float64),
        _OPT_PREFIX + "best": np.array([best], dtype=np.float64),
    }
    for n, m, v in zip(names, opt.state.exp_avg, opt.state.exp_avg_sq):
        out[f"{_OPT_PREFIX}exp_avg.{n}"] = m
        out[f"{_OPT_PREFIX}exp_avg_sq.{n}"] = v
    return out


def _restore_optimizer(opt: AdamW, model: RiggingNetwork, extra: dict[str, np.ndarray]) -> tuple[int, float]:
    try:
        opt.state.step = int(extra[_OPT_PREFIX + "step"][0])
        names = [n for n, _ in model.named_parameters()]
        opt.state.exp_avg = [extra[f"{_OPT_PREFIX}exp_avg.{n}"].copy() for n in names]
        opt.state.exp_avg_sq = [extra[f"{_OPT_PREFIX}exp_avg_sq.{n}"].copy() for n in names]
        return int(extra[_OPT_PREFIX + "epoch"][0]), float(extra[_OPT_PREFIX + "best"][0])
    except KeyError as exc:
        raise TrainingError(f"checkpoint has no optimizer state ({exc.args[0]})") from None


def _prepare(dataset, ids: list[str], indices: list[int], config: TrainConfig, cache: Path) -> list[PreparedSample]:
    samples = [dataset.samples[i] for i in indices]
    sids = [ids[i] for i in indices]
    coarse = coarse_skeletons(samples, sids, cache, config.noise_sigma, config.seed)
    return [PreparedSample(sid, s, c, prepare_input(s.mesh.vertices, c.positions, config.network))
            for sid, s, c in zip(sids, samples, coarse)]


def _dataset_ids(root: Path) -> list[str]:
    return sorted({i for v in load_splits(root).values() for i in v})


def train(config: TrainConfig, resume: str | Path | None = None) -> tuple[Path, TrainLog]:
    """Run (or resume) training; returns the final checkpoint path and the log.

    Writes ``final.ckpt``, ``best.ckpt`` (lowest validation loss), optional
    periodic ``epoch_NNNN.ckpt``, ``train_log.csv``, ``timing.csv`` and the
    resolved ``config.json`` into ``config.out_dir``.
    """
    root = Path(config.dataset)
    if not (root / "split.txt").exists():
        raise TrainingError(f"{root}: not a dataset directory (no split.txt)")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    net_cfg = replace(config.network, seed=config.seed)
    config = replace(config, network=net_cfg)

    dataset = load_dataset(root)
    ids = _dataset_ids(root)
    train_idx = dataset.splits.get("train", [])
    val_idx = dataset.splits.get("val", [])
    if not train_idx:
        raise TrainingError("train split is empty")
    cache = out / "coarse"
    train_items = _prepare(dataset, ids, train_idx, config, cache)
    val_items = _prepare(dataset, ids, val_idx, config, cache)

    model = RiggingNetwork(net_cfg)
    opt = AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
    log = TrainLog()
    start, best = 0, float("inf")
    if resume is not None:
        loaded, extra = load_model(resume, net_cfg)
        model.load_state_dict(loaded.state_dict())
        start, best = _restore_optimizer(opt, model, extra)
        log_path = out / "train_log.csv"
        if log_path.exists():
            log = TrainLog.from_csv(log_path.read_text())
            log.rows, log.wall_time = log.rows[:start], log.wall_time[:start]

    t0 = time.perf_counter()
    for epoch in range(start, config.epochs):
        opt.lr = multistep_lr(epoch, config.base_lr, config.milestones, config.gamma)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_items))
        tot = skel = skin = 0.0
        for b in range(0, len(order), config.batch_size):
            batch = order[b:b + config.batch_size]
            for i in batch:
                item = train_items[i]
                try:
                    obj, l_skel, l_skin = _training_loss(model, item, config.skinning_objective,
                                                           config.skeleton_weight)
                    backward(obj * (1.0 / len(batch)))
                except FloatingPointError as exc:
                    raise TrainingError(f"non-finite loss on sample {item.sample_id}: {exc}") from None
                tot += l_skel + l_skin
                skel += l_skel
                skin += l_skin
            opt.step()
            opt.zero_grad()
        n = len(train_items)
        row = {"epoch": epoch, "lr": opt.lr, "loss_total": tot / n, "loss_skeleton": skel / n,
               "loss_skinning": skin / n}
        done = epoch + 1
        validate = val_items and (done == config.epochs or (config.val_every > 0 and done % config.val_every == 0))
        if validate:
            val_loss, report = _validate(model, val_items, config.seed)
            row["val_loss_total"] = val_loss
            row.update({f"val_{k}": v for k, v in asdict(report).items()})
            if val_loss < best:
                best = val_loss
                save_model(model, out / "best.ckpt", _optimizer_tensors(opt, model, done, best))
        log.append(row, time.perf_counter() - t0)
        if config.checkpoint_every > 0 and done % config.checkpoint_every == 0:
            save_model(model, out / f"epoch_{done:04d}.ckpt", _optimizer_tensors(opt, model, done, best))
        _write_logs(out, log)

    final = out / "final.ckpt"
    save_model(model, final, _optimizer_tensors(opt, model, config.epochs, best))
    if not val_items:
        save_model(model, out / "best.ckpt", _optimizer_tensors(opt, model, config.epochs, best))
    return final, log


def _write_logs(out: Path, log: TrainLog) -> None:
    (out / "train_log.csv").write_text(log.to_csv())
    lines = ["epoch,wall_time_s"] + [f"{r['epoch']},{t!r}" for r, t in zip(log.rows, log.wall_time)]
    (out / "timing.csv").write_text("\n".join(lines) + "\n")


def evaluate_split(checkpoint: str | Path | None, dataset_dir: str | Path, split: str = "test",
                   oracle: bool = False, noise_sigma: float | None = None, seed: int = 0,
                   cache_dir: str | Path | None = None) -> tuple[list[str], list[EvalReport], EvalReport]:
    """Per-sample and mean metrics for one split.

    ``oracle=True`` skips the network and scores the GT rig against itself.
    """
    root = Path(dataset_dir)
    dataset = load_dataset(root)
    ids = _dataset_ids(root)
    if split not in dataset.splits or not dataset.splits[split]:
        raise TrainingError(f"split '{split}' is empty or missing")
    indices = dataset.splits[split]
    samples = [dataset.samples[i] for i in indices]
    sids = [ids[i] for i in indices]
    reports = []
    if oracle:
        for s in samples:
            reports.append(evaluate_rig(s.mesh.vertices, s.gt_rig, s.gt_rig, seed=seed))
    else:
        if checkpoint is None:
            raise TrainingError("a checkpoint is required unless oracle mode is used")
        model, _ = load_model(checkpoint)
        coarse = coarse_skeletons(samples, sids, cache_dir, noise_sigma, seed)
        for s, c in zip(samples, coarse):
            rig = predict(model, s.mesh.vertices, c.positions)
            reports.append(evaluate_rig(s.mesh.vertices, rig, s.gt_rig, seed=seed))
    return sids, reports, EvalReport.mean(reports)
