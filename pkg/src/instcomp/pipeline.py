"""Training loop, whole-scene inference, evaluation and dataset orchestration."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .completion import MATCH_IOU, completion_loss, completion_target, match_predictions, proxy_loss
from .detection import (
    all_anchors,
    assign_anchor_targets,
    boxes_array,
    cluster_anchors,
    decode_box,
    detection_losses,
    encode_box,
    iou_matrix,
    nms,
    propose,
    scale_layouts,
)
from .eval import EvalRecord, Prediction, metrics_report
from .fusion import GridConfig, TsdfVolume, fuse_tsdf
from .network import Model, ModelConfig, box_lattice
from .scene_synth import SHAPES, Scene, SceneConfig, crop_chunk, generate_scene, load_scene, render_views, save_scene
from .tensor import Tensor

LOSS_NAMES = ("obj", "box", "cls", "compl", "proxy")


class PipelineError(Exception):
    """Failure with a short machine-readable category."""

    category = "error"


class ConfigError(PipelineError):
    category = "config"


class DataError(PipelineError):
    category = "data"


class NonFiniteLoss(PipelineError):
    category = "nonfinite_loss"


# ----------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    steps: int = 5000
    lr: float = 0.005
    lr_decay: float = 0.1
    decay_every: int = 2000
    momentum: float = 0.0
    grad_clip: float = 0.0  # global gradient norm cap; 0 disables
    rpn_batch: int = 64  # anchors sampled for the objectness loss
    roi_batch: int = 16  # classification RoIs per step
    roi_iou: float = 0.5  # proposals overlapping a gt this much train the class and refinement heads
    roi_jitter: bool = True  # fill the RoI batch with jittered gt boxes (IoU >= roi_iou)
    completion_rois: int = 4  # cap on mask-head evaluations per step
    gt_augment: bool = True
    chunk_sampling: str = "instances"
    max_views: int = 5
    fill_views: bool = False  # keep adding views after coverage saturates, up to max_views
    train_pre_nms: int = 256
    train_post_nms: int = 32
    seed: int = 0
    checkpoint_every: int = 1000
    n_scenes: int = 8
    views_per_scene: int = 12
    scenes_dir: str = ""

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.decay_every <= 0 or self.checkpoint_every <= 0:
            raise ConfigError("decay and checkpoint intervals must be positive")
        if self.steps < 0 or not 0 < self.lr_decay <= 1 or not 0 <= self.momentum < 1 or self.grad_clip < 0:
            raise ConfigError("invalid steps, lr_decay or momentum")
        if self.chunk_sampling not in ("uniform", "instances"):
            raise ConfigError(f"unknown chunk_sampling {self.chunk_sampling!r}")
        if not 0 < self.roi_iou <= 1:
            raise ConfigError(f"roi_iou must lie in (0, 1], got {self.roi_iou}")

    @classmethod
    def full_schedule(cls, **kw) -> "TrainConfig":
        base = dict(steps=200_000, decay_every=100_000, checkpoint_every=10_000)
        base.update(kw)
        return cls(**base)

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_decay ** (step // self.decay_every)


@dataclass
class InferConfig:
    max_views: int = 24
    pre_nms: int = 512
    post_nms: int = 64
    rpn_iou: float = 0.5
    final_iou: float = 0.3
    class_agnostic: bool = False  # final NMS across classes instead of per class
    score_threshold: float = 0.05
    mask_threshold: float = 0.5
    max_detections: int = 32
    mask_rescore: bool = False  # scale scores by the mean certainty max(p, 1-p) of the predicted mask


@dataclass
class Experiment:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    scene: SceneConfig = field(default_factory=SceneConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def to_dict(self) -> dict:
        return {"train": asdict(self.train), "model": self.model.to_dict(), "scene": asdict(self.scene),
                "infer": asdict(self.infer)}

    @classmethod
    def from_dict(cls, d: dict) -> "Experiment":
        known = {"train", "model", "scene", "infer"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        model = dict(d.get("model", {}))
        preset = model.pop("preset", "tiny")
        if preset not in ("tiny", "full"):
            raise ConfigError(f"unknown model preset {preset!r}")
        try:
            mcfg = (ModelConfig.full if preset == "full" else ModelConfig.tiny)(**_checked(ModelConfig, model))
            return cls(TrainConfig(**_checked(TrainConfig, d.get("train", {}))), mcfg,
                       SceneConfig(**_checked(SceneConfig, d.get("scene", {}))),
                       InferConfig(**_checked(InferConfig, d.get("infer", {}))))
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_toml(cls, path) -> "Experiment":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e
        return cls.from_dict(data)


def _checked(kind, values: dict) -> dict:
    names = {f.name for f in fields(kind)}
    bad = set(values) - names
    if bad:
        raise ConfigError(f"unknown {kind.__name__} keys {sorted(bad)}")
    return dict(values)


def class_names(n_classes: int) -> list[str]:
    return [SHAPES[c] if c < len(SHAPES) else f"class{c}" for c in range(n_classes)]


# ----------------------------------------------------------------------------
# scenes


@dataclass
class SceneEntry:
    scene: Scene
    views: list
    tsdf: TsdfVolume


class SceneSource:
    """Scenes with rendered views and their fused full-scene TSDF, computed once."""

    def __init__(self, scenes: Sequence[Scene]):
        if not scenes:
            raise DataError("no scenes")
        self.entries = [SceneEntry(s, list(s.views), fuse_tsdf(s.views, s.grid())) for s in scenes]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> SceneEntry:
        return self.entries[i]

    @classmethod
    def synthetic(cls, scene_cfg: SceneConfig, n: int, n_views: int, first_seed: int | None = None) -> "SceneSource":
        return cls(make_scenes(scene_cfg, n, n_views, first_seed))

    @classmethod
    def from_dir(cls, path) -> "SceneSource":
        return cls(load_scene_dir(path))


def make_scenes(scene_cfg: SceneConfig, n: int, n_views: int | None = None, first_seed: int | None = None) -> list[Scene]:
    base = scene_cfg.seed if first_seed is None else first_seed
    out = []
    for i in range(n):
        cfg = SceneConfig(**{**asdict(scene_cfg), "seed": base + i})
        sc = generate_scene(cfg)
        sc.views = render_views(sc, n_views or cfg.n_views, seed=cfg.seed)
        out.append(sc)
    return out


def load_scene_dir(path) -> list[Scene]:
    files = sorted(Path(path).glob("*.rvns"))
    if not files:
        raise DataError(f"no .rvns scenes in {path}")
    scenes = []
    for f in files:
        try:
            sc = load_scene(f)
        except (OSError, ValueError) as e:
            raise DataError(f"{f}: {e}") from e
        sc.name = sc.name or f.stem
        scenes.append(sc)
    return scenes


# ----------------------------------------------------------------------------
# training


@dataclass
class Chunk:
    scene_index: int
    origin: tuple
    extents: tuple
    grid: GridConfig
    tsdf: TsdfVolume
    views: list
    instances: list


def sample_chunk(source: SceneSource, mcfg: ModelConfig, tcfg: TrainConfig, rng: np.random.Generator) -> Chunk:
    k = int(rng.integers(len(source)))
    e = source[k]
    ch = crop_chunk(e.scene, e.views, rng, mcfg.chunk_extents, tcfg.max_views, tcfg.chunk_sampling, tcfg.fill_views)
    grid = e.scene.grid().sub(ch.origin, ch.extents)
    return Chunk(k, ch.origin, ch.extents, grid, e.tsdf.crop(ch.origin, ch.extents), ch.views, ch.instances)


def anchor_scales(boxes: np.ndarray, anchors: np.ndarray, layouts) -> np.ndarray:
    """Feature scale of each box's best-overlapping anchor."""
    if len(boxes) == 0:
        return np.zeros(0, dtype=int)
    best = iou_matrix(boxes, anchors).argmax(axis=1)
    return np.array([0 if b < layouts[0].offset + layouts[0].n_anchors * layouts[0].n_locations else 1 for b in best])


def jitter_box(box: np.ndarray, rng: np.random.Generator, min_iou: float = 0.5, tries: int = 20) -> np.ndarray:
    """A random box overlapping ``box`` by at least ``min_iou``; ``box`` itself if none is found."""
    for _ in range(tries):
        size = np.maximum(1.0, box[3:] * np.exp(rng.uniform(-0.25, 0.25, 3)))
        cand = np.concatenate([box[:3] + rng.uniform(-0.2, 0.2, 3) * box[3:], size])
        if iou_matrix(cand[None], box[None])[0, 0] >= min_iou:
            return cand
    return box.copy()


def _class_slot(refine: Tensor, c: int) -> Tensor:
    return T.take(refine, 6 * int(c) + np.arange(6))


def chunk_losses(model: Model, chunk: Chunk, tcfg: TrainConfig, rng: np.random.Generator) -> tuple[dict, dict]:
    """The five loss terms for one chunk and a few bookkeeping counts."""
    cfg = model.config
    ext = chunk.extents
    tsdf_in = Tensor(chunk.tsdf.network_input())
    color = model.color_volume(chunk.views, chunk.grid)
    pyr = model.forward_backbone(tsdf_in, color)
    rpn = model.rpn_forward(pyr)
    fext = tuple(e // 4 for e in ext)
    aset = model.anchor_set
    anchors = all_anchors(fext, aset)
    layouts = scale_layouts(fext, aset)
    inst = chunk.instances
    gt = boxes_array([i.box for i in inst])
    targets = assign_anchor_targets(anchors, gt, rng, tcfg.rpn_batch)

    props = propose(rpn, anchors, layouts, ext, tcfg.train_pre_nms, tcfg.train_post_nms)
    rois = []  # (box, scale, gt index, iou)
    for p in match_predictions(props.boxes, gt, tcfg.roi_iou):
        rois.append((props.boxes[p.pred], int(props.scale[p.pred]), p.gt, p.iou))
    if len(rois) > tcfg.roi_batch:
        keep = np.sort(rng.choice(len(rois), tcfg.roi_batch, replace=False))
        rois = [rois[i] for i in keep]
    if tcfg.gt_augment:
        for j, s in enumerate(anchor_scales(gt, anchors, layouts)):
            rois.append((gt[j], int(s), j, 1.0))
    if tcfg.roi_jitter and len(gt):
        extra = []
        for k in range(tcfg.roi_batch - len(rois)):
            j = k % len(gt)
            extra.append((jitter_box(gt[j], rng, tcfg.roi_iou), j))
        if extra:
            boxes = np.stack([b for b, _ in extra])
            scales = anchor_scales(boxes, anchors, layouts)
            ious = iou_matrix(boxes, gt)
            rois += [(b, int(s), j, float(ious[k, j])) for k, ((b, j), s) in enumerate(zip(extra, scales))]

    logits, refine_pred, refine_tgt, labels = [], [], [], []
    if rois:
        boxes = np.stack([r[0] for r in rois])
        lg, rf = model.classify_rois(pyr, boxes, [r[1] for r in rois])
        labels = [inst[r[2]].class_id for r in rois]
        logits = lg
        if cfg.use_refinement:
            refine_pred = [_class_slot(x, c) for x, c in zip(rf, labels)]
            refine_tgt = [encode_box(gt[r[2]], r[0]) for r in rois]
    losses = detection_losses(rpn, layouts, targets, logits, labels, refine_pred, refine_tgt)

    n_compl = 0
    pick = np.array([i for i, r in enumerate(rois) if r[3] >= MATCH_IOU], dtype=int)
    if cfg.use_completion and len(pick):
        if len(pick) > tcfg.completion_rois:
            pick = np.sort(rng.choice(pick, tcfg.completion_rois, replace=False))
        boxes = np.stack([rois[i][0] for i in pick])
        classes = [inst[rois[i][2]].class_id for i in pick]
        masks = model.complete_instances(pyr.F5, boxes, classes)
        tgts = [completion_target(inst[rois[i][2]].mask, inst[rois[i][2]].box, rois[i][0], ext) for i in pick]
        losses["compl"] = completion_loss(masks, tgts)
        n_compl = len(pick)
    else:
        losses["compl"] = Tensor(np.asarray(0.0))
    losses["proxy"] = proxy_loss(pyr.proxy_logits, inst) if cfg.use_proxy else Tensor(np.asarray(0.0))
    stats = {"n_gt": len(inst), "n_rois": len(rois), "n_compl": n_compl, "n_pos": int(len(targets.sampled_positives))}
    return losses, stats


def combine_losses(losses: dict, weights: Sequence[float]) -> Tensor:
    """Weighted sum; zero-weight terms are left out of the graph entirely."""
    total = None
    for name, w in zip(LOSS_NAMES, weights):
        if w == 0.0:
            continue
        term = losses[name] if w == 1.0 else T.scale(losses[name], w)
        total = term if total is None else T.add(total, term)
    return total if total is not None else Tensor(np.asarray(0.0))


class Optimizer:
    """SGD with optional heavy-ball momentum."""

    def __init__(self, params, momentum: float = 0.0, grad_clip: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()} if momentum else {}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params.values())))

    def step(self, lr: float) -> float:
        """Apply one update and return the gradient norm before clipping."""
        norm = self.grad_norm()
        if self.grad_clip and norm > self.grad_clip:
            for p in self.params.values():
                p.grad *= self.grad_clip / norm
        if not self.momentum:
            T.sgd_step(self.params, lr)
            return norm
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
            p.grad = np.zeros_like(p.data)
        return norm


@dataclass
class TrainResult:
    model: Model
    history: list  # per-step log dicts
    checkpoint: Path | None = None


def _dump_nonfinite(out_dir: Path | None, step: int, chunk: Chunk, values: dict) -> str:
    if out_dir is None:
        return ""
    path = Path(out_dir) / f"nonfinite_step{step}.npz"
    np.savez(path, tsdf=chunk.tsdf.values, weights=chunk.tsdf.weights, origin=np.array(chunk.origin),
             scene_index=chunk.scene_index, boxes=boxes_array([i.box for i in chunk.instances]),
             losses=json.dumps(values))
    return str(path)


def train(exp: Experiment, source: SceneSource | None = None, out_dir=None, model: Model | None = None,
          log_every: int = 1) -> TrainResult:
    """Run ``exp.train.steps`` SGD steps; JSON-lines log and checkpoints go to ``out_dir``."""
    tcfg, mcfg = exp.train, exp.model
    if source is None:
        if tcfg.scenes_dir:
            source = SceneSource.from_dir(tcfg.scenes_dir)
        else:
            source = SceneSource.synthetic(exp.scene, tcfg.n_scenes, tcfg.views_per_scene)
    model = model or Model(mcfg)
    opt = Optimizer(model.params, tcfg.momentum, tcfg.grad_clip)
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "train_log.jsonl", "w")
    history = []
    header = {"experiment": exp.to_dict()}
    try:
        for step in range(tcfg.steps):
            rng = np.random.default_rng([tcfg.seed, step])
            chunk = sample_chunk(source, mcfg, tcfg, rng)
            losses, stats = chunk_losses(model, chunk, tcfg, rng)
            total = combine_losses(losses, mcfg.loss_weights)
            values = {k: float(v.item()) for k, v in losses.items()}
            values["total"] = float(total.item())
            if not all(np.isfinite(list(values.values()))):
                where = _dump_nonfinite(out, step, chunk, values)
                raise NonFiniteLoss(f"non-finite loss at step {step}: {values}" + (f" (inputs in {where})" if where else ""))
            lr = tcfg.lr_at(step)
            if total.node is not None:
                T.backward(total)
            gnorm = opt.step(lr)
            entry = {"step": step, "lr": lr, **values, "grad_norm": gnorm, **stats}
            history.append(entry)
            if log is not None and step % log_every == 0:
                log.write(json.dumps(entry) + "\n")
            if out is not None and (step + 1) % tcfg.checkpoint_every == 0:
                model.save(out / f"checkpoint_{step + 1:06d}.rvnt", {**header, "step": step + 1})
        ckpt = None
        if out is not None:
            ckpt = out / "model.rvnt"
            model.save(ckpt, {**header, "step": tcfg.steps})
    finally:
        if log is not None:
            log.close()
    return TrainResult(model, history, ckpt)


# ----------------------------------------------------------------------------
# inference


@dataclass
class InferResult:
    predictions: list  # Prediction
    surface: np.ndarray
    timings: dict


def _padded(extents) -> tuple:
    return tuple(int(-(-e // 4) * 4) for e in extents)


def forward_scene(model: Model, tsdf: TsdfVolume, views: Sequence, icfg: InferConfig):
    """Backbone and proposals for a whole (padded) volume."""
    pext = _padded(tsdf.extents)
    vol = tsdf.pad_to(pext) if pext != tsdf.extents else tsdf
    grid = GridConfig(pext, tsdf.voxel_size, tsdf.origin)
    color = model.color_volume(list(views)[: icfg.max_views], grid)
    pyr = model.forward_backbone(Tensor(vol.network_input()), color)
    rpn = model.rpn_forward(pyr)
    fext = tuple(e // 4 for e in pext)
    anchors = all_anchors(fext, model.anchor_set)
    layouts = scale_layouts(fext, model.anchor_set)
    props = propose(rpn, anchors, layouts, pext, icfg.pre_nms, icfg.post_nms, icfg.rpn_iou)
    return pyr, props


def detect(model: Model, pyr, props, extents, icfg: InferConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Classify and refine proposals; returns boxes, classes and scores after class-wise NMS."""
    if len(props.boxes) == 0:
        return np.zeros((0, 6)), np.zeros(0, dtype=int), np.zeros(0)
    logits, refine = model.classify_rois(pyr, props.boxes, props.scale)
    L = np.stack([l.data for l in logits])
    P = np.exp(L - L.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    cls = P.argmax(axis=1)
    score = props.scores * P[np.arange(len(cls)), cls]
    boxes = props.boxes.copy()
    if model.config.use_refinement:
        d = np.stack([r.data[6 * c:6 * c + 6] for r, c in zip(refine, cls)])
        d = np.clip(d, -4.0, 4.0)
        boxes = decode_box(d, props.boxes)
    ext = np.asarray(extents, dtype=float)
    lo = np.clip(boxes[:, :3] - boxes[:, 3:] / 2, 0.0, ext)
    hi = np.clip(boxes[:, :3] + boxes[:, 3:] / 2, 0.0, ext)
    ok = np.all(hi - lo >= 1.0, axis=1) & (score >= icfg.score_threshold)
    boxes = np.concatenate([(lo + hi) / 2, hi - lo], axis=1)[ok]
    cls, score = cls[ok], score[ok]
    keep = []
    groups = [np.arange(len(cls))] if icfg.class_agnostic else [np.flatnonzero(cls == c) for c in np.unique(cls)]
    for idx in groups:
        keep += [int(idx[k]) for k in nms(boxes[idx], score[idx], icfg.final_iou)]
    keep = sorted(keep, key=lambda i: (-score[i], i))[: icfg.max_detections]
    return boxes[keep], cls[keep], score[keep]


def infer_scene(model: Model, scene: Scene, icfg: InferConfig | None = None, mode: str = "model",
                tsdf: TsdfVolume | None = None) -> InferResult:
    """Whole-scene predictions.

    ``mode`` picks the mask source: ``"model"`` uses the completion head,
    ``"copy_partial"`` keeps the same detections but copies the observed
    surface inside each box.
    """
    if mode not in ("model", "copy_partial"):
        raise ValueError(f"unknown inference mode {mode!r}")
    icfg = icfg or InferConfig()
    if not scene.views:
        raise DataError(f"scene {scene.name!r} has no views")
    t0 = time.perf_counter()
    tsdf = tsdf if tsdf is not None else fuse_tsdf(scene.views, scene.grid())
    t1 = time.perf_counter()
    surface = tsdf.surface()
    with T.no_grad():
        pyr, props = forward_scene(model, tsdf, scene.views, icfg)
        t2 = time.perf_counter()
        boxes, cls, score = detect(model, pyr, props, scene.extents, icfg)
        preds = []
        use_head = len(boxes) and (mode == "model" or icfg.mask_rescore)
        logits = model.complete_instances(pyr.F5, boxes, cls) if use_head else []
        for i in range(len(boxes)):
            lo, hi = box_lattice(boxes[i], scene.extents)
            s = float(score[i])
            if use_head:
                prob = 1.0 / (1.0 + np.exp(-logits[i].data))
                if icfg.mask_rescore:
                    s *= float(np.maximum(prob, 1.0 - prob).mean())
            if mode == "model":
                mask = prob > icfg.mask_threshold
            else:
                mask = surface[tuple(slice(l, h) for l, h in zip(lo, hi))].copy()
            preds.append(Prediction(int(cls[i]), s, boxes[i], mask, lo))
        preds.sort(key=lambda p: -p.score)
    t3 = time.perf_counter()
    return InferResult(preds, surface, {"fuse": t1 - t0, "forward": t2 - t1, "heads": t3 - t2, "total": t3 - t0})


def oracle_predictions(scene: Scene) -> list:
    return [Prediction(i.class_id, 1.0, i.box.as_array(), i.mask, i.lattice[0]) for i in scene.instances]


def write_predictions(path, scene_id: str, predictions: Sequence[Prediction]) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(p.to_json(scene_id) + "\n")


def read_predictions(path) -> list[tuple[str, Prediction]]:
    with open(path) as fh:
        return [Prediction.from_json(line) for line in fh if line.strip()]


# ----------------------------------------------------------------------------
# evaluation


PREDICTORS = ("model", "copy_partial", "oracle", "empty")


def evaluate(model: Model | None, scenes: Sequence[Scene], icfg: InferConfig | None = None,
             predictor: str = "model", n_classes: int | None = None, edges=None) -> tuple[dict, list]:
    """Metrics report over scenes with ground truth, and the per-scene records."""
    if predictor not in PREDICTORS:
        raise ValueError(f"unknown predictor {predictor!r}")
    if predictor in ("model", "copy_partial") and model is None:
        raise ValueError(f"predictor {predictor!r} needs a model")
    n_classes = n_classes or (model.config.n_classes if model is not None else max(s.config.n_classes for s in scenes))
    records = []
    for k, sc in enumerate(scenes):
        tsdf = fuse_tsdf(sc.views, sc.grid())
        if predictor in ("model", "copy_partial"):
            preds = infer_scene(model, sc, icfg, predictor, tsdf).predictions
        elif predictor == "oracle":
            preds = oracle_predictions(sc)
        else:
            preds = []
        records.append(EvalRecord(f"{k:05d}_{sc.name}", sc.extents, preds, list(sc.instances), tsdf.surface()))
    kw = {} if edges is None else {"edges": edges}
    return metrics_report(records, n_classes, class_names(n_classes), **kw), records


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


# ----------------------------------------------------------------------------
# data and anchors


def make_data(scene_cfg: SceneConfig, count: int, out_dir, first_seed: int | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for sc in make_scenes(scene_cfg, count, None, first_seed):
        p = out / f"{sc.name}.rvns"
        save_scene(p, sc)
        paths.append(p)
    return paths


def compute_anchors(scenes: Sequence[Scene], k: int = 9, seed: int = 0, split_m: float | None = None):
    sizes = [i.box.size for s in scenes for i in s.instances]
    if len(sizes) < k:
        raise DataError(f"{len(sizes)} boxes are too few for {k} anchors")
    kw = {} if split_m is None else {"split_m": split_m}
    return cluster_anchors(np.asarray(sizes), k, seed, scenes[0].voxel_size, **kw)


def dump_slices(volume: np.ndarray, out_dir, prefix: str, axis: int = 1) -> list[Path]:
    """Write one grayscale PNG per slice along ``axis`` (the up axis by default)."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    v = np.asarray(volume)
    if v.dtype == bool:
        img = v.astype(np.uint8) * 255
    else:
        lo, hi = float(np.min(v)), float(np.max(v))
        img = np.zeros(v.shape, np.uint8) if hi <= lo else ((v - lo) / (hi - lo) * 255).astype(np.uint8)
    paths = []
    for j in range(v.shape[axis]):
        p = out / f"{prefix}_{j:03d}.png"
        Image.fromarray(np.take(img, j, axis=axis).T).save(p)
        paths.append(p)
    return paths


def prediction_volume(extents, predictions: Sequence[Prediction]) -> np.ndarray:
    """Instance label grid (0 empty, 1 + k for prediction k) for inspection."""
    out = np.zeros(extents, dtype=np.int32)
    for k, p in enumerate(predictions):
        sl = tuple(slice(l, l + s) for l, s in zip(p.lo, p.mask.shape))
        out[sl][p.mask] = k + 1
    return out

