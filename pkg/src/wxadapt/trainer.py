"""Training and evaluation of the adaptive detector.

One optimization step runs source detection, prior-adversarial regression on
both domains at the configured scales, and L1 regularization of the residual
corrections on a single tape:

    total = det + adv + dom + lambda * reg

where ``adv`` is the mean of source and target prior-regression losses (their
adversarial effect on the extractor comes from the reversal layer inside each
prior head), and ``dom`` is the plain constant-label discriminator loss used
by the baseline modes.
"""

import csv
import json
import subprocess
import sys
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import models, priors, weathersim
from .autograd import Tape, Tensor, ops

# mode -> (prior-head levels, residual-block levels, discriminator levels,
#          uses target batch)
MODES = {
    "frcnn": ((), (), (), False),
    "d5": ((), (), (5,), True),
    "d5_r5": ((), (5,), (5,), True),
    "p5_r5": ((5,), (5,), (), True),
    "p45_r45": ((4, 5), (4, 5), (), True),
    "d45": ((), (), (4, 5), True),
    "p45": ((4, 5), (), (), True),
}

DEFAULT_LADDER = ("frcnn", "d5", "d5_r5", "p5_r5", "p45_r45")

METRIC_COLUMNS = (
    "iteration",
    "lr",
    "loss_total",
    "loss_det",
    "loss_det_obj",
    "loss_det_box",
    "loss_det_cls",
    "loss_adv",
    "loss_pal_src",
    "loss_pal_tgt",
    "loss_dom",
    "loss_reg",
    "grad_norm",
)


class DivergenceError(RuntimeError):
    def __init__(self, component, value, iteration):
        super().__init__(
            f"training diverged at iteration {iteration}: "
            f"{component} = {value!r}"
        )
        self.component = component
        self.iteration = iteration


@dataclass
class TrainConfig:
    mode: str = "p45_r45"
    weather: str = "haze"
    iterations: int = 4000
    lr: float = 1e-3
    lr_drop_frac: float = 5.0 / 7.0
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_source: int = 4
    batch_target: int = 4
    lambda_reg: float = 0.1
    grl_coeff: float = 1.0
    clip_grad_norm: float = 10.0  # 0 disables clipping
    det_box_weight: float = 10.0  # regression-term balance, RPN convention
    widths: tuple = (8, 16, 32, 32, 32)
    pen_channels: int = 64
    pen_out_channels: int = 1
    disc_channels: int = 64
    head_channels: int = 64
    image_size: int = 128
    num_classes: int = 3
    anchor_sizes: tuple = (16.0, 32.0, 64.0)
    freeze_blocks: tuple = ()
    src_prior: str = "estimated"  # estimated | gt (gt means the ideal map)
    tgt_prior: str = "estimated"  # estimated | gt
    pal_on_corrected: bool = True
    eval_interval: int = 0  # 0: evaluate at the end only
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}' (choose from {sorted(MODES)})")
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.src_prior not in ("estimated", "gt") or self.tgt_prior not in (
            "estimated",
            "gt",
        ):
            raise ValueError("prior sources must be 'estimated' or 'gt'")

    @property
    def pal_levels(self):
        return MODES[self.mode][0]

    @property
    def rfrb_levels(self):
        return MODES[self.mode][1]

    @property
    def disc_levels(self):
        return MODES[self.mode][2]

    @property
    def uses_target(self):
        return MODES[self.mode][3]

    def model_config(self):
        return models.ModelConfig(
            widths=tuple(self.widths),
            num_classes=self.num_classes,
            anchor_sizes=tuple(self.anchor_sizes),
            image_size=self.image_size,
            head_channels=self.head_channels,
            pen_levels=self.pal_levels,
            rfrb_levels=self.rfrb_levels,
            disc_levels=self.disc_levels,
            pen_channels=self.pen_channels,
            pen_out_channels=self.pen_out_channels,
            disc_channels=self.disc_channels,
            grl_coeff=self.grl_coeff,
            freeze_blocks=tuple(self.freeze_blocks),
            pal_on_corrected=self.pal_on_corrected,
        )

    def to_dict(self):
        return asdict(self)

    # flat key=value config files

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for key, value in asdict(self).items():
                if isinstance(value, (tuple, list)):
                    value = ",".join(str(v) for v in value)
                f.write(f"{key} = {value}\n")

    @classmethod
    def from_file(cls, path, **overrides):
        fields_ = {f.name: f for f in cls.__dataclass_fields__.values()}
        values = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in fields_:
                    raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
                values[key] = _parse_config_value(cls, key, raw)
        values.update(overrides)
        return cls(**values)


def _parse_config_value(cls, key, raw):
    default = cls.__dataclass_fields__[key].default
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if not raw:
            return ()
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        elem = float if default and isinstance(default[0], float) else int
        return tuple(elem(p) for p in parts)
    return raw


# ---------------------------------------------------------------------------
# data access


class SampleBank:
    """In-memory view of one manifest split with an instrumented read
    counter and per-level prior caching."""

    def __init__(self, manifest, split, prior_source, pal_levels, pen_out_channels=1):
        self.manifest = manifest
        self.split = split
        self.prior_source = prior_source
        self.pal_levels = tuple(pal_levels)
        self.pen_out_channels = pen_out_channels
        self.n = manifest.count(split)
        self.domain = manifest.splits[split]["domain"]
        self.reads = 0
        self._cache = {}

    def __len__(self):
        return self.n

    def entry(self, idx):
        """Image (3, H, W), boxes, labels, and per-level prior planes."""
        if idx not in self._cache:
            sample = weathersim.load_sample(self.manifest, self.split, idx)
            image = np.ascontiguousarray(sample.image.transpose(2, 0, 1))
            prior = (
                sample.gt_prior if self.prior_source == "gt" else sample.est_prior
            )
            level_maps = {}
            for level in self.pal_levels:
                scaled = priors.downscale_prior(prior, level)
                plane = scaled.values.transpose(2, 0, 1)  # (1, h, w)
                if self.pen_out_channels > 1:
                    plane = np.repeat(plane, self.pen_out_channels, axis=0)
                level_maps[level] = plane.astype(np.float32)
            self._cache[idx] = (image, sample.boxes, sample.labels, level_maps)
        self.reads += 1
        return self._cache[idx]

    def batch(self, indices):
        images, boxes, labels, level_maps = [], [], [], {l: [] for l in self.pal_levels}
        for idx in indices:
            img, bx, lb, lm = self.entry(int(idx))
            images.append(img)
            boxes.append(bx)
            labels.append(lb)
            for level in self.pal_levels:
                level_maps[level].append(lm[level])
        batch = {
            "images": Tensor(np.stack(images)),
            "boxes": boxes,
            "labels": labels,
            "priors": {
                level: Tensor(np.stack(stack)) for level, stack in level_maps.items()
            },
        }
        return batch

    def detection_samples(self):
        """Plain DetectionSample list (for evaluation)."""
        return [
            weathersim.load_sample(self.manifest, self.split, i) for i in range(self.n)
        ]


# ---------------------------------------------------------------------------
# anchor assignment and detection loss


@dataclass
class AnchorAssignment:
    obj_anchor_idx: np.ndarray  # anchors entering the objectness loss
    obj_targets: np.ndarray  # 1 positive / 0 negative
    pos_anchor_idx: np.ndarray
    pos_deltas: np.ndarray
    pos_labels: np.ndarray


def assign_anchors(anchors, gt_boxes, gt_labels, pos_iou=0.5, neg_iou=0.3):
    """RPN-style assignment: IoU >= 0.5 positive, < 0.3 negative, in-between
    ignored; additionally every ground-truth box claims its best-overlap
    anchor (first index on ties)."""
    A = len(anchors)
    if len(gt_boxes) == 0:
        return AnchorAssignment(
            np.arange(A, dtype=np.int64),
            np.zeros(A, dtype=np.float32),
            np.empty(0, dtype=np.int64),
            np.empty((0, 4), dtype=np.float32),
            np.empty(0, dtype=np.int64),
        )
    iou = models.box_iou_matrix(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(A), best_gt]
    positive = best_iou >= pos_iou
    # every GT claims its best anchor even below the threshold
    forced = iou.argmax(axis=0)
    positive[forced] = True
    best_gt[forced] = np.arange(len(gt_boxes))
    negative = (best_iou < neg_iou) & ~positive
    pos_idx = np.nonzero(positive)[0]
    neg_idx = np.nonzero(negative)[0]
    obj_idx = np.concatenate([pos_idx, neg_idx])
    obj_targets = np.concatenate(
        [np.ones(len(pos_idx), np.float32), np.zeros(len(neg_idx), np.float32)]
    )
    deltas = models.encode_boxes(gt_boxes[best_gt[pos_idx]], anchors[pos_idx])
    labels = gt_labels[best_gt[pos_idx]].astype(np.int64)
    return AnchorAssignment(obj_idx.astype(np.int64), obj_targets,
                            pos_idx.astype(np.int64), deltas, labels)


def _zero_scalar():
    return Tensor(np.zeros((), dtype=np.float32))


def detection_loss(obj, cls, box, assignments, num_anchors_per_cell, num_classes,
                   grid, box_weight=10.0):
    """Objectness BCE on matched/negative anchors, smooth L1 on positive box
    deltas (balance-weighted, the convention of the anchor framework this
    head stands in for), class cross-entropy on positives. Returns the
    summed loss and its components; the logged box term carries its
    weight."""
    A, C, hw = num_anchors_per_cell, num_classes, grid * grid
    n_anchors = A * hw
    obj_flat_idx, obj_targets = [], []
    cls_rows, box_rows, pos_labels, pos_deltas = [], [], [], []
    for n, asg in enumerate(assignments):
        obj_flat_idx.append(n * n_anchors + asg.obj_anchor_idx)
        obj_targets.append(asg.obj_targets)
        if len(asg.pos_anchor_idx):
            a = asg.pos_anchor_idx // hw
            cell = asg.pos_anchor_idx % hw
            base_cls = (n * (A * C) + a * C) * hw + cell
            cls_rows.append(base_cls[:, None] + np.arange(C)[None, :] * hw)
            base_box = (n * (A * 4) + a * 4) * hw + cell
            box_rows.append(base_box[:, None] + np.arange(4)[None, :] * hw)
            pos_labels.append(asg.pos_labels)
            pos_deltas.append(asg.pos_deltas)
    obj_loss = ops.bce_with_logits(
        ops.gather(obj, np.concatenate(obj_flat_idx)),
        Tensor(np.concatenate(obj_targets)),
    )
    if cls_rows:
        cls_loss = ops.cross_entropy(
            ops.gather(cls, np.concatenate(cls_rows)), np.concatenate(pos_labels)
        )
        box_loss = ops.scale(
            ops.smooth_l1(
                ops.gather(box, np.concatenate(box_rows)),
                Tensor(np.concatenate(pos_deltas)),
                beta=1.0,
            ),
            box_weight,
        )
    else:
        cls_loss = _zero_scalar()
        box_loss = _zero_scalar()
    total = ops.add(ops.add(obj_loss, box_loss), cls_loss)
    return total, {"obj": obj_loss, "box": box_loss, "cls": cls_loss}


# ---------------------------------------------------------------------------
# adversarial and regularization losses


def pal_level_loss(pred, prior_batch):
    """Squared-error prior regression at one scale (mean over batch,
    channels and spatial positions)."""
    return ops.mse_map_loss(pred, prior_batch)


def pal_domain_loss(level_losses):
    """Mean of the configured per-level losses (one level passes through)."""
    if not level_losses:
        return _zero_scalar()
    values = list(level_losses.values())
    if len(values) == 1:
        return values[0]
    total = values[0]
    for v in values[1:]:
        total = ops.add(total, v)
    return ops.scale(total, 1.0 / len(values))


def adv_loss(src_pal, tgt_pal):
    """Mean of the two domain losses; the adversarial sign is realized by
    the reversal layer inside the prior heads."""
    return ops.scale(ops.add(src_pal, tgt_pal), 0.5)


def reg_loss(residuals):
    """Per-sample L1 of each residual level, averaged over the target batch
    and summed over levels."""
    if not residuals:
        return _zero_scalar()
    total = None
    for level in sorted(residuals):
        term = ops.l1_penalty(residuals[level])
        total = term if total is None else ops.add(total, term)
    return total


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with classical momentum and decoupled-from-nothing weight decay
    (decay added to the raw gradient, the convention this architecture
    family inherits)."""

    def __init__(self, params, momentum=0.9, weight_decay=5e-4):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        lr = np.float32(lr)
        mu = np.float32(self.momentum)
        wd = np.float32(self.weight_decay)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + wd * p.data
            v *= mu
            v += g
            p.data -= lr * v

    def grad_norm(self):
        acc = 0.0
        for p in self.params:
            if p.grad is not None:
                acc += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(acc))

    def clip_grad_norm(self, max_norm):
        """Scale all gradients down so their global L2 norm is at most
        max_norm; returns the pre-clip norm."""
        norm = self.grad_norm()
        if max_norm > 0 and norm > max_norm:
            factor = np.float32(max_norm / norm)
            for p in self.params:
                if p.grad is not None:
                    p.grad *= factor
        return norm


# ---------------------------------------------------------------------------
# one optimization step


def train_step(model, optimizer, config, src_batch, tgt_batch, lr, iteration=0):
    """Combined tape over detection, prior-adversarial, discriminator and
    regularization losses, then one optimizer step. Returns logged floats."""
    cfg = model.config
    A = len(cfg.anchor_sizes)
    grid = cfg.image_size // 32
    assignments = [
        assign_anchors(model.anchors, b, l)
        for b, l in zip(src_batch["boxes"], src_batch["labels"])
    ]
    optimizer.zero_grad()
    with Tape() as tape:
        src_feats = model.feature_forward_source(src_batch["images"])
        obj, cls, box = model.detect_forward(src_feats[5])
        det, det_parts = detection_loss(
            obj, cls, box, assignments, A, cfg.num_classes, grid,
            box_weight=config.det_box_weight,
        )

        tgt_feats, residuals = {}, {}
        if config.uses_target:
            tgt_feats, residuals = model.feature_forward_target(tgt_batch["images"])

        src_levels, tgt_levels = {}, {}
        for level in cfg.pen_levels:
            src_levels[level] = pal_level_loss(
                model.pen_forward(level, src_feats[level]),
                src_batch["priors"][level],
            )
            tgt_feat = tgt_feats[level]
            if not cfg.pal_on_corrected and level in residuals:
                tgt_feat = ops.add(tgt_feat, ops.scale(residuals[level], -1.0))
            tgt_levels[level] = pal_level_loss(
                model.pen_forward(level, tgt_feat), tgt_batch["priors"][level]
            )
        pal_src = pal_domain_loss(src_levels)
        pal_tgt = pal_domain_loss(tgt_levels)
        adv = adv_loss(pal_src, pal_tgt) if cfg.pen_levels else _zero_scalar()

        dom_terms = []
        for level in cfg.disc_levels:
            logits_src = model.disc_forward(level, src_feats[level])
            dom_terms.append(
                ops.bce_with_logits(
                    logits_src, Tensor(np.zeros(logits_src.shape, np.float32))
                )
            )
            logits_tgt = model.disc_forward(level, tgt_feats[level])
            dom_terms.append(
                ops.bce_with_logits(
                    logits_tgt, Tensor(np.ones(logits_tgt.shape, np.float32))
                )
            )
        if dom_terms:
            dom = dom_terms[0]
            for t in dom_terms[1:]:
                dom = ops.add(dom, t)
            dom = ops.scale(dom, 1.0 / len(dom_terms))
        else:
            dom = _zero_scalar()

        reg = reg_loss(residuals)

        # logged bookkeeping identity: total = ((det + adv) + dom) + lambda*reg
        total = ops.add(ops.add(ops.add(det, adv), dom),
                        ops.scale(reg, config.lambda_reg))

    record = {
        "loss_total": float(total.data),
        "loss_det": float(det.data),
        "loss_det_obj": float(det_parts["obj"].data),
        "loss_det_box": float(det_parts["box"].data),
        "loss_det_cls": float(det_parts["cls"].data),
        "loss_adv": float(adv.data),
        "loss_pal_src": float(pal_src.data) if cfg.pen_levels else 0.0,
        "loss_pal_tgt": float(pal_tgt.data) if cfg.pen_levels else 0.0,
        "loss_dom": float(dom.data),
        "loss_reg": float(reg.data),
    }
    for name, value in record.items():
        if not np.isfinite(value):
            raise DivergenceError(name, value, iteration)
    if record["loss_total"] > 1e3:
        raise DivergenceError("loss_total", record["loss_total"], iteration)
    tape.backward(total)
    record["grad_norm"] = optimizer.clip_grad_norm(config.clip_grad_norm)
    optimizer.step(lr)
    return record


def lr_at(config, iteration):
    """Base rate, dropping by the configured factor for the tail of the
    schedule (drop lands after lr_drop_frac of the iterations)."""
    boundary = int(round(config.lr_drop_frac * config.iterations))
    if iteration <= boundary:
        return config.lr
    return config.lr * config.lr_drop_factor


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    per_class_ap: dict
    mean_ap: float
    absent_classes: list = field(default_factory=list)


def _forward_eval(model, sample):
    x = Tensor(np.ascontiguousarray(sample.image.transpose(2, 0, 1))[None])
    if sample.domain == "target" and model.config.rfrb_levels:
        feats, _ = model.feature_forward_target(x)
    else:
        feats = model.feature_forward_source(x)
    return model.detect_forward(feats[5])


def collect_detections(model, samples, score_thresh=0.05, nms_thr=0.5, max_dets=100):
    """Per-class detections [(image_idx, score, box)] after per-class NMS."""
    was_training = model.training
    model.eval()
    num_classes = model.config.num_classes
    dets = {c: [] for c in range(num_classes)}
    image_size = model.config.image_size
    for img_idx, sample in enumerate(samples):
        obj, cls, box = _forward_eval(model, sample)
        boxes, scores, _ = model.decode_predictions(obj, cls, box, 0, image_size)
        for c in range(num_classes):
            keep = np.nonzero(scores[:, c] >= score_thresh)[0]
            if len(keep) == 0:
                continue
            order = models.nms(boxes[keep], scores[keep, c], nms_thr)[:max_dets]
            for k in order:
                idx = keep[k]
                dets[c].append((img_idx, float(scores[idx, c]), boxes[idx].copy()))
    if was_training:
        model.train()
    return dets


def average_precision(class_dets, gt_by_image, iou_thr=0.5):
    """All-points AP: greedy score-ordered matching against unmatched GT,
    then integration of the precision envelope over recall."""
    n_pos = sum(len(v) for v in gt_by_image.values())
    if n_pos == 0:
        return None
    order = sorted(range(len(class_dets)),
                   key=lambda i: (-class_dets[i][1], class_dets[i][0], i))
    matched = {img: np.zeros(len(b), dtype=bool) for img, b in gt_by_image.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = class_dets[i]
        gt = gt_by_image.get(img)
        if gt is None or len(gt) == 0:
            fp[rank] = 1
            continue
        ious = models.box_iou_matrix(box[None], gt).reshape(-1)
        ious[matched[img]] = -1.0
        best = int(ious.argmax())
        if ious[best] >= iou_thr:
            tp[rank] = 1
            matched[img][best] = True
        else:
            fp[rank] = 1
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(fp)
    recall = tp_c / n_pos
    precision = tp_c / np.maximum(tp_c + fp_c, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_map(model, samples, iou_thr=0.5, score_thresh=0.05, nms_thr=0.5):
    """Per-class all-points AP and their unweighted mean; classes absent
    from the ground truth are excluded and flagged."""
    num_classes = model.config.num_classes
    dets = collect_detections(model, samples, score_thresh, nms_thr)
    per_class = {}
    absent = []
    for c in range(num_classes):
        gt_by_image = {}
        for img_idx, sample in enumerate(samples):
            mask = sample.labels == c
            if mask.any():
                gt_by_image[img_idx] = sample.boxes[mask]
        ap = average_precision(dets[c], gt_by_image, iou_thr)
        if ap is None:
            absent.append(c)
        else:
            per_class[c] = ap
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult(per_class, mean_ap, absent)


# ---------------------------------------------------------------------------
# full training run


@dataclass
class TrainResult:
    out_dir: str
    checkpoint: str
    metrics_csv: str
    eval_csv: str
    final_map: float
    eval_rows: list
    target_reads: int


def _format_float(v):
    return repr(float(v))


def write_metrics_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["iteration"]]
                + [_format_float(row[c]) for c in METRIC_COLUMNS[1:]]
            )


def train(config, data, out_dir):
    """Full schedule: SGD with the two-phase learning rate, periodic and
    final evaluation on the target validation split, metrics CSV and WXA1
    checkpoint. Deterministic for a fixed (config, seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = data if isinstance(data, weathersim.DatasetManifest) else (
        weathersim.load_manifest(data)
    )
    seq = np.random.SeedSequence(config.seed)
    model_seed, batch_seed = seq.spawn(2)
    model = models.AdaptiveDetector(
        config.model_config(), np.random.default_rng(model_seed)
    )
    optimizer = SGD(model.trainable_parameters(), config.momentum, config.weight_decay)
    batch_rng = np.random.default_rng(batch_seed)

    src_bank = SampleBank(manifest, "train_src", config.src_prior,
                          config.pal_levels, config.pen_out_channels)
    tgt_bank = SampleBank(manifest, "train_tgt", config.tgt_prior,
                          config.pal_levels, config.pen_out_channels)
    val_samples = SampleBank(manifest, "val_tgt", "gt", ()).detection_samples()

    rows = []
    eval_rows = []
    metrics_path = out / "metrics.csv"
    eval_path = out / "metrics_eval.csv"
    try:
        for iteration in range(1, config.iterations + 1):
            lr = lr_at(config, iteration)
            src_idx = batch_rng.choice(
                len(src_bank), size=min(config.batch_source, len(src_bank)),
                replace=False,
            )
            src_batch = src_bank.batch(src_idx)
            tgt_batch = None
            if config.uses_target:
                tgt_idx = batch_rng.choice(
                    len(tgt_bank), size=min(config.batch_target, len(tgt_bank)),
                    replace=False,
                )
                tgt_batch = tgt_bank.batch(tgt_idx)
            record = train_step(
                model, optimizer, config, src_batch, tgt_batch, lr, iteration
            )
            record["iteration"] = iteration
            record["lr"] = lr
            rows.append(record)
            if config.eval_interval and iteration % config.eval_interval == 0 \
                    and iteration < config.iterations:
                result = evaluate_map(model, val_samples)
                eval_rows.append(_eval_row(iteration, result, config.num_classes))
    finally:
        write_metrics_csv(metrics_path, rows)

    result = evaluate_map(model, val_samples)
    eval_rows.append(_eval_row(config.iterations, result, config.num_classes))
    _write_eval_csv(eval_path, eval_rows, config.num_classes)

    ckpt_path = out / "checkpoint.wxa1"
    models.save_checkpoint(
        ckpt_path,
        model,
        iteration=config.iterations,
        rng_state=_jsonable_rng_state(batch_rng),
        extra={"train_config": config.to_dict()},
    )
    return TrainResult(
        out_dir=str(out),
        checkpoint=str(ckpt_path),
        metrics_csv=str(metrics_path),
        eval_csv=str(eval_path),
        final_map=result.mean_ap,
        eval_rows=eval_rows,
        target_reads=tgt_bank.reads,
    )


def _jsonable_rng_state(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _eval_row(iteration, result, num_classes):
    row = {"iteration": iteration, "map": result.mean_ap}
    for c in range(num_classes):
        row[f"ap_{weathersim.CLASS_NAMES[c]}"] = result.per_class_ap.get(c, float("nan"))
    row["absent"] = ";".join(str(c) for c in result.absent_classes)
    return row


def _write_eval_csv(path, rows, num_classes):
    columns = ["iteration"] + [
        f"ap_{weathersim.CLASS_NAMES[c]}" for c in range(num_classes)
    ] + ["map", "absent"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [row["iteration"]]
                + [_format_float(row[f"ap_{weathersim.CLASS_NAMES[c]}"])
                   for c in range(num_classes)]
                + [_format_float(row["map"]), row["absent"]]
            )


# ---------------------------------------------------------------------------
# PEN learnability probe


def pen_learnability_probe(config, data, iterations=200, batch=8, lr=None):
    """Freeze the extractor, train only the prior heads on one fixed target
    batch, and report the regression-loss trajectory."""
    manifest = data if isinstance(data, weathersim.DatasetManifest) else (
        weathersim.load_manifest(data)
    )
    if not config.pal_levels:
        raise ValueError("probe requires a mode with prior heads")
    model = models.AdaptiveDetector(
        config.model_config(), np.random.default_rng(config.seed)
    )
    for p in model.extractor.parameters():
        p.requires_grad = False
    bank = SampleBank(manifest, "train_tgt", config.tgt_prior,
                      config.pal_levels, config.pen_out_channels)
    fixed = bank.batch(np.arange(min(batch, len(bank))))
    feats = model.feature_forward_source(fixed["images"])
    const_feats = {l: Tensor(feats[l].data) for l in config.pal_levels}
    optimizer = SGD(model.pens.parameters(), config.momentum, config.weight_decay)
    lr = config.lr if lr is None else lr
    losses = []
    for _ in range(iterations):
        optimizer.zero_grad()
        with Tape() as tape:
            level_losses = {
                l: pal_level_loss(
                    model.pen_forward(l, const_feats[l]), fixed["priors"][l]
                )
                for l in config.pal_levels
            }
            loss = pal_domain_loss(level_losses)
        losses.append(float(loss.data))
        tape.backward(loss)
        optimizer.step(lr)
    return losses


# ---------------------------------------------------------------------------
# ablation ladder and lambda sweep


def _run_training_subprocess(config, data_dir, run_dir):
    cfg_path = Path(run_dir) / "train_config.txt"
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    config.to_file(cfg_path)
    cmd = [
        sys.executable, "-m", "wxadapt.cli", "train",
        "--data", str(data_dir), "--out", str(run_dir),
        "--config", str(cfg_path),
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"training subprocess failed ({proc.returncode}):\n{proc.stderr[-2000:]}"
        )


def read_final_eval(run_dir, num_classes=3):
    path = Path(run_dir) / "metrics_eval.csv"
    with open(path, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    last = rows[-1]
    aps = {
        weathersim.CLASS_NAMES[c]: float(last[f"ap_{weathersim.CLASS_NAMES[c]}"])
        for c in range(num_classes)
    }
    return aps, float(last["map"])


def ablation_run(base_config, data, out_dir, modes=DEFAULT_LADDER, seeds=(0, 1, 2),
                 jobs=1):
    """Train every mode at every seed on the shared dataset, evaluate, and
    emit a per-mode table (median over seeds)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = data if not isinstance(data, weathersim.DatasetManifest) else data.root
    runs = []
    for mode in modes:
        for seed in seeds:
            cfg = replace(base_config, mode=mode, seed=seed)
            run_dir = out / f"{mode}_seed{seed}"
            runs.append((mode, seed, cfg, run_dir))
    pending = [r for r in runs if not (r[3] / "metrics_eval.csv").exists()]
    if jobs > 1:
        import concurrent.futures

        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_training_subprocess, cfg, data_dir, run_dir)
                for _, _, cfg, run_dir in pending
            ]
            for f in futures:
                f.result()
    else:
        for _, _, cfg, run_dir in pending:
            train(cfg, data_dir, run_dir)

    table = []
    for mode in modes:
        per_seed = [read_final_eval(out / f"{mode}_seed{seed}") for seed in seeds]
        row = {"mode": mode}
        for cname in weathersim.CLASS_NAMES:
            row[f"ap_{cname}"] = float(np.median([aps[cname] for aps, _ in per_seed]))
        row["map"] = float(np.median([m for _, m in per_seed]))
        row["map_per_seed"] = [m for _, m in per_seed]
        table.append(row)
    _write_ablation_outputs(out, table, seeds)
    return table


def _write_ablation_outputs(out, table, seeds):
    csv_path = out / "ablation.csv"
    columns = ["mode"] + [f"ap_{c}" for c in weathersim.CLASS_NAMES] + ["map"]
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns + [f"map_seed{s}" for s in seeds])
        for row in table:
            writer.writerow(
                [row["mode"]]
                + [_format_float(row[c]) for c in columns[1:]]
                + [_format_float(v) for v in row["map_per_seed"]]
            )
    md_path = out / "ablation.md"
    with open(md_path, "w", encoding="utf-8") as f:
        f.write("| mode | " + " | ".join(f"AP {c}" for c in weathersim.CLASS_NAMES)
                + " | mAP |\n")
        f.write("|---" * (len(weathersim.CLASS_NAMES) + 2) + "|\n")
        for row in table:
            f.write(
                f"| {row['mode']} | "
                + " | ".join(f"{row[f'ap_{c}']:.3f}" for c in weathersim.CLASS_NAMES)
                + f" | {row['map']:.3f} |\n"
            )


def lambda_sweep(base_config, data, out_dir, lambdas=(0.01, 0.1, 1.0)):
    """Re-train the full configuration at several regularization weights and
    collect the final losses and mAP, proving none of them diverges."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in lambdas:
        cfg = replace(base_config, lambda_reg=float(lam))
        run_dir = out / f"lambda_{lam}"
        result = train(cfg, data, run_dir)
        with open(result.metrics_csv, encoding="utf-8") as f:
            final = list(csv.DictReader(f))[-1]
        rows.append(
            {
                "lambda": float(lam),
                "final_total": float(final["loss_total"]),
                "final_reg": float(final["loss_reg"]),
                "map": result.final_map,
            }
        )
    with open(out / "lambda_sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["lambda", "final_total", "final_reg", "map"])
        for row in rows:
            writer.writerow(
                [
                    _format_float(row["lambda"]),
                    _format_float(row["final_total"]),
                    _format_float(row["final_reg"]),
                    _format_float(row["map"]),
                ]
            )
    return rows
