"""Adaptation architecture at toy scale.

A five-block convolutional feature extractor feeds a dense anchor head on
block 5. The target-domain feed-forward can be corrected by residual feature
recovery blocks (zero-initialized so adaptation starts from the unmodified
detector), while prior estimation heads and a plain domain discriminator
attach behind gradient reversal at blocks 4 and 5.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autograd import Tensor, ops


class Module:
    """Tiny parameter container; registration order defines checkpoint
    layout."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._modules.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for child in self._modules.values():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def state_arrays(self):
        """Parameters then buffers, in declaration order."""
        entries = [(name, p.data) for name, p in self.named_parameters()]
        entries += list(self.named_buffers())
        return entries


class ModuleList(Module):
    def __init__(self, children=()):
        super().__init__()
        self._items = []
        for child in children:
            self.append(child)

    def append(self, child):
        self._modules[str(len(self._items))] = child
        self._items.append(child)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, idx):
        return self._items[idx]

    def __len__(self):
        return len(self._items)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 zero_init=False, bias_init=0.0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=np.float32)
        else:
            std = np.sqrt(2.0 / (in_ch * kernel * kernel))
            w = rng.normal(0.0, std, (out_ch, in_ch, kernel, kernel)).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(out_ch, bias_init, dtype=np.float32),
                           requires_grad=True)

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def param_count(self):
        return self.weight.size + self.bias.size


class BatchNorm2d(Module):
    def __init__(self, ch, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(ch, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(ch, dtype=np.float32))
        self.register_buffer("running_var", np.ones(ch, dtype=np.float32))

    def __call__(self, x):
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )

    def param_count(self):
        return self.gamma.size + self.beta.size


@dataclass
class ModelConfig:
    widths: tuple = (8, 16, 32, 32, 32)
    in_channels: int = 3
    num_classes: int = 3
    anchor_sizes: tuple = (16.0, 32.0, 64.0)
    image_size: int = 128
    head_channels: int = 64
    pen_levels: tuple = ()
    rfrb_levels: tuple = ()
    disc_levels: tuple = ()
    pen_channels: int = 64
    pen_out_channels: int = 1
    disc_channels: int = 64
    grl_coeff: float = 1.0
    freeze_blocks: tuple = ()
    pal_on_corrected: bool = True

    def normalized(self):
        cfg = ModelConfig(**{**asdict(self)})
        cfg.widths = tuple(int(w) for w in self.widths)
        cfg.anchor_sizes = tuple(float(s) for s in self.anchor_sizes)
        cfg.pen_levels = tuple(sorted(int(l) for l in self.pen_levels))
        cfg.rfrb_levels = tuple(sorted(int(l) for l in self.rfrb_levels))
        cfg.disc_levels = tuple(sorted(int(l) for l in self.disc_levels))
        cfg.freeze_blocks = tuple(sorted(int(b) for b in self.freeze_blocks))
        return cfg


class FeatureExtractor(Module):
    """Five conv blocks, each [conv3x3 -> relu] x2 then 2x2 max-pool; block
    l halves the spatial dims, so block l output is input / 2^l."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.widths = cfg.widths
        blocks = []
        in_ch = cfg.in_channels
        for width in cfg.widths:
            conv_a = Conv2d(in_ch, width, 3, rng, padding=1)
            conv_b = Conv2d(width, width, 3, rng, padding=1)
            block = Module()
            block.conv_a = conv_a
            block.conv_b = conv_b
            blocks.append(block)
            in_ch = width
        self.blocks = ModuleList(blocks)

    def freeze(self, block_indices):
        """Disable gradients for the given 1-based block indices."""
        for idx in block_indices:
            for p in self.blocks[idx - 1].conv_a.parameters():
                p.requires_grad = False
            for p in self.blocks[idx - 1].conv_b.parameters():
                p.requires_grad = False

    def run_block(self, level, x):
        block = self.blocks[level - 1]
        h = ops.relu(block.conv_a(x))
        h = ops.relu(block.conv_b(h))
        return ops.pool2d(h, "max", 2, 2)


class RfrbBlock(Module):
    """Residual correction for block l computed from the block l-1 output:
    max-pool 2x2, two relu convs, then a zero-initialized linear conv so the
    residual starts at exactly zero."""

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.conv1 = Conv2d(in_ch, in_ch, 3, rng, padding=1)
        self.conv2 = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.conv3 = Conv2d(out_ch, out_ch, 3, rng, padding=1, zero_init=True)

    def __call__(self, prev_feat):
        h = ops.pool2d(prev_feat, "max", 2, 2)
        h = ops.relu(self.conv1(h))
        h = ops.relu(self.conv2(h))
        return self.conv3(h)

    def param_count(self):
        return sum(c.param_count() for c in (self.conv1, self.conv2, self.conv3))

    @staticmethod
    def expected_param_count(in_ch, out_ch):
        """Closed-form parameter count from the layer listing."""
        return (
            (in_ch * in_ch * 9 + in_ch)
            + (in_ch * out_ch * 9 + out_ch)
            + (out_ch * out_ch * 9 + out_ch)
        )


class PenHead(Module):
    """Prior estimation head: gradient reversal, 1x1 and two 3x3 convs with
    BN+ReLU, then a tanh conv mapped onto [0, 1]."""

    def __init__(self, in_ch, mid_ch, out_ch, rng):
        super().__init__()
        self.conv1 = Conv2d(in_ch, mid_ch, 1, rng)
        self.bn1 = BatchNorm2d(mid_ch)
        self.conv2 = Conv2d(mid_ch, mid_ch, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(mid_ch)
        self.conv3 = Conv2d(mid_ch, mid_ch, 3, rng, padding=1)
        self.bn3 = BatchNorm2d(mid_ch)
        self.conv4 = Conv2d(mid_ch, out_ch, 3, rng, padding=1)

    def __call__(self, feat, grl_coeff=1.0):
        h = ops.grad_reverse(feat, grl_coeff)
        h = ops.relu(self.bn1(self.conv1(h)))
        h = ops.relu(self.bn2(self.conv2(h)))
        h = ops.relu(self.bn3(self.conv3(h)))
        h = ops.tanh(self.conv4(h))
        return ops.affine(h, 0.5, 0.5)  # [-1, 1] -> [0, 1]

    def param_count(self):
        convs = sum(c.param_count() for c in (self.conv1, self.conv2, self.conv3, self.conv4))
        bns = sum(b.param_count() for b in (self.bn1, self.bn2, self.bn3))
        return convs + bns

    @staticmethod
    def expected_param_count(in_ch, mid_ch, out_ch):
        return (
            (in_ch * mid_ch * 1 + mid_ch) + 2 * mid_ch
            + (mid_ch * mid_ch * 9 + mid_ch) + 2 * mid_ch
            + (mid_ch * mid_ch * 9 + mid_ch) + 2 * mid_ch
            + (mid_ch * out_ch * 9 + out_ch)
        )


class DomainDiscriminator(Module):
    """Gradient reversal plus a small 1x1 conv stack ending in one logit per
    spatial location."""

    def __init__(self, in_ch, mid_ch, rng):
        super().__init__()
        self.conv1 = Conv2d(in_ch, mid_ch, 1, rng)
        self.conv2 = Conv2d(mid_ch, mid_ch, 1, rng)
        self.conv3 = Conv2d(mid_ch, 1, 1, rng)

    def __call__(self, feat, grl_coeff=1.0):
        h = ops.grad_reverse(feat, grl_coeff)
        h = ops.relu(self.conv1(h))
        h = ops.relu(self.conv2(h))
        return self.conv3(h)


class DetectionHead(Module):
    """Dense single-stage head on block-5 features: per cell and anchor an
    objectness logit, class logits, and 4 box deltas."""

    def __init__(self, in_ch, num_classes, num_anchors, mid_ch, rng):
        super().__init__()
        self.num_classes = num_classes
        self.num_anchors = num_anchors
        self.tower1 = Conv2d(in_ch, mid_ch, 3, rng, padding=1)
        self.tower2 = Conv2d(mid_ch, mid_ch, 3, rng, padding=1)
        # objectness bias starts negative so early training prefers background
        self.obj_head = Conv2d(mid_ch, num_anchors, 3, rng, padding=1, bias_init=-2.0)
        self.cls_head = Conv2d(mid_ch, num_anchors * num_classes, 3, rng, padding=1)
        self.box_head = Conv2d(mid_ch, num_anchors * 4, 3, rng, padding=1)

    def __call__(self, feat):
        h = ops.relu(self.tower1(feat))
        h = ops.relu(self.tower2(h))
        return self.obj_head(h), self.cls_head(h), self.box_head(h)


# ---------------------------------------------------------------------------
# anchors, box coding, NMS


def make_anchors(grid_h, grid_w, stride, sizes):
    """Anchor boxes (xyxy) ordered anchor-major then row-major over cells,
    matching the channel-first layout of the head outputs."""
    ys = (np.arange(grid_h, dtype=np.float32) + 0.5) * stride
    xs = (np.arange(grid_w, dtype=np.float32) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    anchors = []
    for size in sizes:
        half = float(size) / 2.0
        anchors.append(
            np.stack(
                [cx - half, cy - half, cx + half, cy + half], axis=-1
            ).reshape(-1, 4)
        )
    return np.concatenate(anchors, axis=0)


def encode_boxes(gt, anchors):
    """Box -> delta (tx, ty, tw, th) relative to anchors (center/size)."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gcx = gt[:, 0] + gw / 2
    gcy = gt[:, 1] + gh / 2
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)],
        axis=1,
    ).astype(np.float32)


def decode_boxes(deltas, anchors, image_size=None):
    """Delta + anchor -> absolute xyxy box, optionally clipped to the image."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if image_size is not None:
        boxes = np.clip(boxes, 0.0, float(image_size))
    return boxes.astype(np.float32)


def box_iou_matrix(a, b):
    """Pairwise IoU between (N, 4) and (M, 4) xyxy boxes."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float32)
    ix = np.maximum(
        0.0,
        np.minimum(a[:, None, 2], b[None, :, 2])
        - np.maximum(a[:, None, 0], b[None, :, 0]),
    )
    iy = np.maximum(
        0.0,
        np.minimum(a[:, None, 3], b[None, :, 3])
        - np.maximum(a[:, None, 1], b[None, :, 1]),
    )
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter, dtype=np.float32)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, iou_threshold=0.5):
    """Greedy descending-score suppression; ties broken by lower index."""
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float32).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must align")
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(int(idx))
        if len(kept) == len(scores):
            break
        ious = box_iou_matrix(boxes[idx : idx + 1], boxes).reshape(-1)
        suppressed |= ious > iou_threshold
        suppressed[idx] = True
    return kept


# ---------------------------------------------------------------------------
# assembled model


class AdaptiveDetector(Module):
    """Extractor + detection head with optional prior heads, residual
    recovery blocks and domain discriminators per the mode configuration."""

    def __init__(self, config, rng):
        super().__init__()
        cfg = config.normalized()
        self.config = cfg
        self.extractor = FeatureExtractor(cfg, rng)
        self.head = DetectionHead(
            cfg.widths[4], cfg.num_classes, len(cfg.anchor_sizes),
            cfg.head_channels, rng,
        )
        pens = Module()
        for level in cfg.pen_levels:
            setattr(pens, f"p{level}",
                    PenHead(cfg.widths[level - 1], cfg.pen_channels,
                            cfg.pen_out_channels, rng))
        self.pens = pens
        rfrbs = Module()
        for level in cfg.rfrb_levels:
            setattr(rfrbs, f"r{level}",
                    RfrbBlock(cfg.widths[level - 2], cfg.widths[level - 1], rng))
        self.rfrbs = rfrbs
        discs = Module()
        for level in cfg.disc_levels:
            setattr(discs, f"d{level}",
                    DomainDiscriminator(cfg.widths[level - 1], cfg.disc_channels, rng))
        self.discs = discs
        if cfg.freeze_blocks:
            self.extractor.freeze(cfg.freeze_blocks)
        grid = cfg.image_size // 32
        self.anchors = make_anchors(grid, grid, 32, cfg.anchor_sizes)

    # -- feature pipelines

    def feature_forward_source(self, x):
        """Plain block cascade; residual corrections never touch it."""
        self._check_input(x)
        feats = {}
        h = x
        for level in range(1, 6):
            h = self.extractor.run_block(level, h)
            feats[level] = h
        return feats

    def feature_forward_target(self, x):
        """Cascade with residual corrections at the configured blocks; each
        correction is computed from the (possibly already corrected)
        previous block output."""
        self._check_input(x)
        feats = {}
        residuals = {}
        h = x
        for level in range(1, 6):
            prev = h
            h = self.extractor.run_block(level, h)
            if level in self.config.rfrb_levels:
                delta = getattr(self.rfrbs, f"r{level}")(prev)
                h = ops.add(h, delta)
                residuals[level] = delta
            feats[level] = h
        return feats, residuals

    def _check_input(self, x):
        H, W = x.shape[2], x.shape[3]
        if H % 32 or W % 32:
            raise ValueError(f"input dims {H}x{W} must be divisible by 32")

    # -- attachable heads

    def pen_forward(self, level, feat):
        if level not in self.config.pen_levels:
            raise ValueError(f"no prior estimation head attached at block {level}")
        return getattr(self.pens, f"p{level}")(feat, self.config.grl_coeff)

    def disc_forward(self, level, feat):
        if level not in self.config.disc_levels:
            raise ValueError(f"no domain discriminator attached at block {level}")
        return getattr(self.discs, f"d{level}")(feat, self.config.grl_coeff)

    def detect_forward(self, f5):
        return self.head(f5)

    def decode_predictions(self, obj, cls, box, index=0, image_size=None):
        """Batched head outputs -> (boxes, scores (A*h*w, C), obj) for the
        image at ``index``."""
        A = len(self.config.anchor_sizes)
        C = self.config.num_classes
        grid = obj.shape[-1]
        n_anchors = A * grid * grid
        obj_flat = obj.data[index].reshape(n_anchors)
        cls_flat = (
            cls.data[index].reshape(A, C, grid, grid).transpose(0, 2, 3, 1).reshape(n_anchors, C)
        )
        box_flat = (
            box.data[index].reshape(A, 4, grid, grid).transpose(0, 2, 3, 1).reshape(n_anchors, 4)
        )
        boxes = decode_boxes(box_flat, self.anchors, image_size)
        obj_p = ops.stable_sigmoid(obj_flat)
        z = cls_flat - cls_flat.max(axis=1, keepdims=True)
        ez = np.exp(z)
        cls_p = ez / ez.sum(axis=1, keepdims=True)
        scores = obj_p[:, None] * cls_p
        return boxes, scores, obj_p

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_model(config, seed=0):
    return AdaptiveDetector(config, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# checkpoint format WXA1

_CKPT_MAGIC = b"WXA1"


def save_checkpoint(path, model, iteration=0, rng_state=None, extra=None):
    """Magic, LE u32 header length, JSON header, then every parameter and
    buffer as little-endian f32 in declaration order."""
    entries = model.state_arrays()
    header = {
        "format": "WXA1",
        "config": asdict(model.config),
        "iteration": int(iteration),
        "rng_state": rng_state,
        "arrays": [
            {"name": name, "shape": list(arr.shape)} for name, arr in entries
        ],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Rebuild the model recorded in a WXA1 file; returns (model, header)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a WXA1 checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg_dict = dict(header["config"])
        for key in ("widths", "anchor_sizes", "pen_levels", "rfrb_levels",
                    "disc_levels", "freeze_blocks"):
            cfg_dict[key] = tuple(cfg_dict[key])
        config = ModelConfig(**cfg_dict)
        model = AdaptiveDetector(config, np.random.default_rng(0))
        entries = model.state_arrays()
        if len(entries) != len(header["arrays"]):
            raise ValueError(f"{path}: array count mismatch")
        for (name, arr), meta in zip(entries, header["arrays"]):
            if list(arr.shape) != meta["shape"]:
                raise ValueError(
                    f"{path}: shape mismatch for {name}: "
                    f"{list(arr.shape)} vs {meta['shape']}"
                )
            count = int(np.prod(arr.shape)) if arr.shape else 1
            data = np.frombuffer(f.read(count * 4), dtype="<f4").reshape(arr.shape)
            arr[...] = data
    return model, header
