"""Synthetic weather-degraded detection corpus.

Renders labeled shape scenes with per-pixel depth, then degrades them with
the physical haze model (attenuation toward ambient light driven by
transmission t = exp(-beta * depth)) or an additive rain/snow residue layer,
keeping the exact degradation map as a ground-truth prior next to an
estimated one.
"""

import hashlib
import json
import shutil
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import priors
from .priors import PriorMap

CLASS_NAMES = ("circle", "square", "triangle")

# base colors give each class a consistent hue so the toy task is learnable
# at tiny network scale; all are saturated (low dark channel) and distinct
# from the sky/ground gradient, jitter keeps appearance varied
_CLASS_COLORS = np.array(
    [
        [0.85, 0.15, 0.15],  # circle: red
        [0.90, 0.80, 0.15],  # square: yellow
        [0.15, 0.25, 0.90],  # triangle: blue
    ],
    dtype=np.float32,
)


@dataclass
class SceneObject:
    cls: int
    cx: float
    cy: float
    size: float
    color: tuple
    depth: float


@dataclass
class SceneSpec:
    """Full description of one renderable scene; rendering is a pure
    function of this spec."""

    width: int
    height: int
    objects: list
    bg_top: tuple
    bg_bottom: tuple
    depth_far: float = 3.0
    depth_near: float = 0.5
    seed: int = 0

    def validate(self, min_size=4.0, max_size=None, max_objects=16):
        if len(self.objects) > max_objects:
            raise ValueError(f"more than {max_objects} objects in scene")
        for obj in self.objects:
            half = obj.size / 2.0
            if (
                obj.cx - half < 0
                or obj.cy - half < 0
                or obj.cx + half > self.width
                or obj.cy + half > self.height
            ):
                raise ValueError("object extends outside the canvas")
            if obj.size < min_size or (max_size and obj.size > max_size):
                raise ValueError(f"object size {obj.size} outside configured range")
            if obj.depth < 0:
                raise ValueError("object depth must be non-negative")


@dataclass
class RainMask:
    """Directional streak intensity field in [0, 1]."""

    values: np.ndarray
    noise_level: float
    angle: float
    streak_length: int

    def __post_init__(self):
        if not (70.0 <= self.angle <= 110.0):
            raise ValueError(f"rain angle must lie in [70, 110], got {self.angle}")
        self.values = np.clip(np.asarray(self.values, dtype=np.float32), 0.0, 1.0)


@dataclass
class SnowMask:
    values: np.ndarray
    noise_level: float
    blob_radius: int

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float32), 0.0, 1.0)


@dataclass
class DetectionSample:
    """One image with its labels and priors, as consumed by the trainer."""

    image: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    domain: str = "source"
    weather: str = "haze"
    depth: np.ndarray = None
    gt_prior: PriorMap = None
    est_prior: PriorMap = None
    seed: int = 0


# ---------------------------------------------------------------------------
# scene rendering


def _object_mask(obj, width, height):
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    half = obj.size / 2.0
    if CLASS_NAMES[obj.cls] == "square":
        return (
            (jj >= obj.cx - half)
            & (jj < obj.cx + half)
            & (ii >= obj.cy - half)
            & (ii < obj.cy + half)
        )
    if CLASS_NAMES[obj.cls] == "circle":
        return (jj - obj.cx) ** 2 + (ii - obj.cy) ** 2 <= half * half
    # upward triangle: apex at top, base at bottom of the bounding square
    y_rel = (ii - (obj.cy - half)) / obj.size
    x_off = np.abs(jj - obj.cx)
    return (y_rel >= 0) & (y_rel <= 1) & (x_off <= half * y_rel)


def render_scene(spec):
    """Rasterize a scene spec into (image, boxes, labels, depth).

    Boxes are tight (x_min, y_min, x_max, y_max) bounds of each object's own
    pixel mask, with exclusive max. Farther objects are drawn first so nearer
    ones occlude them; the returned bounds ignore occlusion.
    """
    spec.validate()
    H, W = spec.height, spec.width
    ramp = np.linspace(0.0, 1.0, H, dtype=np.float32)[:, None, None]
    top = np.asarray(spec.bg_top, dtype=np.float32)[None, None, :]
    bottom = np.asarray(spec.bg_bottom, dtype=np.float32)[None, None, :]
    image = np.broadcast_to(top + (bottom - top) * ramp, (H, W, 3)).copy()
    depth = np.broadcast_to(
        spec.depth_far + (spec.depth_near - spec.depth_far) * ramp[:, :, 0], (H, W)
    ).astype(np.float32).copy()

    boxes, labels = [], []
    order = sorted(range(len(spec.objects)), key=lambda k: -spec.objects[k].depth)
    rendered = {}
    for k in order:
        obj = spec.objects[k]
        mask = _object_mask(obj, W, H)
        if not mask.any():
            continue
        image[mask] = np.asarray(obj.color, dtype=np.float32)
        depth[mask] = obj.depth
        ys, xs = np.nonzero(mask)
        rendered[k] = (
            [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)],
            obj.cls,
        )
    for k in sorted(rendered):
        box, cls = rendered[k]
        boxes.append(box)
        labels.append(cls)
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    labels = np.asarray(labels, dtype=np.int64)
    return np.clip(image, 0.0, 1.0), boxes, labels, depth


def random_scene_spec(config, rng):
    """Draw a scene with limited pairwise overlap between objects."""
    W = H = config.image_size
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects = []
    placed = []
    for _ in range(n_obj):
        for _attempt in range(30):
            size = float(rng.uniform(*config.size_range))
            half = size / 2.0
            cx = float(rng.uniform(half, W - half))
            cy = float(rng.uniform(half, H - half))
            box = (cx - half, cy - half, cx + half, cy + half)
            if all(_box_iou_xyxy(box, b) < 0.25 for b in placed):
                placed.append(box)
                cls = int(rng.integers(0, len(CLASS_NAMES)))
                color = np.clip(
                    _CLASS_COLORS[cls] + rng.uniform(-0.12, 0.12, 3).astype(np.float32),
                    0.05,
                    0.95,
                )
                depth = float(rng.uniform(*config.object_depth_range))
                objects.append(
                    SceneObject(cls, cx, cy, size, tuple(float(c) for c in color), depth)
                )
                break
    bg_top = tuple(
        float(c)
        for c in np.clip(
            np.array([0.45, 0.55, 0.66]) + rng.uniform(-0.1, 0.1, 3), 0.05, 0.9
        )
    )
    bg_bottom = tuple(
        float(c)
        for c in np.clip(
            np.array([0.28, 0.30, 0.18]) + rng.uniform(-0.1, 0.1, 3), 0.02, 0.9
        )
    )
    return SceneSpec(
        width=W,
        height=H,
        objects=objects,
        bg_top=bg_top,
        bg_bottom=bg_bottom,
        depth_far=config.depth_far,
        depth_near=config.depth_near,
    )


def _box_iou_xyxy(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


# ---------------------------------------------------------------------------
# degradation models


def apply_haze(clean, depth, beta, light):
    """Attenuate scene radiance toward the ambient light.

    I = J * t + A * (1 - t) with t = exp(-beta * depth). Returns the hazy
    image and the exact transmission map as the ground-truth prior.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    clean = priors.ensure_imagef(clean)
    depth = np.asarray(depth, dtype=np.float32)
    if depth.shape != clean.shape[:2]:
        raise ValueError("depth dims must match the image")
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise ValueError("depth must be finite and non-negative")
    light = np.asarray(light, dtype=np.float32).reshape(3)
    t = np.exp(-np.float32(beta) * depth)
    hazy = clean * t[:, :, None] + light[None, None, :] * (1.0 - t[:, :, None])
    return np.clip(hazy, 0.0, 1.0), PriorMap(t, kind="haze", scale_level=0)


def _shift2d(arr, di, dj):
    """Shift with zero fill (no wrap-around)."""
    out = np.zeros_like(arr)
    H, W = arr.shape
    src_i = slice(max(0, -di), min(H, H - di))
    dst_i = slice(max(0, di), min(H, H + di))
    src_j = slice(max(0, -dj), min(W, W - dj))
    dst_j = slice(max(0, dj), min(W, W + dj))
    out[dst_i, dst_j] = arr[src_i, src_j]
    return out


def gen_rain_mask(shape, noise_level, angle, streak_length, seed):
    """White Gaussian noise thresholded at two sigma, smeared along the
    streak direction, clipped into [0, 1]."""
    if not (70.0 <= angle <= 110.0):
        raise ValueError(f"rain angle must lie in [70, 110], got {angle}")
    if not (0.0 < noise_level <= 1.0):
        raise ValueError(f"noise_level must lie in (0, 1], got {noise_level}")
    if streak_length < 1:
        raise ValueError(f"streak_length must be >= 1, got {streak_length}")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_level, size=shape)
    excess = np.maximum(noise - 2.0 * noise_level, 0.0).astype(np.float32)
    theta = np.deg2rad(angle)
    dx, dy = np.cos(theta), np.sin(theta)
    acc = np.zeros(shape, dtype=np.float32)
    for k in range(streak_length):
        step = k - (streak_length - 1) / 2.0
        acc += _shift2d(excess, int(round(step * dy)), int(round(step * dx)))
    values = np.clip(acc, 0.0, 1.0)
    return RainMask(values, noise_level, angle, streak_length)


def gen_snow_mask(shape, noise_level, blob_radius, seed):
    """Isotropic blob residues: thresholded noise smeared over a disc."""
    if not (0.0 < noise_level <= 1.0):
        raise ValueError(f"noise_level must lie in (0, 1], got {noise_level}")
    if blob_radius < 1:
        raise ValueError(f"blob_radius must be >= 1, got {blob_radius}")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_level, size=shape)
    excess = np.maximum(noise - 2.0 * noise_level, 0.0).astype(np.float32)
    acc = np.zeros(shape, dtype=np.float32)
    for di in range(-blob_radius, blob_radius + 1):
        for dj in range(-blob_radius, blob_radius + 1):
            if di * di + dj * dj <= blob_radius * blob_radius:
                acc += _shift2d(excess, di, dj)
    values = np.clip(acc, 0.0, 1.0)
    return SnowMask(values, noise_level, blob_radius)


def apply_rain(clean, mask, intensity):
    """I = clip(J + intensity * mask, 0, 1); the prior keeps the pre-clamp
    residue (itself within [0, 1])."""
    if not (0.0 < intensity <= 1.0):
        raise ValueError(f"intensity must lie in (0, 1], got {intensity}")
    clean = priors.ensure_imagef(clean)
    values = mask.values if hasattr(mask, "values") else np.asarray(mask, np.float32)
    if values.shape != clean.shape[:2]:
        raise ValueError("mask dims must match the image")
    residue = np.clip(intensity * values, 0.0, 1.0)
    rainy = np.clip(clean + residue[:, :, None], 0.0, 1.0)
    return rainy, PriorMap(residue, kind="rain", scale_level=0)


def apply_snow(clean, mask, intensity):
    """Same additive contract as rain with an isotropic mask."""
    image, prior = apply_rain(clean, mask, intensity)
    return image, PriorMap(prior.values, kind="snow", scale_level=0)


# ---------------------------------------------------------------------------
# dataset synthesis


@dataclass
class SynthConfig:
    out_dir: str = "dataset"
    weather: str = "haze"
    n_source: int = 500
    n_target: int = 500
    n_val: int = 200
    image_size: int = 128
    min_objects: int = 3
    max_objects: int = 8
    size_range: tuple = (16.0, 48.0)
    depth_near: float = 0.5
    depth_far: float = 3.0
    object_depth_range: tuple = (0.5, 2.5)
    beta_range: tuple = (0.4, 0.8)
    ambient_range: tuple = (0.7, 0.95)
    noise_levels: tuple = (0.2, 0.3, 0.4)
    angle_range: tuple = (70.0, 110.0)
    streak_length_range: tuple = (6, 14)
    blob_radius: int = 2
    intensity_range: tuple = (0.5, 0.9)
    blend: str = "additive"
    seed: int = 0

    def validate(self):
        if self.weather not in ("haze", "rain", "snow"):
            raise ValueError(f"unknown weather kind '{self.weather}'")
        if min(self.n_source, self.n_target, self.n_val) < 1:
            raise ValueError("each split needs at least one sample")
        lo, hi = self.angle_range
        if lo < 70.0 or hi > 110.0 or lo > hi:
            raise ValueError(f"angle range [{lo}, {hi}] outside [70, 110]")
        if self.blend != "additive":
            raise ValueError(f"unsupported blend mode '{self.blend}'")


@dataclass
class SampleRecord:
    image: str
    labels: str
    gt_prior: str
    est_prior: str
    seed: int
    meta: dict = field(default_factory=dict)
    depth: str = None


@dataclass
class DatasetManifest:
    root: str
    weather: str
    seed: int
    config: dict
    splits: dict  # name -> {"domain", "labels_role", "records": [SampleRecord]}

    def records(self, split):
        return self.splits[split]["records"]

    def count(self, split):
        return len(self.splits[split]["records"])


def save_png(path, image):
    u8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_labels_jsonl(path, boxes, labels):
    with open(path, "w", encoding="utf-8") as f:
        for box, cls in zip(boxes, labels):
            f.write(
                json.dumps({"class": int(cls), "bbox": [float(v) for v in box]}) + "\n"
            )


def load_labels_jsonl(path):
    boxes, labels = [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            boxes.append(rec["bbox"])
            labels.append(rec["class"])
    return (
        np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
        np.asarray(labels, dtype=np.int64),
    )


def _degrade(clean, depth, config, rng, sample_seed):
    """Apply the configured weather model; returns (image, gt prior, meta)."""
    if config.weather == "haze":
        beta = float(rng.uniform(*config.beta_range))
        base = float(rng.uniform(*config.ambient_range))
        light = np.clip(base + rng.uniform(-0.03, 0.03, 3), 0.05, 1.0).astype(np.float32)
        image, gt = apply_haze(clean, depth, beta, light)
        return image, gt, {"beta": beta, "light": [float(v) for v in light]}
    intensity = float(rng.uniform(*config.intensity_range))
    noise = float(rng.choice(np.asarray(config.noise_levels)))
    if config.weather == "rain":
        angle = float(rng.uniform(*config.angle_range))
        length = int(rng.integers(config.streak_length_range[0], config.streak_length_range[1] + 1))
        mask = gen_rain_mask(clean.shape[:2], noise, angle, length, seed=sample_seed)
        image, gt = apply_rain(clean, mask, intensity)
        meta = {"noise_level": noise, "angle": angle, "streak_length": length,
                "intensity": intensity}
    else:
        mask = gen_snow_mask(clean.shape[:2], noise, config.blob_radius, seed=sample_seed)
        image, gt = apply_snow(clean, mask, intensity)
        meta = {"noise_level": noise, "blob_radius": config.blob_radius,
                "intensity": intensity}
    return image, gt, meta


def synthesize_dataset(config):
    """Write the full corpus: a clean labeled source split plus degraded
    target and validation splits whose labels are kept for evaluation only.

    Every sample stores the exact synthesis prior and an estimated prior
    computed from the 8-bit image a consumer would load. Fully deterministic
    per (config, seed); partial output is removed on failure.
    """
    config.validate()
    root = Path(config.out_dir)
    created_root = not root.exists()
    try:
        return _synthesize(config, root)
    except Exception:
        if created_root and root.exists():
            shutil.rmtree(root)
        raise


_SPLIT_LAYOUT = (
    ("train_src", "source", "train"),
    ("train_tgt", "target", "eval_only"),
    ("val_tgt", "target", "eval"),
)


def _synthesize(config, root):
    seq = np.random.SeedSequence(config.seed)
    children = seq.spawn(len(_SPLIT_LAYOUT))
    splits = {}
    counts = {"train_src": config.n_source, "train_tgt": config.n_target,
              "val_tgt": config.n_val}
    for (name, domain, labels_role), child in zip(_SPLIT_LAYOUT, children):
        split_dir = root / name
        for sub in ("images", "labels", "priors_gt", "priors_est", "depth"):
            (split_dir / sub).mkdir(parents=True, exist_ok=True)
        records = []
        sample_seeds = child.generate_state(counts[name])
        for k in range(counts[name]):
            sample_seed = int(sample_seeds[k])
            rng = np.random.default_rng(sample_seed)
            spec = random_scene_spec(config, rng)
            spec.seed = sample_seed
            clean, boxes, labels, depth = render_scene(spec)
            stem = f"{name}_{k:05d}"
            meta = {}
            depth_rel = None
            if domain == "source":
                image = clean
                gt = priors.ideal_prior(clean.shape[:2], config.weather)
            else:
                image, gt, meta = _degrade(clean, depth, config, rng, sample_seed)
                if config.weather == "haze":
                    depth_rel = f"{name}/depth/{stem}.npy"
                    np.save(root / depth_rel, depth)
            image_rel = f"{name}/images/{stem}.png"
            labels_rel = f"{name}/labels/{stem}.jsonl"
            gt_rel = f"{name}/priors_gt/{stem}.pri"
            est_rel = f"{name}/priors_est/{stem}.pri"
            save_png(root / image_rel, image)
            save_labels_jsonl(root / labels_rel, boxes, labels)
            priors.save_pri(root / gt_rel, gt)
            # estimate from the quantized image so stored estimates match
            # what cmd_prior would recompute from the PNG
            stored = load_png(root / image_rel)
            est = priors.estimate_prior(stored, config.weather)
            priors.save_pri(root / est_rel, est)
            records.append(
                SampleRecord(
                    image=image_rel,
                    labels=labels_rel,
                    gt_prior=gt_rel,
                    est_prior=est_rel,
                    seed=sample_seed,
                    meta=meta,
                    depth=depth_rel,
                )
            )
        splits[name] = {
            "domain": domain,
            "labels_role": labels_role,
            "records": records,
        }
    manifest = DatasetManifest(
        root=str(root),
        weather=config.weather,
        seed=config.seed,
        config=asdict(config),
        splits=splits,
    )
    save_manifest(root / "manifest.json", manifest)
    return manifest


def save_manifest(path, manifest):
    doc = {
        "version": 1,
        "weather": manifest.weather,
        "seed": manifest.seed,
        "config": manifest.config,
        "splits": {
            name: {
                "domain": split["domain"],
                "labels_role": split["labels_role"],
                "count": len(split["records"]),
                "records": [asdict(r) for r in split["records"]],
            }
            for name, split in manifest.splits.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_manifest(path, check_files=True):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    root = path.parent
    splits = {}
    for name, split in doc["splits"].items():
        records = [SampleRecord(**r) for r in split["records"]]
        if split["count"] != len(records):
            raise ValueError(f"{path}: split '{name}' count mismatch")
        if check_files:
            for r in records:
                for rel in (r.image, r.labels, r.gt_prior, r.est_prior, r.depth):
                    if rel is not None and not (root / rel).exists():
                        raise FileNotFoundError(f"{path}: missing file {rel}")
        splits[name] = {
            "domain": split["domain"],
            "labels_role": split["labels_role"],
            "records": records,
        }
    return DatasetManifest(
        root=str(root),
        weather=doc["weather"],
        seed=doc["seed"],
        config=doc["config"],
        splits=splits,
    )


def load_sample(manifest, split, index):
    """Materialize one DetectionSample from a manifest record."""
    split_info = manifest.splits[split]
    rec = split_info["records"][index]
    root = Path(manifest.root)
    image = load_png(root / rec.image)
    boxes, labels = load_labels_jsonl(root / rec.labels)
    depth = np.load(root / rec.depth) if rec.depth else None
    return DetectionSample(
        image=image,
        boxes=boxes,
        labels=labels,
        domain=split_info["domain"],
        weather=manifest.weather,
        depth=depth,
        gt_prior=priors.load_pri(root / rec.gt_prior),
        est_prior=priors.load_pri(root / rec.est_prior),
        seed=rec.seed,
    )


def file_checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
