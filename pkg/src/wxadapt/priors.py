"""Weather-specific priors extracted from images.

Haze carries its signature in the transmission map, recovered here through
the dark channel statistic; rain and snow live in an additive residue layer,
recovered by a high-pass estimate. Priors are stored as spatial maps in
[0, 1] that can be rescaled to feature-map resolutions.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

PRIOR_KINDS = ("haze", "rain", "snow", "generic")
_KIND_CODE = {k: i for i, k in enumerate(PRIOR_KINDS)}

TRANSMISSION_FLOOR = 0.05
DEFAULT_OMEGA = 0.95
DEFAULT_PATCH = 15
DEFAULT_GUIDED_RADIUS = 20
DEFAULT_GUIDED_EPS = 1e-3
DEFAULT_RESIDUE_BLUR = 2
DEFAULT_RESIDUE_THRESHOLD = 0.02


def ensure_imagef(image):
    """Validate an (H, W, 3) float image in [0, 1] and return it as float32."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty image")
    return np.clip(arr, 0.0, 1.0)


@dataclass
class PriorMap:
    """Spatial weather prior at image scale (level 0) or a conv-block scale.

    ``values`` has shape (H, W, C); every entry is clamped into [0, 1] at
    construction. ``scale_level`` l means dims are ceil(image dims / 2^l).
    """

    values: np.ndarray
    kind: str = "generic"
    scale_level: int = 0

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"prior values must be (H, W[, C]), got shape {arr.shape}")
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind '{self.kind}'")
        if self.scale_level < 0:
            raise ValueError("scale_level must be >= 0")
        self.values = np.clip(arr, 0.0, 1.0)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def plane(self):
        """First channel as a 2-D array."""
        return self.values[:, :, 0]


def dark_channel(image, patch=DEFAULT_PATCH):
    """Min over RGB then min over an edge-clamped patch window around each
    pixel. Near zero on haze-free natural images."""
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 1, got {patch}")
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty image")
    rgb_min = arr.min(axis=2)
    if patch == 1:
        return rgb_min
    r = patch // 2
    padded = np.pad(rgb_min, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch))
    return np.ascontiguousarray(win.min(axis=(2, 3)))


def estimate_atmospheric_light(image, dark):
    """Mean color of the brightest 0.1% of pixels ranked by dark channel
    value (at least one pixel); channels clamped to >= 0.05."""
    image = ensure_imagef(image)
    dark = np.asarray(dark, dtype=np.float32)
    if dark.shape != image.shape[:2]:
        raise ValueError(
            f"dark channel shape {dark.shape} does not match image {image.shape[:2]}"
        )
    n_px = max(1, int(round(dark.size * 0.001)))
    order = np.argsort(dark.reshape(-1), kind="stable")
    top = order[-n_px:]
    light = image.reshape(-1, 3)[top].mean(axis=0)
    return np.maximum(light, 0.05).astype(np.float32)


def estimate_transmission(image, light, omega=DEFAULT_OMEGA, patch=DEFAULT_PATCH):
    """t = 1 - omega * dark_channel(I / A), clamped into [0.05, 1]."""
    if not (0.0 < omega <= 1.0):
        raise ValueError(f"omega must lie in (0, 1], got {omega}")
    image = ensure_imagef(image)
    light = np.asarray(light, dtype=np.float32)
    if light.shape != (3,):
        raise ValueError("atmospheric light must be an RGB triple")
    if np.any(light <= 0):
        raise ValueError("atmospheric light channels must be > 0")
    normalized = image / light[None, None, :]
    t = 1.0 - omega * dark_channel(normalized, patch)
    t = np.clip(t, TRANSMISSION_FLOOR, 1.0)
    return PriorMap(t, kind="haze", scale_level=0)


def box_filter(values, radius):
    """Local mean over a (2r+1)^2 window, normalized by the in-bounds window
    size at the borders. Runs in O(HW) via integral images."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    arr = np.asarray(values, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    H, W, C = arr.shape

    def window_sum(a):
        cum = np.cumsum(a, axis=0)
        cum = np.pad(cum, ((1, 0), (0, 0), (0, 0)))
        hi = np.minimum(np.arange(H) + radius + 1, H)
        lo = np.maximum(np.arange(H) - radius, 0)
        a = cum[hi] - cum[lo]
        cum = np.cumsum(a, axis=1)
        cum = np.pad(cum, ((0, 0), (1, 0), (0, 0)))
        hj = np.minimum(np.arange(W) + radius + 1, W)
        lj = np.maximum(np.arange(W) - radius, 0)
        return cum[:, hj] - cum[:, lj]

    counts = window_sum(np.ones((H, W, 1)))
    out = window_sum(arr) / counts
    if squeeze:
        out = out[:, :, 0]
    return out.astype(np.float32)


def guided_filter(values, guide, radius, eps):
    """Edge-aware smoothing of ``values`` steered by a grayscale guide."""
    p = np.asarray(values, dtype=np.float64)
    g = np.asarray(guide, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError("guide and input dims must match")
    mean_g = box_filter(g, radius).astype(np.float64)
    mean_p = box_filter(p, radius).astype(np.float64)
    corr_gg = box_filter(g * g, radius).astype(np.float64)
    corr_gp = box_filter(g * p, radius).astype(np.float64)
    var_g = corr_gg - mean_g * mean_g
    cov_gp = corr_gp - mean_g * mean_p
    a = cov_gp / (var_g + eps)
    b = mean_p - a * mean_g
    mean_a = box_filter(a, radius).astype(np.float64)
    mean_b = box_filter(b, radius).astype(np.float64)
    return (mean_a * g + mean_b).astype(np.float32)


def rgb_to_gray(image):
    image = np.asarray(image, dtype=np.float32)
    return image @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


def refine_transmission(t, guide, radius=DEFAULT_GUIDED_RADIUS, eps=DEFAULT_GUIDED_EPS):
    """Guided-filter smoothing of a transmission map; output stays within
    [0.05, 1]."""
    if not isinstance(t, PriorMap):
        t = PriorMap(t, kind="haze")
    guide = ensure_imagef(guide)
    if guide.shape[:2] != (t.height, t.width):
        raise ValueError("guide dims must match the transmission map")
    refined = guided_filter(t.plane(), rgb_to_gray(guide), radius, eps)
    refined = np.clip(refined, TRANSMISSION_FLOOR, 1.0)
    return PriorMap(refined, kind=t.kind, scale_level=t.scale_level)


def extract_rain_residue(
    image, blur_radius=DEFAULT_RESIDUE_BLUR, threshold=DEFAULT_RESIDUE_THRESHOLD
):
    """High-pass residue: positive part of (image - local mean), max over
    RGB, zeroed below the threshold."""
    if blur_radius < 1:
        raise ValueError(f"blur_radius must be >= 1, got {blur_radius}")
    image = ensure_imagef(image)
    blurred = box_filter(image, blur_radius)
    residue = np.clip((image - blurred).max(axis=2), 0.0, 1.0)
    residue[residue < threshold] = 0.0
    return PriorMap(residue, kind="rain", scale_level=0)


def downscale_prior(prior, level):
    """Repeated 2x2 average pooling (edge-padded when dims are odd) from the
    prior's current scale level down to ``level``."""
    if level < prior.scale_level:
        raise ValueError(
            f"cannot upscale: prior at level {prior.scale_level}, requested {level}"
        )
    values = prior.values.astype(np.float64)
    for _ in range(level - prior.scale_level):
        H, W, _ = values.shape
        if H == 1 and W == 1:
            raise ValueError(f"downscaling to level {level} produces an empty map")
        if H % 2:
            values = np.concatenate([values, values[-1:].copy()], axis=0)
        if W % 2:
            values = np.concatenate([values, values[:, -1:].copy()], axis=1)
        H, W, C = values.shape
        values = values.reshape(H // 2, 2, W // 2, 2, C).mean(axis=(1, 3))
    return PriorMap(values.astype(np.float32), kind=prior.kind, scale_level=level)


def estimate_prior(image, kind, refine=True, omega=DEFAULT_OMEGA, patch=DEFAULT_PATCH,
                   blur_radius=DEFAULT_RESIDUE_BLUR, threshold=DEFAULT_RESIDUE_THRESHOLD,
                   guided_radius=DEFAULT_GUIDED_RADIUS, guided_eps=DEFAULT_GUIDED_EPS):
    """Run the estimator matching ``kind`` on an image."""
    if kind == "haze":
        dark = dark_channel(ensure_imagef(image), patch)
        light = estimate_atmospheric_light(image, dark)
        t = estimate_transmission(image, light, omega=omega, patch=patch)
        if refine:
            t = refine_transmission(t, image, radius=guided_radius, eps=guided_eps)
        return t
    if kind in ("rain", "snow"):
        residue = extract_rain_residue(image, blur_radius=blur_radius, threshold=threshold)
        return PriorMap(residue.values, kind=kind, scale_level=0)
    raise ValueError(f"no estimator for prior kind '{kind}'")


def ideal_prior(shape, kind):
    """The no-degradation prior: t == 1 for haze, residue == 0 otherwise."""
    H, W = shape
    if kind == "haze":
        return PriorMap(np.ones((H, W), dtype=np.float32), kind=kind)
    return PriorMap(np.zeros((H, W), dtype=np.float32), kind=kind)


def prior_for_sample(sample, kind, source="estimated"):
    """Fetch a sample's prior: the stored synthesis ground truth, or the
    matching estimator run on the sample's image."""
    if source == "gt":
        if sample.gt_prior is None:
            raise ValueError(
                "ground-truth prior requested but the sample carries none "
                "(real images have no synthesis ground truth)"
            )
        return sample.gt_prior
    if source == "estimated":
        if sample.est_prior is not None and sample.est_prior.kind == kind:
            return sample.est_prior
        return estimate_prior(sample.image, kind)
    raise ValueError(f"unknown prior source '{source}'")


# ---------------------------------------------------------------------------
# file formats

_PRI_MAGIC = b"PRI1"


def save_pri(path, prior):
    """PRI1: magic, LE u32 height/width/channels, u8 kind code, u8 scale
    level, then f32 values row-major channel-last."""
    values = prior.values
    header = struct.pack(
        "<4sIIIBB",
        _PRI_MAGIC,
        values.shape[0],
        values.shape[1],
        values.shape[2],
        _KIND_CODE[prior.kind],
        prior.scale_level,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(values.astype("<f4").tobytes())


def load_pri(path):
    with open(path, "rb") as f:
        header = f.read(struct.calcsize("<4sIIIBB"))
        magic, h, w, c, kind_code, level = struct.unpack("<4sIIIBB", header)
        if magic != _PRI_MAGIC:
            raise ValueError(f"{path}: not a PRI1 file")
        data = np.frombuffer(f.read(h * w * c * 4), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: truncated PRI1 payload")
    values = data.reshape(h, w, c)
    return PriorMap(values, kind=PRIOR_KINDS[kind_code], scale_level=level)


def save_pgm(path, values):
    """8-bit binary PGM heatmap of a 2-D map in [0, 1]."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode("ascii"))
        f.write(u8.tobytes())
