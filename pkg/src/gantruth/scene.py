"""Procedural two-domain toy driving scenes with exact ground truth.

A scene is a pinhole camera looking over a flat road. Objects are
fronto-parallel boxes standing on the ground plane, so every visible pixel
has an analytic depth and therefore an analytic disparity ``f * B / Z``.

The source domain is flat-shaded with one colour per class. The target
domain renders the same geometry through a fixed style transform (palette,
texture noise, gamma, vignette, blur) whose noise is seeded by the scene
seed.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# Toy source taxonomy.
VOID, SKY, ROAD, BUILDING, CAR, PEDESTRIAN = range(6)
SOURCE_CLASSES = ("void", "sky", "road", "building", "car", "pedestrian")
THING_CLASSES = (CAR, PEDESTRIAN)

MIN_DEPTH = 2.0
MAX_DEPTH = 50.0


@dataclass(frozen=True)
class Camera:
    focal: float = 64.0  # pixels
    baseline: float = 0.5  # meters
    height: float = 1.5  # meters above the road


@dataclass(frozen=True)
class StyleConfig:
    """Parameters of the source -> target style transform.

    ``palette=False`` keeps the source colours, so ``StyleConfig.gamma_only()``
    yields a strictly monotone per-pixel relation between the two renders.
    """

    palette: bool = True
    texture_noise: float = 0.06
    noise_smoothing: float = 1.0
    gamma: float = 1.4
    vignette: float = 0.35
    blur_sigma: float = 0.6

    @classmethod
    def gamma_only(cls, gamma: float = 1.6) -> "StyleConfig":
        return cls(palette=False, texture_noise=0.0, gamma=gamma, vignette=0.0, blur_sigma=0.0)


# RGB in [0, 1], indexed by source class id.
SOURCE_PALETTE = np.array(
    [
        [0.00, 0.00, 0.00],  # void
        [0.45, 0.70, 0.95],  # sky
        [0.30, 0.30, 0.32],  # road
        [0.80, 0.55, 0.35],  # building
        [0.85, 0.15, 0.15],  # car
        [0.95, 0.85, 0.15],  # pedestrian
    ],
    dtype=np.float64,
)

TARGET_PALETTE = np.array(
    [
        [0.00, 0.00, 0.00],
        [0.82, 0.84, 0.86],  # overcast sky
        [0.42, 0.38, 0.45],
        [0.35, 0.42, 0.52],
        [0.15, 0.25, 0.65],
        [0.55, 0.20, 0.45],
    ],
    dtype=np.float64,
)

# Per-class texture noise multiplier in the target domain.
TEXTURE_GAIN = np.array([0.0, 0.3, 1.0, 1.5, 0.6, 0.8])


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    x: float  # lateral position of the box centre, meters
    z: float  # depth, meters
    width: float  # meters
    height: float  # meters


@dataclass(frozen=True)
class SceneConfig:
    """Generation defaults; everything in a SceneSpec except the seed and objects."""

    image_size: tuple[int, int] = (64, 64)
    horizon_row: float = 0.4
    camera: Camera = field(default_factory=Camera)
    min_objects: int = 0
    max_objects: int = 8
    class_weights: tuple[float, float, float] = (0.3, 0.45, 0.25)  # building, car, pedestrian
    style: StyleConfig = field(default_factory=StyleConfig)
    gap_floor: float = 0.05  # minimum mean |source - target| over a batch, in [-1, 1] units

    def __post_init__(self):
        if not 0.2 <= self.horizon_row <= 0.6:
            raise ValueError(f"horizon_row must lie in [0.2, 0.6], got {self.horizon_row}")
        if not 0 <= self.min_objects <= self.max_objects <= 8:
            raise ValueError("object count bounds must satisfy 0 <= min <= max <= 8")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size too small: {self.image_size}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "camera" in d and isinstance(d["camera"], dict):
            d["camera"] = Camera(**d["camera"])
        if "style" in d and isinstance(d["style"], dict):
            d["style"] = StyleConfig(**d["style"])
        for key in ("image_size", "class_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    image_size: tuple[int, int]
    horizon_row: float
    objects: tuple[ObjectSpec, ...]
    camera: Camera
    style: StyleConfig = field(default_factory=StyleConfig)

    @property
    def horizon_px(self) -> float:
        return self.horizon_row * self.image_size[0]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Instance:
    class_id: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1; x1/y1 exclusive
    mask: np.ndarray  # bool, H x W


@dataclass
class SceneGroundTruth:
    semantic: np.ndarray  # uint8, H x W, source ids
    disparity: np.ndarray  # float32, H x W, pixels
    instances: list[Instance]


# (depth range in meters, width range, height range)
_CLASS_GEOMETRY = {
    BUILDING: ((20.0, 45.0), (6.0, 18.0), (6.0, 30.0)),
    CAR: ((4.0, 18.0), (1.6, 2.0), (1.3, 1.7)),
    PEDESTRIAN: ((3.0, 10.0), (0.5, 0.8), (1.5, 1.9)),
}


def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneSpec:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    h, w = config.image_size
    cam = config.camera
    v_h = config.horizon_row * h
    cx = w / 2.0
    # nearest depth whose ground contact still falls inside the image
    z_floor = max(MIN_DEPTH, cam.focal * cam.height / (h - v_h))

    weights = np.asarray(config.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects = []
    for _ in range(n):
        cls = (BUILDING, CAR, PEDESTRIAN)[int(rng.choice(3, p=weights))]
        (z_lo, z_hi), (w_lo, w_hi), (h_lo, h_hi) = _CLASS_GEOMETRY[cls]
        z_lo = min(max(z_lo, z_floor), MAX_DEPTH)
        z_hi = min(max(z_hi, z_lo), MAX_DEPTH)
        z = float(rng.uniform(z_lo, z_hi))
        width = float(rng.uniform(w_lo, w_hi))
        height = float(rng.uniform(h_lo, h_hi))
        # clip physical size so the projected box stays inside the frame
        width = min(width, 0.98 * w * z / cam.focal)
        v_bottom = v_h + cam.focal * cam.height / z
        height = min(height, 0.98 * v_bottom * z / cam.focal)
        x_lo = (0.0 - cx) * z / cam.focal + width / 2
        x_hi = (w - cx) * z / cam.focal - width / 2
        x = float(rng.uniform(x_lo, x_hi))
        objects.append(ObjectSpec(cls, x, z, width, height))

    return SceneSpec(
        seed=int(seed),
        image_size=(int(h), int(w)),
        horizon_row=float(config.horizon_row),
        objects=tuple(objects),
        camera=cam,
        style=config.style,
    )


def project_box(spec: SceneSpec, obj: ObjectSpec) -> tuple[float, float, float, float]:
    """Continuous image-plane box (u0, v0, u1, v1) of an object."""
    cam = spec.camera
    cx = spec.image_size[1] / 2.0
    u0 = cx + cam.focal * (obj.x - obj.width / 2) / obj.z
    u1 = cx + cam.focal * (obj.x + obj.width / 2) / obj.z
    v1 = spec.horizon_px + cam.focal * cam.height / obj.z
    v0 = v1 - cam.focal * obj.height / obj.z
    return u0, v0, u1, v1


def _rasterize(spec: SceneSpec):
    """Semantic ids, disparity and per-pixel object index (-1 = background)."""
    h, w = spec.image_size
    cam = spec.camera
    rows = np.arange(h, dtype=np.float64) + 0.5
    cols = np.arange(w, dtype=np.float64) + 0.5
    v_h = spec.horizon_px

    semantic = np.full((h, w), SKY, dtype=np.uint8)
    disparity = np.zeros((h, w), dtype=np.float64)
    below = rows > v_h
    semantic[below, :] = ROAD
    # ground plane: Z = f*h_cam/(v - v_h)  =>  f*B/Z = B*(v - v_h)/h_cam
    disparity[below, :] = (cam.baseline * (rows[below] - v_h) / cam.height)[:, None]

    owner = np.full((h, w), -1, dtype=np.int64)
    # painter's algorithm; stable sort keeps generation order for equal depths
    order = sorted(range(len(spec.objects)), key=lambda i: -spec.objects[i].z)
    for i in order:
        obj = spec.objects[i]
        u0, v0, u1, v1 = project_box(spec, obj)
        rmask = (rows >= v0) & (rows < v1)
        cmask = (cols >= u0) & (cols < u1)
        cover = rmask[:, None] & cmask[None, :]
        semantic[cover] = obj.class_id
        disparity[cover] = cam.focal * cam.baseline / obj.z
        owner[cover] = i
    return semantic, disparity, owner


def render_source(spec: SceneSpec) -> tuple[np.ndarray, SceneGroundTruth]:
    """Flat-shaded source render, float32 (3, H, W) in [-1, 1], plus ground truth."""
    semantic, disparity, owner = _rasterize(spec)
    instances = []
    for i, obj in enumerate(spec.objects):
        if obj.class_id not in THING_CLASSES:
            continue
        mask = owner == i
        if not mask.any():
            continue  # fully occluded
        ys, xs = np.nonzero(mask)
        box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        instances.append(Instance(obj.class_id, box, mask))
    rgb = SOURCE_PALETTE[semantic]
    image = _to_signed(_quantize(rgb))
    gt = SceneGroundTruth(semantic, disparity.astype(np.float32), instances)
    return image, gt


def render_target(spec: SceneSpec) -> np.ndarray:
    """Target-domain render of the same geometry, float32 (3, H, W) in [-1, 1]."""
    semantic, _, _ = _rasterize(spec)
    style = spec.style
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed, 0x7A5])
    palette = TARGET_PALETTE if style.palette else SOURCE_PALETTE
    rgb = palette[semantic].copy()

    if style.texture_noise > 0:
        noise = rng.standard_normal((h, w, 3))
        if style.noise_smoothing > 0:
            noise = ndimage.gaussian_filter(noise, sigma=(style.noise_smoothing, style.noise_smoothing, 0))
            noise /= max(noise.std(), 1e-12)
        rgb += style.texture_noise * TEXTURE_GAIN[semantic][..., None] * noise
    if style.blur_sigma > 0:
        rgb = ndimage.gaussian_filter(rgb, sigma=(style.blur_sigma, style.blur_sigma, 0), mode="nearest")
    rgb = np.clip(rgb, 0.0, 1.0)
    if style.gamma != 1.0:
        rgb = rgb**style.gamma
    if style.vignette > 0:
        yy = (np.arange(h) + 0.5) / h - 0.5
        xx = (np.arange(w) + 0.5) / w - 0.5
        r2 = (yy[:, None] ** 2 + xx[None, :] ** 2) / 0.5
        rgb = rgb * (1.0 - style.vignette * r2)[..., None]
    return _to_signed(_quantize(np.clip(rgb, 0.0, 1.0)))


def _quantize(rgb: np.ndarray) -> np.ndarray:
    return np.round(rgb * 255.0).astype(np.uint8)


def _to_signed(rgb8: np.ndarray) -> np.ndarray:
    # uint8 HWC -> float32 CHW in [-1, 1]; the inverse of to_uint8 exactly
    return np.moveaxis(rgb8.astype(np.float32) / np.float32(127.5) - np.float32(1.0), -1, -3).copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """float (..., 3, H, W) in [-1, 1] -> uint8 (..., H, W, 3)."""
    x = np.clip((np.asarray(image, dtype=np.float32) + 1.0) * 127.5, 0, 255)
    return np.moveaxis(np.round(x).astype(np.uint8), -3, -1).copy()


def from_uint8(rgb8: np.ndarray) -> np.ndarray:
    return _to_signed(np.asarray(rgb8, dtype=np.uint8))


def domain_gap(specs) -> float:
    """Mean per-pixel |source - target| over a batch of scenes, in [-1, 1] units."""
    if not specs:
        raise ValueError("domain gap of an empty batch is undefined")
    return float(np.mean([np.abs(render_source(s)[0] - render_target(s)).mean() for s in specs]))


def check_domain_gap(specs, floor: float) -> float:
    gap = domain_gap(specs)
    if gap <= floor:
        raise ValueError(f"domain gap {gap:.4f} does not exceed the floor {floor}")
    return gap
