"""Dataset loading, IMU-mask synthesis, and a seeded synthetic scene generator.

Directory layout (all stems must match across subdirectories):

    <root>/images/<stem>.png        8-bit RGB scene
    <root>/masks/<stem>.png         8-bit single channel, values 0 obstacle,
                                    1 water, 2 sky, 4 ignore
    <root>/imus/<stem>.png          8-bit single channel, binary horizon mask
                                    (0/1; 0/255 also accepted on load)
    <root>/annotations/<stem>.json  frame annotation, schema below
    <root>/dataset.json             manifest (generator settings, stem list)

Annotation schema::

    {
      "water_edge": [[column, row], ...],        # strictly increasing columns
      "obstacles": [{"bbox": [x, y, w, h], "danger": bool}, ...],
      "danger_zone_row": int | null              # rows below are the danger zone
    }

Bounding boxes cover pixels [x, x+w) x [y, y+h) in (column, row) order.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError

LABEL_OBSTACLE = 0
LABEL_WATER = 1
LABEL_SKY = 2
LABEL_IGNORE = 4
VALID_LABELS = frozenset((LABEL_OBSTACLE, LABEL_WATER, LABEL_SKY, LABEL_IGNORE))

SUBDIRS = ("images", "masks", "imus", "annotations")


@dataclass
class Obstacle:
    bbox: tuple  # (x, y, w, h) pixels
    danger: bool

    def to_dict(self):
        return {"bbox": list(self.bbox), "danger": self.danger}

    @classmethod
    def from_dict(cls, d):
        return cls(bbox=tuple(int(v) for v in d["bbox"]), danger=bool(d["danger"]))


@dataclass
class FrameAnnotation:
    water_edge: list = field(default_factory=list)   # (column, row) samples
    obstacles: list = field(default_factory=list)
    danger_zone_row: int = None
    horizon: tuple = None  # optional ((col, row), (col, row)) generating line

    def validate(self, height=None, width=None):
        cols = [c for c, _ in self.water_edge]
        if any(b <= a for a, b in zip(cols, cols[1:])):
            raise ConfigError("water_edge columns must be strictly increasing")
        for obstacle in self.obstacles:
            x, y, w, h = obstacle.bbox
            if w < 1 or h < 1 or x < 0 or y < 0:
                raise ConfigError(f"invalid bbox {obstacle.bbox}")
            if width is not None and (x + w > width or y + h > height):
                raise ConfigError(f"bbox {obstacle.bbox} exceeds {height}x{width} frame")

    def to_dict(self):
        out = {"water_edge": [[int(c), int(r)] for c, r in self.water_edge],
               "obstacles": [o.to_dict() for o in self.obstacles],
               "danger_zone_row": self.danger_zone_row}
        if self.horizon is not None:
            out["horizon"] = [[float(c), float(r)] for c, r in self.horizon]
        return out

    @classmethod
    def from_dict(cls, d):
        row = d.get("danger_zone_row")
        horizon = d.get("horizon")
        return cls(water_edge=[(int(c), int(r)) for c, r in d.get("water_edge", [])],
                   obstacles=[Obstacle.from_dict(o) for o in d.get("obstacles", [])],
                   danger_zone_row=None if row is None else int(row),
                   horizon=None if horizon is None else
                   tuple((float(c), float(r)) for c, r in horizon))


@dataclass
class SegSample:
    image: np.ndarray        # float32 [3, H, W] in [0, 1]
    label: np.ndarray        # uint8 [H, W], values in VALID_LABELS
    imu: np.ndarray          # uint8 [H, W], strictly 0/1
    annotation: FrameAnnotation = None
    stem: str = ""


def imu_mask_from_horizon(p0, p1, height, width):
    """Binary mask with ones strictly above the line through two (col, row) points."""
    c0, r0 = float(p0[0]), float(p0[1])
    c1, r1 = float(p1[0]), float(p1[1])
    if c0 == c1:
        raise ConfigError("horizon endpoints must differ in column")
    cols = np.arange(width, dtype=np.float64)
    line_rows = r0 + (cols - c0) * (r1 - r0) / (c1 - c0)
    rows = np.arange(height, dtype=np.float64)[:, None]
    return (rows < line_rows[None, :]).astype(np.uint8)


# ---------------------------------------------------------------------------
# disk IO


def _write_png(path, array):
    Image.fromarray(array).save(path, format="PNG")


def save_sample(root, sample):
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    rgb = np.clip(sample.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    _write_png(root / "images" / f"{sample.stem}.png", rgb.transpose(1, 2, 0))
    _write_png(root / "masks" / f"{sample.stem}.png", sample.label)
    _write_png(root / "imus" / f"{sample.stem}.png", sample.imu)
    if sample.annotation is not None:
        text = json.dumps(sample.annotation.to_dict(), indent=2, sort_keys=True)
        (root / "annotations" / f"{sample.stem}.json").write_text(text + "\n")


def _load_imu(path, stem, problems):
    raw = np.asarray(Image.open(path).convert("L"))
    values = set(np.unique(raw).tolist())
    if values <= {0, 1}:
        return raw.astype(np.uint8)
    if values <= {0, 255}:
        return (raw > 0).astype(np.uint8)
    problems.append(f"{stem}: IMU mask has non-binary values {sorted(values)[:8]}")
    return None


def load_dataset(root, stems=None):
    """Load samples by stem; ``stems=None`` loads every image stem found.

    Unknown label values are remapped to the ignore class with a warning.
    Missing or malformed per-sample files are collected and raised together.
    """
    root = Path(root)
    if stems is None:
        image_dir = root / "images"
        if not image_dir.is_dir():
            raise DatasetError(f"{root}: no images/ directory")
        stems = sorted(p.stem for p in image_dir.glob("*.png"))
    samples = []
    problems = []
    for stem in stems:
        paths = {sub: root / sub / f"{stem}.{'json' if sub == 'annotations' else 'png'}"
                 for sub in SUBDIRS}
        missing = [str(p) for sub, p in paths.items()
                   if sub != "annotations" and not p.is_file()]
        if missing:
            problems.append(f"{stem}: missing {', '.join(missing)}")
            continue
        image = np.asarray(Image.open(paths["images"]).convert("RGB"), dtype=np.float32)
        image = image.transpose(2, 0, 1) / 255.0
        label = np.asarray(Image.open(paths["masks"]).convert("L")).copy()
        unknown = set(np.unique(label).tolist()) - VALID_LABELS
        if unknown:
            warnings.warn(f"{stem}: unknown label values {sorted(unknown)} "
                          f"remapped to ignore ({LABEL_IGNORE})", stacklevel=2)
            label[np.isin(label, sorted(unknown))] = LABEL_IGNORE
        imu = _load_imu(paths["imus"], stem, problems)
        if imu is None:
            continue
        annotation = None
        if paths["annotations"].is_file():
            annotation = FrameAnnotation.from_dict(
                json.loads(paths["annotations"].read_text()))
        samples.append(SegSample(image=image, label=label.astype(np.uint8), imu=imu,
                                 annotation=annotation, stem=stem))
    if problems:
        raise DatasetError("dataset problems:\n" + "\n".join(problems))
    return samples


# ---------------------------------------------------------------------------
# synthetic scene generator


def _obstacle_patch(rng, w, h):
    """Boolean [h, w] patch filling >= 0.9 of its tight bounding box."""
    mask = np.ones((h, w), dtype=bool)
    kind = rng.choice(["rect", "clipped", "rounded"])
    if kind == "clipped" and min(w, h) >= 5:
        # clip corner triangles; legs <= 0.2 * side keeps fill >= 0.92
        a = max(1, int(0.2 * w * rng.uniform(0.3, 1.0)))
        b = max(1, int(0.2 * h * rng.uniform(0.3, 1.0)))
        tri = (np.arange(h)[:, None] / b + np.arange(w)[None, :] / a) < 1.0
        mask &= ~tri
        mask &= ~tri[:, ::-1]
        mask &= ~tri[::-1, :]
        mask &= ~tri[::-1, ::-1]
    elif kind == "rounded" and min(w, h) >= 7:
        # quarter-circle corners; radius <= 0.3 * side keeps fill >= 0.92
        r = max(2, int(0.3 * min(w, h) * rng.uniform(0.5, 1.0)))
        yy, xx = np.mgrid[0:h, 0:w]
        for cy in (r - 0.5, h - r - 0.5):
            for cx in (r - 0.5, w - r - 0.5):
                corner = ((yy - cy) ** 2 + (xx - cx) ** 2 > r * r)
                corner &= ((yy < cy) if cy < h / 2 else (yy > cy))
                corner &= ((xx < cx) if cx < w / 2 else (xx > cx))
                mask &= ~corner
    # pixel rounding can overshoot the clip budget on small shapes: fall back
    ys, xs = np.nonzero(mask)
    tight = mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    if tight.mean() < 0.9:
        return np.ones((h, w), dtype=bool)
    return mask


def _texture(rng, height, width, base, gradient, ripple_amp):
    img = np.empty((height, width, 3), dtype=np.float64)
    rows = np.linspace(0.0, 1.0, height)[:, None]
    for ch in range(3):
        img[:, :, ch] = base[ch] + gradient[ch] * rows
    cols = np.arange(width)
    ripple = ripple_amp * np.sin(cols / rng.uniform(4.0, 14.0)
                                 + rng.uniform(0, 2 * np.pi))
    img += ripple[None, :, None]
    img += rng.normal(0.0, 0.02, size=(height, width, 1))
    return img


def generate_scene(rng, height, width):
    """One synthetic maritime scene: image, mask, IMU mask, annotation."""
    r_left = rng.uniform(0.25, 0.55) * height
    r_right = np.clip(r_left + rng.uniform(-0.15, 0.15) * height,
                      0.2 * height, 0.6 * height)
    p0, p1 = (0.0, r_left), (width - 1.0, r_right)
    imu = imu_mask_from_horizon(p0, p1, height, width)

    label = np.where(imu == 1, LABEL_SKY, LABEL_WATER).astype(np.uint8)
    sky = _texture(rng, height, width, base=(0.55, 0.65, 0.8),
                   gradient=(0.25, 0.2, 0.1), ripple_amp=0.01)
    water = _texture(rng, height, width, base=(0.1, 0.25, 0.35),
                     gradient=(0.1, 0.08, 0.05), ripple_amp=0.05)
    image = np.where((imu == 1)[:, :, None], sky, water)

    danger_zone_row = int(0.7 * height)
    obstacles = []
    for _ in range(int(rng.integers(0, 6))):
        ow = int(rng.integers(4, max(5, width // 5 + 1)))
        oh = int(rng.integers(4, max(5, height // 5 + 1)))
        x = int(rng.integers(0, width - ow + 1))
        edge_here = int(min(r_left, r_right))
        lo = max(0, edge_here - (oh // 2 if rng.random() < 0.4 else 0))
        hi = height - oh
        if hi <= lo:
            continue
        y = int(rng.integers(lo, hi + 1))
        patch = _obstacle_patch(rng, ow, oh)
        region = label[y:y + oh, x:x + ow]
        region[patch] = LABEL_OBSTACLE
        color = rng.uniform(0.05, 0.45, size=3)
        image[y:y + oh, x:x + ow][patch] = color + rng.normal(0, 0.03, (patch.sum(), 3))
        ys, xs = np.nonzero(patch)
        bbox = (x + int(xs.min()), y + int(ys.min()),
                int(xs.max() - xs.min()) + 1, int(ys.max() - ys.min()) + 1)
        danger = bbox[1] + bbox[3] - 1 >= danger_zone_row
        obstacles.append(Obstacle(bbox=bbox, danger=danger))

    if rng.random() < 0.5:
        # uncertainty band along the horizon, as per-pixel annotations often carry
        cols = np.arange(width, dtype=np.float64)
        line = r_left + cols * (r_right - r_left) / (width - 1.0)
        rows = np.arange(height, dtype=np.float64)[:, None]
        band = np.abs(rows - line[None, :]) <= 1.0
        label[band & (label != LABEL_OBSTACLE)] = LABEL_IGNORE

    water_edge = []
    for c in range(width):
        water_rows = np.nonzero(label[:, c] == LABEL_WATER)[0]
        if water_rows.size:
            water_edge.append((c, int(water_rows[0])))
    annotation = FrameAnnotation(water_edge=water_edge, obstacles=obstacles,
                                 danger_zone_row=danger_zone_row, horizon=(p0, p1))
    annotation.validate(height, width)
    # snap to the 8-bit grid so disk round-trips are exact
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.float32) / 255.0
    return SegSample(image=quantized.transpose(2, 0, 1), label=label, imu=imu,
                     annotation=annotation)


def synth_generate(seed, count, height, width, out_dir):
    """Write a deterministic synthetic dataset; returns the list of stems."""
    if height % 32 or width % 32:
        raise ConfigError(f"synthetic scenes must be 32-divisible, got {height}x{width}")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    for sub in SUBDIRS:
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    stems = []
    for index in range(count):
        sample = generate_scene(rng, height, width)
        sample.stem = f"scene_{index:05d}"
        save_sample(out_dir, sample)
        stems.append(sample.stem)
    manifest = {"generator": "mariseg.synth", "seed": seed, "count": count,
                "height": height, "width": width,
                "labels": {"obstacle": LABEL_OBSTACLE, "water": LABEL_WATER,
                           "sky": LABEL_SKY, "ignore": LABEL_IGNORE},
                "stems": stems}
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return stems
