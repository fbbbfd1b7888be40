"""Procedural street scenes and weather degradations.

Scenes are layered: sky above a horizon, a road trapezoid towards a vanishing
point, building blocks standing on the horizon, tree blobs, terrain, and
vehicles on the road.  Classes: 0 sky, 1 road, 2 building, 3 vehicle,
4 vegetation.
"""
from __future__ import annotations

import csv
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

CLASS_NAMES = ("sky", "road", "building", "vehicle", "vegetation")
SKY, ROAD, BUILDING, VEHICLE, VEGETATION = range(5)
WEATHER_KINDS = ("night", "rain", "fog", "snow")
DEFAULT_SEQUENCE = ("night", "rain", "fog", "snow")

_BASE_COLORS = {
    SKY: (0.55, 0.72, 0.92),
    ROAD: (0.42, 0.42, 0.45),
    BUILDING: (0.62, 0.40, 0.32),
    VEGETATION: (0.22, 0.50, 0.20),
}
_VEHICLE_PALETTE = ((0.85, 0.12, 0.10), (0.12, 0.22, 0.80), (0.90, 0.78, 0.10), (0.10, 0.65, 0.70))
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (128, 128)
    num_classes: int = 5
    texture_noise: float = 0.03
    foliage_contrast: float = 0.35
    color_jitter: float = 0.06


@dataclass
class LabeledImage:
    image: np.ndarray  # H x W x 3 in [0, 1]
    label: np.ndarray | None = None  # H x W class ids


def _jitter(rng, color, amount):
    return np.clip(np.asarray(color) + rng.uniform(-amount, amount, 3), 0.0, 1.0)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> LabeledImage:
    H, W = spec.image_size
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    label = np.full((H, W), VEGETATION, dtype=np.uint8)

    horizon = rng.uniform(0.32, 0.48) * H
    label[rows < horizon] = SKY

    # road: trapezoid from a vanishing point on the horizon to the bottom edge
    vx = rng.uniform(0.35, 0.65) * W
    half_bottom = rng.uniform(0.3, 0.55) * W
    depth = np.clip((rows - horizon) / (H - horizon), 0.0, 1.0)
    road = (rows >= horizon) & (np.abs(cols - vx) <= 0.04 * W + depth * half_bottom)
    label[road] = ROAD

    # buildings standing on the horizon
    for _ in range(rng.integers(2, 6)):
        bw = rng.uniform(0.08, 0.22) * W
        bx = rng.uniform(0, W - bw)
        top = horizon - rng.uniform(0.1, 0.3) * H
        base = horizon + rng.uniform(0.0, 0.06) * H
        box = (cols >= bx) & (cols < bx + bw) & (rows >= top) & (rows < base)
        label[box & (label != ROAD)] = BUILDING

    # tree blobs around the horizon, away from the road
    for _ in range(rng.integers(1, 4)):
        cx = rng.uniform(0, W)
        cy = horizon + rng.uniform(-0.12, 0.04) * H
        rx, ry = rng.uniform(0.05, 0.12) * W, rng.uniform(0.06, 0.14) * H
        blob = ((cols - cx) / rx) ** 2 + ((rows - cy) / ry) ** 2 <= 1.0
        label[blob & ~road] = VEGETATION

    # vehicles on the road, larger when nearer
    vehicle_colors = []
    for _ in range(rng.integers(1, 4)):
        t = rng.uniform(0.25, 0.9)
        cy = horizon + t * (H - horizon)
        vw = (0.08 + 0.22 * t) * W
        vh = 0.6 * vw
        half_road = 0.04 * W + t * half_bottom
        cx = vx + rng.uniform(-0.7, 0.7) * max(half_road - vw / 2, 1.0)
        box = (np.abs(cols - cx) <= vw / 2) & (rows <= cy) & (rows > cy - vh)
        label[box] = VEHICLE
        vehicle_colors.append((box, _jitter(rng, _VEHICLE_PALETTE[rng.integers(len(_VEHICLE_PALETTE))], spec.color_jitter)))

    image = np.zeros((H, W, 3))
    for cls, base in _BASE_COLORS.items():
        image[label == cls] = _jitter(rng, base, spec.color_jitter)
    for box, color in vehicle_colors:
        image[box & (label == VEHICLE)] = color
    # sky brightens towards the horizon
    sky = label == SKY
    image[sky] += (0.12 * rows[sky] / max(horizon, 1.0))[:, None]

    # class textures: window grid on buildings, dashed centre line on the road,
    # dark glass band on vehicles, mottled foliage
    period = int(rng.integers(6, 9))
    windows = ((rows.astype(int) % period) < period // 2) & ((cols.astype(int) % period) < period // 2)
    image[(label == BUILDING) & windows] *= 0.55
    centre = vx + depth * 0.0
    dash = (np.abs(cols - centre) <= 0.3 + 1.2 * depth) & ((rows - horizon).astype(int) % 10 < 5)
    image[(label == ROAD) & dash] = 0.85
    for box, _ in vehicle_colors:
        ys = np.nonzero(box.any(axis=1))[0]
        if len(ys):
            band = box & (rows < ys[0] + 0.35 * (ys[-1] - ys[0] + 1))
            image[band & (label == VEHICLE)] *= 0.35
    foliage = gaussian_filter(rng.standard_normal((H, W)), 1.0)
    foliage /= foliage.std() + 1e-12
    veg = label == VEGETATION
    image[veg] *= (1.0 + spec.foliage_contrast * foliage[veg])[:, None]

    smooth = gaussian_filter(rng.standard_normal((H, W, 3)), sigma=(2.0, 2.0, 0))
    smooth /= smooth.std() + 1e-12
    image += spec.texture_noise * smooth + 0.5 * spec.texture_noise * rng.standard_normal((H, W, 3))
    return LabeledImage(np.clip(image, 0.0, 1.0), label)


@dataclass(frozen=True)
class WeatherSpec:
    kind: str
    severity: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in WEATHER_KINDS:
            raise ValueError(f"unknown weather kind {self.kind!r}; expected one of {WEATHER_KINDS}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")

    def get(self, key, default):
        return self.params.get(key, default)


def depth_proxy(height: int, width: int) -> np.ndarray:
    """Normalised row depth: 1 at the top (far), 0 at the bottom row (near)."""
    d = 1.0 - np.arange(height, dtype=np.float64) / max(height - 1, 1)
    return np.repeat(d[:, None], width, axis=1)


def _airlight(image, transmission, color):
    return image * transmission[..., None] + np.asarray(color) * (1.0 - transmission[..., None])


def apply_weather(image: np.ndarray, spec: WeatherSpec, rng: np.random.Generator, label=None) -> np.ndarray:
    """Degrade a clear image; output stays in [0, 1] and severity 0 is the identity.

    With ``label`` the class-dependent effects are added too: a dark night sky
    with lamp-lit road, and snow cover on road and vegetation.
    """
    x = np.asarray(image, dtype=np.float64)
    s = spec.severity
    if s == 0.0:
        return x.copy()
    H, W = x.shape[:2]
    if spec.kind == "night":
        gamma = 1.0 + spec.get("gamma", 1.2) * s
        gain = 1.0 - spec.get("darkening", 0.65) * s
        tint = 1.0 + s * (np.asarray(spec.get("tint", (0.85, 0.9, 1.25))) - 1.0)
        out = gain * np.power(x, gamma) * tint
        if label is not None:
            sky = (label == SKY)[..., None]
            out = np.where(sky, out * (1.0 - spec.get("sky_darkening", 0.8) * min(1.0, 2 * s)), out)
            glow = spec.get("lamp_glow", 0.5) * min(1.0, 2 * s) * np.asarray((1.0, 0.75, 0.4))
            out = np.where((label == ROAD)[..., None], out + glow * (1.0 - out), out)
        out += spec.get("noise_sigma", 0.03) * s * rng.standard_normal(x.shape)
    elif spec.kind == "fog":
        beta = spec.get("beta", 2.5) * s
        t = np.exp(-beta * depth_proxy(H, W))
        out = _airlight(x, t, spec.get("airlight", (0.78, 0.78, 0.80)))
    elif spec.kind == "rain":
        veil = spec.get("veil", 0.4) * s
        out = _airlight(x * (1.0 - 0.15 * s), np.full((H, W), 1.0 - veil), spec.get("airlight", (0.70, 0.72, 0.76)))
        out += spec.get("streak_intensity", 0.35) * _rain_streaks(H, W, int(spec.get("streaks", 140) * s), spec.get("angle", 15.0), rng)[..., None]
    else:  # snow
        gray = (x @ _LUMA)[..., None]
        desat = spec.get("desaturation", 0.6) * s
        out = (1.0 - desat) * x + desat * gray + spec.get("brighten", 0.18) * s
        if label is not None:
            cover = spec.get("cover", 0.9) * min(1.0, 1.5 * s)
            cover = cover * np.isin(label, (ROAD, VEGETATION)) * rng.uniform(0.8, 1.0, (H, W))
            cover = gaussian_filter(cover, 1.0)[..., None]
            out = out + cover * (np.array([0.93, 0.94, 0.97]) - out)
        flakes = rng.random((H, W)) < spec.get("density", 0.04) * s
        flakes = gaussian_filter(flakes.astype(np.float64), 0.6) * 2.5
        out = out + np.clip(flakes, 0.0, 1.0)[..., None] * (np.array([0.95, 0.97, 1.0]) - out)
    return np.clip(out, 0.0, 1.0)


def _rain_streaks(H, W, count, angle_deg, rng) -> np.ndarray:
    mask = np.zeros((H, W))
    if count <= 0:
        return mask
    angle = np.deg2rad(angle_deg + rng.uniform(-5.0, 5.0, count))
    length = rng.uniform(0.06, 0.14, count) * H
    y0 = rng.uniform(0, H, count)
    x0 = rng.uniform(0, W, count)
    steps = np.linspace(0.0, 1.0, 16)
    ys = (y0[:, None] + steps[None] * length[:, None] * np.cos(angle)[:, None]).astype(int) % H
    xs = (x0[:, None] + steps[None] * length[:, None] * np.sin(angle)[:, None]).astype(int) % W
    np.add.at(mask, (ys.ravel(), xs.ravel()), 1.0)
    return np.clip(gaussian_filter(mask, 0.5) * 1.5, 0.0, 1.0)


# severities at which a clear-weather model keeps roughly 30-55% mIoU
BENCHMARK_SEVERITY = {"night": 0.35, "rain": 0.65, "fog": 0.55, "snow": 0.6}
# per-image severity is the domain severity times a factor drawn from this range
SEVERITY_SPREAD = (0.1, 1.6)


def default_weather(kind: str) -> WeatherSpec:
    if kind not in BENCHMARK_SEVERITY:
        raise ValueError(f"unknown weather kind {kind!r}; expected one of {WEATHER_KINDS}")
    return WeatherSpec(kind=kind, severity=BENCHMARK_SEVERITY[kind])


# ---------------------------------------------------------------- benchmark on disk

DEFAULT_SIZES = {"source_train": 400, "source_val": 100, "target_train": 200, "target_val": 50}
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("path", "label_path", "split", "domain", "seed")


def image_seed(seed: int, domain: str, split: str, index: int) -> int:
    words = [seed, _code(domain), _code(split), index]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def _code(text: str) -> int:
    return int.from_bytes(text.encode("utf-8")[:8].ljust(8, b"\0"), "little")


def render_sample(seed: int, domain: str, spec: SceneSpec = SceneSpec()) -> LabeledImage:
    """Deterministic scene for ``seed``; weather applied unless ``domain == 'source'``."""
    scene_rng, weather_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    sample = generate_scene(spec, scene_rng)
    if domain != "source":
        base = default_weather(domain)
        severity = min(1.0, base.severity * weather_rng.uniform(*SEVERITY_SPREAD))
        spec_i = WeatherSpec(domain, severity, base.params)
        sample = LabeledImage(apply_weather(sample.image, spec_i, weather_rng, sample.label), sample.label)
    return sample


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class ManifestRow:
    path: str
    label_path: str
    split: str
    domain: str
    seed: int


@dataclass
class Manifest:
    root: Path
    rows: list[ManifestRow]

    def select(self, domain: str, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.domain == domain and r.split == split]

    @property
    def domains(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.domain not in seen:
                seen.append(r.domain)
        return seen

    def write(self) -> Path:
        path = self.root / MANIFEST_NAME
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_FIELDS)
            for r in self.rows:
                w.writerow([r.path, r.label_path, r.split, r.domain, r.seed])
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path, newline="") as fh:
            rows = [
                ManifestRow(r["path"], r["label_path"], r["split"], r["domain"], int(r["seed"]))
                for r in csv.DictReader(fh)
            ]
        return cls(path.parent, rows)


def build_benchmark(out_dir, sizes: dict | None = None, seed: int = 0, domains=DEFAULT_SEQUENCE,
                    spec: SceneSpec = SceneSpec(), force: bool = False) -> Manifest:
    """Write source train/val and per-domain target train/val PNGs plus ``manifest.csv``.

    Target train images are written without labels.  The tree is built in a
    sibling temp dir and moved into place only once complete.
    """
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    out_dir = Path(out_dir)
    if out_dir.exists():
        if not force:
            raise FileExistsError(f"{out_dir} exists (use force to overwrite)")
    tmp = out_dir.with_name(out_dir.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    plan = [("source", "train", sizes["source_train"], True), ("source", "val", sizes["source_val"], True)]
    for d in domains:
        plan += [(d, "train", sizes["target_train"], False), (d, "val", sizes["target_val"], True)]
    try:
        rows = []
        for domain, split, n, with_label in plan:
            sub = Path(domain) / split
            (tmp / sub).mkdir(parents=True, exist_ok=True)
            for i in range(n):
                s = image_seed(seed, domain, split, i)
                sample = render_sample(s, domain, spec)
                rel = sub / f"{i:05d}.png"
                Image.fromarray(quantize(sample.image)).save(tmp / rel)
                lab = ""
                if with_label:
                    lab = str(sub / f"{i:05d}_label.png")
                    Image.fromarray(sample.label).save(tmp / lab)
                rows.append(ManifestRow(str(rel), lab, split, domain, s))
        manifest = Manifest(tmp, rows)
        manifest.write()
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out_dir.exists():
        shutil.rmtree(out_dir)
    tmp.rename(out_dir)
    return Manifest(out_dir, rows)


@dataclass
class ArrayDataset:
    images: np.ndarray  # N x H x W x 3 float32
    labels: np.ndarray | None  # N x H x W uint8
    domain: str = ""

    def __len__(self) -> int:
        return len(self.images)


def load_split(manifest: Manifest, domain: str, split: str, with_labels: bool = True) -> ArrayDataset:
    rows = manifest.select(domain, split)
    if not rows:
        raise ValueError(f"manifest has no rows for {domain}/{split}")
    imgs = np.stack([np.asarray(Image.open(manifest.root / r.path), dtype=np.float32) / 255.0 for r in rows])
    labels = None
    if with_labels:
        if any(not r.label_path for r in rows):
            raise ValueError(f"{domain}/{split} is unlabeled")
        labels = np.stack([np.asarray(Image.open(manifest.root / r.label_path)) for r in rows])
    return ArrayDataset(imgs, labels, domain)


def synthesize_split(seed: int, domain: str, split: str, n: int, spec: SceneSpec = SceneSpec()) -> ArrayDataset:
    """In-memory equivalent of a written split (images quantised exactly as on disk)."""
    samples = [render_sample(image_seed(seed, domain, split, i), domain, spec) for i in range(n)]
    imgs = np.stack([quantize(s.image).astype(np.float32) / 255.0 for s in samples])
    return ArrayDataset(imgs, np.stack([s.label for s in samples]), domain)
