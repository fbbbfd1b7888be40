"""Weather vectors (domain-averaged amplitude spectra) and composition replay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .container import read_container, write_container

WEATHER_KIND = "weather-vector"
MIN_SIDE = 8


def amplitude_of(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel 2-D DFT of an HxWx3 image -> (amplitude, phase), each 3xHxW, unshifted."""
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite pixels")
    spec = np.fft.fft2(x.transpose(2, 0, 1), axes=(-2, -1))
    return np.abs(spec), np.angle(spec)


def inverse_of(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Inverse of :func:`amplitude_of`; returns the real HxWx3 image (unclipped)."""
    spec = amplitude * np.exp(1j * phase)
    return np.real(np.fft.ifft2(spec, axes=(-2, -1))).transpose(1, 2, 0)


def resize_bilinear(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a CxHxW array to CxH'xW'."""
    if tuple(arr.shape[-2:]) == tuple(size):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))[None]
    return F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0].numpy()


@dataclass
class WeatherVector:
    amplitude: np.ndarray  # 3 x H x W
    n_samples: int
    domain_tag: str
    canonical_size: tuple[int, int]

    @classmethod
    def empty(cls, domain_tag: str, canonical_size: tuple[int, int], channels: int = 3) -> "WeatherVector":
        return cls(np.zeros((channels, *canonical_size)), 0, domain_tag, tuple(canonical_size))

    def save(self, path) -> None:
        write_container(
            path,
            WEATHER_KIND,
            {
                "domain_tag": self.domain_tag,
                "n_samples": self.n_samples,
                "shape": list(self.amplitude.shape),
                "canonical_size": list(self.canonical_size),
            },
            {"amplitude": self.amplitude},
        )

    @classmethod
    def load(cls, path) -> "WeatherVector":
        meta, blocks = read_container(path, kind=WEATHER_KIND)
        amp = blocks["amplitude"].astype(np.float64)
        if list(amp.shape) != meta["shape"]:
            raise ValueError(f"{path}: amplitude shape disagrees with header")
        return cls(amp, int(meta["n_samples"]), meta["domain_tag"], tuple(meta["canonical_size"]))


def accumulate_weather(vec: WeatherVector, image: np.ndarray) -> WeatherVector:
    """Fold one image's amplitude spectrum into the running mean (in place)."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != tuple(vec.canonical_size):
        img = resize_bilinear(img.transpose(2, 0, 1), vec.canonical_size).transpose(1, 2, 0)
    amp, _ = amplitude_of(img)
    if amp.shape != vec.amplitude.shape:
        raise RuntimeError(f"amplitude {amp.shape} does not match accumulator {vec.amplitude.shape}")
    vec.n_samples += 1
    vec.amplitude += (amp - vec.amplitude) / vec.n_samples
    return vec


@dataclass(frozen=True)
class ComposeParams:
    sigma_range: tuple[float, float] = (0.2, 1.2)
    area_range: tuple[float, float] = (1 / 3, 1 / 2)
    aspect_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        for lo, hi in (self.sigma_range, self.area_range, self.aspect_range):
            if not 0 < lo <= hi:
                raise ValueError("ranges must be positive and ordered")


def sample_rectangle(height: int, width: int, params: ComposeParams, rng: np.random.Generator):
    """Axis-aligned rectangle (top, left, h, w) covering a uniform fraction of the image."""
    area = rng.uniform(*params.area_range) * height * width
    aspect = rng.uniform(*params.aspect_range)
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, height))
    w = int(np.clip(round(area / h), 1, width))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def region_mask(height: int, width: int, rect) -> np.ndarray:
    """M_r: 1 outside the rectangle (keep original), 0 inside (inject weather)."""
    top, left, h, w = rect
    m = np.ones((height, width))
    m[top : top + h, left : left + w] = 0.0
    return m


def stylize(image: np.ndarray, vec: WeatherVector, sigma: float) -> np.ndarray:
    """iFT(phase of ``image``, sigma * weather amplitude), clipped to [0, 1]."""
    H, W = image.shape[:2]
    _, phase = amplitude_of(image)
    amp = resize_bilinear(vec.amplitude, (H, W))
    return np.clip(inverse_of(sigma * amp, phase), 0.0, 1.0)


def inject(image: np.ndarray, vec: WeatherVector, sigma: float, rect, base: np.ndarray | None = None):
    """Weather composition with a fixed sigma and rectangle; returns (composed, M_r).

    ``base`` supplies the pixels kept outside the rectangle (defaults to ``image``);
    the injected region is always stylised from ``image``'s own phase.
    """
    x = np.asarray(image)
    H, W = x.shape[:2]
    if H < MIN_SIDE or W < MIN_SIDE:
        raise ValueError(f"image {H}x{W} too small to compose (min side {MIN_SIDE})")
    keep = x if base is None else base
    m = region_mask(H, W, rect)
    styl = stylize(x, vec, sigma).astype(x.dtype)
    return np.where(m[..., None] == 1.0, keep, styl), m


def compose(image: np.ndarray, vec: WeatherVector, params: ComposeParams, rng: np.random.Generator):
    """Inject ``vec`` into a random rectangle of ``image``; returns (composed, M_r)."""
    composed, masks = replay_all(image, [vec], params, rng)
    return composed, masks[0]


def replay_all(image: np.ndarray, vectors, params: ComposeParams, rng: np.random.Generator):
    """Compose every stored weather vector in turn; returns (composed, list of M_r).

    Each injected region is stylised from the clean image's phase, so a later
    rectangle overwrites an earlier one only where they overlap.
    """
    x = np.asarray(image)
    if not vectors:
        return x, []
    H, W = x.shape[:2]
    out = x
    masks = []
    for vec in vectors:
        sigma = rng.uniform(*params.sigma_range)
        rect = sample_rectangle(H, W, params, rng)
        out, m = inject(x, vec, sigma, rect, base=out)
        masks.append(m)
    return out, masks
