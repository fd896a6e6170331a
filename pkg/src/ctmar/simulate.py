"""Synthetic sinogram-domain metal-artifact simulation.

A deliberately simplified parallel-beam pipeline for desk-scale
training pairs: procedural jaw-like phantoms in Hounsfield units,
attenuation conversion, ray-marched forward projection, a smooth
beam-hardening distortion on metal-crossing rays, and Ram-Lak filtered
back-projection. Cone-beam geometry, polychromatic spectra and scatter
are out of scope; the streak/flare morphology is what matters here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from . import io as tio

MU_WATER = 0.0192          # attenuation of water, 1/mm
HU_MIN = -1000.0
HU_MAX = 2800.0
HU_WINDOW = HU_MAX - HU_MIN
METAL_THRESHOLD = 2800.0
FIELD_MM = 160.0           # physical field of view represented by a slice


@dataclass
class PhantomImage:
    """A square HU-valued slice with its pixel spacing in millimetres."""

    pixels: np.ndarray
    spacing: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"expected a 2-D slice, got shape {self.pixels.shape}")


@dataclass
class Sinogram:
    """Parallel-beam line integrals: n_angles x n_detectors, angles uniform on [0, pi)."""

    values: np.ndarray
    spacing: float          # detector pitch == pixel pitch, in mm

    @property
    def n_angles(self) -> int:
        return self.values.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.values.shape[1]


@dataclass
class SimParams:
    n_angles: int = 180
    n_detectors: Optional[int] = None    # default: image diagonal
    metal_hu: float = 30000.0            # pre-clip insertion value
    beam_hardening: float = 0.3
    metal_threshold: float = METAL_THRESHOLD

    def __post_init__(self):
        if self.n_angles < 8:
            raise ValueError("n_angles must be at least 8")
        if self.beam_hardening < 0:
            raise ValueError("beam_hardening must be non-negative")


def hu_to_mu(image: PhantomImage) -> np.ndarray:
    """Attenuation coefficients (1/mm) after clipping HU to the scanner window."""
    hu = np.clip(image.pixels, HU_MIN, HU_MAX)
    return MU_WATER * (1.0 + hu / 1000.0)


def mu_to_hu(mu: np.ndarray) -> np.ndarray:
    return 1000.0 * (mu / MU_WATER - 1.0)


def _default_detectors(size: int) -> int:
    return int(math.ceil(size * math.sqrt(2.0)))


def radon_forward(mu: np.ndarray, params: SimParams, spacing: float = 1.0) -> Sinogram:
    """Line integrals by bilinear ray marching at half-pixel steps."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 2 or mu.shape[0] != mu.shape[1]:
        raise ValueError(f"expected a square image, got {mu.shape}")
    size = mu.shape[0]
    n_det = params.n_detectors or _default_detectors(size)
    center = (size - 1) / 2.0
    det = np.arange(n_det) - (n_det - 1) / 2.0
    step = 0.5
    half_span = size * math.sqrt(2.0) / 2.0
    march = np.arange(-half_span, half_span + step, step)

    # each detector reading averages two half-offset sub-rays, which kills
    # the worst lattice-alias error of the bilinear footprint
    sub = np.concatenate([det - 0.25, det + 0.25])
    sino = np.empty((params.n_angles, n_det), dtype=np.float64)
    angles = np.arange(params.n_angles) * math.pi / params.n_angles
    for i, theta in enumerate(angles):
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        # detector axis (cos, sin); ray direction perpendicular to it
        px = center + sub[:, None] * cos_t - march[None, :] * sin_t
        py = center + sub[:, None] * sin_t + march[None, :] * cos_t
        samples = map_coordinates(mu, [py.ravel(), px.ravel()], order=1,
                                  mode="constant", cval=0.0)
        rays = samples.reshape(2, n_det, march.size).sum(axis=2) * step * spacing
        sino[i] = 0.5 * (rays[0] + rays[1])
    return Sinogram(values=sino, spacing=spacing)


def _ramp_kernel(size: int) -> np.ndarray:
    """Discrete Ram-Lak kernel (spatial form whose FFT is the band-limited ramp)."""
    kernel = np.zeros(size)
    kernel[0] = 0.25
    odd = np.arange(1, size // 2 + 1, 2)
    kernel[odd] = -1.0 / (math.pi * odd) ** 2
    kernel[-odd] = -1.0 / (math.pi * odd) ** 2
    return kernel


def fbp_reconstruct(sino: Sinogram, height: int, width: int) -> np.ndarray:
    """Ramp-filtered back-projection; returns attenuation in 1/mm."""
    if height != width:
        raise ValueError("reconstruction target must be square")
    n_angles, n_det = sino.values.shape
    # frequency-domain ramp, zero-padded to the next power of two >= 2 n_det
    padded = max(64, 1 << int(math.ceil(math.log2(2 * n_det))))
    ramp = np.real(np.fft.fft(_ramp_kernel(padded)))
    proj = np.zeros((n_angles, padded))
    proj[:, :n_det] = sino.values / sino.spacing     # to per-pixel units
    filtered = np.real(np.fft.ifft(np.fft.fft(proj, axis=1) * ramp[None, :], axis=1))
    filtered = filtered[:, :n_det]

    center = (height - 1) / 2.0
    det_center = (n_det - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width]
    xs = xs - center
    ys = ys - center
    recon = np.zeros((height, width), dtype=np.float64)
    angles = np.arange(n_angles) * math.pi / n_angles
    for i, theta in enumerate(angles):
        t = xs * math.cos(theta) + ys * math.sin(theta) + det_center
        recon += np.interp(t.ravel(), np.arange(n_det), filtered[i],
                           left=0.0, right=0.0).reshape(height, width)
    # the projections were rescaled to pixel-unit path lengths before
    # filtering, so the back-projection already returns mu in 1/mm
    return recon * (math.pi / n_angles)


def simulate_ma_pair(clean: PhantomImage, metal_mask: np.ndarray,
                     params: SimParams) -> Tuple[PhantomImage, PhantomImage]:
    """Degrade ``clean`` with inserted metal plus beam hardening.

    The metal's attenuation is taken from the unclipped insertion HU,
    so the reconstruction saturates the display window at the implant;
    the returned MA image is clipped back to [-1000, 2800] HU. An
    empty mask degenerates to the plain projection round trip.
    """
    mask = np.asarray(metal_mask).astype(bool)
    if mask.shape != clean.pixels.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image "
                         f"{clean.pixels.shape}")
    n_metal = int(mask.sum())
    if 0 < n_metal < 10:
        raise ValueError(f"metal mask has {n_metal} pixels; a metal-artifact "
                         f"slice needs at least 10")

    mu = hu_to_mu(clean)
    if n_metal:
        mu[mask] = MU_WATER * (1.0 + params.metal_hu / 1000.0)
    sino = radon_forward(mu, params, clean.spacing)

    if n_metal and params.beam_hardening > 0:
        metal_trace = radon_forward(mask.astype(np.float64), params, clean.spacing)
        hits = metal_trace.values > 1e-9
        s = sino.values
        s[hits] = s[hits] + params.beam_hardening * s[hits] ** 2 / (1.0 + s[hits])

    recon = fbp_reconstruct(sino, *clean.pixels.shape)
    ma_hu = np.clip(mu_to_hu(recon), HU_MIN, HU_MAX)
    if n_metal:
        # the implant itself always reads as saturated metal
        ma_hu[mask] = HU_MAX
    return PhantomImage(ma_hu, clean.spacing), clean


# -- procedural phantoms -----------------------------------------------------------


def _fill_ellipse(img: np.ndarray, cy: float, cx: float, ry: float, rx: float,
                  value: float, angle: float = 0.0) -> None:
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    y = ys - cy
    x = xs - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (x * ca + y * sa) / rx
    v = (-x * sa + y * ca) / ry
    img[u * u + v * v <= 1.0] = value


def smooth_phantom(size: int, seed: int = 0) -> PhantomImage:
    """A smooth soft-tissue phantom for reconstruction sanity checks."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), HU_MIN)
    _fill_ellipse(img, size * 0.5, size * 0.5, size * 0.40, size * 0.36, 0.0)
    _fill_ellipse(img, size * 0.42, size * 0.48, size * 0.16, size * 0.20,
                  80.0, angle=rng.uniform(0, math.pi))
    _fill_ellipse(img, size * 0.62, size * 0.55, size * 0.10, size * 0.08, -60.0)
    img = gaussian_filter(img, sigma=size / 48.0)
    return PhantomImage(np.clip(img, HU_MIN, HU_MAX), spacing=FIELD_MM / size)


def jaw_phantom(size: int, rng: np.random.Generator) -> PhantomImage:
    """A dental-slice lookalike: soft-tissue oval, bony arch, bright teeth."""
    img = np.full((size, size), HU_MIN)
    jitter = lambda s: 1.0 + rng.uniform(-s, s)
    cy, cx = size * 0.52 * jitter(0.03), size * 0.5 * jitter(0.03)
    _fill_ellipse(img, cy, cx, size * 0.40 * jitter(0.05), size * 0.36 * jitter(0.05),
                  rng.uniform(20.0, 60.0))
    # bony arch under the tooth row
    arch_r = size * 0.26 * jitter(0.05)
    arch_cy = cy + size * 0.04
    n_teeth = int(rng.integers(8, 13))
    tooth_angles = np.linspace(math.pi * 0.15, math.pi * 0.85, n_teeth)
    for a in tooth_angles:
        by = arch_cy + arch_r * math.sin(a) * 0.8
        bx = cx + arch_r * math.cos(a)
        _fill_ellipse(img, by, bx, size * 0.045, size * 0.045, rng.uniform(600.0, 1000.0))
    for a in tooth_angles:
        ty = arch_cy + arch_r * math.sin(a) * 0.8
        tx = cx + arch_r * math.cos(a)
        r_tooth = size * rng.uniform(0.022, 0.032)
        _fill_ellipse(img, ty, tx, r_tooth, r_tooth * jitter(0.2),
                      rng.uniform(1400.0, 2400.0), angle=rng.uniform(0, math.pi))
    img = gaussian_filter(img, sigma=max(0.6, size / 128.0))
    return PhantomImage(np.clip(img, HU_MIN, HU_MAX), spacing=FIELD_MM / size)


def random_metal_mask(phantom: PhantomImage, rng: np.random.Generator,
                      min_pixels: int = 10, max_pixels: int = 200) -> np.ndarray:
    """A small blob of implant pixels centred on a bright (tooth) structure."""
    img = phantom.pixels
    size = img.shape[0]
    bright = np.argwhere(img > 1200.0)
    if len(bright):
        cy, cx = bright[rng.integers(len(bright))]
    else:
        cy, cx = size // 2, size // 2
    target = int(rng.integers(min_pixels, max_pixels + 1))
    radius = max(1.9, math.sqrt(target / math.pi))
    ys, xs = np.mgrid[0:size, 0:size]
    mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
    # grow until the in-bounds blob clears the floor
    while mask.sum() < min_pixels:
        radius += 0.5
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
    return mask


# -- dataset generation --------------------------------------------------------------


@dataclass
class PairRecord:
    pair_id: int
    clean_path: str
    ma_path: str
    split: str
    mask_pixel_count: int


@dataclass
class DatasetManifest:
    size: int
    seed: int
    spacing: float
    n_pairs: int
    pairs: List[PairRecord] = field(default_factory=list)

    def split_pairs(self, split: str) -> List[PairRecord]:
        return [p for p in self.pairs if p.split == split]


MANIFEST_NAME = "manifest.json"


def _split_for(index: int, n_pairs: int) -> str:
    if index < max(1, int(n_pairs * 0.75)):
        return "train"
    if index < max(2, int(n_pairs * 0.875)):
        return "val"
    return "test"


def make_dataset(n_pairs: int, size: int, seed: int,
                 out_dir: Union[str, Path],
                 params: Optional[SimParams] = None) -> DatasetManifest:
    """Write ``n_pairs`` clean/MA MTSR1 pairs plus a manifest; fully seeded."""
    if size % 8:
        raise ValueError("slice size must be divisible by 8")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = params or SimParams()
    manifest = DatasetManifest(size=size, seed=seed, spacing=FIELD_MM / size,
                               n_pairs=n_pairs)
    for i in range(n_pairs):
        rng = np.random.default_rng(seed ^ i)
        clean = jaw_phantom(size, rng)
        mask = random_metal_mask(clean, rng)
        ma, clean = simulate_ma_pair(clean, mask, params)
        clean_name, ma_name = f"{i:04d}_clean.mtsr", f"{i:04d}_ma.mtsr"
        tio.save_tensor(out / clean_name, clean.pixels.astype(np.float32))
        tio.save_tensor(out / ma_name, ma.pixels.astype(np.float32))
        manifest.pairs.append(PairRecord(
            pair_id=i, clean_path=clean_name, ma_path=ma_name,
            split=_split_for(i, n_pairs), mask_pixel_count=int(mask.sum())))
    payload = {
        "size": manifest.size,
        "seed": manifest.seed,
        "spacing": manifest.spacing,
        "n_pairs": manifest.n_pairs,
        "pairs": [vars(p) for p in manifest.pairs],
    }
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir: Union[str, Path]) -> DatasetManifest:
    path = Path(data_dir) / MANIFEST_NAME
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    manifest = DatasetManifest(size=payload["size"], seed=payload["seed"],
                               spacing=payload["spacing"], n_pairs=payload["n_pairs"])
    manifest.pairs = [PairRecord(**p) for p in payload["pairs"]]
    return manifest


def load_pair(data_dir: Union[str, Path], record: PairRecord) -> Tuple[np.ndarray, np.ndarray]:
    base = Path(data_dir)
    return (tio.load_tensor(base / record.ma_path),
            tio.load_tensor(base / record.clean_path))
