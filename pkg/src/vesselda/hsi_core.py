"""Hyperspectral cubes, reduced images and masks.

Covers on-disk ingestion (JSON header + raw float32 band-sequential binary),
per-channel normalization, patch extraction and the synthetic phantom
generators used as stand-ins for the real source and target datasets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image
from scipy import ndimage


class NonMonotonicWavelengths(ValueError):
    pass


class CubeFormatError(ValueError):
    pass


class MaskAccessError(PermissionError):
    """Raised when training code asks for a target-domain mask."""


class ChannelMeaning(str, Enum):
    GRAYSCALE = "grayscale"
    RGB = "rgb"


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True, eq=False)
class HsiCube:
    """H x W x C reflectance cube with a strictly increasing wavelength axis (nm)."""

    data: np.ndarray
    wavelengths_nm: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"cube data must be H x W x C, got shape {data.shape}")
        if wl.ndim != 1 or wl.size != data.shape[2]:
            raise ValueError(
                f"{wl.size} wavelengths for a cube with {data.shape[2]} bands"
            )
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise NonMonotonicWavelengths("wavelengths_nm must be strictly increasing")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "wavelengths_nm", wl)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class ReducedImage:
    """H x W x k image, k == 1 (grayscale) or k == 3 (RGB)."""

    data: np.ndarray
    channel_meaning: ChannelMeaning = ChannelMeaning.GRAYSCALE

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"reduced image must be H x W x {{1,3}}, got {data.shape}")
        meaning = ChannelMeaning(self.channel_meaning)
        if (data.shape[2] == 1) != (meaning is ChannelMeaning.GRAYSCALE):
            raise ValueError(f"{data.shape[2]} channels do not match {meaning.value}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_meaning", meaning)

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class Mask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8))


@dataclass(frozen=True, eq=False)
class SamplePair:
    """An image (reduced or cube) plus optional mask, tagged with its domain.

    Target-domain masks are held back: ``mask`` raises ``MaskAccessError``
    for target samples and only ``annotation()`` (used by evaluation) returns
    them.
    """

    image: Union[ReducedImage, HsiCube]
    domain: Domain
    id: str
    _mask: Optional[Mask] = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.domain is Domain.SOURCE and self._mask is None:
            raise ValueError(f"source sample {self.id!r} has no mask")
        if self._mask is not None:
            if self._mask.data.shape != self.image.data.shape[:2]:
                raise ValueError(
                    f"mask shape {self._mask.data.shape} does not match image "
                    f"{self.image.data.shape[:2]}"
                )

    @classmethod
    def create(cls, image, domain, id, mask: Optional[Mask] = None) -> "SamplePair":
        return cls(image=image, domain=domain, id=id, _mask=mask)

    @property
    def mask(self) -> Mask:
        if self.domain is Domain.TARGET:
            raise MaskAccessError(
                f"target sample {self.id!r}: masks are reserved for evaluation"
            )
        return self._mask

    @property
    def has_annotation(self) -> bool:
        return self._mask is not None

    def annotation(self) -> Mask:
        if self._mask is None:
            raise ValueError(f"sample {self.id!r} is not annotated")
        return self._mask

    def without_mask(self) -> "SamplePair":
        if self.domain is Domain.SOURCE:
            raise ValueError("source samples must keep their mask")
        return replace(self, _mask=None)

    def with_image(self, image) -> "SamplePair":
        return replace(self, image=image)


# --------------------------------------------------------------------------
# cube I/O


def save_cube(cube: HsiCube, header_path: Union[str, Path]) -> Path:
    """Write ``cube`` as a JSON header plus a little-endian float32 BSQ binary."""
    header_path = Path(header_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    data_path = header_path.with_suffix(".raw")
    h, w, c = cube.shape
    bsq = np.ascontiguousarray(np.transpose(cube.data, (2, 0, 1)), dtype="<f4")
    data_path.write_bytes(bsq.tobytes())
    header = {
        "height": h,
        "width": w,
        "bands": c,
        "dtype": "float32",
        "interleave": "BSQ",
        "byte_order": "little",
        "wavelengths_nm": [float(x) for x in cube.wavelengths_nm],
        "data_file": data_path.name,
    }
    header_path.write_text(json.dumps(header, indent=2))
    return header_path


def load_cube(header_path: Union[str, Path]) -> HsiCube:
    header_path = Path(header_path)
    if not header_path.is_file():
        raise FileNotFoundError(f"cube header not found: {header_path}")
    header = json.loads(header_path.read_text())
    try:
        h, w, c = int(header["height"]), int(header["width"]), int(header["bands"])
        wavelengths = header["wavelengths_nm"]
        data_file = header["data_file"]
    except KeyError as exc:
        raise CubeFormatError(f"cube header missing field {exc}") from None
    if header.get("dtype", "float32") != "float32":
        raise CubeFormatError(f"unsupported dtype {header['dtype']!r}")
    if header.get("interleave", "BSQ").upper() != "BSQ":
        raise CubeFormatError(f"unsupported interleave {header['interleave']!r}")
    order = header.get("byte_order", "little")
    if order not in ("little", "big"):
        raise CubeFormatError(f"unknown byte_order {order!r}")
    if len(wavelengths) != c:
        raise CubeFormatError(f"header lists {len(wavelengths)} wavelengths for {c} bands")
    wl = np.asarray(wavelengths, dtype=np.float64)
    if c > 1 and not np.all(np.diff(wl) > 0):
        raise NonMonotonicWavelengths(f"{header_path}: wavelengths not strictly increasing")

    data_path = header_path.parent / data_file
    if not data_path.is_file():
        raise FileNotFoundError(f"cube data file not found: {data_path}")
    raw = data_path.read_bytes()
    expected = h * w * c * 4
    if len(raw) != expected:
        raise CubeFormatError(
            f"{data_path}: {len(raw)} bytes, header implies {expected} ({h}x{w}x{c} float32)"
        )
    dtype = "<f4" if order == "little" else ">f4"
    bsq = np.frombuffer(raw, dtype=dtype).reshape(c, h, w)
    data = np.transpose(bsq, (1, 2, 0)).astype(np.float32)
    return HsiCube(data=data, wavelengths_nm=wl)


# --------------------------------------------------------------------------
# PNG I/O for masks and reduced images


def save_mask_png(mask: Mask, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path)


def load_mask_png(path: Union[str, Path]) -> Mask:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return Mask((arr > 0).astype(np.uint8))


def save_image_png(image: ReducedImage, path: Union[str, Path], bits: int = 16) -> None:
    """Grayscale images go to 8- or 16-bit PNG, RGB always to 8-bit."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(image.data, 0.0, 1.0)
    if image.channel_meaning is ChannelMeaning.RGB:
        Image.fromarray(np.round(data * 255).astype(np.uint8), mode="RGB").save(path)
    elif bits == 16:
        arr = np.round(data[..., 0] * 65535).astype(np.uint16)
        Image.fromarray(arr).save(path)
    else:
        Image.fromarray(np.round(data[..., 0] * 255).astype(np.uint8), mode="L").save(path)


def load_image_png(path: Union[str, Path]) -> ReducedImage:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[..., :3].astype(np.float32) / 255.0
        return ReducedImage(arr, ChannelMeaning.RGB)
    scale = 65535.0 if arr.dtype == np.uint16 or img.mode.startswith("I") else 255.0
    return ReducedImage(arr.astype(np.float32)[..., None] / scale, ChannelMeaning.GRAYSCALE)


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class PercentileClip:
    p_lo: float = 1.0
    p_hi: float = 99.0

    def __post_init__(self):
        if not 0 <= self.p_lo < self.p_hi <= 100:
            raise ValueError(f"bad percentile range ({self.p_lo}, {self.p_hi})")


MINMAX = "minmax"


def normalize_array(data: np.ndarray, mode=MINMAX) -> np.ndarray:
    """Map each channel of an H x W x k array into [0, 1].

    A constant channel maps to all zeros.
    """
    out = np.empty(data.shape, dtype=np.float32)
    for ch in range(data.shape[-1]):
        x = data[..., ch].astype(np.float64)
        if isinstance(mode, PercentileClip):
            lo, hi = np.percentile(x, [mode.p_lo, mode.p_hi])
            x = np.clip(x, lo, hi)
        elif mode != MINMAX:
            raise ValueError(f"unknown normalization mode {mode!r}")
        lo, hi = x.min(), x.max()
        if hi > lo:
            out[..., ch] = (x - lo) / (hi - lo)
        else:
            out[..., ch] = 0.0
    return out


def normalize(image: ReducedImage, mode=MINMAX) -> ReducedImage:
    return ReducedImage(normalize_array(image.data, mode), image.channel_meaning)


# --------------------------------------------------------------------------
# patches


def _grid_starts(length: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)
    return starts


def extract_patches(pair: SamplePair, size: int, stride: int) -> list[SamplePair]:
    """Raster-order size x size crops; edge patches are shifted inward."""
    h, w = pair.image.data.shape[:2]
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} does not fit a {h}x{w} image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    mask = pair._mask
    patches = []
    for r in _grid_starts(h, size, stride):
        for c in _grid_starts(w, size, stride):
            crop = pair.image.data[r : r + size, c : c + size]
            if isinstance(pair.image, HsiCube):
                image = HsiCube(crop, pair.image.wavelengths_nm)
            else:
                image = ReducedImage(crop, pair.image.channel_meaning)
            m = None if mask is None else Mask(mask.data[r : r + size, c : c + size])
            patches.append(
                SamplePair.create(image, pair.domain, f"{pair.id}@{r},{c}", mask=m)
            )
    return patches


# --------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    n_bands: int = 826
    wavelength_range_nm: tuple[float, float] = (400.0, 1000.0)
    vessel_density: float = 0.15
    noise_sigma: float = 0.02
    seed: int = 0
    # Mean reflectance drop of vessel pixels across the 500-600 nm bands.
    absorption_depth: float = 0.25
    # Band-shared tissue texture in target cubes, amplitude in units of noise_sigma.
    clutter_ratio: float = 4.0
    clutter_scale_px: float = 2.5
    # "dark": fundus-like dark vessels; "bright": bright vessels on dark field.
    source_polarity: str = "dark"
    # Relative darkening of dark-polarity source vessels.
    source_contrast: float = 0.25

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("phantom dimensions must be >= 16")
        if self.n_bands < 1:
            raise ValueError("n_bands must be positive")
        lo, hi = self.wavelength_range_nm
        if not lo < hi:
            raise ValueError("wavelength range must satisfy low < high")
        if not 0 < self.vessel_density < 1:
            raise ValueError("vessel_density must be in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.absorption_depth <= 0:
            raise ValueError("absorption_depth must be positive")
        if self.clutter_ratio < 0 or self.clutter_scale_px <= 0:
            raise ValueError("clutter parameters must be nonnegative / positive")
        if self.source_polarity not in ("dark", "bright"):
            raise ValueError(f"unknown source polarity {self.source_polarity!r}")
        if not 0 < self.source_contrast < 1:
            raise ValueError("source_contrast must be in (0, 1)")

    def wavelengths(self) -> np.ndarray:
        lo, hi = self.wavelength_range_nm
        if self.n_bands == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, self.n_bands)


def _stamp_disk(mask: np.ndarray, y: float, x: float, radius: float) -> None:
    h, w = mask.shape
    r0, r1 = max(0, int(math.floor(y - radius))), min(h - 1, int(math.ceil(y + radius)))
    c0, c1 = max(0, int(math.floor(x - radius))), min(w - 1, int(math.ceil(x + radius)))
    if r0 > r1 or c0 > c1:
        return
    yy, xx = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    mask[r0 : r1 + 1, c0 : c1 + 1] |= (yy - y) ** 2 + (xx - x) ** 2 <= radius**2


def vessel_tree(height: int, width: int, density: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask of one connected branching vessel tree.

    A trunk enters from a random border point and wanders inward; further
    branches sprout from already-drawn centreline points with a smaller
    radius. Drawing stops as soon as the covered fraction reaches ``density``.
    Steps are half a pixel and radii are >= 1, so consecutive disks overlap
    and the tree stays 4-connected.
    """
    mask = np.zeros((height, width), dtype=bool)
    target = density * height * width
    max_radius = max(1.5, min(height, width) / 22.0)
    step = 0.5
    # (y, x, heading, radius) of drawn centreline points
    centreline: list[tuple[float, float, float, float]] = []

    side = rng.integers(4)
    if side == 0:
        y, x, heading = 0.0, rng.uniform(0.25, 0.75) * (width - 1), math.pi / 2
    elif side == 1:
        y, x, heading = height - 1.0, rng.uniform(0.25, 0.75) * (width - 1), -math.pi / 2
    elif side == 2:
        y, x, heading = rng.uniform(0.25, 0.75) * (height - 1), 0.0, 0.0
    else:
        y, x, heading = rng.uniform(0.25, 0.75) * (height - 1), width - 1.0, math.pi
    heading += rng.normal(0, 0.2)

    def walk(y, x, heading, radius, max_len):
        travelled = 0.0
        curvature = 0.0
        while travelled < max_len:
            if mask.sum() >= target:
                return True
            _stamp_disk(mask, y, x, radius)
            centreline.append((y, x, heading, radius))
            curvature = 0.9 * curvature + rng.normal(0, 0.03)
            heading += curvature
            ny, nx = y + step * math.sin(heading), x + step * math.cos(heading)
            if not (0 <= ny <= height - 1 and 0 <= nx <= width - 1):
                return False
            y, x = ny, nx
            travelled += step
        return mask.sum() >= target

    span = float(max(height, width))
    done = walk(y, x, heading, max_radius, 1.5 * span)
    attempts = 0
    while not done and attempts < 500:
        attempts += 1
        py, px, ph, pr = centreline[rng.integers(len(centreline))]
        radius = max(1.0, pr * rng.uniform(0.55, 0.85))
        heading = ph + rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.2)
        done = walk(py, px, heading, radius, rng.uniform(0.3, 0.8) * span)
    return mask


def hemoglobin_profile(wavelengths_nm: np.ndarray) -> np.ndarray:
    """Unit-mean (over 500-600 nm) absorption profile with oxy-Hb-like peaks."""
    wl = np.asarray(wavelengths_nm, dtype=np.float64)

    def bump(center, width, amp):
        return amp * np.exp(-0.5 * ((wl - center) / width) ** 2)

    profile = (
        bump(418.0, 14.0, 1.1)
        + bump(542.0, 12.0, 1.0)
        + bump(577.0, 9.0, 1.05)
        + 0.35 / (1.0 + np.exp((wl - 600.0) / 12.0))
        + 0.04
    )
    window = (wl >= 500.0) & (wl <= 600.0)
    ref = profile[window].mean() if window.any() else profile.mean()
    return profile / ref


def tissue_reflectance(wavelengths_nm: np.ndarray) -> np.ndarray:
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    return 0.5 + 0.35 / (1.0 + np.exp(-(wl - 610.0) / 25.0))


def tissue_clutter(height: int, width: int, scale_px: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance smooth random field."""
    field = ndimage.gaussian_filter(rng.normal(size=(height, width)), scale_px, mode="reflect")
    std = field.std()
    return (field - field.mean()) / std if std > 0 else np.zeros_like(field)


def make_target_phantom(spec: PhantomSpec) -> tuple[HsiCube, Mask]:
    """Brain-like hyperspectral phantom whose vessels absorb in 500-600 nm.

    Besides white per-band noise, every band shares a smooth tissue-texture
    field of amplitude ``clutter_ratio * noise_sigma``. The texture survives
    spectral windowing and is absent from source phantoms. With
    ``noise_sigma == 0`` both terms vanish and the mean difference between
    background and vessel pixels across the 500-600 nm bands equals
    ``absorption_depth``.
    """
    rng = np.random.default_rng([spec.seed, 1])
    vessels = vessel_tree(spec.height, spec.width, spec.vessel_density, rng)
    wl = spec.wavelengths()
    background = tissue_reflectance(wl)
    vessel = background - spec.absorption_depth * hemoglobin_profile(wl)
    cube = np.where(vessels[..., None], vessel, background)
    if spec.noise_sigma > 0:
        clutter = tissue_clutter(spec.height, spec.width, spec.clutter_scale_px, rng)
        cube = cube + spec.clutter_ratio * spec.noise_sigma * clutter[..., None]
        cube = cube + rng.normal(0.0, spec.noise_sigma, size=cube.shape)
    return HsiCube(cube.astype(np.float32), wl), Mask(vessels.astype(np.uint8))


def make_source_phantom(spec: PhantomSpec) -> tuple[ReducedImage, Mask]:
    """Fundus-like grayscale phantom on an unevenly lit, vignetted field.

    ``source_polarity="dark"`` darkens vessels by ``source_contrast``
    relative to the local background; ``"bright"`` adds bright vessels on a
    dark field instead, which inverts the contrast seen in windowed target
    cubes.
    """
    rng = np.random.default_rng([spec.seed, 2])
    vessels = vessel_tree(spec.height, spec.width, spec.vessel_density, rng)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, 2 * math.pi)
    ramp = math.cos(angle) * (xx / (w - 1) - 0.5) + math.sin(angle) * (yy / (h - 1) - 0.5)
    cy, cx = rng.uniform(0.3, 0.7) * (h - 1), rng.uniform(0.3, 0.7) * (w - 1)
    r2 = ((yy - cy) / h) ** 2 + ((xx - cx) / w) ** 2
    if spec.source_polarity == "dark":
        background = 0.6 + 0.3 * ramp - 0.6 * r2
        img = background * (1.0 - spec.source_contrast * vessels)
    else:
        img = 0.25 + 0.3 * ramp - 0.25 * r2 + 0.45 * vessels
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    image = normalize(ReducedImage(img[..., None].astype(np.float32)))
    return image, Mask(vessels.astype(np.uint8))
