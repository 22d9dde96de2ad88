"""Static spectral reduction: per-pixel median over wavelength windows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hsi_core import ChannelMeaning, HsiCube, ReducedImage, normalize_array


class EmptyWindow(ValueError):
    pass


@dataclass(frozen=True)
class WavelengthWindow:
    """Inclusive wavelength interval [lo_nm, hi_nm]."""

    lo_nm: float
    hi_nm: float

    def __post_init__(self):
        if not self.lo_nm < self.hi_nm:
            raise ValueError(f"window {self.lo_nm}:{self.hi_nm} must satisfy lo < hi")

    @classmethod
    def parse(cls, text: str) -> "WavelengthWindow":
        """Parse ``"lo:hi"`` (nm)."""
        try:
            lo, hi = (float(part) for part in text.split(":"))
        except ValueError:
            raise ValueError(f"expected a window like '500:600', got {text!r}") from None
        return cls(lo, hi)

    def __str__(self) -> str:
        return f"{self.lo_nm:g}:{self.hi_nm:g}"


HEMOGLOBIN_WINDOW = WavelengthWindow(500, 600)
BLUE_WINDOW = WavelengthWindow(400, 500)
RED_WINDOW = WavelengthWindow(600, 800)
# R, G, B
DEFAULT_RGB_WINDOWS = (WavelengthWindow(600, 1000), WavelengthWindow(500, 600), WavelengthWindow(400, 500))


def band_indices(cube: HsiCube, window: WavelengthWindow) -> list[int]:
    wl = cube.wavelengths_nm
    idx = np.flatnonzero((wl >= window.lo_nm) & (wl <= window.hi_nm))
    if idx.size == 0:
        raise EmptyWindow(
            f"window {window} nm selects no bands of the axis "
            f"[{wl[0]:g}, {wl[-1]:g}] nm"
        )
    return idx.tolist()


def window_median(cube: HsiCube, window: WavelengthWindow, normalize: bool = True) -> ReducedImage:
    """Per-pixel median reflectance over the bands inside ``window``.

    Even band counts average the two middle values. The result is MinMax
    normalized unless ``normalize`` is False.
    """
    idx = band_indices(cube, window)
    med = np.median(cube.data[..., idx].astype(np.float64), axis=-1)[..., None]
    if normalize:
        med = normalize_array(med)
    return ReducedImage(med.astype(np.float32), ChannelMeaning.GRAYSCALE)


def rgb_windowing(
    cube: HsiCube,
    windows: Sequence[WavelengthWindow] = DEFAULT_RGB_WINDOWS,
    normalize: bool = True,
) -> ReducedImage:
    if len(windows) != 3:
        raise ValueError(f"RGB windowing needs exactly 3 windows, got {len(windows)}")
    channels = [window_median(cube, w, normalize=normalize).data[..., 0] for w in windows]
    return ReducedImage(np.stack(channels, axis=-1), ChannelMeaning.RGB)


def reduce_cube(cube: HsiCube, windows: Sequence[WavelengthWindow]) -> ReducedImage:
    """One window gives a grayscale image, three give RGB."""
    if len(windows) == 1:
        return window_median(cube, windows[0])
    return rgb_windowing(cube, windows)
