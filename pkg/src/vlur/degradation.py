"""Synthetic weather degradations on float images in [0, 1] (H x W x 3).

Primitives are composed in a fixed order: particles (rain or snow) first,
then the haze veil, then low-light exposure.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import _kernels
from .errors import ParameterError, ShapeError
from .types import DegradationType

# ranges used by ``sample_params``
HAZE_T_RANGE = (0.25, 0.5)
AIRLIGHT_RANGE = (0.7, 1.0)
LOWLIGHT_GAMMA_RANGE = (1.5, 3.5)
LOWLIGHT_GAIN_RANGE = (0.3, 0.8)
RAIN_DENSITY_RANGE = (0.006, 0.015)  # streaks per pixel
RAIN_ANGLE_RANGE = (-25.0, 25.0)  # degrees from vertical
RAIN_LENGTH_RANGE = (5.0, 12.0)  # pixels
SNOW_DENSITY_RANGE = (0.005, 0.012)  # flakes per pixel
SNOW_SIZE_RANGE = (0.8, 1.8)  # Gaussian sigma in pixels

STREAK_COLOR = 1.0
STREAK_INTENSITY = (0.5, 0.9)
FLAKE_INTENSITY = (0.7, 1.0)


@dataclasses.dataclass(frozen=True)
class DegradationParams:
    haze_transmission: float = 1.0
    airlight: float = 1.0
    lowlight_gamma: float = 1.0
    lowlight_gain: float = 1.0
    rain_density: float = 0.0
    rain_angle: float = 0.0
    rain_length: float = 8.0
    snow_density: float = 0.0
    snow_flake_size: float = 1.0
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        return cls(**d)


def neutral_params(seed: int = 0) -> DegradationParams:
    return DegradationParams(rng_seed=seed)


def sample_params(rng: np.random.Generator, seed: int) -> DegradationParams:
    """Draw every field inside its declared range; unused fields are harmless."""
    u = lambda lo_hi: float(rng.uniform(*lo_hi))  # noqa: E731
    return DegradationParams(
        haze_transmission=u(HAZE_T_RANGE),
        airlight=u(AIRLIGHT_RANGE),
        lowlight_gamma=u(LOWLIGHT_GAMMA_RANGE),
        lowlight_gain=u(LOWLIGHT_GAIN_RANGE),
        rain_density=u(RAIN_DENSITY_RANGE),
        rain_angle=u(RAIN_ANGLE_RANGE),
        rain_length=u(RAIN_LENGTH_RANGE),
        snow_density=u(SNOW_DENSITY_RANGE),
        snow_flake_size=u(SNOW_SIZE_RANGE),
        rng_seed=int(seed),
    )


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


def apply_haze(clean, t: float, A: float) -> np.ndarray:
    """Atmospheric scattering with a global transmission ``t`` and airlight ``A``."""
    if not (0.0 < t <= 1.0):
        raise ParameterError(f"haze transmission must lie in (0, 1], got {t}")
    if not (0.0 <= A <= 1.0):
        raise ParameterError(f"airlight must lie in [0, 1], got {A}")
    clean = _check_image(clean)
    if t == 1.0:
        return clean.copy()
    return np.clip(clean * t + A * (1.0 - t), 0.0, 1.0)


def apply_low_light(clean, gamma: float, gain: float) -> np.ndarray:
    if gamma < 1.0:
        raise ParameterError(f"low-light gamma must be >= 1 (got {gamma}); smaller values brighten")
    if not (0.0 < gain <= 1.0):
        raise ParameterError(f"low-light gain must lie in (0, 1], got {gain}")
    clean = _check_image(clean)
    if gamma == 1.0 and gain == 1.0:
        return clean.copy()
    return gain * np.power(clean, gamma)


def _composite(clean: np.ndarray, alpha: np.ndarray, color: float) -> np.ndarray:
    a = alpha[..., None]
    return np.clip(clean * (1.0 - a) + color * a, 0.0, 1.0)


def _particle_count(density: float, h: int, w: int) -> int:
    return max(1, int(round(density * h * w)))


def apply_rain(clean, params: DegradationParams, seed: int | None = None) -> np.ndarray:
    """Oriented bright streaks at uniformly random positions."""
    clean = _check_image(clean)
    if params.rain_density < 0:
        raise ParameterError("rain density must be non-negative")
    if params.rain_density == 0:
        return clean.copy()
    seed = params.rng_seed if seed is None else seed
    h, w = clean.shape[:2]
    rng = np.random.default_rng([int(seed), 1])
    n = _particle_count(params.rain_density, h, w)
    theta = math.radians(params.rain_angle)
    # streaks may start above the frame so the top rows get rain too
    x0 = rng.uniform(-params.rain_length, w, size=n)
    y0 = rng.uniform(-params.rain_length, h, size=n)
    length = params.rain_length * rng.uniform(0.7, 1.3, size=n)
    intensity = rng.uniform(*STREAK_INTENSITY, size=n)
    dx = np.full(n, math.sin(theta))
    dy = np.full(n, math.cos(theta))
    alpha = _kernels.rain_alpha(h, w, x0, y0, dx, dy, length, intensity)
    return _composite(clean, alpha, STREAK_COLOR)


def apply_snow(clean, params: DegradationParams, seed: int | None = None) -> np.ndarray:
    """Gaussian-splatted bright flakes."""
    clean = _check_image(clean)
    if params.snow_density < 0:
        raise ParameterError("snow density must be non-negative")
    if params.snow_density == 0:
        return clean.copy()
    seed = params.rng_seed if seed is None else seed
    h, w = clean.shape[:2]
    rng = np.random.default_rng([int(seed), 2])
    n = _particle_count(params.snow_density, h, w)
    xs = rng.uniform(0, w, size=n)
    ys = rng.uniform(0, h, size=n)
    radii = params.snow_flake_size * rng.uniform(0.5, 1.5, size=n)
    intensity = rng.uniform(*FLAKE_INTENSITY, size=n)
    alpha = _kernels.snow_alpha(h, w, xs, ys, radii, intensity)
    return _composite(clean, alpha, 1.0)


def compose_degradations(clean, dtype: DegradationType | str, params: DegradationParams,
                         seed: int | None = None) -> np.ndarray:
    dtype = DegradationType.parse(dtype)
    prims = dtype.primitives
    out = _check_image(clean).copy()
    if "rain" in prims:
        out = apply_rain(out, params, seed)
    if "snow" in prims:
        out = apply_snow(out, params, seed)
    if "haze" in prims:
        out = apply_haze(out, params.haze_transmission, params.airlight)
    if "low" in prims:
        out = apply_low_light(out, params.lowlight_gamma, params.lowlight_gain)
    return out
