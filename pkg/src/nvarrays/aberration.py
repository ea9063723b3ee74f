"""Index-mismatch spherical aberration and scalar focal metrics.

The pupil coordinate ``rho`` runs from 0 to 1 with ``NA * rho = n_immersion *
sin(theta)``.  Depths and axial positions are micrometres, wavelengths
nanometres.  Intensities are normalised to the aberration-free peak, which
for a uniform pupil is ``|int_0^1 rho drho|^2 = 1/4``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq, minimize_scalar
from scipy.special import j0, j1

__all__ = [
    "FocusConfig",
    "PupilPhase",
    "AxialProfile",
    "FocusResult",
    "QuadratureError",
    "aberration_phase",
    "pupil_phase",
    "correction_phase",
    "peak_to_valley",
    "axial_intensity",
    "focus_scan",
    "strehl",
    "radial_intensity",
    "focal_fwhm",
]

_IDEAL_PEAK = 0.25
_MAX_NODES = 16384


class QuadratureError(RuntimeError):
    """The pupil integral did not converge within the node budget."""


@dataclass(frozen=True)
class FocusConfig:
    wavelength: float = 790.0
    numerical_aperture: float = 1.4
    n_immersion: float = 1.518
    n_diamond: float = 2.417
    depth: float = 0.0

    def __post_init__(self) -> None:
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if not (self.n_immersion > 1 and self.n_diamond > 1):
            raise ValueError("refractive indices must exceed 1")
        if not 0 < self.numerical_aperture < self.n_immersion:
            raise ValueError("need 0 < NA < n_immersion")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def k(self) -> float:
        """Vacuum wavenumber in rad/um."""
        return 2.0 * math.pi / (self.wavelength * 1e-3)

    def at_depth(self, depth: float) -> "FocusConfig":
        return FocusConfig(self.wavelength, self.numerical_aperture, self.n_immersion, self.n_diamond, depth)


def _check_rho(cfg: FocusConfig, rho: np.ndarray) -> None:
    if np.any(rho < 0) or np.any(rho > 1):
        raise ValueError("rho must lie in [0, 1]")
    if np.any(cfg.numerical_aperture * rho >= cfg.n_immersion):
        raise ValueError("NA * rho reaches n_immersion (evanescent region)")


def _axial_k(cfg: FocusConfig, rho) -> np.ndarray:
    return np.sqrt(cfg.n_diamond ** 2 - (cfg.numerical_aperture * np.asarray(rho)) ** 2)


def _raw_phase(cfg: FocusConfig, rho) -> np.ndarray:
    s2 = (cfg.numerical_aperture * np.asarray(rho, dtype=float)) ** 2
    return cfg.k * cfg.depth * (np.sqrt(cfg.n_diamond ** 2 - s2) - np.sqrt(cfg.n_immersion ** 2 - s2))


@lru_cache(maxsize=None)
def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=256)
def _piston_defocus(cfg: FocusConfig) -> tuple[float, float]:
    """Coefficients of the area-weighted projection of the raw phase onto {1, rho^2}."""
    rho, w = _gauss_legendre(256)
    wa = w * rho
    basis = np.stack([np.ones_like(rho), rho ** 2])
    gram = (basis * wa) @ basis.T
    rhs = (basis * wa) @ _raw_phase(cfg, rho)
    c0, c2 = np.linalg.solve(gram, rhs)
    return float(c0), float(c2)


def aberration_phase(cfg: FocusConfig, rho, remove_piston_defocus: bool = False) -> np.ndarray:
    """Pupil phase (rad) accumulated by focusing ``cfg.depth`` um into the high-index medium."""
    r = np.asarray(rho, dtype=float)
    _check_rho(cfg, r)
    phase = _raw_phase(cfg, r)
    if remove_piston_defocus:
        c0, c2 = _piston_defocus(cfg)
        phase = phase - c0 - c2 * r ** 2
    return phase


@dataclass
class PupilPhase:
    rho: np.ndarray
    phase: np.ndarray
    piston_defocus_removed: bool = True

    def __post_init__(self) -> None:
        self.rho = np.asarray(self.rho, dtype=float)
        self.phase = np.asarray(self.phase, dtype=float)
        if self.rho.shape != self.phase.shape or self.rho.ndim != 1 or len(self.rho) < 2:
            raise ValueError("rho and phase must be equal-length 1D arrays")
        if np.any(np.diff(self.rho) <= 0):
            raise ValueError("rho must be strictly increasing")
        if self.rho[0] != 0.0 or self.rho[-1] != 1.0:
            raise ValueError("samples must cover [0, 1]")
        self._spline = CubicSpline(self.rho, self.phase)

    def __call__(self, rho) -> np.ndarray:
        return self._spline(np.asarray(rho, dtype=float))

    def __neg__(self) -> "PupilPhase":
        return PupilPhase(self.rho, -self.phase, self.piston_defocus_removed)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rho", "phase_rad"])
        for r, p in zip(self.rho, self.phase):
            w.writerow([repr(float(r)), repr(float(p))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def pupil_phase(cfg: FocusConfig, n_samples: int = 4097, remove_piston_defocus: bool = True) -> PupilPhase:
    rho = np.linspace(0.0, 1.0, n_samples)
    return PupilPhase(rho, aberration_phase(cfg, rho, remove_piston_defocus), remove_piston_defocus)


def correction_phase(cfg: FocusConfig, n_samples: int = 4097, remove_piston_defocus: bool = True) -> PupilPhase:
    """Phase to display on the modulator: the negative of the aberration."""
    return -pupil_phase(cfg, n_samples, remove_piston_defocus)


def peak_to_valley(cfg: FocusConfig, n_samples: int = 4097) -> float:
    """Peak-to-valley (rad) of the piston/defocus-removed aberration."""
    phase = aberration_phase(cfg, np.linspace(0.0, 1.0, n_samples), remove_piston_defocus=True)
    return float(phase.max() - phase.min())


@dataclass
class AxialProfile:
    z: np.ndarray
    intensity: np.ndarray
    nodes: int

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["z_um", "intensity"])
        for z, i in zip(self.z, self.intensity):
            w.writerow([repr(float(z)), repr(float(i))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _residual_phase(cfg: FocusConfig, applied: Optional[PupilPhase], rho: np.ndarray) -> np.ndarray:
    if applied is None:
        return aberration_phase(cfg, rho, remove_piston_defocus=False)
    return aberration_phase(cfg, rho, applied.piston_defocus_removed) + applied(rho)


def _intensity(cfg: FocusConfig, applied: Optional[PupilPhase], z: np.ndarray, nodes: int) -> np.ndarray:
    rho, w = _gauss_legendre(nodes)
    phase = _residual_phase(cfg, applied, rho)
    kz = cfg.k * _axial_k(cfg, rho)
    field = np.exp(1j * (phase[None, :] + np.outer(z, kz))) @ (w * rho)
    return np.abs(field) ** 2 / _IDEAL_PEAK


def axial_intensity(cfg: FocusConfig, applied_phase: Optional[PupilPhase], z_um,
                    rel_tol: float = 1e-7, start_nodes: int = 256) -> AxialProfile:
    """On-axis intensity near the focus for the aberration plus ``applied_phase``.

    Without an applied phase the full (unremoved) aberration acts.  With one,
    the aberration uses the same piston/defocus convention as the applied
    phase.  The Gauss-Legendre order is doubled until two successive orders
    agree to ``rel_tol`` relative to the profile maximum.
    """
    z = np.atleast_1d(np.asarray(z_um, dtype=float))
    n = start_nodes
    prev = _intensity(cfg, applied_phase, z, n)
    while n < _MAX_NODES:
        n *= 2
        cur = _intensity(cfg, applied_phase, z, n)
        scale = max(float(np.max(cur)), 1e-300)
        if np.max(np.abs(cur - prev)) <= rel_tol * scale:
            return AxialProfile(z, cur, n)
        prev = cur
    raise QuadratureError(f"pupil integral unconverged at {n} nodes for depth {cfg.depth} um")


def _focus_guess(cfg: FocusConfig, applied: Optional[PupilPhase]) -> float:
    # z that best flattens the total pupil phase in the area-weighted least-squares sense
    rho, w = _gauss_legendre(512)
    wa = w * rho / np.sum(w * rho)
    phase = _residual_phase(cfg, applied, rho)
    kz = cfg.k * _axial_k(cfg, rho)
    kz_c = kz - wa @ kz
    return float(-(wa @ (phase * kz_c)) / (wa @ (kz_c * kz_c)))


@dataclass(frozen=True)
class FocusResult:
    strehl: float
    z_peak: float
    nodes: int


def focus_scan(cfg: FocusConfig, applied_phase: Optional[PupilPhase] = None,
               half_range: float = 4.0, step: float = 0.02) -> FocusResult:
    """Locate the on-axis intensity maximum; ``z_peak`` is the focal shift in um."""
    z0 = _focus_guess(cfg, applied_phase)
    grid = z0 + np.arange(-half_range, half_range + step / 2, step)
    prof = axial_intensity(cfg, applied_phase, grid)
    i = int(np.argmax(prof.intensity))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(lambda z: -_intensity(cfg, applied_phase, np.array([z]), prof.nodes)[0],
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-7})
    peak = float(-res.fun) if -res.fun > prof.intensity[i] else float(prof.intensity[i])
    zp = float(res.x) if -res.fun > prof.intensity[i] else float(grid[i])
    return FocusResult(peak, zp, prof.nodes)


def strehl(cfg: FocusConfig, corrected: bool) -> float:
    applied = correction_phase(cfg) if corrected else None
    return focus_scan(cfg, applied).strehl


def radial_intensity(cfg: FocusConfig, r_nm, nodes: int = 512) -> np.ndarray:
    """Focal-plane intensity ``|int_0^1 J0(k NA r rho) rho drho|^2`` normalised to 1 at r = 0."""
    rho, w = _gauss_legendre(nodes)
    v = np.atleast_1d(np.asarray(r_nm, dtype=float)) * 1e-3 * cfg.k * cfg.numerical_aperture
    field = j0(np.outer(v, rho)) @ (w * rho)
    return field ** 2 / _IDEAL_PEAK


def airy_intensity(cfg: FocusConfig, r_nm) -> np.ndarray:
    """Closed form of :func:`radial_intensity`, ``(2 J1(v) / v)^2``."""
    v = np.atleast_1d(np.asarray(r_nm, dtype=float)) * 1e-3 * cfg.k * cfg.numerical_aperture
    out = np.ones_like(v)
    nz = v != 0
    out[nz] = (2.0 * j1(v[nz]) / v[nz]) ** 2
    return out


def _half_width(fun, start: float, step: float, half: float, limit: float) -> float:
    x = start
    while fun(x + step) > half:
        x += step
        if abs(x - start) > limit:
            raise QuadratureError("half-maximum not found within search range")
    return brentq(lambda t: fun(t) - half, x, x + step, xtol=1e-10)


def focal_fwhm(cfg: FocusConfig) -> dict[str, float]:
    """Radial and axial FWHM (nm) of the corrected scalar focus."""
    lam_um = cfg.wavelength * 1e-3
    radial = lambda r: float(radial_intensity(cfg, np.array([r]))[0])
    r_half = _half_width(radial, 0.0, cfg.wavelength / 50.0, 0.5, 10 * cfg.wavelength)

    applied = correction_phase(cfg) if cfg.depth > 0 else None
    peak = focus_scan(cfg, applied, half_range=2 * lam_um, step=lam_um / 50)
    axial = lambda z: float(axial_intensity(cfg, applied, np.array([z])).intensity[0])
    half = 0.5 * peak.strehl
    step = lam_um / 20
    upper = _half_width(axial, peak.z_peak, step, half, 50 * lam_um)
    lower = -_half_width(lambda t: axial(-t), -peak.z_peak, step, half, 50 * lam_um)
    return {"radial": 2.0 * r_half, "axial": (upper - lower) * 1000.0}
