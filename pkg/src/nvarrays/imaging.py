"""Synthetic confocal scans and 3D PSF-fitting localization.

Emitter positions and volume origins are in micrometres; voxel pitch, PSF
widths, fitted positions and residuals are in nanometres.  Count arrays are
indexed ``[ix, iy, iz]``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fit import FitOptions, Model, least_squares

__all__ = [
    "PSFModel",
    "VolumeSpec",
    "ConfocalVolume",
    "Localization",
    "PrecisionReport",
    "render_scan",
    "expected_counts",
    "localize",
    "precision_report",
    "write_residuals_csv",
]

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
# FWHMs (nm) of the corrected scalar focus for the default FocusConfig
DEFAULT_FWHM_NM = (290.3233, 1569.6964)


@dataclass(frozen=True)
class PSFModel:
    sigma_xy: float = DEFAULT_FWHM_NM[0] * FWHM_TO_SIGMA
    sigma_z: float = DEFAULT_FWHM_NM[1] * FWHM_TO_SIGMA
    peak_rate: float = 1.5e5
    background_rate: float = 5e3

    def __post_init__(self) -> None:
        if not (self.sigma_xy > 0 and self.sigma_z > 0):
            raise ValueError("PSF sigmas must be > 0")
        if self.peak_rate < 0 or self.background_rate < 0:
            raise ValueError("rates must be >= 0")

    @classmethod
    def from_focus(cls, cfg, peak_rate: float = 1.5e5, background_rate: float = 5e3) -> "PSFModel":
        """Gaussian surrogate whose FWHMs match the scalar focal spot of ``cfg``."""
        from .aberration import focal_fwhm

        fw = focal_fwhm(cfg)
        return cls(fw["radial"] * FWHM_TO_SIGMA, fw["axial"] * FWHM_TO_SIGMA, peak_rate, background_rate)


@dataclass(frozen=True)
class VolumeSpec:
    origin: tuple[float, float, float]
    voxel_pitch: tuple[float, float, float] = (50.0, 50.0, 200.0)
    dims: tuple[int, int, int] = (15, 15, 15)
    dwell_time: float = 2e-3

    def __post_init__(self) -> None:
        if any(int(d) != d or d < 1 for d in self.dims):
            raise ValueError("dims must be positive integers")
        if any(p <= 0 for p in self.voxel_pitch):
            raise ValueError("voxel_pitch must be > 0")

    @classmethod
    def centred(cls, centre_um, voxel_pitch=(50.0, 50.0, 200.0), dims=(15, 15, 15),
                dwell_time: float = 2e-3) -> "VolumeSpec":
        c = np.asarray(centre_um, dtype=float)
        half = (np.asarray(dims) - 1) / 2.0 * np.asarray(voxel_pitch) / 1000.0
        return cls(tuple(c - half), tuple(voxel_pitch), tuple(int(d) for d in dims), dwell_time)

    def axes_um(self) -> list[np.ndarray]:
        return [self.origin[i] + np.arange(self.dims[i]) * self.voxel_pitch[i] / 1000.0 for i in range(3)]

    def contains(self, point_um) -> bool:
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.voxel_pitch) / 1000.0
        p = np.asarray(point_um)
        return bool(np.all(p >= lo) and np.all(p <= hi))


@dataclass
class ConfocalVolume:
    spec: VolumeSpec
    counts: np.ndarray
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> tuple[Path, Path]:
        base = Path(path)
        bin_path, json_path = base.with_suffix(".bin"), base.with_suffix(".json")
        self.counts.astype("<i8").ravel(order="C").tofile(bin_path)
        header = {
            "dims": list(self.spec.dims),
            "voxel_pitch_nm": list(self.spec.voxel_pitch),
            "origin_um": list(self.spec.origin),
            "dwell_time_s": self.spec.dwell_time,
            "dtype": "<i8",
            "order": "C, indexed [ix, iy, iz]",
            **self.meta,
        }
        json_path.write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
        return bin_path, json_path

    @classmethod
    def load(cls, path: str | Path) -> "ConfocalVolume":
        base = Path(path)
        header = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
        dims = tuple(header.pop("dims"))
        spec = VolumeSpec(tuple(header.pop("origin_um")), tuple(header.pop("voxel_pitch_nm")), dims,
                          header.pop("dwell_time_s"))
        header.pop("dtype")
        header.pop("order")
        counts = np.fromfile(base.with_suffix(".bin"), dtype="<i8").reshape(dims)
        return cls(spec, counts, header)


def _gaussian(axes_nm: Sequence[np.ndarray], centre_nm, sxy: float, sz: float) -> np.ndarray:
    gx = np.exp(-0.5 * ((axes_nm[0] - centre_nm[0]) / sxy) ** 2)
    gy = np.exp(-0.5 * ((axes_nm[1] - centre_nm[1]) / sxy) ** 2)
    gz = np.exp(-0.5 * ((axes_nm[2] - centre_nm[2]) / sz) ** 2)
    return gx[:, None, None] * gy[None, :, None] * gz[None, None, :]


def expected_counts(emitters_um, psf: PSFModel, spec: VolumeSpec) -> np.ndarray:
    """Mean counts per voxel: ``dwell * (background + sum_e peak * G(voxel - e))``."""
    axes_nm = [a * 1000.0 for a in spec.axes_um()]
    rate = np.full(spec.dims, psf.background_rate, dtype=float)
    for e in np.asarray(emitters_um, dtype=float).reshape(-1, 3):
        rate += psf.peak_rate * _gaussian(axes_nm, e * 1000.0, psf.sigma_xy, psf.sigma_z)
    return rate * spec.dwell_time


def render_scan(emitters_um, psf: PSFModel, spec: VolumeSpec, rng: Optional[np.random.Generator],
                noise: bool = True, seed=None) -> ConfocalVolume:
    """Poisson-sampled confocal scan; ``noise=False`` returns the (float) expectation.

    ``seed`` is only recorded in the metadata, to say which stream produced ``rng``.
    """
    emitters = np.asarray(emitters_um, dtype=float).reshape(-1, 3)
    mu = expected_counts(emitters, psf, spec)
    counts = rng.poisson(mu) if noise else mu
    clipped = [i for i, e in enumerate(emitters) if not spec.contains(e)]
    meta = {
        "psf_sigma_nm": [psf.sigma_xy, psf.sigma_z],
        "n_emitters": len(emitters),
        "clipped_emitters": clipped,
        "seed": seed,
    }
    return ConfocalVolume(spec, counts, meta)


@dataclass
class Localization:
    position: np.ndarray
    covariance: np.ndarray
    amplitude: float
    background: float
    sigma_xy: float
    sigma_z: float
    converged: bool
    message: str = ""
    iterations: int = 0
    deviance: float = float("nan")

    @property
    def position_um(self) -> np.ndarray:
        return self.position / 1000.0


class _GaussFit:
    """3D Gaussian + constant background on a voxel grid, positions relative to the seed.

    Residuals are ``(y - mu) / w`` with per-voxel weights ``w`` held fixed
    during one least-squares solve.
    """

    def __init__(self, volume: ConfocalVolume, seed_nm: np.ndarray, fit_sigmas: bool,
                 sigma_guess: tuple[float, float]):
        self.y = np.asarray(volume.counts, dtype=float)
        self.axes = [a * 1000.0 - s for a, s in zip(volume.spec.axes_um(), seed_nm)]
        self.fit_sigmas = fit_sigmas
        self.fixed_log_sigmas = np.log(sigma_guess)
        self.weights = np.sqrt(np.maximum(self.y, 1.0))
        self.n_params = 7 if fit_sigmas else 5

    def _unpack(self, p):
        if self.fit_sigmas:
            return p[:3], *(float(v) for v in np.exp(p[3:7]))
        return p[:3], *(float(v) for v in np.exp([p[3], p[4], *self.fixed_log_sigmas]))

    def parts(self, p):
        c, amp, bg, sxy, sz = self._unpack(p)
        dx = self.axes[0] - c[0]
        dy = self.axes[1] - c[1]
        dz = self.axes[2] - c[2]
        gx = np.exp(-0.5 * (dx / sxy) ** 2)
        gy = np.exp(-0.5 * (dy / sxy) ** 2)
        gz = np.exp(-0.5 * (dz / sz) ** 2)
        G = gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
        mu = bg + amp * G
        return mu, G, (dx, dy, dz), (amp, bg, sxy, sz)

    def mean(self, p) -> np.ndarray:
        return self.parts(p)[0]

    def residual(self, p, _=None):
        mu = self.mean(p)
        return ((self.y - mu) / self.weights).ravel()

    def jacobian(self, p, _=None):
        mu, G, (dx, dy, dz), (amp, bg, sxy, sz) = self.parts(p)
        aG = amp * G
        X = dx[:, None, None]
        Y = dy[None, :, None]
        Z = dz[None, None, :]
        cols = [aG * X / sxy ** 2, aG * Y / sxy ** 2, aG * Z / sz ** 2, aG, np.full_like(G, bg)]
        if self.fit_sigmas:
            cols += [aG * (X ** 2 + Y ** 2) / sxy ** 2, aG * Z ** 2 / sz ** 2]
        dmu = np.stack([c.ravel() for c in cols], axis=1)
        return -dmu / self.weights.ravel()[:, None]

    def deviance(self, p) -> float:
        mu = self.mean(p)
        y = self.y
        with np.errstate(divide="ignore", invalid="ignore"):
            ylog = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.sum(ylog - (y - mu)))


def localize(volume: ConfocalVolume, seed_position_um, fit_sigmas: bool = True,
             sigma_guess: Optional[tuple[float, float]] = None,
             options: Optional[FitOptions] = None, max_reweights: int = 30) -> Localization:
    """Fit one 3D Gaussian plus constant background, starting at ``seed_position_um``.

    Amplitude, background and widths are fitted as logarithms.  When the mean
    voxel count exceeds 10 the voxels are weighted by ``sqrt(max(y, 1))``.
    Otherwise the Poisson likelihood is maximised (minimum deviance) by
    iteratively reweighted least squares: each pass weights voxels by the
    square root of the previous pass's model mean, and at the fixed point the
    weighted normal equations coincide with the Poisson score equations.
    """
    counts = np.asarray(volume.counts, dtype=float)
    if not np.any(counts > 0):
        raise ValueError("cannot localize in an all-zero volume")
    seed = np.asarray(seed_position_um, dtype=float)
    if not volume.spec.contains(seed):
        raise ValueError("seed position lies outside the volume")
    if sigma_guess is None:
        sigma_guess = tuple(volume.meta.get("psf_sigma_nm", (150.0, 600.0)))
    seed_nm = seed * 1000.0
    problem = _GaussFit(volume, seed_nm, fit_sigmas, sigma_guess)
    poisson = counts.mean() <= 10.0

    bg0 = max(float(np.percentile(counts, 10)), 0.05)
    amp0 = max(float(counts.max()) - bg0, 1.0)
    p0 = [0.0, 0.0, 0.0, math.log(amp0), math.log(bg0)]
    if fit_sigmas:
        p0 += [math.log(sigma_guess[0]), math.log(sigma_guess[1])]
    params = np.array(p0)
    model = Model(problem.residual, problem.n_params, None, problem.jacobian)

    out = least_squares(model, params, options)
    passes = 1
    total_iterations = out.iterations
    reweight_converged = True
    if poisson:
        # intermediate passes only need to track the moving weights
        loose = replace(options or FitOptions(), step_tolerance=1e-4, max_iterations=20)
        reweight_converged = False
        while passes < max_reweights:
            problem.weights = np.sqrt(np.maximum(problem.mean(out.params), 1e-6))
            previous = out.params
            out = least_squares(model, previous, loose)
            passes += 1
            total_iterations += out.iterations
            shift = np.abs(out.params - previous)
            if np.all(shift[:3] < 1e-3) and np.all(shift[3:] < 1e-6):
                reweight_converged = True
                break
        problem.weights = np.sqrt(np.maximum(problem.mean(out.params), 1e-6))
        out = least_squares(model, out.params, options)
        total_iterations += out.iterations

    c, amp, bg, sxy, sz = problem._unpack(out.params)
    message = out.message if reweight_converged else f"reweighting did not settle after {passes} passes"
    return Localization(
        position=seed_nm + np.asarray(c),
        covariance=out.covariance[:3, :3].copy(),
        amplitude=amp,
        background=bg,
        sigma_xy=sxy,
        sigma_z=sz,
        converged=bool(out.converged and reweight_converged),
        message=message,
        iterations=total_iterations,
        deviance=problem.deviance(out.params),
    )


@dataclass
class PrecisionReport:
    residuals: np.ndarray
    std: np.ndarray
    mean: np.ndarray
    registered_residuals: np.ndarray
    registered_std: np.ndarray
    histograms: dict
    site_ids: list[str]

    def to_dict(self) -> dict:
        return {
            "n": int(len(self.residuals)),
            "std_nm": [float(v) for v in self.std],
            "mean_nm": [float(v) for v in self.mean],
            "registered_std_nm": [float(v) for v in self.registered_std],
            "histograms": {
                axis: {"edges_nm": [float(e) for e in h[0]], "counts": [int(c) for c in h[1]]}
                for axis, h in self.histograms.items()
            },
        }


def _affine_residuals(fitted: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if len(fitted) < 5:
        return fitted - targets
    design = np.hstack([targets, np.ones((len(targets), 1))])
    coef, *_ = np.linalg.lstsq(design, fitted, rcond=None)
    return fitted - design @ coef


def precision_report(localizations: Sequence[Localization], targets_um, site_ids: Optional[Sequence[str]] = None,
                     bin_width: float = 50.0, half_range: float = 500.0) -> PrecisionReport:
    """Per-axis residuals (fitted - target) in nm, raw and after affine grid registration."""
    targets = np.asarray(targets_um, dtype=float).reshape(-1, 3) * 1000.0
    if len(localizations) != len(targets):
        raise ValueError(f"{len(localizations)} localizations but {len(targets)} targets")
    if len(targets) == 0:
        raise ValueError("empty input")
    fitted = np.array([loc.position for loc in localizations], dtype=float).reshape(-1, 3)
    res = fitted - targets
    reg = _affine_residuals(fitted, targets)
    edges = np.arange(-half_range, half_range + bin_width / 2, bin_width)
    hists = {axis: (edges, np.histogram(np.clip(res[:, i], edges[0], edges[-1]), edges)[0])
             for i, axis in enumerate("xyz")}
    ddof = 1 if len(res) > 1 else 0
    ids = list(site_ids) if site_ids is not None else [str(i) for i in range(len(res))]
    return PrecisionReport(res, res.std(axis=0, ddof=ddof), res.mean(axis=0), reg,
                           reg.std(axis=0, ddof=ddof), hists, ids)


def write_residuals_csv(report: PrecisionReport, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["site_id", "dx_nm", "dy_nm", "dz_nm"])
    for sid, r in zip(report.site_ids, report.residuals):
        w.writerow([sid, *(repr(float(v)) for v in r)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
