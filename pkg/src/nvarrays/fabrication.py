"""Monte-Carlo model of laser writing, annealing and NV-centre yield.

Pipeline for one write site:

1. ``write_site``: the pulse leaves a Poisson number of vacancies, spread as
   an axis-aligned Gaussian around the target with the focal-spot FWHMs.
2. ``sample_nitrogen``: substitutional nitrogen is a homogeneous Poisson
   point process; only the region around the vacancies is realised.
3. ``anneal``: each vacancy, in sampled order, pairs with the nearest free
   nitrogen inside the capture radius and becomes an NV centre, otherwise it
   is lost.

Positions are in micrometres, displacements are reported in nanometres.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property, partial
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .geometry import DEFAULT_ENERGY_RANGE_NJ, ArrayPlan, Site, plan_sites
from .runtime import parallel_map, stream

__all__ = [
    "FWHM_TO_SIGMA",
    "MaterialSpec",
    "NitrogenCloud",
    "FocalSpot",
    "VacancyCalibration",
    "VacancyEnsemble",
    "EmitterSite",
    "YieldCounts",
    "PoissonFit",
    "FabricationModel",
    "RewriteResult",
    "nitrogen_density",
    "mean_spacing",
    "capture_probability",
    "sample_nitrogen",
    "write_site",
    "anneal",
    "site_statistics",
    "poisson_fit",
    "simulate_site",
    "fabricate",
    "rewrite_until_filled",
    "write_outcomes_csv",
    "read_outcomes_csv",
    "conditional_single_fraction",
]

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
DIAMOND_CARBON_DENSITY_CM3 = 1.76e23
MULTIPLICITY_KEYS = ("0", "1", "2", "3", "4+")
_EMPTY = np.zeros((0, 3))
_EMPTY.flags.writeable = False


@dataclass(frozen=True)
class MaterialSpec:
    nitrogen_ppb: float
    carbon_density_cm3: float = DIAMOND_CARBON_DENSITY_CM3

    def __post_init__(self) -> None:
        if not self.nitrogen_ppb > 0:
            raise ValueError(f"nitrogen_ppb must be > 0, got {self.nitrogen_ppb}")
        if not self.carbon_density_cm3 > 0:
            raise ValueError("carbon_density_cm3 must be > 0")


def nitrogen_density(material: MaterialSpec) -> float:
    """Nitrogen number density in um^-3."""
    return material.nitrogen_ppb * 1e-9 * material.carbon_density_cm3 * 1e-12


def mean_spacing(density: float) -> float:
    """Mean inter-dopant spacing ``density**(-1/3)`` in nm, for a density in um^-3."""
    if not density > 0:
        raise ValueError("density must be > 0")
    return 1000.0 * density ** (-1.0 / 3.0)


def capture_probability(density: float, radius_um: float) -> float:
    """Probability that at least one dopant lies within ``radius_um`` of a point."""
    return -math.expm1(-density * 4.0 / 3.0 * math.pi * radius_um ** 3)


@dataclass
class NitrogenCloud:
    bounds: np.ndarray
    dopants: np.ndarray
    consumed: np.ndarray

    def nearest_free(self, point: np.ndarray, radius: float) -> Optional[int]:
        if len(self.dopants) == 0:
            return None
        d2 = np.sum((self.dopants - point) ** 2, axis=1)
        d2[self.consumed] = np.inf
        j = int(np.argmin(d2))
        return j if d2[j] <= radius * radius else None

    def count_within(self, points: np.ndarray, radius: float) -> int:
        """Number of distinct dopants within ``radius`` of any of ``points``."""
        if len(self.dopants) == 0 or len(points) == 0:
            return 0
        d2 = np.sum((self.dopants[:, None, :] - points[None, :, :]) ** 2, axis=2)
        return int(np.any(d2 <= radius * radius, axis=1).sum())


def sample_nitrogen(bounds, material: MaterialSpec, rng: np.random.Generator) -> NitrogenCloud:
    """Homogeneous Poisson realisation of nitrogen inside an axis-aligned box (um)."""
    b = np.asarray(bounds, dtype=float).reshape(2, 3)
    extent = b[1] - b[0]
    if np.any(extent < 0):
        raise ValueError("bounds must satisfy lower <= upper on every axis")
    volume = float(np.prod(extent))
    n = rng.poisson(nitrogen_density(material) * volume) if volume > 0 else 0
    dopants = b[0] + rng.random((n, 3)) * extent
    return NitrogenCloud(b, dopants, np.zeros(n, dtype=bool))


@dataclass(frozen=True)
class FocalSpot:
    fwhm_radial: float = 350.0
    fwhm_axial: float = 1700.0

    def __post_init__(self) -> None:
        if not (self.fwhm_radial > 0 and self.fwhm_axial > 0):
            raise ValueError("focal-spot FWHMs must be > 0")

    def scaled(self, radial: float, axial: Optional[float] = None) -> "FocalSpot":
        axial = radial if axial is None else axial
        return FocalSpot(self.fwhm_radial * radial, self.fwhm_axial * axial)

    @property
    def sigmas_um(self) -> np.ndarray:
        return np.array([self.fwhm_radial, self.fwhm_radial, self.fwhm_axial]) * FWHM_TO_SIGMA / 1000.0


@dataclass(frozen=True)
class VacancyCalibration:
    """Mean vacancies per pulse, ``scale * (E - threshold)**exponent`` above threshold."""

    scale: float
    threshold: float = 14.0
    exponent: float = 3.0
    domain: tuple[float, float] = DEFAULT_ENERGY_RANGE_NJ

    def mean_vacancies(self, energy: float) -> float:
        lo, hi = self.domain
        if not lo <= energy <= hi:
            raise ValueError(f"pulse energy {energy} nJ outside calibration domain [{lo}, {hi}]")
        if energy <= self.threshold:
            return 0.0
        return self.scale * (energy - self.threshold) ** self.exponent

    @classmethod
    def calibrated(cls, occupancy: float = 0.09, energy: float = 17.5, capture_prob: float = 1.0,
                   threshold: float = 14.0, exponent: float = 3.0,
                   domain: tuple[float, float] = DEFAULT_ENERGY_RANGE_NJ) -> "VacancyCalibration":
        """Curve passing through ``occupancy`` (fraction of sites with >= 1 NVC) at ``energy``."""
        lam_nvc = -math.log1p(-occupancy)
        lam_v = lam_nvc / capture_prob
        return cls(lam_v / (energy - threshold) ** exponent, threshold, exponent, tuple(domain))

    @classmethod
    def constant(cls, mean: float, domain: tuple[float, float] = DEFAULT_ENERGY_RANGE_NJ) -> "VacancyCalibration":
        """Energy-independent mean; handy for studies at a chosen Poisson mean."""
        return cls(mean, threshold=domain[0] - 1.0, exponent=0.0, domain=tuple(domain))


@dataclass
class VacancyEnsemble:
    site: Site
    positions: np.ndarray

    @property
    def count(self) -> int:
        return len(self.positions)


@dataclass
class EmitterSite:
    site: Site
    nvc_positions: np.ndarray
    n_vacancies: int = 0
    rounds: int = 1

    @property
    def multiplicity(self) -> int:
        return len(self.nvc_positions)

    @property
    def displacements_nm(self) -> np.ndarray:
        return (self.nvc_positions - np.asarray(self.site.target)) * 1000.0


def write_site(site: Site, energy: float, spot: FocalSpot, calib: VacancyCalibration,
               rng: np.random.Generator, dispersion: float = 0.0) -> VacancyEnsemble:
    """One laser pulse at ``site``.

    ``dispersion`` > 0 draws the site's Poisson mean from a gamma distribution
    with that coefficient of variation (negative-binomial counts).
    """
    lam = calib.mean_vacancies(energy)
    if dispersion > 0 and lam > 0:
        shape = 1.0 / dispersion ** 2
        lam = lam * rng.gamma(shape, 1.0 / shape)
    k = int(rng.poisson(lam)) if lam > 0 else 0
    if k == 0:
        return VacancyEnsemble(site, _EMPTY)
    positions = np.asarray(site.target) + rng.standard_normal((k, 3)) * spot.sigmas_um
    return VacancyEnsemble(site, positions)


def anneal(vacancies: VacancyEnsemble, cloud: NitrogenCloud, capture_radius: float) -> EmitterSite:
    """Bind vacancies to nitrogen; ``capture_radius`` in um.  Marks used dopants in ``cloud``."""
    nvcs = []
    for v in vacancies.positions:
        j = cloud.nearest_free(v, capture_radius)
        if j is None:
            continue
        cloud.consumed[j] = True
        nvcs.append(cloud.dopants[j])
    positions = np.array(nvcs, dtype=float).reshape(-1, 3)
    return EmitterSite(vacancies.site, positions, vacancies.count)


@dataclass
class YieldCounts:
    n_sites: int
    by_multiplicity: dict[str, int]
    total_nvcs: int

    @property
    def occupied(self) -> int:
        return self.n_sites - self.by_multiplicity["0"]

    @property
    def fractions(self) -> dict[str, float]:
        return {k: v / self.n_sites for k, v in self.by_multiplicity.items()}

    @property
    def occupied_fractions(self) -> dict[str, float]:
        occ = self.occupied
        return {k: (self.by_multiplicity[k] / occ if occ else 0.0) for k in MULTIPLICITY_KEYS[1:]}

    def to_dict(self) -> dict:
        return {
            "n_sites": self.n_sites,
            "by_multiplicity": dict(self.by_multiplicity),
            "total_nvcs": self.total_nvcs,
            "occupied": self.occupied,
            "fractions": self.fractions,
            "occupied_fractions": self.occupied_fractions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_multiplicities(cls, multiplicities: Sequence[int]) -> "YieldCounts":
        m = np.asarray(multiplicities, dtype=int)
        if m.size == 0:
            raise ValueError("no sites to tally")
        counts = {k: int(np.sum(m == i)) for i, k in enumerate(MULTIPLICITY_KEYS[:4])}
        counts["4+"] = int(np.sum(m >= 4))
        return cls(int(m.size), counts, int(m.sum()))


def site_statistics(outcomes: Sequence[EmitterSite]) -> YieldCounts:
    if len(outcomes) == 0:
        raise ValueError("site_statistics needs at least one outcome")
    return YieldCounts.from_multiplicities([o.multiplicity for o in outcomes])


@dataclass
class PoissonFit:
    lambda_hat: float
    lambda_stderr: float
    gof_p: float
    chi2: float
    dof: int
    observed: list[int] = field(default_factory=list)
    expected: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lambda_hat": self.lambda_hat,
            "lambda_stderr": self.lambda_stderr,
            "gof_p": self.gof_p,
            "chi2": self.chi2,
            "dof": self.dof,
            "observed": self.observed,
            "expected": self.expected,
        }


def _pool_bins(obs: list[float], exp: list[float], minimum: float = 5.0) -> tuple[list[float], list[float]]:
    """Merge the smallest expected bin into its smaller neighbour until all reach ``minimum``."""
    obs, exp = list(obs), list(exp)
    while len(exp) > 1 and min(exp) < minimum:
        i = int(np.argmin(exp))
        if i == 0:
            j = 1
        elif i == len(exp) - 1:
            j = i - 1
        else:
            j = i - 1 if exp[i - 1] <= exp[i + 1] else i + 1
        lo, hi = sorted((i, j))
        obs[lo:hi + 1] = [obs[lo] + obs[hi]]
        exp[lo:hi + 1] = [exp[lo] + exp[hi]]
    return obs, exp


def poisson_fit(counts: YieldCounts) -> PoissonFit:
    """Maximum-likelihood Poisson mean and a chi-square goodness-of-fit p-value.

    Bins are {0, 1, 2, >=3}, adjacent bins merged until every expected count
    is at least 5.  With fewer than three bins left there is no test and the
    p-value is reported as 1.
    """
    n = counts.n_sites
    if n < 1:
        raise ValueError("need at least one site")
    lam = counts.total_nvcs / n
    se = math.sqrt(lam / n)
    c = counts.by_multiplicity
    observed = [c["0"], c["1"], c["2"], c["3"] + c["4+"]]
    if lam == 0:
        return PoissonFit(0.0, 0.0, 1.0, 0.0, 0, observed, [float(n), 0.0, 0.0, 0.0])
    pmf = stats.poisson.pmf([0, 1, 2], lam)
    expected = [n * p for p in pmf] + [n * stats.poisson.sf(2, lam)]
    obs, exp = _pool_bins([float(o) for o in observed], expected)
    dof = len(obs) - 2
    if dof < 1:
        return PoissonFit(lam, se, 1.0, 0.0, 0, observed, expected)
    chi2 = float(sum((o - e) ** 2 / e for o, e in zip(obs, exp)))
    return PoissonFit(lam, se, float(stats.chi2.sf(chi2, dof)), chi2, dof, observed, expected)


def conditional_single_fraction(lam: float) -> float:
    """P(k = 1 | k >= 1) for a Poisson count with mean ``lam``."""
    return lam / math.expm1(lam)


@dataclass(frozen=True)
class FabricationModel:
    """Everything needed to simulate one write site, bundled for worker processes."""

    material: MaterialSpec
    energy: float
    spot: FocalSpot = FocalSpot()
    interaction_shrink: tuple[float, float] = (1.0, 1.0)
    capture_radius_factor: float = 2.0
    calibration: Optional[VacancyCalibration] = None
    dispersion: float = 0.0
    target_occupancy: float = 0.09
    calibration_energy: float = 17.5

    @cached_property
    def capture_radius(self) -> float:
        """Capture radius in um."""
        return self.capture_radius_factor * mean_spacing(nitrogen_density(self.material)) / 1000.0

    @cached_property
    def effective_spot(self) -> FocalSpot:
        return self.spot.scaled(*self.interaction_shrink)

    @cached_property
    def calib(self) -> VacancyCalibration:
        if self.calibration is not None:
            return self.calibration
        p = capture_probability(nitrogen_density(self.material), self.capture_radius)
        return VacancyCalibration.calibrated(self.target_occupancy, self.calibration_energy, p)

    def with_energy(self, energy: float) -> "FabricationModel":
        return FabricationModel(self.material, energy, self.spot, self.interaction_shrink,
                                self.capture_radius_factor, self.calibration, self.dispersion,
                                self.target_occupancy, self.calibration_energy)


def _local_anneal(ens: VacancyEnsemble, model: FabricationModel, rng: np.random.Generator) -> EmitterSite:
    r = model.capture_radius
    if ens.count == 0:
        return EmitterSite(ens.site, _EMPTY, 0)
    # realise nitrogen only where a vacancy could reach it
    bounds = np.stack([ens.positions.min(axis=0) - r, ens.positions.max(axis=0) + r])
    cloud = sample_nitrogen(bounds, model.material, rng)
    return anneal(ens, cloud, r)


def simulate_site(site: Site, index: int, model: FabricationModel, seed: int) -> EmitterSite:
    rng = stream(seed, "fabricate", index)
    ens = write_site(site, model.energy, model.effective_spot, model.calib, rng, model.dispersion)
    return _local_anneal(ens, model, rng)


def _site_job(item: tuple[int, Site], model: FabricationModel, seed: int) -> EmitterSite:
    index, site = item
    return simulate_site(site, index, model, seed)


def fabricate(sites: Sequence[Site], model: FabricationModel, seed: int,
              parallelism: int = 1) -> list[EmitterSite]:
    """Write and anneal every site; site ``i`` uses random stream ``(seed, fabricate, i)``."""
    job = partial(_site_job, model=model, seed=seed)
    return parallel_map(job, list(enumerate(sites)), parallelism)


@dataclass
class RewriteResult:
    rounds_used: np.ndarray
    filled: np.ndarray
    outcomes: list[EmitterSite]
    final: YieldCounts

    @property
    def mean_rounds_filled(self) -> float:
        return float(self.rounds_used[self.filled].mean()) if self.filled.any() else float("nan")


def _rewrite_job(item: tuple[int, Site], model: FabricationModel, seed: int, max_rounds: int) -> EmitterSite:
    index, site = item
    rng = stream(seed, "rewrite", index)
    calib = model.calib
    spot = model.effective_spot
    outcome = EmitterSite(site, np.zeros((0, 3)), 0, 0)
    for round_no in range(1, max_rounds + 1):
        ens = write_site(site, model.energy, spot, calib, rng, model.dispersion)
        outcome = _local_anneal(ens, model, rng)
        outcome.rounds = round_no
        if outcome.multiplicity > 0:
            break
    return outcome


def rewrite_until_filled(plan: ArrayPlan | Sequence[Site], model: FabricationModel, max_rounds: int,
                         seed: int, parallelism: int = 1) -> RewriteResult:
    """Re-pulse and re-anneal each empty site until it holds an NV centre or rounds run out."""
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    sites = plan_sites(plan) if isinstance(plan, ArrayPlan) else list(plan)
    job = partial(_rewrite_job, model=model, seed=seed, max_rounds=max_rounds)
    outcomes = parallel_map(job, list(enumerate(sites)), parallelism)
    rounds = np.array([o.rounds for o in outcomes], dtype=int)
    filled = np.array([o.multiplicity > 0 for o in outcomes], dtype=bool)
    return RewriteResult(rounds, filled, outcomes, site_statistics(outcomes))


OUTCOME_CSV_COLUMNS = ("site_id", "multiplicity", "nvc", "dx_nm", "dy_nm", "dz_nm")


def write_outcomes_csv(outcomes: Sequence[EmitterSite], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OUTCOME_CSV_COLUMNS)
    for o in outcomes:
        if o.multiplicity == 0:
            w.writerow([o.site.site_id, 0, "", "", "", ""])
            continue
        for j, d in enumerate(o.displacements_nm):
            w.writerow([o.site.site_id, o.multiplicity, j, *(repr(float(v)) for v in d)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_outcomes_csv(path: str | Path) -> dict[str, dict]:
    """Site id -> {"multiplicity": int, "displacements_nm": (k, 3) array}."""
    out: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            entry = out.setdefault(row["site_id"], {"multiplicity": int(row["multiplicity"]), "d": []})
            if row["nvc"] != "":
                entry["d"].append([float(row["dx_nm"]), float(row["dy_nm"]), float(row["dz_nm"])])
    for entry in out.values():
        entry["displacements_nm"] = np.array(entry.pop("d"), dtype=float).reshape(-1, 3)
    return out
