"""Write-array planning and qubit-capacity arithmetic.

Lengths are in micrometres unless a field name says otherwise; chip extents
are stored in millimetres because that is how diamond plates are sold.
"""
from __future__ import annotations

import csv
import io
import math
import numbers
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import yaml

__all__ = [
    "PlanError",
    "ChipSpec",
    "ArrayPlan",
    "Site",
    "plan_sites",
    "capacity",
    "plan_to_text",
    "plan_from_text",
    "write_sites_csv",
    "read_sites_csv",
    "SITE_CSV_COLUMNS",
    "DEFAULT_ENERGY_RANGE_NJ",
]

DEFAULT_ENERGY_RANGE_NJ = (14.0, 19.0)
SITE_CSV_COLUMNS = ("array_label", "ix", "iy", "iz", "x_um", "y_um", "z_um")


class PlanError(ValueError):
    """An array plan or chip description violates one of its invariants."""

    def __init__(self, field_name: str, reason: str):
        self.field = field_name
        self.reason = reason
        super().__init__(f"{field_name}: {reason}")


@dataclass(frozen=True)
class ChipSpec:
    x_extent_mm: float = 4.5
    y_extent_mm: float = 4.5
    z_extent_mm: float = 0.5
    usable_depth_um: float = 50.0

    def __post_init__(self) -> None:
        for name in ("x_extent_mm", "y_extent_mm", "z_extent_mm", "usable_depth_um"):
            if not getattr(self, name) > 0:
                raise PlanError(name, "must be > 0")
        if self.usable_depth_um > self.z_extent_mm * 1000.0:
            raise PlanError("usable_depth_um", "exceeds the chip thickness")


def _require_count(name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or int(value) != value or value < 1:
        raise PlanError(name, f"must be an integer >= 1, got {value!r}")


@dataclass(frozen=True)
class ArrayPlan:
    label: str
    nx: int
    ny: int
    pitch_xy: float
    depths: tuple[float, ...]
    pulse_energy: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    energy_range: tuple[float, float] = DEFAULT_ENERGY_RANGE_NJ

    def __post_init__(self) -> None:
        object.__setattr__(self, "depths", tuple(float(d) for d in self.depths))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "energy_range", tuple(float(v) for v in self.energy_range))
        self.validate()

    def validate(self) -> None:
        if not self.label:
            raise PlanError("label", "must be non-empty")
        _require_count("nx", self.nx)
        _require_count("ny", self.ny)
        if not self.pitch_xy > 0:
            raise PlanError("pitch_xy", f"must be > 0, got {self.pitch_xy}")
        if len(self.depths) == 0:
            raise PlanError("depths", "must contain at least one depth")
        if any(d <= 0 for d in self.depths):
            raise PlanError("depths", "all depths must be > 0")
        if any(b <= a for a, b in zip(self.depths, self.depths[1:])):
            raise PlanError("depths", "must be strictly increasing")
        if len(self.origin) != 3:
            raise PlanError("origin", "must be a 3-vector")
        lo, hi = self.energy_range
        if not lo <= self.pulse_energy <= hi:
            raise PlanError("pulse_energy", f"{self.pulse_energy} nJ outside calibration range [{lo}, {hi}]")

    @property
    def n_sites(self) -> int:
        return self.nx * self.ny * len(self.depths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["origin"] = list(self.origin)
        d["energy_range"] = list(self.energy_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayPlan":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise PlanError(sorted(unknown)[0], "unknown plan field")
        kwargs = dict(d)
        for key in ("depths", "origin", "energy_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class Site:
    array_label: str
    index: tuple[int, int, int]
    target: tuple[float, float, float]

    @property
    def site_id(self) -> str:
        ix, iy, iz = self.index
        return f"{self.array_label}-{ix}-{iy}-{iz}"


def plan_sites(plan: ArrayPlan) -> list[Site]:
    """Expand a plan into its write sites.

    Sites come depth-major (all of layer 0 first), then row-major within a
    layer (``iy`` outer, ``ix`` inner).
    """
    plan.validate()
    ox, oy, oz = plan.origin
    sites = []
    for iz, depth in enumerate(plan.depths):
        for iy in range(plan.ny):
            for ix in range(plan.nx):
                target = (ox + ix * plan.pitch_xy, oy + iy * plan.pitch_xy, oz + depth)
                sites.append(Site(plan.label, (ix, iy, iz), target))
    return sites


def capacity(chip: ChipSpec, site_pitch: float, qubits_per_nvc: int = 5,
             count_electron: bool = False) -> dict[str, int]:
    """Number of cubic cells of side ``site_pitch`` (um) that fit in the usable chip volume.

    ``total_qubits`` counts ``qubits_per_nvc`` nuclear qubits per site, plus
    one electron spin each when ``count_electron`` is set.
    """
    if not site_pitch > 0:
        raise PlanError("site_pitch", "must be > 0")
    if int(qubits_per_nvc) != qubits_per_nvc or qubits_per_nvc < 1:
        raise PlanError("qubits_per_nvc", "must be an integer >= 1")
    nx = math.floor(chip.x_extent_mm * 1000.0 / site_pitch + 1e-9)
    ny = math.floor(chip.y_extent_mm * 1000.0 / site_pitch + 1e-9)
    nz = math.floor(chip.usable_depth_um / site_pitch + 1e-9)
    sites = nx * ny * nz
    per_site = int(qubits_per_nvc) + (1 if count_electron else 0)
    return {"nvc_sites": sites, "total_qubits": sites * per_site}


def plan_to_text(plan: ArrayPlan) -> str:
    return yaml.safe_dump({"array_plan": plan.to_dict()}, sort_keys=True)


def plan_from_text(text: str) -> ArrayPlan:
    data = yaml.safe_load(text)
    if not isinstance(data, dict) or "array_plan" not in data:
        raise PlanError("array_plan", "missing top-level 'array_plan' block")
    return ArrayPlan.from_dict(data["array_plan"])


def _fmt(value: float) -> str:
    return repr(float(value))


def write_sites_csv(sites: Iterable[Site], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SITE_CSV_COLUMNS)
    for s in sites:
        writer.writerow([s.array_label, *s.index, *(_fmt(v) for v in s.target)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_sites_csv(source: str | Path) -> list[Site]:
    text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) or "\n" not in str(source) else source
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        Site(r["array_label"], (int(r["ix"]), int(r["iy"]), int(r["iz"])),
             (float(r["x_um"]), float(r["y_um"]), float(r["z_um"])))
        for r in rows
    ]
