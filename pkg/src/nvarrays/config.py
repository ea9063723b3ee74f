"""Run configuration: YAML file + ``KEY=VALUE`` overrides, validated before any compute."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

__all__ = ["ConfigError", "EXPERIMENTS", "DEFAULTS", "RunConfig", "load_config", "apply_override"]

EXPERIMENTS = ("plan", "fabricate", "image", "hbt", "coherence", "aberration", "full-pipeline")


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"{key}: {reason}")


DEFAULTS: dict[str, Any] = {
    "master_seed": 1,
    "experiment": "full-pipeline",
    "output_dir": "run",
    "parallelism": 1,
    "plan": {
        "label": "M",
        "nx": 21,
        "ny": 20,
        "pitch_xy": 3.0,
        "depths": [6.0, 9.0, 12.0, 15.0, 18.0],
        "pulse_energy": 17.5,
        "origin": [0.0, 0.0, 0.0],
    },
    "chip": {"x_extent_mm": 4.5, "y_extent_mm": 4.5, "z_extent_mm": 0.5, "usable_depth_um": 50.0},
    "capacity": {"site_pitch_um": 10.0, "qubits_per_nvc": 5},
    "material": {"nitrogen_ppb": 3.0},
    "fabrication": {
        "spot_fwhm_nm": [350.0, 1700.0],
        # vacancy cloud width relative to the optical focus (radial, axial)
        "interaction_shrink": [0.70, 0.175],
        "capture_radius_factor": 2.0,
        "target_occupancy": 0.09,
        "calibration_energy": 17.5,
        "dispersion": 0.0,
    },
    "imaging": {
        "voxel_pitch_nm": [80.0, 80.0, 250.0],
        "dims": [17, 17, 13],
        "dwell_time_s": 2e-3,
        "peak_rate": 1.5e5,
        "background_rate": 5e3,
        "singles_only": True,
    },
    "hbt": {
        "duration_s": 2.0,
        "bin_width_ns": 1.0,
        "window_ns": 150.0,
        "excitation_rate": 5e7,
        "emission_lifetime_ns": 12.0,
        "detected_rate": 1e5,
        "background_rate": 5e3,
        "max_sites": 400,
    },
    "coherence": {
        "sequence": "HahnEcho",
        "b": 4.3397e3,
        "tau_c": 3.0371e-4,
        "T1": 3.0e-3,
        # log-normal spread of the bath coupling between sites
        "coupling_spread": 0.9,
        "n_sites": 23,
        "n_points": 21,
        "t_max_s": 2.0e-3,
        "shots_per_point": 2000,
        "threshold_s": 500e-6,
    },
    "aberration": {
        "wavelength_nm": 790.0,
        "numerical_aperture": 1.4,
        "n_immersion": 1.518,
        "n_diamond": 2.417,
        "depths_um": [6.0, 9.0, 12.0, 15.0],
    },
}


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def apply_override(data: dict, override: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as YAML (numbers, lists, booleans)."""
    key, sep, raw = override.partition("=")
    if not sep or not key:
        raise ConfigError(override, "override must look like KEY=VALUE")
    parts = key.split(".")
    node: dict = {}
    cursor = node
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = yaml.safe_load(raw)
    return _merge(data, node)


def _require(cond: bool, key: str, reason: str) -> None:
    if not cond:
        raise ConfigError(key, reason)


def _positive(data: dict, block: str, *keys: str) -> None:
    for k in keys:
        v = data[block][k]
        _require(isinstance(v, (int, float)) and v > 0, f"{block}.{k}", f"must be > 0, got {v!r}")


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @property
    def master_seed(self) -> int:
        return int(self.data["master_seed"])

    @property
    def experiment(self) -> str:
        return self.data["experiment"]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    @property
    def parallelism(self) -> int:
        return int(self.data["parallelism"])

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def validate(self) -> "RunConfig":
        """Check every block against the preconditions of the module that consumes it."""
        from .aberration import FocusConfig
        from .coherence import PulseSequence
        from .geometry import ArrayPlan, ChipSpec

        d = self.data
        seed = d["master_seed"]
        _require(isinstance(seed, int) and not isinstance(seed, bool) and 0 <= seed < 2 ** 64,
                 "master_seed", "must be an integer in [0, 2**64)")
        _require(d["experiment"] in EXPERIMENTS, "experiment", f"must be one of {', '.join(EXPERIMENTS)}")
        _require(isinstance(d["parallelism"], int) and d["parallelism"] >= 1, "parallelism", "must be an integer >= 1")

        def wrap(block: str, build):
            try:
                build()
            except ValueError as exc:
                field = getattr(exc, "field", None)
                raise ConfigError(f"{block}.{field}" if field else block, getattr(exc, "reason", str(exc))) from None

        wrap("plan", lambda: ArrayPlan.from_dict({**d["plan"], "depths": tuple(d["plan"]["depths"]),
                                                  "origin": tuple(d["plan"]["origin"])}))
        wrap("chip", lambda: ChipSpec(**d["chip"]))
        _positive(d, "capacity", "site_pitch_um", "qubits_per_nvc")
        _positive(d, "material", "nitrogen_ppb")

        fab = d["fabrication"]
        _require(len(fab["spot_fwhm_nm"]) == 2 and min(fab["spot_fwhm_nm"]) > 0,
                 "fabrication.spot_fwhm_nm", "must be two positive FWHMs")
        _require(len(fab["interaction_shrink"]) == 2 and min(fab["interaction_shrink"]) > 0,
                 "fabrication.interaction_shrink", "must be two positive factors")
        _positive(d, "fabrication", "capture_radius_factor", "calibration_energy")
        _require(0 < fab["target_occupancy"] < 1, "fabrication.target_occupancy", "must lie in (0, 1)")
        _require(fab["dispersion"] >= 0, "fabrication.dispersion", "must be >= 0")
        lo, hi = 14.0, 19.0
        _require(lo <= fab["calibration_energy"] <= hi, "fabrication.calibration_energy",
                 f"outside calibration range [{lo}, {hi}] nJ")

        img = d["imaging"]
        _require(len(img["voxel_pitch_nm"]) == 3 and min(img["voxel_pitch_nm"]) > 0,
                 "imaging.voxel_pitch_nm", "must be three positive pitches")
        _require(len(img["dims"]) == 3 and all(isinstance(v, int) and v >= 3 for v in img["dims"]),
                 "imaging.dims", "must be three integers >= 3")
        _positive(d, "imaging", "dwell_time_s", "peak_rate")
        _require(img["background_rate"] >= 0, "imaging.background_rate", "must be >= 0")

        _positive(d, "hbt", "duration_s", "bin_width_ns", "window_ns", "excitation_rate",
                  "emission_lifetime_ns", "detected_rate")
        _require(d["hbt"]["window_ns"] >= d["hbt"]["bin_width_ns"], "hbt.window_ns", "must be >= bin_width_ns")
        _require(d["hbt"]["background_rate"] >= 0, "hbt.background_rate", "must be >= 0")
        _require(isinstance(d["hbt"]["max_sites"], int) and d["hbt"]["max_sites"] >= 0,
                 "hbt.max_sites", "must be an integer >= 0")

        coh = d["coherence"]
        wrap("coherence.sequence", lambda: PulseSequence.parse(str(coh["sequence"])))
        _positive(d, "coherence", "tau_c", "T1", "t_max_s", "threshold_s")
        _require(coh["b"] >= 0, "coherence.b", "must be >= 0")
        _require(coh["coupling_spread"] >= 0, "coherence.coupling_spread", "must be >= 0")
        _require(isinstance(coh["n_points"], int) and coh["n_points"] >= 5, "coherence.n_points",
                 "must be an integer >= 5")
        _require(isinstance(coh["shots_per_point"], int) and coh["shots_per_point"] >= 1,
                 "coherence.shots_per_point", "must be an integer >= 1")
        _require(isinstance(coh["n_sites"], int) and coh["n_sites"] >= 0, "coherence.n_sites",
                 "must be an integer >= 0")

        ab = d["aberration"]
        wrap("aberration", lambda: [FocusConfig(ab["wavelength_nm"], ab["numerical_aperture"], ab["n_immersion"],
                                                ab["n_diamond"], float(depth)) for depth in ab["depths_um"]])
        _require(all(depth <= 50.0 for depth in ab["depths_um"]), "aberration.depths_um", "depths must be <= 50 um")
        return self


def load_config(path: str | Path | None = None, overrides=(), **flags) -> RunConfig:
    """Defaults <- config file <- ``flags`` (seed, out, parallelism, experiment) <- overrides."""
    data = copy.deepcopy(DEFAULTS)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(str(path), "config file must hold a mapping")
        data = _merge(data, loaded)
    for key, value in flags.items():
        if value is not None:
            data = _merge(data, {key: value})
    for item in overrides:
        data = apply_override(data, item)
    return RunConfig(data).validate()
