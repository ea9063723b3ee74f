"""Config-driven experiment runner: stages, per-site streams, persisted outputs, manifest.

Every stage writes plain CSV/JSON into the output directory and keeps the
summary records it wrote, so the report can be built without rereading files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from . import __version__
from .aberration import FocusConfig, axial_intensity, correction_phase, focal_fwhm, focus_scan, peak_to_valley, pupil_phase
from .coherence import DecayCurve, NoiseModel, PulseSequence, fit_stretched_exp, survey, synth_decay
from .config import RunConfig
from .fabrication import (FabricationModel, FocalSpot, MaterialSpec, fabricate, mean_spacing, nitrogen_density,
                          poisson_fit, site_statistics, write_outcomes_csv)
from .geometry import ArrayPlan, ChipSpec, capacity, plan_sites, plan_to_text, write_sites_csv
from .imaging import PSFModel, VolumeSpec, localize, precision_report, render_scan
from .photonstats import EmitterModel, classify, estimate_g2_zero, g2_histogram, multiplicity_report, simulate_stream
from .report import build_report, parse_csv, write_report
from .runtime import parallel_map, stream

__all__ = ["STAGE_ORDER", "StageError", "RunManifest", "run", "stages_for", "write_csv", "write_json"]

STAGE_ORDER = ("plan", "fabricate", "image", "hbt", "coherence", "aberration")
_EXPERIMENT_STAGES = {
    "plan": ("plan",),
    "fabricate": ("plan", "fabricate"),
    "image": ("plan", "fabricate", "image"),
    "hbt": ("plan", "fabricate", "hbt"),
    "coherence": ("plan", "fabricate", "coherence"),
    "aberration": ("aberration",),
    "full-pipeline": STAGE_ORDER,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")


def stages_for(experiment: str) -> tuple[str, ...]:
    return _EXPERIMENT_STAGES[experiment]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    path.write_text(text, encoding="utf-8")
    return text


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj) -> dict:
    data = _jsonable(obj)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return data


@dataclass
class _Context:
    cfg: RunConfig
    out: Path
    files: list[str] = field(default_factory=list)
    records: dict = field(default_factory=dict)
    sites: Optional[list] = None
    outcomes: Optional[list] = None

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name


# --- plan -----------------------------------------------------------------

def _array_plan(cfg: RunConfig) -> ArrayPlan:
    p = dict(cfg["plan"])
    p["depths"] = tuple(p["depths"])
    p["origin"] = tuple(p["origin"])
    return ArrayPlan.from_dict(p)


def stage_plan(ctx: _Context) -> None:
    plan = _array_plan(ctx.cfg)
    ctx.sites = plan_sites(plan)
    write_sites_csv(ctx.sites, ctx.path("sites.csv"))
    ctx.path("plan.yaml").write_text(plan_to_text(plan), encoding="utf-8")
    cap = capacity(ChipSpec(**ctx.cfg["chip"]), ctx.cfg["capacity"]["site_pitch_um"],
                   ctx.cfg["capacity"]["qubits_per_nvc"])
    ctx.records["capacity"] = write_json(ctx.path("capacity.json"), {**cap, "site_pitch_um": ctx.cfg["capacity"]["site_pitch_um"]})


# --- fabricate ------------------------------------------------------------

def fabrication_model(cfg: RunConfig) -> FabricationModel:
    fab = cfg["fabrication"]
    return FabricationModel(
        material=MaterialSpec(float(cfg["material"]["nitrogen_ppb"])),
        energy=float(cfg["plan"]["pulse_energy"]),
        spot=FocalSpot(*map(float, fab["spot_fwhm_nm"])),
        interaction_shrink=tuple(map(float, fab["interaction_shrink"])),
        capture_radius_factor=float(fab["capture_radius_factor"]),
        dispersion=float(fab["dispersion"]),
        target_occupancy=float(fab["target_occupancy"]),
        calibration_energy=float(fab["calibration_energy"]),
    )


def stage_fabricate(ctx: _Context) -> None:
    model = fabrication_model(ctx.cfg)
    ctx.outcomes = fabricate(ctx.sites, model, ctx.cfg.master_seed, ctx.cfg.parallelism)
    write_outcomes_csv(ctx.outcomes, ctx.path("outcomes.csv"))
    counts = site_statistics(ctx.outcomes)
    pf = poisson_fit(counts)
    density = nitrogen_density(model.material)
    ctx.records["yield"] = write_json(ctx.path("yield.json"), {
        "counts": counts.to_dict(),
        "occupancy": counts.occupied / counts.n_sites,
        "single_fraction": counts.fractions["1"],
        "poisson_fit": pf.to_dict(),
        "nitrogen_ppb": model.material.nitrogen_ppb,
        "mean_spacing_nm": mean_spacing(density),
        "capture_radius_nm": model.capture_radius * 1000.0,
        "mean_vacancies_per_pulse": model.calib.mean_vacancies(model.energy),
    })


# --- image ----------------------------------------------------------------

def _image_job(item, cfg_img: dict, seed: int):
    index, site_id, target, emitters = item
    rng = stream(seed, "image", index)
    psf = PSFModel(peak_rate=cfg_img["peak_rate"], background_rate=cfg_img["background_rate"])
    spec = VolumeSpec.centred(target, tuple(cfg_img["voxel_pitch_nm"]), tuple(cfg_img["dims"]),
                              cfg_img["dwell_time_s"])
    vol = render_scan(emitters, psf, spec, rng)
    loc = localize(vol, target)
    return site_id, loc, len(vol.meta["clipped_emitters"])


def stage_image(ctx: _Context) -> None:
    img = ctx.cfg["imaging"]
    items = []
    for i, o in enumerate(ctx.outcomes):
        if o.multiplicity == 0 or (img["singles_only"] and o.multiplicity != 1):
            continue
        items.append((i, o.site.site_id, tuple(o.site.target), o.nvc_positions))
    results = parallel_map(partial(_image_job, cfg_img=img, seed=ctx.cfg.master_seed), items,
                           ctx.cfg.parallelism)
    rows = []
    for (i, site_id, target, _), (_, loc, clipped) in zip(items, results):
        err = np.sqrt(np.clip(np.diag(loc.covariance), 0, None))
        rows.append([site_id, *loc.position, *(loc.position - np.asarray(target) * 1000.0), *err,
                     loc.converged, clipped])
    write_csv(ctx.path("localizations.csv"),
              ["site_id", "x_nm", "y_nm", "z_nm", "dx_nm", "dy_nm", "dz_nm",
               "err_x_nm", "err_y_nm", "err_z_nm", "converged", "clipped_emitters"], rows)
    if not items:
        ctx.records["precision"] = write_json(ctx.path("precision.json"), {"n": 0})
        return
    report = precision_report([r[1] for r in results], [it[2] for it in items], [it[1] for it in items])
    write_csv(ctx.path("residuals.csv"), ["site_id", "dx_nm", "dy_nm", "dz_nm"],
              [[sid, *r] for sid, r in zip(report.site_ids, report.residuals)])
    hist_rows = []
    for axis, (edges, counts) in report.histograms.items():
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            hist_rows.append([axis, lo, hi, int(c)])
    ctx.records["residual_histogram"] = parse_csv(
        write_csv(ctx.path("residual_histogram.csv"), ["axis", "lo_nm", "hi_nm", "count"], hist_rows))
    summary = report.to_dict()
    summary.pop("histograms")
    ctx.records["precision"] = write_json(ctx.path("precision.json"), summary)


# --- hbt ------------------------------------------------------------------

def _hbt_job(item, cfg_hbt: dict, seed: int):
    index, site_id, k = item
    rng = stream(seed, "hbt", index)
    model = EmitterModel(k=k, excitation_rate=cfg_hbt["excitation_rate"],
                         emission_lifetime=cfg_hbt["emission_lifetime_ns"],
                         detected_rate=cfg_hbt["detected_rate"], background_rate=cfg_hbt["background_rate"])
    s = simulate_stream(model, cfg_hbt["duration_s"], rng)
    hist = g2_histogram(s, cfg_hbt["bin_width_ns"], cfg_hbt["window_ns"])
    est = estimate_g2_zero(hist, tau0_guess=model.tau0)
    # a negative estimate is noise around zero; clip before the threshold table
    cls = classify(max(est.g2_zero, 0.0), est.g2_zero_err)
    return site_id, k, est, cls.label.value


def stage_hbt(ctx: _Context) -> None:
    cfg_hbt = ctx.cfg["hbt"]
    items = [(i, o.site.site_id, o.multiplicity) for i, o in enumerate(ctx.outcomes) if o.multiplicity > 0]
    items = items[: cfg_hbt["max_sites"]]
    results = parallel_map(partial(_hbt_job, cfg_hbt=cfg_hbt, seed=ctx.cfg.master_seed), items,
                           ctx.cfg.parallelism)
    rows = [[sid, k, est.g2_zero, est.g2_zero_err, est.method, label] for sid, k, est, label in results]
    write_csv(ctx.path("hbt.csv"), ["site_id", "multiplicity", "g2_zero", "g2_zero_err", "method", "class"], rows)
    summary: dict = {"n": len(rows)}
    if rows:
        from .photonstats import MultiplicityClass, EmitterClass
        classes = [MultiplicityClass(EmitterClass(r[5]), r[2], r[3]) for r in rows]
        summary.update(multiplicity_report(classes))
        truth = {1: "Single", 2: "Double", 3: "Triple"}
        summary["agreement_with_true_multiplicity"] = float(np.mean([truth.get(r[1], "Unresolved") == r[5] for r in rows]))
    ctx.records["hbt_summary"] = write_json(ctx.path("hbt_summary.json"), summary)


# --- coherence ------------------------------------------------------------

def _coherence_job(item, cfg_coh: dict, seed: int):
    index, site_id, depth = item
    rng = stream(seed, "coherence", index)
    b = cfg_coh["b"] * math.exp(cfg_coh["coupling_spread"] * rng.standard_normal())
    noise = NoiseModel(b, cfg_coh["tau_c"], cfg_coh["T1"])
    seq = PulseSequence.parse(str(cfg_coh["sequence"]))
    times = np.linspace(0.0, cfg_coh["t_max_s"], cfg_coh["n_points"])
    curve = synth_decay(seq, noise, times, cfg_coh["shots_per_point"], rng)
    return site_id, depth, b, curve, fit_stretched_exp(curve)


def stage_coherence(ctx: _Context) -> None:
    cfg_coh = ctx.cfg["coherence"]
    by_layer: dict[float, list] = {}
    for i, o in enumerate(ctx.outcomes):
        if o.multiplicity == 1:
            by_layer.setdefault(o.site.target[2], []).append((i, o.site.site_id, o.site.target[2]))
    # take singles round-robin over depth layers so the survey spans every layer
    items = []
    for rank in range(max((len(v) for v in by_layer.values()), default=0)):
        items.extend(v[rank] for _, v in sorted(by_layer.items()) if rank < len(v))
    items = sorted(items[: cfg_coh["n_sites"]])
    results = parallel_map(partial(_coherence_job, cfg_coh=cfg_coh, seed=ctx.cfg.master_seed), items,
                           ctx.cfg.parallelism)
    curve_rows, fit_rows = [], []
    for site_id, depth, b, curve, fit in results:
        for t, s, e in zip(curve.times, curve.signal, curve.sigma):
            curve_rows.append([site_id, t, s, e])
        err = fit.errors
        fit_rows.append([site_id, depth, b, fit.A, fit.T2, fit.n, err[0], err[1], err[2],
                         fit.chi2_reduced, fit.converged])
    write_csv(ctx.path("decays.csv"), ["site_id", "t_s", "signal", "sigma"], curve_rows)
    write_csv(ctx.path("coherence_fits.csv"),
              ["site_id", "depth_um", "b_rad_s", "A", "T2_s", "n", "A_err", "T2_err_s", "n_err",
               "chi2_reduced", "converged"], fit_rows)
    depths_layers = list(ctx.cfg["plan"]["depths"])
    res = survey([r[4] for r in results], [r[1] for r in results], cfg_coh["threshold_s"], layers=depths_layers)
    ctx.records["survey_table"] = parse_csv(res.to_csv(ctx.path("survey.csv")))
    ctx.records["survey"] = write_json(ctx.path("survey.json"), res.to_dict())


# --- aberration -----------------------------------------------------------

def stage_aberration(ctx: _Context) -> None:
    ab = ctx.cfg["aberration"]
    base = FocusConfig(ab["wavelength_nm"], ab["numerical_aperture"], ab["n_immersion"], ab["n_diamond"], 0.0)
    rows = []
    for depth in ab["depths_um"]:
        cfg = base.at_depth(float(depth))
        raw = focus_scan(cfg)
        corr = focus_scan(cfg, correction_phase(cfg)) if depth > 0 else raw
        rows.append([depth, raw.strehl, corr.strehl, raw.z_peak, peak_to_valley(cfg)])
    header = ["depth_um", "strehl_uncorrected", "strehl_corrected", "focal_shift_um", "pv_phase_rad"]
    ctx.records["aberration"] = parse_csv(write_csv(ctx.path("aberration.csv"), header, rows))
    deepest = base.at_depth(float(max(ab["depths_um"])))
    pupil_phase(deepest).to_csv(ctx.path("pupil_phase.csv"))
    z = np.linspace(-4.0, 4.0, 401)
    axial_intensity(deepest, correction_phase(deepest), z).to_csv(ctx.path("axial_corrected.csv"))
    ctx.records["focal_fwhm"] = write_json(ctx.path("focal_fwhm.json"), {f"{k}_nm": v for k, v in focal_fwhm(base).items()})


_STAGE_FUNCS: dict[str, Callable[[_Context], None]] = {
    "plan": stage_plan,
    "fabricate": stage_fabricate,
    "image": stage_image,
    "hbt": stage_hbt,
    "coherence": stage_coherence,
    "aberration": stage_aberration,
}


@dataclass
class RunManifest:
    config: dict
    version: str
    stages: list[dict]
    outputs: dict[str, str]
    records: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"config": self.config, "toolkit_version": self.version, "stages": self.stages,
                "outputs": self.outputs}


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(cfg: RunConfig, with_report: Optional[bool] = None) -> RunManifest:
    """Execute ``cfg.experiment``; writes outputs plus ``manifest.json`` into ``cfg.output_dir``.

    ``manifest.json`` records wall times and the parallelism setting, so it
    is the one file that differs between otherwise identical runs.
    """
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, out)
    # execution settings stay out of the snapshot so it is identical across parallelism
    snapshot = {k: v for k, v in cfg.data.items() if k not in ("parallelism", "output_dir")}
    ctx.path("config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True), encoding="utf-8")
    stage_log = []
    for name in stages_for(cfg.experiment):
        t0 = time.perf_counter()
        try:
            _STAGE_FUNCS[name](ctx)
        except Exception as exc:
            raise StageError(name, exc) from exc
        stage_log.append({"stage": name, "wall_time_s": time.perf_counter() - t0})
    if with_report if with_report is not None else cfg.experiment == "full-pipeline":
        t0 = time.perf_counter()
        for name in write_report(build_report(ctx.records), out):
            ctx.files.append(name)
        stage_log.append({"stage": "report", "wall_time_s": time.perf_counter() - t0})
    outputs = {name: sha256(out / name) for name in sorted(set(ctx.files))}
    manifest = RunManifest(cfg.data, __version__, stage_log, outputs, ctx.records)
    write_json(out / "manifest.json", manifest.to_dict())
    return manifest
