"""Hanbury-Brown-Twiss photon streams, g2(tau) histograms and emitter counting.

Timestamps are float64 nanoseconds.  Rates in :class:`EmitterModel` are per
second, the lifetime is in nanoseconds.

Each emitter is a two-level renewal process: after a photon it must be
re-excited (exponential waiting time, rate ``excitation_rate``) and then decay
(exponential, mean ``emission_lifetime``).  Detection thins the emissions
independently.  A run of ``G ~ Geometric(eta)`` emissions separates two
detected photons, so detected gaps are drawn directly as
``Gamma(G, 1/excitation_rate) + Gamma(G, lifetime)``.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fit import CurveModel, FitError, least_squares

__all__ = [
    "EmitterModel",
    "PhotonStream",
    "G2Histogram",
    "G2Zero",
    "EmitterClass",
    "MultiplicityClass",
    "simulate_stream",
    "g2_histogram",
    "estimate_g2_zero",
    "classify",
    "multiplicity_report",
    "ideal_g2_zero",
    "background_corrected",
    "THRESHOLDS",
]

# upper edges of the single / double / triple classes
THRESHOLDS = (0.5, 0.66, 0.75)


@dataclass(frozen=True)
class EmitterModel:
    k: int = 1
    excitation_rate: float = 5e7
    emission_lifetime: float = 12.0
    detected_rate: float = 1e5
    background_rate: float = 0.0
    dead_time: float = 0.0

    def __post_init__(self) -> None:
        if int(self.k) != self.k or self.k < 0:
            raise ValueError("k must be a non-negative integer")
        if min(self.excitation_rate, self.detected_rate, self.background_rate, self.dead_time) < 0:
            raise ValueError("rates must be >= 0")
        if not self.emission_lifetime > 0:
            raise ValueError("emission_lifetime must be > 0")
        if self.k > 0 and self.detected_rate > 0 and self.detection_efficiency > 1.0:
            raise ValueError("detected_rate exceeds the emitter's saturated emission rate")

    @property
    def emission_rate(self) -> float:
        """Undetected photons per second from one emitter."""
        if self.excitation_rate == 0:
            return 0.0
        return 1.0 / (1.0 / self.excitation_rate + self.emission_lifetime * 1e-9)

    @property
    def detection_efficiency(self) -> float:
        return self.detected_rate / self.emission_rate if self.emission_rate > 0 else 0.0

    @property
    def tau0(self) -> float:
        """Antibunching recovery time in ns, ``1 / (excitation + decay rate)``."""
        return 1.0 / (self.excitation_rate * 1e-9 + 1.0 / self.emission_lifetime)

    @property
    def signal_fraction(self) -> float:
        signal = self.k * self.detected_rate
        total = signal + self.background_rate
        return signal / total if total > 0 else 0.0


@dataclass
class PhotonStream:
    duration: float
    detector_a: np.ndarray
    detector_b: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_photons(self) -> int:
        return len(self.detector_a) + len(self.detector_b)

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.bin`` (float64 LE: detector a then b) and a JSON sidecar."""
        base = Path(path)
        bin_path = base.with_suffix(".bin")
        json_path = base.with_suffix(".json")
        np.concatenate([self.detector_a, self.detector_b]).astype("<f8").tofile(bin_path)
        header = dict(self.meta)
        header.update({"duration_ns": self.duration, "n_a": len(self.detector_a), "n_b": len(self.detector_b)})
        json_path.write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
        return bin_path, json_path

    @classmethod
    def load(cls, path: str | Path) -> "PhotonStream":
        base = Path(path)
        header = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
        data = np.fromfile(base.with_suffix(".bin"), dtype="<f8")
        n_a = header.pop("n_a")
        n_b = header.pop("n_b")
        duration = header.pop("duration_ns")
        if len(data) != n_a + n_b:
            raise ValueError("binary length does not match sidecar counts")
        return cls(duration, data[:n_a].copy(), data[n_a:].copy(), header)


def _renewal_times(model: EmitterModel, duration: float, rng: np.random.Generator) -> np.ndarray:
    eta = model.detection_efficiency
    if eta <= 0:
        return np.zeros(0)
    mean_gap = 1e9 / model.detected_rate
    # start early so the process is stationary by t = 0
    t = -(5.0 * mean_gap + 100.0 * (1e9 / model.excitation_rate + model.emission_lifetime))
    chunks = []
    exc_scale = 1e9 / model.excitation_rate
    while t <= duration:
        remaining = duration - t
        n = int(remaining / mean_gap * 1.05 + 5.0 * math.sqrt(remaining / mean_gap + 1.0) + 16)
        g = rng.geometric(eta, size=n).astype(float)
        gaps = rng.gamma(g, exc_scale) + rng.gamma(g, model.emission_lifetime)
        times = t + np.cumsum(gaps)
        chunks.append(times)
        t = times[-1]
    times = np.concatenate(chunks)
    return times[(times >= 0) & (times <= duration)]


def _apply_dead_time(times: np.ndarray, dead_time: float) -> np.ndarray:
    if dead_time <= 0 or len(times) == 0:
        return times
    keep = np.ones(len(times), dtype=bool)
    last = -np.inf
    for i, t in enumerate(times):
        if t - last < dead_time:
            keep[i] = False
        else:
            last = t
    return times[keep]


def simulate_stream(model: EmitterModel, duration_s: float, rng: np.random.Generator) -> PhotonStream:
    """Two-detector record of ``model`` for ``duration_s`` seconds."""
    if not duration_s > 0:
        raise ValueError("duration must be > 0")
    duration = duration_s * 1e9
    parts = [_renewal_times(model, duration, rng) for _ in range(model.k)]
    n_bg = rng.poisson(model.background_rate * duration_s)
    parts.append(rng.random(n_bg) * duration)
    times = np.sort(np.concatenate(parts)) if parts else np.zeros(0)
    to_a = rng.random(len(times)) < 0.5
    a = np.unique(times[to_a])
    b = np.unique(times[~to_a])
    a = _apply_dead_time(a, model.dead_time)
    b = _apply_dead_time(b, model.dead_time)
    meta = {
        "k": model.k,
        "excitation_rate": model.excitation_rate,
        "emission_lifetime_ns": model.emission_lifetime,
        "detected_rate": model.detected_rate,
        "background_rate": model.background_rate,
        "dead_time_ns": model.dead_time,
    }
    return PhotonStream(duration, a, b, meta)


@dataclass
class G2Histogram:
    bin_width: float
    tau: np.ndarray
    raw_counts: np.ndarray
    normalization: float

    @property
    def g2(self) -> np.ndarray:
        return self.raw_counts / self.normalization

    @property
    def err(self) -> np.ndarray:
        return np.sqrt(self.raw_counts) / self.normalization

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau_ns", "g2", "raw", "err"])
        for t, g, r, e in zip(self.tau, self.g2, self.raw_counts, self.err):
            w.writerow([repr(float(t)), repr(float(g)), int(r), repr(float(e))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _delay_counts(a: np.ndarray, b: np.ndarray, half_bins: int, width: float,
                  chunk: int = 1 << 18) -> np.ndarray:
    """Integer counts of ``b - a`` over bins centred on ``k * width``, ``|k| <= half_bins``."""
    reach = (half_bins + 0.5) * width
    counts = np.zeros(2 * half_bins + 1, dtype=np.int64)
    for start in range(0, len(a), chunk):
        a_part = a[start:start + chunk]
        lo = np.searchsorted(b, a_part - reach, side="left")
        hi = np.searchsorted(b, a_part + reach, side="right")
        n = hi - lo
        total = int(n.sum())
        if total == 0:
            continue
        ia = np.repeat(np.arange(len(a_part)), n)
        offsets = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
        ib = np.repeat(lo, n) + offsets
        d = b[ib] - a_part[ia]
        k = np.floor(d / width + 0.5).astype(np.int64)
        k = k[np.abs(k) <= half_bins]
        counts += np.bincount(k + half_bins, minlength=2 * half_bins + 1)
    return counts


def g2_histogram(stream: PhotonStream, bin_width: float, window: float,
                 both_orders: bool = False) -> G2Histogram:
    """Cross-correlation histogram of ``t_b - t_a`` for ``|tau| <= window`` (ns).

    Normalised by ``r_a * r_b * duration * bin_width``.  With ``both_orders``
    the ``t_a - t_b`` delays are added as well, which makes the histogram
    exactly symmetric.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    if window < bin_width:
        raise ValueError("window must be >= bin_width")
    if stream.n_photons < 2 or len(stream.detector_a) == 0 or len(stream.detector_b) == 0:
        raise ValueError("insufficient photons for a correlation histogram")
    half = int(math.floor(window / bin_width + 1e-9))
    counts = _delay_counts(stream.detector_a, stream.detector_b, half, bin_width)
    norm = len(stream.detector_a) * len(stream.detector_b) * bin_width / stream.duration
    if both_orders:
        counts = counts + _delay_counts(stream.detector_b, stream.detector_a, half, bin_width)
        norm *= 2.0
    tau = np.arange(-half, half + 1) * bin_width
    return G2Histogram(bin_width, tau, counts, norm)


@dataclass
class G2Zero:
    g2_zero: float
    g2_zero_err: float
    method: str
    fell_back: bool = False
    tau0: Optional[float] = None
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "g2_zero": self.g2_zero,
            "g2_zero_err": self.g2_zero_err,
            "method": self.method,
            "fell_back": self.fell_back,
            "tau0_ns": self.tau0,
            "message": self.message,
        }


def _central_estimate(hist: G2Histogram) -> tuple[float, float]:
    centre = int(np.argmin(np.abs(hist.tau)))
    sel = slice(max(centre - 1, 0), centre + 2)
    raw = hist.raw_counts[sel]
    n = len(raw)
    return float(raw.sum() / (n * hist.normalization)), float(math.sqrt(raw.sum()) / (n * hist.normalization))


def _dip(tau: np.ndarray, p: np.ndarray) -> np.ndarray:
    return 1.0 - p[0] * np.exp(-np.abs(tau) / np.exp(p[1]))


def _dip_jac(tau: np.ndarray, p: np.ndarray) -> np.ndarray:
    tau0 = np.exp(p[1])
    e = np.exp(-np.abs(tau) / tau0)
    return np.column_stack([-e, -p[0] * e * np.abs(tau) / tau0])


def estimate_g2_zero(hist: G2Histogram, dip_model_fit: bool = True,
                     tau0_guess: Optional[float] = None) -> G2Zero:
    """g2(0) from a histogram, without background subtraction.

    The default fits ``1 - a * exp(-|tau| / tau0)`` and reports ``1 - a``; the
    fit is repeated once with weights taken from the first fit's expected
    counts.  If the fit fails the mean of the three central bins is returned
    with ``fell_back`` set.
    """
    if hist.tau.min() > 0 or hist.tau.max() < 0:
        raise ValueError("histogram does not cover tau = 0")
    central, central_err = _central_estimate(hist)
    if not dip_model_fit:
        return G2Zero(central, central_err, "central_bins")

    tau = hist.tau
    g = hist.g2
    a0 = float(np.clip(1.0 - central, 0.05, 1.0))
    t0 = tau0_guess if tau0_guess else max(4.0 * hist.bin_width, (tau.max() - tau.min()) / 40.0)
    p = np.array([a0, math.log(t0)])
    try:
        for _ in range(2):
            expected = np.maximum(_dip(tau, p), 1e-3) * hist.normalization
            sigma = np.sqrt(np.maximum(expected, 1.0)) / hist.normalization
            out = least_squares(CurveModel(_dip, tau, g, sigma, _dip_jac).as_model(2), p)
            p = out.params
    except FitError as exc:
        return G2Zero(central, central_err, "central_bins", True, None, f"fit failed: {exc}")
    tau0 = float(math.exp(p[1]))
    bad = (not out.converged or not np.all(np.isfinite(out.stderr))
           or tau0 < 0.1 * hist.bin_width or tau0 > tau.max())
    if bad:
        return G2Zero(central, central_err, "central_bins", True, None,
                      f"dip fit rejected ({out.message}, tau0={tau0:.3g} ns)")
    # stderr from the unscaled covariance: the weights are absolute Poisson errors
    err = float(math.sqrt(out.covariance[0, 0] / out.chi2_reduced)) if out.chi2_reduced > 0 else float(out.stderr[0])
    return G2Zero(float(1.0 - p[0]), err, "dip_fit", False, tau0, out.message)


def ideal_g2_zero(k: int, signal_fraction: float = 1.0) -> float:
    """``1 - rho**2 / k`` for ``k`` equal emitters with signal fraction ``rho``."""
    if k < 1:
        return 1.0
    return 1.0 - signal_fraction ** 2 / k


def background_corrected(g2_zero: float, signal_fraction: float) -> float:
    """Remove uncorrelated background: ``(g2 - (1 - rho**2)) / rho**2``."""
    if not 0 < signal_fraction <= 1:
        raise ValueError("signal_fraction must lie in (0, 1]")
    rho2 = signal_fraction ** 2
    return (g2_zero - (1.0 - rho2)) / rho2


class EmitterClass(str, enum.Enum):
    SINGLE = "Single"
    DOUBLE = "Double"
    TRIPLE = "Triple"
    UNRESOLVED = "Unresolved"


@dataclass(frozen=True)
class MultiplicityClass:
    label: EmitterClass
    g2_zero: float
    g2_zero_err: float = 0.0


def classify(g2_zero: float, g2_zero_err: float = 0.0) -> MultiplicityClass:
    """Half-open threshold table: <0.5 single, <0.66 double, <0.75 triple, else unresolved."""
    if not g2_zero >= 0:
        raise ValueError(f"g2(0) must be non-negative, got {g2_zero}")
    if g2_zero < THRESHOLDS[0]:
        label = EmitterClass.SINGLE
    elif g2_zero < THRESHOLDS[1]:
        label = EmitterClass.DOUBLE
    elif g2_zero < THRESHOLDS[2]:
        label = EmitterClass.TRIPLE
    else:
        label = EmitterClass.UNRESOLVED
    return MultiplicityClass(label, float(g2_zero), float(g2_zero_err))


def multiplicity_report(classes: Sequence[MultiplicityClass]) -> dict:
    if len(classes) == 0:
        raise ValueError("no classifications to report")
    counts = {c.value: 0 for c in EmitterClass}
    for c in classes:
        counts[c.label.value] += 1
    n = len(classes)
    return {"n": n, "counts": counts, "fractions": {k: v / n for k, v in counts.items()}}
