"""Electron-spin coherence under pulse sequences with Ornstein-Uhlenbeck dephasing.

Dephasing noise is a stationary Gaussian frequency fluctuation with rms
``b`` (rad/s) and correlation time ``tau_c`` (s).  The decoherence exponent
``chi`` is computed from the sequence's filter function; the signal is
``exp(-chi) * exp(-t / T1)``.  Times are in seconds throughout.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .fit import FitOptions, Model, least_squares

__all__ = [
    "NoiseModel",
    "PulseSequence",
    "DecayCurve",
    "StretchedExpFit",
    "T1Fit",
    "SurveyResult",
    "CoherenceQuadratureError",
    "filter_function",
    "chi",
    "chi_ramsey_exact",
    "chi_hahn_exact",
    "coherence_signal",
    "monte_carlo_chi",
    "sample_contrast",
    "synth_decay",
    "stretched_exp",
    "fit_stretched_exp",
    "fit_t1",
    "effective_t2",
    "calibrate_bath",
    "survey",
]


class CoherenceQuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    # calibrated so the Hahn echo fits to T2 ~ 690 us with stretch ~ 2 at T1 = 3 ms
    b: float = 4.3397e3
    tau_c: float = 3.0371e-4
    T1: float = 3.0e-3

    def __post_init__(self) -> None:
        if self.b < 0:
            raise ValueError("b must be >= 0")
        if not self.tau_c > 0:
            raise ValueError("tau_c must be > 0")
        if not self.T1 > 0:
            raise ValueError("T1 must be > 0")

    def with_b(self, b: float) -> "NoiseModel":
        return NoiseModel(b, self.tau_c, self.T1)


_KINDS = ("Ramsey", "HahnEcho", "CPMG", "XY8")


@dataclass(frozen=True)
class PulseSequence:
    kind: str
    n: int = 1

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown sequence kind {self.kind!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("N must be an integer >= 1")

    @classmethod
    def ramsey(cls) -> "PulseSequence":
        return cls("Ramsey")

    @classmethod
    def hahn(cls) -> "PulseSequence":
        return cls("HahnEcho")

    @classmethod
    def cpmg(cls, n: int) -> "PulseSequence":
        return cls("CPMG", n)

    @classmethod
    def xy8(cls, n: int) -> "PulseSequence":
        return cls("XY8", n)

    @classmethod
    def parse(cls, text: str) -> "PulseSequence":
        """Accepts ``Ramsey``, ``HahnEcho``, ``CPMG-N`` and ``XY8-N``."""
        if text in ("Ramsey", "HahnEcho"):
            return cls(text)
        kind, _, n = text.partition("-")
        return cls(kind, int(n))

    @property
    def pulse_count(self) -> int:
        return {"Ramsey": 0, "HahnEcho": 1, "CPMG": self.n, "XY8": 8 * self.n}[self.kind]

    def pulse_fractions(self) -> np.ndarray:
        """Pulse times as fractions of the total evolution time."""
        p = self.pulse_count
        return (np.arange(1, p + 1) - 0.5) / p if p else np.zeros(0)

    def __str__(self) -> str:
        return self.kind if self.kind in ("Ramsey", "HahnEcho") else f"{self.kind}-{self.n}"


def _switch_coefficients(seq: PulseSequence) -> tuple[np.ndarray, np.ndarray]:
    # sum_k (-1)^k (e^{i z f_{k+1}} - e^{i z f_k}) written as sum_j d_j e^{i z f_j}
    p = seq.pulse_count
    f = np.concatenate([[0.0], seq.pulse_fractions(), [1.0]])
    d = np.empty(p + 2)
    d[0] = -1.0
    d[1:-1] = 2.0 * (-1.0) ** (np.arange(1, p + 1) - 1)
    d[-1] = (-1.0) ** p
    return f, d


def filter_function(seq: PulseSequence, z) -> np.ndarray:
    """Filter function of the sequence in the dimensionless frequency ``z = omega * t``."""
    z = np.asarray(z, dtype=float)
    f, d = _switch_coefficients(seq)
    phase = np.multiply.outer(z, f)
    re = np.cos(phase) @ d
    im = np.sin(phase) @ d
    return 0.5 * (re * re + im * im)


@lru_cache(maxsize=None)
def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def _tail_integral(a: float, Z: float) -> float:
    """``int_Z^inf dz / (z^2 (1 + a^2 z^2))``."""
    x = 1.0 / (a * Z)
    if x < 1e-3:
        x2 = x * x
        return (x2 / 3.0 - x2 * x2 / 5.0 + x2 ** 3 / 7.0) / Z
    return 1.0 / Z - a * math.atan(x)


def _segment_edges(a: float, Z: float) -> np.ndarray:
    # pi-length panels plus a geometric refinement around the noise corner z = 1/a
    edges = [np.arange(0.0, Z + 0.5 * math.pi, math.pi)]
    corner = 1.0 / a
    geo = corner * 2.0 ** np.arange(-12, 8)
    edges.append(geo[geo < Z])
    return np.unique(np.concatenate(edges))


def _chi_unit(seq: PulseSequence, t: float, tau_c: float, nodes: int, Z: float) -> float:
    a = tau_c / t
    edges = _segment_edges(a, Z)
    x, w = _gauss_legendre(nodes)
    lo, hi = edges[:-1], edges[1:]
    half = 0.5 * (hi - lo)
    z = (0.5 * (hi + lo))[:, None] + half[:, None] * x[None, :]
    ww = half[:, None] * w[None, :]
    F = filter_function(seq, z)
    body = np.sum(ww * F / (z * z * (1.0 + (a * z) ** 2)))
    tail = (2 * seq.pulse_count + 1) * _tail_integral(a, edges[-1])
    return (t / math.pi) * 2.0 * tau_c * (body + tail)


@lru_cache(maxsize=65536)
def _chi_unit_converged(seq: PulseSequence, t: float, tau_c: float, rel_tol: float) -> float:
    Z = 16.0 * math.pi * (seq.pulse_count + 1)
    nodes = 16
    value = _chi_unit(seq, t, tau_c, nodes, Z)
    for _ in range(6):
        finer = _chi_unit(seq, t, tau_c, 2 * nodes, Z)
        if abs(finer - value) <= rel_tol * abs(finer):
            break
        nodes *= 2
        value = finer
    else:
        raise CoherenceQuadratureError(f"chi quadrature order did not converge for ({seq}, t={t!r})")
    value = finer
    for _ in range(12):
        wider = _chi_unit(seq, t, tau_c, nodes, 2.0 * Z)
        if abs(wider - value) <= rel_tol * abs(wider):
            return wider
        Z *= 2.0
        value = wider
    raise CoherenceQuadratureError(f"chi frequency cutoff did not converge for ({seq}, t={t!r})")


def chi(seq: PulseSequence, t: float, noise: NoiseModel, rel_tol: float = 1e-9) -> float:
    """Decoherence exponent ``(1/pi) int_0^inf S(w) F(w t) / w^2 dw``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0 or noise.b == 0:
        return 0.0
    return noise.b ** 2 * _chi_unit_converged(seq, float(t), float(noise.tau_c), rel_tol)


def chi_ramsey_exact(t, noise: NoiseModel) -> np.ndarray:
    x = np.asarray(t, dtype=float) / noise.tau_c
    return noise.b ** 2 * noise.tau_c ** 2 * (np.expm1(-x) + x)


def chi_hahn_exact(t, noise: NoiseModel) -> np.ndarray:
    x = np.asarray(t, dtype=float) / noise.tau_c
    return noise.b ** 2 * noise.tau_c ** 2 * (x - 3.0 + 4.0 * np.exp(-x / 2.0) - np.exp(-x))


def coherence_signal(seq: PulseSequence, t, noise: NoiseModel) -> np.ndarray:
    """``exp(-chi(t)) * exp(-t / T1)`` for scalar or array ``t``."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.array([math.exp(-chi(seq, float(ti), noise) - ti / noise.T1) for ti in ts])
    return out if np.ndim(t) else float(out[0])


def monte_carlo_chi(seq: PulseSequence, t: float, noise: NoiseModel, n_paths: int,
                    rng: np.random.Generator, steps_per_interval: int = 64,
                    chunk: int = 20000) -> tuple[float, float]:
    """Half the phase variance over exact Ornstein-Uhlenbeck trajectories.

    Returns ``(chi, standard_error)``.  The grid puts every pulse on a node and
    the phase integral uses the trapezoid rule with the sign flipped at pulses.
    """
    p = seq.pulse_count
    n_half = 2 * max(p, 1)
    n_steps = n_half * steps_per_interval
    dt = t / n_steps
    # sign of each interval between nodes; pulses sit on nodes
    mid = (np.arange(n_steps) + 0.5) / n_steps
    interval_sign = (-1.0) ** np.searchsorted(seq.pulse_fractions(), mid)
    weights_signed = np.zeros(n_steps + 1)
    weights_signed[:-1] += 0.5 * dt * interval_sign
    weights_signed[1:] += 0.5 * dt * interval_sign

    rho = math.exp(-dt / noise.tau_c)
    innov = noise.b * math.sqrt(1.0 - rho * rho)
    phases = []
    remaining = n_paths
    while remaining > 0:
        m = min(chunk, remaining)
        x = rng.standard_normal(m) * noise.b
        phi = weights_signed[0] * x
        for k in range(1, n_steps + 1):
            x = rho * x + innov * rng.standard_normal(m)
            phi += weights_signed[k] * x
        phases.append(phi)
        remaining -= m
    phi = np.concatenate(phases)
    var = float(np.var(phi, ddof=1))
    return 0.5 * var, 0.5 * var * math.sqrt(2.0 / (len(phi) - 1))


@dataclass
class DecayCurve:
    times: np.ndarray
    signal: np.ndarray
    sigma: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.signal = np.asarray(self.signal, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not (self.times.shape == self.signal.shape == self.sigma.shape):
            raise ValueError("times, signal and sigma must have equal lengths")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be > 0")

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s", "signal", "sigma"])
        for row in zip(self.times, self.signal, self.sigma):
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "DecayCurve":
        text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) or "\n" not in str(source) else source
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([float(r["t_s"]) for r in rows], [float(r["signal"]) for r in rows],
                   [float(r["sigma"]) for r in rows])


def sample_contrast(w, shots: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Binomial readout of coherence ``w``: returns ``(2 p_hat - 1, sigma)``."""
    if shots < 1:
        raise ValueError("shots_per_point must be >= 1")
    p = 0.5 * (1.0 + np.clip(np.asarray(w, dtype=float), -1.0, 1.0))
    k = rng.binomial(shots, p)
    p_hat = k / shots
    # add-one estimate keeps saturated points from receiving near-zero error bars
    p_err = (k + 1.0) / (shots + 2.0)
    return 2.0 * p_hat - 1.0, 2.0 * np.sqrt(p_err * (1.0 - p_err) / shots)


def synth_decay(seq: PulseSequence, noise: NoiseModel, times, shots_per_point: int,
                rng: np.random.Generator) -> DecayCurve:
    times = np.asarray(times, dtype=float)
    w = coherence_signal(seq, times, noise)
    signal, sigma = sample_contrast(w, shots_per_point, rng)
    return DecayCurve(times, signal, sigma, {"sequence": str(seq), "shots": int(shots_per_point)})


def stretched_exp(t, A: float, T2: float, n: float) -> np.ndarray:
    return A * np.exp(-(np.asarray(t, dtype=float) / T2) ** n)


@dataclass
class StretchedExpFit:
    A: float
    T2: float
    n: float
    covariance: np.ndarray
    converged: bool
    message: str
    chi2_reduced: float
    iterations: int = 0

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> dict:
        err = self.errors
        return {
            "A": self.A, "T2_s": self.T2, "n": self.n,
            "A_err": float(err[0]), "T2_err_s": float(err[1]), "n_err": float(err[2]),
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "chi2_reduced": float(self.chi2_reduced),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "message": self.message,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_curve(curve: DecayCurve) -> None:
    if len(curve.times) < 5:
        raise ValueError("need at least 5 points")
    if not np.any(curve.times > 0):
        raise ValueError("need at least one point with t > 0")
    if np.all(curve.signal == 0):
        raise ValueError("all-zero signal")


def _initial_guess(curve: DecayCurve, n0: float) -> tuple[float, float]:
    A = float(curve.signal[0])
    if A <= 0:
        A = float(np.max(curve.signal))
    target = A / math.e
    t, s = curve.times, curve.signal
    below = np.nonzero(s < target)[0]
    if len(below) and below[0] > 0:
        i = below[0]
        T2 = t[i - 1] + (target - s[i - 1]) * (t[i] - t[i - 1]) / (s[i] - s[i - 1])
    else:
        # no 1/e crossing sampled: extrapolate from the last point
        ratio = min(max(s[-1] / A, 1e-6), 1.0 - 1e-6)
        T2 = t[-1] / (-math.log(ratio)) ** (1.0 / n0)
    return A, float(max(T2, 1e-3 * t[t > 0].min()))


def _fit_decay(curve: DecayCurve, pinned_n: Optional[float], options: Optional[FitOptions]):
    n0 = 1.5 if pinned_n is None else pinned_n
    A0, T0 = _initial_guess(curve, n0)
    t, y, s = curve.times, curve.signal, curve.sigma

    def unpack(p):
        n = float(np.exp(p[2])) if pinned_n is None else pinned_n
        return p[0], float(np.exp(p[1])), n

    def residual(p, _):
        A, T2, n = unpack(p)
        with np.errstate(over="ignore"):
            return (y - A * np.exp(-(t / T2) ** n)) / s

    def jacobian(p, _):
        A, T2, n = unpack(p)
        x = t / T2
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            xn = x ** n
            e = np.exp(-xn)
            dA = e
            dlogT = A * e * n * xn
            cols = [dA, dlogT]
            if pinned_n is None:
                dlogn = -A * e * xn * np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0) * n
                cols.append(dlogn)
        return -np.column_stack(cols) / s[:, None]

    p0 = [A0, math.log(T0)] + ([] if pinned_n is not None else [math.log(n0)])
    model = Model(residual, len(p0), None, jacobian)
    out = least_squares(model, np.array(p0), options)
    A, T2, n = unpack(out.params)
    # covariance of (A, T2[, n]) from that of (A, log T2[, log n])
    scale = np.array([1.0, T2] + ([] if pinned_n is not None else [n]))
    cov = out.covariance * np.outer(scale, scale)
    return A, T2, n, cov, out


def fit_stretched_exp(curve: DecayCurve, options: Optional[FitOptions] = None) -> StretchedExpFit:
    """Weighted fit of ``A exp(-(t/T2)^n)``; ``T2`` and ``n`` are fitted as logarithms."""
    _check_curve(curve)
    A, T2, n, cov, out = _fit_decay(curve, None, options)
    return StretchedExpFit(A, T2, n, cov, out.converged, out.message, out.chi2_reduced, out.iterations)


@dataclass
class T1Fit:
    A: float
    T1: float
    error: float
    converged: bool
    unbounded: bool
    message: str

    def to_dict(self) -> dict:
        return {"A": self.A, "T1_s": self.T1, "T1_err_s": self.error, "converged": self.converged,
                "unbounded": self.unbounded, "message": self.message}


def fit_t1(curve: DecayCurve, options: Optional[FitOptions] = None) -> T1Fit:
    """Single-exponential fit.  ``unbounded`` marks data that does not constrain ``T1``.

    A fit is unbounded when the fitted lifetime exceeds 100 times the sampled
    span or its standard error exceeds the value itself.
    """
    _check_curve(curve)
    A, T1, _, cov, out = _fit_decay(curve, 1.0, options)
    err = float(math.sqrt(max(cov[1, 1], 0.0)))
    span = float(curve.times[-1] - curve.times[0])
    unbounded = (not math.isfinite(T1)) or T1 > 100.0 * span or not err < T1
    message = out.message
    if unbounded:
        message = f"T1 not constrained by the sampled span ({message})"
    return T1Fit(A, T1, err, out.converged and not unbounded, unbounded, message)


def effective_t2(seq: PulseSequence, noise: NoiseModel, include_t1: bool = False,
                 t_hint: Optional[float] = None) -> float:
    """Time at which the signal first falls to 1/e."""
    from scipy.optimize import brentq

    def g(t):
        return chi(seq, t, noise) + (t / noise.T1 if include_t1 else 0.0) - 1.0

    hi = t_hint or noise.tau_c
    while g(hi) < 0:
        hi *= 2.0
    lo = hi / 2.0
    while g(lo) > 0:
        lo /= 2.0
    return brentq(g, lo, hi, xtol=1e-15, rtol=1e-12)


def calibrate_bath(target_t2: float = 690e-6, target_n: float = 2.0, T1: float = 3.0e-3,
                   seq: Optional[PulseSequence] = None, n_points: int = 40) -> NoiseModel:
    """Find (b, tau_c) whose noiseless decay fits to the target ``T2`` and stretch.

    The decay is sampled on ``n_points`` equally spaced times up to
    ``2.5 * target_t2`` and fitted with unit weights.  Deterministic: no
    random numbers are involved.
    """
    from scipy.optimize import least_squares as scipy_ls

    seq = seq or PulseSequence.hahn()
    times = np.linspace(0.0, 2.5 * target_t2, n_points)

    def mismatch(logp):
        noise = NoiseModel(math.exp(logp[0]), math.exp(logp[1]), T1)
        w = coherence_signal(seq, times, noise)
        fit = fit_stretched_exp(DecayCurve(times, w, np.full_like(w, 1e-3)))
        return [math.log(fit.T2 / target_t2), math.log(fit.n / target_n)]

    start = [math.log(1.0 / target_t2 * 2.0), math.log(target_t2 / 2.0)]
    sol = scipy_ls(mismatch, start, xtol=1e-12, ftol=1e-12)
    return NoiseModel(math.exp(sol.x[0]), math.exp(sol.x[1]), T1)


@dataclass
class SurveyResult:
    layers: list[float]
    bin_edges: np.ndarray
    counts: np.ndarray
    n_above: int
    n_total: int
    threshold: float
    depth_p_value: float

    @property
    def tally(self) -> str:
        return f"{self.n_above}/{self.n_total}"

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["depth_um", "t2_lo_s", "t2_hi_s", "count"])
        for layer, row in zip(self.layers, self.counts):
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], row):
                w.writerow([repr(float(layer)), repr(float(lo)), repr(float(hi)), int(c)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_dict(self) -> dict:
        return {"tally": self.tally, "n_above": self.n_above, "n_total": self.n_total,
                "threshold_s": self.threshold, "depth_p_value": self.depth_p_value,
                "layers_um": list(self.layers)}


def survey(fits: Sequence, depths: Sequence[float], threshold: float = 500e-6,
           bin_edges: Optional[Sequence[float]] = None,
           layers: Optional[Sequence[float]] = None) -> SurveyResult:
    """Histogram of T2 per depth layer and the count of fits above ``threshold``.

    ``fits`` holds :class:`StretchedExpFit` objects or bare T2 values (s).
    ``layers`` lists depths to report even when no fit falls in them.  The
    depth test is a chi-square test of the above/below-threshold table over
    non-empty layers (p = 1 when fewer than two layers are testable).
    """
    if len(fits) != len(depths):
        raise ValueError("fits and depths must be aligned")
    t2 = np.array([f.T2 if hasattr(f, "T2") else float(f) for f in fits], dtype=float)
    d = np.asarray(depths, dtype=float)
    all_layers = sorted(set(d.tolist()) | set(layers or []))
    edges = np.asarray(bin_edges if bin_edges is not None else np.arange(0.0, 3.01e-3, 250e-6), dtype=float)
    counts = np.zeros((len(all_layers), len(edges) - 1), dtype=int)
    table = []
    for i, layer in enumerate(all_layers):
        sel = t2[d == layer]
        counts[i] = np.histogram(np.clip(sel, edges[0], edges[-1]), edges)[0]
        if len(sel):
            table.append([int(np.sum(sel > threshold)), int(np.sum(sel <= threshold))])
    p_value = 1.0
    tab = np.array(table)
    if len(tab) >= 2 and np.all(tab.sum(axis=0) > 0):
        p_value = float(stats.chi2_contingency(tab, correction=False)[1])
    return SurveyResult(all_layers, edges, counts, int(np.sum(t2 > threshold)), len(t2), threshold, p_value)
