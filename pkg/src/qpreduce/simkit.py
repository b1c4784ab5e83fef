"""Fixed-step integration, trajectory comparison and Welch spectra."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import BlowUpError, GridError, SegmentError
from .qpalgebra import PolyEvaluator, QPStatePoly

DEFAULT_STEP = 1e-3


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.states = np.asarray(self.states)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if len(self.times) < 2 or len(self.times) != len(self.states):
            raise GridError("a trajectory needs at least two samples and one state row per time")
        dt = np.diff(self.times)
        if np.abs(dt - dt[0]).max() > 1e-9 * max(1.0, abs(self.times[-1])):
            raise GridError("trajectory times must be uniformly spaced")

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.step

    def to_csv(self, names=None) -> str:
        n = self.states.shape[1]
        names = names or [f"x{i + 1}" for i in range(n)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + list(names))
        for t, row in zip(self.times, np.real(self.states)):
            w.writerow([f"{t:.15g}"] + [f"{v:.15g}" for v in row])
        return buf.getvalue()


def integrate(rhs, x0, t_span, step: float = DEFAULT_STEP, metadata=None) -> Trajectory:
    """Classical RK4 on a uniform grid; complex states are integrated as given."""
    if not step > 0:
        raise ValueError("step must be positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    nsteps = max(1, int(round((t1 - t0) / step)))
    h = (t1 - t0) / nsteps
    x = np.array(x0, dtype=complex if np.iscomplexobj(x0) else float)
    out = np.empty((nsteps + 1, x.size), dtype=x.dtype)
    out[0] = x
    times = t0 + h * np.arange(nsteps + 1)
    for i in range(nsteps):
        t = times[i]
        k1 = rhs(t, x)
        k2 = rhs(t + h / 2, x + h / 2 * k1)
        k3 = rhs(t + h / 2, x + h / 2 * k2)
        k4 = rhs(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(float(times[i + 1]))
        out[i + 1] = x
    meta = {"integrator": "rk4", "step": h}
    meta.update(metadata or {})
    return Trajectory(times, out, meta)


def poly_rhs(linear_diag, polys: list[QPStatePoly], forcing=(), prune: float = 0.0):
    """RHS z' = diag(lambda) z + w(z, t) + F(t) for complex modal models."""
    lam = np.asarray(linear_diag, complex)
    r = len(lam)
    terms = list(polys)
    if forcing:
        terms = [p + QPStatePoly.from_series(f, r, max_degree=p.max_degree).embed(p.basis)
                 if p.basis != f.basis else p + QPStatePoly.from_series(f, r, max_degree=p.max_degree)
                 for p, f in zip(terms, forcing)]
    ev = PolyEvaluator(terms, prune=prune)

    def rhs(t, z):
        return lam * z + ev(t, z)

    rhs.evaluator = ev
    return rhs


# ----------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class PSDConfig:
    sample_rate: float = 100.0
    segment_len: int = 4096
    overlap_frac: float = 0.5
    threshold_db: float = -20.0
    window: str = "hann"


def welch_psd(x, sample_rate: float, segment_len: int = 4096, overlap_frac: float = 0.5,
              window: str = "hann"):
    """One-sided Welch density (Hz axis)."""
    x = np.asarray(x, float)
    if segment_len > len(x):
        raise SegmentError(f"segment of {segment_len} samples exceeds signal length {len(x)}")
    if not 0 <= overlap_frac < 1:
        raise ValueError("overlap fraction must lie in [0, 1)")
    f, p = sps.welch(x, fs=sample_rate, window=window, nperseg=segment_len,
                     noverlap=int(overlap_frac * segment_len), detrend="constant",
                     scaling="density", return_onesided=True)
    return f, np.maximum(p, 0.0)


def psd_peaks(freqs, dens, threshold_db: float = -20.0) -> list[tuple[float, float]]:
    """Local maxima within threshold_db of the strongest one, sorted by power."""
    dens = np.asarray(dens)
    top = float(dens.max(initial=0.0))
    if top <= 0:
        return []
    idx, _ = sps.find_peaks(dens, height=top * 10 ** (threshold_db / 10))
    return sorted(((float(freqs[i]), float(dens[i])) for i in idx), key=lambda fp: -fp[1])


def resample(traj: Trajectory, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Linearly resample onto a uniform grid of the given rate."""
    t = np.arange(traj.times[0], traj.times[-1] + 1e-12, 1.0 / rate)
    cols = [np.interp(t, traj.times, np.real(traj.states[:, j])) for j in range(traj.states.shape[1])]
    return t, np.stack(cols, axis=1)


@dataclass
class ComparisonReport:
    rms_error: list[float]
    max_error: list[float]
    psd_peaks_a: list[list[float]]
    psd_peaks_b: list[list[float]]
    psd_state_match: list[bool]
    bin_width: float

    @property
    def psd_match(self) -> bool:
        return all(self.psd_state_match)

    def to_dict(self) -> dict:
        return {"rms_error": self.rms_error, "max_error": self.max_error,
                "psd_peaks_a_hz": self.psd_peaks_a, "psd_peaks_b_hz": self.psd_peaks_b,
                "psd_state_match": self.psd_state_match, "psd_match": self.psd_match,
                "bin_width_hz": self.bin_width}


def _peaks_match(pa, pb, width) -> bool:
    if not pa:
        return not pb
    fb = np.array([f for f, _ in pb])
    return bool(fb.size) and all(np.abs(fb - f).min() <= width * (1 + 1e-9) for f, _ in pa)


def compare(a: Trajectory, b: Trajectory, psd_cfg: PSDConfig | None = None) -> ComparisonReport:
    cfg = psd_cfg or PSDConfig()
    lo, hi = max(a.times[0], b.times[0]), min(a.times[-1], b.times[-1])
    if not hi > lo:
        raise GridError("trajectories share no common time window")
    if a.states.shape[1] != b.states.shape[1]:
        raise GridError("trajectories have different state dimensions")
    # evaluate on the coarser grid; nested grids then compare coincident samples exactly
    ref = b if b.step > a.step else a
    m = (ref.times >= lo - 1e-12) & (ref.times <= hi + 1e-12)
    ta = ref.times[m]

    def on_grid(tr):
        return np.stack([np.interp(ta, tr.times, np.real(tr.states[:, j]))
                         for j in range(tr.states.shape[1])], axis=1)

    xa, xb = on_grid(a), on_grid(b)
    err = xa - xb
    rms = np.sqrt(np.mean(err ** 2, axis=0)).tolist()
    mx = np.abs(err).max(axis=0).tolist()
    sa = Trajectory(ta, xa)
    sb = Trajectory(ta, xb)
    _, ra = resample(sa, cfg.sample_rate)
    _, rb = resample(sb, cfg.sample_rate)
    width = cfg.sample_rate / cfg.segment_len
    pa_all, pb_all, match = [], [], []
    for j in range(xa.shape[1]):
        fa, da = welch_psd(ra[:, j], cfg.sample_rate, cfg.segment_len, cfg.overlap_frac, cfg.window)
        fb, db = welch_psd(rb[:, j], cfg.sample_rate, cfg.segment_len, cfg.overlap_frac, cfg.window)
        pa = psd_peaks(fa, da, cfg.threshold_db)
        pb = psd_peaks(fb, db, cfg.threshold_db)
        pa_all.append([f for f, _ in pa])
        pb_all.append([f for f, _ in pb])
        match.append(_peaks_match(pa, pb, width))
    return ComparisonReport(rms, mx, pa_all, pb_all, match, width)


def psd_csv(freqs, dens_columns: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["f_hz"] + list(dens_columns))
    cols = list(dens_columns.values())
    for i, f in enumerate(freqs):
        w.writerow([f"{f:.15g}"] + [f"{c[i]:.15g}" for c in cols])
    return buf.getvalue()
