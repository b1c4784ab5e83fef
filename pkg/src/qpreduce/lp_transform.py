"""Closed-form L-P transformation and its sampled inverses.

With the normal-form map v = Phi(w) and the fictitious modes replaced by their
exact solutions c exp(+-i omega t), the physical block becomes x = Phi(t) w with
w' = JBar w. Normalising by P0 = Phi(0) gives Q(t) = Phi(t) P0^-1 with Q(0) = I,
so that x = Q(t) y and y' = P0 JBar P0^-1 y is time invariant.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .augmentation import AugmentedSystem, QPLinearSystem, Spectrum
from .errors import AssemblyError, DivergenceError, SingularSampleError
from .normal_form import JBar, NearIdentityTransform
from .qpalgebra import DEFAULT_TRUNC, QPMatrix, QPSeries, QPStatePoly, compose

SINGULAR_COND = 1e12


@dataclass
class LPTransform:
    Q: QPMatrix
    P0: np.ndarray
    jbar: JBar
    verification: dict = field(default_factory=dict)

    @property
    def basis(self):
        return self.Q.basis

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def P0inv(self) -> np.ndarray:
        return np.linalg.inv(self.P0)

    @property
    def Jhat(self) -> np.ndarray:
        """P0 JBar P0^-1: the real time-invariant matrix in the y = P0 w coordinates."""
        return np.real_if_close(self.P0 @ self.jbar.matrix @ self.P0inv, tol=1e6)

    @property
    def Qdot(self) -> QPMatrix:
        return self.Q.ddt()

    def __call__(self, t):
        return self.Q.evaluate(t).real

    def modal_map(self, t):
        """Matrix T(t) = Q(t) P0 with x = T(t) w."""
        return self.Q.evaluate(t) @ self.P0


def _fictitious_subs(spec: Spectrum, basis, n: int, R: int, trunc: int) -> list[QPStatePoly]:
    subs = [QPStatePoly.variable(basis, n, l, max_degree=R, trunc_order=trunc) for l in range(n)]
    for (b, sign, c) in spec.fictitious:
        p = np.zeros(basis.k, np.int64)
        p[b] = sign
        subs.append(QPStatePoly.from_series(QPSeries.exp(basis, p, c, trunc_order=trunc), n, max_degree=R))
    return subs


def assemble_Q(nit: NearIdentityTransform, aug: AugmentedSystem, spec: Spectrum, jbar: JBar,
               trunc_order: int = DEFAULT_TRUNC, probe=None, system: QPLinearSystem | None = None
               ) -> LPTransform:
    n = spec.n_physical
    basis = aug.basis
    subs = _fictitious_subs(spec, basis, n, nit.max_order, trunc_order)
    entries = []
    for j in range(n):
        row_poly = compose(nit.composite[j], subs, max_degree=nit.max_order, trunc_order=trunc_order)
        if (row_poly.degrees() != 1).any() and np.abs(row_poly.vals[row_poly.degrees() != 1]).max() > 1e-12:
            raise AssemblyError("normal-form map is not linear in the physical modes")
        entries.append([row_poly.coefficient(np.eye(n, dtype=np.int64)[k]) for k in range(n)])
    Phi_modal = QPMatrix.from_entries(entries)
    Phi = spec.M[:n, :n] @ Phi_modal
    P0 = Phi.evaluate(0.0)
    cond = np.linalg.cond(P0)
    if cond > SINGULAR_COND:
        raise AssemblyError(f"Phi(0) is singular (cond={cond:.3g})")
    Q = (Phi @ np.linalg.inv(P0)).purge()
    asym = Q.asymmetry()
    scale = max(1.0, float(np.abs(Q.coef).max()))
    if asym > 1e-8 * scale:
        raise AssemblyError(f"assembled transformation is not real (asymmetry {asym:.3g})")
    Q = Q.as_real().purge()
    lp = LPTransform(Q, P0, jbar)
    lp.verification = verify(lp, probe, system)
    if lp.verification["q0_error"] > 1e-6:
        raise AssemblyError(f"Q(0) deviates from I by {lp.verification['q0_error']:.3g}")
    return lp


def verify(lp: LPTransform, probe=None, system: QPLinearSystem | None = None) -> dict:
    probe = np.linspace(0.0, 50.0, 1000) if probe is None else np.asarray(probe, float)
    n = lp.n
    out = {"q0_error": float(np.abs(lp.Q.evaluate(0.0) - np.eye(n)).sum(axis=1).max())}
    Qs = lp.Q.evaluate(probe).real
    W = np.linalg.solve(Qs, np.broadcast_to(np.eye(n), Qs.shape))
    out["inverse_residual"] = float(_inf_norms(Qs @ W - np.eye(n)).max())
    if system is not None:
        Qd = lp.Qdot.evaluate(probe).real
        A = np.stack([system.A(t) for t in probe])
        D = Qd + Qs @ lp.Jhat.real - A @ Qs
        out["lp_defect"] = float(_inf_norms(D).max())
    return out


def _inf_norms(stack: np.ndarray) -> np.ndarray:
    return np.abs(stack).sum(axis=-1).max(axis=-1)


@dataclass
class SampledInverse:
    times: np.ndarray
    matrices: np.ndarray
    residuals: np.ndarray

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation between samples (clamped at the ends)."""
        ts = self.times
        if t <= ts[0]:
            return self.matrices[0]
        if t >= ts[-1]:
            return self.matrices[-1]
        i = int(np.searchsorted(ts, t)) - 1
        a = (t - ts[i]) / (ts[i + 1] - ts[i])
        return (1 - a) * self.matrices[i] + a * self.matrices[i + 1]

    def to_csv(self) -> str:
        n = self.matrices.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"W{i + 1}{j + 1}" for i in range(n) for j in range(n)] + ["residual"])
        for t, M, r in zip(self.times, self.matrices, self.residuals):
            w.writerow([f"{t:.15g}"] + [f"{v:.15g}" for v in M.reshape(-1)] + [f"{r:.15g}"])
        return buf.getvalue()


def invert_direct(lp: LPTransform, grid) -> SampledInverse:
    times = np.asarray(grid, float)
    Qs = lp.Q.evaluate(times).real
    n = Qs.shape[-1]
    conds = np.linalg.cond(Qs)
    bad = np.flatnonzero(~(conds <= SINGULAR_COND))
    if bad.size:
        i = int(bad[0])
        raise SingularSampleError(float(times[i]), float(conds[i]))
    W = np.linalg.solve(Qs, np.broadcast_to(np.eye(n), Qs.shape).copy())
    return SampledInverse(times, W, _inf_norms(Qs @ W - np.eye(n)))


def _power_sigmoid(E: np.ndarray, xi: float = 4.0, p: int = 3) -> np.ndarray:
    big = np.abs(E) >= 1
    s = (1 + np.exp(-xi)) / (1 - np.exp(-xi)) * (1 - np.exp(-xi * E)) / (1 + np.exp(-xi * E))
    return np.where(big, E ** p, s)


@dataclass(frozen=True)
class ZNNConfig:
    gamma: float = 100.0
    activation: str = "linear"
    step: float | None = None
    grid: tuple = ()
    initial: np.ndarray | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.activation not in ("linear", "power-sigmoid"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.gamma * self.effective_step > 0.1 + 1e-12:
            raise ValueError("gamma * step must not exceed 0.1")

    @property
    def effective_step(self) -> float:
        return 0.05 / self.gamma if self.step is None else self.step


def invert_znn(lp: LPTransform, cfg: ZNNConfig) -> SampledInverse:
    """Integrate Q W' = -Q' W - gamma F(Q W - I) with fixed-step RK4."""
    times = np.asarray(cfg.grid, float)
    if times.size == 0:
        raise ValueError("ZNN grid must contain at least one time")
    if times[0] < 0 or np.any(np.diff(times) < 0):
        raise ValueError("ZNN grid must be non-negative and non-decreasing")
    n = lp.n
    I = np.eye(n)
    F = (lambda E: E) if cfg.activation == "linear" else _power_sigmoid
    h_max = cfg.effective_step
    # stage grid: per output interval, m equal substeps with midpoints
    pts, plan = [0.0], []
    t0 = 0.0
    for t1 in times:
        m = int(np.ceil((t1 - t0) / h_max - 1e-9)) if t1 > t0 else 0
        plan.append(m)
        if m:
            h = (t1 - t0) / m
            base = t0 + h * np.arange(m)
            pts.extend(np.column_stack([base + h / 2, base + h]).reshape(-1))
        t0 = t1
    pts = np.array(pts)
    Qs = lp.Q.evaluate(pts).real
    Qd = lp.Qdot.evaluate(pts).real
    gamma = cfg.gamma

    def rhs(k, W):
        Qk = Qs[k]
        return np.linalg.solve(Qk, -Qd[k] @ W - gamma * F(Qk @ W - I))

    W = I.copy() if cfg.initial is None else np.array(cfg.initial, float)
    out = np.empty((len(times), n, n))
    k = 0
    t0 = 0.0
    for i, (t1, m) in enumerate(zip(times, plan)):
        if m:
            h = (t1 - t0) / m
            for _ in range(m):
                k1 = rhs(k, W)
                k2 = rhs(k + 1, W + 0.5 * h * k1)
                k3 = rhs(k + 1, W + 0.5 * h * k2)
                k4 = rhs(k + 2, W + h * k3)
                W = W + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                k += 2
            if not np.all(np.isfinite(W)):
                raise DivergenceError(f"ZNN state became non-finite before t={t1:.6g}")
        out[i] = W
        t0 = t1
    Qt = lp.Q.evaluate(times).real
    return SampledInverse(times, out, _inf_norms(Qt @ out - I))


def constant_transform(Q: np.ndarray, basis, jbar: JBar | None = None) -> LPTransform:
    """An LPTransform with a constant (or test) matrix; handy for checks and trivial systems."""
    Q = np.asarray(Q, float)
    n = Q.shape[0]
    jb = jbar or JBar(np.zeros(n, complex), np.zeros(n, complex))
    return LPTransform(QPMatrix.constant(basis, Q), np.eye(n, dtype=complex), jb)
