"""Master/slave partition of the L-P transformed system and reduced-order models.

The transformed system is z' = JBar z + w(z, t) + F(t) in normal-form modal
coordinates with x = Q(t) P0 z. Linear reduction drops the slave modes;
manifold reduction writes z_s = H(z_r, t) as a graded quasi-periodic
polynomial and substitutes it into the master equations.

Grading: a monomial of total state degree d in w is of order eps^(d-1) and the
forcing is O(1). The manifold is H = sum h[k, m] with k the degree in z_r and
m the eps-order. Each h[k, m] solves

    dh/dt + dh/dz_r . (Jr z_r) - Js h = S[k, m]

where S[k, m] collects the (k, m)-graded part of w_s(z_r, H) + F_s
- dH/dz_r . (w_r(z_r, H) + F_r) built from the coefficients already known.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augmentation import QPLinearSystem
from .errors import (DimError, ImaginaryLeak, LinearResonance, PartitionError,
                     ReducibilityViolation)
from .lp_transform import LPTransform, SampledInverse, invert_direct
from .normal_form import classify
from .qpalgebra import (FrequencyBasis, QPMatrix, QPSeries, QPStatePoly, compose,
                        fit_series, poly_mul, poly_substitute)

DEFAULT_BOUND = 5
MAX_EPS = 2


@dataclass
class ForcedSystem:
    """x' = A(t) x + g(x) + F(t): parametric linear part, polynomial nonlinearity, forcing."""

    linear: QPLinearSystem
    nonlinear: list[QPStatePoly]
    forcing: list[QPSeries]

    def __post_init__(self):
        n = self.linear.dimension
        if len(self.nonlinear) != n or len(self.forcing) != n:
            raise DimError(f"nonlinearity and forcing need {n} components")
        for g in self.nonlinear:
            if g.state_dim != n:
                raise DimError("nonlinear terms must be polynomials in the physical state")
            if (g.freq_idx != 0).any():
                raise DimError("physical nonlinearity must have constant coefficients")
        fb = self.forcing[0].basis
        if not self.linear.basis.is_prefix_of(fb):
            raise DimError("forcing basis must extend the parametric basis")

    @property
    def dimension(self) -> int:
        return self.linear.dimension

    @property
    def forcing_basis(self) -> FrequencyBasis:
        return self.forcing[0].basis

    def _compiled(self):
        cache = self.__dict__.get("_rhs_cache")
        if cache is None:
            n = self.dimension
            terms = self.linear.parametric_terms
            w = self.linear.basis.omega_array
            flat = np.array([t.row * n + t.col for t in terms], int)
            amps = np.array([t.amplitude for t in terms], float)
            freqs = w[[t.freq_index for t in terms]] if terms else np.zeros(0)
            is_cos = np.array([t.kind == "cos" for t in terms], bool)
            # physical nonlinearity: real coefficients on a shared monomial list
            rows = [tuple(e) for g in self.nonlinear for e in g.exps.tolist()]
            monos = sorted(set(rows))
            G = np.zeros((n, len(monos)))
            for j, g in enumerate(self.nonlinear):
                for e, c in zip(g.exps.tolist(), g.vals):
                    G[j, monos.index(tuple(e))] += c.real
            E = np.array(monos, int).reshape(-1, n)
            fb = self.forcing_basis
            keys = sorted({p for f in self.forcing for p in f.coeffs})
            C = np.zeros((len(keys), n), complex)
            for j, f in enumerate(self.forcing):
                for p, c in f.coeffs.items():
                    C[keys.index(p), j] += c
            ffreq = np.array([fb.frequency(p) for p in keys]) if keys else np.zeros(0)
            cache = (flat, amps, freqs, is_cos, E, G, ffreq, C)
            self.__dict__["_rhs_cache"] = cache
        return cache

    def rhs(self, t: float, x: np.ndarray) -> np.ndarray:
        flat, amps, freqs, is_cos, E, G, ffreq, C = self._compiled()
        n = self.dimension
        A = self.linear.B0.copy()
        if amps.size:
            ph = freqs * t
            A.reshape(-1)[:] += np.bincount(flat, amps * np.where(is_cos, np.cos(ph), np.sin(ph)), n * n)
        out = A @ x
        if E.size:
            out = out + G @ np.prod(x ** E, axis=1)
        if ffreq.size:
            out = out + (np.exp(1j * t * ffreq) @ C).real
        return out

    def rhs_linear(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.linear.A(t) @ x


@dataclass
class TransformedSystem:
    """z' = diag(jbar) z + w(z, t) + F(t) with x = Q(t) P0 z."""

    jbar: np.ndarray
    w: list[QPStatePoly]
    F: list[QPSeries]
    lp: LPTransform
    inverse_fit: QPMatrix
    fit_residuals: dict = field(default_factory=dict)

    @property
    def basis(self) -> FrequencyBasis:
        return self.F[0].basis

    @property
    def n(self) -> int:
        return len(self.jbar)


def _linear_subs(T: QPMatrix, n: int, max_degree: int, trunc: int) -> list[QPStatePoly]:
    """x_l = sum_k T_lk(t) z_k as polynomials in z."""
    eye = np.eye(n, dtype=np.int64)
    out = []
    for l in range(n):
        acc = QPStatePoly.zero(T.basis, n, max_degree, trunc)
        for k in range(n):
            s = T.entry(l, k)
            if not s.is_zero():
                acc = acc + QPStatePoly.from_series(s, n, eye[k], max_degree)
        out.append(acc)
    return out


def fit_inverse(lp: LPTransform, inverse: SampledInverse, bound: int = DEFAULT_BOUND):
    """Least-squares QP fit of the sampled inverse entries over the parametric basis."""
    n = lp.n
    basis = lp.basis
    series, resid = fit_series(basis, inverse.times, inverse.matrices.reshape(len(inverse.times), -1),
                               [bound] * basis.k, trunc_order=bound, real_flag=True)
    entries = [[series[i * n + j] for j in range(n)] for i in range(n)]
    return QPMatrix.from_entries(entries), float(np.max(resid))


def transform_system(system: ForcedSystem, lp: LPTransform, inverse: SampledInverse | None = None,
                     window: tuple[float, float] = (0.0, 200.0), dt: float = 0.02,
                     bound: int = DEFAULT_BOUND) -> TransformedSystem:
    n = system.dimension
    times = np.arange(window[0], window[1] + 0.5 * dt, dt)
    if inverse is None:
        inverse = invert_direct(lp, times)
    elif len(inverse.times) != len(times) or not np.allclose(inverse.times, times):
        inverse = SampledInverse(times, np.stack([inverse.at(t) for t in times]),
                                 np.zeros(len(times)))
    Wfit, w_resid = fit_inverse(lp, inverse, bound)
    P0inv = lp.P0inv
    S = P0inv @ Wfit
    T = lp.Q @ lp.P0
    deg = max(int(g.degrees().max(initial=1)) for g in system.nonlinear)
    subs = _linear_subs(T, n, deg, bound)
    gsub = [compose(g.truncated(max_degree=deg), subs, max_degree=deg, trunc_order=bound)
            if not g.is_zero() else QPStatePoly.zero(lp.basis, n, deg, bound)
            for g in system.nonlinear]
    fb = system.forcing_basis
    w = []
    for j in range(n):
        acc = QPStatePoly.zero(lp.basis, n, deg, bound)
        for l in range(n):
            s = S.entry(j, l)
            if not gsub[l].is_zero() and not s.is_zero():
                acc = acc + poly_mul(gsub[l], QPStatePoly.from_series(s, n, max_degree=deg), deg, bound)
        w.append(acc.embed(fb))
    # transformed forcing: sample P0^-1 W(t) F(t) and refit on the full basis
    Fs = np.stack([f.evaluate(times) for f in system.forcing], axis=1)
    samples = np.einsum("ij,tjk,tk->ti", P0inv, inverse.matrices, Fs)
    hf = int(max(np.abs(f.idx[:, lp.basis.k:]).max(initial=0) for f in system.forcing))
    bounds = [bound] * lp.basis.k + [hf] * (fb.k - lp.basis.k)
    Fbar, f_resid = fit_series(fb, times, samples, bounds, trunc_order=bound, real_flag=False)
    fscale = max(1e-300, float(np.sqrt(np.mean(np.abs(Fs) ** 2))))
    return TransformedSystem(
        lp.jbar.diagonal.copy(), w, list(Fbar), lp, Wfit,
        {"inverse_rms": w_resid, "forcing_rms": float(np.max(f_resid)),
         "forcing_rel_rms": float(np.max(f_resid)) / fscale},
    )


# ----------------------------------------------------------------------------
# partition


def permute_vars(p: QPStatePoly, perm) -> QPStatePoly:
    """New variable i is old variable perm[i]."""
    n = p.state_dim
    cols = list(perm) + list(range(n, p.keys.shape[1]))
    return p._like(p.keys[:, cols], p.vals)


def conjugate_partners(eigs: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    eigs = np.asarray(eigs, complex)
    scale = max(1.0, float(np.abs(eigs).max(initial=0.0)))
    out = np.full(len(eigs), -1)
    for i, lam in enumerate(eigs):
        d = np.abs(eigs - np.conj(lam))
        if abs(lam.imag) <= tol * scale:
            out[i] = i
            continue
        d[i] = np.inf
        j = int(np.argmin(d))
        if d[j] > 1e-6 * scale:
            raise PartitionError(f"eigenvalue {lam} has no conjugate partner")
        out[i] = j
    return out


def default_masters(jbar: np.ndarray, omega_f: float) -> list[int]:
    """The conjugate pair whose |Im lambda| lies nearest the forcing frequency."""
    partner = conjugate_partners(jbar)
    best = int(np.argmin(np.abs(np.abs(np.imag(jbar)) - omega_f)))
    return sorted({best, int(partner[best])})


@dataclass
class PartitionedSystem:
    Jr: np.ndarray
    Js: np.ndarray
    wr: list[QPStatePoly]
    ws: list[QPStatePoly]
    Fr: list[QPSeries]
    Fs: list[QPSeries]
    master_indices: list[int]
    slave_indices: list[int]
    transformed: TransformedSystem | None = None

    @property
    def r(self) -> int:
        return len(self.Jr)

    @property
    def s(self) -> int:
        return len(self.Js)

    @property
    def n(self) -> int:
        return self.r + self.s

    @property
    def perm(self) -> list[int]:
        return list(self.master_indices) + list(self.slave_indices)

    @property
    def basis(self) -> FrequencyBasis:
        return self.Fr[0].basis if self.Fr else self.Fs[0].basis


def partition(system: TransformedSystem, master_indices) -> PartitionedSystem:
    n = system.n
    masters = sorted(int(i) for i in master_indices)
    if len(set(masters)) != len(masters) or any(not 0 <= i < n for i in masters) or not masters:
        raise PartitionError(f"invalid master indices {list(master_indices)} for {n} states")
    partner = conjugate_partners(system.jbar)
    for i in masters:
        if partner[i] not in masters:
            raise PartitionError(f"mode {i} is a master but its conjugate {partner[i]} is not")
    slaves = [i for i in range(n) if i not in masters]
    perm = masters + slaves
    w = [permute_vars(p, perm) for p in system.w]
    return PartitionedSystem(
        system.jbar[masters].copy(), system.jbar[slaves].copy(),
        [w[i] for i in masters], [w[i] for i in slaves],
        [system.F[i] for i in masters], [system.F[i] for i in slaves],
        masters, slaves, system,
    )


# ----------------------------------------------------------------------------
# manifold

CONDITIONS = {(0, 0): "Eq33-linear", (2, 1): "Eq39", (1, 1): "Eq43", (0, 1): "Eq45",
              (3, 2): "Eq52", (2, 2): "Eq55", (1, 2): "Eq43", (0, 2): "Eq57"}
PARAMETRIC_ONLY = {"Eq39", "Eq52"}


def family_name(k: int, m: int) -> str:
    return f"h{k}{m + 1}"


@dataclass(frozen=True)
class ReducibilityCheck:
    condition: str
    component: int
    monomial: tuple[int, ...]
    p: tuple[int, ...]
    labels: tuple[str, ...]
    k: int
    m: int
    divisor: float
    status: str

    def to_dict(self) -> dict:
        return {"condition": self.condition, "component": self.component,
                "monomial": list(self.monomial), "p": list(self.p), "labels": list(self.labels),
                "k": self.k, "m": self.m, "divisor": self.divisor, "status": self.status}


@dataclass
class ReducibilityReport:
    tolerance: float
    checks: list[ReducibilityCheck] = field(default_factory=list)

    @property
    def min_divisor(self) -> float:
        return min((c.divisor for c in self.checks if c.status != "secular"), default=float("inf"))

    def violated(self) -> list[ReducibilityCheck]:
        return [c for c in self.checks if c.status == "violated"]

    def by_condition(self, cond: str) -> list[ReducibilityCheck]:
        return [c for c in self.checks if c.condition == cond]

    def to_dict(self) -> dict:
        conds = sorted({c.condition for c in self.checks})
        summary = {}
        for c in conds:
            rows = self.by_condition(c)
            live = [x.divisor for x in rows if x.status != "secular"]
            summary[c] = {"checked": len(rows), "secular": len(rows) - len(live),
                          "min_divisor": min(live, default=float("inf"))}
        return {"tolerance": self.tolerance, "min_divisor": self.min_divisor,
                "violated": [c.to_dict() for c in self.violated()], "summary": summary}


@dataclass
class ManifoldMap:
    """z_s = H(z_r, t) = sum over (k, m) of h[k, m](z_r, t)."""

    h: dict[tuple[int, int], list[QPStatePoly]]
    basis: FrequencyBasis
    r: int
    s: int
    epsilon_order_used: int
    include_homogeneous: bool = True

    def family(self, name: str) -> list[QPStatePoly]:
        """Look up a coefficient family by its hKM name (degree K, eps-order M-1)."""
        k, m = int(name[1]), int(name[2]) - 1
        return self.h.get((k, m), [QPStatePoly.zero(self.basis, self.r) for _ in range(self.s)])

    def total(self) -> list[QPStatePoly]:
        out = [QPStatePoly.zero(self.basis, self.r, 3, DEFAULT_BOUND) for _ in range(self.s)]
        for hs in self.h.values():
            out = [a + b for a, b in zip(out, hs)]
        return out

    def nonzero_families(self) -> list[str]:
        return sorted(family_name(k, m) for (k, m), hs in self.h.items()
                      if any(not p.is_zero() for p in hs))

    def __call__(self, t: float, z_r) -> np.ndarray:
        from .qpalgebra import poly_apply

        return poly_apply(self.total(), t, z_r)


def _slave_frequencies(Js: np.ndarray, basis: FrequencyBasis, include: bool):
    """Extend the basis by one frequency per distinct undamped slave |Im lambda|."""
    scale = max(1.0, float(np.abs(Js).max(initial=0.0)))
    homog = {}
    new_w, new_l = [], []
    for j, lam in enumerate(Js):
        if not include or abs(lam.real) > 1e-9 * scale or abs(lam.imag) <= 1e-9 * scale:
            continue
        nu = abs(lam.imag)
        for i, w in enumerate(new_w):
            if abs(w - nu) <= 1e-9 * scale:
                break
        else:
            new_w.append(nu)
            new_l.append(f"nu{len(new_w)}")
            i = len(new_w) - 1
        homog[j] = (basis.k + i, int(np.sign(lam.imag)))
    ext = basis.extend(new_l, new_w) if new_w else basis
    return ext, homog


def _with_eps(p: QPStatePoly) -> QPStatePoly:
    """Append a variable counting eps-order: a term of state degree d gets eps^(d-1)."""
    n = p.state_dim
    e = np.maximum(p.degrees() - 1, 0)
    keys = np.hstack([p.keys[:, :n], e[:, None], p.keys[:, n:]])
    return p._like(keys, p.vals, n=n + 1, max_degree=p.max_degree + MAX_EPS + 4)


def _drop_eps(p: QPStatePoly, r: int) -> QPStatePoly:
    keys = np.delete(p.keys, r, axis=1)
    return p._like(keys, p.vals, n=p.state_dim - 1, max_degree=max(3, p.max_degree - MAX_EPS))


def _secular_mask(f: QPStatePoly, j: int, homog: dict, r: int, k_basis: int) -> np.ndarray:
    """Master-free terms oscillating exactly at slave j's own free frequency.

    They are generated only by the retained free response; their convolution grows
    like t*exp(lambda t), which no quasi-periodic coefficient can represent.
    """
    if j not in homog:
        return np.zeros(len(f), bool)
    bi, sign = homog[j]
    target = np.zeros(k_basis, np.int64)
    target[bi] = sign
    return (f.exps[:, :r] == 0).all(axis=1) & (f.freq_idx == target).all(axis=1)


def solve_manifold(part: PartitionedSystem, tol: float | None = None, max_eps: int = MAX_EPS,
                   include_homogeneous: bool = True, slave_init=None, bound: int = DEFAULT_BOUND,
                   stop_after: tuple[int, int] | None = None):
    """Solve the graded invariance equation through eps^max_eps."""
    r, s = part.r, part.s
    lam_all = np.concatenate([part.Jr, part.Js])
    tol = 1e-4 * max(1.0, float(np.abs(lam_all).max())) if tol is None else tol
    base = part.basis
    basis, homog = _slave_frequencies(part.Js, base, include_homogeneous)
    fb_k = part.transformed.lp.basis.k if part.transformed is not None else base.k
    D = 3 + max_eps + 1
    wr = [_with_eps(p.embed(basis)) for p in part.wr]
    ws = [_with_eps(p.embed(basis)) for p in part.ws]
    Fr = [QPStatePoly.from_series(f.embed(basis), r + 1, max_degree=D) for f in part.Fr]
    Fs = [QPStatePoly.from_series(f.embed(basis), r + 1, max_degree=D) for f in part.Fs]
    var_eigs = np.concatenate([part.Jr, [0.0]])
    report = ReducibilityReport(tol)
    known: dict[tuple[int, int], list[QPStatePoly]] = {}
    init = np.zeros(s, complex) if slave_init is None else np.asarray(slave_init, complex)

    def zero():
        return QPStatePoly.zero(basis, r + 1, D, bound)

    stages = [(k, m) for m in range(max_eps + 1) for k in range(m + 1, -1, -1) if (k, m) != (1, 0)]
    for (k, m) in stages:
        def keep(keys, k=k, m=m):
            return (keys[:, :r].sum(axis=1) <= k) & (keys[:, r] <= m)

        Hs = [zero() for _ in range(s)]
        for hs in known.values():
            Hs = [a + b for a, b in zip(Hs, hs)]
        subs = [QPStatePoly.variable(basis, r + 1, l, max_degree=D, trunc_order=bound) for l in range(r)]
        subs = subs + Hs + [QPStatePoly.variable(basis, r + 1, r, max_degree=D, trunc_order=bound)]

        def substitute(p):
            if p.is_zero():
                return zero()
            return compose(p, subs, max_degree=D, trunc_order=bound, keep=keep)

        src = [substitute(p) for p in ws]
        if k == 0 and m == 0:
            src = [a + f for a, f in zip(src, Fs)]
        if known:
            drive = [substitute(p) + f for p, f in zip(wr, Fr)]
            for j in range(s):
                for l in range(r):
                    dH = Hs[j].diff(l)
                    if dH.is_zero() or drive[l].is_zero():
                        continue
                    prod = poly_mul(dH, drive[l], D, bound)
                    src[j] = src[j] - prod.select(keep(prod.keys))
        grade = [(p.keys[:, :r].sum(axis=1) == k) & (p.keys[:, r] == m) for p in src]
        src = [p.select(g) for p, g in zip(src, grade)]
        cond = CONDITIONS.get((k, m), f"order{m}-degree{k}")
        h = []
        for j, fj in enumerate(src):
            if fj.is_zero():
                hj = zero()
            else:
                d = 1j * (fj.freq_idx @ basis.omega_array) + fj.exps @ var_eigs - part.Js[j]
                labels = basis.labels if cond not in PARAMETRIC_ONLY else basis.labels[:fb_k]
                secular = _secular_mask(fj, j, homog, r, basis.k) if k == 0 else np.zeros(len(d), bool)
                for row, dv, sec in zip(fj.keys.tolist(), d, secular):
                    if sec:
                        status = "secular"
                    else:
                        status = "violated" if classify(dv, tol) != "clear" else "clear"
                    p = tuple(row[r + 1:])
                    if cond in PARAMETRIC_ONLY:
                        p = p[:fb_k]
                    chk = ReducibilityCheck(cond, j, tuple(row[:r]), p, tuple(labels), k, m,
                                            float(abs(dv)), status)
                    report.checks.append(chk)
                    if status == "violated":
                        msg = (f"divisor {abs(dv):.3g} below tolerance {tol:.3g} on slave {j}, "
                               f"monomial {tuple(row[:r])}, harmonic {tuple(row[r + 1:])}")
                        if cond == "Eq33-linear":
                            raise LinearResonance(f"linear resonance: {msg}", chk)
                        raise ReducibilityViolation(cond, msg, chk)
                ok = ~secular
                hj = fj._like(fj.keys[ok], fj.vals[ok] / d[ok], real_flag=False)
            if k == 0 and j in homog:
                # convolution solution: subtract the free response so h(0) matches the initial value
                bi, sign = homog[j]
                start = init[j] if m == 0 else 0.0
                c = start - complex(np.sum(hj.vals)) if not hj.is_zero() else start
                if c != 0:
                    key = np.zeros(r + 1 + basis.k, np.int64)
                    key[r] = m
                    key[r + 1 + bi] = sign
                    hj = hj + QPStatePoly._raw(basis, r + 1, key[None], [c], D, bound, False)
            h.append(hj)
        known[(k, m)] = h
        if stop_after == (k, m):
            break
    hmap = {km: [_drop_eps(p, r) for p in hs] for km, hs in known.items()}
    return ManifoldMap(hmap, basis, r, s, max_eps, include_homogeneous), report


def solve_h01(part: PartitionedSystem, tol=None, **kw):
    return solve_manifold(part, tol, max_eps=0, **kw)


def solve_order1(part: PartitionedSystem, tol=None, **kw):
    return solve_manifold(part, tol, max_eps=1, **kw)


def solve_order2(part: PartitionedSystem, tol=None, **kw):
    return solve_manifold(part, tol, max_eps=2, **kw)


# ----------------------------------------------------------------------------
# reduced models


@dataclass
class ReducedModel:
    Jr: np.ndarray
    wbar: list[QPStatePoly]
    Fr: list[QPSeries]
    provenance: str
    master_indices: list[int]
    slave_indices: list[int]
    manifold: ManifoldMap | None = None

    @property
    def r(self) -> int:
        return len(self.Jr)

    @property
    def basis(self) -> FrequencyBasis:
        return self.Fr[0].basis

    def selector(self) -> np.ndarray:
        n = self.r + len(self.slave_indices)
        T = np.zeros((n, self.r))
        for a, i in enumerate(self.master_indices):
            T[i, a] = 1.0
        return T


def reduce_linear(part: PartitionedSystem) -> ReducedModel:
    r = part.r
    wbar = []
    for p in part.wr:
        mask = (p.exps[:, r:] == 0).all(axis=1)
        q = p.select(mask)
        wbar.append(q._like(q.keys[:, list(range(r)) + list(range(p.state_dim, p.keys.shape[1]))],
                            q.vals, n=r))
    return ReducedModel(part.Jr.copy(), wbar, list(part.Fr), "linear",
                        list(part.master_indices), list(part.slave_indices))


def reduce_manifold(part: PartitionedSystem, manifold: ManifoldMap, max_degree: int = 3,
                    trunc_order: int = DEFAULT_BOUND) -> ReducedModel:
    basis = manifold.basis
    H = [p.embed(basis) for p in manifold.total()]
    wbar = []
    for p in part.wr:
        q = p.embed(basis)
        if q.is_zero():
            wbar.append(QPStatePoly.zero(basis, part.r, max_degree, trunc_order))
            continue
        wbar.append(poly_substitute(q, [h.truncated(max_degree=max_degree) for h in H], part.r,
                                    max_degree=max_degree, trunc_order=trunc_order))
    return ReducedModel(part.Jr.copy(), wbar, [f.embed(basis) for f in part.Fr], "manifold",
                        list(part.master_indices), list(part.slave_indices), manifold)


def recover_states(lp: LPTransform, model: ReducedModel, times, z_r, with_leak: bool = False):
    """x(t_i) = Q(t_i) P0 [z_r; z_s] in the original mode order; z_s = H(z_r, t) or 0."""
    times = np.asarray(times, float)
    z_r = np.asarray(z_r, complex).reshape(len(times), model.r)
    n = model.r + len(model.slave_indices)
    Z = np.zeros((len(times), n), complex)
    Z[:, model.master_indices] = z_r
    if model.manifold is not None and model.slave_indices:
        from .qpalgebra import PolyEvaluator

        ev = PolyEvaluator(model.manifold.total())
        Z[:, model.slave_indices] = np.stack([ev(t, z) for t, z in zip(times, z_r)])
    T = lp.Q.evaluate(times) @ lp.P0
    x = np.einsum("tij,tj->ti", T, Z)
    leak = float(np.abs(x.imag).max(initial=0.0))
    if leak > 1e-6:
        raise ImaginaryLeak(f"recovered states carry imaginary part {leak:.3g}")
    return (x.real, leak) if with_leak else x.real
