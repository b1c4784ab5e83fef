"""Order-by-order normal form of the augmented linear quasi-periodic system.

Working in modal coordinates v (physical modes first, then the fictitious ones),
each order r removes the degree-r terms whose divisor m.lambda - lambda_j is not
small through v = w + h_r(w). Whatever cannot be removed is retained; retained
terms of the form w+ w- v_j on component j become constant corrections of
lambda_j once the fictitious modes are replaced by their exact solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augmentation import AugmentedSystem, Spectrum
from .errors import IrreducibleResonance
from .qpalgebra import QPStatePoly, compose, identity_map, jacobian_apply, poly_mul

EXACT_TOL = 1e-12
DEFAULT_ORDER = 4


def default_tolerance(eigenvalues) -> float:
    return 1e-6 * max(1.0, float(np.abs(eigenvalues).max(initial=0.0)))


def classify(divisor: complex, tol: float) -> str:
    a = abs(divisor)
    if a < EXACT_TOL:
        return "exact"
    if a < tol:
        return "near"
    return "clear"


@dataclass(frozen=True)
class ResonanceEntry:
    order: int
    component: int
    monomial: tuple[int, ...]
    freq: tuple[int, ...]
    divisor: complex
    classification: str

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "component": self.component,
            "monomial": list(self.monomial),
            "freq": list(self.freq),
            "divisor": [self.divisor.real, self.divisor.imag],
            "abs_divisor": abs(self.divisor),
            "classification": self.classification,
        }


@dataclass
class ResonanceReport:
    tolerance: float
    entries: list[ResonanceEntry] = field(default_factory=list)

    def retained(self) -> list[ResonanceEntry]:
        return [e for e in self.entries if e.classification != "clear"]

    def exact(self) -> list[ResonanceEntry]:
        return [e for e in self.entries if e.classification == "exact"]

    def near(self) -> list[ResonanceEntry]:
        return [e for e in self.entries if e.classification == "near"]

    def min_divisor(self) -> float:
        return min((abs(e.divisor) for e in self.entries), default=float("inf"))

    def extend(self, other: "ResonanceReport"):
        self.entries.extend(other.entries)

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "min_divisor": self.min_divisor(),
            "retained": len(self.retained()),
            "entries": [e.to_dict() for e in self.entries],
        }


def solve_divided(f: list[QPStatePoly], var_eigs, target_eigs, tol: float, order: int = 0,
                  components=None, offset: complex = 0.0):
    """Divide every term of f_j by i(p.omega) + m.var_eigs - target_eigs[j] (+ offset).

    Returns (h, retained, report, divisors) where divisors[j] holds the per-term
    divisor array of component j so callers can check residuals.
    """
    var_eigs = np.asarray(var_eigs, complex)
    report = ResonanceReport(tol)
    h, retained, divisors = [], [], []
    for j, fj in enumerate(f):
        if (components is not None and j not in components) or fj.is_zero():
            h.append(fj.select(np.zeros(len(fj), bool)))
            retained.append(fj)
            divisors.append(np.zeros(len(fj), complex))
            continue
        d = (1j * (fj.freq_idx @ fj.basis.omega_array) + fj.exps @ var_eigs
             - target_eigs[j] + offset)
        cls = [classify(x, tol) for x in d]
        solve = np.array([c == "clear" for c in cls], bool)
        vals = np.zeros(len(fj), complex)
        vals[solve] = fj.vals[solve] / d[solve]
        h.append(fj._like(fj.keys[solve], vals[solve], real_flag=False))
        retained.append(fj._like(fj.keys[~solve], fj.vals[~solve], real_flag=False))
        divisors.append(d)
        n = fj.state_dim
        for row, dv, c in zip(fj.keys.tolist(), d, cls):
            report.entries.append(ResonanceEntry(order, j, tuple(row[:n]), tuple(row[n:]),
                                                 complex(dv), c))
    return h, retained, report, divisors


def homological_solve(J: Spectrum, f_r: list[QPStatePoly], tol: float | None = None,
                      order: int = 0, components=None):
    """Solve (m.lambda - lambda_j) h = f for the non-resonant terms of f_r."""
    lam = J.eigenvalues
    tol = default_tolerance(lam) if tol is None else tol
    h, retained, report, _ = solve_divided(f_r, lam, lam, tol, order, components)
    return h, retained, report


@dataclass
class NearIdentityTransform:
    """v = Phi(w): composite of the per-order maps v = w + h_r(w)."""

    h_terms: dict[int, list[QPStatePoly]]
    composite: list[QPStatePoly]
    max_order: int

    @property
    def orders(self) -> list[int]:
        return sorted(self.h_terms)

    def is_identity(self) -> bool:
        return all(all(p.is_zero() for p in hs) for hs in self.h_terms.values())

    def __call__(self, t: float, w) -> np.ndarray:
        from .qpalgebra import poly_apply

        return poly_apply(self.composite, t, w)


@dataclass
class JBar:
    """Time-invariant physical block after folding resonant parametric terms."""

    diagonal: np.ndarray
    unperturbed: np.ndarray
    # products c+ c- of the fictitious modal amplitudes, one per excitation frequency label
    fictitious_constants: dict[str, complex] = field(default_factory=dict)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal)

    @property
    def size(self) -> int:
        return len(self.diagonal)

    def corrections(self) -> np.ndarray:
        return self.diagonal - self.unperturbed


def modal_field(aug: AugmentedSystem, spec: Spectrum, max_degree: int) -> list[QPStatePoly]:
    """Vector field J v + M^-1 f(M v) in augmented modal coordinates."""
    N = aug.dimension
    basis = aug.basis
    lin = []
    for l in range(N):
        terms = {}
        for j in range(N):
            if spec.M[l, j] != 0:
                mono = [0] * N
                mono[j] = 1
                terms[(tuple(mono), (0,) * basis.k)] = spec.M[l, j]
        lin.append(QPStatePoly(basis, N, terms, max_degree=max_degree, trunc_order=0))
    fx = [compose(c.truncated(max_degree=max_degree), lin, max_degree=max_degree, trunc_order=0)
          if not c.is_zero() else QPStatePoly.zero(basis, N, max_degree, 0) for c in aug.coupling]
    out = []
    for j in range(N):
        acc = QPStatePoly.variable(basis, N, j, spec.eigenvalues[j], max_degree=max_degree, trunc_order=0)
        for l in range(N):
            if spec.Minv[j, l] != 0 and not fx[l].is_zero():
                acc = acc + fx[l] * spec.Minv[j, l]
        out.append(acc)
    return out


def _near_identity_step(X: list[QPStatePoly], h: list[QPStatePoly], R: int) -> list[QPStatePoly]:
    """Field in w after v = w + h(w): (I + Dh)^-1 X(w + h(w)), truncated at degree R."""
    N = len(X)
    basis = X[0].basis
    subs = [v + hv for v, hv in zip(identity_map(basis, N, R, 0), h)]
    Y = [compose(x, subs, max_degree=R, trunc_order=0) for x in X]
    out = list(Y)
    U = Y
    # Neumann series; each pass raises the lowest degree by at least one
    for _ in range(R):
        U = [-u for u in jacobian_apply(h, U, R, 0)]
        if all(u.is_zero() for u in U):
            break
        out = [o + u for o, u in zip(out, U)]
    return out


def _fold_retained(X, spec: Spectrum, aug: AugmentedSystem, tol: float):
    """Turn retained w+ w- v_j terms into eigenvalue corrections; reject the rest."""
    n = spec.n_physical
    N = len(spec.eigenvalues)
    kb = aug.basis.k
    amps = np.array([c for (_, _, c) in spec.fictitious], complex)
    signs = np.array([s for (_, s, _) in spec.fictitious])
    bidx = np.array([b for (b, _, _) in spec.fictitious], int)
    diag = spec.eigenvalues[:n].astype(complex).copy()
    leftovers = []
    for j in range(n):
        xj = X[j]
        for row, c in zip(xj.keys.tolist(), xj.vals):
            mono = np.array(row[:N])
            deg = int(mono.sum())
            if deg < 2:
                continue
            phys, fict = mono[:n], mono[n:]
            net = np.zeros(kb, int)
            for e, s, b in zip(fict, signs, bidx):
                net[b] += e * s
            if phys.sum() == 1 and not net.any():
                k = int(np.flatnonzero(phys)[0])
                if k != j:
                    leftovers.append((j, tuple(row[:N]), complex(c)))
                    continue
                diag[j] += c * np.prod(amps ** fict)
            elif phys.sum() == 1:
                # frequency-carrying terms cannot stay in a time-invariant block
                leftovers.append((j, tuple(row[:N]), complex(c)))
    return diag, leftovers


def normal_form_iterate(aug: AugmentedSystem, spec: Spectrum, R: int = DEFAULT_ORDER,
                        tol: float | None = None):
    """Normalise orders 2..R; return (transform, JBar, report)."""
    lam = spec.eigenvalues
    tol = default_tolerance(lam) if tol is None else tol
    n = spec.n_physical
    N = len(lam)
    basis = aug.basis
    report = ResonanceReport(tol)
    X = modal_field(aug, spec, R)
    composite = identity_map(basis, N, R, 0)
    h_terms: dict[int, list[QPStatePoly]] = {}
    phys = set(range(n))
    for r in range(2, R + 1):
        f_r = [X[j].homogeneous(r) if j in phys else QPStatePoly.zero(basis, N, R, 0) for j in range(N)]
        if all(f.is_zero() for f in f_r):
            continue
        h, _, rep = homological_solve(spec, f_r, tol, order=r, components=phys)
        report.extend(rep)
        h = [p.truncated(max_degree=R) for p in h]
        if all(p.is_zero() for p in h):
            continue
        h_terms[r] = h
        X = _near_identity_step(X, h, R)
        subs = [v + hv for v, hv in zip(identity_map(basis, N, R, 0), h)]
        composite = [compose(c, subs, max_degree=R, trunc_order=0) for c in composite]
    diag, leftovers = _fold_retained(X, spec, aug, tol)
    if leftovers:
        j, mono, c = leftovers[0]
        raise IrreducibleResonance(
            f"{len(leftovers)} retained linear term(s) cannot be made time-invariant; "
            f"first on component {j} monomial {mono} coefficient {c:.3g}",
            leftovers,
        )
    consts = {}
    for b in sorted({b for (b, _, _) in spec.fictitious}):
        prod = np.prod([c for (bb, _, c) in spec.fictitious if bb == b])
        consts[basis.labels[b]] = complex(prod)
    jbar = JBar(_symmetrize_pairs(diag, spec.conj_partner[:n]), spec.eigenvalues[:n].copy(), consts)
    return NearIdentityTransform(h_terms, composite, R), jbar, report


def _symmetrize_pairs(diag: np.ndarray, partner: np.ndarray) -> np.ndarray:
    out = diag.copy()
    for i, j in enumerate(partner):
        if j > i:
            avg = 0.5 * (diag[i] + np.conj(diag[j]))
            out[i], out[j] = avg, np.conj(avg)
        elif j == i:
            out[i] = complex(diag[i].real, 0.0) if abs(diag[i].imag) < 1e-12 else diag[i]
    return out


def residual_check(f: list[QPStatePoly], h: list[QPStatePoly], eigenvalues) -> float:
    """max |d h - f| / max(|f|) over the solved terms (back-substitution check)."""
    worst = 0.0
    lam = np.asarray(eigenvalues, complex)
    for j, (fj, hj) in enumerate(zip(f, h)):
        if hj.is_zero():
            continue
        ft = fj.terms
        d = 1j * (hj.freq_idx @ hj.basis.omega_array) + hj.exps @ lam - lam[j]
        n = hj.state_dim
        for row, hv, dv in zip(hj.keys.tolist(), hj.vals, d):
            fv = ft[(tuple(row[:n]), tuple(row[n:]))]
            worst = max(worst, abs(dv * hv - fv) / max(abs(fv), 1e-300))
    return worst


__all__ = [
    "JBar", "NearIdentityTransform", "ResonanceEntry", "ResonanceReport", "classify",
    "homological_solve", "modal_field", "normal_form_iterate", "poly_mul", "residual_check",
    "solve_divided",
]
