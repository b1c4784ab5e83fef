"""Autonomous augmentation of linear quasi-periodic systems and modal diagonalisation.

Each excitation frequency w_i gets a pair of fictitious states with
p' = w q, q' = -w p, so that p(t) = sin(w t), q(t) = cos(w t) from (p, q)(0) = (0, 1).
A parametric entry a*cos(w_i t)*x_j then becomes the quadratic monomial a*q_i*x_j.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimError, NotSemiSimpleError
from .qpalgebra import FrequencyBasis, QPSeries, QPStatePoly

DEFECT_COND = 1e8


@dataclass(frozen=True)
class ParametricTerm:
    row: int
    col: int
    amplitude: float
    freq_index: int
    kind: str = "cos"

    def __post_init__(self):
        if self.kind not in ("cos", "sin"):
            raise ValueError(f"parametric term kind must be 'cos' or 'sin', got {self.kind!r}")


@dataclass(frozen=True)
class QPLinearSystem:
    """x' = (B0 + B(t)) x with B(t) a sum of single-entry sin/cos terms."""

    B0: np.ndarray
    parametric_terms: tuple[ParametricTerm, ...]
    basis: FrequencyBasis

    def __post_init__(self):
        B0 = np.array(self.B0, dtype=float)
        if B0.ndim != 2 or B0.shape[0] != B0.shape[1]:
            raise DimError("B0 must be square")
        object.__setattr__(self, "B0", B0)
        object.__setattr__(self, "parametric_terms", tuple(self.parametric_terms))
        n = B0.shape[0]
        for t in self.parametric_terms:
            if not (0 <= t.row < n and 0 <= t.col < n):
                raise DimError(f"parametric term targets entry ({t.row}, {t.col}) outside {n}x{n}")
            if not 0 <= t.freq_index < self.basis.k:
                raise DimError(f"parametric term references frequency #{t.freq_index}")

    @property
    def dimension(self) -> int:
        return self.B0.shape[0]

    def A(self, t: float) -> np.ndarray:
        A = self.B0.copy()
        w = self.basis.omegas
        for term in self.parametric_terms:
            trig = np.cos if term.kind == "cos" else np.sin
            A[term.row, term.col] += term.amplitude * trig(w[term.freq_index] * t)
        return A

    def A_entries(self, trunc_order: int = 5) -> list[list[QPSeries]]:
        """A(t) as an n x n table of QPSeries."""
        n = self.dimension
        out = [[QPSeries.constant(self.basis, self.B0[i, j], trunc_order, True) for j in range(n)]
               for i in range(n)]
        for term in self.parametric_terms:
            make = QPSeries.cos if term.kind == "cos" else QPSeries.sin
            out[term.row][term.col] = out[term.row][term.col] + make(
                self.basis, term.freq_index, term.amplitude, trunc_order=trunc_order)
        return out

    def used_frequencies(self) -> list[int]:
        return sorted({t.freq_index for t in self.parametric_terms})


@dataclass(frozen=True)
class FictitiousPair:
    p_index: int
    q_index: int
    omega: float
    basis_index: int


@dataclass(frozen=True)
class AugmentedSystem:
    Bbar0: np.ndarray
    coupling: list[QPStatePoly]
    fictitious_pairs: tuple[FictitiousPair, ...]
    n_physical: int
    basis: FrequencyBasis

    @property
    def dimension(self) -> int:
        return self.Bbar0.shape[0]

    @property
    def fictitious_init(self) -> np.ndarray:
        """(p_i(0), q_i(0)) = (0, 1) laid out in augmented-state order."""
        out = np.zeros(self.dimension - self.n_physical)
        for fp in self.fictitious_pairs:
            out[fp.q_index - self.n_physical] = 1.0
        return out

    def initial_state(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        if x0.size != self.n_physical:
            raise DimError(f"expected {self.n_physical} physical initial values")
        return np.concatenate([x0, self.fictitious_init])

    def rhs(self, t: float, xbar: np.ndarray) -> np.ndarray:
        # the coupling is bilinear in (fictitious, physical) so evaluate it directly
        out = self.Bbar0 @ xbar
        for j, poly in enumerate(self.coupling):
            if not poly.is_zero():
                out[j] += np.real(np.sum(poly.vals * np.prod(xbar[None, :] ** poly.exps, axis=1)))
        return out


def augment(sys: QPLinearSystem, max_degree: int = 5) -> AugmentedSystem:
    n = sys.dimension
    used = sys.used_frequencies()
    k = len(used)
    N = n + 2 * k
    Bbar0 = np.zeros((N, N))
    Bbar0[:n, :n] = sys.B0
    pairs = []
    for a, bi in enumerate(used):
        pi, qi = n + a, n + k + a
        w = sys.basis.omegas[bi]
        Bbar0[pi, qi] = w
        Bbar0[qi, pi] = -w
        pairs.append(FictitiousPair(pi, qi, w, bi))
    slot = {fp.basis_index: fp for fp in pairs}
    terms: list[dict] = [dict() for _ in range(N)]
    zero_p = (0,) * sys.basis.k
    for term in sys.parametric_terms:
        fp = slot[term.freq_index]
        mono = [0] * N
        mono[term.col] += 1
        mono[fp.q_index if term.kind == "cos" else fp.p_index] += 1
        key = (tuple(mono), zero_p)
        terms[term.row][key] = terms[term.row].get(key, 0.0) + term.amplitude
    coupling = [QPStatePoly(sys.basis, N, t, max_degree=max_degree, trunc_order=0, real_flag=True)
                for t in terms]
    return AugmentedSystem(Bbar0, coupling, tuple(pairs), n, sys.basis)


@dataclass
class Spectrum:
    """Modal data of the augmented constant matrix (physical modes first)."""

    M: np.ndarray
    Minv: np.ndarray
    eigenvalues: np.ndarray
    n_physical: int
    conj_partner: np.ndarray
    # per fictitious modal coordinate: (basis index, sign, amplitude from (p, q)(0) = (0, 1))
    fictitious: list[tuple[int, int, complex]] = field(default_factory=list)

    @property
    def J(self) -> np.ndarray:
        return np.diag(self.eigenvalues)

    @property
    def physical(self) -> np.ndarray:
        return self.eigenvalues[: self.n_physical]

    def reconstruction_error(self, Bbar0) -> float:
        R = self.M @ self.J @ self.Minv - Bbar0
        return float(np.abs(R).sum(axis=1).max())


def _sort_key(lam: complex, tol: float):
    im = lam.imag if abs(lam.imag) > tol else 0.0
    return (round(abs(im), 10), round(im, 10), round(lam.real, 10))


def _eig_block(B: np.ndarray):
    """Eigen-decompose with the ordering/pairing convention; returns (lam, V, partner)."""
    n = B.shape[0]
    if n == 0:
        return np.zeros(0, complex), np.zeros((0, 0), complex), np.zeros(0, int)
    lam, V = np.linalg.eig(B)
    scale = max(1.0, float(np.abs(lam).max()))
    tol = 1e-9 * scale
    order = sorted(range(n), key=lambda i: _sort_key(lam[i], tol))
    lam, V = lam[order].astype(complex), V[:, order].astype(complex)
    if np.linalg.cond(V) > DEFECT_COND:
        raise NotSemiSimpleError(
            f"eigenvector matrix condition number {np.linalg.cond(V):.3g} exceeds {DEFECT_COND:g}"
        )
    partner = np.arange(n)
    real_input = np.isrealobj(B)
    i = 0
    while i < n:
        if real_input and abs(lam[i].imag) > tol:
            # conjugate partner sits next with +imag; impose exact symmetry
            j = i + 1
            if j >= n or abs(lam[j] - np.conj(lam[i])) > 1e-7 * scale:
                raise NotSemiSimpleError("complex eigenvalue without adjacent conjugate partner")
            lam[j] = np.conj(lam[i])
            V[:, j] = np.conj(V[:, i])
            partner[i], partner[j] = j, i
            i += 2
        else:
            if real_input:
                lam[i] = lam[i].real
                v = V[:, i]
                k = int(np.argmax(np.abs(v)))
                v = v * (abs(v[k]) / v[k])
                V[:, i] = v.real / np.linalg.norm(v.real)
            i += 1
    return lam, V, partner


def modal(Bbar0: np.ndarray, n_physical: int | None = None,
          fictitious_pairs=()) -> Spectrum:
    """Diagonalise Bbar0 = M J M^-1 (semi-simple case only)."""
    B = np.asarray(Bbar0)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise DimError("matrix must be square")
    N = B.shape[0]
    n = N if n_physical is None else n_physical
    if n < N and (np.abs(B[:n, n:]).max() > 0 or np.abs(B[n:, :n]).max() > 0):
        raise DimError("fictitious block must not couple linearly to the physical states")
    lam_p, V_p, partner_p = _eig_block(B[:n, :n])
    M = np.zeros((N, N), complex)
    M[:n, :n] = V_p
    lam = list(lam_p)
    partner = list(partner_p)
    fict = []
    col = n
    for fp in fictitious_pairs:
        w = fp.omega
        # eigenvector scaling (p, q) = (-+i, 1)/w puts amplitude w/2 on each modal coordinate
        for sign in (-1, 1):
            M[fp.p_index, col] = -sign * 1j / w
            M[fp.q_index, col] = 1.0 / w
            lam.append(sign * 1j * w)
            fict.append((fp.basis_index, sign, complex(w / 2)))
            col += 1
        partner += [col - 1, col - 2]
    if col != N:
        raise DimError("fictitious pairs do not fill the augmented state")
    Minv = np.linalg.inv(M)
    spec = Spectrum(M, Minv, np.array(lam, dtype=complex), n, np.array(partner), fict)
    err = spec.reconstruction_error(B)
    bound = 1e-10 * max(1.0, float(np.abs(B).sum(axis=1).max()))
    if err > bound:
        raise NotSemiSimpleError(f"modal reconstruction error {err:.3g} exceeds {bound:.3g}")
    return spec
