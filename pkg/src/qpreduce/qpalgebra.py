"""Truncated quasi-periodic Fourier series and state polynomials with QP coefficients.

Both containers are sparse term tables held in numpy arrays: a QPSeries stores
rows of frequency multi-indices p and complex coefficients c_p, representing

    s(t) = sum_p c_p exp(i (p . omega) t),

and a QPStatePoly stores rows (m | p) for terms c_{m,p} exp(i (p . omega) t) z^m.
Values are immutable after construction; every operation returns a new object
in canonical form (duplicates merged, |c| < PURGE_TOL dropped).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import BasisError, DimError

PURGE_TOL = 1e-14
DEFAULT_TRUNC = 5
DEFAULT_DEGREE = 5
_MAX_PAIRS = 4_000_000


@dataclass(frozen=True)
class FrequencyBasis:
    """Ordered base angular frequencies (rad/s) with one label per frequency.

    ``checked`` lists the positions that must be pairwise incommensurate; by
    default all of them.  Extensions built with :meth:`extend` leave the new
    frequencies unchecked (forcing frequencies may be rationally related to
    the parametric ones without breaking the algebra).
    """

    omegas: tuple[float, ...]
    labels: tuple[str, ...]
    incommensurability_tol: float = 1e-6
    checked: tuple[int, ...] | None = field(default=None)

    def __post_init__(self):
        omegas = tuple(float(w) for w in self.omegas)
        labels = tuple(str(s) for s in self.labels)
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "labels", labels)
        if self.checked is None:
            object.__setattr__(self, "checked", tuple(range(len(omegas))))
        if len(omegas) != len(labels):
            raise BasisError("one label is required per frequency")
        if len(set(labels)) != len(labels):
            dup = sorted({s for s in labels if labels.count(s) > 1})
            raise BasisError(f"duplicate frequency label(s): {', '.join(dup)}")
        for lab, w in zip(labels, omegas):
            if not (w > 0 and math.isfinite(w)):
                raise BasisError(f"frequency {lab!r} must be strictly positive, got {w}")
        chk = self.checked
        for i, j in itertools.combinations(chk, 2):
            pair = commensurate_pair(omegas[i], omegas[j], self.incommensurability_tol)
            if pair is not None:
                a, b = pair
                raise BasisError(
                    f"frequencies {labels[i]!r} and {labels[j]!r} are commensurate "
                    f"({a}*{omegas[i]:.6g} ~ {b}*{omegas[j]:.6g})"
                )

    @property
    def k(self) -> int:
        return len(self.omegas)

    @property
    def omega_array(self) -> np.ndarray:
        return np.asarray(self.omegas, dtype=float)

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise BasisError(f"unknown frequency label {label!r}") from None

    def extend(self, labels: Sequence[str], omegas: Sequence[float]) -> "FrequencyBasis":
        return FrequencyBasis(
            self.omegas + tuple(omegas),
            self.labels + tuple(labels),
            self.incommensurability_tol,
            self.checked,
        )

    def is_prefix_of(self, other: "FrequencyBasis") -> bool:
        k = self.k
        return other.omegas[:k] == self.omegas and other.labels[:k] == self.labels

    def frequency(self, p) -> float:
        return float(np.dot(np.asarray(p, dtype=float), self.omega_array))


def commensurate_pair(wi: float, wj: float, tol: float, bound: int = 20):
    """Return integers (a, b), 1 <= |a|,|b| <= bound, with |a wi - b wj| < tol*max, else None."""
    scale = tol * max(wi, wj)
    for b in range(1, bound + 1):
        a = round(b * wj / wi)
        if 1 <= a <= bound and abs(a * wi - b * wj) < scale:
            return a, b
    return None


# --------------------------------------------------------------------------
# sparse term-table kernels


def _unique_rows(keys: np.ndarray):
    """Lexicographically sorted unique rows and the inverse map.

    Rows are packed into one int64 code (mixed radix, first column most
    significant) so a 1-D sort replaces the slow structured-row sort.
    """
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo + 1
    if float(np.prod(span.astype(float))) >= 2.0**62:
        uk, inv = np.unique(keys, axis=0, return_inverse=True)
        return uk, inv.reshape(-1)
    mult = np.ones(keys.shape[1], np.int64)
    for c in range(keys.shape[1] - 2, -1, -1):
        mult[c] = mult[c + 1] * span[c + 1]
    codes = (keys - lo) @ mult
    _, first, inv = np.unique(codes, return_index=True, return_inverse=True)
    return keys[first], inv.reshape(-1)


def _canonical(keys: np.ndarray, vals: np.ndarray, purge: float = PURGE_TOL):
    if vals.size == 0:
        return keys.reshape(0, keys.shape[1]), vals.astype(complex)
    if keys.shape[1] == 0:
        s = np.array([vals.sum()])
        keep = np.abs(s) >= purge
        return np.zeros((int(keep.sum()), 0), np.int64), s[keep]
    uk, inv = _unique_rows(keys)
    n = len(uk)
    out = np.bincount(inv, weights=vals.real, minlength=n) + 1j * np.bincount(
        inv, weights=vals.imag, minlength=n
    )
    keep = np.abs(out) >= purge
    return uk[keep], out[keep]


def _symmetrize(keys: np.ndarray, vals: np.ndarray, fstart: int):
    """Impose c(m, -p) = conj(c(m, p)) exactly by averaging each partner pair."""
    if vals.size == 0:
        return keys, vals
    neg = keys.copy()
    neg[:, fstart:] *= -1
    k2 = np.vstack([keys, neg])
    v2 = np.concatenate([vals, np.conj(vals)])
    uk, v = _canonical(k2, v2, purge=0.0)
    v = v / 2
    keep = np.abs(v) >= PURGE_TOL
    return uk[keep], v[keep]


def _outer(ka, va, kb, vb, keep_fn):
    """All pairwise sums of keys / products of values, filtered, canonicalised."""
    if va.size == 0 or vb.size == 0:
        return np.zeros((0, ka.shape[1]), dtype=np.int64), np.zeros(0, complex)
    out_k, out_v = [], []
    step = max(1, _MAX_PAIRS // max(1, len(vb)))
    for s in range(0, len(va), step):
        chunk = ka[s : s + step]
        k = (chunk[:, None, :] + kb[None, :, :]).reshape(len(chunk) * len(kb), ka.shape[1])
        v = (va[s : s + step, None] * vb[None, :]).reshape(-1)
        m = keep_fn(k)
        k, v = _canonical(k[m], v[m], purge=0.0)
        out_k.append(k)
        out_v.append(v)
    return _canonical(np.vstack(out_k), np.concatenate(out_v))


def _asymmetry(keys, vals, fstart) -> float:
    if vals.size == 0:
        return 0.0
    neg = keys.copy()
    neg[:, fstart:] *= -1
    lookup = {tuple(r): v for r, v in zip(keys.tolist(), vals)}
    worst = 0.0
    for r, v in zip(neg.tolist(), vals):
        worst = max(worst, abs(lookup.get(tuple(r), 0.0) - np.conj(v)))
    return worst


# --------------------------------------------------------------------------
# QPSeries


class QPSeries:
    """Scalar quasi-periodic function as a truncated multi-frequency Fourier map."""

    __slots__ = ("basis", "idx", "val", "trunc_order", "real_flag")

    def __init__(
        self,
        basis: FrequencyBasis,
        coeffs: Mapping[tuple, complex] | None = None,
        trunc_order: int = DEFAULT_TRUNC,
        real_flag: bool = False,
    ):
        k = basis.k
        items = list((coeffs or {}).items())
        idx = np.array([tuple(p) for p, _ in items], dtype=np.int64).reshape(len(items), k)
        val = np.array([c for _, c in items], dtype=complex)
        if idx.shape[0] and idx.shape[1] != k:
            raise BasisError(f"multi-index length must be {k}")
        self._init(basis, idx, val, trunc_order, real_flag, check_real=True)

    def _init(self, basis, idx, val, trunc_order, real_flag, check_real=False):
        if idx.shape[0]:
            keep = np.abs(idx).max(axis=1, initial=0) <= trunc_order
            idx, val = idx[keep], val[keep]
        idx, val = _canonical(idx, val)
        if real_flag:
            if check_real:
                scale = max(1.0, float(np.abs(val).max(initial=0.0)))
                if _asymmetry(idx, val, 0) > 1e-10 * scale:
                    raise ValueError("real_flag series requires c(-p) = conj(c(p))")
            idx, val = _symmetrize(idx, val, 0)
        self.basis = basis
        self.idx = idx
        self.val = val
        self.trunc_order = int(trunc_order)
        self.real_flag = bool(real_flag)
        self.idx.setflags(write=False)
        self.val.setflags(write=False)

    @classmethod
    def _raw(cls, basis, idx, val, trunc_order, real_flag):
        obj = cls.__new__(cls)
        val = np.asarray(val, dtype=complex).reshape(-1)
        obj._init(basis, np.asarray(idx, dtype=np.int64).reshape(val.size, basis.k), val,
                  trunc_order, real_flag)
        return obj

    # constructors -----------------------------------------------------------
    @classmethod
    def constant(cls, basis, c, trunc_order=DEFAULT_TRUNC, real_flag=None):
        c = complex(c)
        if real_flag is None:
            real_flag = c.imag == 0
        return cls._raw(basis, np.zeros((1, basis.k), np.int64), [c], trunc_order, real_flag)

    @classmethod
    def zero(cls, basis, trunc_order=DEFAULT_TRUNC, real_flag=True):
        return cls._raw(basis, np.zeros((0, basis.k), np.int64), [], trunc_order, real_flag)

    @classmethod
    def cos(cls, basis, i: int, amplitude: float = 1.0, harmonic: int = 1, trunc_order=DEFAULT_TRUNC):
        e = np.zeros(basis.k, np.int64)
        e[i] = harmonic
        return cls._raw(basis, np.vstack([e, -e]), [amplitude / 2, amplitude / 2], trunc_order, True)

    @classmethod
    def sin(cls, basis, i: int, amplitude: float = 1.0, harmonic: int = 1, trunc_order=DEFAULT_TRUNC):
        e = np.zeros(basis.k, np.int64)
        e[i] = harmonic
        a = amplitude / 2j
        return cls._raw(basis, np.vstack([e, -e]), [a, -a], trunc_order, True)

    @classmethod
    def exp(cls, basis, p, c: complex = 1.0, trunc_order=DEFAULT_TRUNC):
        return cls._raw(basis, np.asarray(p, np.int64).reshape(1, -1), [c], trunc_order, False)

    # views ------------------------------------------------------------------
    @property
    def coeffs(self) -> dict[tuple, complex]:
        return {tuple(p): complex(c) for p, c in zip(self.idx.tolist(), self.val)}

    def __len__(self):
        return len(self.val)

    def is_zero(self) -> bool:
        return self.val.size == 0

    def max_abs(self) -> float:
        return float(np.abs(self.val).max(initial=0.0))

    def frequencies(self) -> np.ndarray:
        return self.idx @ self.basis.omega_array

    def __call__(self, t):
        return self.evaluate(t)

    def evaluate(self, t):
        t_arr = np.asarray(t, dtype=float)
        f = self.frequencies()
        ph = np.exp(1j * np.multiply.outer(t_arr, f))
        return ph @ self.val

    def __repr__(self):
        return f"QPSeries({len(self)} terms, P={self.trunc_order}, real={self.real_flag})"

    # arithmetic ---------------------------------------------------------------
    def _check(self, other: "QPSeries"):
        if other.basis != self.basis:
            raise BasisError("series live on different frequency bases")

    def __add__(self, other):
        if not isinstance(other, QPSeries):
            other = QPSeries.constant(self.basis, other, self.trunc_order)
        self._check(other)
        return QPSeries._raw(
            self.basis,
            np.vstack([self.idx, other.idx]),
            np.concatenate([self.val, other.val]),
            max(self.trunc_order, other.trunc_order),
            self.real_flag and other.real_flag,
        )

    __radd__ = __add__

    def __neg__(self):
        return QPSeries._raw(self.basis, self.idx, -self.val, self.trunc_order, self.real_flag)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, QPSeries):
            return series_mul(self, other)
        c = complex(other)
        return QPSeries._raw(self.basis, self.idx, self.val * c, self.trunc_order,
                             self.real_flag and c.imag == 0)

    __rmul__ = __mul__

    def conj(self) -> "QPSeries":
        """Complex conjugate of the represented signal."""
        return QPSeries._raw(self.basis, -self.idx, np.conj(self.val), self.trunc_order, self.real_flag)

    def truncate(self, trunc_order: int) -> "QPSeries":
        return QPSeries._raw(self.basis, self.idx, self.val, trunc_order, self.real_flag)

    def embed(self, basis: FrequencyBasis) -> "QPSeries":
        if basis == self.basis:
            return self
        if not self.basis.is_prefix_of(basis):
            raise BasisError("target basis does not extend the series basis")
        pad = np.zeros((len(self.val), basis.k - self.basis.k), np.int64)
        return QPSeries._raw(basis, np.hstack([self.idx, pad]), self.val, self.trunc_order, self.real_flag)

    def as_real(self) -> "QPSeries":
        """Project onto the real-valued signals (symmetrise)."""
        return QPSeries._raw(self.basis, self.idx, self.val, self.trunc_order, True)


def series_mul(a: QPSeries, b: QPSeries, trunc_order: int | None = None) -> QPSeries:
    """Exact Cauchy product of two series, truncated to ``trunc_order``."""
    a._check(b)
    P = max(a.trunc_order, b.trunc_order) if trunc_order is None else trunc_order
    k, v = _outer(a.idx, a.val, b.idx, b.val, lambda kk: np.abs(kk).max(axis=1, initial=0) <= P)
    return QPSeries._raw(a.basis, k, v, P, a.real_flag and b.real_flag)


def series_ddt(a: QPSeries) -> QPSeries:
    """Time derivative: c_p -> i (p . omega) c_p."""
    return QPSeries._raw(a.basis, a.idx, 1j * a.frequencies() * a.val, a.trunc_order, a.real_flag)


def index_box(bounds: Sequence[int]) -> np.ndarray:
    """All integer multi-indices with |p_d| <= bounds[d]."""
    axes = [np.arange(-b, b + 1) for b in bounds]
    if not axes:
        return np.zeros((1, 0), np.int64)
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(bounds)).astype(np.int64)


def fit_series(
    basis: FrequencyBasis,
    times: np.ndarray,
    samples: np.ndarray,
    bounds: Sequence[int],
    trunc_order: int | None = None,
    real_flag: bool = True,
    rcond: float | None = None,
):
    """Least-squares Fourier fit of sampled signals on the index box ``bounds``.

    ``samples`` is (T,) or (T, m); returns one QPSeries per column plus the RMS
    residual of each fit on the sample grid.
    """
    times = np.asarray(times, dtype=float)
    Y = np.asarray(samples)
    single = Y.ndim == 1
    if single:
        Y = Y[:, None]
    idx = index_box(bounds)
    A = np.exp(1j * np.outer(times, idx @ basis.omega_array))
    coef, *_ = np.linalg.lstsq(A, Y.astype(complex), rcond=rcond)
    resid = np.sqrt(np.mean(np.abs(A @ coef - Y) ** 2, axis=0))
    P = max(bounds) if trunc_order is None else trunc_order
    out = [QPSeries._raw(basis, idx, coef[:, j], P, real_flag) for j in range(Y.shape[1])]
    if single:
        return out[0], float(resid[0])
    return out, resid


# --------------------------------------------------------------------------
# state monomials and polynomials


@dataclass(frozen=True)
class StateMonomial:
    exponents: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "exponents", tuple(int(e) for e in self.exponents))
        if any(e < 0 for e in self.exponents):
            raise ValueError("monomial exponents must be non-negative")

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    def __str__(self):
        parts = [f"z{i + 1}" + (f"^{e}" if e > 1 else "") for i, e in enumerate(self.exponents) if e]
        return "*".join(parts) or "1"


class QPStatePoly:
    """Polynomial in ``state_dim`` variables whose coefficients are QP series.

    ``keys`` rows are (exponents | frequency index); ``vals`` the coefficients.
    """

    __slots__ = ("basis", "state_dim", "keys", "vals", "max_degree", "trunc_order", "real_flag")

    def __init__(
        self,
        basis: FrequencyBasis,
        state_dim: int,
        terms: Mapping[tuple, complex] | None = None,
        max_degree: int = DEFAULT_DEGREE,
        trunc_order: int = DEFAULT_TRUNC,
        real_flag: bool = False,
    ):
        rows, vals = [], []
        for (mono, p), c in (terms or {}).items():
            mono = mono.exponents if isinstance(mono, StateMonomial) else tuple(mono)
            if len(mono) != state_dim:
                raise DimError(f"monomial {mono} does not match state_dim={state_dim}")
            if len(p) != basis.k:
                raise BasisError(f"frequency index {p} does not match basis size {basis.k}")
            rows.append(tuple(mono) + tuple(p))
            vals.append(c)
        keys = np.array(rows, dtype=np.int64).reshape(len(rows), state_dim + basis.k)
        self._init(basis, state_dim, keys, np.array(vals, dtype=complex), max_degree,
                   trunc_order, real_flag, check_real=True)

    def _init(self, basis, n, keys, vals, max_degree, trunc_order, real_flag, check_real=False):
        if keys.shape[0]:
            if (keys[:, :n] < 0).any():
                raise ValueError("negative exponent")
            keep = keys[:, :n].sum(axis=1) <= max_degree
            if basis.k:
                keep &= np.abs(keys[:, n:]).max(axis=1) <= trunc_order
            keys, vals = keys[keep], vals[keep]
        keys, vals = _canonical(keys, vals)
        if real_flag:
            if check_real:
                scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
                if _asymmetry(keys, vals, n) > 1e-10 * scale:
                    raise ValueError("real_flag polynomial requires conjugate-symmetric coefficients")
            keys, vals = _symmetrize(keys, vals, n)
        self.basis = basis
        self.state_dim = int(n)
        self.keys = keys
        self.vals = vals
        self.max_degree = int(max_degree)
        self.trunc_order = int(trunc_order)
        self.real_flag = bool(real_flag)
        self.keys.setflags(write=False)
        self.vals.setflags(write=False)

    @classmethod
    def _raw(cls, basis, n, keys, vals, max_degree, trunc_order, real_flag):
        obj = cls.__new__(cls)
        vals = np.asarray(vals, complex).reshape(-1)
        obj._init(basis, n, np.asarray(keys, np.int64).reshape(vals.size, n + basis.k),
                  vals, max_degree, trunc_order, real_flag)
        return obj

    def _like(self, keys, vals, real_flag=None, n=None, **kw):
        return QPStatePoly._raw(
            kw.get("basis", self.basis),
            self.state_dim if n is None else n,
            keys,
            vals,
            kw.get("max_degree", self.max_degree),
            kw.get("trunc_order", self.trunc_order),
            self.real_flag if real_flag is None else real_flag,
        )

    # constructors -------------------------------------------------------------
    @classmethod
    def zero(cls, basis, state_dim, max_degree=DEFAULT_DEGREE, trunc_order=DEFAULT_TRUNC, real_flag=False):
        return cls._raw(basis, state_dim, np.zeros((0, state_dim + basis.k)), [], max_degree,
                        trunc_order, real_flag)

    @classmethod
    def variable(cls, basis, state_dim, l, c=1.0, max_degree=DEFAULT_DEGREE, trunc_order=DEFAULT_TRUNC,
                 real_flag=False):
        row = np.zeros(state_dim + basis.k, np.int64)
        row[l] = 1
        return cls._raw(basis, state_dim, row[None], [c], max_degree, trunc_order, real_flag)

    @classmethod
    def monomial(cls, basis, exponents, c=1.0, p=None, max_degree=DEFAULT_DEGREE,
                 trunc_order=DEFAULT_TRUNC, real_flag=False):
        exponents = tuple(exponents)
        p = tuple(p) if p is not None else (0,) * basis.k
        return cls(basis, len(exponents), {(exponents, p): c}, max_degree, trunc_order, real_flag)

    @classmethod
    def from_series(cls, s: QPSeries, state_dim, exponents=None, max_degree=DEFAULT_DEGREE):
        """The term s(t) * z^exponents (a constant-in-state term by default)."""
        mono = np.zeros(state_dim, np.int64) if exponents is None else np.asarray(exponents, np.int64)
        keys = np.hstack([np.tile(mono, (len(s.val), 1)), s.idx])
        return cls._raw(s.basis, state_dim, keys, s.val, max_degree, s.trunc_order, s.real_flag)

    # views ----------------------------------------------------------------------
    @property
    def exps(self) -> np.ndarray:
        return self.keys[:, : self.state_dim]

    @property
    def freq_idx(self) -> np.ndarray:
        return self.keys[:, self.state_dim :]

    @property
    def terms(self) -> dict:
        n = self.state_dim
        return {
            (tuple(r[:n]), tuple(r[n:])): complex(c) for r, c in zip(self.keys.tolist(), self.vals)
        }

    def __len__(self):
        return len(self.vals)

    def is_zero(self) -> bool:
        return self.vals.size == 0

    def degrees(self) -> np.ndarray:
        return self.exps.sum(axis=1)

    def monomials(self) -> list[tuple[int, ...]]:
        if self.is_zero():
            return []
        return [tuple(r) for r in np.unique(self.exps, axis=0).tolist()]

    def coefficient(self, mono) -> QPSeries:
        mono = np.asarray(mono, np.int64)
        m = (self.exps == mono).all(axis=1)
        return QPSeries._raw(self.basis, self.freq_idx[m], self.vals[m], self.trunc_order, self.real_flag)

    def max_abs(self) -> float:
        return float(np.abs(self.vals).max(initial=0.0))

    def __repr__(self):
        return (f"QPStatePoly(n={self.state_dim}, {len(self)} terms, deg<={self.max_degree}, "
                f"P={self.trunc_order})")

    # filters --------------------------------------------------------------------
    def select(self, mask: np.ndarray) -> "QPStatePoly":
        return self._like(self.keys[mask], self.vals[mask])

    def homogeneous(self, degree: int) -> "QPStatePoly":
        return self.select(self.degrees() == degree)

    def truncated(self, max_degree=None, trunc_order=None) -> "QPStatePoly":
        return self._like(
            self.keys, self.vals,
            max_degree=self.max_degree if max_degree is None else max_degree,
            trunc_order=self.trunc_order if trunc_order is None else trunc_order,
        )

    def embed(self, basis: FrequencyBasis) -> "QPStatePoly":
        if basis == self.basis:
            return self
        if not self.basis.is_prefix_of(basis):
            raise BasisError("target basis does not extend the polynomial basis")
        pad = np.zeros((len(self.vals), basis.k - self.basis.k), np.int64)
        return self._like(np.hstack([self.keys, pad]), self.vals, basis=basis)

    def with_real_flag(self, flag: bool) -> "QPStatePoly":
        return self._like(self.keys, self.vals, real_flag=flag)

    # arithmetic -------------------------------------------------------------------
    def _check(self, other):
        if not isinstance(other, QPStatePoly):
            raise TypeError("expected QPStatePoly")
        if other.basis != self.basis:
            raise BasisError("polynomials live on different frequency bases")
        if other.state_dim != self.state_dim:
            raise DimError(f"state_dim mismatch: {self.state_dim} vs {other.state_dim}")

    def __add__(self, other):
        self._check(other)
        return QPStatePoly._raw(
            self.basis, self.state_dim,
            np.vstack([self.keys, other.keys]), np.concatenate([self.vals, other.vals]),
            max(self.max_degree, other.max_degree), max(self.trunc_order, other.trunc_order),
            self.real_flag and other.real_flag,
        )

    def __neg__(self):
        return self._like(self.keys, -self.vals)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, QPStatePoly):
            return poly_mul(self, other)
        if isinstance(other, QPSeries):
            return poly_mul(self, QPStatePoly.from_series(other, self.state_dim, max_degree=self.max_degree))
        c = complex(other)
        return self._like(self.keys, self.vals * c, real_flag=self.real_flag and c.imag == 0)

    __rmul__ = __mul__

    def diff(self, l: int) -> "QPStatePoly":
        """Partial derivative with respect to state variable ``l``."""
        e = self.keys[:, l]
        m = e > 0
        keys = self.keys[m].copy()
        keys[:, l] -= 1
        return self._like(keys, self.vals[m] * e[m])

    def ddt(self) -> "QPStatePoly":
        f = self.freq_idx @ self.basis.omega_array
        return self._like(self.keys, 1j * f * self.vals)

    def __call__(self, t, z):
        return poly_apply(self, t, z)


def poly_mul(a: QPStatePoly, b: QPStatePoly, max_degree=None, trunc_order=None) -> QPStatePoly:
    a._check(b)
    D = max(a.max_degree, b.max_degree) if max_degree is None else max_degree
    P = max(a.trunc_order, b.trunc_order) if trunc_order is None else trunc_order
    n = a.state_dim

    def keep(k):
        m = k[:, :n].sum(axis=1) <= D
        if k.shape[1] > n:
            m &= np.abs(k[:, n:]).max(axis=1) <= P
        return m

    k, v = _outer(a.keys, a.vals, b.keys, b.vals, keep)
    return QPStatePoly._raw(a.basis, n, k, v, D, P, a.real_flag and b.real_flag)


def poly_apply(poly, t: float, z) -> complex | np.ndarray:
    """Evaluate a polynomial (or a list of them) at time t and state z."""
    if isinstance(poly, (list, tuple)):
        return np.array([poly_apply(p, t, z) for p in poly])
    z = np.asarray(z, dtype=complex).reshape(-1)
    if z.size != poly.state_dim:
        raise DimError(f"state has length {z.size}, polynomial expects {poly.state_dim}")
    if poly.is_zero():
        return 0j
    ph = np.exp(1j * t * (poly.freq_idx @ poly.basis.omega_array))
    mono = np.prod(z[None, :] ** poly.exps, axis=1)
    return complex(np.sum(poly.vals * ph * mono))


def compose(poly: QPStatePoly, subs: Sequence[QPStatePoly], max_degree=None, trunc_order=None,
            keep=None) -> QPStatePoly:
    """Substitute variable l -> subs[l] (polynomials in a common new variable set).

    ``keep`` optionally filters intermediate products (a boolean function of the
    key array), which lets callers discard graded terms they never need.
    """
    if len(subs) != poly.state_dim:
        raise DimError(f"need {poly.state_dim} substitutions, got {len(subs)}")
    if not subs:
        raise DimError("cannot compose a polynomial in zero variables")
    basis = subs[0].basis
    m = subs[0].state_dim
    for s in subs:
        if s.basis != basis or s.state_dim != m:
            raise DimError("substitutions must share basis and state dimension")
    src = poly.embed(basis) if poly.basis != basis else poly
    D = max(poly.max_degree, *(s.max_degree for s in subs)) if max_degree is None else max_degree
    P = max(poly.trunc_order, *(s.trunc_order for s in subs)) if trunc_order is None else trunc_order
    if src.is_zero():
        return QPStatePoly.zero(basis, m, D, P)
    real = poly.real_flag and all(s.real_flag for s in subs)
    one = QPStatePoly._raw(basis, m, np.zeros((1, m + basis.k), np.int64), [1.0], D, P, True)
    powers: dict[tuple[int, int], QPStatePoly] = {}

    def mul(x, y):
        out = poly_mul(x, y, D, P)
        if keep is not None and not out.is_zero():
            out = out.select(keep(out.keys))
        return out

    def power(l, e):
        if e == 0:
            return one
        key = (l, e)
        if key not in powers:
            powers[key] = subs[l] if e == 1 else mul(power(l, e - 1), subs[l])
        return powers[key]

    out_k, out_v = [], []
    for mono in np.unique(src.exps, axis=0):
        sel = (src.exps == mono).all(axis=1)
        coef = QPStatePoly._raw(basis, m, np.hstack([np.zeros((sel.sum(), m), np.int64), src.freq_idx[sel]]),
                                src.vals[sel], D, P, False)
        acc = coef
        for l in np.flatnonzero(mono):
            acc = mul(acc, power(int(l), int(mono[l])))
            if acc.is_zero():
                break
        out_k.append(acc.keys)
        out_v.append(acc.vals)
    return QPStatePoly._raw(basis, m, np.vstack(out_k), np.concatenate(out_v), D, P, real)


def poly_substitute(poly: QPStatePoly, slave_map: Sequence[QPStatePoly], master_dim: int,
                    max_degree=None, trunc_order=None) -> QPStatePoly:
    """Replace slave variables (indices >= master_dim) by polynomials in the masters."""
    n_slave = poly.state_dim - master_dim
    if n_slave < 0 or len(slave_map) != n_slave:
        raise DimError(f"expected {max(n_slave, 0)} slave maps, got {len(slave_map)}")
    for s in slave_map:
        if s.state_dim != master_dim:
            raise DimError("slave maps must be polynomials in the master variables")
    basis = slave_map[0].basis if slave_map else poly.basis
    D = poly.max_degree if max_degree is None else max_degree
    P = poly.trunc_order if trunc_order is None else trunc_order
    masters = [QPStatePoly.variable(basis, master_dim, l, max_degree=D, trunc_order=P, real_flag=True)
               for l in range(master_dim)]
    return compose(poly, masters + list(slave_map), max_degree=D, trunc_order=P)


def vector_compose(polys: Sequence[QPStatePoly], subs, **kw) -> list[QPStatePoly]:
    return [compose(p, subs, **kw) for p in polys]


def jacobian_apply(h: Sequence[QPStatePoly], u: Sequence[QPStatePoly], max_degree=None,
                   trunc_order=None) -> list[QPStatePoly]:
    """(Dh . u)_j = sum_l dh_j/dz_l * u_l."""
    out = []
    for hj in h:
        acc = None
        for l, ul in enumerate(u):
            if ul.is_zero():
                continue
            d = hj.diff(l)
            if d.is_zero():
                continue
            term = poly_mul(d, ul, max_degree, trunc_order)
            acc = term if acc is None else acc + term
        if acc is None:
            acc = QPStatePoly.zero(hj.basis, hj.state_dim, hj.max_degree, hj.trunc_order)
        out.append(acc)
    return out


def identity_map(basis, n, max_degree=DEFAULT_DEGREE, trunc_order=DEFAULT_TRUNC, real_flag=False):
    return [QPStatePoly.variable(basis, n, l, max_degree=max_degree, trunc_order=trunc_order,
                                 real_flag=real_flag) for l in range(n)]


class PolyEvaluator:
    """Fast repeated evaluation of a vector of QPStatePolys (used in ODE right-hand sides)."""

    def __init__(self, polys: Sequence[QPStatePoly], prune: float = 0.0):
        self.size = len(polys)
        self.state_dim = polys[0].state_dim if polys else 0
        comps, exps, freqs, vals = [], [], [], []
        for j, p in enumerate(polys):
            if p.is_zero():
                continue
            m = np.abs(p.vals) > prune
            comps.append(np.full(m.sum(), j))
            exps.append(p.exps[m])
            freqs.append(p.freq_idx[m] @ p.basis.omega_array)
            vals.append(p.vals[m])
        if comps:
            self.comp = np.concatenate(comps)
            self.exps = np.vstack(exps)
            f = np.concatenate(freqs)
            self.vals = np.concatenate(vals)
        else:
            self.comp = np.zeros(0, int)
            self.exps = np.zeros((0, self.state_dim), int)
            f = np.zeros(0)
            self.vals = np.zeros(0, complex)
        _, first, self.finv = np.unique(np.round(f, 12), return_index=True, return_inverse=True)
        self.ufreq = f[first]
        self.finv = self.finv.reshape(-1)
        self.maxdeg = int(self.exps.max(initial=0))
        self._cols = np.arange(self.state_dim)
        # dense (frequency x (component, monomial)) table when it is small enough
        self._table = None
        if self.vals.size and self.state_dim:
            umono, minv = _unique_rows(self.exps)
            cells = len(self.ufreq) * self.size * len(umono)
            if cells <= 4_000_000:
                tab = np.zeros((len(self.ufreq), self.size, len(umono)), complex)
                np.add.at(tab, (self.finv, self.comp, minv), self.vals)
                self._table = tab.reshape(len(self.ufreq), -1)
                self._umono = umono

    def __len__(self):
        return len(self.vals)

    def __call__(self, t: float, z) -> np.ndarray:
        if self.vals.size == 0:
            return np.zeros(self.size, complex)
        z = np.asarray(z, complex)
        zp = np.ones((self.state_dim, self.maxdeg + 1), complex)
        for e in range(1, self.maxdeg + 1):
            zp[:, e] = zp[:, e - 1] * z
        if self._table is not None:
            coef = (np.exp(1j * t * self.ufreq) @ self._table).reshape(self.size, -1)
            return coef @ zp[self._cols, self._umono].prod(axis=1)
        mono = zp[self._cols, self.exps].prod(axis=1) if self.state_dim else 1.0
        ph = np.exp(1j * t * self.ufreq)[self.finv]
        w = self.vals * ph * mono
        return np.bincount(self.comp, w.real, self.size) + 1j * np.bincount(self.comp, w.imag, self.size)


class QPMatrix:
    """Matrix-valued QP function sum_p C_p exp(i (p . omega) t), coefficients stacked (K, rows, cols)."""

    __slots__ = ("basis", "idx", "coef", "trunc_order")
    # lets ndarray @ QPMatrix dispatch to __rmatmul__
    __array_ufunc__ = None

    def __init__(self, basis: FrequencyBasis, idx, coef, trunc_order: int = DEFAULT_TRUNC):
        coef = np.asarray(coef, complex)
        idx = np.asarray(idx, np.int64).reshape(len(coef), basis.k)
        if coef.ndim != 3 or coef.shape[0] != idx.shape[0]:
            raise DimError("coefficient stack must be (K, rows, cols) matching the index rows")
        # merge duplicate indices
        if idx.shape[0]:
            uniq, inv = _unique_rows(idx)
            merged = np.zeros((len(uniq),) + coef.shape[1:], complex)
            np.add.at(merged, inv, coef)
            idx, coef = uniq, merged
        self.basis = basis
        self.idx = idx
        self.coef = coef
        self.trunc_order = int(trunc_order)

    @classmethod
    def constant(cls, basis, C, trunc_order=DEFAULT_TRUNC):
        C = np.asarray(C, complex)
        return cls(basis, np.zeros((1, basis.k), np.int64), C[None], trunc_order)

    @classmethod
    def from_entries(cls, entries: Sequence[Sequence[QPSeries]]):
        rows, cols = len(entries), len(entries[0])
        basis = entries[0][0].basis
        P = max(e.trunc_order for r in entries for e in r)
        all_idx = [e.idx for r in entries for e in r if len(e)]
        if not all_idx:
            return cls(basis, np.zeros((1, basis.k), np.int64), np.zeros((1, rows, cols)), P)
        idx = _unique_rows(np.vstack(all_idx))[0]
        lookup = {tuple(p): i for i, p in enumerate(idx.tolist())}
        coef = np.zeros((len(idx), rows, cols), complex)
        for i, r in enumerate(entries):
            for j, e in enumerate(r):
                for p, c in zip(e.idx.tolist(), e.val):
                    coef[lookup[tuple(p)], i, j] += c
        return cls(basis, idx, coef, P)

    @property
    def shape(self) -> tuple[int, int]:
        return self.coef.shape[1:]

    def entry(self, i: int, j: int, real_flag: bool = False) -> QPSeries:
        return QPSeries._raw(self.basis, self.idx, self.coef[:, i, j], self.trunc_order, real_flag)

    def frequencies(self) -> np.ndarray:
        return self.idx @ self.basis.omega_array

    def evaluate(self, t):
        """Q(t) for scalar t, or a (T, rows, cols) stack for an array of times."""
        t_arr = np.asarray(t, float)
        ph = np.exp(1j * np.multiply.outer(t_arr, self.frequencies()))
        return np.tensordot(ph, self.coef, axes=([-1], [0]))

    __call__ = evaluate

    def ddt(self) -> "QPMatrix":
        return QPMatrix(self.basis, self.idx, 1j * self.frequencies()[:, None, None] * self.coef,
                        self.trunc_order)

    def __matmul__(self, other):
        if isinstance(other, QPMatrix):
            raise TypeError("use qpmatrix_mul for products of two QP matrices")
        return QPMatrix(self.basis, self.idx, self.coef @ np.asarray(other, complex), self.trunc_order)

    def __rmatmul__(self, other):
        return QPMatrix(self.basis, self.idx, np.asarray(other, complex) @ self.coef, self.trunc_order)

    def __add__(self, other: "QPMatrix") -> "QPMatrix":
        return QPMatrix(self.basis, np.vstack([self.idx, other.idx]),
                        np.concatenate([self.coef, other.coef]), max(self.trunc_order, other.trunc_order))

    def __neg__(self):
        return QPMatrix(self.basis, self.idx, -self.coef, self.trunc_order)

    def __sub__(self, other):
        return self + (-other)

    def asymmetry(self) -> float:
        """Largest |C_{-p} - conj(C_p)|; zero for a real-valued matrix function."""
        lookup = {tuple(p): i for i, p in enumerate(self.idx.tolist())}
        worst = 0.0
        for i, p in enumerate(self.idx.tolist()):
            j = lookup.get(tuple(-np.asarray(p)))
            partner = np.zeros(self.shape, complex) if j is None else self.coef[j]
            worst = max(worst, float(np.abs(partner - np.conj(self.coef[i])).max()))
        return worst

    def as_real(self) -> "QPMatrix":
        """Conjugate-symmetrise the coefficients so the represented matrix is real."""
        idx = np.vstack([self.idx, -self.idx])
        coef = np.concatenate([self.coef, np.conj(self.coef)]) / 2
        return QPMatrix(self.basis, idx, coef, self.trunc_order)

    def purge(self, tol: float = PURGE_TOL) -> "QPMatrix":
        keep = np.abs(self.coef).reshape(len(self.idx), -1).max(axis=1, initial=0.0) >= tol
        if not keep.any():
            keep[:1] = True
        return QPMatrix(self.basis, self.idx[keep], self.coef[keep], self.trunc_order)

    def __repr__(self):
        return f"QPMatrix({self.shape[0]}x{self.shape[1]}, {len(self.idx)} harmonics)"
