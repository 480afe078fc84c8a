"""Dense complex linear algebra for small multipartite systems.

Subsystems are ordered as declared in ``dims``; every Kronecker product and
partial trace in the package uses that order. Logarithms are base 2.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import InitVar, dataclass, field
from functools import reduce
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from qdarwin.errors import StateValidityError

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-9
DIST_TOL = 1e-12
DEFAULT_CAP_DIM = 2**14

I2 = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (SIGMA_X, SIGMA_Y, SIGMA_Z)


def kron(*mats: np.ndarray) -> np.ndarray:
    """Kronecker product of one or more matrices, left to right."""
    if not mats:
        raise ValueError("kron needs at least one factor")
    return reduce(np.kron, (np.asarray(m) for m in mats))


def allclose(a, b, atol: float) -> bool:
    """Entrywise comparison with an explicit absolute tolerance."""
    return bool(np.allclose(np.asarray(a), np.asarray(b), rtol=0.0, atol=atol))


def _check_density(matrix: np.ndarray) -> None:
    herm_err = np.max(np.abs(matrix - matrix.conj().T))
    if herm_err > HERMITIAN_TOL:
        raise StateValidityError(f"not Hermitian (max deviation {herm_err:.3g})")
    tr = np.trace(matrix).real
    if abs(tr - 1.0) > TRACE_TOL:
        raise StateValidityError(f"trace is {tr!r}, expected 1")
    lam_min = np.linalg.eigvalsh(matrix).min()
    if lam_min < -PSD_TOL:
        raise StateValidityError(f"negative eigenvalue {lam_min:.3g}")


@dataclass(frozen=True, eq=False)
class DensityOperator:
    """A Hermitian, unit-trace, PSD matrix over a labelled tensor factorization.

    Pass ``check=False`` to skip the eigenvalue test for large trusted states;
    the shape is always checked. The stored matrix is read-only.
    """

    dims: tuple[int, ...]
    matrix: np.ndarray = field(repr=False)
    check: InitVar[bool] = True

    def __post_init__(self, check: bool) -> None:
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 2 for d in dims):
            raise ValueError(f"subsystem dimensions must be >= 2, got {dims}")
        m = np.array(self.matrix, dtype=complex)
        n = int(np.prod(dims))
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match dims {dims}")
        m.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "matrix", m)
        if check:
            _check_density(m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_vector(cls, psi, dims: Sequence[int] | None = None) -> "DensityOperator":
        psi = np.asarray(psi, dtype=complex).ravel()
        psi = psi / np.linalg.norm(psi)
        return cls(tuple(dims) if dims is not None else (psi.size,), np.outer(psi, psi.conj()))

    @classmethod
    def from_bloch(cls, r) -> "DensityOperator":
        return cls((2,), qubit_from_bloch(r))

    @classmethod
    def maximally_mixed(cls, dims: Sequence[int]) -> "DensityOperator":
        n = int(np.prod(dims))
        return cls(tuple(dims), np.eye(n, dtype=complex) / n)

    @classmethod
    def product(cls, *ops: "DensityOperator") -> "DensityOperator":
        dims = tuple(d for op in ops for d in op.dims)
        return cls(dims, kron(*(op.matrix for op in ops)), check=False)

    def allclose(self, other: "DensityOperator", atol: float = 1e-10) -> bool:
        return self.dims == other.dims and allclose(self.matrix, other.matrix, atol)

    def bloch(self) -> np.ndarray:
        """Bloch vector of a single-qubit state."""
        if self.dims != (2,):
            raise ValueError("Bloch vector is defined for single qubits only")
        return bloch_vector(self.matrix)


def qubit_from_bloch(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return 0.5 * (I2 + r[0] * SIGMA_X + r[1] * SIGMA_Y + r[2] * SIGMA_Z)


def bloch_vector(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    return np.array([np.trace(m @ p).real for p in PAULIS])


def partial_trace_matrix(matrix: np.ndarray, dims: Sequence[int], keep: Iterable[int]) -> np.ndarray:
    """Partial trace of an arbitrary operator (not necessarily a state).

    ``keep`` indexes ``dims``; the kept factors stay in declaration order.
    """
    dims = tuple(dims)
    n = len(dims)
    keep = sorted(set(keep))
    if not keep:
        raise ValueError("keep must be nonempty")
    if keep[0] < 0 or keep[-1] >= n:
        raise ValueError(f"subsystem index out of range for {n} subsystems: {keep}")
    traced = [k for k in range(n) if k not in keep]
    if not traced:
        return np.array(matrix, dtype=complex)
    t = np.asarray(matrix).reshape(dims + dims)
    perm = keep + traced
    t = t.transpose(perm + [p + n for p in perm])
    dk = int(np.prod([dims[k] for k in keep]))
    dt = int(np.prod([dims[k] for k in traced]))
    return np.trace(t.reshape(dk, dt, dk, dt), axis1=1, axis2=3)


def partial_trace(rho: DensityOperator, keep: Iterable[int]) -> DensityOperator:
    keep = sorted(set(keep))
    red = partial_trace_matrix(rho.matrix, rho.dims, keep)
    return DensityOperator(tuple(rho.dims[k] for k in keep), red, check=False)


def _psd_eigh(m: np.ndarray, tol: float = PSD_TOL) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(m, dtype=complex)
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    if w.size and w.min() < -tol:
        raise StateValidityError(f"matrix is not PSD (eigenvalue {w.min():.3g})")
    return np.clip(w, 0.0, None), v


def matrix_sqrt_psd(m: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Hermitian PSD square root via eigendecomposition.

    Eigenvalues in ``[-tol, 0)`` are treated as zero; anything more negative
    raises :class:`StateValidityError`.
    """
    w, v = _psd_eigh(m, tol)
    return (v * np.sqrt(w)) @ v.conj().T


def _as_matrix(x) -> np.ndarray:
    return x.matrix if isinstance(x, DensityOperator) else np.asarray(x, dtype=complex)


def fidelity(rho, sigma) -> float:
    """Root fidelity ``Tr sqrt(sqrt(rho) sigma sqrt(rho))``.

    Evaluated as the trace norm of ``sqrt(rho) sqrt(sigma)``, which has the
    same value and keeps full precision when either state is nearly singular.
    """
    a, b = _as_matrix(rho), _as_matrix(sigma)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if isinstance(rho, DensityOperator) and isinstance(sigma, DensityOperator) and rho.dims != sigma.dims:
        raise ValueError(f"dims mismatch {rho.dims} vs {sigma.dims}")
    s = np.linalg.svd(matrix_sqrt_psd(a) @ matrix_sqrt_psd(b), compute_uv=False)
    return float(s.sum())


def _entropy_of_spectrum(w: np.ndarray) -> float:
    w = w[w > 0]
    return float(max(-np.sum(w * np.log2(w)), 0.0))


def von_neumann_entropy(rho) -> float:
    """Entropy in bits, with 0 log 0 = 0."""
    w = np.linalg.eigvalsh(_as_matrix(rho))
    if w.min() < -PSD_TOL:
        raise StateValidityError(f"negative eigenvalue {w.min():.3g}")
    return _entropy_of_spectrum(np.clip(w, 0.0, None))


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    return _entropy_of_spectrum(np.array([p, 1.0 - p]))


class JointDistribution:
    """Joint distribution over a pair of discrete symbols.

    Built from a mapping ``{(a, b): p}``; zero entries may be omitted.
    """

    def __init__(self, table: Mapping[tuple[Hashable, Hashable], float]):
        clean = {}
        for key, p in table.items():
            a, b = key
            p = float(p)
            if p < 0 or not np.isfinite(p):
                raise ValueError(f"invalid probability {p} for {key}")
            clean[(a, b)] = clean.get((a, b), 0.0) + p
        total = sum(clean.values())
        if abs(total - 1.0) > DIST_TOL:
            raise ValueError(f"probabilities sum to {total!r}")
        self.table = clean

    def __repr__(self) -> str:
        return f"JointDistribution({self.table!r})"

    def __getitem__(self, key) -> float:
        return self.table.get(key, 0.0)

    def _marginal(self, axis: int) -> dict:
        out: dict = defaultdict(float)
        for key, p in self.table.items():
            out[key[axis]] += p
        return dict(out)

    def marginal_a(self) -> dict:
        return self._marginal(0)

    def marginal_b(self) -> dict:
        return self._marginal(1)

    def conditional_b(self, a) -> dict:
        """``p(b | a)``; raises if ``a`` has zero probability."""
        pa = self.marginal_a().get(a, 0.0)
        if pa <= 0:
            raise ValueError(f"symbol {a!r} has zero probability")
        return {b: p / pa for (x, b), p in self.table.items() if x == a}

    def transpose(self) -> "JointDistribution":
        return JointDistribution({(b, a): p for (a, b), p in self.table.items()})


def mutual_information_cc(p: JointDistribution) -> float:
    """Classical mutual information in bits."""
    pa, pb = p.marginal_a(), p.marginal_b()
    total = 0.0
    for (a, b), pab in p.table.items():
        if pab > 0:
            total += pab * np.log2(pab / (pa[a] * pb[b]))
    return float(max(total, 0.0))
