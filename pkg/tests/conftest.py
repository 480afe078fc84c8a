"""Independent reference implementations used as test oracles.

Nothing here imports the package's linear algebra: partial traces go through
explicit index loops / einsum, square roots through scipy, and the spin-bath
evolution through full-size operator matrices.
"""

from __future__ import annotations

import itertools
import string

import numpy as np
import scipy.linalg as sla

X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
ID = np.eye(2, dtype=complex)


def ref_partial_trace(rho, dims, keep):
    letters = iter(string.ascii_letters)
    n = len(dims)
    row = [next(letters) for _ in range(n)]
    col = [row[k] if k not in keep else next(letters) for k in range(n)]
    out = "".join(row[k] for k in sorted(keep)) + "".join(col[k] for k in sorted(keep))
    t = np.asarray(rho).reshape(tuple(dims) * 2)
    d = int(np.prod([dims[k] for k in keep]))
    return np.einsum("".join(row) + "".join(col) + "->" + out, t).reshape(d, d)


def ref_fidelity(rho, sigma):
    s = sla.sqrtm(rho)
    return float(np.real(np.trace(sla.sqrtm(s @ sigma @ s))))


def ref_entropy(rho):
    w = np.linalg.eigvals(rho).real
    w = w[w > 1e-15]
    return float(-np.sum(w * np.log2(w)))


def bloch_dm(r):
    return 0.5 * (ID + r[0] * X + r[1] * Y + r[2] * Z)


def dm_bloch(m):
    return np.array([np.trace(m @ p).real for p in (X, Y, Z)])


def pauli_dot(v):
    return v[0] * X + v[1] * Y + v[2] * Z


def ref_coupling_unitary(theta, s, e):
    return sla.expm(1j * theta * np.kron(pauli_dot(s), pauli_dot(e)))


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_dm(rng, dim):
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    m = g @ g.conj().T
    return m / np.trace(m)


def embed(op, pos, n_qubits, before_dim):
    """Place a 4x4 ``op`` on qubits (0, pos) of ``n_qubits`` qubits, scaled by a leading register."""
    dims = [2] * n_qubits
    full = np.zeros((2**n_qubits, 2**n_qubits), dtype=complex)
    op4 = op.reshape(2, 2, 2, 2)
    for idx in itertools.product(range(2), repeat=n_qubits):
        for a, b in itertools.product(range(2), repeat=2):
            out = list(idx)
            out[0], out[pos] = a, b
            r = np.ravel_multi_index(out, dims)
            c = np.ravel_multi_index(idx, dims)
            full[r, c] += op4[a, b, idx[0], idx[pos]]
    return full


def ref_brute_force(model):
    """Dense evolution with full-size block operators (independent of the package engine)."""
    d = model.d
    n = model.n_ensubs
    psi = np.asarray(model.amplitudes)
    rho = np.outer(psi, psi.conj())
    for m in [model.system_spin.matrix] + [e.initial_spin.matrix for e in model.ensubs]:
        rho = np.kron(rho, m)
    order = sorted(range(n), key=lambda j: (model.ensubs[j].home_site, j))
    for j in order:
        e = model.ensubs[j]
        c = e.coupling
        u = ref_coupling_unitary(c.theta, np.array(c.sys_obs.bloch), np.array(c.env_obs.bloch))
        big = embed(u, 1 + j, n + 1, d)
        p = np.zeros((d, d))
        p[e.home_site, e.home_site] = 1
        full = np.kron(p, big) + np.kron(np.eye(d) - p, np.eye(2 ** (n + 1)))
        rho = full @ rho @ full.conj().T
    return rho
