"""Spin-1/2 observables, the spin-spin interaction unitary, and site-localized operations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from qdarwin.qmath import I2, PAULIS, DensityOperator, kron

UNITARY_TOL = 1e-12
NULL_COUPLING_TOL = 1e-6


@dataclass(frozen=True)
class SpinObservable:
    """The involution ``s . sigma`` for a unit Bloch direction ``s``."""

    bloch: tuple[float, float, float]

    def __post_init__(self) -> None:
        v = tuple(float(x) for x in self.bloch)
        if len(v) != 3:
            raise ValueError("Bloch direction must have 3 components")
        norm = math.sqrt(sum(x * x for x in v))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"Bloch direction must be a unit vector (norm {norm!r})")
        object.__setattr__(self, "bloch", v)

    @classmethod
    def from_vector(cls, v) -> "SpinObservable":
        """Normalize an arbitrary nonzero 3-vector."""
        v = np.asarray(v, dtype=float)
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError("zero vector has no direction")
        return cls(tuple(v / n))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.bloch)

    def matrix(self) -> np.ndarray:
        return observable_matrix(self)

    def expectation(self, rho) -> float:
        m = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho)
        return float(np.trace(self.matrix() @ m).real)


SIGMA_X_OBS = SpinObservable((1.0, 0.0, 0.0))
SIGMA_Y_OBS = SpinObservable((0.0, 1.0, 0.0))
SIGMA_Z_OBS = SpinObservable((0.0, 0.0, 1.0))


def random_direction(rng: np.random.Generator) -> np.ndarray:
    """Uniform point on the unit sphere (uniform cos(polar), uniform azimuth)."""
    z = rng.uniform(-1.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    rho = math.sqrt(max(0.0, 1.0 - z * z))
    v = np.array([rho * math.cos(phi), rho * math.sin(phi), z])
    return v / np.linalg.norm(v)


def random_observable(rng: np.random.Generator) -> SpinObservable:
    return SpinObservable(tuple(random_direction(rng)))


def observable_matrix(s: SpinObservable) -> np.ndarray:
    x, y, z = s.bloch
    return x * PAULIS[0] + y * PAULIS[1] + z * PAULIS[2]


def canonical_theta(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"coupling angle must be finite, got {theta}")
    t = math.remainder(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    return t


@dataclass(frozen=True)
class CouplingSpec:
    """Integrated coupling angle and the pair of observables it couples."""

    theta: float
    sys_obs: SpinObservable
    env_obs: SpinObservable

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", canonical_theta(self.theta))

    @property
    def is_null(self) -> bool:
        return abs(math.sin(self.theta)) < NULL_COUPLING_TOL


def interaction_unitary(c: CouplingSpec) -> np.ndarray:
    """``exp(i theta sigma_S (x) sigma_E)`` in closed form.

    The generator squares to the identity, so the exponential collapses to
    ``cos(theta) I + i sin(theta) sigma_S (x) sigma_E``.
    """
    k = np.kron(observable_matrix(c.sys_obs), observable_matrix(c.env_obs))
    return math.cos(c.theta) * np.eye(4, dtype=complex) + 1j * math.sin(c.theta) * k


def site_projector(d: int, site: int) -> np.ndarray:
    p = np.zeros((d, d), dtype=complex)
    p[site, site] = 1.0
    return p


def position_conditioned_unitary(d: int, match_site: int, u_int: np.ndarray) -> np.ndarray:
    """Block operator on ``site_S (x) site_E (x) spin_S (x) spin_E``.

    ``u_int`` acts on the two spins only in the block where the system and
    the environment spin both sit at ``match_site``; the operator is the
    identity on every other block.
    """
    if not 0 <= match_site < d:
        raise ValueError(f"match_site {match_site} outside [0, {d})")
    u_int = np.asarray(u_int, dtype=complex)
    if u_int.shape != (4, 4):
        raise ValueError("u_int must be 4x4")
    out = np.eye(d * d * 4, dtype=complex)
    start = (match_site * d + match_site) * 4
    out[start : start + 4, start : start + 4] = u_int
    return out


OpKind = Literal["unitary", "measure", "identity"]
MEASURE_LABELS = ("plus", "minus", "absent")


@dataclass(frozen=True, eq=False)
class LocalizedOp:
    """An operation on the spin that only acts where the particle is at ``site``.

    ``payload`` is a 2x2 unitary for ``kind="unitary"`` and a pair of
    complementary projectors for ``kind="measure"``.
    """

    site: int
    kind: OpKind = "identity"
    payload: object = None

    def __post_init__(self) -> None:
        if self.site < 0:
            raise ValueError(f"invalid site {self.site}")
        if self.kind == "unitary":
            u = np.asarray(self.payload, dtype=complex)
            if u.shape != (2, 2) or not np.allclose(u.conj().T @ u, I2, rtol=0, atol=UNITARY_TOL):
                raise ValueError("unitary payload must be a 2x2 unitary")
            object.__setattr__(self, "payload", u)
        elif self.kind == "measure":
            p, q = (np.asarray(x, dtype=complex) for x in self.payload)
            if p.shape != (2, 2) or q.shape != (2, 2):
                raise ValueError("projectors must be 2x2")
            if not np.allclose(p + q, I2, rtol=0, atol=UNITARY_TOL):
                raise ValueError("projector pair must sum to the identity")
            for x in (p, q):
                if not np.allclose(x @ x, x, rtol=0, atol=UNITARY_TOL):
                    raise ValueError("measurement payload entries must be projectors")
            object.__setattr__(self, "payload", (p, q))
        elif self.kind != "identity":
            raise ValueError(f"unknown kind {self.kind!r}")

    def kraus(self, d: int) -> list[tuple[str, np.ndarray]]:
        """Labelled operators on ``site (d) (x) spin (2)``."""
        if self.site >= d:
            raise ValueError(f"site {self.site} outside register of size {d}")
        here = site_projector(d, self.site)
        away = np.eye(d, dtype=complex) - here
        if self.kind == "identity":
            return [("identity", np.eye(2 * d, dtype=complex))]
        if self.kind == "unitary":
            return [("unitary", kron(here, self.payload) + kron(away, I2))]
        p, q = self.payload
        return [
            (MEASURE_LABELS[0], kron(here, p)),
            (MEASURE_LABELS[1], kron(here, q)),
            (MEASURE_LABELS[2], kron(away, I2)),
        ]


def projector_pair(obs: SpinObservable) -> tuple[np.ndarray, np.ndarray]:
    """Projectors onto the +1 and -1 eigenspaces of an observable."""
    m = observable_matrix(obs)
    return 0.5 * (I2 + m), 0.5 * (I2 - m)


def apply_localized(op: LocalizedOp, rho: DensityOperator):
    """Apply a localized operation to a state on ``site (x) spin``.

    Returns the new state for unitary and identity kinds. For the measurement
    kind returns ``[(probability, post_state_or_None, label), ...]`` over the
    outcomes plus / minus at ``op.site`` and absent from it.
    """
    if len(rho.dims) != 2 or rho.dims[1] != 2:
        raise ValueError(f"expected a site (x) spin state, got dims {rho.dims}")
    d = rho.dims[0]
    ops = op.kraus(d)
    m = rho.matrix
    if op.kind != "measure":
        k = ops[0][1]
        return DensityOperator(rho.dims, k @ m @ k.conj().T)
    outcomes = []
    for label, k in ops:
        unnorm = k @ m @ k.conj().T
        p = float(np.trace(unnorm).real)
        post = DensityOperator(rho.dims, unnorm / p) if p > 1e-15 else None
        outcomes.append((max(p, 0.0), post, label))
    return outcomes
