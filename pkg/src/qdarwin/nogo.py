"""Two-lab signaling protocols with nonlocal versus site-localized spin operations.

The particle is a two-site register (site 0 is Alice's lab at ``-alpha``,
site 1 is Bob's lab at ``+alpha``) carrying a spin-1/2. Alice encodes a bit
``a`` with an ``a``-dependent operation and Bob measures ``sigma_z``. All
probabilities are computed exactly from density operators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qdarwin.qmath import (
    I2,
    SIGMA_X,
    DensityOperator,
    JointDistribution,
    kron,
    mutual_information_cc,
)
from qdarwin.spin import (
    SIGMA_X_OBS,
    SIGMA_Z_OBS,
    LocalizedOp,
    SpinObservable,
    projector_pair,
)

ALICE_SITE = 0
BOB_SITE = 1
NFLCP_TOL = 1e-12
ABSENT = "absent"


def discretize_gaussian(alpha: float, sigma: float) -> tuple[tuple[complex, complex], float]:
    """Two-site amplitudes and hump overlap for the symmetric double Gaussian.

    The humps ``exp(-(x -+ alpha)^2 / (4 sigma^2))`` overlap by
    ``exp(-alpha^2 / (2 sigma^2))``. Amplitudes are the coefficients of the
    normalized wavefunction in the symmetrically orthonormalized hump basis.
    """
    if not (alpha > 0 and sigma > 0):
        raise ValueError("alpha and sigma must be positive")
    overlap = math.exp(-(alpha**2) / (2.0 * sigma**2))
    gram = np.array([[1.0, overlap], [overlap, 1.0]])
    w, v = np.linalg.eigh(gram)
    gram_half = (v * np.sqrt(w)) @ v.T
    norm = 1.0 / math.sqrt(2.0 * (1.0 + overlap))
    c = gram_half @ np.array([norm, norm])
    c = c / np.linalg.norm(c)
    return (complex(c[0]), complex(c[1])), overlap


@dataclass(frozen=True)
class TwoLabState:
    alpha: float = 1.0
    sigma: float = 1e-3
    amplitudes: tuple[complex, complex] = field(default=None)
    spin: DensityOperator = field(default=None)

    def __post_init__(self) -> None:
        if self.amplitudes is None:
            object.__setattr__(self, "amplitudes", discretize_gaussian(self.alpha, self.sigma)[0])
        if self.spin is None:
            object.__setattr__(self, "spin", DensityOperator((2,), np.diag([1.0, 0.0])))
        amps = np.asarray(self.amplitudes, dtype=complex)
        if abs(np.sum(np.abs(amps) ** 2) - 1.0) > 1e-12:
            raise ValueError("site amplitudes must be normalized")

    @property
    def overlap(self) -> float:
        return discretize_gaussian(self.alpha, self.sigma)[1]

    def density(self) -> DensityOperator:
        psi = np.asarray(self.amplitudes, dtype=complex)
        return DensityOperator((2, 2), kron(np.outer(psi, psi.conj()), self.spin.matrix))


@dataclass(frozen=True)
class ProtocolResult:
    name: str
    localized: bool
    joint: JointDistribution
    mutual_info_bits: float
    nflcp_violated: bool

    def bob_conditionals(self) -> dict:
        """``p(b | a)`` for each of Alice's symbols with nonzero weight."""
        return {a: self.joint.conditional_b(a) for a, pa in self.joint.marginal_a().items() if pa > 0}

    def signaling_distance(self) -> float:
        """``max_a || p(b|a) - p(b) ||_1``; zero means Bob learns nothing."""
        pb = self.joint.marginal_b()
        worst = 0.0
        for cond in self.bob_conditionals().values():
            worst = max(worst, sum(abs(cond.get(b, 0.0) - pb[b]) for b in pb))
        return worst

    def to_dict(self) -> dict:
        rows = [
            {"a": a, "b": b, "p": p}
            for (a, b), p in sorted(self.joint.table.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1])))
        ]
        return {
            "protocol": self.name,
            "localized": self.localized,
            "joint": rows,
            "mutual_info_bits": self.mutual_info_bits,
            "nflcp_violated": self.nflcp_violated,
        }


def _nonlocal_measurement(obs: SpinObservable, labels=(0, 1)) -> list[tuple[object, np.ndarray]]:
    p, q = projector_pair(obs)
    return [(labels[0], kron(I2, p)), (labels[1], kron(I2, q))]


def _bob_measurement(localized: bool) -> list[tuple[object, np.ndarray]]:
    if not localized:
        return _nonlocal_measurement(SIGMA_Z_OBS)
    op = LocalizedOp(BOB_SITE, "measure", projector_pair(SIGMA_Z_OBS))
    names = {"plus": 0, "minus": 1, "absent": ABSENT}
    return [(names[label], k) for label, k in op.kraus(2)]


def _joint_table(
    rho: np.ndarray,
    alice_channels: Sequence[Sequence[np.ndarray]],
    prior: Sequence[float],
    bob: Sequence[tuple[object, np.ndarray]],
) -> dict:
    table = {}
    for a, (pa, kraus) in enumerate(zip(prior, alice_channels)):
        if pa == 0:
            continue
        after = sum(k @ rho @ k.conj().T for k in kraus)
        for b, m in bob:
            p = float(np.trace(m @ after @ m.conj().T).real)
            if p > 0:
                table[(a, b)] = table.get((a, b), 0.0) + pa * p
    return table


def _result(name: str, localized: bool, table: dict) -> ProtocolResult:
    joint = JointDistribution(table)
    info = mutual_information_cc(joint)
    return ProtocolResult(name, localized, joint, info, info > NFLCP_TOL)


def _check_prior(prior: Sequence[float]) -> tuple[float, float]:
    prior = tuple(float(p) for p in prior)
    if len(prior) != 2 or min(prior) < 0 or abs(sum(prior) - 1.0) > 1e-12:
        raise ValueError(f"alice_prior must be a distribution over two symbols, got {prior}")
    return prior


def run_unitary_protocol(
    localized: bool = False,
    state: TwoLabState | None = None,
    alice_prior: Sequence[float] = (0.5, 0.5),
) -> ProtocolResult:
    """Alice applies identity (a=0) or a spin flip (a=1); Bob measures sigma_z.

    Nonlocal: the flip acts on the spin wherever the particle is. Localized:
    the flip acts only at Alice's site and Bob's measurement only at his.
    """
    prior = _check_prior(alice_prior)
    state = state or TwoLabState()
    if localized:
        flip = LocalizedOp(ALICE_SITE, "unitary", SIGMA_X).kraus(2)[0][1]
    else:
        flip = kron(I2, SIGMA_X)
    channels = [[np.eye(4, dtype=complex)], [flip]]
    table = _joint_table(state.density().matrix, channels, prior, _bob_measurement(localized))
    return _result("unitary", localized, table)


def run_measurement_protocol(
    localized: bool = False,
    state: TwoLabState | None = None,
    alice_prior: Sequence[float] = (0.5, 0.5),
    alice_observable: SpinObservable = SIGMA_X_OBS,
) -> ProtocolResult:
    """Alice does nothing (a=0) or measures ``alice_observable`` (a=1); Bob measures sigma_z.

    Alice's outcome is not recorded, so her a=1 branch is the non-selective
    measurement channel.
    """
    prior = _check_prior(alice_prior)
    state = state or TwoLabState()
    if localized:
        op = LocalizedOp(ALICE_SITE, "measure", projector_pair(alice_observable))
        measure = [k for _, k in op.kraus(2)]
    else:
        measure = [k for _, k in _nonlocal_measurement(alice_observable)]
    channels = [[np.eye(4, dtype=complex)], measure]
    table = _joint_table(state.density().matrix, channels, prior, _bob_measurement(localized))
    return _result("measurement", localized, table)
