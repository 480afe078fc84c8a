"""Environment fragments, distinguishability of branch records, and Born sampling."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qdarwin.darwinism import BranchEnsemble, DarwinModel, branch_evolve_fast, discard
from qdarwin.errors import ResourceCapError
from qdarwin.qmath import (
    DEFAULT_CAP_DIM,
    DensityOperator,
    fidelity,
    kron,
    von_neumann_entropy,
)

DEFAULT_EPSILON = 0.01
DEFAULT_HOLEVO_MEMBERS = 10


@dataclass(frozen=True)
class FragmentSpec:
    """Assignment of accessible en-subs to fragments; ``None`` marks discarded ones."""

    n_fragments: int
    assignment: dict
    seed: int | None = None
    home_sites: dict = field(default_factory=dict)

    def members(self, k: int) -> list[int]:
        """Members of fragment ``k``, interleaved across home sites.

        Any prefix of the list keeps the macro-fraction proportions as even as
        the counts allow.
        """
        if not 0 <= k < self.n_fragments:
            raise ValueError(f"fragment {k} outside [0, {self.n_fragments})")
        by_site: dict[int, list[int]] = {}
        for j in sorted(j for j, f in self.assignment.items() if f == k):
            by_site.setdefault(self.home_sites.get(j, 0), []).append(j)
        columns = [by_site[s] for s in sorted(by_site)]
        out = []
        for row in range(max((len(c) for c in columns), default=0)):
            out.extend(c[row] for c in columns if row < len(c))
        return out

    def site_counts(self, k: int, d: int) -> list[int]:
        counts = [0] * d
        for j in self.members(k):
            counts[self.home_sites[j]] += 1
        return counts


def partition_fragments(model: DarwinModel, n: int, seed: int = 0) -> FragmentSpec:
    """Split the accessible en-subs into ``n`` fragments.

    Each macro-fraction is shuffled with a seeded permutation and dealt
    round-robin, so every fragment holds near-equal shares (differing by at
    most one) of every macro-fraction.
    """
    if n < 1:
        raise ValueError("need at least one fragment")
    rng = np.random.default_rng(seed)
    assignment: dict = {j: None for j, e in enumerate(model.ensubs) if e.discarded}
    homes = {j: e.home_site for j, e in enumerate(model.ensubs)}
    slot = 0
    for site in range(model.d):
        acc = model.members(site, accessible_only=True)
        if len(acc) < n:
            raise ValueError(f"site {site} has {len(acc)} accessible en-subs, fewer than {n} fragments")
        for j in rng.permutation(acc):
            assignment[int(j)] = slot % n
            slot += 1
    return FragmentSpec(n, assignment, seed, homes)


@dataclass(frozen=True, eq=False)
class ProductState:
    """Tensor product of single-qubit factors; never densified unless asked."""

    factors: tuple[np.ndarray, ...]
    members: tuple[int, ...] = ()

    def to_density(self, cap_dim: int = DEFAULT_CAP_DIM) -> DensityOperator:
        dim = 2 ** len(self.factors)
        if dim > cap_dim:
            raise ResourceCapError(dim, cap_dim, "fragment dimension")
        return DensityOperator((2,) * len(self.factors), kron(*self.factors), check=False)

    def entropy(self) -> float:
        return sum(von_neumann_entropy(f) for f in self.factors)

    def head(self, n: int) -> "ProductState":
        return ProductState(self.factors[:n], self.members[:n])


def fragment_states(ensemble: BranchEnsemble, spec: FragmentSpec, k: int) -> list[ProductState]:
    """Fragment ``k``'s state in each branch: perturbed factors for members homed there."""
    members = spec.members(k)
    pos = [ensemble.position(j) for j in members]
    out = []
    for i in range(ensemble.d):
        factors = tuple(
            ensemble.perturbed_states[p] if ensemble.home_sites[p] == i else ensemble.initial_states[p] for p in pos
        )
        out.append(ProductState(factors, tuple(members)))
    return out


def fragment_fidelity_matrix(states: Sequence[ProductState]) -> np.ndarray:
    """Pairwise fidelities of branch records, multiplied factor by factor."""
    d = len(states)
    n = len(states[0].factors)
    if any(len(s.factors) != n or s.members != states[0].members for s in states):
        raise ValueError("all branch states must share the member list")
    out = np.eye(d)
    for i in range(d):
        for ip in range(i + 1, d):
            f = 1.0
            for a, b in zip(states[i].factors, states[ip].factors):
                if a is not b and not np.array_equal(a, b):
                    f *= fidelity(a, b)
            out[i, ip] = out[ip, i] = f
    return out


def holevo_information(
    probs: Sequence[float], states: Sequence, cap_dim: int = DEFAULT_CAP_DIM
) -> float:
    """``S(sum p_i xi_i) - sum p_i S(xi_i)`` in bits, with the average formed densely."""
    probs = np.asarray(probs, dtype=float)
    if len(states) != probs.size:
        raise ValueError("one probability per state")
    mats, ents = [], []
    for s in states:
        if isinstance(s, ProductState):
            mats.append(s.to_density(cap_dim).matrix)
            ents.append(s.entropy())
        else:
            m = s.matrix if isinstance(s, DensityOperator) else np.asarray(s, dtype=complex)
            if m.shape[0] > cap_dim:
                raise ResourceCapError(m.shape[0], cap_dim, "state dimension")
            mats.append(m)
            ents.append(von_neumann_entropy(m))
    avg = sum(p * m for p, m in zip(probs, mats))
    return von_neumann_entropy(avg) - float(np.dot(probs, ents))


def holevo_curve(
    ensemble: BranchEnsemble, spec: FragmentSpec, k: int, max_members: int, cap_dim: int = DEFAULT_CAP_DIM
) -> list[tuple[int, float]]:
    """Holevo information of growing prefixes of fragment ``k``."""
    states = fragment_states(ensemble, spec, k)
    size = min(max_members, len(states[0].factors))
    return [
        (n, holevo_information(ensemble.branch_probs, [s.head(n) for s in states], cap_dim)) for n in range(1, size + 1)
    ]


@dataclass(frozen=True)
class BornSample:
    counts: np.ndarray
    reports: np.ndarray

    @property
    def trials(self) -> int:
        return int(self.counts.sum())

    @property
    def freqs(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def unanimous(self) -> bool:
        return bool(np.all(self.reports == self.reports[:, :1]))


def born_sample(ensemble: BranchEnsemble, trials: int, seed: int = 0, n_observers: int = 1) -> BornSample:
    """Draw the branch each trial lands in; every observer reports that branch."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if n_observers < 1:
        raise ValueError("need at least one observer")
    rng = np.random.default_rng(seed)
    p = np.asarray(ensemble.branch_probs, dtype=float)
    branch = rng.choice(p.size, size=trials, p=p / p.sum())
    reports = np.repeat(branch[:, None], n_observers, axis=1)
    return BornSample(np.bincount(branch, minlength=p.size), reports)


def _entropy_bits(p) -> float:
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


@dataclass(frozen=True)
class SbsReport:
    per_fragment_fidelity: list
    max_cross_fidelity: float
    epsilon: float
    sbs_verdict: bool
    offdiag_residual: float
    holevo_bits_per_fragment: list
    holevo_members: list
    fragment_sizes: list
    label_entropy_bits: float
    born_freqs: list | None = None

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "sbs_verdict": self.sbs_verdict,
            "max_cross_fidelity": self.max_cross_fidelity,
            "offdiag_residual": self.offdiag_residual,
            "label_entropy_bits": self.label_entropy_bits,
            "fragments": [
                {
                    "index": k,
                    "size": self.fragment_sizes[k],
                    "fidelity": np.asarray(self.per_fragment_fidelity[k]).tolist(),
                    "holevo_bits": self.holevo_bits_per_fragment[k],
                    "holevo_members": self.holevo_members[k],
                }
                for k in range(len(self.per_fragment_fidelity))
            ],
            "born_freqs": self.born_freqs,
        }

    def fidelity_rows(self) -> list[tuple[int, int, int, float]]:
        rows = []
        for k, f in enumerate(self.per_fragment_fidelity):
            d = f.shape[0]
            rows.extend((k, i, ip, float(f[i, ip])) for i in range(d) for ip in range(d))
        return rows

    def fidelity_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fragment", "i", "i_prime", "fidelity"])
        for k, i, ip, f in self.fidelity_rows():
            w.writerow([k, i, ip, repr(f)])
        return buf.getvalue()


def sbs_check(
    ensemble: BranchEnsemble,
    spec: FragmentSpec,
    epsilon: float = DEFAULT_EPSILON,
    holevo_members: int | None = DEFAULT_HOLEVO_MEMBERS,
    cap_dim: int = DEFAULT_CAP_DIM,
    born: BornSample | None = None,
) -> SbsReport:
    """Decide whether the fragments carry perfectly distinguishable branch records.

    The verdict needs every cross fidelity and the cross-branch coherence
    residual of ``ensemble`` to be at most ``epsilon``. Holevo information is
    taken over the first ``holevo_members`` members of each fragment
    (``None`` or 0 skips it).
    """
    if not epsilon >= 0:
        raise ValueError("epsilon must be nonnegative")
    mats, hol, hol_n, sizes = [], [], [], []
    worst = 0.0
    for k in range(spec.n_fragments):
        states = fragment_states(ensemble, spec, k)
        f = fragment_fidelity_matrix(states)
        mats.append(f)
        sizes.append(len(states[0].factors))
        if ensemble.d > 1:
            worst = max(worst, float(np.max(f[~np.eye(ensemble.d, dtype=bool)])))
        if holevo_members:
            n = min(holevo_members, sizes[-1])
            hol.append(holevo_information(ensemble.branch_probs, [s.head(n) for s in states], cap_dim))
            hol_n.append(n)
        else:
            hol.append(None)
            hol_n.append(0)
    residual = ensemble.max_coherence()
    return SbsReport(
        per_fragment_fidelity=mats,
        max_cross_fidelity=worst,
        epsilon=float(epsilon),
        sbs_verdict=bool(worst <= epsilon and residual <= epsilon),
        offdiag_residual=residual,
        holevo_bits_per_fragment=hol,
        holevo_members=hol_n,
        fragment_sizes=sizes,
        label_entropy_bits=_entropy_bits(ensemble.branch_probs),
        born_freqs=None if born is None else born.freqs.tolist(),
    )


def analyze(
    model: DarwinModel,
    n_fragments: int,
    epsilon: float = DEFAULT_EPSILON,
    fragment_seed: int = 0,
    holevo_members: int | None = DEFAULT_HOLEVO_MEMBERS,
    born_trials: int = 0,
    born_seed: int = 0,
    cap_dim: int = DEFAULT_CAP_DIM,
) -> tuple[BranchEnsemble, FragmentSpec, SbsReport]:
    """Fast evolution, discarding of the flagged en-subs and the system spin, then :func:`sbs_check`."""
    ens = discard(branch_evolve_fast(model), model.discard_flags, trace_system_spin=True)
    spec = partition_fragments(model, n_fragments, fragment_seed)
    born = born_sample(ens, born_trials, born_seed, n_fragments) if born_trials else None
    return ens, spec, sbs_check(ens, spec, epsilon, holevo_members, cap_dim, born)
