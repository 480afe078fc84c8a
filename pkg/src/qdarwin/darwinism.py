"""Decoherence of a spatially superposed spin by a bath of site-fixed spins.

The system is a spin-1/2 on a ``d``-site register; every environment spin
("en-sub") sits at one home site and couples to the system spin only in the
branch where the system is at that site. Two engines evolve the model:

* :func:`brute_force_evolve` applies every position-conditioned unitary to the
  dense state on ``site (x) spin_S (x) spin_E^N``.
* :func:`branch_evolve_fast` works branch by branch with per-en-sub qubit
  states, the Bloch recursion for the system spin, and norm trackers for the
  cross-branch blocks. It scales linearly in ``N``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from qdarwin.errors import InvariantError, ResourceCapError
from qdarwin.qmath import (
    DEFAULT_CAP_DIM,
    I2,
    DensityOperator,
    kron,
    partial_trace,
    qubit_from_bloch,
)
from qdarwin.spin import (
    NULL_COUPLING_TOL,
    CouplingSpec,
    SpinObservable,
    canonical_theta,
    interaction_unitary,
    observable_matrix,
    random_direction,
)

FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class EnSub:
    """One environment spin fixed at ``home_site``."""

    home_site: int
    initial_spin: DensityOperator
    coupling: CouplingSpec
    discarded: bool = False

    def __post_init__(self) -> None:
        if self.initial_spin.dims != (2,):
            raise ValueError("en-sub spin must be a single qubit")

    @property
    def env_expect(self) -> float:
        """``Tr(sigma_E rho_E)`` for the coupled environment observable."""
        return self.coupling.env_obs.expectation(self.initial_spin)

    @property
    def delta(self) -> float:
        return 1.0 - self.env_expect**2

    @property
    def coherence_factor(self) -> float:
        """Per-step shrink factor of cross-branch blocks when this en-sub is traced out."""
        return math.sqrt(max(0.0, 1.0 - self.delta * math.sin(self.coupling.theta) ** 2))

    def perturbed_spin(self, system_bloch=None) -> np.ndarray:
        """Reduced en-sub state after interacting in its home branch.

        Without ``system_bloch`` this is ``cos^2 rho + sin^2 sigma rho sigma``,
        exact when the system spin is maximally mixed. Passing the system Bloch
        vector just before the interaction adds the commutator term and makes
        the single-en-sub marginal exact for any system spin.
        """
        rho = self.initial_spin.matrix
        e = observable_matrix(self.coupling.env_obs)
        th = self.coupling.theta
        out = math.cos(th) ** 2 * rho + math.sin(th) ** 2 * (e @ rho @ e)
        if system_bloch is not None:
            proj = float(np.dot(self.coupling.sys_obs.vector, system_bloch))
            out = out + 0.5j * math.sin(2 * th) * proj * (e @ rho - rho @ e)
        return out


@dataclass(frozen=True, eq=False)
class DarwinModel:
    d: int
    amplitudes: np.ndarray
    system_spin: DensityOperator
    ensubs: tuple[EnSub, ...]
    rng_seed: int | None = None

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ValueError("need at least two sites")
        amps = np.array(self.amplitudes, dtype=complex).ravel()
        if amps.size != self.d:
            raise ValueError(f"expected {self.d} amplitudes, got {amps.size}")
        if abs(np.sum(np.abs(amps) ** 2) - 1.0) > 1e-12:
            raise ValueError("site amplitudes must satisfy sum |alpha_i|^2 = 1")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "ensubs", tuple(self.ensubs))
        if self.system_spin.dims != (2,):
            raise ValueError("system spin must be a single qubit")
        for e in self.ensubs:
            if not 0 <= e.home_site < self.d:
                raise ValueError(f"en-sub home site {e.home_site} outside [0, {self.d})")

    @property
    def n_ensubs(self) -> int:
        return len(self.ensubs)

    @property
    def branch_probs(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @property
    def interaction_order(self) -> tuple[int, ...]:
        """En-sub indices in the order they interact: by home site, then roster order."""
        return tuple(sorted(range(self.n_ensubs), key=lambda j: (self.ensubs[j].home_site, j)))

    @property
    def discard_flags(self) -> tuple[bool, ...]:
        return tuple(e.discarded for e in self.ensubs)

    def members(self, site: int, accessible_only: bool = False) -> list[int]:
        return [
            j
            for j in self.interaction_order
            if self.ensubs[j].home_site == site and not (accessible_only and self.ensubs[j].discarded)
        ]

    def with_discards(self, flags: Iterable[bool]) -> "DarwinModel":
        flags = tuple(bool(f) for f in flags)
        if len(flags) != self.n_ensubs:
            raise ValueError("one discard flag per en-sub")
        subs = tuple(replace(e, discarded=f) for e, f in zip(self.ensubs, flags))
        return replace(self, ensubs=subs)

    @property
    def system_is_maximally_mixed(self) -> bool:
        return bool(np.allclose(self.system_spin.matrix, I2 / 2, rtol=0, atol=1e-12))

    def diagnostics(self) -> list[str]:
        """Human-readable notes on null couplings and approximation validity."""
        notes = []
        if not self.system_is_maximally_mixed:
            notes.append("system spin is not maximally mixed: fast-path en-sub states are approximate")
        for j, e in enumerate(self.ensubs):
            if abs(math.sin(e.coupling.theta)) < NULL_COUPLING_TOL:
                notes.append(f"en-sub {j}: null coupling (|sin theta| < {NULL_COUPLING_TOL:g})")
            elif e.delta < 1e-12:
                notes.append(f"en-sub {j}: non-decohering step (eigenstate of its coupling observable)")
        return notes


@dataclass(frozen=True)
class ModelConfig:
    """Parameters for :func:`build_model`.

    ``per_site`` is either one count used at every site or one count per site.
    ``amplitudes`` defaults to the uniform superposition.
    """

    d: int = 2
    per_site: int | Sequence[int] = 40
    theta_range: tuple[float, float] = (0.3, math.pi - 0.3)
    max_bloch: float = 0.9
    discard_fraction: float = 0.25
    amplitudes: Sequence[complex] | None = None
    system_bloch: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def counts(self) -> list[int]:
        if isinstance(self.per_site, (int, np.integer)):
            return [int(self.per_site)] * self.d
        counts = [int(m) for m in self.per_site]
        if len(counts) != self.d:
            raise ValueError(f"per_site has {len(counts)} entries for d={self.d}")
        return counts


def build_model(config: ModelConfig | None = None, **overrides) -> DarwinModel:
    """Sample a random model; identical configs give identical models.

    Observables are uniform on the Bloch sphere, couplings uniform on
    ``theta_range``, and en-sub spins are a uniformly random direction scaled
    to a Bloch norm uniform on ``[0, max_bloch]``. The first
    ``round(discard_fraction * m_k)`` en-subs to interact at each site are
    flagged as discarded.
    """
    cfg = replace(config or ModelConfig(), **overrides)
    if cfg.d < 2:
        raise ValueError("d must be >= 2")
    counts = cfg.counts()
    if any(m < 0 for m in counts):
        raise ValueError("en-sub counts must be nonnegative")
    lo, hi = cfg.theta_range
    if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
        raise ValueError(f"invalid theta range {cfg.theta_range}")
    if not 0.0 <= cfg.max_bloch <= 1.0:
        raise ValueError("max_bloch must lie in [0, 1]")
    if not 0.0 <= cfg.discard_fraction <= 1.0:
        raise ValueError("discard_fraction must lie in [0, 1]")
    if cfg.seed < 0:
        raise ValueError("seed must be nonnegative")

    rng = np.random.default_rng(cfg.seed)
    if cfg.amplitudes is None:
        amps = np.full(cfg.d, 1.0 / math.sqrt(cfg.d), dtype=complex)
    else:
        amps = np.asarray(cfg.amplitudes, dtype=complex)
    sys_r = np.asarray(cfg.system_bloch, dtype=float)
    if np.linalg.norm(sys_r) > 1.0 + 1e-12:
        raise ValueError("system Bloch vector must have norm <= 1")

    ensubs = []
    for site, m in enumerate(counts):
        n_disc = int(round(cfg.discard_fraction * m))
        for l in range(m):
            s_dir = random_direction(rng)
            e_dir = random_direction(rng)
            theta = rng.uniform(lo, hi)
            b_dir = random_direction(rng)
            b_norm = rng.uniform(0.0, cfg.max_bloch)
            spin = DensityOperator((2,), qubit_from_bloch(b_norm * b_dir))
            coupling = CouplingSpec(theta, SpinObservable(tuple(s_dir)), SpinObservable(tuple(e_dir)))
            ensubs.append(EnSub(site, spin, coupling, discarded=l < n_disc))
    model = DarwinModel(
        cfg.d, amps, DensityOperator((2,), qubit_from_bloch(sys_r)), tuple(ensubs), rng_seed=cfg.seed
    )
    for note in model.diagnostics():
        if "null coupling" in note:
            warnings.warn(note, stacklevel=2)
    return model


# --------------------------------------------------------------------------
# decay laws for a single interaction step


@dataclass(frozen=True)
class PropositionInputs:
    """One interaction step seen from the system spin.

    ``r`` is the system Bloch vector, ``s_hat`` the system observable, and
    ``env_expect`` is ``Tr(sigma_E rho_E)`` for the en-sub.
    """

    r: tuple[float, float, float]
    s_hat: SpinObservable
    theta: float
    env_expect: float

    def __post_init__(self) -> None:
        r = tuple(float(x) for x in self.r)
        if len(r) != 3 or math.sqrt(sum(x * x for x in r)) > 1.0 + 1e-12:
            raise ValueError("r must be a 3-vector with norm <= 1")
        if not -1.0 - 1e-12 <= self.env_expect <= 1.0 + 1e-12:
            raise ValueError("env_expect must lie in [-1, 1]")
        object.__setattr__(self, "r", r)

    @property
    def delta(self) -> float:
        return 1.0 - self.env_expect**2

    def angle(self) -> tuple[float, float]:
        """``(cos phi, sin phi)`` between the observable and ``r``; (1, 0) when r = 0."""
        r = np.array(self.r)
        n = np.linalg.norm(r)
        if n == 0:
            return 1.0, 0.0
        rh = r / n
        c = float(np.clip(np.dot(self.s_hat.vector, rh), -1.0, 1.0))
        return c, float(np.linalg.norm(np.cross(self.s_hat.vector, rh)))


def bloch_update(inp: PropositionInputs) -> np.ndarray:
    """System Bloch vector after one interaction, with the en-sub traced out.

    ``r' = |r| (cos^2 th r_hat + sin^2 th k_hat - sin 2th sin phi <sigma_E> n'_hat)``,
    where ``k_hat`` is ``r_hat`` reflected about ``s_hat`` and ``n'_hat`` is
    the unit vector along ``s_hat x r_hat``.
    """
    r = np.array(inp.r)
    norm = np.linalg.norm(r)
    if norm == 0:
        return np.zeros(3)
    rh = r / norm
    s = inp.s_hat.vector
    cos_phi, sin_phi = inp.angle()
    if sin_phi < 1e-15:
        k_hat = rh
        n_prime = np.zeros(3)
    else:
        n_prime = np.cross(s, rh) / sin_phi
        n_hat = np.cross(n_prime, s)
        k_hat = cos_phi * s - sin_phi * n_hat
    th = inp.theta
    return norm * (
        math.cos(th) ** 2 * rh
        + math.sin(th) ** 2 * k_hat
        - math.sin(2 * th) * sin_phi * inp.env_expect * n_prime
    )


def bloch_norm_sq_law(inp: PropositionInputs) -> float:
    """``|r'|^2 = |r|^2 (1 - delta sin^2(2 theta) sin^2 phi)``."""
    _, sin_phi = inp.angle()
    r2 = float(np.dot(inp.r, inp.r))
    return r2 * (1.0 - inp.delta * math.sin(2 * inp.theta) ** 2 * sin_phi**2)


def omega_update_normsq(
    c: np.ndarray, theta: float, env_expect: float, sys_obs: SpinObservable
) -> tuple[np.ndarray, float]:
    """``Tr_E(U (c (x) rho_E))`` for a 2x2 operator ``c`` and its squared Frobenius norm.

    Only ``<sigma_E>`` of the en-sub enters:
    ``c' = cos(theta) c + i <sigma_E> sin(theta) sigma_S c``.
    """
    c = np.asarray(c, dtype=complex)
    out = math.cos(theta) * c + 1j * env_expect * math.sin(theta) * (observable_matrix(sys_obs) @ c)
    return out, float(np.sum(np.abs(out) ** 2))


def omega_norm_law(normsq: float, theta: float, env_expect: float) -> float:
    """``sum |c'_ij|^2 = sum |c_ij|^2 (1 - delta sin^2 theta)``."""
    return normsq * (1.0 - (1.0 - env_expect**2) * math.sin(theta) ** 2)


# --------------------------------------------------------------------------
# dense engine


class _DenseState:
    """Dense operator on ``site (x) spin_S (x) live en-sub spins`` stored as a tensor."""

    def __init__(self, d: int, matrix: np.ndarray, live: list[int]):
        self.d = d
        self.live = list(live)
        n = len(self.live) + 2
        self.t = np.asarray(matrix, dtype=complex).reshape(([d] + [2] * (n - 1)) * 2)

    @property
    def n_axes(self) -> int:
        return len(self.live) + 2

    def apply(self, ensub_id: int, site: int, u: np.ndarray) -> None:
        n = self.n_axes
        ax = 2 + self.live.index(ensub_id)
        u4 = u.reshape(2, 2, 2, 2)
        t = self.t
        # rows at `site`: U X
        sub = np.tensordot(u4, t[site], axes=([2, 3], [0, ax - 1]))
        t[site] = np.moveaxis(sub, [0, 1], [0, ax - 1])
        # columns at `site`: X U^dagger
        idx = (slice(None),) * n + (site,)
        sub = t[idx]
        sub = np.tensordot(sub, u4.conj(), axes=([n, n + ax - 1], [2, 3]))
        t[idx] = np.moveaxis(sub, [-2, -1], [n, n + ax - 1])

    def attach(self, ensub_id: int, rho: np.ndarray) -> None:
        """Append a fresh en-sub in state ``rho`` as the last tensor factor."""
        m = np.kron(self.matrix(), rho)
        self.live.append(ensub_id)
        self.t = m.reshape(([self.d] + [2] * (self.n_axes - 1)) * 2)

    def trace_out(self, ensub_id: int) -> None:
        n = self.n_axes
        ax = 2 + self.live.index(ensub_id)
        self.t = np.trace(self.t, axis1=ax, axis2=n + ax)
        self.live.remove(ensub_id)

    def matrix(self) -> np.ndarray:
        dim = self.d * 2 ** (self.n_axes - 1)
        return self.t.reshape(dim, dim)

    def block_norm(self, k: int, l: int, norm: str = "fro") -> float:
        dim = 2 ** (self.n_axes - 1)
        block = self.matrix().reshape(self.d, dim, self.d, dim)[k, :, l, :]
        if norm == "fro":
            return float(np.linalg.norm(block))
        return float(np.linalg.svd(block, compute_uv=False).sum())


def _initial_matrix(model: DarwinModel) -> np.ndarray:
    psi = model.amplitudes
    return kron(np.outer(psi, psi.conj()), model.system_spin.matrix, *(e.initial_spin.matrix for e in model.ensubs))


def _check_cap(model: DarwinModel, cap_dim: int) -> int:
    dim = model.d * 2 ** (model.n_ensubs + 1)
    if dim > cap_dim:
        raise ResourceCapError(dim, cap_dim, "brute-force Hilbert dimension")
    return dim


def brute_force_evolve(model: DarwinModel, cap_dim: int = DEFAULT_CAP_DIM, steps: int | None = None) -> DensityOperator:
    """Exact post-interaction state on ``site_S (x) spin_S (x) spin_E^N``.

    En-sub positions are classical labels, so each interaction is the
    block operator ``P_home (x) U + (1 - P_home) (x) 1``. ``steps`` limits
    evolution to the first interactions in :attr:`DarwinModel.interaction_order`.
    """
    _check_cap(model, cap_dim)
    n = model.n_ensubs
    state = _DenseState(model.d, _initial_matrix(model), list(range(n)))
    order = model.interaction_order
    for j in order[: len(order) if steps is None else steps]:
        e = model.ensubs[j]
        state.apply(j, e.home_site, interaction_unitary(e.coupling))
    m = state.matrix()
    dims = (model.d,) + (2,) * (n + 1)
    if abs(np.trace(m).real - 1.0) > 1e-10 or np.max(np.abs(m - m.conj().T)) > 1e-10:
        raise InvariantError("brute-force evolution lost trace or Hermiticity")
    return DensityOperator(dims, m, check=False)


def offdiagonal_norm(full_state: DensityOperator, pair: tuple[int, int], norm: str = "fro") -> float:
    """Norm of the ``(k, l)`` position block of a state whose first factor is the site register.

    ``norm`` is ``"fro"`` (Frobenius) or ``"trace"``.
    """
    k, l = pair
    d = full_state.dims[0]
    if k == l:
        raise ValueError("diagonal blocks are not coherence blocks")
    if not (0 <= k < d and 0 <= l < d):
        raise ValueError(f"branch pair {pair} outside [0, {d})")
    if norm not in ("fro", "trace"):
        raise ValueError(f"unknown norm {norm!r}")
    rest = full_state.dim // d
    block = full_state.matrix.reshape(d, rest, d, rest)[k, :, l, :]
    if norm == "fro":
        return float(np.linalg.norm(block))
    return float(np.linalg.svd(block, compute_uv=False).sum())


@dataclass(frozen=True)
class CoherenceStep:
    ensub: int
    home_site: int
    before: float
    after: float
    law_factor: float

    @property
    def ratio(self) -> float:
        return self.after / self.before if self.before > 0 else float("nan")


def coherence_trajectory(
    model: DarwinModel, pair: tuple[int, int], cap_dim: int = DEFAULT_CAP_DIM, norm: str = "fro"
) -> list[CoherenceStep]:
    """Dense evolution recording the ``pair`` block norm after every interaction.

    Each en-sub joins the dense state just before it interacts, and discarded
    en-subs are traced out right after; since untouched and finished en-subs
    are never acted on again this leaves every recorded block equal to the
    corresponding block of the full evolution with those en-subs traced.
    ``law_factor`` is the predicted ratio, ``sqrt(1 - delta sin^2 theta)`` for
    a discarded en-sub homed at either site of the pair and 1 otherwise.
    """
    k, l = pair
    if k == l:
        raise ValueError("diagonal blocks are not coherence blocks")
    _check_cap(model, cap_dim)
    psi = model.amplitudes
    state = _DenseState(model.d, kron(np.outer(psi, psi.conj()), model.system_spin.matrix), [])
    out = []
    for j in model.interaction_order:
        e = model.ensubs[j]
        # compare blocks over the same subsystems: with j for kept en-subs, without for discarded
        if e.discarded:
            before = state.block_norm(k, l, norm)
            state.attach(j, e.initial_spin.matrix)
        else:
            state.attach(j, e.initial_spin.matrix)
            before = state.block_norm(k, l, norm)
        state.apply(j, e.home_site, interaction_unitary(e.coupling))
        law = 1.0
        if e.discarded:
            state.trace_out(j)
            if e.home_site in pair:
                law = e.coherence_factor
        out.append(CoherenceStep(j, e.home_site, before, state.block_norm(k, l, norm), law))
    return out


# --------------------------------------------------------------------------
# fast engine


@dataclass(frozen=True, eq=False)
class BranchEnsemble:
    """Branch-wise product-state description of the evolved model.

    Each remaining en-sub is stored once: its initial state (seen in every
    branch other than its home) and its perturbed state (seen in its home
    branch). ``coherence`` holds the trace norm of each cross-branch block and
    ``offdiag_norm`` its Frobenius norm; both follow the per-step decay law
    and are zero on the diagonal.
    """

    branch_probs: np.ndarray
    ensub_ids: tuple[int, ...]
    home_sites: tuple[int, ...]
    initial_states: tuple[np.ndarray, ...]
    perturbed_states: tuple[np.ndarray, ...]
    error_bounds: tuple[float, ...]
    decay_factors: tuple[float, ...]
    system_spin_branch: tuple[np.ndarray, ...] | None
    coherence: np.ndarray
    offdiag_norm_exact: np.ndarray = field(repr=False)
    notes: tuple[str, ...] = ()

    @property
    def d(self) -> int:
        return self.branch_probs.size

    @property
    def spin_traced(self) -> bool:
        return self.system_spin_branch is None

    @property
    def offdiag_norm(self) -> np.ndarray:
        """Frobenius norms of the cross blocks; an upper bound once the system spin is traced."""
        return self.offdiag_norm_exact * (math.sqrt(2.0) if self.spin_traced else 1.0)

    @property
    def branch_states(self) -> list[list[np.ndarray]]:
        return [self.states_in_branch(i) for i in range(self.d)]

    def states_in_branch(self, i: int) -> list[np.ndarray]:
        return [
            p if h == i else s for h, s, p in zip(self.home_sites, self.initial_states, self.perturbed_states)
        ]

    def position(self, ensub_id: int) -> int:
        return self.ensub_ids.index(ensub_id)

    def assemble(self, cap_dim: int = DEFAULT_CAP_DIM) -> DensityOperator:
        """Dense block-diagonal state ``sum_i p_i |i><i| (x) [rho_S^i] (x) en-sub states``."""
        n_spin = 0 if self.spin_traced else 1
        dim = self.d * 2 ** (len(self.ensub_ids) + n_spin)
        if dim > cap_dim:
            raise ResourceCapError(dim, cap_dim, "assembled ensemble dimension")
        total = 0
        for i, p in enumerate(self.branch_probs):
            proj = np.zeros((self.d, self.d), dtype=complex)
            proj[i, i] = p
            factors = [proj]
            if not self.spin_traced:
                factors.append(self.system_spin_branch[i])
            factors.extend(self.states_in_branch(i))
            total = total + kron(*factors)
        dims = (self.d,) + (2,) * (len(self.ensub_ids) + n_spin)
        return DensityOperator(dims, total, check=False)

    def max_coherence(self) -> float:
        return float(self.coherence.max()) if self.d > 1 else 0.0


def branch_evolve_fast(model: DarwinModel, bloch_correction: bool = False) -> BranchEnsemble:
    """Evolve every branch with per-en-sub qubit states.

    En-sub states follow ``cos^2 rho + sin^2 sigma rho sigma``; when the
    system spin is not maximally mixed each state carries an error bound
    ``|r| |sin 2 theta|`` in trace norm, with ``r`` the system Bloch vector
    just before that interaction. ``bloch_correction=True`` adds the missing
    commutator term so that single-en-sub marginals are exact. Nothing is
    discarded here; see :func:`discard`.
    """
    d = model.d
    probs = model.branch_probs.copy()
    perturbed: list[np.ndarray] = [None] * model.n_ensubs
    errors = [0.0] * model.n_ensubs
    spins = []
    for i in range(d):
        r = model.system_spin.bloch()
        for j in model.members(i):
            e = model.ensubs[j]
            perturbed[j] = e.perturbed_spin(r if bloch_correction else None)
            if not bloch_correction:
                errors[j] = float(np.linalg.norm(r) * abs(math.sin(2 * e.coupling.theta)))
            r = bloch_update(PropositionInputs(tuple(r), e.coupling.sys_obs, e.coupling.theta, e.env_expect))
        spins.append(qubit_from_bloch(r))

    amp = np.abs(model.amplitudes)
    coh = np.outer(amp, amp)
    np.fill_diagonal(coh, 0.0)
    frob = coh * float(np.linalg.norm(model.system_spin.matrix))
    for e in model.ensubs:
        frob = frob * float(np.linalg.norm(e.initial_spin.matrix))
    ensemble = BranchEnsemble(
        branch_probs=probs,
        ensub_ids=tuple(range(model.n_ensubs)),
        home_sites=tuple(e.home_site for e in model.ensubs),
        initial_states=tuple(e.initial_spin.matrix for e in model.ensubs),
        perturbed_states=tuple(perturbed),
        error_bounds=tuple(errors),
        decay_factors=tuple(e.coherence_factor for e in model.ensubs),
        system_spin_branch=tuple(spins),
        coherence=coh,
        offdiag_norm_exact=frob,
        notes=tuple(model.diagnostics()),
    )
    return ensemble


def _discard_ids(flags, n: int) -> set[int]:
    flags = list(flags)
    if flags and all(isinstance(f, (bool, np.bool_)) for f in flags):
        if len(flags) != n:
            raise ValueError(f"expected {n} discard flags, got {len(flags)}")
        return {j for j, f in enumerate(flags) if f}
    ids = {int(j) for j in flags}
    if any(j < 0 or j >= n for j in ids):
        raise ValueError("discard index out of range")
    return ids


def discard(obj, flags, trace_system_spin: bool = False):
    """Trace out en-subs (and optionally the system spin).

    ``flags`` is a boolean mask over the model's en-subs or a collection of
    en-sub indices. ``obj`` is a :class:`BranchEnsemble` or a dense state from
    :func:`brute_force_evolve`; the result has the same kind.
    """
    if isinstance(obj, BranchEnsemble):
        return _discard_ensemble(obj, flags, trace_system_spin)
    if isinstance(obj, DensityOperator):
        n = len(obj.dims) - 2
        if n < 0 or obj.dims[1:] != (2,) * (n + 1):
            raise ValueError(f"expected dims (d, 2, 2, ...), got {obj.dims}")
        gone = _discard_ids(flags, n)
        keep = [0] + ([] if trace_system_spin else [1]) + [2 + j for j in range(n) if j not in gone]
        return partial_trace(obj, keep)
    raise TypeError(f"cannot discard from {type(obj).__name__}")


def _discard_ensemble(ens: BranchEnsemble, flags, trace_system_spin: bool) -> BranchEnsemble:
    mask = list(flags)
    if mask and all(isinstance(f, (bool, np.bool_)) for f in mask) and len(mask) == len(ens.ensub_ids):
        gone = {ens.ensub_ids[p] for p, f in enumerate(mask) if f}
    else:
        gone = {int(j) for j in mask}
    unknown = gone - set(ens.ensub_ids)
    if unknown:
        raise ValueError(f"en-subs {sorted(unknown)} are not present")
    coh = ens.coherence.copy()
    frob = ens.offdiag_norm_exact.copy()
    d = ens.d
    keep = []
    for p, j in enumerate(ens.ensub_ids):
        if j not in gone:
            keep.append(p)
            continue
        h = ens.home_sites[p]
        f = ens.decay_factors[p]
        touched = np.zeros((d, d), dtype=bool)
        touched[h, :] = touched[:, h] = True
        coh = np.where(touched, coh * f, coh)
        frob = np.where(touched, frob * f, frob) / float(np.linalg.norm(ens.initial_states[p]))
    np.fill_diagonal(coh, 0.0)
    np.fill_diagonal(frob, 0.0)

    def pick(seq):
        return tuple(seq[p] for p in keep)

    spins = ens.system_spin_branch
    if trace_system_spin:
        spins = None
    return replace(
        ens,
        ensub_ids=pick(ens.ensub_ids),
        home_sites=pick(ens.home_sites),
        initial_states=pick(ens.initial_states),
        perturbed_states=pick(ens.perturbed_states),
        error_bounds=pick(ens.error_bounds),
        decay_factors=pick(ens.decay_factors),
        system_spin_branch=spins,
        coherence=coh,
        offdiag_norm_exact=frob,
    )


# --------------------------------------------------------------------------
# serialization


def _c(z) -> list[float]:
    z = complex(z)
    return [z.real, z.imag]


def _matrix_to_list(m: np.ndarray) -> list:
    return [[_c(z) for z in row] for row in np.asarray(m)]


def _matrix_from_list(rows) -> np.ndarray:
    return np.array([[complex(re, im) for re, im in row] for row in rows], dtype=complex)


def model_to_dict(model: DarwinModel) -> dict:
    return {
        "format": "qdarwin.model",
        "version": FORMAT_VERSION,
        "seed": model.rng_seed,
        "d": model.d,
        "amplitudes": [_c(a) for a in model.amplitudes],
        "system_spin": _matrix_to_list(model.system_spin.matrix),
        "interaction_order": list(model.interaction_order),
        "ensubs": [
            {
                "home_site": e.home_site,
                "discarded": e.discarded,
                "theta": e.coupling.theta,
                "sys_obs": list(e.coupling.sys_obs.bloch),
                "env_obs": list(e.coupling.env_obs.bloch),
                "initial_spin": _matrix_to_list(e.initial_spin.matrix),
            }
            for e in model.ensubs
        ],
    }


def model_from_dict(data: dict) -> DarwinModel:
    if data.get("format") != "qdarwin.model":
        raise ValueError("not a qdarwin model document")
    if data.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {data.get('version')}")
    ensubs = []
    for item in data["ensubs"]:
        theta = float(item["theta"])
        if canonical_theta(theta) != theta:
            raise ValueError(f"theta {theta} is not in canonical range")
        coupling = CouplingSpec(theta, SpinObservable(tuple(item["sys_obs"])), SpinObservable(tuple(item["env_obs"])))
        spin = DensityOperator((2,), _matrix_from_list(item["initial_spin"]))
        ensubs.append(EnSub(int(item["home_site"]), spin, coupling, bool(item["discarded"])))
    amps = np.array([complex(re, im) for re, im in data["amplitudes"]])
    model = DarwinModel(
        int(data["d"]),
        amps,
        DensityOperator((2,), _matrix_from_list(data["system_spin"])),
        tuple(ensubs),
        rng_seed=data.get("seed"),
    )
    if "interaction_order" in data and tuple(data["interaction_order"]) != model.interaction_order:
        raise ValueError("stored interaction order does not match the roster")
    return model


def dumps_model(model: DarwinModel) -> str:
    """JSON text; floats are written with round-trip precision."""
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True)


def loads_model(text: str) -> DarwinModel:
    return model_from_dict(json.loads(text))
