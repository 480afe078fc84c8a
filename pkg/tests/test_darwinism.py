import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import bloch_dm, dm_bloch, random_unit, ref_brute_force, ref_coupling_unitary, ref_partial_trace
from qdarwin.darwinism import (
    DarwinModel,
    EnSub,
    ModelConfig,
    PropositionInputs,
    bloch_norm_sq_law,
    bloch_update,
    branch_evolve_fast,
    brute_force_evolve,
    build_model,
    coherence_trajectory,
    discard,
    dumps_model,
    loads_model,
    offdiagonal_norm,
    omega_norm_law,
    omega_update_normsq,
)
from qdarwin.errors import ResourceCapError
from qdarwin.qmath import DensityOperator
from qdarwin.spin import CouplingSpec, SpinObservable

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def small_model(seed, d=2, per_site=3, system_bloch=(0.0, 0.0, 0.0), discard_fraction=0.0):
    return build_model(ModelConfig(d=d, per_site=per_site, system_bloch=system_bloch,
                                   discard_fraction=discard_fraction, seed=seed))


def random_inputs(rng):
    r = random_unit(rng) * rng.uniform() ** (1 / 3)
    b = random_unit(rng) * rng.uniform() ** (1 / 3)
    s, e = random_unit(rng), random_unit(rng)
    theta = rng.uniform(-math.pi, math.pi)
    return r, b, s, e, theta


def step_oracle(r, b, s, e, theta):
    u = ref_coupling_unitary(theta, s, e)
    joint = u @ np.kron(bloch_dm(r), bloch_dm(b)) @ u.conj().T
    return dm_bloch(ref_partial_trace(joint, (2, 2), [0]))


class TestModel:
    def test_counts_and_discards(self):
        m = build_model(ModelConfig(d=3, per_site=(4, 8, 0), discard_fraction=0.25, seed=1))
        assert m.n_ensubs == 12
        assert [len(m.members(i)) for i in range(3)] == [4, 8, 0]
        assert [len(m.members(i, accessible_only=True)) for i in range(3)] == [3, 6, 0]
        # discarded ones are the first to interact at each site
        for i in range(3):
            flags = [m.ensubs[j].discarded for j in m.members(i)]
            assert flags == sorted(flags, reverse=True)

    def test_seeded_determinism(self):
        assert dumps_model(build_model(seed=4, per_site=5)) == dumps_model(build_model(seed=4, per_site=5))
        assert dumps_model(build_model(seed=4, per_site=5)) != dumps_model(build_model(seed=5, per_site=5))

    def test_parameter_ranges(self):
        m = build_model(ModelConfig(per_site=50, seed=2))
        for e in m.ensubs:
            assert 0.3 <= e.coupling.theta <= math.pi - 0.3
            assert np.linalg.norm(e.initial_spin.bloch()) <= 0.9 + 1e-12

    def test_validation(self):
        for bad in (dict(d=1), dict(discard_fraction=1.5), dict(max_bloch=2.0), dict(seed=-1),
                    dict(theta_range=(1.0, 0.0)), dict(d=2, per_site=(1, 2, 3))):
            with pytest.raises(ValueError):
                build_model(**bad)
        with pytest.raises(ValueError):
            DarwinModel(2, np.array([1.0, 1.0]), DensityOperator.maximally_mixed((2,)), ())

    def test_null_coupling_warns(self):
        with pytest.warns(UserWarning, match="null coupling"):
            build_model(ModelConfig(per_site=1, theta_range=(0.0, 0.0), seed=0))

    def test_roundtrip(self):
        m = build_model(ModelConfig(d=3, per_site=4, seed=8, amplitudes=(0.6, 0.0, 0.8)))
        text = dumps_model(m)
        back = loads_model(text)
        assert dumps_model(back) == text
        assert np.array_equal(back.amplitudes, m.amplitudes)
        for a, b in zip(m.ensubs, back.ensubs):
            assert np.array_equal(a.initial_spin.matrix, b.initial_spin.matrix)
            assert a.coupling.theta == b.coupling.theta

    def test_load_rejects_foreign_document(self):
        with pytest.raises(ValueError):
            loads_model('{"format": "other"}')


class TestStepLaws:
    @settings(max_examples=200, deadline=None)
    @given(seeds)
    def test_bloch_update_matches_two_qubit_oracle(self, seed):
        r, b, s, e, theta = random_inputs(np.random.default_rng(seed))
        inp = PropositionInputs(tuple(r), SpinObservable(tuple(s)), theta, float(np.dot(e, b)))
        assert np.allclose(bloch_update(inp), step_oracle(r, b, s, e, theta), atol=1e-12, rtol=0)

    @settings(max_examples=200, deadline=None)
    @given(seeds)
    def test_bloch_norm_law(self, seed):
        r, b, s, e, theta = random_inputs(np.random.default_rng(seed))
        inp = PropositionInputs(tuple(r), SpinObservable(tuple(s)), theta, float(np.dot(e, b)))
        exact = step_oracle(r, b, s, e, theta)
        assert bloch_norm_sq_law(inp) == pytest.approx(float(exact @ exact), abs=1e-12)
        # the norm never grows for a product initial state
        assert bloch_norm_sq_law(inp) <= float(r @ r) + 1e-15

    def test_bloch_update_degenerate_cases(self):
        s = SpinObservable((0.0, 0.0, 1.0))
        assert np.allclose(bloch_update(PropositionInputs((0, 0, 0), s, 1.0, 0.3)), 0)
        # r parallel to the coupled observable is untouched
        assert np.allclose(bloch_update(PropositionInputs((0, 0, 0.7), s, 1.0, 0.3)), (0, 0, 0.7))

    @settings(max_examples=200, deadline=None)
    @given(seeds)
    def test_omega_update_matches_direct_arithmetic(self, seed):
        rng = np.random.default_rng(seed)
        _, b, s, e, theta = random_inputs(rng)
        c = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        u = ref_coupling_unitary(theta, s, e)
        direct = ref_partial_trace(u @ np.kron(c, bloch_dm(b)), (2, 2), [0])
        got, normsq = omega_update_normsq(c, theta, float(np.dot(e, b)), SpinObservable(tuple(s)))
        assert np.allclose(got, direct, atol=1e-12, rtol=0)
        law = omega_norm_law(float(np.sum(np.abs(c) ** 2)), theta, float(np.dot(e, b)))
        assert law == pytest.approx(normsq, abs=1e-11)


class TestBruteForce:
    @pytest.mark.parametrize("seed,d,per_site", [(0, 2, 2), (1, 2, 3), (2, 3, 1), (3, 3, (2, 0, 1))])
    def test_matches_reference_engine(self, seed, d, per_site):
        m = small_model(seed, d=d, per_site=per_site, system_bloch=(0.2, -0.3, 0.5))
        got = brute_force_evolve(m)
        assert np.allclose(got.matrix, ref_brute_force(m), atol=1e-12)
        assert got.dims == (d,) + (2,) * (m.n_ensubs + 1)

    def test_cap(self):
        m = small_model(0, per_site=4)
        with pytest.raises(ResourceCapError, match="cap-dim 256"):
            brute_force_evolve(m, cap_dim=256)

    def test_branch_probabilities_conserved(self):
        m = build_model(ModelConfig(per_site=3, amplitudes=(math.sqrt(0.3), math.sqrt(0.7)), seed=3))
        rho = brute_force_evolve(m)
        probs = np.real(np.diag(ref_partial_trace(rho.matrix, rho.dims, [0])))
        assert np.allclose(probs, [0.3, 0.7], atol=1e-13)


class TestFastEngine:
    @settings(max_examples=25, deadline=None)
    @given(seeds, st.sampled_from([2, 3]))
    def test_marginals_exact_for_mixed_system(self, seed, d):
        m = small_model(seed, d=d, per_site=2)
        ens = branch_evolve_fast(m)
        rho = brute_force_evolve(m)
        for p, j in enumerate(ens.ensub_ids):
            fast = sum(ens.branch_probs[i] * ens.states_in_branch(i)[p] for i in range(d))
            exact = ref_partial_trace(rho.matrix, rho.dims, [2 + j])
            assert np.allclose(fast, exact, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seeds)
    def test_branch_conditional_states(self, seed):
        m = small_model(seed, per_site=3, system_bloch=tuple(0.8 * random_unit(np.random.default_rng(seed))))
        ens = branch_evolve_fast(m, bloch_correction=True)
        rho = brute_force_evolve(m).matrix.reshape(2, 2**7, 2, 2**7)
        for i in range(2):
            block = rho[i, :, i, :] / ens.branch_probs[i]
            spin = ref_partial_trace(block, (2,) * 7, [0])
            assert np.allclose(spin, ens.system_spin_branch[i], atol=1e-12)
            for p, j in enumerate(ens.ensub_ids):
                exact = ref_partial_trace(block, (2,) * 7, [1 + j])
                assert np.allclose(ens.states_in_branch(i)[p], exact, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seeds)
    def test_uncorrected_error_bound(self, seed):
        m = small_model(seed, per_site=3, system_bloch=(0.0, 0.6, 0.6))
        ens = branch_evolve_fast(m)
        rho = brute_force_evolve(m).matrix.reshape(2, 2**7, 2, 2**7)
        for p, j in enumerate(ens.ensub_ids):
            h = ens.home_sites[p]
            exact = ref_partial_trace(rho[h, :, h, :] / ens.branch_probs[h], (2,) * 7, [1 + j])
            err = np.linalg.svd(exact - ens.perturbed_states[p], compute_uv=False).sum()
            assert err <= ens.error_bounds[p] + 1e-12

    def test_no_coupling_no_record(self):
        with pytest.warns(UserWarning):
            m = build_model(ModelConfig(per_site=3, theta_range=(math.pi, math.pi), seed=0))
        ens = branch_evolve_fast(m)
        for a, b in zip(ens.initial_states, ens.perturbed_states):
            assert np.allclose(a, b, atol=1e-15)

    def test_assemble_matches_brute_force_diagonal_blocks(self):
        # one en-sub per site and the system spin traced: diagonal blocks are exact products
        m = small_model(2, per_site=1)
        ens = discard(branch_evolve_fast(m), [], trace_system_spin=True)
        rho = discard(brute_force_evolve(m), [], trace_system_spin=True).matrix.reshape(2, 4, 2, 4)
        dense = ens.assemble().matrix.reshape(2, 4, 2, 4)
        for i in range(2):
            assert np.allclose(dense[i, :, i, :], rho[i, :, i, :], atol=1e-12)


class TestCoherence:
    @settings(max_examples=20, deadline=None)
    @given(seeds, st.sampled_from(["fro", "trace"]), st.sampled_from([(2, 1.0), (3, 0.5)]))
    def test_trajectory_follows_decay_law(self, seed, norm, shape):
        d, frac = shape
        m = small_model(seed, d=d, per_site=2, discard_fraction=frac, system_bloch=(0.3, 0.1, -0.4))
        for step in coherence_trajectory(m, (0, 1), norm=norm):
            assert step.ratio == pytest.approx(step.law_factor, abs=1e-9)

    def test_kept_ensubs_do_not_change_norm(self):
        m = small_model(4, per_site=3, discard_fraction=0.0)
        for step in coherence_trajectory(m, (0, 1)):
            assert step.ratio == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seeds, st.sampled_from([2, 3]))
    def test_discarded_ensemble_tracks_exact_blocks(self, seed, d):
        m = small_model(seed, d=d, per_site=2, discard_fraction=0.5, system_bloch=(0.2, 0.2, 0.2))
        ens = discard(branch_evolve_fast(m), m.discard_flags)
        rho = discard(brute_force_evolve(m), m.discard_flags)
        for k in range(d):
            for l in range(d):
                if k == l:
                    continue
                exact_fro = offdiagonal_norm(rho, (k, l), "fro")
                exact_tr = offdiagonal_norm(rho, (k, l), "trace")
                assert ens.offdiag_norm[k, l] == pytest.approx(exact_fro, abs=1e-10)
                assert exact_tr <= ens.coherence[k, l] + 1e-10

    def test_trace_norm_exact_when_nothing_kept(self):
        m = small_model(7, per_site=3, discard_fraction=1.0)
        ens = discard(branch_evolve_fast(m), m.discard_flags)
        rho = discard(brute_force_evolve(m), m.discard_flags)
        assert offdiagonal_norm(rho, (0, 1), "trace") == pytest.approx(ens.coherence[0, 1], abs=1e-12)

    def test_spin_traced_frobenius_is_upper_bound(self):
        m = small_model(3, per_site=2, discard_fraction=0.5)
        ens = discard(branch_evolve_fast(m), m.discard_flags, trace_system_spin=True)
        rho = discard(brute_force_evolve(m), m.discard_flags, trace_system_spin=True)
        assert offdiagonal_norm(rho, (0, 1)) <= ens.offdiag_norm[0, 1] + 1e-12

    def test_offdiagonal_norm_rejects_diagonal(self):
        rho = brute_force_evolve(small_model(0, per_site=1))
        with pytest.raises(ValueError):
            offdiagonal_norm(rho, (1, 1))

    def test_discard_per_ensub_marginals(self):
        m = small_model(11, per_site=3, discard_fraction=0.34)
        ens = discard(branch_evolve_fast(m), m.discard_flags)
        rho = discard(brute_force_evolve(m), m.discard_flags)
        assert len(ens.ensub_ids) == len(rho.dims) - 2
        for p in range(len(ens.ensub_ids)):
            fast = sum(ens.branch_probs[i] * ens.states_in_branch(i)[p] for i in range(2))
            assert np.allclose(fast, ref_partial_trace(rho.matrix, rho.dims, [2 + p]), atol=1e-10)

    def test_discard_rejects_unknown(self):
        m = small_model(0, per_site=1)
        with pytest.raises(ValueError):
            discard(branch_evolve_fast(m), [9])


def test_single_ensub_factor_value():
    rho_e = DensityOperator.from_bloch((0.0, 0.0, 0.6))
    e = EnSub(0, rho_e, CouplingSpec(0.5, SpinObservable((1, 0, 0)), SpinObservable((0, 0, 1))))
    assert e.env_expect == pytest.approx(0.6)
    assert e.coherence_factor == pytest.approx(math.sqrt(1 - 0.64 * math.sin(0.5) ** 2))
