"""Local-density reconstruction, candidate search, the full learning
pipeline, the likelihood baseline, and the covering-net planners.

Oracle policy: the heterodyne inversion kernel is checked against its
closed form for the (0,0) element, against scipy.integrate.quad for the
general radial integral, and against the truncated-inversion law for the
vacuum diagonal (E[rho_kk] = int_0^{R^2} e^{-t} L_k(t) dt, R = u_max/2),
all derived independently of the implementation's quadrature. Statistical
assertions run at fixed seeds with margins set from pilot runs, so the
suite is deterministic. Planner values were frozen from a 50-digit mpmath
evaluation of the closed forms.
"""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial.laguerre import lagval
from scipy.integrate import quad
from scipy.linalg import expm
from scipy.special import eval_genlaguerre, gammaln, jv

from ge_lab.errors import (
    CandidateExplosionError,
    EstimationAbortError,
    GridResolutionError,
    StructuralError,
)
from ge_lab import fock as fk
from ge_lab import tomography as tg
from ge_lab.sampling import estimate_moments, sample_heterodyne
from ge_lab.symplectic import (
    GaussianUnitarySpec,
    passive_unitary_to_symplectic,
    random_symplectic,
    symplectic_form,
    williamson,
)


def beam_splitter_ket(n, theta=math.pi / 4, cutoff=6):
    u = np.array([[math.cos(theta), math.sin(theta)],
                  [-math.sin(theta), math.cos(theta)]])
    spec = GaussianUnitarySpec(passive_unitary_to_symplectic(u), np.zeros(4))
    return fk.apply_gaussian(fk.make_state("number", {"n": n}, (cutoff, cutoff)),
                             spec), u


def vacuum_diag_oracle(k, u_max):
    # truncated inversion law for the vacuum diagonal at radial cutoff R
    R2 = (u_max / 2.0) ** 2
    c = np.zeros(k + 1)
    c[k] = 1.0
    val, err = quad(lambda t: math.exp(-t) * lagval(t, c), 0.0, R2)
    assert err < 1e-12
    return val


class TestKernelOracle:
    def test_closed_form_00(self):
        # f00(s) = R J1(2 s R)/s, f00(0) = R^2
        u_max = 6.0
        R = u_max / 2.0
        s_grid, tables = tg._kernel_tables(4, u_max, 200, 4.0)
        f00 = tables[0][0]
        exact = np.where(s_grid > 0,
                         R * jv(1, 2 * s_grid * R) / np.where(s_grid > 0, s_grid, 1.0),
                         R * R)
        assert np.max(np.abs(f00 - exact)) < 1e-10

    def test_radial_integral_vs_quad(self):
        # independent adaptive quadrature of the same radial integral
        u_max = 5.0
        R = u_max / 2.0
        s_grid, tables = tg._kernel_tables(3, u_max, 200, 3.0)
        for (k, kp) in [(1, 0), (2, 1), (3, 0), (3, 3)]:
            d = k - kp
            coeff = 2.0 * math.exp(0.5 * (gammaln(kp + 1) - gammaln(k + 1)))
            for s_near in (0.3, 1.1, 2.4):
                i = int(np.argmin(np.abs(s_grid - s_near)))
                s = float(s_grid[i])
                ref = coeff * quad(
                    lambda v: v ** (d + 1) * eval_genlaguerre(kp, d, v * v)
                    * jv(d, 2 * s * v), 0.0, R, limit=200)[0]
                assert abs(tables[k][kp][i] - ref) < 5e-8, (k, kp, s)

    def test_vacuum_diagonal_matches_truncated_inversion(self):
        # large-M heterodyne average converges to the analytic truncated value
        u_max = 5.0
        vac = fk.make_state("vacuum", {"modes": 1}, (4,))
        samples = sample_heterodyne(vac, 2_000_000, 17)
        rho = tg._raw_local_estimate(samples, np.eye(1, dtype=complex), (0,),
                                     2, u_max, 200)
        for k in range(3):
            want = vacuum_diag_oracle(k, u_max)
            assert abs(float(rho[k, k].real) - want) < 6e-3, k

    def test_bias_proxy(self):
        assert tg.kernel_bias_proxy(6.0) == pytest.approx(math.exp(-9.0))
        assert tg.kernel_bias_proxy(2.0) == pytest.approx(math.exp(-1.0))

    def test_kernel_overflow_refused(self):
        vac = fk.make_state("vacuum", {"modes": 1}, (10,))
        samples = sample_heterodyne(vac, 100, 1)
        with pytest.raises(GridResolutionError):
            tg.reconstruct_local_density(samples, np.eye(1, dtype=complex),
                                         (0,), 8, u_max=30.0)

    def test_hermitian_pairing(self):
        # the k < k' entry is the conjugate of its transpose partner
        coh = fk.make_state("coherent", {"alpha": (0.4 + 0.2j,)}, (8,))
        samples = sample_heterodyne(coh, 30_000, 5)
        raw = tg._raw_local_estimate(samples, np.eye(1, dtype=complex), (0,),
                                     3, 6.0, 200)
        assert np.max(np.abs(raw - raw.conj().T)) < 1e-12


class TestReconstructLocalDensity:
    def test_vacuum_example(self):
        vac = fk.make_state("vacuum", {"modes": 1}, (6,))
        samples = sample_heterodyne(vac, 100_000, 4)
        rho = tg.reconstruct_local_density(samples, np.eye(1, dtype=complex),
                                           (0,), 3, u_max=5.0, bias_tol=2e-3)
        assert float(rho.rho[0, 0].real) >= 0.95
        assert rho.rho.shape == (4, 4)

    def test_coherent_example(self):
        alpha = 0.5
        coh = fk.make_state("coherent", {"alpha": (alpha,)}, (12,))
        samples = sample_heterodyne(coh, 200_000, 5)
        rho = tg.reconstruct_local_density(samples, np.eye(1, dtype=complex),
                                           (0,), 8, u_max=5.0, bias_tol=2e-3)
        target = fk.make_state("coherent", {"alpha": (alpha,)}, (9,))
        assert fk.trace_distance(rho, target) < 0.05

    def test_empty_samples_refused(self):
        vac = fk.make_state("vacuum", {"modes": 1}, (4,))
        samples = sample_heterodyne(vac, 10, 1)
        empty = type(samples)(shots=samples.shots[:0], seed=samples.seed,
                              state_id=samples.state_id)
        with pytest.raises(StructuralError):
            tg.reconstruct_local_density(empty, np.eye(1, dtype=complex), (0,), 2)

    def test_bias_gate(self):
        vac = fk.make_state("vacuum", {"modes": 1}, (4,))
        samples = sample_heterodyne(vac, 100, 1)
        with pytest.raises(GridResolutionError):
            tg.reconstruct_local_density(samples, np.eye(1, dtype=complex),
                                         (0,), 2, u_max=2.0)

    def test_rotation_must_be_unitary(self):
        vac = fk.make_state("vacuum", {"modes": 2}, (3, 3))
        samples = sample_heterodyne(vac, 50, 1)
        bad = np.array([[1.0, 0.2], [0.0, 1.0]], dtype=complex)
        with pytest.raises(StructuralError):
            tg.reconstruct_local_density(samples, bad, (0,), 1)

    def test_subset_validation(self):
        vac = fk.make_state("vacuum", {"modes": 2}, (3, 3))
        samples = sample_heterodyne(vac, 50, 1)
        eye = np.eye(2, dtype=complex)
        for subset in [(1, 0), (0, 0), (2,), ()]:
            with pytest.raises(StructuralError):
                tg.reconstruct_local_density(samples, eye, subset, 1)

    def test_data_rotation_convention(self):
        # undoing the beam splitter with u^dagger must expose |1> x |0>
        truth, u = beam_splitter_ket((1, 0))
        samples = sample_heterodyne(truth, 60_000, 9)
        rot = u.conj().T.astype(complex)
        r0 = tg.reconstruct_local_density(samples, rot, (0,), 2)
        r1 = tg.reconstruct_local_density(samples, rot, (1,), 2)
        assert float(r0.rho[1, 1].real) > 0.8
        assert float(r1.rho[0, 0].real) > 0.8

    def test_joint_two_mode_estimate(self):
        # product coherent state: the tensor kernel estimate factorizes.
        # Per-shot variance multiplies across modes, so the raw estimate is
        # checked entrywise and the clipped state only loosely.
        coh = fk.make_state("coherent", {"alpha": (0.5, -0.3j)}, (8, 8))
        samples = sample_heterodyne(coh, 400_000, 21)

        def window(alpha):
            amps = fk.make_state("coherent", {"alpha": (alpha,)}, (8,)).amps[:3]
            return np.outer(amps, amps.conj())

        block = np.kron(window(0.5), window(-0.3j))
        raw = tg._raw_local_estimate(samples, np.eye(2, dtype=complex),
                                     (0, 1), 2, 4.5, 200)
        assert float(np.abs(raw - block).max()) < 0.05
        rho = tg.reconstruct_local_density(samples, np.eye(2, dtype=complex),
                                           (0, 1), 2, u_max=4.5, bias_tol=7e-3)
        joint = fk.FockDensity((3, 3), block, 1.0 - float(np.trace(block).real))
        assert fk.trace_distance(rho, joint) < 0.2

    def test_bias_floor_two_decade_sweep(self):
        # error falls with M and settles under 2x the predicted kernel tail
        u_max = 5.0
        tail = max(abs(vacuum_diag_oracle(k, u_max) - (1.0 if k == 0 else 0.0))
                   for k in range(3))
        vac = fk.make_state("vacuum", {"modes": 1}, (4,))
        errs = []
        for M in (20_000, 200_000, 2_000_000):
            samples = sample_heterodyne(vac, M, 17)
            rho = tg.reconstruct_local_density(
                samples, np.eye(1, dtype=complex), (0,), 2,
                u_max=u_max, bias_tol=2e-3)
            errs.append(max(abs(float(rho.rho[k, k].real)
                                - (1.0 if k == 0 else 0.0)) for k in range(3)))
        assert errs[2] < errs[0]
        assert errs[2] < 2.0 * tail


class TestCounterRotate:
    def test_reexported_from_fock(self):
        assert tg.counter_rotate is fk.counter_rotate

    def test_exact_inverse(self):
        rng = np.random.default_rng(7)
        S = random_symplectic(2, rng, r_scale=0.3)
        ket = fk.make_state("number", {"n": (1, 0)}, (18, 18))
        moved = fk.apply_gaussian(ket, GaussianUnitarySpec(S=S, d=None))
        back = fk.counter_rotate(moved, np.zeros(4), np.linalg.inv(S))
        assert fk.fidelity(back, ket) >= 1.0 - 1e-8

    def test_tmsv_williamson_gives_vacuum(self):
        state = fk.make_state("tmsv", {"r": 0.6}, (22, 22))
        mom = fk.moments(state)
        dec = williamson(mom.cov)
        back = fk.counter_rotate(state, mom.mean, dec.S, leak_budget=1e-4)
        vac = fk.make_state("vacuum", {"modes": 2}, back.cutoffs)
        assert fk.fidelity(back, vac) >= 1.0 - 1e-6

    def test_perturbed_inverse_leaves_small_entanglement(self):
        rng = np.random.default_rng(7)
        S = random_symplectic(2, rng, r_scale=0.3)
        ket = fk.make_state("number", {"n": (1, 0)}, (18, 18))
        moved = fk.apply_gaussian(ket, GaussianUnitarySpec(S=S, d=None))
        # near-identity symplectic: flow of a small quadratic Hamiltonian
        H = np.random.default_rng(8).normal(size=(4, 4))
        H = (H + H.T) / 2.0
        om = symplectic_form(2)
        t = 0.05 / np.abs(S @ om @ H).max()
        S_pert = S @ expm(om @ (t * H))
        assert abs(np.abs(S_pert - S).max() - 0.05) < 0.01
        back = fk.counter_rotate(moved, np.zeros(4), np.linalg.inv(S_pert),
                                 leak_budget=1e-4)
        ent = fk.entanglement_entropy(back, [0])
        assert 0.0 < ent < 0.2


class TestWitness:
    def test_all_ones(self):
        assert tg.fidelity_witness([1.0, 1.0, 1.0]) == pytest.approx(1.0)

    def test_arithmetic_example(self):
        W = tg.fidelity_witness((0.9, 0.8))
        lo, up = tg.witness_bounds(W, (0.9, 0.8))
        assert W == pytest.approx(0.7)
        assert lo == pytest.approx(0.7)
        assert up == pytest.approx(0.85)

    def test_out_of_range_refused(self):
        with pytest.raises(StructuralError):
            tg.fidelity_witness([0.5, 1.2])
        with pytest.raises(StructuralError):
            tg.fidelity_witness([-0.1])
        with pytest.raises(StructuralError):
            tg.witness_bounds(0.4, ())

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6))
    def test_w_below_mean_property(self, fids):
        W = tg.fidelity_witness(fids)
        lo, up = tg.witness_bounds(W, fids)
        assert lo <= up + 1e-12
        assert W <= min(fids) + 1e-12

    def test_fock_grounded_inequality(self):
        # passive-separable truth vs perturbed product hypothesis:
        # W <= global F <= mean local F, with everything computed in Fock space
        rng = np.random.default_rng(12)
        for _ in range(25):
            locals_true, locals_hyp = [], []
            for _ in range(2):
                a = rng.normal(size=3) + 1j * rng.normal(size=3)
                a /= np.linalg.norm(a)
                b = a + 0.25 * (rng.normal(size=3) + 1j * rng.normal(size=3))
                b /= np.linalg.norm(b)
                locals_true.append(a)
                locals_hyp.append(b)
            u = np.linalg.qr(rng.normal(size=(2, 2))
                             + 1j * rng.normal(size=(2, 2)))[0]
            spec = GaussianUnitarySpec(passive_unitary_to_symplectic(u),
                                       np.zeros(4))
            pad = np.zeros(8, dtype=complex)
            truth = fk.apply_gaussian(
                fk.FockKet((8, 8), np.outer(
                    np.concatenate([locals_true[0], pad[:5]]),
                    np.concatenate([locals_true[1], pad[:5]])), 0.0),
                spec)
            hyp = fk.apply_gaussian(
                fk.FockKet((8, 8), np.outer(
                    np.concatenate([locals_hyp[0], pad[:5]]),
                    np.concatenate([locals_hyp[1], pad[:5]])), 0.0),
                spec)
            fids = [abs(np.vdot(locals_hyp[j], locals_true[j])) ** 2
                    for j in range(2)]
            W = tg.fidelity_witness(fids)
            F_global = fk.fidelity(hyp, truth)
            assert W <= F_global + 1e-9
            assert F_global <= float(np.mean(fids)) + 1e-9


def lattice_oracle(dim, amp_step):
    """Plain-loop re-enumeration of the local amplitude lattice."""
    reach = int(math.floor(1.0 / amp_step))
    pts = [amp_step * t for t in range(-reach, reach + 1)]
    seen = {}
    for combo in itertools.product(pts, repeat=2 * dim):
        vec = np.array([combo[2 * i] + 1j * combo[2 * i + 1]
                        for i in range(dim)])
        n2 = float(np.vdot(vec, vec).real)
        if not (0.25 <= n2 <= 1.0 + 1e-6):
            continue
        mags = np.abs(vec)
        first = int((mags > 1e-12).argmax())
        lead = vec[first]
        if abs(lead.imag) > 1e-12 or lead.real <= 0:
            continue
        vec = vec / math.sqrt(n2)
        key = tuple(np.round(
            np.column_stack([vec.real, vec.imag]).reshape(-1), 6))
        seen[key] = vec
    return sorted(seen.values(),
                  key=lambda v: tuple(np.column_stack(
                      [v.real, v.imag]).reshape(-1)))


class TestCandidateNet:
    def test_lattice_matches_bruteforce(self):
        for dim, step in [(1, 0.5), (2, 1.0), (2, 0.5)]:
            mine = tg._local_net_vectors(dim, step)
            ref = lattice_oracle(dim, step)
            assert len(mine) == len(ref), (dim, step)
            for a, b in zip(mine, ref):
                assert np.allclose(a, b, atol=1e-9), (dim, step)

    def test_single_mode_k0_is_vacuum_only(self):
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.5, cutoff=0,
                           target_eps=0.3)
        cands = list(tg.enumerate_candidates(1, ((0,),), cfg))
        assert len(cands) == 1
        U, choice = cands[0]
        assert np.allclose(U, np.eye(1))
        assert len(choice) == 1
        assert np.allclose(choice[0], [1.0])

    def test_two_mode_stream_count(self):
        # independent count: locals 10 per 2-dim block, passive grid by ceil
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.5, cutoff=1,
                           target_eps=0.3)
        stream = list(tg.enumerate_candidates(2, ((0,), (1,)), cfg))
        n_loc = len(lattice_oracle(2, 0.5))
        assert n_loc == 10
        n_theta = math.ceil((math.pi / 2) / 0.5)
        n_phi = math.ceil((2 * math.pi) / 0.5)
        assert len(stream) == n_theta * n_phi * n_loc ** 2

    def test_angle_halving_quadruples_rotations(self):
        coarse = tg._passive_count(2, 0.4)
        fine = tg._passive_count(2, 0.2)
        assert fine == 4 * coarse

    def test_stream_is_deterministic(self):
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.7, cutoff=1,
                           target_eps=0.3)
        a = itertools.islice(tg.enumerate_candidates(2, ((0,), (1,)), cfg), 40)
        b = itertools.islice(tg.enumerate_candidates(2, ((0,), (1,)), cfg), 40)
        for (Ua, ca), (Ub, cb) in zip(a, b):
            assert len(ca) == len(cb)
            for va, vb in zip(ca, cb):
                assert np.array_equal(va, vb)
            assert np.array_equal(Ua, Ub)

    def test_phase_fix_and_norm(self):
        for vec in tg._local_net_vectors(2, 0.5):
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-9
            lead = vec[(np.abs(vec) > 1e-12).argmax()]
            assert abs(lead.imag) < 1e-12 and lead.real > 0

    def test_stream_cap_refused(self):
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.05, cutoff=2,
                           target_eps=0.1)
        with pytest.raises(CandidateExplosionError) as e:
            tg.enumerate_candidates(2, ((0,), (1,)), cfg)
        assert "2^" in str(e.value)

    def test_lattice_cap_refused(self):
        cfg = tg.NetConfig(amp_step=0.1, angle_step=0.5, cutoff=3,
                           target_eps=0.1)
        with pytest.raises(CandidateExplosionError):
            tg.enumerate_candidates(1, ((0,),), cfg)

    def test_partition_validation(self):
        cfg = tg.NetConfig(amp_step=1.0, angle_step=1.0, cutoff=0,
                           target_eps=0.3)
        for part in [((0,), (0,)), ((0,),), ((0, 2), (1,))]:
            with pytest.raises(StructuralError):
                tg.enumerate_candidates(2, part, cfg)
        with pytest.raises(StructuralError):
            tg.enumerate_candidates(5, tuple((j,) for j in range(5)), cfg)


class TestNetConfig:
    def test_field_ranges(self):
        with pytest.raises(StructuralError):
            tg.NetConfig(amp_step=0.0, angle_step=0.5, cutoff=1, target_eps=0.3)
        with pytest.raises(StructuralError):
            tg.NetConfig(amp_step=0.5, angle_step=1.5, cutoff=1, target_eps=0.3)
        with pytest.raises(StructuralError):
            tg.NetConfig(amp_step=0.5, angle_step=0.5, cutoff=-1, target_eps=0.3)
        with pytest.raises(StructuralError):
            tg.NetConfig(amp_step=0.5, angle_step=0.5, cutoff=1, target_eps=0.3,
                         shift_step=0.0)

    def test_report_invariants(self):
        with pytest.raises(StructuralError):
            tg.TomographyReport(reconstructed=None, W=0.99, fidelities=(0.9,),
                                copies={}, accepted=False, accept_eps=0.3,
                                seeds={}, wall_clock=0.0)
        with pytest.raises(StructuralError):
            tg.TomographyReport(reconstructed=None, W=0.5, fidelities=(0.6,),
                                copies={}, accepted=True, accept_eps=0.3,
                                seeds={}, wall_clock=0.0)
        with pytest.raises(StructuralError):
            tg.TomographyReport(reconstructed=None, W=None, fidelities=(1.2,),
                                copies={}, accepted=False, accept_eps=0.3,
                                seeds={}, wall_clock=0.0)


class TestLearnPassiveSeparable:
    def test_beam_splitter_example(self):
        truth, _ = beam_splitter_ket((1, 0))
        samples = sample_heterodyne(truth, 100_000, 8)
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.4, cutoff=1,
                           target_eps=0.3)
        rep = tg.learn_passive_separable(samples, ((0,), (1,)), cfg, 0.3)
        assert rep.accepted
        assert rep.W >= 1.0 - 0.3 ** 2
        hyp = rep.reconstructed.hypothesis_ket(cutoffs=(6, 6), leak_budget=None)
        assert fk.fidelity(hyp, truth) >= 0.9

    def test_noon3_never_accepted(self):
        noon = fk.make_state("noon", {"N": 3}, (6, 6))
        samples = sample_heterodyne(noon, 100_000, 11)
        cfg = tg.NetConfig(amp_step=1.0, angle_step=0.7, cutoff=3,
                           target_eps=0.15)
        rep = tg.learn_passive_separable(samples, ((0,), (1,)), cfg, 0.15)
        assert not rep.accepted
        assert rep.W <= 0.97

    def test_empty_samples_report(self):
        vac = fk.make_state("vacuum", {"modes": 2}, (3, 3))
        samples = sample_heterodyne(vac, 5, 1)
        empty = type(samples)(shots=samples.shots[:0], seed=samples.seed,
                              state_id=samples.state_id)
        cfg = tg.NetConfig(amp_step=1.0, angle_step=1.0, cutoff=0,
                           target_eps=0.3)
        rep = tg.learn_passive_separable(empty, ((0,), (1,)), cfg, 0.3)
        assert not rep.accepted
        assert rep.W is None
        assert "w_undefined" in rep.notes

    def test_threading_does_not_change_the_answer(self):
        truth, _ = beam_splitter_ket((1, 0))
        samples = sample_heterodyne(truth, 40_000, 8)
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.4, cutoff=1,
                           target_eps=0.3)
        seq = tg.learn_passive_separable(samples, ((0,), (1,)), cfg, 0.3,
                                         threads=1)
        par = tg.learn_passive_separable(samples, ((0,), (1,)), cfg, 0.3,
                                         threads=3)
        assert seq.accepted == par.accepted
        assert seq.notes["candidate_index"] == par.notes["candidate_index"]
        assert seq.W == pytest.approx(par.W, abs=1e-12)


class TestLearnGeState:
    def test_nondegenerate_ge_example(self):
        rng = np.random.default_rng(101)
        S = random_symplectic(2, rng, r_scale=0.3)
        d = rng.normal(0, 0.8, size=4)
        truth = fk.apply_gaussian(
            fk.make_state("number", {"n": (1, 0)}, (14, 14)),
            GaussianUnitarySpec(S=S, d=d), leak_budget=1e-4)
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.5, cutoff=4,
                           target_eps=0.3)
        rep = tg.learn_ge_state(truth, (30_000, 100_000), cfg, seed=2,
                                u_max=5.0, bias_tol=2e-3)
        assert rep.notes["gap"] > 0.05
        hyp = rep.reconstructed.hypothesis_ket(cutoffs=(14, 14),
                                               leak_budget=None)
        assert fk.fidelity(hyp, truth) >= 0.9
        assert rep.copies == {"M_v": 30_000, "M_ps": 100_000}
        assert rep.seeds["heterodyne"] == 3

    def test_tmsv_example(self):
        tmsv = fk.make_state("tmsv", {"r": 0.5}, (20, 20))
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.5, cutoff=1,
                           target_eps=0.25)
        rep = tg.learn_ge_state(tmsv, (30_000, 100_000), cfg, seed=3,
                                eps_v=0.2, u_max=5.0, bias_tol=2e-3)
        assert rep.accepted
        hyp = rep.reconstructed.hypothesis_ket(cutoffs=(20, 20),
                                               leak_budget=None)
        assert fk.fidelity(hyp, tmsv) >= 0.95
        # vacuum locals: every reconstructed mode is |0> up to noise
        for amps in rep.reconstructed.local_amps:
            assert abs(amps[0]) ** 2 > 0.9

    def test_energy_precondition(self):
        hot = fk.make_state("thermal", {"nbar": 2.0}, (45,))
        cfg = tg.NetConfig(amp_step=1.0, angle_step=1.0, cutoff=1,
                           target_eps=0.3)
        with pytest.raises(StructuralError):
            tg.learn_ge_state(hot, (1000, 1000), cfg, seed=1,
                              energy_budget=1.0)

    def test_moment_abort_propagates(self):
        tmsv = fk.make_state("tmsv", {"r": 0.5}, (20, 20))
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.5, cutoff=1,
                           target_eps=0.25)
        with pytest.raises(EstimationAbortError):
            tg.learn_ge_state(tmsv, (30_000, 100_000), cfg, seed=3,
                              eps_v=0.05, u_max=5.0, bias_tol=2e-3)

    def test_degenerate_branch_on_vacuum(self):
        # identity covariance: fully clustered spectrum, net search path
        vac = fk.make_state("vacuum", {"modes": 2}, (5, 5))
        cfg = tg.NetConfig(amp_step=0.5, angle_step=0.7, cutoff=1,
                           target_eps=0.3)
        rep = tg.learn_ge_state(vac, (20_000, 20_000), cfg, seed=5,
                                eps_v=0.1, u_max=5.0, bias_tol=2e-3)
        # moment noise splits the spectrum slightly; still under gap_tol
        assert rep.notes["gap"] <= 0.05
        assert "candidate_index" in rep.notes
        assert rep.accepted
        hyp = rep.reconstructed.hypothesis_ket(cutoffs=(5, 5),
                                               leak_budget=None)
        assert fk.fidelity(hyp, vac) >= 0.9


class TestRprMle:
    def test_vacuum_example(self):
        vac = fk.make_state("vacuum", {"modes": 1}, (6,))
        data = tg.generate_random_phase_homodyne(vac, 12, 20_000 // 12, 5)
        diag = {}
        rho = tg.rpr_mle(data, (6,), iterations=20, diagnostics=diag)
        assert float(rho.rho[0, 0].real) >= 0.95
        ll = diag["log_likelihood"]
        assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))

    def test_thermal_example(self):
        th = fk.make_state("thermal", {"nbar": 0.2}, (8,))
        data = tg.generate_random_phase_homodyne(th, 12, 50_000 // 12, 6)
        rho = tg.rpr_mle(data, (8,), iterations=20)
        assert fk.trace_distance(rho, th) < 0.1
        off = rho.rho - np.diag(np.diag(rho.rho))
        assert np.abs(off).max() < np.abs(np.diag(rho.rho)).max()

    def test_iterates_stay_physical(self):
        vac = fk.make_state("vacuum", {"modes": 1}, (4,))
        data = tg.generate_random_phase_homodyne(vac, 6, 500, 2)
        for k in (1, 2, 3, 5):
            rho = tg.rpr_mle(data, (4,), iterations=k)
            assert float(np.trace(rho.rho).real) == pytest.approx(1.0, abs=1e-10)
            assert np.linalg.eigvalsh(rho.rho).min() >= -1e-10

    def test_floored_bins_flagged(self):
        rng = np.random.default_rng(0)
        xs = rng.normal(0.0, 1.0, size=400)
        xs[0] = 12.0  # far outside any mass the truncated model can predict
        diag = {}
        tg.rpr_mle([((0.3,), xs)], (3,), iterations=3, diagnostics=diag)
        assert diag["floored_bins"] > 0

    def test_two_mode_joint_fit(self):
        bs = tg.beam_split_thermal_pair()
        data = tg.generate_random_phase_homodyne(bs, 16, 40_000 // 16, 7)
        rho = tg.rpr_mle(data, (10, 10), iterations=12)
        assert fk.trace_distance(rho, bs) < 0.12

    def test_input_validation(self):
        with pytest.raises(StructuralError):
            tg.rpr_mle([], (4,))
        vac = fk.make_state("vacuum", {"modes": 1}, (4,))
        data = tg.generate_random_phase_homodyne(vac, 2, 50, 2)
        with pytest.raises(StructuralError):
            tg.rpr_mle(data, (4,), iterations=0)
        with pytest.raises(StructuralError):
            tg.rpr_mle(data, (4, 4, 4))


class TestFig5Experiment:
    def test_smoke_row_structure(self):
        rows = tg.fig5_experiment([20_000], seeds=[0], iterations=8)
        assert len(rows) == 1
        row = rows[0]
        assert set(row) == {"M", "err_direct", "err_envelope", "seed"}
        assert row["err_direct"] > 0
        assert math.isfinite(row["err_envelope"])

    def test_tiny_budget_splits_drop_out(self):
        rows = tg.fig5_experiment([1_000], seeds=[0], iterations=6)
        assert math.isinf(rows[0]["err_envelope"])
        assert math.isfinite(rows[0]["err_direct"])

    def test_zero_correlation_sanity(self):
        rows = tg.fig5_experiment([10_000], seeds=[1], bs_theta=0.0,
                                  iterations=20)
        r = rows[0]
        assert math.isfinite(r["err_envelope"])
        ratio = r["err_direct"] / r["err_envelope"]
        assert 0.5 < ratio < 2.0


class TestNetLogSize:
    # frozen from a 50-digit mpmath evaluation of the closed forms
    CASES = [
        ((2, 2, 1, 1.5, 0.1),
         (5821019.6091530639, 2910509.804576532, 3462.4680981335118)),
        ((3, 4, 2, 2.0, 0.05),
         (6.1381626101431772e16, 1.5345406525357943e16, 93486.638649604818)),
        ((1, 1, 1, 4.0, 0.5), (1152.0, 1152.0, 23.083120654223415)),
    ]

    def test_frozen_triples(self):
        for args, (ps, po, ge) in self.CASES:
            out = tg.net_log_size(*args)
            assert out["passive_separable"] == pytest.approx(ps, rel=1e-12)
            assert out["passive_observables"] == pytest.approx(po, rel=1e-12)
            assert out["ge"] == pytest.approx(ge, rel=1e-12)

    def test_monotone_in_modes(self):
        vals = [tg.net_log_size(m, 2, 1, 2.0, 0.1)["ge"] for m in (1, 2, 4, 8)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_diverges_as_eps_shrinks(self):
        a = tg.net_log_size(2, 2, 1, 2.0, 1e-2)
        b = tg.net_log_size(2, 2, 1, 2.0, 1e-5)
        assert b["passive_separable"] > a["passive_separable"] * 100
        assert b["ge"] > a["ge"] * 100

    def test_rejects_degenerate_grid(self):
        with pytest.raises(StructuralError):
            tg.net_log_size(1, 1, 1, 1.0, 2.0)
        with pytest.raises(StructuralError):
            tg.net_log_size(0, 1, 1, 1.0, 0.1)
        with pytest.raises(StructuralError):
            tg.net_log_size(1, 1, 1, -1.0, 0.1)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 3), st.floats(0.3, 1.0))
def test_lattice_vectors_always_valid(k, amp_step):
    vecs = tg._local_net_vectors(k + 1, amp_step)
    assert len(vecs) >= 1
    for v in vecs:
        assert abs(np.linalg.norm(v) - 1.0) < 1e-9
