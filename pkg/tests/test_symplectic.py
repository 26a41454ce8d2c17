import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_valid_cov
from ge_lab import symplectic as sp
from ge_lab.errors import ConditioningError, PhysicalityError, StructuralError


def two_mode_squeezer_symplectic(r):
    c, s = math.cosh(r), math.sinh(r)
    Z = np.diag([1.0, -1.0])
    top = np.hstack([c * np.eye(2), s * Z])
    bot = np.hstack([s * Z, c * np.eye(2)])
    return np.vstack([top, bot])


def tmsv_cov(r):
    S = two_mode_squeezer_symplectic(r)
    return S @ S.T


def williamson_eig_route(V):
    """Independent Williamson routine: plain eig of the non-symmetric i Omega V."""
    V = np.asarray(V, dtype=float)
    m = V.shape[0] // 2
    om = sp.symplectic_form(m)
    iom = 1j * om
    evals, evecs = np.linalg.eig(iom @ V)
    sel = np.argsort(-evals.real)[:m]
    lambdas = evals.real[sel]
    W = evecs[:, sel].astype(complex)
    for j in range(m):
        n = float(np.real(W[:, j].conj() @ iom @ W[:, j]))
        if n < 0:
            W[:, j] = W[:, j].conj()
            n = -n
        W[:, j] /= math.sqrt(n)
    # fix residual freedom inside degenerate groups (Loewdin in the iOmega form)
    groups, cur = [], [0]
    for i in range(1, m):
        if abs(lambdas[i] - lambdas[cur[-1]]) < 1e-7:
            cur.append(i)
        else:
            groups.append(cur)
            cur = [i]
    groups.append(cur)
    for grp in groups:
        if len(grp) > 1:
            B = W[:, grp]
            G = B.conj().T @ iom @ B
            G = (G + G.conj().T) / 2
            ge, gv = np.linalg.eigh(G)
            W[:, grp] = B @ ((gv / np.sqrt(ge)) @ gv.conj().T)
    T = np.empty((2 * m, 2 * m))
    T[:, 0::2] = math.sqrt(2.0) * np.real(W)
    T[:, 1::2] = -math.sqrt(2.0) * np.imag(W)
    return T.T, lambdas


class TestSymplecticForm:
    def test_m1(self):
        assert np.array_equal(sp.symplectic_form(1), np.array([[0.0, 1.0], [-1.0, 0.0]]))

    def test_m2_blocks(self):
        om = sp.symplectic_form(2)
        assert np.array_equal(om[:2, :2], sp.symplectic_form(1))
        assert np.array_equal(om[2:, 2:], sp.symplectic_form(1))
        assert np.all(om[:2, 2:] == 0) and np.all(om[2:, :2] == 0)

    def test_orthogonality_m3(self):
        om = sp.symplectic_form(3)
        assert np.allclose(om @ om.T, np.eye(6))

    @given(st.integers(min_value=1, max_value=8))
    @settings(max_examples=8, deadline=None)
    def test_squares_to_minus_identity(self, m):
        om = sp.symplectic_form(m)
        assert np.allclose(om @ om, -np.eye(2 * m))
        assert np.allclose(om, -om.T)

    def test_rejects_zero(self):
        with pytest.raises(StructuralError):
            sp.symplectic_form(0)


class TestValidateCovariance:
    def test_vacuum_valid(self):
        v = sp.validate_covariance(sp.CovarianceData(mean=np.zeros(2), cov=np.eye(2)))
        assert v.valid

    def test_sub_vacuum_invalid(self):
        v = sp.validate_covariance(0.5 * np.eye(2))
        assert not v.valid
        assert v.offending_eigenvalue == pytest.approx(-0.5, abs=1e-9)

    def test_tmsv_half_valid(self):
        V = tmsv_cov(0.5)
        assert np.allclose(V[:2, :2], math.cosh(1.0) * np.eye(2))
        assert np.allclose(V[:2, 2:], math.sinh(1.0) * np.diag([1.0, -1.0]))
        assert sp.validate_covariance(V).valid
        lam = sp.symplectic_eigenvalues(V)
        assert np.allclose(lam, [1.0, 1.0], atol=1e-9)

    def test_odd_dimension_structural(self):
        with pytest.raises(StructuralError):
            sp.validate_covariance(np.eye(3))

    def test_asymmetry_structural(self):
        V = np.eye(2)
        V[0, 1] = 1e-6
        with pytest.raises(StructuralError):
            sp.validate_covariance(V)


class TestWilliamson:
    def test_vacuum(self):
        dec = sp.williamson(np.eye(4))
        assert np.allclose(dec.lambdas, 1.0, atol=1e-10)
        assert sp.check_orthogonal_symplectic(dec.S, tol=1e-8)

    def test_diagonal_already_williamson(self):
        V = np.diag([3.0, 3.0, 5.0, 5.0])
        dec = sp.williamson(V)
        assert np.allclose(dec.lambdas, [5.0, 3.0], atol=1e-10)
        D = dec.S @ V @ dec.S.T
        assert np.allclose(D, np.diag([5.0, 5.0, 3.0, 3.0]), atol=1e-8)
        # S is the mode swap composed with identity blocks
        perm = np.zeros((4, 4))
        perm[0, 2] = perm[1, 3] = perm[2, 0] = perm[3, 1] = 1.0
        assert np.allclose(np.abs(dec.S), perm, atol=1e-8)

    def test_tmsv_degenerate(self):
        V = tmsv_cov(0.5)
        dec = sp.williamson(V)
        assert np.allclose(dec.lambdas, [1.0, 1.0], atol=1e-9)
        assert np.allclose(dec.S @ V @ dec.S.T, np.eye(4), atol=1e-8)
        # S^{-1} equals the preparing two-mode squeezer up to an orthogonal
        # symplectic factor (degenerate freedom)
        O = np.linalg.inv(two_mode_squeezer_symplectic(0.5)) @ np.linalg.inv(dec.S)
        assert sp.check_orthogonal_symplectic(O, tol=1e-7)
        assert dec.gap == math.inf

    def test_rejects_unphysical(self):
        with pytest.raises(PhysicalityError):
            sp.williamson(0.5 * np.eye(2))

    def test_conditioning_error(self):
        V = np.diag([1e13, 1e13, 1.0, 1.0])
        with pytest.raises(ConditioningError):
            sp.williamson(V)

    def test_property_suite_small(self, rng):
        for trial in range(200):
            m = int(rng.integers(1, 5))
            V = random_valid_cov(m, rng)
            dec = sp.williamson(V)
            D = np.diag(np.repeat(dec.lambdas, 2))
            assert np.max(np.abs(dec.S @ V @ dec.S.T - D)) < 1e-8
            assert np.all(dec.lambdas >= 1 - 1e-10)
            assert sp.check_symplectic(dec.S, tol=1e-9)

    def test_conjugation_invariance(self, rng):
        for trial in range(50):
            m = int(rng.integers(1, 5))
            V = random_valid_cov(m, rng)
            T = sp.random_symplectic(m, rng)
            lam1 = sp.williamson(V).lambdas
            lam2 = sp.williamson((T @ V @ T.T + (T @ V @ T.T).T) / 2).lambdas
            assert np.max(np.abs(lam1 - lam2)) < 1e-7

    def test_nondegenerate_uniqueness(self, rng):
        for trial in range(30):
            m = int(rng.integers(1, 4))
            lam = 1.0 + 0.5 * np.arange(1, m + 1) + rng.uniform(0, 0.1, m)
            S0 = sp.random_symplectic(m, rng)
            S0inv = np.linalg.inv(S0)
            V = S0inv * np.repeat(lam, 2) @ S0inv.T
            V = (V + V.T) / 2
            dec = sp.williamson(V)
            S_oracle, lam_oracle = williamson_eig_route(V)
            assert np.max(np.abs(np.sort(lam_oracle) - np.sort(dec.lambdas))) < 1e-7
            M = dec.S @ np.linalg.inv(S_oracle)
            for j in range(m):
                blk = M[2 * j : 2 * j + 2, 2 * j : 2 * j + 2]
                assert np.max(np.abs(blk @ blk.T - np.eye(2))) < 1e-6
                assert np.linalg.det(blk) == pytest.approx(1.0, abs=1e-6)
            off = M.copy()
            for j in range(m):
                off[2 * j : 2 * j + 2, 2 * j : 2 * j + 2] = 0.0
            assert np.max(np.abs(off)) < 1e-6

    def test_degenerate_block_structure(self, rng):
        # lambda = (5, 3, 3): the two lambda=3 modes share a 4x4 orthogonal
        # symplectic freedom, the lambda=5 mode a 2x2 rotation
        lam = np.array([5.0, 3.0, 3.0])
        S0 = sp.random_symplectic(3, rng)
        S0inv = np.linalg.inv(S0)
        V = S0inv * np.repeat(lam, 2) @ S0inv.T
        V = (V + V.T) / 2
        dec = sp.williamson(V)
        assert np.allclose(dec.lambdas, lam, atol=1e-8)
        assert dec.gap == pytest.approx(2.0, abs=1e-7)
        S_oracle, _ = williamson_eig_route(V)
        M = dec.S @ np.linalg.inv(S_oracle)
        assert np.max(np.abs(M[0:2, 2:6])) < 1e-6
        assert np.max(np.abs(M[2:6, 0:2])) < 1e-6
        blk = M[2:6, 2:6]
        assert np.max(np.abs(blk @ blk.T - np.eye(4))) < 1e-6
        assert sp.check_symplectic(M, tol=1e-6)


class TestChannels:
    def test_identity_channel(self):
        c = sp.CovarianceData(mean=np.array([1.0, 2.0]), cov=np.diag([2.0, 3.0]))
        ch = sp.GaussianChannelSpec(X=np.eye(2), Y=np.zeros((2, 2)), d=np.zeros(2))
        out = sp.apply_channel_moments(c, ch)
        assert np.allclose(out.mean, c.mean)
        assert np.allclose(out.cov, c.cov)

    def test_pure_loss_fixes_vacuum(self):
        eta = 0.5
        c = sp.CovarianceData(mean=np.zeros(2), cov=np.eye(2))
        ch = sp.GaussianChannelSpec(
            X=math.sqrt(eta) * np.eye(2), Y=(1 - eta) * np.eye(2), d=np.zeros(2)
        )
        assert ch.is_cp()
        out = sp.apply_channel_moments(c, ch)
        assert np.allclose(out.cov, np.eye(2), atol=1e-12)
        assert np.allclose(out.mean, 0.0)

    def test_beamsplitter_on_thermal(self):
        theta = math.pi / 4
        u = np.array(
            [[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]]
        )
        X = sp.passive_unitary_to_symplectic(u)
        V = np.diag([1.4, 1.4, 1.6, 1.6])
        c = sp.CovarianceData(mean=np.zeros(4), cov=V)
        ch = sp.GaussianChannelSpec(X=X, Y=np.zeros((4, 4)), d=np.zeros(4))
        out = sp.apply_channel_moments(c, ch)
        oracle = X @ V @ X.T
        assert np.allclose(out.cov, oracle, atol=1e-12)
        assert np.allclose(np.diag(out.cov), 1.5)
        assert abs(out.cov[0, 2]) == pytest.approx(0.1, abs=1e-12)

    def test_composition(self, rng):
        for _ in range(10):
            c = sp.CovarianceData(mean=rng.normal(size=4), cov=random_valid_cov(2, rng))
            A = sp.GaussianChannelSpec(
                X=math.sqrt(0.7) * np.eye(4), Y=0.3 * np.eye(4), d=rng.normal(size=4)
            )
            SB = sp.random_symplectic(2, rng)
            B = sp.GaussianChannelSpec(X=SB, Y=np.zeros((4, 4)), d=rng.normal(size=4))
            lhs = sp.apply_channel_moments(sp.apply_channel_moments(c, A), B)
            comp = sp.GaussianChannelSpec(
                X=B.X @ A.X, Y=B.X @ A.Y @ B.X.T + B.Y, d=B.X @ A.d + B.d
            )
            rhs = sp.apply_channel_moments(c, comp)
            assert np.allclose(lhs.mean, rhs.mean, atol=1e-10)
            assert np.allclose(lhs.cov, rhs.cov, atol=1e-10)

    def test_amplifier_without_noise_not_cp(self):
        ch = sp.GaussianChannelSpec(X=2.0 * np.eye(2), Y=np.zeros((2, 2)), d=np.zeros(2))
        assert not ch.is_cp()


class TestBlochMessiah:
    def test_identity(self):
        O1, r, O2 = sp.bloch_messiah(np.eye(4))
        assert np.allclose(r, 0.0)
        assert np.allclose(O1 @ O2, np.eye(4), atol=1e-10)

    def test_single_mode_squeezer(self):
        S = np.diag([math.exp(-1.0), math.exp(1.0)])
        O1, r, O2 = sp.bloch_messiah(S)
        assert np.allclose(r, [1.0], atol=1e-10)
        Z = np.diag([math.exp(-1.0), math.exp(1.0)])
        assert np.allclose(O1 @ Z @ O2, S, atol=1e-10)

    def test_random_three_mode(self, rng):
        for _ in range(25):
            S = sp.random_symplectic(3, rng, r_scale=1.0)
            O1, r, O2 = sp.bloch_messiah(S)
            assert sp.check_orthogonal_symplectic(O1, tol=1e-8)
            assert sp.check_orthogonal_symplectic(O2, tol=1e-8)
            assert np.all(np.diff(r) <= 1e-12) and np.all(r >= -1e-12)
            z = np.empty(6)
            z[0::2] = np.exp(-r)
            z[1::2] = np.exp(r)
            assert np.max(np.abs((O1 * z) @ O2 - S)) < 1e-8

    def test_rejects_non_symplectic(self):
        with pytest.raises(StructuralError):
            sp.bloch_messiah(np.diag([2.0, 2.0]))


class TestChecks:
    def test_omega_is_symplectic(self):
        assert sp.check_symplectic(sp.symplectic_form(2))

    def test_identity_both(self):
        assert sp.check_symplectic(np.eye(4))
        assert sp.check_orthogonal_symplectic(np.eye(4))

    def test_scaling_not_symplectic(self):
        assert not sp.check_symplectic(np.diag([2.0, 2.0]))

    def test_passive_map_roundtrip(self, rng):
        u = sp.symplectic_to_passive_unitary(sp.random_orthogonal_symplectic(3, rng))
        assert np.allclose(u @ u.conj().T, np.eye(3), atol=1e-10)
        O = sp.passive_unitary_to_symplectic(u)
        assert sp.check_orthogonal_symplectic(O, tol=1e-9)


class TestSerialization:
    def test_covariance_roundtrip(self):
        c = sp.CovarianceData(mean=np.array([0.5, -1.0]), cov=np.diag([2.0, 3.0]))
        c2 = sp.CovarianceData.from_json(c.to_json())
        assert np.array_equal(c.mean, c2.mean)
        assert np.array_equal(c.cov, c2.cov)

    def test_decomp_fields(self):
        dec = sp.williamson(np.diag([3.0, 3.0]))
        obj = json.loads(dec.to_json())
        assert set(obj) == {"S", "lambdas", "gap"}
        assert obj["lambdas"] == pytest.approx([3.0], abs=1e-12)
