"""Phase-space linear algebra for m-mode bosonic systems.

Conventions: hbar = 2, quadrature ordering (q1, p1, ..., qm, pm), vacuum
covariance = identity, symplectic form Omega = direct sum of [[0, 1], [-1, 0]].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, PhysicalityError, StructuralError

SYMPLECTIC_TOL = 1e-10
DEGENERACY_TOL = 1e-7
COND_LIMIT = 1e12


def symplectic_form(m):
    """Return the 2m x 2m symplectic form, block diagonal [[0,1],[-1,0]].

    Args:
        m: mode count, must be >= 1.
    """
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise StructuralError(f"mode count must be a positive integer, got {m!r}")
    omega = np.zeros((2 * m, 2 * m))
    for j in range(m):
        omega[2 * j, 2 * j + 1] = 1.0
        omega[2 * j + 1, 2 * j] = -1.0
    return omega


def check_symplectic(S, tol=SYMPLECTIC_TOL):
    """True iff ||S Omega S^T - Omega||_inf < tol."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] % 2:
        return False
    omega = symplectic_form(S.shape[0] // 2)
    return bool(np.max(np.abs(S @ omega @ S.T - omega)) < tol)


def check_orthogonal_symplectic(O, tol=SYMPLECTIC_TOL):
    """True iff O is symplectic and ||O O^T - I||_inf < tol."""
    O = np.asarray(O, dtype=float)
    if not check_symplectic(O, tol):
        return False
    return bool(np.max(np.abs(O @ O.T - np.eye(O.shape[0]))) < tol)


@dataclass
class CovarianceData:
    """First and second phase-space moments (xi, V) of an m-mode state.

    mean has length 2m in (q1, p1, ...) order; cov is the symmetrized
    2m x 2m covariance matrix. Physicality (cov + i Omega >= 0, symplectic
    eigenvalues >= 1) is checked by validate_covariance, not the constructor.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.ndim != 2 or self.cov.shape[0] != self.cov.shape[1]:
            raise StructuralError("cov must be a square matrix")
        if self.mean.shape[0] != self.cov.shape[0]:
            raise StructuralError(
                f"mean length {self.mean.shape[0]} does not match cov dimension {self.cov.shape[0]}"
            )

    @property
    def modes(self):
        return self.cov.shape[0] // 2

    def to_json(self):
        return json.dumps({"mean": self.mean.tolist(), "cov": self.cov.tolist()})

    @staticmethod
    def from_json(text):
        obj = json.loads(text)
        return CovarianceData(mean=np.array(obj["mean"]), cov=np.array(obj["cov"]))


@dataclass
class CovarianceVerdict:
    valid: bool
    reason: str | None = None
    offending_eigenvalue: float | None = None


@dataclass
class SymplecticDecomp:
    """Williamson factors: S V S^T = diag(lambda_j I_2), lambdas descending."""

    S: np.ndarray
    lambdas: np.ndarray
    gap: float

    def to_json(self):
        return json.dumps(
            {"S": self.S.tolist(), "lambdas": self.lambdas.tolist(), "gap": self.gap}
        )


@dataclass
class GaussianChannelSpec:
    """Gaussian channel on moments: mean -> X mean + d, cov -> X cov X^T + Y."""

    X: np.ndarray
    Y: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] % 2 or self.X.shape[1] % 2:
            raise StructuralError("X must be 2m' x 2m")
        if self.Y.shape != (self.X.shape[0], self.X.shape[0]):
            raise StructuralError("Y must be square with X's output dimension")
        if self.d.shape[0] != self.X.shape[0]:
            raise StructuralError("d must match X's output dimension")

    def is_cp(self, tol=1e-10):
        """Complete positivity: Y + i Omega_out - i X Omega_in X^T >= 0."""
        m_out = self.X.shape[0] // 2
        m_in = self.X.shape[1] // 2
        H = self.Y.astype(complex) + 1j * (
            symplectic_form(m_out) - self.X @ symplectic_form(m_in) @ self.X.T
        )
        return float(np.min(np.linalg.eigvalsh(H))) >= -tol


@dataclass
class GaussianUnitarySpec:
    """Gaussian unitary: symplectic S plus displacement d (xi -> S xi + d)."""

    S: np.ndarray
    d: np.ndarray = field(default=None)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        if self.d is None:
            self.d = np.zeros(self.S.shape[0])
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        if not check_symplectic(self.S):
            raise StructuralError("S is not symplectic within 1e-10")
        if self.d.shape[0] != self.S.shape[0]:
            raise StructuralError("d must have length 2m")

    @property
    def modes(self):
        return self.S.shape[0] // 2

    def as_channel(self):
        return GaussianChannelSpec(X=self.S, Y=np.zeros_like(self.S), d=self.d)


def validate_covariance(c):
    """Check the physicality of a covariance matrix.

    Returns a CovarianceVerdict; structural problems (odd dimension,
    asymmetry beyond 1e-9) raise StructuralError instead, to keep malformed
    input distinct from an unphysical state.
    """
    if isinstance(c, CovarianceData):
        V = c.cov
    else:
        V = np.asarray(c, dtype=float)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise StructuralError("covariance must be a square matrix")
    if V.shape[0] % 2:
        raise StructuralError(f"covariance dimension {V.shape[0]} is odd")
    asym = float(np.max(np.abs(V - V.T)))
    if asym > 1e-9:
        raise StructuralError(f"covariance asymmetry {asym:.3e} exceeds 1e-9")
    m = V.shape[0] // 2
    omega = symplectic_form(m)
    H = V.astype(complex) + 1j * omega
    eigs = np.linalg.eigvalsh(H)
    if eigs[0] < -1e-10:
        return CovarianceVerdict(
            valid=False,
            reason="uncertainty violation: min eig of V + i Omega below -1e-10",
            offending_eigenvalue=float(eigs[0]),
        )
    lam = symplectic_eigenvalues(V)
    if lam[-1] < 1 - 1e-10:
        return CovarianceVerdict(
            valid=False,
            reason="symplectic eigenvalue below 1",
            offending_eigenvalue=float(lam[-1]),
        )
    return CovarianceVerdict(valid=True)


def symplectic_eigenvalues(V):
    """Symplectic eigenvalues of V, descending (moduli of eigs of i Omega V)."""
    V = np.asarray(V, dtype=float)
    m = V.shape[0] // 2
    K = 1j * symplectic_form(m) @ V
    eigs = np.abs(np.linalg.eigvals(K))
    return np.sort(eigs)[::-1][::2] * 1.0  # pairs (+l, -l); keep one per pair


def _group_indices(values, tol):
    """Group sorted-descending values whose neighbors differ by < tol."""
    groups = []
    cur = [0]
    for i in range(1, len(values)):
        if abs(values[i] - values[cur[-1]]) < tol:
            cur.append(i)
        else:
            groups.append(cur)
            cur = [i]
    groups.append(cur)
    return groups


def williamson(V):
    """Williamson decomposition of a physical covariance matrix.

    Computed through the Hermitian pencil V^{1/2} (i Omega) V^{1/2}, whose
    positive eigenpairs yield, after Omega-normalization, a symplectic S with
    S V S^T = diag(lambda_j I_2). Eigenvalues are sorted descending, ties by
    the order of appearance; within a degenerate block (|dl| < 1e-7) the
    residual freedom is fixed by a Loewdin orthonormalization in the i Omega
    inner product (an arbitrary deterministic choice).

    Returns:
        SymplecticDecomp with S, lambdas (length m), and the smallest gap
        between distinct eigenvalue groups (inf when all are degenerate).
    """
    if isinstance(V, CovarianceData):
        V = V.cov
    V = np.asarray(V, dtype=float)
    verdict = validate_covariance(V)
    if not verdict.valid:
        raise PhysicalityError(
            f"covariance not physical: {verdict.reason} "
            f"(eigenvalue {verdict.offending_eigenvalue})"
        )
    cond = np.linalg.cond(V)
    if cond > COND_LIMIT:
        raise ConditioningError(f"covariance condition number {cond:.3e} exceeds 1e12")
    m = V.shape[0] // 2
    omega = symplectic_form(m)

    evals, evecs = np.linalg.eigh(V)
    sqrt_v = (evecs * np.sqrt(evals)) @ evecs.T
    inv_sqrt_v = (evecs / np.sqrt(evals)) @ evecs.T

    K = sqrt_v @ (1j * omega) @ sqrt_v
    K = (K + K.conj().T) / 2
    keigs, kvecs = np.linalg.eigh(K)
    # Positive sector, descending.
    order = np.argsort(keigs)[::-1][:m]
    lambdas = keigs[order]
    W = inv_sqrt_v @ kvecs[:, order]

    # Omega-normalize, then fix degenerate blocks by Loewdin orthonormalization.
    iom = 1j * omega
    for j in range(m):
        n = float(np.real(W[:, j].conj() @ iom @ W[:, j]))
        W[:, j] = W[:, j] / math.sqrt(n)
    for grp in _group_indices(lambdas, DEGENERACY_TOL):
        if len(grp) > 1:
            B = W[:, grp]
            G = B.conj().T @ iom @ B
            G = (G + G.conj().T) / 2
            ge, gv = np.linalg.eigh(G)
            G_inv_sqrt = (gv / np.sqrt(ge)) @ gv.conj().T
            W[:, grp] = B @ G_inv_sqrt

    T = np.empty((2 * m, 2 * m))
    T[:, 0::2] = math.sqrt(2.0) * np.real(W)
    T[:, 1::2] = -math.sqrt(2.0) * np.imag(W)
    S = T.T

    groups = _group_indices(lambdas, DEGENERACY_TOL)
    reps = [float(np.mean(lambdas[g])) for g in groups]
    if len(reps) > 1:
        gap = min(abs(a - b) for i, a in enumerate(reps) for b in reps[i + 1 :])
    else:
        gap = math.inf
    return SymplecticDecomp(S=S, lambdas=np.array(lambdas, dtype=float), gap=float(gap))


def apply_channel_moments(c, ch):
    """Push moments through a Gaussian channel: (xi, V) -> (X xi + d, X V X^T + Y)."""
    if not isinstance(c, CovarianceData):
        raise StructuralError("expected CovarianceData")
    if ch.X.shape[1] != c.cov.shape[0]:
        raise StructuralError(
            f"channel input dimension {ch.X.shape[1]} does not match state {c.cov.shape[0]}"
        )
    mean = ch.X @ c.mean + ch.d
    cov = ch.X @ c.cov @ ch.X.T + ch.Y
    return CovarianceData(mean=mean, cov=(cov + cov.T) / 2)


def _pair_columns_unit_sector(vectors, omega):
    """Split an Omega-invariant subspace basis into symplectic (e, -Omega e) pairs.

    A basis vector already covered by an earlier (e, f) pair survives the
    projection only through eigensolver noise, while a genuinely new
    direction keeps norm ~1; the threshold sits between those scales.
    """
    pairs = []
    basis = [v for v in vectors]
    used = []
    while basis:
        e = basis[0]
        for u in used:
            e = e - u * (u @ e)
        nrm = np.linalg.norm(e)
        if nrm < 1e-6:
            basis = basis[1:]
            continue
        e = e / nrm
        f = -omega @ e
        for u in used:
            f = f - u * (u @ f)
        f = f / np.linalg.norm(f)
        pairs.append((e, f))
        used.extend([e, f])
        basis = basis[1:]
    return pairs


def bloch_messiah(S):
    """Decompose a symplectic S as O1 diag(e^{-r_j}, e^{r_j}) O2.

    O1, O2 are orthogonal symplectic, r_j >= 0 sorted descending. Based on the
    symplectic polar decomposition: P = S S^T is symmetric positive definite
    symplectic, its eigenvalues come in (mu, 1/mu) pairs with Omega mapping one
    eigenvector to the other, which yields the orthogonal symplectic
    diagonalizer directly.

    Returns:
        (O1, r, O2) with O1 @ Z @ O2 = S, Z = diag(e^{-r_1}, e^{r_1}, ...).
    """
    S = np.asarray(S, dtype=float)
    if not check_symplectic(S):
        raise StructuralError("input is not symplectic within 1e-10")
    n = S.shape[0]
    m = n // 2
    omega = symplectic_form(m)
    P = S @ S.T
    mu, E = np.linalg.eigh(P)

    # Eigenvalues pair as (mu, 1/mu). Count squeezed pairs from the top of the
    # descending spectrum; everything between index k and n-k is the unit sector.
    tol = 1e-9
    order = np.argsort(mu)[::-1]
    mu_desc = mu[order]
    k = int(np.sum(mu_desc[:m] > 1 + tol))
    squeezed = [(mu_desc[i], E[:, order[i]]) for i in range(k)]
    unit_vecs = [E[:, order[i]] for i in range(k, n - k)]
    cols = []
    rs = []
    for mu_j, v in squeezed:
        rs.append(0.5 * math.log(mu_j))
        cols.append(omega @ v)  # eigenvalue 1/mu -> q column (e^{-2r})
        cols.append(v)  # eigenvalue mu -> p column (e^{+2r})
    for e, f in _pair_columns_unit_sector(unit_vecs, omega):
        rs.append(0.0)
        cols.append(e)
        cols.append(f)
    O1 = np.column_stack(cols)
    r = np.array(rs)
    z_diag = np.empty(n)
    z_diag[0::2] = np.exp(-r)
    z_diag[1::2] = np.exp(r)
    O2 = (O1 / z_diag).T @ S  # Z^{-1} O1^T S
    return O1, r, O2


def random_symplectic(m, rng, r_scale=0.6):
    """Seeded random symplectic matrix via reverse Bloch-Messiah assembly."""
    O1 = random_orthogonal_symplectic(m, rng)
    O2 = random_orthogonal_symplectic(m, rng)
    r = rng.uniform(-r_scale, r_scale, size=m)
    z = np.empty(2 * m)
    z[0::2] = np.exp(-r)
    z[1::2] = np.exp(r)
    return O1 * z @ O2


def random_orthogonal_symplectic(m, rng):
    """Seeded random passive symplectic (image of a Haar-ish unitary)."""
    A = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
    Q, R = np.linalg.qr(A)
    Q = Q * (np.diag(R) / np.abs(np.diag(R)))
    return passive_unitary_to_symplectic(Q)


def passive_unitary_to_symplectic(u):
    """Map an m x m unitary (a_j -> sum_k u_jk a_k) to its 2m x 2m symplectic.

    Block (j, k) of the result is [[Re u, -Im u], [Im u, Re u]]_{jk}.
    """
    u = np.asarray(u, dtype=complex)
    m = u.shape[0]
    S = np.zeros((2 * m, 2 * m))
    S[0::2, 0::2] = np.real(u)
    S[0::2, 1::2] = -np.imag(u)
    S[1::2, 0::2] = np.imag(u)
    S[1::2, 1::2] = np.real(u)
    return S


def symplectic_to_passive_unitary(O, tol=1e-8):
    """Inverse of passive_unitary_to_symplectic; requires O orthogonal symplectic."""
    O = np.asarray(O, dtype=float)
    if not check_orthogonal_symplectic(O, tol=max(tol, SYMPLECTIC_TOL)):
        raise StructuralError("matrix is not orthogonal symplectic")
    u = O[0::2, 0::2] + 1j * O[1::2, 0::2]
    return u
