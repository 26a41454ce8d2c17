"""Truncated multi-mode Fock-space engine.

States live on a dense complex tensor over the product Fock basis with a
per-mode truncation. Amplitudes are kept at their physical scale: the stored
tensor is the window of the true state, so ||amps||^2 + norm_leak = 1 and
every lossy step (a squeezer pushing weight past the cutoff, a displacement
walking off the grid) shows up as growth of norm_leak instead of a silent
renormalization.

Conventions match ge_lab.symplectic: hbar = 2, q = a + a^dag, p = i(a^dag - a),
vacuum covariance = identity, coordinate order (q1, p1, ..., qm, pm). The
complex label beta of a displacement D(beta) = exp(beta a^dag - beta* a)
shifts <q> by 2 Re beta and <p> by 2 Im beta.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import expm, logm
from scipy.special import eval_genlaguerre, gammaln

from .errors import CutoffLeakError, DimensionLimitError, StructuralError
from .symplectic import (
    CovarianceData,
    GaussianUnitarySpec,
    bloch_messiah,
    check_orthogonal_symplectic,
    symplectic_to_passive_unitary,
)

DEFAULT_LEAK_BUDGET = 1e-6

# dense tensor states are refused beyond this product dimension
DENSE_LIMIT = 10**6
# density matrices and materialized operators are refused beyond this
DENSITY_DIM_LIMIT = 4096
# largest full fixed-photon-number sector we will exponentiate
_SECTOR_LIMIT = 6000
# working dimension cap for padded single-mode exponentials
_MODE_OP_DIM_LIMIT = 4096

_CACHE_LOCK = threading.Lock()
_MODE_OP_CACHE: dict = {}
_PASSIVE_CACHE: dict = {}
_UNITARY_CACHE: dict = {}


def _as_cutoff_tuple(cutoffs, modes=None):
    if np.isscalar(cutoffs):
        if modes is None:
            raise StructuralError("scalar cutoff requires an explicit mode count")
        out = (int(cutoffs),) * int(modes)
    else:
        out = tuple(int(c) for c in cutoffs)
        if modes is not None and len(out) != modes:
            raise StructuralError(
                f"expected {modes} cutoffs, got {len(out)}"
            )
    if not out or any(c < 1 for c in out):
        raise StructuralError("cutoffs must be positive")
    if int(np.prod(out)) > DENSE_LIMIT:
        raise DimensionLimitError(
            f"product dimension {int(np.prod(out))} exceeds dense limit {DENSE_LIMIT}"
        )
    return out


@dataclass
class FockKet:
    """Pure state window. Treat as immutable; operations return new kets."""

    cutoffs: tuple
    amps: np.ndarray
    norm_leak: float = 0.0

    def __post_init__(self):
        self.cutoffs = _as_cutoff_tuple(self.cutoffs)
        self.amps = np.asarray(self.amps, dtype=complex)
        if self.amps.shape != self.cutoffs:
            raise StructuralError(
                f"amplitude tensor shape {self.amps.shape} != cutoffs {self.cutoffs}"
            )
        self.norm_leak = float(self.norm_leak)
        total = self.norm2 + self.norm_leak
        if abs(total - 1.0) > 1e-9:
            raise StructuralError(
                f"norm^2 + leak = {total:.12f}, expected 1 within 1e-9"
            )

    @property
    def n_modes(self):
        return len(self.cutoffs)

    @property
    def dim(self):
        return int(np.prod(self.cutoffs))

    @property
    def norm2(self):
        return float(np.vdot(self.amps, self.amps).real)

    def leak_ok(self, budget=DEFAULT_LEAK_BUDGET):
        return self.norm_leak <= budget

    def inner(self, other):
        _require_same_cutoffs(self, other)
        return complex(np.vdot(self.amps, other.amps))

    def to_density(self):
        flat = self.amps.reshape(-1)
        return FockDensity(self.cutoffs, np.outer(flat, flat.conj()), self.norm_leak)


@dataclass
class FockDensity:
    """Mixed state window over the product Fock basis."""

    cutoffs: tuple
    rho: np.ndarray
    norm_leak: float = 0.0

    def __post_init__(self):
        self.cutoffs = _as_cutoff_tuple(self.cutoffs)
        dim = int(np.prod(self.cutoffs))
        if dim > DENSITY_DIM_LIMIT:
            raise DimensionLimitError(
                f"density dimension {dim} exceeds limit {DENSITY_DIM_LIMIT}"
            )
        self.rho = np.asarray(self.rho, dtype=complex)
        if self.rho.shape != (dim, dim):
            raise StructuralError(f"rho shape {self.rho.shape} != ({dim}, {dim})")
        scale = max(1.0, float(np.abs(self.rho).max()))
        if np.abs(self.rho - self.rho.conj().T).max() > 1e-10 * scale:
            raise StructuralError("rho is not Hermitian within 1e-10")
        self.norm_leak = float(self.norm_leak)
        total = float(np.trace(self.rho).real) + self.norm_leak
        if abs(total - 1.0) > 1e-8:
            raise StructuralError(
                f"trace + leak = {total:.12f}, expected 1 within 1e-8"
            )
        if np.linalg.eigvalsh((self.rho + self.rho.conj().T) / 2).min() < -1e-8:
            raise StructuralError("rho has an eigenvalue below -1e-8")

    @property
    def n_modes(self):
        return len(self.cutoffs)

    @property
    def dim(self):
        return int(np.prod(self.cutoffs))

    @property
    def trace(self):
        return float(np.trace(self.rho).real)

    def leak_ok(self, budget=DEFAULT_LEAK_BUDGET):
        return self.norm_leak <= budget


@dataclass
class EnergyBudget:
    """Per-mode energy bounds used by the planners: mean bound E, second-moment
    bound E2, at moment order k."""

    E: float
    E2: float
    k: int = 2

    def __post_init__(self):
        self.E = float(self.E)
        self.E2 = float(self.E2)
        self.k = int(self.k)
        if not (self.E2 >= self.E >= 0.5):
            raise StructuralError(
                f"energy budget needs E2 >= E >= 1/2, got E={self.E}, E2={self.E2}"
            )
        if self.k < 1:
            raise StructuralError("moment order k must be >= 1")


def _require_same_cutoffs(a, b):
    if tuple(a.cutoffs) != tuple(b.cutoffs):
        raise StructuralError(f"mismatched cutoffs {a.cutoffs} vs {b.cutoffs}")


# ---------------------------------------------------------------------------
# single-mode operator blocks


def destroy(d):
    return np.diag(np.sqrt(np.arange(1.0, d)), 1)


def coherent_amps(alpha, d):
    """Exact Fock coefficients of |alpha> on the first d levels."""
    alpha = complex(alpha)
    n = np.arange(d)
    if alpha == 0:
        out = np.zeros(d, dtype=complex)
        out[0] = 1.0
        return out
    logmag = -abs(alpha) ** 2 / 2 + n * math.log(abs(alpha)) - gammaln(n + 1) / 2
    return np.exp(logmag) * np.exp(1j * n * np.angle(alpha))


def displacement_matrix(beta, d):
    """Exact matrix elements <k|D(beta)|k'> on the retained d levels.

    Closed form via associated Laguerre polynomials; this is the restriction
    of the infinite-dimensional unitary, not the exponential of a truncated
    generator, so it stays exact for any |beta|.
    """
    beta = complex(beta)
    x = abs(beta) ** 2
    k = np.arange(d)
    K, Kp = np.meshgrid(k, k, indexing="ij")
    lo = K >= Kp
    nmin = np.minimum(K, Kp)
    diff = np.abs(K - Kp)
    base = np.exp(0.5 * (gammaln(nmin + 1) - gammaln(np.maximum(K, Kp) + 1)) - x / 2)
    base = base * eval_genlaguerre(nmin, diff, x)
    if beta == 0:
        phase = np.where(diff == 0, 1.0 + 0j, 0.0 + 0j)
    else:
        phase = np.where(lo, beta ** diff, (-beta.conjugate()) ** diff)
    return base * phase


def _mode_matrix(kind, value, d):
    """d x d block of a squeezer or displacement, by matrix exponential of the
    generator truncated at a padded working dimension.

    The pad keeps the retained corner faithful to the infinite-dimensional
    operator; applying the corner to a state then loses exactly the weight
    that walked past the cutoff, which is what norm_leak records.
    """
    if kind == "squeeze":
        key = (kind, round(float(value), 12), d)
    else:
        key = (kind, complex(round(complex(value).real, 12),
                             round(complex(value).imag, 12)), d)
    hit = _MODE_OP_CACHE.get(key)
    if hit is not None:
        return hit
    if kind == "squeeze":
        r = float(value)
        wd = int(math.ceil(d * math.exp(2 * abs(r)))) + 24
        if wd > _MODE_OP_DIM_LIMIT:
            raise CutoffLeakError(
                f"squeeze r={r} at cutoff {d} needs working dimension {wd} "
                f"beyond {_MODE_OP_DIM_LIMIT}"
            )
        a = destroy(wd)
        gen = (r / 2) * (a @ a - a.T @ a.T)
        M = expm(gen)[:d, :d].astype(complex)
    elif kind == "displace":
        b = complex(value)
        wd = d + int(math.ceil(abs(b) ** 2 + 8 * abs(b) * math.sqrt(d))) + 16
        if wd > _MODE_OP_DIM_LIMIT:
            raise CutoffLeakError(
                f"displacement |beta|={abs(b):.3f} at cutoff {d} needs working "
                f"dimension {wd} beyond {_MODE_OP_DIM_LIMIT}"
            )
        a = destroy(wd).astype(complex)
        gen = b * a.T.conj() - b.conjugate() * a
        M = expm(gen)[:d, :d]
    else:
        raise StructuralError(f"unknown mode operator kind {kind!r}")
    with _CACHE_LOCK:
        _MODE_OP_CACHE[key] = M
    return M


def _apply_axis(amps, M, axis):
    out = np.tensordot(M, amps, axes=(1, axis))
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# passive networks, blockwise per total photon number


@lru_cache(maxsize=None)
def _compositions(m, total):
    """All occupation tuples of length m summing to total, descending-first."""
    if m == 1:
        return ((total,),)
    out = []
    for first in range(total, -1, -1):
        for rest in _compositions(m - 1, total - first):
            out.append((first,) + rest)
    return tuple(out)


def _passive_blocks(u, cutoffs):
    """Sector blocks of the passive unitary exp(sum K_jk a_j^dag a_k).

    Each fixed-total-photon-number sector is an invariant subspace of the
    generator, so exponentiating the full sector and then restricting rows
    and columns to the in-cutoff states gives exact matrix elements; the
    restriction is sub-unitary and the norm it drops is genuine leak.
    """
    u = np.asarray(u, dtype=complex)
    key = (u.tobytes(), cutoffs)
    hit = _PASSIVE_CACHE.get(key)
    if hit is not None:
        return hit
    m = u.shape[0]
    K, _ = logm(u, disp=False)
    K = (K - K.conj().T) / 2
    blocks = []
    for total in range(sum(c - 1 for c in cutoffs) + 1):
        basis = _compositions(m, total)
        if len(basis) > _SECTOR_LIMIT:
            raise DimensionLimitError(
                f"passive sector at {total} photons has {len(basis)} states, "
                f"limit {_SECTOR_LIMIT}"
            )
        index = {t: i for i, t in enumerate(basis)}
        G = np.zeros((len(basis), len(basis)), dtype=complex)
        for bi, occ in enumerate(basis):
            for k in range(m):
                if occ[k] == 0:
                    continue
                lowered = list(occ)
                lowered[k] -= 1
                for j in range(m):
                    if K[j, k] == 0:
                        continue
                    val = math.sqrt(occ[k] * (lowered[j] + 1))
                    raised = list(lowered)
                    raised[j] += 1
                    G[index[tuple(raised)], bi] += K[j, k] * val
        U = expm(G)
        kept = [i for i, t in enumerate(basis)
                if all(t[j] < cutoffs[j] for j in range(m))]
        tuples = np.array([basis[i] for i in kept], dtype=int)
        rav = np.ravel_multi_index(tuples.T, cutoffs)
        blocks.append((rav, U[np.ix_(kept, kept)]))
    with _CACHE_LOCK:
        _PASSIVE_CACHE[key] = blocks
    return blocks


def _apply_passive(amps, u, cutoffs):
    flat = amps.reshape(-1)
    out = np.zeros_like(flat)
    for rav, U in _passive_blocks(u, cutoffs):
        out[rav] = U @ flat[rav]
    return out.reshape(amps.shape)


def _passive_matrix(u, cutoffs):
    dim = int(np.prod(cutoffs))
    U = np.zeros((dim, dim), dtype=complex)
    for rav, blk in _passive_blocks(u, cutoffs):
        U[np.ix_(rav, rav)] = blk
    return U


# ---------------------------------------------------------------------------
# Gaussian unitaries on the Fock window


def _phase_fixed(amps):
    # global phase convention: first nonzero amplitude real-positive
    flat = amps.reshape(-1)
    mags = np.abs(flat)
    mx = mags.max()
    if mx == 0:
        return amps
    idx = int(np.argmax(mags > 1e-12 * mx))
    ph = flat[idx]
    return amps * (abs(ph) / ph)


@dataclass
class FockOperator:
    """Staged Fock-space realization of a Gaussian unitary.

    Stages apply left to right to a ket; each is either a passive network
    (applied blockwise, never materialized unless asked) or a list of
    per-mode matrices.
    """

    cutoffs: tuple
    stages: list = field(default_factory=list)

    def apply_ket(self, ket, leak_budget=DEFAULT_LEAK_BUDGET):
        _require_same_cutoffs(self, ket)
        amps = ket.amps
        for kind, payload in self.stages:
            if kind == "passive":
                amps = _apply_passive(amps, payload, self.cutoffs)
            else:
                for j, M in enumerate(payload):
                    if M is not None:
                        amps = _apply_axis(amps, M, j)
        amps = _phase_fixed(amps)
        leak = min(1.0, max(0.0, 1.0 - float(np.vdot(amps, amps).real)))
        if leak_budget is not None and leak > leak_budget:
            raise CutoffLeakError(
                f"leak {leak:.3e} exceeds budget {leak_budget:.3e} after unitary",
                required_dim=max(self.cutoffs) + max(8, max(self.cutoffs) // 2),
            )
        return FockKet(self.cutoffs, amps, leak)

    def matrix(self):
        dim = int(np.prod(self.cutoffs))
        if dim > DENSITY_DIM_LIMIT:
            raise DimensionLimitError(
                f"materializing a {dim} x {dim} operator exceeds {DENSITY_DIM_LIMIT}"
            )
        U = np.eye(dim, dtype=complex)
        for kind, payload in self.stages:
            if kind == "passive":
                U = _passive_matrix(payload, self.cutoffs) @ U
            else:
                mats = [M if M is not None else np.eye(d, dtype=complex)
                        for M, d in zip(payload, self.cutoffs)]
                full = mats[0]
                for M in mats[1:]:
                    full = np.kron(full, M)
                U = full @ U
        return U

    def apply_density(self, den, leak_budget=DEFAULT_LEAK_BUDGET):
        _require_same_cutoffs(self, den)
        U = self.matrix()
        rho = U @ den.rho @ U.conj().T
        rho = (rho + rho.conj().T) / 2
        leak = min(1.0, max(0.0, 1.0 - float(np.trace(rho).real)))
        if leak_budget is not None and leak > leak_budget:
            raise CutoffLeakError(
                f"leak {leak:.3e} exceeds budget {leak_budget:.3e} after unitary",
                required_dim=max(self.cutoffs) + max(8, max(self.cutoffs) // 2),
            )
        return FockDensity(self.cutoffs, rho, leak)


def gaussian_unitary_fock(spec, cutoffs):
    """Assemble the Fock-space operator of a Gaussian unitary.

    Built by Bloch-Messiah: passive network, single-mode squeezers
    exp(r (a^2 - a^dag^2) / 2), second passive network, then displacements
    D(alpha_j) with alpha_j = (d_{2j-1} + i d_{2j}) / 2.
    """
    m = spec.S.shape[0] // 2
    cutoffs = _as_cutoff_tuple(cutoffs, modes=m)
    d = np.zeros(2 * m) if spec.d is None else np.asarray(spec.d, dtype=float)
    key = (spec.S.tobytes(), d.tobytes(), cutoffs)
    hit = _UNITARY_CACHE.get(key)
    if hit is not None:
        return hit

    stages = []
    S = spec.S
    eye = np.eye(2 * m)
    if np.allclose(S, eye, atol=1e-13):
        pass
    elif check_orthogonal_symplectic(S, tol=1e-10):
        stages.append(("passive", symplectic_to_passive_unitary(S)))
    else:
        O1, r, O2 = bloch_messiah(S)
        if not np.allclose(O2, eye, atol=1e-13):
            stages.append(("passive", symplectic_to_passive_unitary(O2)))
        if np.any(np.abs(r) > 1e-13):
            mats = [_mode_matrix("squeeze", rj, dj) if abs(rj) > 1e-13 else None
                    for rj, dj in zip(r, cutoffs)]
            stages.append(("mode", mats))
        if not np.allclose(O1, eye, atol=1e-13):
            stages.append(("passive", symplectic_to_passive_unitary(O1)))
    if np.any(np.abs(d) > 1e-13):
        betas = (d[0::2] + 1j * d[1::2]) / 2
        mats = [_mode_matrix("displace", b, dj) if abs(b) > 1e-13 else None
                for b, dj in zip(betas, cutoffs)]
        stages.append(("mode", mats))

    op = FockOperator(cutoffs, stages)
    with _CACHE_LOCK:
        _UNITARY_CACHE[key] = op
    return op


def apply_gaussian(state, spec, leak_budget=DEFAULT_LEAK_BUDGET):
    op = gaussian_unitary_fock(spec, state.cutoffs)
    if isinstance(state, FockKet):
        return op.apply_ket(state, leak_budget=leak_budget)
    return op.apply_density(state, leak_budget=leak_budget)


def counter_rotate(state, mean, S, leak_budget=DEFAULT_LEAK_BUDGET):
    """Gaussian frame change sending moments (mean, V) to (0, S V S^T)."""
    mean = np.asarray(mean, dtype=float)
    spec = GaussianUnitarySpec(S=S, d=-(np.asarray(S) @ mean))
    return apply_gaussian(state, spec, leak_budget=leak_budget)


# ---------------------------------------------------------------------------
# state construction


def _leak_guard(leak, budget, what, required_dim=None):
    if budget is not None and leak > budget:
        raise CutoffLeakError(
            f"{what}: leak {leak:.3e} exceeds budget {budget:.3e}",
            required_dim=required_dim,
        )


def _series_required_dim(tail_fn, budget):
    d = 2
    while d <= 8192:
        if tail_fn(d) <= budget:
            return d
        d *= 2
    return None


def _poisson_tail(mean):
    def tail(d):
        if mean <= 0:
            return 0.0
        n = np.arange(d)
        pmf = np.exp(-mean + n * math.log(mean) - gammaln(n + 1))
        return max(0.0, 1.0 - float(pmf.sum()))
    return tail


def make_state(kind, params, cutoffs, leak_budget=DEFAULT_LEAK_BUDGET):
    """Construct a named state family on the Fock window.

    Kets: vacuum, coherent, number, noon, tmsv, cat, stmsv, arithmetic.
    Densities: thermal. See state_from_json for the descriptor format.
    """
    kind = str(kind).lower().replace("-", "_")
    p = dict(params or {})

    if kind == "vacuum":
        modes = int(p.get("modes", 1))
        cut = _as_cutoff_tuple(cutoffs, modes)
        amps = np.zeros(cut, dtype=complex)
        amps[(0,) * modes] = 1.0
        return FockKet(cut, amps, 0.0)

    if kind == "coherent":
        alphas = np.atleast_1d(np.asarray(p["alpha"], dtype=complex))
        cut = _as_cutoff_tuple(cutoffs, len(alphas))
        vecs = [coherent_amps(a, dj) for a, dj in zip(alphas, cut)]
        amps = vecs[0]
        for v in vecs[1:]:
            amps = np.tensordot(amps, v, axes=0)
        amps = amps.reshape(cut)
        leak = max(0.0, 1.0 - float(np.vdot(amps, amps).real))
        worst = float(np.max(np.abs(alphas)) ** 2)
        req = _series_required_dim(
            _poisson_tail(worst),
            (leak_budget or DEFAULT_LEAK_BUDGET) / max(1, len(alphas)),
        )
        _leak_guard(leak, leak_budget, "coherent state", required_dim=req)
        return FockKet(cut, amps, leak)

    if kind == "number":
        ns = np.atleast_1d(np.asarray(p["n"], dtype=int))
        cut = _as_cutoff_tuple(cutoffs, len(ns))
        for nj, dj in zip(ns, cut):
            if nj < 0:
                raise StructuralError("photon numbers must be nonnegative")
            if nj >= dj:
                raise CutoffLeakError(
                    f"|{nj}> does not fit cutoff {dj}", required_dim=int(nj) + 1
                )
        amps = np.zeros(cut, dtype=complex)
        amps[tuple(int(n) for n in ns)] = 1.0
        return FockKet(cut, amps, 0.0)

    if kind == "noon":
        N = int(p["N"])
        if N < 1:
            raise StructuralError("NOON needs N >= 1")
        cut = _as_cutoff_tuple(cutoffs, 2)
        if N >= min(cut):
            raise CutoffLeakError(
                f"NOON({N}) does not fit cutoffs {cut}", required_dim=N + 1
            )
        amps = np.zeros(cut, dtype=complex)
        amps[N, 0] = amps[0, N] = 1 / math.sqrt(2)
        return FockKet(cut, amps, 0.0)

    if kind == "tmsv":
        r = float(p["r"])
        phi = float(p.get("phi", 0.0))
        cut = _as_cutoff_tuple(cutoffs, 2)
        t, c = math.tanh(r), math.cosh(r)
        kmax = min(cut)
        amps = np.zeros(cut, dtype=complex)
        ks = np.arange(kmax)
        amps[ks, ks] = (t ** ks) * np.exp(1j * phi * ks) / c
        leak = abs(t) ** (2 * kmax)
        req = None
        if 0 < abs(t) < 1 and leak_budget:
            req = int(math.ceil(math.log(leak_budget) / (2 * math.log(abs(t))))) + 1
        _leak_guard(leak, leak_budget, "two-mode squeezed vacuum", required_dim=req)
        return FockKet(cut, amps, leak)

    if kind == "cat":
        alpha = complex(p["alpha"])
        cut = _as_cutoff_tuple(cutoffs, 1)
        norm = math.sqrt(2 * (1 + math.exp(-2 * abs(alpha) ** 2)))
        vec = (coherent_amps(alpha, cut[0]) + coherent_amps(-alpha, cut[0])) / norm
        leak = max(0.0, 1.0 - float((np.abs(vec) ** 2).sum()))
        req = _series_required_dim(_poisson_tail(abs(alpha) ** 2), leak_budget or 1e-6)
        _leak_guard(leak, leak_budget, "cat state", required_dim=req)
        return FockKet(cut, vec.reshape(cut), leak)

    if kind == "stmsv":
        # equal superposition of two-mode squeezing at +r and -r: support on
        # |2j, 2j> only
        r = float(p["r"])
        cut = _as_cutoff_tuple(cutoffs, 2)
        t, c = math.tanh(r), math.cosh(r)
        norm = math.sqrt(4 / (c ** 2 * (1 - t ** 4))) if abs(t) < 1 else None
        kmax = min(cut)
        amps = np.zeros(cut, dtype=complex)
        ks = np.arange(0, kmax, 2)
        amps[ks, ks] = 2 * (t ** ks) / (c * norm)
        leak = max(0.0, 1.0 - float((np.abs(amps) ** 2).sum()))
        req = None
        if 0 < abs(t) < 1 and leak_budget:
            req = int(math.ceil(math.log(leak_budget) / (2 * math.log(abs(t))))) + 2
        _leak_guard(leak, leak_budget, "superposed two-mode squeezing",
                    required_dim=req)
        return FockKet(cut, amps, leak)

    if kind == "arithmetic":
        k, kp = int(p["k"]), int(p["kp"])
        l, lp = int(p.get("l", 0)), int(p.get("lp", 0))
        c = np.asarray(p["c"], dtype=complex)
        if c.ndim != 2 or not np.any(c):
            raise StructuralError("coefficient table c must be a nonzero 2d array")
        if k < 2 or kp < 2:
            raise StructuralError("progression steps must satisfy k, k' >= 2")
        if l < 0 or lp < 0:
            raise StructuralError("offsets must be nonnegative")
        cut = _as_cutoff_tuple(cutoffs, 2)
        J, H = c.shape
        need = (l + (J - 1) * k + 1, lp + (H - 1) * kp + 1)
        if need[0] > cut[0] or need[1] > cut[1]:
            raise CutoffLeakError(
                f"progression support needs cutoffs {need}, got {cut}",
                required_dim=max(need),
            )
        amps = np.zeros(cut, dtype=complex)
        rows = l + k * np.arange(J)
        cols = lp + kp * np.arange(H)
        amps[np.ix_(rows, cols)] = c / np.linalg.norm(c)
        return FockKet(cut, amps, 0.0)

    if kind == "thermal":
        nbars = np.atleast_1d(np.asarray(p["nbar"], dtype=float))
        cut = _as_cutoff_tuple(cutoffs, len(nbars))
        diag = np.ones(1)
        for nb, dj in zip(nbars, cut):
            if nb < 0:
                raise StructuralError("thermal occupation must be nonnegative")
            n = np.arange(dj)
            pj = (nb ** n) / (nb + 1) ** (n + 1) if nb > 0 else (n == 0).astype(float)
            diag = np.kron(diag, pj)
        leak = max(0.0, 1.0 - float(diag.sum()))
        req = None
        if leak_budget and np.max(nbars) > 0:
            q = np.max(nbars) / (np.max(nbars) + 1)
            req = int(math.ceil(math.log(leak_budget) / math.log(q))) + 1
        _leak_guard(leak, leak_budget, "thermal state", required_dim=req)
        return FockDensity(cut, np.diag(diag.astype(complex)), leak)

    raise StructuralError(f"unknown state kind {kind!r}")


def state_from_json(descriptor):
    """Build a state from a JSON descriptor, e.g.
    {"kind": "noon", "N": 3, "cutoff": 12} or
    {"kind": "tmsv", "r": 0.5, "phi": 0.0, "cutoff": 20}.

    Complex entries may be written as [re, im]. Cutoffs: either "cutoff"
    (shared scalar) or "cutoffs" (per mode).
    """
    obj = json.loads(descriptor) if isinstance(descriptor, str) else dict(descriptor)
    kind = obj.pop("kind", None)
    if kind is None:
        raise StructuralError("state descriptor needs a 'kind'")
    cut = obj.pop("cutoffs", None)
    if cut is None:
        cut = obj.pop("cutoff", None)
    else:
        obj.pop("cutoff", None)
    if cut is None:
        raise StructuralError("state descriptor needs 'cutoff' or 'cutoffs'")
    budget = obj.pop("leak_budget", DEFAULT_LEAK_BUDGET)

    def decode(v):
        if isinstance(v, (list, tuple)):
            if len(v) == 2 and all(isinstance(x, (int, float)) for x in v):
                return complex(v[0], v[1])
            return [decode(x) for x in v]
        return v

    params = {k: decode(v) for k, v in obj.items()}
    return make_state(kind, params, cut, leak_budget=budget)


# ---------------------------------------------------------------------------
# queries


def _dense_mode_ops(cutoffs):
    """Dense annihilation operators a_j on the product space."""
    ops = []
    for j, dj in enumerate(cutoffs):
        M = np.eye(1)
        for i, di in enumerate(cutoffs):
            M = np.kron(M, destroy(di) if i == j else np.eye(di))
        ops.append(M.astype(complex))
    return ops


def _ladder_expectations(state):
    m = state.n_modes
    alpha = np.zeros(m, dtype=complex)
    N = np.zeros((m, m), dtype=complex)
    P = np.zeros((m, m), dtype=complex)
    if isinstance(state, FockKet):
        w = state.norm2
        if w <= 0:
            raise StructuralError("state has no weight on the window")
        lowered = [_apply_axis(state.amps, destroy(dj), j)
                   for j, dj in enumerate(state.cutoffs)]
        for j in range(m):
            alpha[j] = np.vdot(state.amps, lowered[j]) / w
            for k in range(m):
                N[j, k] = np.vdot(lowered[j], lowered[k]) / w
                P[j, k] = np.vdot(
                    state.amps, _apply_axis(lowered[k], destroy(state.cutoffs[j]), j)
                ) / w
    else:
        tr = state.trace
        if tr <= 0:
            raise StructuralError("state has no weight on the window")
        ops = _dense_mode_ops(state.cutoffs)
        for j in range(m):
            alpha[j] = np.trace(state.rho @ ops[j]) / tr
            for k in range(m):
                N[j, k] = np.trace(state.rho @ ops[j].conj().T @ ops[k]) / tr
                P[j, k] = np.trace(state.rho @ ops[j] @ ops[k]) / tr
    return alpha, N, P


def moments(state):
    """First and symmetrized second moments of the windowed state."""
    m = state.n_modes
    alpha, N, P = _ladder_expectations(state)
    mean = np.empty(2 * m)
    mean[0::2] = 2 * alpha.real
    mean[1::2] = 2 * alpha.imag
    M2 = np.empty((2 * m, 2 * m))
    eye = np.eye(m)
    M2[0::2, 0::2] = 2 * P.real + 2 * N.real + eye
    M2[1::2, 1::2] = -2 * P.real + 2 * N.real + eye
    M2[0::2, 1::2] = 2 * N.imag + 2 * P.imag
    M2[1::2, 0::2] = M2[0::2, 1::2].T
    V = M2 - np.outer(mean, mean)
    return CovarianceData(mean=mean, cov=(V + V.T) / 2)


def characteristic_fn(state, z):
    """Wigner characteristic function chi(z) = <D(z)> at complex labels z."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    if z.shape != (state.n_modes,):
        raise StructuralError(f"need one complex label per mode, got {z.shape}")
    for zj, dj in zip(z, state.cutoffs):
        if abs(zj) ** 2 > 2 * dj:
            raise CutoffLeakError(
                f"displacement label |z|={abs(zj):.3f} overruns cutoff {dj}",
                required_dim=int(math.ceil(abs(zj) ** 2)) + 4,
            )
    mats = [displacement_matrix(zj, dj) for zj, dj in zip(z, state.cutoffs)]
    if isinstance(state, FockKet):
        out = state.amps
        for j, M in enumerate(mats):
            out = _apply_axis(out, M, j)
        return complex(np.vdot(state.amps, out) / state.norm2)
    U = mats[0]
    for M in mats[1:]:
        U = np.kron(U, M)
    return complex(np.trace(state.rho @ U) / state.trace)


def reduced_density(state, modes):
    """Reduced state on the given modes (ascending order)."""
    modes = sorted(set(int(j) for j in np.atleast_1d(modes)))
    m = state.n_modes
    if not modes or modes[0] < 0 or modes[-1] >= m:
        raise StructuralError(f"mode subset {modes} invalid for {m} modes")
    keep_cut = tuple(state.cutoffs[j] for j in modes)
    comp = [j for j in range(m) if j not in modes]
    if isinstance(state, FockKet):
        rho = np.tensordot(state.amps, state.amps.conj(), axes=(comp, comp))
        dk = int(np.prod(keep_cut))
        return FockDensity(keep_cut, rho.reshape(dk, dk), state.norm_leak)
    T = state.rho.reshape(state.cutoffs + state.cutoffs)
    for j in sorted(comp, reverse=True):
        T = np.trace(T, axis1=j, axis2=j + T.ndim // 2)
    dk = int(np.prod(keep_cut))
    return FockDensity(keep_cut, T.reshape(dk, dk), state.norm_leak)


def entanglement_entropy(ket, modes_a):
    """Entanglement entropy in bits of a ket across the bipartition
    (modes_a | rest)."""
    if not isinstance(ket, FockKet):
        raise StructuralError("entanglement entropy is defined here for kets")
    modes_a = sorted(set(int(j) for j in np.atleast_1d(modes_a)))
    m = ket.n_modes
    if not modes_a or len(modes_a) >= m or modes_a[0] < 0 or modes_a[-1] >= m:
        raise StructuralError("bipartition must be a proper nonempty mode subset")
    rest = [j for j in range(m) if j not in modes_a]
    mat = np.transpose(ket.amps, modes_a + rest).reshape(
        int(np.prod([ket.cutoffs[j] for j in modes_a])), -1
    )
    s = np.linalg.svd(mat, compute_uv=False)
    pvals = s ** 2
    pvals = pvals / pvals.sum()
    pvals = pvals[pvals > 1e-16]
    return float(-(pvals * np.log2(pvals)).sum())


def _as_normalized_density(state):
    if isinstance(state, FockKet):
        flat = state.amps.reshape(-1)
        flat = flat / np.linalg.norm(flat)
        return np.outer(flat, flat.conj())
    return state.rho / state.trace


def fidelity(a, b):
    """Uhlmann fidelity F in [0, 1] (squared-overlap convention for pure
    states), computed on the normalized windows."""
    _require_same_cutoffs(a, b)
    if isinstance(a, FockKet) and isinstance(b, FockKet):
        return float(abs(a.inner(b)) ** 2 / (a.norm2 * b.norm2))
    if isinstance(a, FockKet) or isinstance(b, FockKet):
        ket, den = (a, b) if isinstance(a, FockKet) else (b, a)
        v = ket.amps.reshape(-1) / math.sqrt(ket.norm2)
        return float(np.real(v.conj() @ (den.rho / den.trace) @ v))
    rho = _as_normalized_density(a)
    sig = _as_normalized_density(b)
    evals, vecs = np.linalg.eigh(rho)
    evals = np.clip(evals, 0.0, None)
    sq = (vecs * np.sqrt(evals)) @ vecs.conj().T
    inner = np.linalg.eigvalsh(sq @ sig @ sq)
    return float(np.sqrt(np.clip(inner, 0.0, None)).sum() ** 2)


def trace_distance(a, b):
    """Trace distance in [0, 1] on the normalized windows."""
    _require_same_cutoffs(a, b)
    if isinstance(a, FockKet) and isinstance(b, FockKet):
        return float(math.sqrt(max(0.0, 1.0 - fidelity(a, b))))
    diff = _as_normalized_density(a) - _as_normalized_density(b)
    return float(0.5 * np.abs(np.linalg.eigvalsh(diff)).sum())


def purity(state):
    """Tr[rho^2] of the normalized window."""
    if isinstance(state, FockKet):
        return 1.0
    tr = state.trace
    return float(np.vdot(state.rho, state.rho).real / tr ** 2)


def energy_moment(state, k=1):
    """Per-mode energy moment [<E_hat^k>]^{1/k} / m with
    E_hat = sum_j (n_j + 1/2)."""
    k = int(k)
    if k < 1:
        raise StructuralError("moment order k must be >= 1")
    m = state.n_modes
    grids = np.indices(state.cutoffs)
    energy = grids.sum(axis=0).astype(float) + 0.5 * m
    if isinstance(state, FockKet):
        w = np.abs(state.amps) ** 2 / state.norm2
    else:
        w = np.real(np.diag(state.rho)).reshape(state.cutoffs) / state.trace
    return float((w * energy ** k).sum() ** (1.0 / k) / m)
