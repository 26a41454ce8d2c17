"""Measurement simulation and moment estimation.

Heterodyne, homodyne, and photon-counting samplers over the Fock window, the
covariance/mean estimation routine built from them, median-of-means
aggregation, and the closed-form shot budget planner.

All samplers are bit-exact reproducible: every (state, seed, purpose) triple
derives its own counter-based stream, so results do not depend on call order
or worker count.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import (
    ConditioningError,
    CutoffLeakError,
    EnvelopeFailureError,
    EstimationAbortError,
    GridResolutionError,
    StructuralError,
)
from . import fock as fk
from .symplectic import symplectic_form

MIN_ACCEPTANCE = 1e-4
GRID_MASS_TOL = 1e-6
_REJECTION_BATCH_CAP = 500_000

_GRID_CACHE: dict = {}


def state_id(state):
    """Stable short identifier of the windowed state content."""
    h = hashlib.sha256()
    h.update(np.asarray(state.cutoffs, dtype=np.int64).tobytes())
    payload = state.amps if isinstance(state, fk.FockKet) else state.rho
    h.update(np.ascontiguousarray(payload).tobytes())
    return h.hexdigest()[:12]


def _stream(seed, *tags):
    parts = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        digest = hashlib.sha256(str(t).encode()).digest()
        parts.append(int.from_bytes(digest[:8], "big"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(parts)))


@dataclass
class HeterodyneSamples:
    shots: np.ndarray  # (M, m) complex outcomes, one row per copy
    seed: int
    state_id: str

    def __post_init__(self):
        self.shots = np.asarray(self.shots, dtype=complex)
        if self.shots.ndim != 2:
            raise StructuralError("shots must be a (M, modes) array")
        self.seed = int(self.seed)

    @property
    def M(self):
        return self.shots.shape[0]

    @property
    def n_modes(self):
        return self.shots.shape[1]

    def to_csv(self, path_or_buffer):
        cols = []
        for j in range(self.n_modes):
            cols += [f"re_g{j + 1}", f"im_g{j + 1}"]
        flat = np.empty((self.M, 2 * self.n_modes))
        flat[:, 0::2] = self.shots.real
        flat[:, 1::2] = self.shots.imag
        own = isinstance(path_or_buffer, (str, bytes))
        f = open(path_or_buffer, "w") if own else path_or_buffer
        try:
            f.write(f"# seed={self.seed} state={self.state_id}\n")
            f.write(",".join(cols) + "\n")
            np.savetxt(f, flat, delimiter=",", fmt="%.17g")
        finally:
            if own:
                f.close()


@dataclass
class EstimatedMoments:
    mean: np.ndarray
    cov: np.ndarray          # after the eps_v/2 nudge
    eps_v: float
    nudged: bool
    raw: np.ndarray          # pre-nudge symmetrized estimate

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        self.raw = np.asarray(self.raw, dtype=float)
        m = self.mean.size // 2
        omega = symplectic_form(m)
        low = float(np.linalg.eigvalsh(self.cov + 1j * omega).min())
        if low < -1e-10:
            raise StructuralError(
                f"nudged covariance violates physicality, min eig {low:.3e}"
            )


# ---------------------------------------------------------------------------
# heterodyne


def _diag_weights(state):
    if isinstance(state, fk.FockKet):
        w = np.abs(state.amps) ** 2
    else:
        w = np.real(np.diag(state.rho)).reshape(state.cutoffs)
    return np.clip(w, 0.0, None)


def _mode_mean_photons(state):
    w = _diag_weights(state)
    w = w / w.sum()
    means = []
    for j in range(w.ndim):
        axes = tuple(i for i in range(w.ndim) if i != j)
        pj = w.sum(axis=axes)
        means.append(float(pj @ np.arange(len(pj))))
    return np.array(means)


def _coherent_coeff_rows(gammas, d):
    """Fock coefficients of |gamma> for a batch of labels, one row each."""
    out = np.empty((gammas.shape[0], d), dtype=complex)
    out[:, 0] = np.exp(-np.abs(gammas) ** 2 / 2)
    for n in range(1, d):
        out[:, n] = out[:, n - 1] * gammas / math.sqrt(n)
    return out


def _husimi_batch(state, gam):
    """Q(gamma) = <gamma|rho|gamma> / pi^m for a batch of gamma rows."""
    m = state.n_modes
    rows = [_coherent_coeff_rows(gam[:, j], state.cutoffs[j]) for j in range(m)]
    if isinstance(state, fk.FockKet):
        T = np.tensordot(rows[0].conj(), state.amps, axes=(1, 0))
        for j in range(1, m):
            T = np.einsum("bn,bn...->b...", rows[j].conj(), T)
        return np.abs(T) ** 2 / math.pi ** m
    V = rows[0]
    for j in range(1, m):
        V = (V[:, :, None] * rows[j][:, None, :]).reshape(V.shape[0], -1)
    q = np.einsum("bi,ij,bj->b", V.conj(), state.rho, V).real
    return np.clip(q, 0.0, None) / math.pi ** m


def _envelope_params(state, margin):
    """Per-mode Gaussian dominating the Husimi density.

    Cauchy-Schwarz against the Fock diagonal gives Q(gamma) <= A(t) / pi^m *
    prod_j exp(-(1-t_j) |gamma_j|^2) with A(t) = sum_n w_n prod_j t_j^{-n_j},
    valid for kets and densities alike (w = Fock diagonal). t_j is chosen so
    the envelope has per-mode energy n_j + 1 + margin.
    """
    nbar = _mode_mean_photons(state)
    t = 1.0 - 1.0 / (nbar + 1.0 + margin)
    w = _diag_weights(state)
    w = w / w.sum()
    for j, dj in enumerate(state.cutoffs):
        shape = [1] * w.ndim
        shape[j] = dj
        w = w * (t[j] ** -np.arange(dj)).reshape(shape)
    A = float(w.sum())
    bound = A / float(np.prod(1.0 - t))  # Q <= bound * (normalized envelope)
    return t, A, bound


def sample_heterodyne(state, M, seed, envelope_margin=1.0, allow_grid_fallback=True):
    """Draw M joint heterodyne outcomes gamma from the Husimi density.

    Rejection sampling against a per-mode complex Gaussian envelope. When the
    analytic acceptance rate falls below 1e-4 the rejection stage is declared
    failed; with allow_grid_fallback the sampler switches to a mode-by-mode
    conditional inverse-CDF chain on planar grids instead of raising.
    """
    M = int(M)
    if M < 0:
        raise StructuralError("shot count must be nonnegative")
    sid = state_id(state)
    if M == 0:
        return HeterodyneSamples(np.zeros((0, state.n_modes), complex), seed, sid)
    try:
        shots = _heterodyne_rejection(state, M, seed, envelope_margin)
    except EnvelopeFailureError:
        if not allow_grid_fallback:
            raise
        shots = _heterodyne_grid_chain(state, M, seed)
    return HeterodyneSamples(shots, seed, sid)


def _heterodyne_rejection(state, M, seed, margin):
    t, A, bound = _envelope_params(state, margin)
    acceptance = 1.0 / bound
    if acceptance < MIN_ACCEPTANCE:
        raise EnvelopeFailureError(
            f"rejection acceptance {acceptance:.3e} below {MIN_ACCEPTANCE:.0e}"
        )
    rng = _stream(seed, state_id(state), "heterodyne-rejection")
    m = state.n_modes
    sigma = np.sqrt(1.0 / (2.0 * (1.0 - t)))   # per-quadrature envelope std
    out = np.empty((M, m), dtype=complex)
    got = 0
    log_pi_m = m * math.log(math.pi)
    while got < M:
        B = min(int((M - got) * bound * 1.2) + 64, _REJECTION_BATCH_CAP)
        gam = (rng.normal(size=(B, m)) + 1j * rng.normal(size=(B, m))) * sigma
        q = _husimi_batch(state, gam)
        # ratio Q / (bound * envelope), in log space for stability
        expo = ((1.0 - t) * np.abs(gam) ** 2).sum(axis=1)
        with np.errstate(divide="ignore"):
            logr = np.log(q) + log_pi_m + expo - math.log(A)
        keep = np.log(rng.uniform(size=B)) < logr
        idx = np.flatnonzero(keep)[: M - got]
        out[got : got + idx.size] = gam[idx]
        got += idx.size
    return out


def _mode_grid(state, mode, points=161):
    """Planar grid and coherent coefficient rows for one mode, cached."""
    key = ("hetgrid", state_id(state), int(mode), points)
    hit = _GRID_CACHE.get(key)
    if hit is None:
        nbar = _mode_mean_photons(state)[mode]
        extent = 2 * math.sqrt(nbar + 1) + 5.0
        axis = np.linspace(-extent, extent, points)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        labels = (gx + 1j * gy).reshape(-1)
        rows = _coherent_coeff_rows(labels, state.cutoffs[mode])
        hit = (labels, rows, axis[1] - axis[0])
        _GRID_CACHE[key] = hit
    return hit


def _cell_density(red, rows):
    dens = np.einsum("pi,ij,pj->p", rows.conj(), red, rows).real
    return np.clip(dens, 0.0, None) / math.pi


def _check_grid_mass(dens, cell_area, weight):
    total = float(dens.sum() * cell_area)
    if weight <= 0 or total < weight * (1.0 - GRID_MASS_TOL) - 1e-300:
        raise GridResolutionError(
            f"grid holds {total:.9e} of {weight:.9e} probability mass"
        )


def _first_mode_reduced(cond, is_ket):
    if is_ket:
        rest = list(range(1, cond.ndim))
        return np.tensordot(cond, cond.conj(), axes=(rest, rest))
    half = cond.ndim // 2
    red = cond
    for _ in range(half - 1):
        red = np.trace(red, axis1=1, axis2=1 + red.ndim // 2)
    return red


def _condition_first_mode(cond, vec, is_ket):
    if is_ket:
        return np.tensordot(vec, cond, axes=(0, 0))
    half = cond.ndim // 2
    out = np.tensordot(vec, cond, axes=(0, 0))
    return np.tensordot(vec.conj(), out, axes=(0, half - 1))


def _heterodyne_grid_chain(state, M, seed):
    """Mode-by-mode conditional sampling on planar grids per mode."""
    rng = _stream(seed, state_id(state), "heterodyne-grid")
    m = state.n_modes
    is_ket = isinstance(state, fk.FockKet)
    shots = np.empty((M, m), dtype=complex)

    # mode 0 marginal is shot-independent: sample it vectorized
    root = state.amps if is_ket else state.rho.reshape(state.cutoffs * 2)
    labels0, rows0, dx0 = _mode_grid(state, 0)
    red0 = _first_mode_reduced(root, is_ket)
    dens0 = _cell_density(red0, rows0)
    _check_grid_mass(dens0, dx0 * dx0, float(np.trace(red0).real))
    cells = rng.choice(dens0.size, size=M, p=dens0 / dens0.sum())
    jit = (rng.uniform(-0.5, 0.5, M) + 1j * rng.uniform(-0.5, 0.5, M)) * dx0
    shots[:, 0] = labels0[cells] + jit
    if m == 1:
        return shots

    grids = [_mode_grid(state, j) for j in range(m)]
    for shot in range(M):
        cond = root
        for j in range(1, m):
            vec = _coherent_coeff_rows(shots[shot, j - 1 : j], cond.shape[0])[0]
            cond = _condition_first_mode(cond, vec.conj(), is_ket)
            labels, rows, dx = grids[j]
            red = _first_mode_reduced(cond, is_ket)
            dens = _cell_density(red, rows)
            _check_grid_mass(dens, dx * dx, float(np.trace(red).real))
            cell = rng.choice(dens.size, p=dens / dens.sum())
            g = labels[cell] + (rng.uniform(-0.5, 0.5)
                                + 1j * rng.uniform(-0.5, 0.5)) * dx
            shots[shot, j] = g
    return shots


# ---------------------------------------------------------------------------
# homodyne


def _hermite_functions(x, d):
    """phi_n(x) for n < d in hbar = 2 units (vacuum marginal = N(0,1))."""
    B = np.empty((x.size, d))
    B[:, 0] = (2 * math.pi) ** -0.25 * np.exp(-x ** 2 / 4)
    if d > 1:
        B[:, 1] = x * B[:, 0]
    for n in range(1, d - 1):
        B[:, n + 1] = (x * B[:, n] - math.sqrt(n) * B[:, n - 1]) / math.sqrt(n + 1)
    return B


def _rotated_reduced(state, mode, theta):
    red = fk.reduced_density(state, [mode])
    d = red.cutoffs[0]
    phase = np.exp(-1j * float(theta) * np.arange(d))
    return (phase[:, None] * red.rho) * phase.conj()[None, :]


def sample_homodyne(state, mode, theta, M, seed, points=4001):
    """Sample the rotated quadrature x_theta = q cos(theta) + p sin(theta) of
    one mode from its exact Hermite-function marginal via inverse CDF."""
    key = ("hom", state_id(state), int(mode), round(float(theta), 12), points)
    hit = _GRID_CACHE.get(key)
    if hit is None:
        rho = _rotated_reduced(state, mode, theta)
        d = rho.shape[0]
        weight = float(np.trace(rho).real)
        nbar = float(np.real(np.diag(rho)) @ np.arange(d)) / weight
        extent = 8.5 * math.sqrt(2 * nbar + 1) + 4.0
        x = np.linspace(-extent, extent, points)
        B = _hermite_functions(x, d)
        p = np.clip(np.einsum("xn,nm,xm->x", B, rho, B).real, 0.0, None)
        cdf = cumulative_trapezoid(p, x, initial=0.0)
        if cdf[-1] < weight * (1.0 - GRID_MASS_TOL):
            raise GridResolutionError(
                f"quadrature grid holds {cdf[-1]:.9f} of {weight:.9f} mass"
            )
        hit = (x, cdf / cdf[-1])
        _GRID_CACHE[key] = hit
    x, cdf = hit
    rng = _stream(seed, key[1], "homodyne", mode, key[3])
    return np.interp(rng.uniform(size=int(M)), cdf, x)


def sample_joint_homodyne(state, modes, thetas, M, seed):
    """Joint samples of two commuting rotated quadratures on distinct modes,
    drawn from the exact two-mode joint density on a planar grid."""
    j, k = int(modes[0]), int(modes[1])
    if j == k:
        raise StructuralError("joint homodyne needs two distinct modes")
    swap = j > k
    if swap:
        j, k = k, j
        thetas = (thetas[1], thetas[0])
    th = (round(float(thetas[0]), 12), round(float(thetas[1]), 12))
    key = ("joint", state_id(state), j, k, th[0], th[1])
    hit = _GRID_CACHE.get(key)
    if hit is None:
        red = fk.reduced_density(state, [j, k])
        d1, d2 = red.cutoffs
        ph1 = np.exp(-1j * th[0] * np.arange(d1))
        ph2 = np.exp(-1j * th[1] * np.arange(d2))
        T = red.rho.reshape(d1, d2, d1, d2)
        T = np.einsum("a,b,abcd,c,d->abcd", ph1, ph2, T, ph1.conj(), ph2.conj())
        points = 321
        axes = []
        for nbar in _mode_mean_photons(red):
            extent = 7.5 * math.sqrt(2 * nbar + 1) + 4.0
            axes.append(np.linspace(-extent, extent, points))
        B1 = _hermite_functions(axes[0], d1)
        B2 = _hermite_functions(axes[1], d2)
        # p(x,y) = sum_{abcd} T_{ab,cd} phi_a(x) phi_c(x) phi_b(y) phi_d(y)
        mid = np.einsum("xa,abcd,xc->xbd", B1, T, B1)
        p = np.clip(np.einsum("yb,xbd,yd->xy", B2, mid, B2).real, 0.0, None)
        dx = axes[0][1] - axes[0][0]
        dy = axes[1][1] - axes[1][0]
        _check_grid_mass(p, dx * dy, float(np.trace(red.rho).real))
        hit = (axes, p.reshape(-1) / p.sum(), p.shape, dx, dy)
        _GRID_CACHE[key] = hit
    axes, flat_p, shape, dx, dy = hit
    rng = _stream(seed, key[1], "joint-homodyne", j, k, th[0], th[1])
    cells = rng.choice(flat_p.size, size=int(M), p=flat_p)
    ix, iy = np.unravel_index(cells, shape)
    out = np.empty((int(M), 2))
    out[:, 0] = axes[0][ix] + rng.uniform(-0.5, 0.5, size=int(M)) * dx
    out[:, 1] = axes[1][iy] + rng.uniform(-0.5, 0.5, size=int(M)) * dy
    return out if not swap else out[:, ::-1]


# ---------------------------------------------------------------------------
# photon counting


def sample_photon_count(state, mode, M, seed, pre_squeeze=None,
                        leak_budget=fk.DEFAULT_LEAK_BUDGET):
    """Sample photon counts of one mode, optionally squeezing it first."""
    red = fk.reduced_density(state, [mode])
    rho = red.rho
    d = red.cutoffs[0]
    tag = "count"
    if pre_squeeze is not None and abs(pre_squeeze) > 0:
        r = float(pre_squeeze)
        before = float(np.trace(rho).real)
        # the padded expm behind _mode_matrix caps the buildable window at
        # d_max; grow d_out inside that until the squeezed tail fits the budget
        d_max = max(d, int((fk._MODE_OP_DIM_LIMIT - 24) / math.exp(2 * abs(r))))
        d_out = min(int(math.ceil(d * math.exp(2 * abs(r)))) + 16, d_max)
        while True:
            S = fk._mode_matrix("squeeze", r, max(d, d_out))[:d_out, :d]
            out = S @ rho @ S.conj().T
            lost = max(0.0, before - float(np.trace(out).real))
            if lost + red.norm_leak <= leak_budget:
                break
            if d_out >= d_max:
                raise CutoffLeakError(
                    f"pre-squeeze r={r} loses {lost:.3e} past the window",
                    required_dim=2 * d_out,
                )
            d_out = min(2 * d_out, d_max)
        rho = out
        tag = f"count-squeezed-{round(r, 12)}"
    p = np.clip(np.real(np.diag(rho)), 0.0, None)
    rng = _stream(seed, state_id(state), tag, mode)
    return rng.choice(p.size, size=int(M), p=p / p.sum())


def solve_diagonal_moments(n1, n2, r, means=(0.0, 0.0)):
    """Recover (var q, var p) of one mode from plain and squeezed mean counts.

    Solves { <q^2> + <p^2> = 4 n1 + 2 ;  e^{-2r} <q^2> + e^{2r} <p^2> = 4 n2 + 2 }
    and subtracts the supplied means. The count probe applies
    exp(r (a^2 - a^dag^2) / 2), which scales q by e^{-r} in the Heisenberg
    picture, hence the e^{-2r} weight on <q^2>.
    """
    r = float(r)
    ep, em = math.exp(2 * r), math.exp(-2 * r)
    det = ep - em
    if abs(det) < 1e-6:
        raise ConditioningError(f"squeeze probe r={r} makes the system singular")
    a = 4.0 * float(n1) + 2.0
    b = 4.0 * float(n2) + 2.0
    q2 = (ep * a - b) / det
    p2 = (b - em * a) / det
    return q2 - float(means[0]) ** 2, p2 - float(means[1]) ** 2


# ---------------------------------------------------------------------------
# aggregation and the moment estimator


def median_of_means(samples, k):
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise StructuralError("median of means needs at least one sample")
    k = int(k)
    if k < 1 or k > samples.size:
        raise StructuralError(f"group count {k} invalid for {samples.size} samples")
    return float(np.median([g.mean() for g in np.array_split(samples, k)]))


def default_group_count(delta, M):
    k = int(math.ceil(8 * math.log(1 / float(delta))))
    return max(1, min(k, int(M) // 2 if M >= 2 else 1))


def plan_moment_budget(m, E_II, eps_v, delta_v):
    """Closed-form copy budget reaching accuracy eps_v with failure rate
    delta_v for an m-mode state with second energy moment bound E_II."""
    m = int(m)
    if m < 1 or E_II <= 0 or not (0 < eps_v <= 1) or not (0 < delta_v < 1):
        raise StructuralError("need m >= 1, E_II > 0, 0 < eps_v <= 1, 0 < delta_v < 1")
    inner = (
        68 * math.log2(2 * (2 * m * m + 3 * m) / delta_v)
        * 200 * (8 * m * m * E_II ** 2 + 3 * m) / eps_v ** 2
    )
    return (m + 3) * int(math.ceil(inner))


def estimate_moments(state, eps_v, delta_v, M_v, seed, probe_r=0.5, groups=None):
    """Estimate mean and covariance of a state from simulated measurements.

    Measurement layout: one heterodyne batch (means, plus the within-mode
    {q,p} covariance from the Re*Im cross moment), per mode one plain and one
    squeezed photon-counting batch (diagonal entries), per mode two local
    homodyne batches, and per pair of modes four joint homodyne batches
    (cross covariances as product mean minus mean product). Every scalar is
    aggregated with median-of-means; the assembled matrix gets the eps_v/2
    diagonal nudge and a physicality check, aborting on failure.
    """
    m = state.n_modes
    pairs = [(j, k) for j in range(m) for k in range(j + 1, m)]
    n_settings = 1 + 4 * m + 4 * len(pairs)
    M_each = int(M_v) // n_settings
    if M_each < 6:
        raise StructuralError(
            f"budget M_v={M_v} too small for {n_settings} measurement settings"
        )
    if groups is None:
        groups = default_group_count(delta_v, M_each)
    k_groups = max(1, min(int(groups), M_each // 2))

    def mom(values):
        return median_of_means(values, k_groups)

    het = sample_heterodyne(state, M_each, seed).shots
    mean = np.empty(2 * m)
    qp = np.empty(m)
    for j in range(m):
        re, im = het[:, j].real, het[:, j].imag
        mean[2 * j] = mom(2 * re)
        mean[2 * j + 1] = mom(2 * im)
        qp[j] = mom(4 * re * im) - mean[2 * j] * mean[2 * j + 1]

    V = np.zeros((2 * m, 2 * m))
    for j in range(m):
        n1 = mom(sample_photon_count(state, j, M_each, seed).astype(float))
        n2 = mom(sample_photon_count(state, j, M_each, seed,
                                     pre_squeeze=probe_r).astype(float))
        vq, vp = solve_diagonal_moments(n1, n2, probe_r,
                                        (mean[2 * j], mean[2 * j + 1]))
        V[2 * j, 2 * j] = vq
        V[2 * j + 1, 2 * j + 1] = vp
        V[2 * j, 2 * j + 1] = V[2 * j + 1, 2 * j] = qp[j]

    local = {}
    for j in range(m):
        for a, theta in enumerate((0.0, math.pi / 2)):
            local[(j, a)] = mom(sample_homodyne(state, j, theta, M_each, seed))
    for (j, k) in pairs:
        for a in range(2):
            for b in range(2):
                th = (a * math.pi / 2, b * math.pi / 2)
                xy = sample_joint_homodyne(state, (j, k), th, M_each, seed)
                cov = mom(xy[:, 0] * xy[:, 1]) - local[(j, a)] * local[(k, b)]
                V[2 * j + a, 2 * k + b] = V[2 * k + b, 2 * j + a] = cov

    raw = (V + V.T) / 2
    nudged_cov = raw + (float(eps_v) / 2) * np.eye(2 * m)
    omega = symplectic_form(m)
    low = float(np.linalg.eigvalsh(nudged_cov + 1j * omega).min())
    if low < -1e-10:
        raise EstimationAbortError(
            f"estimate stayed unphysical after the eps_v/2 nudge "
            f"(min eig {low:.3e}); declaring failure"
        )
    raw_low = float(np.linalg.eigvalsh(raw + 1j * omega).min())
    return EstimatedMoments(mean=mean, cov=nudged_cov, eps_v=float(eps_v),
                            nudged=raw_low < 0.0, raw=raw)
