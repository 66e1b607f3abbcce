"""Saddle points and Gaussian fluctuation kernels of the discrete action.

The imaginary-time step Lagrangian

    L_t = -log <Psi_t | Psi_{t+1}> + dt <Psi_t | H | Psi_{t+1}> / <Psi_t | Psi_{t+1}>

is expanded to quadratic order around the classical saddle,
L_t = L0 + psi_t . L2 . psi_t + psi_t . L2D . psi_{t+1}, and the
frequency-space kernel G_w^-1 = (L2 + L2^T) + L2D e^{i w dt} + L2D^T e^{-i w dt}
is assembled from the blocks.  Blocks are obtained by central finite
differences with one Richardson step; the stencil evaluations run in
80-bit extended precision where available, which keeps the noise floor of
the assembled determinants around 1e-12 instead of 1e-8.

Fluctuation coordinates are (dn, dphi) per bosonic mode and the scaled
pair (sqrt(S) dtheta, sqrt(S) sin(theta) dphi) on the Bloch sphere, which
normalizes the spin determinant to the bosonic convention.

The continuum (CPI) kernel is fixed artifact-wide by the canonical
symplectic normalization: Gbar_w^-1 = (beta/dt) [S0 + i w dt A/|A|] with
S0 the static kernel and A the antisymmetric Berry block.  For a gapless
mode this makes det Gbar_w^-1 = (beta w)^2 exactly; for a gapped lattice
mode it gives beta^2 (w^2 + E_k^2) with E_k the Bogoliubov energy, so
determinant ratios stay finite everywhere on and inside the contour
|w| = pi/dt.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DerivativeError,
    DomainError,
    OptimizationError,
    SingularOverlapError,
)
from .models import (
    BOSE_HUBBARD_LATTICE,
    BOSE_HUBBARD_SITE,
    COMPLEX_DTYPE,
    REAL_DTYPE,
    UNIAXIAL_SPIN,
    CoherentPoint,
    HilbertConfig,
    ModelSpec,
    bose_coherent_amplitudes,
    coherent_vector,
    lattice_band,
    lattice_bonds,
    normalized_matrix_element,
    overlap,
    spin_coherent_amplitudes,
    validate_point,
)

__all__ = [
    "Discretization",
    "HessianBlocks",
    "discrete_lagrangian",
    "find_saddle",
    "classical_energy",
    "hessian_blocks",
    "bloch_blocks",
    "assemble_kernel",
    "kernel_det",
    "cpi_kernel",
    "cpi_det",
    "det_ratio",
    "det_ratio_function",
    "lattice_modes",
    "kernel_det_closed",
    "lattice_saddle_density",
    "check_discretization",
    "blocks_to_json",
    "blocks_from_json",
]


@dataclass(frozen=True)
class Discretization:
    """Inverse temperature beta sliced into an odd number of steps."""

    beta: float
    n_t: int

    def __post_init__(self):
        if self.beta <= 0:
            raise DomainError("beta must be positive")
        if self.n_t < 1 or self.n_t % 2 == 0:
            raise DomainError(f"n_t must be odd and positive, got {self.n_t}")

    @property
    def dt(self) -> float:
        return self.beta / self.n_t


def lattice_saddle_density(model: ModelSpec) -> float:
    """Uniform condensate density (mu + 2 J D)/U of the lattice saddle."""
    return max((model.mu + 2.0 * model.J * model.D) / model.U, 0.0)


def check_discretization(model: ModelSpec, d: Discretization) -> None:
    """Positivity of the static determinant factors: dt * bound < 1."""
    if model.kind == BOSE_HUBBARD_SITE:
        bound, name = model.mu, "mu"
    elif model.kind == UNIAXIAL_SPIN:
        bound, name = model.S - 0.5, "S - 1/2"
    else:
        nbar = lattice_saddle_density(model)
        bound = model.U * nbar + 4.0 * model.J * model.D
        name = "U nbar + 4 J D"
    if bound * d.dt >= 1.0:
        raise DomainError(
            f"discretization violates dt * ({name}) < 1: "
            f"{bound * d.dt:.4f} at n_t={d.n_t}, beta={d.beta}")


@dataclass(frozen=True)
class HessianBlocks:
    """Quadratic expansion of one Lagrangian step.

    L2 couples a time slice to itself (symmetric representative), L2D the
    slice to its successor.  L0 is the classical action density per step.
    """

    L0: float
    L2: np.ndarray
    L2D: np.ndarray
    dt: float
    label: str = ""

    def __post_init__(self):
        for a in (self.L2, self.L2D):
            a.setflags(write=False)

    @property
    def m(self) -> int:
        return self.L2.shape[0]


def blocks_to_json(b: HessianBlocks) -> str:
    return json.dumps({
        "L0": b.L0,
        "L2_re": np.real(b.L2).tolist(),
        "L2_im": np.imag(b.L2).tolist(),
        "L2D_re": np.real(b.L2D).tolist(),
        "L2D_im": np.imag(b.L2D).tolist(),
        "dt": b.dt,
        "label": b.label,
    })


def blocks_from_json(text: str) -> HessianBlocks:
    d = json.loads(text)
    L2 = np.asarray(d["L2_re"], dtype=float) + 1j * np.asarray(d["L2_im"], dtype=float)
    L2D = np.asarray(d["L2D_re"], dtype=float) + 1j * np.asarray(d["L2D_im"], dtype=float)
    return HessianBlocks(L0=float(d["L0"]), L2=L2, L2D=L2D, dt=float(d["dt"]),
                         label=d.get("label", ""))


# ---------------------------------------------------------------------------
# step Lagrangian
# ---------------------------------------------------------------------------

def discrete_lagrangian(model: ModelSpec, p_t: CoherentPoint, p_next: CoherentPoint,
                        dt: float, h: HilbertConfig) -> complex:
    """One-step Lagrangian with the principal branch of the overlap log."""
    validate_point(model, p_t)
    validate_point(model, p_next)
    if model.kind == BOSE_HUBBARD_LATTICE:
        f = _lattice_fluct_lagrangian(model, np.asarray(p_t.params[0::2]), h, dt,
                                      base_phi=np.asarray(p_t.params[1::2]),
                                      other=(np.asarray(p_next.params[0::2]),
                                             np.asarray(p_next.params[1::2])))
        return f
    ov = overlap(model, p_t, p_next, h)
    if abs(ov) < 1e-12:
        raise SingularOverlapError("vanishing overlap between consecutive slices")
    elem = normalized_matrix_element(model, p_t, p_next, h)
    return complex(-np.log(ov) + dt * elem)


def _lattice_fluct_lagrangian(model, ns_t, h, dt, base_phi, other):
    """Direct factorized evaluation used by the public lattice path."""
    ns_s, phis_s = other
    f = _make_lattice_lagrangian(model, h, dt, dtype=np.complex128)
    z = np.concatenate([ns_t, base_phi, ns_s, phis_s])
    return complex(f(z, absolute=True))


# ---------------------------------------------------------------------------
# extended-precision fluctuation Lagrangians
# ---------------------------------------------------------------------------

def _mode_tables(model: ModelSpec, h: HilbertConfig, dtype):
    n_max = h.n_max
    ks = np.arange(n_max + 1, dtype=REAL_DTYPE if dtype == COMPLEX_DTYPE else np.float64)
    e_site = (0.5 * model.U * ks * (ks - 1.0) - model.mu * ks).astype(dtype)
    sq = np.sqrt(ks[1:]).astype(dtype)  # sq[k] = sqrt(k+1) for k = 0..n_max-1
    return e_site, sq


def _make_site_lagrangian(model: ModelSpec, h: HilbertConfig, dt: float,
                          nbar: float, dtype=COMPLEX_DTYPE) -> Callable:
    e_site, _ = _mode_tables(model, h, dtype)
    n_max = h.n_max
    dt_c = dtype(dt)

    def f(z):
        v1 = bose_coherent_amplitudes(nbar + z[0], z[1], n_max, dtype=dtype)
        v2 = bose_coherent_amplitudes(nbar + z[2], z[3], n_max, dtype=dtype)
        ov = np.sum(np.conj(v1) * v2)
        elem = np.sum(np.conj(v1) * e_site * v2)
        return -np.log(ov) + dt_c * elem / ov

    return f


def _make_spin_lagrangian(model: ModelSpec, dt: float, theta_bar: float,
                          dtype=COMPLEX_DTYPE) -> Callable:
    S = model.S
    m = np.arange(-S, S + 1.0)
    hdiag = (m ** 2).astype(dtype)
    sc = math.sqrt(S)
    sth = math.sin(theta_bar)

    def f(z):
        v1 = spin_coherent_amplitudes(S, theta_bar + z[0] / sc, z[1] / (sc * sth), dtype=dtype)
        v2 = spin_coherent_amplitudes(S, theta_bar + z[2] / sc, z[3] / (sc * sth), dtype=dtype)
        ov = np.sum(np.conj(v1) * v2)
        elem = np.sum(np.conj(v1) * hdiag * v2)
        return -np.log(ov) + dtype(dt) * elem / ov

    return f


def _make_lattice_lagrangian(model: ModelSpec, h: HilbertConfig, dt: float,
                             nbar: float | None = None, dtype=COMPLEX_DTYPE) -> Callable:
    """Factorized product-state Lagrangian, O(N_s) per evaluation.

    Coordinates: z = [dn_t(0..Ns-1), dphi_t, dn_{t+1}, dphi_{t+1}].
    The per-site overlaps and the hopping bilinears are single-mode
    quantities, so no many-body Hilbert space is ever built.
    """
    e_site, sq = _mode_tables(model, h, dtype)
    n_max = h.n_max
    Ns = model.n_sites
    bonds = lattice_bonds(model)
    J = model.J

    def f(z, absolute=False):
        base = 0.0 if absolute else nbar
        v1 = [bose_coherent_amplitudes(base + z[i], z[Ns + i], n_max, dtype=dtype)
              for i in range(Ns)]
        v2 = [bose_coherent_amplitudes(base + z[2 * Ns + i], z[3 * Ns + i], n_max, dtype=dtype)
              for i in range(Ns)]
        ov = np.array([np.sum(np.conj(a) * b) for a, b in zip(v1, v2)])
        if np.any(np.abs(ov) < 1e-12):
            raise SingularOverlapError("vanishing per-site overlap on the lattice")
        eu = np.array([np.sum(np.conj(a) * e_site * b) for a, b in zip(v1, v2)]) / ov
        # normalized <a^dag> on the bra side and <a> on the ket side
        ad = np.array([np.sum(np.conj(a[1:]) * sq * b[:-1]) for a, b in zip(v1, v2)]) / ov
        an = np.array([np.sum(np.conj(a[:-1]) * sq * b[1:]) for a, b in zip(v1, v2)]) / ov
        hop = sum(ad[i] * an[j] + ad[j] * an[i] for (i, j) in bonds)
        return -np.sum(np.log(ov)) + dtype(dt) * (np.sum(eu) - J * hop)

    return f


# ---------------------------------------------------------------------------
# classical energy and saddle search
# ---------------------------------------------------------------------------

def classical_energy(model: ModelSpec, p: CoherentPoint, h: HilbertConfig) -> float:
    """Diagonal expectation <p|H|p>, the classical energy surface."""
    if model.kind == BOSE_HUBBARD_LATTICE:
        ns = np.asarray(p.params[0::2], dtype=float)
        phis = np.asarray(p.params[1::2], dtype=float)
        return float(np.real(_energy_lattice(model, h)(np.concatenate([ns, phis]))))
    return float(np.real(normalized_matrix_element(model, p, p, h)))


def _energy_site(model, h):
    e_site, _ = _mode_tables(model, h, COMPLEX_DTYPE)
    n_max = h.n_max

    def E(x):
        v = bose_coherent_amplitudes(x[0], 0.0, n_max, dtype=COMPLEX_DTYPE)
        return np.real(np.sum(np.conj(v) * e_site * v))

    return E


def _energy_spin(model):
    S = model.S
    m = np.arange(-S, S + 1.0)
    hdiag = (m ** 2).astype(COMPLEX_DTYPE)

    def E(x):
        v = spin_coherent_amplitudes(S, x[0], 0.0, dtype=COMPLEX_DTYPE)
        return np.real(np.sum(np.conj(v) * hdiag * v))

    return E


def _energy_lattice(model, h):
    """Energy of a general product state (n_i, phi_i); used uniformly."""
    e_site, sq = _mode_tables(model, h, COMPLEX_DTYPE)
    n_max = h.n_max
    Ns = model.n_sites
    bonds = lattice_bonds(model)

    def E(x):
        ns, phis = x[:Ns], x[Ns:]
        vs = [bose_coherent_amplitudes(ns[i], phis[i], n_max, dtype=COMPLEX_DTYPE)
              for i in range(Ns)]
        eu = sum(np.sum(np.conj(v) * e_site * v) for v in vs)
        ad = np.array([np.sum(np.conj(v[1:]) * sq * v[:-1]) for v in vs])
        an = np.conj(ad)
        hop = sum(ad[i] * an[j] + ad[j] * an[i] for (i, j) in bonds)
        return np.real(eu - model.J * hop)

    return E


def _uniform_energy_lattice(model, h):
    inner = _energy_lattice(model, h)
    Ns = model.n_sites

    def E(x):
        return inner(np.concatenate([np.full(Ns, x[0]), np.zeros(Ns)]))

    return E


def find_saddle(model: ModelSpec, h: HilbertConfig | None = None,
                gtol: float = 1e-10, max_iter: int = 500) -> CoherentPoint:
    """Minimize the classical energy by projected gradient descent.

    The global phase is gauge-fixed to zero, radial coordinates are kept
    on their physical bounds, and the step length is found by
    backtracking.  The lattice saddle is searched within the uniform
    family, the only one supported here.
    """
    if h is None:
        h = HilbertConfig(n_max=1) if model.kind == UNIAXIAL_SPIN else HilbertConfig(40)
    if model.kind == BOSE_HUBBARD_SITE:
        E, x0, lo, hi = _energy_site(model, h), [max(model.mu / model.U, 0.0)], [0.0], [np.inf]
    elif model.kind == UNIAXIAL_SPIN:
        if model.S == 0.5:
            # Sz^2 is proportional to the identity: the energy surface is
            # flat and every point is a saddle; return the equatorial
            # representative for continuity with S > 1/2
            return CoherentPoint((math.pi / 2, 0.0))
        E, x0, lo, hi = _energy_spin(model), [math.pi / 2 * 0.9], [0.0], [math.pi]
    else:
        E, x0 = _uniform_energy_lattice(model, h), [lattice_saddle_density(model)]
        lo, hi = [0.0], [np.inf]
    x = _projected_descent(E, np.asarray(x0, dtype=float),
                           np.asarray(lo), np.asarray(hi), gtol, max_iter)
    if model.kind == BOSE_HUBBARD_SITE:
        return CoherentPoint((x[0], 0.0))
    if model.kind == UNIAXIAL_SPIN:
        return CoherentPoint((x[0], 0.0))
    return CoherentPoint(tuple(v for n in x[0:1] for _ in range(model.n_sites) for v in (n, 0.0)))


def _num_gradient(E, x, lo, hi, step=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        hp = min(step, (hi[i] - x[i]) if np.isfinite(hi[i]) else step)
        hm = min(step, x[i] - lo[i])
        if hm <= 0:  # sitting on the lower bound
            g[i] = (E(x + step * _unit(len(x), i)) - E(x)) / step
        elif hp <= 0:
            g[i] = (E(x) - E(x - step * _unit(len(x), i))) / step
        else:
            hh = min(hp, hm)
            e = _unit(len(x), i)
            g[i] = (E(x + hh * e) - E(x - hh * e)) / (2 * hh)
    return g


def _unit(n, i):
    e = np.zeros(n)
    e[i] = 1.0
    return e


def _projected_gradient(g, x, lo, hi):
    pg = g.copy()
    at_lo = (x <= lo) & (g > 0)
    at_hi = (x >= hi) & (g < 0)
    pg[at_lo | at_hi] = 0.0
    return pg


def _projected_descent(E, x, lo, hi, gtol, max_iter):
    """Armijo-backtracked projected gradient descent plus a Newton polish.

    Energy comparisons cannot certify descent once the true decrease falls
    below the floating-point resolution of E, which happens well before
    the gradient reaches gtol; from there a diagonal Newton step on the
    free coordinates finishes the job against the gradient directly.
    """
    t = 1.0
    fx = E(x)
    best = (x.copy(), np.inf)
    for _ in range(max_iter):
        g = _num_gradient(E, x, lo, hi)
        pg = _projected_gradient(g, x, lo, hi)
        res = float(np.max(np.abs(pg)))
        if res < best[1]:
            best = (x.copy(), res)
        if res <= gtol:
            return x
        t = min(t * 2.0, 1e6)
        while t > 1e-18:
            xn = np.clip(x - t * pg, lo, hi)
            fn = E(xn)
            if fn <= fx - 1e-4 * np.dot(pg, np.asarray(x - xn, dtype=float)):
                x, fx = xn, fn
                break
            t /= 2.0
        else:
            break  # descent no longer resolvable in E; switch to the polish
    for _ in range(12):
        g = _num_gradient(E, x, lo, hi)
        pg = _projected_gradient(g, x, lo, hi)
        res = float(np.max(np.abs(pg)))
        if res < best[1]:
            best = (x.copy(), res)
        if res <= gtol:
            return x
        step = np.zeros_like(x)
        h2 = 1e-4
        for i in np.nonzero(pg)[0]:
            e = _unit(len(x), i)
            curv = float((E(x + h2 * e) - 2 * E(x) + E(x - h2 * e)) / h2 ** 2)
            step[i] = pg[i] / curv if curv > 1e-8 else pg[i]
        x = np.clip(x - step, lo, hi)
    raise OptimizationError(
        f"saddle search stalled with residual {best[1]:.2e} (gtol {gtol:.1e})",
        best_point=best[0], residual=best[1])


# ---------------------------------------------------------------------------
# finite-difference Hessian blocks
# ---------------------------------------------------------------------------

_FD_MIN, _FD_MAX = 1e-6, 0.25


def _fd_hessian(f, dim: int, hstep: float) -> np.ndarray:
    H = np.zeros((dim, dim), dtype=COMPLEX_DTYPE)
    f0 = f(np.zeros(dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = hstep
        H[i, i] = (f(e) - 2 * f0 + f(-e)) / REAL_DTYPE(hstep) ** 2
        for j in range(i + 1, dim):
            u = np.zeros(dim)
            u[j] = hstep
            val = (f(e + u) - f(e - u) - f(-e + u) + f(-e - u)) / (4 * REAL_DTYPE(hstep) ** 2)
            H[i, j] = H[j, i] = val
    return H


def _richardson_hessian(f, dim: int, fd_step: float, noise_tol: float = 0.05):
    """(4 H(h/2) - H(h)) / 3 plus a smell test on the correction size."""
    Hh = _fd_hessian(f, dim, fd_step)
    Hh2 = _fd_hessian(f, dim, fd_step / 2)
    R = (4 * Hh2 - Hh) / 3
    scale = float(np.max(np.abs(R))) or 1.0
    rel_corr = float(np.max(np.abs(R - Hh2))) / scale
    if rel_corr > noise_tol:
        raise DerivativeError(
            f"finite-difference correction {rel_corr:.2e} of scale exceeds {noise_tol}; "
            f"fd_step {fd_step:g} is outside its validated range here")
    return np.asarray(R, dtype=complex)


def _check_fd_step(fd_step: float) -> None:
    if not _FD_MIN <= fd_step <= _FD_MAX:
        raise DerivativeError(f"fd_step {fd_step:g} outside validated range [{_FD_MIN}, {_FD_MAX}]")


def _check_saddle(model: ModelSpec, saddle: CoherentPoint, h: HilbertConfig,
                  tol: float = 1e-7) -> None:
    if model.kind == BOSE_HUBBARD_SITE:
        E, x = _energy_site(model, h), np.array([saddle.params[0]])
        lo, hi = np.array([0.0]), np.array([np.inf])
    elif model.kind == UNIAXIAL_SPIN:
        E, x = _energy_spin(model), np.array([saddle.params[0]])
        lo, hi = np.array([0.0]), np.array([math.pi])
    else:
        E, x = _uniform_energy_lattice(model, h), np.array([saddle.params[0]])
        lo, hi = np.array([0.0]), np.array([np.inf])
    res = float(np.max(np.abs(_projected_gradient(_num_gradient(E, x, lo, hi), x, lo, hi))))
    if res > tol:
        raise DomainError(f"point is not a saddle: residual gradient {res:.2e} > {tol:.0e}")


def hessian_blocks(model: ModelSpec, saddle: CoherentPoint, dt: float,
                   h: HilbertConfig | None = None, fd_step: float = 1e-4) -> HessianBlocks:
    """Quadratic blocks of one Lagrangian step at the saddle.

    L2 is the symmetric per-slice representative
    (H_tt + H_{t+1,t+1})/2 and L2D the mixed slice-to-next block, so the
    full step form is psi_t.L2.psi_t + psi_{t+1}.L2.psi_{t+1} (shared
    between neighbouring steps) + psi_t.L2D.psi_{t+1}.
    """
    _check_fd_step(fd_step)
    if model.kind == BOSE_HUBBARD_LATTICE:
        raise DomainError("use bloch_blocks for the lattice model")
    if h is None:
        h = HilbertConfig(n_max=1) if model.kind == UNIAXIAL_SPIN else HilbertConfig(40)
    _check_saddle(model, saddle, h)
    if model.kind == BOSE_HUBBARD_SITE:
        nbar = saddle.params[0]
        if nbar <= 2 * fd_step:
            raise DomainError(
                f"saddle density {nbar:g} too close to the vacuum boundary for fd_step {fd_step:g}")
        f = _make_site_lagrangian(model, h, dt, nbar)
        label = f"site U={model.U} mu={model.mu}"
    else:
        f = _make_spin_lagrangian(model, dt, saddle.params[0])
        label = f"spin S={model.S}"
    H = _richardson_hessian(f, 4, fd_step)
    L0 = f(np.zeros(4))
    if abs(np.imag(complex(L0))) > 1e-9 * max(1.0, abs(np.real(complex(L0)))):
        raise DerivativeError(f"classical action density not real at the saddle: {complex(L0)}")
    L2 = (H[:2, :2] + H[2:, 2:]) / 2.0
    L2D = H[:2, 2:].copy()
    return HessianBlocks(L0=float(np.real(complex(L0))), L2=L2, L2D=L2D, dt=dt, label=label)


# ---------------------------------------------------------------------------
# lattice Bloch blocks
# ---------------------------------------------------------------------------

def lattice_modes(model: ModelSpec) -> list[tuple[float, ...]]:
    """Reciprocal grid k_j = 2 pi m_j / (L a0), m_j = 0 .. L-1."""
    from itertools import product
    step = 2 * math.pi / (model.L * model.a0)
    return [tuple(step * m for m in ms) for ms in product(range(model.L), repeat=model.D)]


def _mode_index(model: ModelSpec, k: Sequence[float]) -> tuple[int, ...]:
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.shape != (model.D,):
        raise DomainError(f"k must have {model.D} components")
    ms = k * model.L * model.a0 / (2 * math.pi)
    mi = np.rint(ms)
    if np.max(np.abs(ms - mi)) > 1e-9:
        raise DomainError(f"k={tuple(k)} is not on the reciprocal grid")
    return tuple(int(m) % model.L for m in mi)


@lru_cache(maxsize=16)
def _lattice_block_table(model: ModelSpec, nbar: float, dt: float, n_max: int,
                         fd_step: float):
    """Translation-invariant second-derivative table of the lattice step.

    Same-slice curvature lives on a single site (the overlap and the
    interaction are on-site; hopping only couples neighbouring slices), so
    the table holds one 2x2 on-site block per slice plus the mixed blocks
    M(r) = d^2 L / d psi_{0,t} d psi_{r,t+1} for every displacement r.
    """
    h = HilbertConfig(n_max=n_max)
    f = _make_lattice_lagrangian(model, h, dt, nbar=nbar)
    Ns = model.n_sites

    def fz(pairs):
        z = np.zeros(4 * Ns)
        for idx, val in pairs:
            z[idx] += val
        return f(z)

    def coord(slice_, site, a):
        return 2 * Ns * slice_ + a * Ns + site

    f0 = fz(())

    def mixed(i1, i2, hstep):
        return (fz(((i1, hstep), (i2, hstep))) - fz(((i1, hstep), (i2, -hstep)))
                - fz(((i1, -hstep), (i2, hstep))) + fz(((i1, -hstep), (i2, -hstep)))) \
            / (4 * REAL_DTYPE(hstep) ** 2)

    def diag(i1, hstep):
        return (fz(((i1, hstep),)) - 2 * f0 + fz(((i1, -hstep),))) / REAL_DTYPE(hstep) ** 2

    def rich(fun, *args):
        return complex((4 * fun(*args, fd_step / 2) - fun(*args, fd_step)) / 3)

    def block_2x2(slice_a, site_a, slice_b, site_b):
        out = np.zeros((2, 2), dtype=complex)
        for a in range(2):
            for b in range(2):
                ia, ib = coord(slice_a, site_a, a), coord(slice_b, site_b, b)
                if ia == ib:
                    out[a, b] = rich(diag, ia)
                else:
                    out[a, b] = rich(mixed, ia, ib)
        return out

    onsite = (block_2x2(0, 0, 0, 0) + block_2x2(1, 0, 1, 0)) / 2.0
    # mixed blocks: hopping is nearest-neighbour, everything else on-site
    nonzero_r = {0}
    idx = np.arange(Ns).reshape((model.L,) * model.D)
    for j in range(model.D):
        nonzero_r.add(int(np.roll(idx, -1, axis=j).ravel()[0]))
        nonzero_r.add(int(np.roll(idx, 1, axis=j).ravel()[0]))
    mixed_blocks = {r: block_2x2(0, 0, 1, r) for r in sorted(nonzero_r)}
    L0 = complex(f0)
    return onsite, mixed_blocks, L0


def bloch_blocks(model: ModelSpec, saddle: CoherentPoint, k: Sequence[float],
                 dt: float, h: HilbertConfig | None = None,
                 fd_step: float = 1e-3) -> HessianBlocks:
    """Per-mode 2x2 blocks of the lattice step for one reciprocal vector k.

    Built from plane-wave projection of the translation-invariant
    second-derivative table: L2D(k) = sum_r M(r) e^{i k.r}.
    """
    if model.kind != BOSE_HUBBARD_LATTICE:
        raise DomainError("bloch_blocks applies to the lattice model")
    _check_fd_step(fd_step)
    if h is None:
        h = HilbertConfig(40)
    _check_saddle(model, saddle, h)
    mi = _mode_index(model, k)
    nbar = saddle.params[0]
    if nbar <= 2 * fd_step:
        raise DomainError(f"saddle density {nbar:g} too small for fd_step {fd_step:g}")
    onsite, mixed_blocks, L0 = _lattice_block_table(model, nbar, dt, h.n_max, fd_step)
    Ns = model.n_sites
    shape = (model.L,) * model.D
    L2D = np.zeros((2, 2), dtype=complex)
    for r, M in mixed_blocks.items():
        rv = np.unravel_index(r, shape)
        phase = np.exp(1j * 2 * math.pi * sum(m * ri for m, ri in zip(mi, rv)) / model.L)
        L2D = L2D + phase * M
    label = f"lattice U={model.U} mu={model.mu} J={model.J} k-index={mi}"
    return HessianBlocks(L0=float(np.real(L0)) / Ns, L2=onsite.copy(), L2D=L2D,
                         dt=dt, label=label)


# ---------------------------------------------------------------------------
# kernels and determinant ratios
# ---------------------------------------------------------------------------

def assemble_kernel(b: HessianBlocks, omega: complex, dt: float | None = None) -> np.ndarray:
    """G_w^-1 = (L2 + L2^T) + L2D e^{i w dt} + L2D^T e^{-i w dt}."""
    dt = b.dt if dt is None else dt
    x = omega * dt
    return (b.L2 + b.L2.T) + b.L2D * np.exp(1j * x) + b.L2D.T * np.exp(-1j * x)


def kernel_det(b: HessianBlocks, omega, dt: float | None = None):
    """det of the assembled kernel, vectorized over omega."""
    dt = b.dt if dt is None else dt
    x = np.asarray(omega, dtype=complex) * dt
    s = b.L2 + b.L2.T
    ep, em = np.exp(1j * x), np.exp(-1j * x)
    g00 = s[0, 0] + b.L2D[0, 0] * ep + b.L2D[0, 0] * em
    g11 = s[1, 1] + b.L2D[1, 1] * ep + b.L2D[1, 1] * em
    g01 = s[0, 1] + b.L2D[0, 1] * ep + b.L2D[1, 0] * em
    g10 = s[1, 0] + b.L2D[1, 0] * ep + b.L2D[0, 1] * em
    return g00 * g11 - g01 * g10


def _static_kernel(b: HessianBlocks) -> np.ndarray:
    return np.asarray((b.L2 + b.L2.T) + b.L2D + b.L2D.T)


def _berry_scale(b: HessianBlocks) -> float:
    """Scalar normalization of the antisymmetric Berry block."""
    A = b.L2D - b.L2D.T
    f = complex(1j * A[0, 1])
    scale = float(np.max(np.abs(b.L2D))) or 1.0
    if abs(f) < 1e-10 * scale:
        raise DomainError("degenerate Berry block; no canonical symplectic form")
    if abs(np.imag(f)) > 1e-6 * abs(f) or max(abs(A[0, 0]), abs(A[1, 1])) > 1e-6 * abs(f):
        raise DomainError("Berry block is not in canonical antisymmetric form")
    return float(np.real(f))


def cpi_kernel(b: HessianBlocks, omega: complex, d: Discretization) -> np.ndarray:
    """Continuum-limit kernel in the canonical symplectic normalization.

    Gbar_w^-1 = (beta/dt) [S0 + i w dt Ahat], S0 the static kernel and
    Ahat the Berry block scaled to the unit symplectic matrix.  The
    determinant is beta^2 (w^2 + E^2) with E^2 = det S0 / dt^2, i.e.
    exactly (beta w)^2 for a gapless mode.
    """
    S0 = _static_kernel(b)
    f = _berry_scale(b)
    Ahat = (b.L2D - b.L2D.T) / f
    x = omega * d.dt
    return (d.beta / d.dt) * (S0 + 1j * x * Ahat)


def cpi_det(b: HessianBlocks, omega, d: Discretization):
    """det Gbar_w^-1 = (beta/dt)^2 (det S0 + (w dt)^2), vectorized."""
    _berry_scale(b)  # validates the canonical form
    S0 = _static_kernel(b)
    det_s0 = np.real(S0[0, 0] * S0[1, 1] - S0[0, 1] * S0[1, 0])
    x = np.asarray(omega, dtype=complex) * d.dt
    return (d.beta / d.dt) ** 2 * (det_s0 + x * x)


def kernel_trig_coeffs(b: HessianBlocks) -> np.ndarray:
    """Coefficients c_r of det G^-1(x) = sum_{r=-2..2} c_r e^{irx}, exact.

    A 2x2 kernel makes the determinant a degree-2 trigonometric
    polynomial, so five samples determine it; used for the series limit
    at the removable w -> 0 point.
    """
    xs = 2 * math.pi * np.arange(5) / 5
    dets = kernel_det(b, xs / b.dt)
    rs = np.arange(-2, 3)
    M = np.exp(1j * np.outer(xs, rs))
    return np.linalg.solve(M, dets)


_GAPLESS_REL = 1e-8
# the direct quotient amplifies block noise like 1/x^2 on gapless modes, so
# the fourth-order series takes over well before that becomes visible
_SERIES_X = 0.03


def det_ratio(b: HessianBlocks, omega, d: Discretization):
    """det G_w^-1 / det Gbar_w^-1 with the w -> 0 singularity removed.

    Gapless modes (zero static determinant up to finite-difference noise)
    use the fourth-order series of the trigonometric determinant around
    w = 0; everything else is a plain quotient.  Vectorized over omega.
    """
    om = np.asarray(omega, dtype=complex)
    scalar = om.ndim == 0
    om = np.atleast_1d(om)
    S0 = _static_kernel(b)
    det_s0 = float(np.real(S0[0, 0] * S0[1, 1] - S0[0, 1] * S0[1, 0]))
    scale = float(np.max(np.abs(S0 - np.diag(np.diag(S0)))) + np.max(np.abs(b.L2D)))
    gapless = abs(det_s0) <= _GAPLESS_REL * scale ** 2
    x = om * d.dt
    out = np.empty(om.shape, dtype=complex)
    small = np.abs(x) < _SERIES_X
    use_series = gapless & small
    if np.any(use_series):
        cs = kernel_trig_coeffs(b)
        rs = np.arange(-2, 3)
        t2 = np.sum(cs * (-(rs ** 2)) / 2.0)
        t4 = np.sum(cs * rs ** 4 / 24.0)
        out[use_series] = (t2 + t4 * x[use_series] ** 2) * (d.dt / d.beta) ** 2
    rest = ~use_series
    if np.any(rest):
        out[rest] = kernel_det(b, om[rest], d.dt) / cpi_det(b, om[rest], d)
    return complex(out[0]) if scalar else out


def det_ratio_function(b: HessianBlocks, d: Discretization) -> Callable:
    """Closure w -> det ratio for the spectral machinery."""
    return lambda omega: det_ratio(b, omega, d)


def kernel_det_closed(model: ModelSpec, omega, dt: float,
                      k: Sequence[float] | None = None):
    """Closed form of det G_w^-1 realized by the quadratic expansion.

    Single site: 2(1 - cos(w dt))(1 - mu dt); spin replaces mu by S - 1/2.
    Lattice mode k: 2(1 - cos(w dt))(1 - Q) + Q^2 - P^2 with
    P = U nbar dt, Q = (U nbar + eps0_k) dt, eps0_k = 4J sum_j sin^2(k_j a0/2)
    and nbar = (mu + 2JD)/U the uniform saddle density.  The static limit
    (Q^2 - P^2)/dt^2 is the squared Bogoliubov energy
    eps0_k (eps0_k + 2 U nbar); the published high-frequency form carries
    eps_k = eps0_k - mu in place of -(U nbar + eps0_k), i.e. it omits the
    interaction shift of the band and flips its sign, so the two agree
    only at J = 0.
    """
    x = np.asarray(omega, dtype=complex) * dt
    w2 = 2.0 * (1.0 - np.cos(x))
    if model.kind == BOSE_HUBBARD_SITE:
        return w2 * (1.0 - model.mu * dt)
    if model.kind == UNIAXIAL_SPIN:
        return w2 * (1.0 - (model.S - 0.5) * dt)
    if k is None:
        raise DomainError("lattice closed form needs a mode vector k")
    nbar = lattice_saddle_density(model)
    P = model.U * nbar * dt
    Q = (model.U * nbar + lattice_band(model, k)) * dt
    return w2 * (1.0 - Q) + (Q * Q - P * P)
