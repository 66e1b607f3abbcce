"""Physical models and coherent-state families.

Three model variants are supported: the single-site Bose-Hubbard
Hamiltonian (U/2) n(n-1) - mu*n, its D-dimensional cubic-lattice extension
with nearest-neighbour hopping -J (periodic boundaries), and a uniaxial
spin Hamiltonian Sz^2 for total spin S.

Bosonic coherent states |[n, phi]> are Glauber states with amplitude
alpha = sqrt(n) e^{i phi}, truncated at a Fock cutoff and renormalized so
every labelled state has exactly unit norm.  Spin coherent states are
rotations of the highest-weight state |S,S> generated by the ladder
operators.  Closed-form overlaps are kept alongside as cross-check
references, together with the published high-frequency determinant ratios
and correction slopes for the three models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, DomainError, SingularOverlapError, TruncationError

BOSE_HUBBARD_SITE = "bose_hubbard_site"
BOSE_HUBBARD_LATTICE = "bose_hubbard_lattice"
UNIAXIAL_SPIN = "uniaxial_spin"

_KINDS = (BOSE_HUBBARD_SITE, BOSE_HUBBARD_LATTICE, UNIAXIAL_SPIN)

# 80-bit extended precision where the platform provides it; the finite
# difference machinery in `semiclassics` relies on this for its noise floor.
LONGDOUBLE_OK = np.finfo(np.longdouble).eps < 1e-18
REAL_DTYPE = np.longdouble if LONGDOUBLE_OK else np.float64
COMPLEX_DTYPE = np.clongdouble if LONGDOUBLE_OK else np.complex128


@dataclass(frozen=True)
class ModelSpec:
    """Variant record selecting one physical model and its parameters."""

    kind: str
    U: float | None = None
    mu: float | None = None
    J: float | None = None
    D: int | None = None
    L: int | None = None
    a0: float | None = None
    S: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError(f"unknown model kind {self.kind!r}")
        if self.kind == UNIAXIAL_SPIN:
            if self.S is None or self.S <= 0 or round(2 * self.S) != 2 * self.S:
                raise DomainError("S must be a positive half-integer")
            for name in ("U", "mu", "J", "D", "L", "a0"):
                if getattr(self, name) is not None:
                    raise DomainError(f"{name} is not a spin-model field")
        else:
            if self.U is None or self.U <= 0:
                raise DomainError("U must be positive for Bose-Hubbard models")
            if self.mu is None:
                raise DomainError("mu is required for Bose-Hubbard models")
            if self.S is not None:
                raise DomainError("S is not a Bose-Hubbard field")
            lattice_fields = (self.J, self.D, self.L, self.a0)
            if self.kind == BOSE_HUBBARD_SITE:
                if any(f is not None for f in lattice_fields):
                    raise DomainError("J, D, L, a0 are lattice-only fields")
            else:
                if self.J is None or self.J < 0:
                    raise DomainError("J must be >= 0 for the lattice model")
                if self.D is None or self.D < 1 or int(self.D) != self.D:
                    raise DomainError("D must be a positive integer")
                if self.L is None or self.L < 2 or int(self.L) != self.L:
                    raise DomainError("L must be an integer >= 2")
                if self.a0 is None or self.a0 <= 0:
                    raise DomainError("a0 must be positive")

    # -- factories ---------------------------------------------------------
    @staticmethod
    def site(U: float, mu: float) -> "ModelSpec":
        return ModelSpec(kind=BOSE_HUBBARD_SITE, U=U, mu=mu)

    @staticmethod
    def lattice(U: float, mu: float, J: float, D: int, L: int, a0: float = 1.0) -> "ModelSpec":
        return ModelSpec(kind=BOSE_HUBBARD_LATTICE, U=U, mu=mu, J=J, D=D, L=L, a0=a0)

    @staticmethod
    def spin(S: float) -> "ModelSpec":
        return ModelSpec(kind=UNIAXIAL_SPIN, S=S)

    @property
    def n_sites(self) -> int:
        if self.kind == BOSE_HUBBARD_LATTICE:
            return self.L ** self.D
        return 1

    @property
    def is_bosonic(self) -> bool:
        return self.kind in (BOSE_HUBBARD_SITE, BOSE_HUBBARD_LATTICE)


@dataclass(frozen=True)
class CoherentPoint:
    """Real parameters labelling one coherent state.

    Bose-Hubbard: (n, phi) per site with n >= 0.  Spin: (theta, phi) with
    theta in [0, pi].
    """

    params: tuple[float, ...]

    def __init__(self, params: Iterable[float]):
        object.__setattr__(self, "params", tuple(float(p) for p in params))

    @staticmethod
    def bose(n: float, phi: float = 0.0) -> "CoherentPoint":
        return CoherentPoint((n, phi))

    @staticmethod
    def spin(theta: float, phi: float = 0.0) -> "CoherentPoint":
        return CoherentPoint((theta, phi))

    def array(self) -> np.ndarray:
        return np.asarray(self.params, dtype=float)


@dataclass(frozen=True)
class HilbertConfig:
    """Fock cutoff for the bosonic models; spin spaces need no cutoff."""

    n_max: int = 30

    def __post_init__(self):
        if self.n_max < 1:
            raise DomainError("n_max must be >= 1")


def validate_point(model: ModelSpec, p: CoherentPoint) -> None:
    """Check that the point's dimension and ranges match the model."""
    want = 2 * model.n_sites if model.is_bosonic else 2
    if len(p.params) != want:
        raise DomainError(f"point has {len(p.params)} parameters, model needs {want}")
    if model.is_bosonic:
        ns = p.params[0::2]
        if any(n < 0 for n in ns):
            raise DomainError("occupation label n must be >= 0")
    else:
        theta = p.params[0]
        if not 0.0 <= theta <= math.pi:
            raise DomainError("theta must lie in [0, pi]")


def default_cutoff(model: ModelSpec, points: Sequence[CoherentPoint] = ()) -> HilbertConfig:
    """Cutoff a^2 + 10 a + 20 for the largest amplitude a = max sqrt(n)."""
    if not model.is_bosonic:
        return HilbertConfig(n_max=1)
    a = 0.0
    for p in points:
        a = max(a, max(math.sqrt(n) for n in p.params[0::2]))
    return HilbertConfig(n_max=int(math.ceil(a * a + 10.0 * a + 20.0)))


# ---------------------------------------------------------------------------
# single-mode building blocks
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _log_factorials(n_max: int, use_longdouble: bool):
    lg = np.zeros(n_max + 1, dtype=np.longdouble if use_longdouble else np.float64)
    for k in range(2, n_max + 1):
        lg[k] = lg[k - 1] + np.log(np.longdouble(k) if use_longdouble else float(k))
    return lg


def bose_coherent_amplitudes(n: float, phi: float, n_max: int, dtype=np.complex128) -> np.ndarray:
    """Truncated, renormalized Fock amplitudes of |[n, phi]>."""
    if n < 0:
        raise DomainError("n must be >= 0")
    cdtype = np.dtype(dtype)
    rdtype = np.longdouble if cdtype == np.clongdouble else np.float64
    if n == 0:
        v = np.zeros(n_max + 1, dtype=cdtype)
        v[0] = 1.0
        return v
    ks = np.arange(n_max + 1, dtype=rdtype)
    lg = _log_factorials(n_max, rdtype == np.longdouble)
    nn = rdtype(n)
    logmag = -0.5 * nn + 0.5 * ks * np.log(nn) - 0.5 * lg
    v = np.exp(logmag).astype(cdtype) * np.exp(1j * cdtype.type(phi) * ks.astype(cdtype))
    nrm = np.sqrt(np.sum(np.abs(v) ** 2))
    return v / nrm


def bose_truncated_weight(n: float, n_max: int) -> float:
    """Probability weight of the discarded Fock tail of |alpha|^2 = n."""
    if n == 0:
        return 0.0
    ks = np.arange(n_max + 1, dtype=np.float64)
    lg = _log_factorials(n_max, False)
    logp = -n + ks * math.log(n) - lg
    return float(max(0.0, 1.0 - np.sum(np.exp(logp))))


@lru_cache(maxsize=32)
def spin_operators(two_S: int):
    """(Sz, S+, S-) in the basis m = -S ... S (ascending)."""
    S = two_S / 2.0
    dim = two_S + 1
    m = np.arange(-S, S + 1.0)
    Sz = np.diag(m).astype(complex)
    cp = np.sqrt(S * (S + 1) - m[:-1] * (m[:-1] + 1))
    Sp = np.zeros((dim, dim), dtype=complex)
    Sp[np.arange(1, dim), np.arange(dim - 1)] = cp
    return Sz, Sp, Sp.conj().T


def _expm_antihermitian(A: np.ndarray) -> np.ndarray:
    """exp(A) for anti-Hermitian A by scaling-and-squaring Taylor.

    Keeps whatever complex dtype A carries, which LAPACK-based routes
    would silently downcast.
    """
    norm = float(np.max(np.sum(np.abs(A), axis=1))) if A.size else 0.0
    k = max(0, int(math.ceil(math.log2(norm / 0.25))) if norm > 0.25 else 0)
    B = A / (2 ** k)
    out = np.eye(A.shape[0], dtype=A.dtype)
    term = np.eye(A.shape[0], dtype=A.dtype)
    eps = float(np.finfo(np.abs(A).dtype).eps)
    for j in range(1, 60):
        term = term @ B / j
        out = out + term
        if float(np.max(np.abs(term))) < 0.25 * eps:
            break
    for _ in range(k):
        out = out @ out
    return out


def spin_coherent_amplitudes(S: float, theta: float, phi: float, dtype=np.complex128) -> np.ndarray:
    """|theta, phi> = exp[(theta/2)(e^{i phi} S- - e^{-i phi} S+)] |S, S>."""
    two_S = int(round(2 * S))
    _, Sp, Sm = spin_operators(two_S)
    cdtype = np.dtype(dtype)
    A = (0.5 * theta) * (
        np.exp(1j * cdtype.type(phi)) * Sm.astype(cdtype)
        - np.exp(-1j * cdtype.type(phi)) * Sp.astype(cdtype)
    )
    hw = np.zeros(two_S + 1, dtype=cdtype)
    hw[-1] = 1.0  # m = +S is the last basis state
    v = _expm_antihermitian(A) @ hw
    return v / np.sqrt(np.sum(np.abs(v) ** 2))


# ---------------------------------------------------------------------------
# public state / operator construction
# ---------------------------------------------------------------------------

_LATTICE_DIM_CAP = 40000


def _lattice_dim(model: ModelSpec, h: HilbertConfig) -> int:
    return (h.n_max + 1) ** model.n_sites


def coherent_vector(model: ModelSpec, p: CoherentPoint, h: HilbertConfig,
                    trunc_tol: float = 1e-8, dtype=np.complex128) -> np.ndarray:
    """Unit-norm state vector labelled by p, in the truncated basis."""
    validate_point(model, p)
    if model.kind == UNIAXIAL_SPIN:
        return spin_coherent_amplitudes(model.S, p.params[0], p.params[1], dtype=dtype)
    for n in p.params[0::2]:
        w = bose_truncated_weight(n, h.n_max)
        if w > trunc_tol:
            raise TruncationError(
                f"truncated weight {w:.3e} above tolerance {trunc_tol:.1e} at n={n}; "
                f"raise n_max (currently {h.n_max})")
    if model.kind == BOSE_HUBBARD_SITE:
        return bose_coherent_amplitudes(p.params[0], p.params[1], h.n_max, dtype=dtype)
    dim = _lattice_dim(model, h)
    if dim > _LATTICE_DIM_CAP:
        raise CapacityError(f"lattice product space of dimension {dim} exceeds cap {_LATTICE_DIM_CAP}")
    out = np.ones(1, dtype=dtype)
    for i in range(model.n_sites):
        vi = bose_coherent_amplitudes(p.params[2 * i], p.params[2 * i + 1], h.n_max, dtype=dtype)
        out = np.kron(out, vi)
    return out


def overlap(model: ModelSpec, p: CoherentPoint, q: CoherentPoint, h: HilbertConfig,
            trunc_tol: float = 1e-8) -> complex:
    """Inner product <p|q> of two coherent vectors; |overlap| <= 1."""
    v = coherent_vector(model, p, h, trunc_tol=trunc_tol)
    w = coherent_vector(model, q, h, trunc_tol=trunc_tol)
    return complex(np.vdot(v, w))


def lattice_bonds(model: ModelSpec) -> list[tuple[int, int]]:
    """Directed nearest-neighbour pairs (i, i+e_j), one per site and axis.

    Periodic boundaries; for L = 2 the wrap makes each geometric bond
    appear twice, the usual convention for tiny rings.
    """
    L, D = model.L, model.D
    idx = np.arange(model.n_sites).reshape((L,) * D)
    bonds = []
    for j in range(D):
        nb = np.roll(idx, -1, axis=j)
        bonds.extend(zip(idx.ravel().tolist(), nb.ravel().tolist()))
    return bonds


def hamiltonian_matrix(model: ModelSpec, h: HilbertConfig) -> np.ndarray:
    """Hermitian Hamiltonian in the truncated (product) basis."""
    if model.kind == UNIAXIAL_SPIN:
        two_S = int(round(2 * model.S))
        m = np.arange(-model.S, model.S + 1.0)
        return np.diag(m ** 2).astype(complex)
    ks = np.arange(h.n_max + 1, dtype=float)
    e_site = 0.5 * model.U * ks * (ks - 1.0) - model.mu * ks
    if model.kind == BOSE_HUBBARD_SITE:
        return np.diag(e_site).astype(complex)
    dim = _lattice_dim(model, h)
    if dim > _LATTICE_DIM_CAP:
        raise CapacityError(f"lattice Hamiltonian dimension {dim} exceeds cap {_LATTICE_DIM_CAP}")
    d = h.n_max + 1
    Ns = model.n_sites
    a = np.diag(np.sqrt(ks[1:]), k=1)

    def embed(op, site):
        out = np.ones((1, 1))
        for i in range(Ns):
            out = np.kron(out, op if i == site else np.eye(d))
        return out

    H = np.zeros((dim, dim))
    for i in range(Ns):
        H += embed(np.diag(e_site), i)
    for (i, j) in lattice_bonds(model):
        hop = embed(a.T, i) @ embed(a, j)
        H += -model.J * (hop + hop.T)
    return H.astype(complex)


def normalized_matrix_element(model: ModelSpec, p: CoherentPoint, q: CoherentPoint,
                              h: HilbertConfig, trunc_tol: float = 1e-8) -> complex:
    """<p|H|q> / <p|q>; raises when the overlap vanishes."""
    v = coherent_vector(model, p, h, trunc_tol=trunc_tol)
    w = coherent_vector(model, q, h, trunc_tol=trunc_tol)
    ov = complex(np.vdot(v, w))
    if abs(ov) < 1e-12:
        raise SingularOverlapError(f"overlap {abs(ov):.2e} too small for a normalized element")
    H = hamiltonian_matrix(model, h)
    return complex(np.vdot(v, H @ w)) / ov


# ---------------------------------------------------------------------------
# closed-form references
# ---------------------------------------------------------------------------

def closed_overlap_bose(n1: float, phi1: float, n2: float, phi2: float) -> complex:
    """Untruncated overlap exp(conj(a1) a2 - |a1|^2/2 - |a2|^2/2)."""
    a1 = math.sqrt(n1) * np.exp(1j * phi1)
    a2 = math.sqrt(n2) * np.exp(1j * phi2)
    return complex(np.exp(np.conj(a1) * a2 - 0.5 * n1 - 0.5 * n2))


def closed_overlap_spin(S: float, theta1: float, phi1: float,
                        theta2: float, phi2: float) -> complex:
    """(cos t1/2 cos t2/2 + e^{i(phi2-phi1)} sin t1/2 sin t2/2)^{2S}."""
    base = (math.cos(theta1 / 2) * math.cos(theta2 / 2)
            + np.exp(1j * (phi2 - phi1)) * math.sin(theta1 / 2) * math.sin(theta2 / 2))
    return complex(base ** int(round(2 * S)))


def lattice_band(model: ModelSpec, k: Sequence[float]) -> float:
    """Tight-binding band 4J sum_j sin^2(k_j a0 / 2)."""
    k = np.asarray(k, dtype=float)
    if k.shape != (model.D,):
        raise DomainError(f"k must have {model.D} components")
    return float(4.0 * model.J * np.sum(np.sin(k * model.a0 / 2.0) ** 2))


def _one_minus_cos_over_x2(x: complex) -> complex:
    """2(1 - cos x)/x^2 with its removable singularity handled by series."""
    if abs(x) < 1e-4:
        x2 = x * x
        return 1.0 - x2 / 12.0 + x2 * x2 / 360.0
    return 2.0 * (1.0 - np.cos(x)) / (x * x)


def reference_det_ratio(model: ModelSpec, omega: complex, beta: float, n_t: int,
                        k: Sequence[float] | None = None) -> complex:
    """Published high-frequency closed form of det G^-1 / det Gbar^-1.

    Single site: 2(1-cos(w dt))(1 - mu dt) / (beta w)^2, spin replaces the
    last factor by (1 - (S-1/2) dt), and the lattice by (1 + eps_k dt) with
    eps_k = 4J sum_j sin^2(k_j a0/2) - mu.  Note the lattice form is a
    large-frequency asymptotic statement only; the kernel assembled from
    the actual quadratic expansion acquires an interaction shift of the
    band (see semiclassics.lattice_kernel_det_closed).
    """
    dt = beta / n_t
    if model.kind == BOSE_HUBBARD_SITE:
        factor = 1.0 - model.mu * dt
    elif model.kind == UNIAXIAL_SPIN:
        factor = 1.0 - (model.S - 0.5) * dt
    else:
        if k is None:
            raise DomainError("lattice reference ratio needs a mode vector k")
        eps_k = lattice_band(model, k) - model.mu
        factor = 1.0 + eps_k * dt
    x = omega * dt
    return _one_minus_cos_over_x2(x) * factor * (dt / beta) ** 2


def reference_correction_slopes(model: ModelSpec) -> dict[str, float]:
    """Published parameter derivatives of the finite-time-step correction.

    Signs for the lattice are recorded as magnitudes plus the
    sign-convention-free ratio between the J and mu slopes, because the
    published lattice expression is internally sign-inconsistent with the
    published single-site result.
    """
    if model.kind == BOSE_HUBBARD_SITE:
        return {"d_mu": -0.5}
    if model.kind == UNIAXIAL_SPIN:
        return {"d_S": -0.5}
    Ns = model.n_sites
    return {
        "d_mu_abs": Ns / 2.0,
        "d_J_abs": float(model.D * Ns),
        "d_J_over_d_mu": -2.0 * model.D,
    }


# ---------------------------------------------------------------------------
# structured-text configuration
# ---------------------------------------------------------------------------

_MODEL_KEYS = ("kind", "U", "mu", "J", "D", "L", "a0", "S")


def model_to_config(model: ModelSpec, h: HilbertConfig | None = None) -> dict:
    """Flat dotted-key mapping (model.kind, model.U, ..., hilbert.n_max)."""
    out = {}
    for key in _MODEL_KEYS:
        val = getattr(model, key)
        if val is not None:
            out[f"model.{key}"] = val
    if h is not None:
        out["hilbert.n_max"] = h.n_max
    return out


def model_from_config(cfg: Mapping) -> tuple[ModelSpec, HilbertConfig | None]:
    """Inverse of model_to_config; accepts flat dotted keys or nested tables."""
    if "model" in cfg and isinstance(cfg["model"], Mapping):
        sect = dict(cfg["model"])
        hsect = cfg.get("hilbert", {})
    else:
        sect = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.")}
        hsect = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("hilbert.")}
    if "kind" not in sect:
        raise DomainError("configuration is missing model.kind")
    kwargs = {k: sect[k] for k in _MODEL_KEYS if k in sect}
    for key in ("D", "L"):
        if key in kwargs:
            kwargs[key] = int(kwargs[key])
    model = ModelSpec(**kwargs)
    h = HilbertConfig(n_max=int(hsect["n_max"])) if "n_max" in hsect else None
    return model, h
