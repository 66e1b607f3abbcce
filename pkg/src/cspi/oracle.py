"""Exact-diagonalization reference thermodynamics.

Everything downstream is validated against Boltzmann sums over the exact
spectrum of the truncated Hamiltonian.  Bose-Hubbard spectra converge
factorially in the cutoff, so desk-scale cutoffs give machine-precision
free energies; `converge_cutoff` automates the choice.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CapacityError, DomainError
from .models import (
    BOSE_HUBBARD_LATTICE,
    UNIAXIAL_SPIN,
    HilbertConfig,
    ModelSpec,
    hamiltonian_matrix,
)

_LATTICE_ED_MAX_SITES = 2
_LATTICE_ED_MAX_CUTOFF = 6
_CUTOFF_HARD_CAP = 4096


@dataclass(frozen=True)
class ThermalResult:
    """Partition function, free energy and thermal observables."""

    Z: float
    F: float
    observables: dict[str, float] = field(default_factory=dict)


def _check_capacity(model: ModelSpec, h: HilbertConfig) -> None:
    if model.kind == BOSE_HUBBARD_LATTICE:
        if model.n_sites > _LATTICE_ED_MAX_SITES or h.n_max > _LATTICE_ED_MAX_CUTOFF:
            raise CapacityError(
                f"lattice ED is limited to {_LATTICE_ED_MAX_SITES} sites with "
                f"n_max <= {_LATTICE_ED_MAX_CUTOFF}; got {model.n_sites} sites, n_max={h.n_max}")


def _spectrum_and_number(model: ModelSpec, h: HilbertConfig):
    """Eigenvalues plus the diagonal of the relevant observable.

    For the diagonal Hamiltonians (single site, spin) this is immediate;
    the lattice goes through a dense eigendecomposition.
    """
    H = hamiltonian_matrix(model, h)
    if model.kind == UNIAXIAL_SPIN:
        m = np.arange(-model.S, model.S + 1.0)
        return m ** 2, m ** 2  # observable is <Sz^2>
    if model.kind == BOSE_HUBBARD_LATTICE:
        evals, vecs = np.linalg.eigh(H)
        d = h.n_max + 1
        ks = np.arange(d, dtype=float)
        Ns = model.n_sites
        ntot = np.zeros(H.shape[0])
        for i in range(Ns):
            diag = np.ones(1)
            for j in range(Ns):
                diag = np.kron(diag, ks if j == i else np.ones(d))
            ntot += diag
        n_in_eigenbasis = np.einsum("ij,i->j", np.abs(vecs) ** 2, ntot)
        return evals, n_in_eigenbasis
    evals = np.real(np.diag(H))
    ks = np.arange(h.n_max + 1, dtype=float)
    return evals, ks


def exact_thermal(model: ModelSpec, beta: float, h: HilbertConfig | None = None) -> ThermalResult:
    """Z = Tr e^{-beta H} with a max-shifted Boltzmann sum; F = -(1/beta) log Z."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    if h is None:
        h = HilbertConfig(n_max=1) if model.kind == UNIAXIAL_SPIN else HilbertConfig()
    _check_capacity(model, h)
    evals, obs_diag = _spectrum_and_number(model, h)
    e0 = float(np.min(evals))
    w = np.exp(-beta * (evals - e0))
    Zs = float(np.sum(w))
    F = e0 - math.log(Zs) / beta
    Z = Zs * math.exp(-beta * e0) if abs(beta * e0) < 700 else float("inf") if -beta * e0 > 0 else 0.0
    name = "Sz2" if model.kind == UNIAXIAL_SPIN else "n"
    observable = float(np.sum(w * obs_diag) / Zs)
    return ThermalResult(Z=Z, F=F, observables={name: observable})


def exact_occupation(model: ModelSpec, beta: float, h: HilbertConfig | None = None) -> float:
    """Thermal <n>; at beta*U >> 1 this is the staircase round(mu/U + 1/2)."""
    if not model.is_bosonic:
        raise DomainError("occupation is defined for the Bose-Hubbard models")
    return exact_thermal(model, beta, h).observables["n"]


def staircase(model: ModelSpec, mu_grid, beta: float, h: HilbertConfig | None = None):
    """Occupation table [(mu, <n>_exact, round(mu/U + 1/2), round(mu/U))].

    Demonstrates the half-step offset between the exact staircase and the
    naive continuum-limit one.  Grid points within the thermal width
    10/(beta U) of an exact step mu/U in Z trigger a warning.
    """
    if not model.is_bosonic:
        raise DomainError("staircase is defined for the Bose-Hubbard models")
    rows = []
    for mu in mu_grid:
        ratio = mu / model.U
        if abs(ratio - round(ratio)) * beta * model.U < 10.0:
            warnings.warn(
                f"mu/U = {ratio:.4f} is within the thermal width of a step",
                stacklevel=2)
        n_exact = exact_occupation(replace(model, mu=float(mu)), beta, h)
        rows.append((float(mu), n_exact, _round_half(ratio + 0.5), _round_half(ratio)))
    return rows


def _round_half(x: float) -> int:
    """Nearest integer with ties away from zero (not banker's rounding)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def converge_cutoff(model: ModelSpec, beta: float, tol: float) -> HilbertConfig:
    """Smallest doubling-search cutoff with |F(n) - F(2n)| <= tol |F| + tol."""
    if not model.is_bosonic:
        raise DomainError("cutoff search applies to the Bose-Hubbard models")
    if tol <= 0:
        raise CapacityError("tolerance must be positive; tol = 0 is unreachable")
    n = 1
    while n <= _CUTOFF_HARD_CAP:
        f1 = exact_thermal(model, beta, HilbertConfig(n_max=n)).F
        f2 = exact_thermal(model, beta, HilbertConfig(n_max=2 * n)).F
        if abs(f1 - f2) <= tol * abs(f1) + tol:
            return HilbertConfig(n_max=n)
        n *= 2
    raise CapacityError(f"no converged cutoff below {_CUTOFF_HARD_CAP}")
