"""Model-level drivers tying blocks, ratios and spectral sums together.

These are the workflows the command-line front end runs: build the
saddle and Hessian blocks for a model, turn them into determinant-ratio
functions, and evaluate the finite-time-step correction by grid sum and
by contour, including parameter sweeps and step-size extrapolation.
Lattice corrections are sums of independent reciprocal-mode
contributions.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Sequence

import numpy as np

from .models import BOSE_HUBBARD_LATTICE, HilbertConfig, ModelSpec, UNIAXIAL_SPIN
from .semiclassics import (
    Discretization,
    bloch_blocks,
    check_discretization,
    det_ratio_function,
    find_saddle,
    hessian_blocks,
    lattice_modes,
)
from .spectral import CorrectionReport, QuadratureConfig, delta_f_contour, delta_f_sum

DEFAULT_FD_STEP = 1e-3


def default_hilbert(model: ModelSpec) -> HilbertConfig:
    if model.kind == UNIAXIAL_SPIN:
        return HilbertConfig(n_max=1)
    return HilbertConfig(n_max=40)


def ratio_functions(model: ModelSpec, d: Discretization,
                    h: HilbertConfig | None = None,
                    fd_step: float = DEFAULT_FD_STEP) -> list:
    """Determinant-ratio callables for the model: one per fluctuation mode."""
    h = h or default_hilbert(model)
    check_discretization(model, d)
    saddle = find_saddle(model, h)
    if model.kind == BOSE_HUBBARD_LATTICE:
        return [det_ratio_function(bloch_blocks(model, saddle, k, d.dt, h, fd_step), d)
                for k in lattice_modes(model)]
    return [det_ratio_function(hessian_blocks(model, saddle, d.dt, h, fd_step), d)]


def model_delta_f_sum(model: ModelSpec, d: Discretization,
                      h: HilbertConfig | None = None,
                      fd_step: float = DEFAULT_FD_STEP) -> float:
    """Grid-sum correction, totalled over modes (total, not per site)."""
    return float(sum(delta_f_sum(r, d) for r in ratio_functions(model, d, h, fd_step)))


def model_correction(model: ModelSpec, d: Discretization,
                     h: HilbertConfig | None = None,
                     quad: QuadratureConfig | None = None,
                     fd_step: float = DEFAULT_FD_STEP) -> CorrectionReport:
    """CorrectionReport with both the grid sum and the contour value."""
    reports = [delta_f_contour(r, d, quad) for r in ratio_functions(model, d, h, fd_step)]
    dfc = complex(sum(r.delta_f_contour for r in reports))
    return CorrectionReport(
        delta_f_sum=float(sum(r.delta_f_sum for r in reports)),
        delta_f_contour=dfc,
        im_residual=abs(dfc.imag),
        quad_points=int(sum(r.quad_points for r in reports)),
        unwrap_jumps=int(sum(r.unwrap_jumps for r in reports)),
        beta=d.beta,
        n_t=d.n_t,
    )


def parameter_slope(model: ModelSpec, d: Discretization, parameter: str,
                    h: HilbertConfig | None = None, step: float = 2e-3,
                    fd_step: float = DEFAULT_FD_STEP) -> float:
    """Central-difference derivative of the grid-sum correction.

    The saddle and all blocks are rebuilt at the displaced parameter
    values, so implicit saddle motion is included.
    """
    if parameter not in ("mu", "J", "U"):
        raise ValueError(f"cannot sweep parameter {parameter!r} continuously")
    lo = replace(model, **{parameter: getattr(model, parameter) - step})
    hi = replace(model, **{parameter: getattr(model, parameter) + step})
    return (model_delta_f_sum(hi, d, h, fd_step)
            - model_delta_f_sum(lo, d, h, fd_step)) / (2.0 * step)


def spin_slope(S_grid: Sequence[float], beta: float, n_t: int,
               fd_step: float = DEFAULT_FD_STEP) -> float:
    """Least-squares d(dF)/dS over a half-integer spin grid.

    S enters through the Hilbert-space dimension, so a continuous central
    difference is unavailable; the correction is linear in S up to
    O(dt^2) curvature and a straight-line fit recovers the slope.
    """
    d = Discretization(beta, n_t)
    ys = [model_delta_f_sum(ModelSpec.spin(S), d, fd_step=fd_step) for S in S_grid]
    return slope_from_grid(S_grid, ys)


def slope_from_grid(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    return float(np.polyfit(x, y, 1)[0])


def richardson_extrapolate(dts: Sequence[float], values: Sequence[float]) -> float:
    """Polynomial-in-dt extrapolation to dt = 0 through the given points."""
    dts = np.asarray(dts, dtype=float)
    values = np.asarray(values, dtype=float)
    order = len(dts)
    V = np.vander(dts, order, increasing=True)
    return float(np.linalg.solve(V, values)[0])


def extrapolated_slope(model: ModelSpec, beta: float, n_ts: Sequence[int],
                       parameter: str, h: HilbertConfig | None = None,
                       step: float = 2e-3, fd_step: float = DEFAULT_FD_STEP
                       ) -> tuple[list[float], float]:
    """Slopes at each n_t plus their dt -> 0 extrapolation."""
    slopes = [parameter_slope(model, Discretization(beta, n), parameter, h, step, fd_step)
              for n in n_ts]
    dts = [beta / n for n in n_ts]
    return slopes, richardson_extrapolate(dts, slopes)


def extrapolated_spin_slope(S_grid: Sequence[float], beta: float,
                            n_ts: Sequence[int], fd_step: float = DEFAULT_FD_STEP
                            ) -> tuple[list[float], float]:
    slopes = [spin_slope(S_grid, beta, n, fd_step) for n in n_ts]
    dts = [beta / n for n in n_ts]
    return slopes, richardson_extrapolate(dts, slopes)
