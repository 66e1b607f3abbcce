"""Configuration-driven command-line front end.

Commands:
    cspi exact      --config run.toml [--out DIR] [--format csv|json]
    cspi correction --config run.toml [--out DIR] [--n-t N] [--format ...]
    cspi sweep      --config run.toml [--out DIR]
    cspi validate   [--config run.toml]

The configuration is a single TOML file (see README for the schema); the
output directory defaults to $CSPI_OUT or ./out.  Runs are deterministic:
identical configurations produce bit-identical CSV/JSON, with numbers
written at full precision (17 significant digits).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import oracle, pipeline
from .errors import ConfigError, CspiError
from .models import (
    BOSE_HUBBARD_LATTICE,
    BOSE_HUBBARD_SITE,
    UNIAXIAL_SPIN,
    HilbertConfig,
    ModelSpec,
    model_from_config,
    reference_det_ratio,
)
from .semiclassics import (
    Discretization,
    assemble_kernel,
    bloch_blocks,
    det_ratio,
    find_saddle,
    hessian_blocks,
    kernel_det,
    kernel_det_closed,
    lattice_modes,
)
from .spectral import (
    QuadratureConfig,
    delta_f_sum,
    matsubara_grid,
    report_to_json,
    sum_rule_residual,
)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}")


def _require(cfg: dict, key: str):
    cur = cfg
    for part in key.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigError(f"configuration is missing required key '{key}'")
        cur = cur[part]
    return cur


def _model_and_hilbert(cfg: dict) -> tuple[ModelSpec, HilbertConfig]:
    _require(cfg, "model.kind")
    try:
        model, h = model_from_config(cfg)
    except CspiError as exc:
        raise ConfigError(str(exc))
    return model, (h or pipeline.default_hilbert(model))


def _n_t_list(cfg: dict, override: int | None) -> list[int]:
    if override is not None:
        values = [override]
    else:
        raw = _require(cfg, "discretization.n_t")
        values = [raw] if isinstance(raw, int) else [int(v) for v in raw]
    for v in values:
        if v < 1 or v % 2 == 0:
            raise ConfigError(f"discretization.n_t entries must be odd, got {v}")
    return values


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("CSPI_OUT", "out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _workers(cfg: dict) -> int:
    return int(cfg.get("run", {}).get("workers", 4))


def _fd_step(cfg: dict) -> float:
    return float(cfg.get("run", {}).get("fd_step", pipeline.DEFAULT_FD_STEP))


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# exact: oracle thermodynamics and the occupation staircase
# ---------------------------------------------------------------------------

def cmd_exact(args) -> int:
    cfg = _load_config(args.config)
    model, h = _model_and_hilbert(cfg)
    beta = float(_require(cfg, "discretization.beta"))
    out = _out_dir(args)

    result = oracle.exact_thermal(model, beta, h)
    payload = {"beta": beta, "Z": result.Z, "F": result.F, "observables": result.observables}
    (out / "thermal.json").write_text(json.dumps(payload, indent=1) + "\n")
    written = ["thermal.json"]

    sweep = cfg.get("sweep")
    if sweep and model.is_bosonic and sweep.get("parameter", "mu") == "mu":
        grid = [float(g) for g in _require(cfg, "sweep.grid")]
        rows = oracle.staircase(model, grid, beta, h)
        _write_rows(out / "staircase.csv",
                    ["mu", "n_exact", "n_round_half", "n_round"],
                    [[mu, n, rh, r] for (mu, n, rh, r) in rows])
        written.append("staircase.csv")
    print(f"exact: wrote {', '.join(written)} to {out}")
    return 0


# ---------------------------------------------------------------------------
# correction: grid-sum and contour corrections, optional parameter sweep
# ---------------------------------------------------------------------------

def _sweep_rows(model, h, d, parameter, grid, fd_step, workers):
    def one(value):
        m = replace(model, **{parameter: float(value)})
        return pipeline.model_delta_f_sum(m, d, h, fd_step)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        dfs = list(pool.map(one, grid))
    rows = []
    for i, g in enumerate(grid):
        if 0 < i < len(grid) - 1:
            deriv = (dfs[i + 1] - dfs[i - 1]) / (grid[i + 1] - grid[i - 1])
        elif i == 0 and len(grid) > 1:
            deriv = (dfs[1] - dfs[0]) / (grid[1] - grid[0])
        elif i == len(grid) - 1 and len(grid) > 1:
            deriv = (dfs[i] - dfs[i - 1]) / (grid[i] - grid[i - 1])
        else:
            deriv = math.nan
        rows.append([float(g), dfs[i], deriv])
    return rows


def cmd_correction(args) -> int:
    cfg = _load_config(args.config)
    model, h = _model_and_hilbert(cfg)
    beta = float(_require(cfg, "discretization.beta"))
    n_ts = _n_t_list(cfg, args.n_t)
    fd_step = _fd_step(cfg)
    quad_rel = float(cfg.get("tolerances", {}).get("quad_rel", 1e-9))
    quad = QuadratureConfig(rel_tol=quad_rel)
    out = _out_dir(args)

    written = []
    for n_t in n_ts:
        d = Discretization(beta, n_t)
        report = pipeline.model_correction(model, d, h, quad, fd_step)
        name = f"correction_nt{n_t}.json"
        (out / name).write_text(report_to_json(report) + "\n")
        written.append(name)

    sweep = cfg.get("sweep")
    if sweep:
        parameter = _require(cfg, "sweep.parameter")
        grid = [float(g) for g in _require(cfg, "sweep.grid")]
        if not grid:
            raise ConfigError("sweep.grid must be non-empty")
        d = Discretization(beta, n_ts[-1])
        rows = _sweep_rows(model, h, d, parameter, grid, fd_step, _workers(cfg))
        name = f"correction_sweep_{parameter}.csv"
        _write_rows(out / name, [parameter, "delta_f_sum", f"d_delta_f_d{parameter}"], rows)
        written.append(name)
    print(f"correction: wrote {', '.join(written)} to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    which = _require(cfg, "sweep.pipeline")
    if which == "exact":
        return cmd_exact(args)
    if which == "correction":
        return cmd_correction(args)
    raise ConfigError(f"sweep.pipeline must be 'exact' or 'correction', got {which!r}")


# ---------------------------------------------------------------------------
# validate: the registered invariant checks
# ---------------------------------------------------------------------------

def _check_site_determinant():
    model = ModelSpec.site(U=1.3, mu=0.6)
    h = HilbertConfig(40)
    dt = 0.12
    b = hessian_blocks(model, find_saddle(model, h), dt, h, fd_step=1e-3)
    worst = 0.0
    for x in (0.3, 1.0, 2.4):
        got = complex(kernel_det(b, x / dt))
        want = complex(kernel_det_closed(model, x / dt, dt))
        worst = max(worst, abs(got - want) / abs(want))
    return worst, 1e-8, "site determinant vs closed form"


def _check_spin_determinant():
    model = ModelSpec.spin(1.5)
    dt = 0.1
    b = hessian_blocks(model, find_saddle(model), dt, fd_step=1e-3)
    worst = 0.0
    for x in (0.4, 1.7):
        got = complex(kernel_det(b, x / dt))
        want = complex(kernel_det_closed(model, x / dt, dt))
        worst = max(worst, abs(got - want) / abs(want))
    return worst, 1e-8, "spin determinant vs closed form"


def _check_lattice_determinant():
    model = ModelSpec.lattice(U=1.0, mu=0.7, J=0.3, D=1, L=4)
    h = HilbertConfig(40)
    dt = 0.08
    saddle = find_saddle(model, h)
    worst = 0.0
    for k in lattice_modes(model):
        b = bloch_blocks(model, saddle, k, dt, h, fd_step=1e-3)
        for x in (0.5, 1.3):
            got = complex(kernel_det(b, x / dt))
            want = complex(kernel_det_closed(model, x / dt, dt, k))
            worst = max(worst, abs(got - want) / abs(want))
    return worst, 1e-8, "lattice determinant vs derived closed form"


def _check_block_circulant():
    from .semiclassics import HessianBlocks  # local import to keep namespace tidy

    model = ModelSpec.site(U=1.0, mu=0.8)
    h = HilbertConfig(40)
    dt = 0.15
    b = hessian_blocks(model, find_saddle(model, h), dt, h, fd_step=1e-3)
    worst = 0.0
    lam = 0.7
    for n_t in (3, 5, 7):
        d = Discretization(beta=n_t * dt, n_t=n_t)
        prod = 1.0 + 0j
        for w in matsubara_grid(d):
            prod *= np.linalg.det(assemble_kernel(b, w) + lam * np.eye(2))
        full = _circulant_matrix(b, n_t) + lam * np.eye(2 * n_t)
        worst = max(worst, abs(prod - np.linalg.det(full)) / abs(prod))
    return worst, 1e-10, "block-circulant factorization (shifted)"


def _circulant_matrix(b, n_t: int) -> np.ndarray:
    m = b.m
    s = np.asarray(b.L2 + b.L2.T)
    full = np.zeros((m * n_t, m * n_t), dtype=complex)
    for t in range(n_t):
        tn = (t + 1) % n_t
        sl = slice(m * t, m * t + m)
        sn = slice(m * tn, m * tn + m)
        full[sl, sl] += s
        full[sl, sn] += np.asarray(b.L2D)
        full[sn, sl] += np.asarray(b.L2D).T
    return full


def _check_sum_rule():
    d = Discretization(beta=5.0, n_t=201)
    r1 = sum_rule_residual(lambda w: np.ones_like(np.asarray(w, dtype=complex)), d)
    dt = d.dt
    r2 = sum_rule_residual(lambda w: np.exp(1j * np.asarray(w, dtype=complex) * dt), d)
    return max(r1, r2), 1e-8, "circle sum rule, f = 1 and f = e^{i w dt}"


def _check_grid_symmetry():
    d = Discretization(beta=3.0, n_t=11)
    g = matsubara_grid(d)
    return float(np.max(np.abs(g + g[::-1]))), 1e-14, "Matsubara grid symmetry"


def _check_zero_mode():
    model = ModelSpec.site(U=1.0, mu=0.9)
    h = HilbertConfig(40)
    b = hessian_blocks(model, find_saddle(model, h), 0.1, h, fd_step=1e-3)
    return abs(complex(kernel_det(b, 0.0))), 1e-10, "gauge zero mode at w = 0"


_CHECKS = [
    _check_grid_symmetry,
    _check_site_determinant,
    _check_spin_determinant,
    _check_lattice_determinant,
    _check_block_circulant,
    _check_zero_mode,
    _check_sum_rule,
]


def cmd_validate(args) -> int:
    failures = 0
    print(f"{'check':45s} {'value':>12s} {'tolerance':>10s}  status")
    for check in _CHECKS:
        try:
            value, tol, name = check()
            ok = value <= tol
        except CspiError as exc:
            name, value, tol, ok = f"{check.__name__}: {exc}", math.inf, 0.0, False
        if not ok:
            failures += 1
        print(f"{name:45s} {value:12.3e} {tol:10.0e}  {'PASS' if ok else 'FAIL'}")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cspi",
        description="Discrete-time coherent-state path-integral corrections")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in (
            ("exact", cmd_exact, True),
            ("correction", cmd_correction, True),
            ("sweep", cmd_sweep, True),
            ("validate", cmd_validate, False)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config)
        p.add_argument("--out", default=None)
        p.add_argument("--n-t", dest="n_t", type=int, default=None)
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except CspiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
