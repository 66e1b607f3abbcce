import math

import numpy as np
import pytest

from cspi.errors import DerivativeError, DomainError, OptimizationError
from cspi.models import (
    CoherentPoint,
    HilbertConfig,
    ModelSpec,
    closed_overlap_bose,
)
from cspi.semiclassics import (
    Discretization,
    HessianBlocks,
    assemble_kernel,
    blocks_from_json,
    blocks_to_json,
    bloch_blocks,
    check_discretization,
    classical_energy,
    cpi_det,
    cpi_kernel,
    det_ratio,
    discrete_lagrangian,
    find_saddle,
    hessian_blocks,
    kernel_det,
    kernel_det_closed,
    kernel_trig_coeffs,
    lattice_modes,
    lattice_saddle_density,
)

H40 = HilbertConfig(40)
SITE = ModelSpec.site(U=1.0, mu=1.0)


def site_blocks(model=SITE, dt=0.1, fd_step=1e-3):
    return hessian_blocks(model, find_saddle(model, H40), dt, H40, fd_step)


class TestDiscretization:
    def test_even_rejected(self):
        with pytest.raises(DomainError):
            Discretization(beta=1.0, n_t=10)

    def test_constraint_violation_named(self):
        with pytest.raises(DomainError, match="mu"):
            check_discretization(ModelSpec.site(U=1.0, mu=3.0), Discretization(2.0, 5))

    def test_constraint_ok(self):
        check_discretization(ModelSpec.site(U=1.0, mu=0.5), Discretization(2.0, 5))


class TestDiscreteLagrangian:
    def test_diagonal_point_real(self):
        p = CoherentPoint.bose(1.0, 0.0)
        val = discrete_lagrangian(SITE, p, p, 0.1, H40)
        assert abs(val.imag) < 1e-13

    def test_spin_half_identity_hamiltonian(self):
        m = ModelSpec.spin(0.5)
        p = CoherentPoint.spin(1.1, 0.7)
        val = discrete_lagrangian(m, p, p, 0.1, HilbertConfig(1))
        assert abs(val - 0.025) < 1e-13

    def test_site_saddle_action_density(self):
        # realized Eq.-3 convention: L0 = -(mu^2 / 2U) dt at the saddle
        # (the published expression carries the opposite sign)
        p = CoherentPoint.bose(1.0, 0.0)
        val = discrete_lagrangian(SITE, p, p, 0.1, H40)
        assert abs(val - (-0.05)) < 1e-12

    def test_off_diagonal_matches_closed_forms(self):
        p, q = CoherentPoint.bose(0.9, 0.1), CoherentPoint.bose(1.2, 0.5)
        got = discrete_lagrangian(SITE, p, q, 0.2, H40)
        ov = closed_overlap_bose(0.9, 0.1, 1.2, 0.5)
        a1 = math.sqrt(0.9) * np.exp(-1j * 0.1)
        a2 = math.sqrt(1.2) * np.exp(1j * 0.5)
        elem = 0.5 * (a1 * a2) ** 2 - 1.0 * a1 * a2
        assert abs(got - (-np.log(ov) + 0.2 * elem)) < 1e-10

    def test_lattice_factorized_path(self):
        m = ModelSpec.lattice(U=1.0, mu=0.5, J=0.2, D=1, L=3)
        p = CoherentPoint((0.8, 0.0, 0.9, 0.1, 1.0, 0.2))
        q = CoherentPoint((0.9, 0.1, 0.8, 0.0, 1.1, 0.3))
        val = discrete_lagrangian(m, p, q, 0.1, HilbertConfig(30))
        assert np.isfinite(val.real) and np.isfinite(val.imag)


class TestFindSaddle:
    def test_site_density(self):
        s = find_saddle(ModelSpec.site(U=1.0, mu=2.0), H40)
        assert abs(s.params[0] - 2.0) < 1e-9

    def test_vacuum_boundary(self):
        s = find_saddle(ModelSpec.site(U=1.0, mu=-0.5), H40)
        assert s.params[0] == 0.0

    def test_spin_equatorial(self):
        for S in (0.5, 1.0, 2.5):
            m = ModelSpec.spin(S)
            s = find_saddle(m)
            assert abs(s.params[0] - math.pi / 2) < 1e-8
            assert abs(classical_energy(m, s, HilbertConfig(1)) - S / 2) < 1e-10

    def test_lattice_uniform_density(self):
        m = ModelSpec.lattice(U=1.0, mu=0.7, J=0.3, D=1, L=4)
        s = find_saddle(m, H40)
        assert abs(s.params[0] - 1.3) < 1e-8
        assert len(s.params) == 8

    def test_stall_reports_best_point(self):
        with pytest.raises(OptimizationError) as exc:
            find_saddle(ModelSpec.site(U=1.0, mu=2.0), H40, gtol=1e-25, max_iter=3)
        assert exc.value.best_point is not None
        assert exc.value.residual > 0


class TestHessianBlocks:
    def test_published_single_site_blocks(self):
        b = site_blocks()
        assert np.allclose(b.L2, np.diag([0.275, 0.9]), atol=1e-9)
        want = -0.9 * np.array([[0.25, 0.5j], [-0.5j, 1.0]])
        assert np.allclose(b.L2D, want, atol=1e-9)
        assert abs(b.L0 - (-0.05)) < 1e-10

    def test_fd_step_convergence_order(self):
        vals = {}
        for h in (0.04, 0.02, 0.01):
            vals[h] = site_blocks(fd_step=h).L2D
        d1 = np.max(np.abs(vals[0.04] - vals[0.02]))
        d2 = np.max(np.abs(vals[0.02] - vals[0.01]))
        order = math.log2(d1 / d2)
        assert order >= 1.8

    def test_fd_step_range_guard(self):
        with pytest.raises(DerivativeError):
            site_blocks(fd_step=1e-8)

    def test_requires_saddle(self):
        with pytest.raises(DomainError):
            hessian_blocks(SITE, CoherentPoint.bose(1.4, 0.0), 0.1, H40)

    def test_static_kernel_vanishes_linearly(self):
        # (L2D + L2D^T) -> -(L2 + L2^T) as dt -> 0: the static kernel S0
        # is O(dt) with the U-curvature in the density direction
        s0 = {}
        for dt in (0.1, 0.05):
            b = site_blocks(dt=dt)
            s0[dt] = np.asarray(b.L2 + b.L2.T + b.L2D + b.L2D.T)
            assert abs(s0[dt][0, 0] - SITE.U * dt) < 1e-9
            assert abs(s0[dt][1, 1]) < 1e-9
        assert np.max(np.abs(s0[0.05])) < 0.6 * np.max(np.abs(s0[0.1]))

    def test_spin_blocks_determinant(self):
        m = ModelSpec.spin(1.5)
        b = hessian_blocks(m, find_saddle(m), 0.1, fd_step=1e-3)
        for x in (0.4, 1.3, 2.9):
            got = complex(kernel_det(b, x / 0.1))
            want = 2 * (1 - math.cos(x)) * (1 - 1.0 * 0.1)
            assert abs(got - want) < 1e-9 * abs(want)

    def test_json_roundtrip(self):
        b = site_blocks()
        b2 = blocks_from_json(blocks_to_json(b))
        assert np.allclose(b2.L2, b.L2) and np.allclose(b2.L2D, b.L2D)
        assert b2.L0 == b.L0 and b2.dt == b.dt and b2.label == b.label


class TestAssembledKernel:
    def test_zero_mode(self):
        b = site_blocks()
        assert abs(complex(kernel_det(b, 0.0))) < 1e-10

    def test_matches_closed_form_on_real_axis(self):
        b = site_blocks()
        for x in (0.5, 1.7, 3.0):
            got = complex(kernel_det(b, x / b.dt))
            want = 2 * (1 - math.cos(x)) * 0.9
            assert abs(got - want) <= 1e-8 * abs(want)

    def test_edge_frequency(self):
        b = site_blocks()
        got = complex(kernel_det(b, math.pi / b.dt))
        assert abs(got - 4 * 0.9) < 1e-9

    def test_periodicity(self):
        b = site_blocks()
        w = 1.234
        k1 = assemble_kernel(b, w)
        k2 = assemble_kernel(b, w + 2 * math.pi / b.dt)
        assert np.max(np.abs(k1 - k2)) < 1e-12

    def test_determinant_real_on_real_axis_all_models(self):
        blocks = [site_blocks()]
        ms = ModelSpec.spin(1.0)
        blocks.append(hessian_blocks(ms, find_saddle(ms), 0.1, fd_step=1e-3))
        ml = ModelSpec.lattice(U=1.0, mu=0.6, J=0.2, D=1, L=4)
        sl = find_saddle(ml, H40)
        blocks.extend(bloch_blocks(ml, sl, k, 0.1, H40) for k in lattice_modes(ml))
        for b in blocks:
            for w in np.linspace(-20.0, 20.0, 7):
                d = complex(kernel_det(b, w))
                assert abs(d.imag) <= 1e-12 * max(1.0, abs(d.real))

    def test_twenty_random_tuples_against_closed_form(self):
        from cspi.models import default_cutoff

        rng = np.random.default_rng(7)
        for _ in range(20):
            U = rng.uniform(0.5, 3.0)
            dt = rng.uniform(0.05, 0.3)
            mu = rng.uniform(0.1, 0.49) / dt
            x = rng.uniform(0.05, math.pi)
            m = ModelSpec.site(U=U, mu=mu)
            h = default_cutoff(m, [CoherentPoint.bose(mu / U, 0.0)])
            b = hessian_blocks(m, find_saddle(m, h), dt, h, fd_step=1e-3)
            got = complex(kernel_det(b, x / dt))
            want = 2 * (1 - math.cos(x)) * (1 - mu * dt)
            assert abs(got - want) <= 1e-8 * abs(want)

    def test_trig_coefficients_reconstruct(self):
        b = site_blocks()
        cs = kernel_trig_coeffs(b)
        x = 0.77
        want = complex(kernel_det(b, x / b.dt))
        got = sum(c * np.exp(1j * r * x) for c, r in zip(cs, range(-2, 3)))
        assert abs(got - want) < 1e-12
        assert np.max(np.abs(cs - np.conj(cs[::-1]))) < 1e-12  # real even determinant


class TestBlockCirculant:
    @staticmethod
    def full_matrix(b, n_t):
        m = b.m
        s = np.asarray(b.L2 + b.L2.T)
        full = np.zeros((m * n_t, m * n_t), dtype=complex)
        for t in range(n_t):
            tn = (t + 1) % n_t
            sl, sn = slice(m * t, m * (t + 1)), slice(m * tn, m * (tn + 1))
            full[sl, sl] += s
            full[sl, sn] += np.asarray(b.L2D)
            full[sn, sl] += np.asarray(b.L2D).T
        return full

    def test_product_identity_shifted(self):
        # the gauge zero mode at w = 0 makes both sides vanish, so the
        # identity is certified on the diagonally shifted form
        b = site_blocks(ModelSpec.site(U=1.0, mu=0.8), dt=0.15)
        for lam in (0.37, 1.0):
            for n_t in (3, 5, 7):
                d = Discretization(beta=n_t * 0.15, n_t=n_t)
                grid = 2 * math.pi * np.arange(-(n_t - 1) // 2, (n_t - 1) // 2 + 1) / d.beta
                prod = np.prod([np.linalg.det(assemble_kernel(b, w) + lam * np.eye(2))
                                for w in grid])
                full = np.linalg.det(self.full_matrix(b, n_t) + lam * np.eye(2 * n_t))
                assert abs(prod - full) <= 1e-10 * abs(full)

    def test_product_identity_generic_blocks(self):
        # pure linear algebra away from the zero mode: random blocks
        rng = np.random.default_rng(3)
        L2 = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        L2 = (L2 + L2.T) / 2 + 2.0 * np.eye(2)
        L2D = 0.3 * (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)))
        b = HessianBlocks(L0=0.0, L2=L2, L2D=L2D, dt=0.2)
        n_t = 5
        d = Discretization(beta=1.0, n_t=n_t)
        grid = 2 * math.pi * np.arange(-2, 3) / d.beta
        prod = np.prod([np.linalg.det(assemble_kernel(b, w, d.dt)) for w in grid])
        full = np.linalg.det(self.full_matrix(b, n_t))
        assert abs(prod - full) <= 1e-10 * abs(full)

    def test_full_action_hessian_matches_circulant(self):
        # independent route: FD Hessian of the summed action over all
        # slices reproduces the circulant built from one step's blocks
        from cspi.semiclassics import _make_site_lagrangian

        model, dt, n_t = ModelSpec.site(U=1.0, mu=0.9), 0.12, 3
        saddle = find_saddle(model, H40)
        b = hessian_blocks(model, saddle, dt, H40, fd_step=1e-3)
        step = _make_site_lagrangian(model, H40, dt, saddle.params[0])

        def action(z):
            # z holds (dn, dphi) per slice
            total = 0.0
            for t in range(n_t):
                tn = (t + 1) % n_t
                total = total + step(np.array([z[2 * t], z[2 * t + 1],
                                               z[2 * tn], z[2 * tn + 1]]))
            return total

        dim = 2 * n_t
        hstep = 1e-3
        Hfull = np.zeros((dim, dim), dtype=complex)
        f0 = action(np.zeros(dim))
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = hstep
            Hfull[i, i] = (action(e) - 2 * f0 + action(-e)) / hstep ** 2
            for j in range(i + 1, dim):
                u = np.zeros(dim)
                u[j] = hstep
                Hfull[i, j] = Hfull[j, i] = (action(e + u) - action(e - u)
                                             - action(-e + u) + action(-e - u)) / (4 * hstep ** 2)
        assert np.max(np.abs(Hfull - self.full_matrix(b, n_t))) < 1e-5


class TestCpiKernelAndRatio:
    def test_site_cpi_det_is_beta_omega_squared(self):
        b = site_blocks()
        d = Discretization(beta=1.1, n_t=11)
        for w in (0.7, 5.0, math.pi / d.dt):
            got = complex(cpi_det(b, w, d))
            assert abs(got - (d.beta * w) ** 2) <= 1e-8 * (d.beta * w) ** 2
        K = cpi_kernel(b, 2.0, d)
        assert abs(np.linalg.det(K) - (d.beta * 2.0) ** 2) <= 1e-8 * (d.beta * 2.0) ** 2

    def test_cpi_det_vanishes_at_zero(self):
        b = site_blocks()
        d = Discretization(beta=1.1, n_t=11)
        assert abs(complex(cpi_det(b, 0.0, d))) < 1e-8

    def test_ratio_edge_value(self):
        m = ModelSpec.site(U=1.0, mu=0.5)
        b = hessian_blocks(m, find_saddle(m, H40), 0.1, H40, fd_step=1e-3)
        d = Discretization(beta=1.1, n_t=11)
        got = det_ratio(b, math.pi / d.dt, d)
        want = 4 * 0.95 / (11 * math.pi) ** 2
        assert abs(got - want) <= 1e-8 * want

    def test_ratio_real_on_real_axis(self):
        b = site_blocks()
        d = Discretization(beta=2.1, n_t=21)
        for w in (0.0, 1.0, 17.0, -17.0):
            r = det_ratio(b, w, d)
            assert abs(r.imag) <= 1e-10 * max(1.0, abs(r.real))
        r1, r2 = det_ratio(b, 5.0, d), det_ratio(b, -5.0, d)
        assert abs(r1 - r2) < 1e-12 * abs(r1)

    def test_ratio_series_limit(self):
        m = ModelSpec.site(U=1.0, mu=0.5)
        d = Discretization(beta=1.1, n_t=11)
        b = hessian_blocks(m, find_saddle(m, H40), d.dt, H40, fd_step=1e-3)
        want = (d.dt / d.beta) ** 2 * (1 - 0.5 * d.dt)
        assert abs(det_ratio(b, 0.0, d) - want) <= 1e-8 * want
        # series and direct evaluation agree across the switch point; the
        # closed form there is (1 - mu dt)(dt/beta)^2 (1 - x^2/12 + x^4/360)
        for w in (0.9e-4 / d.dt, 1.1e-4 / d.dt):
            x = w * d.dt
            closed = want * (1 - x ** 2 / 12 + x ** 4 / 360)
            assert abs(det_ratio(b, w, d) - closed) <= 1e-7 * closed

    def test_ratio_tends_to_one_rescaled(self):
        # at fixed w the per-mode measure constant (dt/beta)^2 dominates the
        # limit; dividing it out, the ratio tends to 1 as dt -> 0
        m = ModelSpec.site(U=1.0, mu=0.3)
        saddle = find_saddle(m, H40)
        w, beta = 2.0, 2.0
        vals = []
        for n_t in (21, 41, 81):
            d = Discretization(beta, n_t)
            b = hessian_blocks(m, saddle, d.dt, H40, fd_step=1e-3)
            vals.append(abs(det_ratio(b, w, d) * n_t ** 2 - 1.0))
        assert vals[2] < vals[1] < vals[0]
        assert vals[2] < 0.05


class TestBlochBlocks:
    MODEL = ModelSpec.lattice(U=1.0, mu=0.7, J=0.3, D=1, L=4)

    def test_j_zero_reduces_to_single_site(self):
        m = ModelSpec.lattice(U=1.0, mu=0.7, J=0.0, D=1, L=4)
        s = find_saddle(m, H40)
        site = ModelSpec.site(U=1.0, mu=0.7)
        bsite = hessian_blocks(site, find_saddle(site, H40), 0.1, H40, fd_step=1e-3)
        for k in lattice_modes(m):
            b = bloch_blocks(m, s, k, 0.1, H40, fd_step=1e-3)
            assert np.max(np.abs(b.L2 - bsite.L2)) < 1e-9
            assert np.max(np.abs(b.L2D - bsite.L2D)) < 1e-9

    def test_matches_derived_closed_form(self):
        s = find_saddle(self.MODEL, H40)
        for k in lattice_modes(self.MODEL):
            b = bloch_blocks(self.MODEL, s, k, 0.08, H40, fd_step=1e-3)
            for x in (0.5, 1.9):
                got = complex(kernel_det(b, x / 0.08))
                want = complex(kernel_det_closed(self.MODEL, x / 0.08, 0.08, k))
                assert abs(got - want) <= 1e-9 * abs(want)

    def test_zero_mode_only_at_k_zero(self):
        s = find_saddle(self.MODEL, H40)
        d0 = complex(kernel_det(bloch_blocks(self.MODEL, s, (0.0,), 0.08, H40), 0.0))
        assert abs(d0) < 1e-10
        k1 = lattice_modes(self.MODEL)[1]
        d1 = complex(kernel_det(bloch_blocks(self.MODEL, s, k1, 0.08, H40), 0.0))
        assert abs(d1) > 1e-4  # gapped Bogoliubov mode

    def test_bogoliubov_gap(self):
        s = find_saddle(self.MODEL, H40)
        dt = 0.08
        nbar = lattice_saddle_density(self.MODEL)
        for k in lattice_modes(self.MODEL)[1:]:
            b = bloch_blocks(self.MODEL, s, k, dt, H40)
            eps0 = 4 * self.MODEL.J * math.sin(k[0] / 2) ** 2
            E2 = eps0 * (eps0 + 2 * self.MODEL.U * nbar)
            got = complex(kernel_det(b, 0.0)) / dt ** 2
            assert abs(got - E2) <= 1e-6 * E2

    def test_off_grid_k_rejected(self):
        s = find_saddle(self.MODEL, H40)
        with pytest.raises(DomainError):
            bloch_blocks(self.MODEL, s, (0.1234,), 0.08, H40)

    def test_against_brute_force_lattice_hessian(self):
        """Independent oracle: full 4 N_s-coordinate Hessian of the lattice
        step in plain double precision, Fourier-projected to 2x2 blocks."""
        model = ModelSpec.lattice(U=1.0, mu=0.5, J=0.25, D=1, L=3)
        h = HilbertConfig(35)
        Ns = 3
        nbar = lattice_saddle_density(model)
        from cspi.semiclassics import _make_lattice_lagrangian
        f = _make_lattice_lagrangian(model, h, 0.09, nbar=nbar, dtype=np.complex128)

        dim = 4 * Ns
        hs = 1e-3
        Hfull = np.zeros((dim, dim), dtype=complex)
        f0 = f(np.zeros(dim))
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = hs
            Hfull[i, i] = (f(e) - 2 * f0 + f(-e)) / hs ** 2
            for j in range(i + 1, dim):
                u = np.zeros(dim)
                u[j] = hs
                Hfull[i, j] = Hfull[j, i] = (f(e + u) - f(e - u) - f(-e + u) + f(-e - u)) / (4 * hs ** 2)

        def c(slice_, site, a):
            return 2 * Ns * slice_ + a * Ns + site

        saddle = find_saddle(model, h)
        for m_idx in range(3):
            ka = 2 * math.pi * m_idx / 3
            L2k = np.zeros((2, 2), complex)
            L2Dk = np.zeros((2, 2), complex)
            for r in range(Ns):
                ph = np.exp(1j * ka * r)
                for a in range(2):
                    for bb in range(2):
                        L2k += 0.5 * ph * (Hfull[c(0, 0, a), c(0, r, bb)]
                                           + Hfull[c(1, 0, a), c(1, r, bb)]) * _unit22(a, bb)
                        L2Dk += ph * Hfull[c(0, 0, a), c(1, r, bb)] * _unit22(a, bb)
            blk = bloch_blocks(model, saddle, (ka,), 0.09, h, fd_step=1e-3)
            assert np.max(np.abs(blk.L2 + blk.L2.T - (L2k + L2k.T))) < 1e-6
            assert np.max(np.abs(blk.L2D - L2Dk)) < 1e-6


def _unit22(a, b):
    m = np.zeros((2, 2))
    m[a, b] = 1.0
    return m
