import math

import numpy as np
import pytest

from cspi.errors import CapacityError, DomainError
from cspi.models import HilbertConfig, ModelSpec
from cspi.oracle import (
    converge_cutoff,
    exact_occupation,
    exact_thermal,
    staircase,
)

H30 = HilbertConfig(30)


def boltzmann_reference(energies, beta):
    """Independent plain-python Boltzmann sum."""
    e0 = min(energies)
    z = sum(math.exp(-beta * (e - e0)) for e in energies)
    return e0 - math.log(z) / beta


class TestExactThermal:
    def test_spin_half_closed_form(self):
        beta = 3.7
        res = exact_thermal(ModelSpec.spin(0.5), beta)
        assert abs(res.Z - 2 * math.exp(-beta / 4)) < 1e-14 * res.Z
        assert abs(res.F - (0.25 - math.log(2) / beta)) < 1e-14

    def test_spin_matches_level_sum(self):
        # closed (2S+1)-level sum as the reference
        for two_S in (1, 2, 3, 5):
            S, beta = two_S / 2.0, 1.3
            res = exact_thermal(ModelSpec.spin(S), beta)
            want = boltzmann_reference([m * m for m in np.arange(-S, S + 1)], beta)
            assert abs(res.F - want) < 1e-14

    def test_site_ground_state_dominates(self):
        res = exact_thermal(ModelSpec.site(U=1.0, mu=0.3), 50.0, H30)
        ks = np.arange(31)
        want = boltzmann_reference(list(0.5 * ks * (ks - 1) - 0.3 * ks), 50.0)
        assert abs(res.F - want) < 1e-13
        assert abs(res.F - (-0.3)) < 1e-6

    def test_vacuum_limit(self):
        # mu = 0 sits exactly on the n = 0 -> 1 step (E_0 = E_1 = 0), so the
        # clean vacuum limit needs mu < 0; at mu = 0 the degeneracy gives
        # F = -ln(2)/beta and <n> = 1/2 exactly.
        res = exact_thermal(ModelSpec.site(U=1.0, mu=-0.05), 500.0, H30)
        assert abs(res.F) < 1e-10
        assert abs(res.observables["n"]) < 1e-10
        deg = exact_thermal(ModelSpec.site(U=1.0, mu=0.0), 200.0, H30)
        assert abs(deg.F + math.log(2) / 200.0) < 1e-12
        assert abs(deg.observables["n"] - 0.5) < 1e-12

    def test_large_beta_no_underflow(self):
        res = exact_thermal(ModelSpec.site(U=1.0, mu=2.3), 5000.0, H30)
        assert np.isfinite(res.F)

    def test_beta_positive_required(self):
        with pytest.raises(DomainError):
            exact_thermal(ModelSpec.spin(1.0), -1.0)

    def test_entropy_nonnegative(self):
        # S = beta^2 dF/dbeta >= 0 by finite differences
        m = ModelSpec.site(U=1.0, mu=0.7)
        for beta in (0.5, 2.0, 10.0):
            h = 1e-4 * beta
            fp = exact_thermal(m, beta + h, H30).F
            fm = exact_thermal(m, beta - h, H30).F
            assert beta ** 2 * (fp - fm) / (2 * h) >= -1e-9

    def test_lattice_two_site_capacity(self):
        m = ModelSpec.lattice(U=1.0, mu=0.3, J=0.1, D=1, L=2)
        res = exact_thermal(m, 5.0, HilbertConfig(4))
        assert res.Z > 0 and np.isfinite(res.F)
        with pytest.raises(CapacityError):
            exact_thermal(ModelSpec.lattice(U=1.0, mu=0.3, J=0.1, D=1, L=3), 5.0,
                          HilbertConfig(4))


class TestOccupation:
    def test_staircase_plateau_one(self):
        assert round(exact_occupation(ModelSpec.site(U=1.0, mu=0.3), 50.0, H30)) == 1

    def test_staircase_plateau_three(self):
        assert round(exact_occupation(ModelSpec.site(U=1.0, mu=2.6), 50.0, H30)) == 3

    def test_negative_mu_empty(self):
        assert exact_occupation(ModelSpec.site(U=1.0, mu=-0.4), 50.0, H30) < 1e-8

    def test_monotone_in_mu(self):
        vals = [exact_occupation(ModelSpec.site(U=1.0, mu=mu), 8.0, H30)
                for mu in np.linspace(-0.5, 2.5, 16)]
        assert all(b - a > -1e-10 for a, b in zip(vals, vals[1:]))

    def test_spin_model_rejected(self):
        with pytest.raises(DomainError):
            exact_occupation(ModelSpec.spin(1.0), 1.0)


class TestStaircase:
    def test_half_step_offset_columns(self):
        m = ModelSpec.site(U=1.0, mu=0.0)
        rows = staircase(m, [0.3, 0.7, 1.2], 50.0, H30)
        assert [round(r[1]) for r in rows] == [1, 1, 2]
        assert [r[2] for r in rows] == [1, 1, 2]   # round(mu/U + 1/2)
        assert [r[3] for r in rows] == [0, 1, 1]   # round(mu/U)

    def test_no_step_at_half_integer(self):
        m = ModelSpec.site(U=1.0, mu=0.0)
        beta = 50.0
        eps = 1.0 / beta
        rows = staircase(m, [0.5 - eps, 0.5 + eps], beta, H30)
        assert round(rows[0][1]) == 1 and round(rows[1][1]) == 1

    def test_step_at_integer(self):
        m = ModelSpec.site(U=1.0, mu=0.0)
        beta = 200.0
        with pytest.warns(UserWarning):
            rows = staircase(m, [1.0 - 0.04, 1.0 + 0.04], beta, H30)
        assert round(rows[0][1]) == 1 and round(rows[1][1]) == 2

    def test_empty_grid(self):
        assert staircase(ModelSpec.site(U=1.0, mu=0.0), [], 50.0, H30) == []

    def test_thermal_width_warning(self):
        with pytest.warns(UserWarning):
            staircase(ModelSpec.site(U=1.0, mu=0.0), [1.01], 50.0, H30)


class TestConvergeCutoff:
    def test_small_cutoff_suffices(self):
        h = converge_cutoff(ModelSpec.site(U=1.0, mu=0.3), 50.0, 1e-10)
        assert h.n_max <= 10

    def test_vacuum_needs_one(self):
        h = converge_cutoff(ModelSpec.site(U=1.0, mu=-0.5), 20.0, 1e-8)
        assert h.n_max == 1

    def test_zero_tolerance_unreachable(self):
        with pytest.raises(CapacityError):
            converge_cutoff(ModelSpec.site(U=1.0, mu=0.3), 50.0, 0.0)
