"""
Unit tests for communication delays and their compensation.
"""
import numpy as np
import pytest

from backend.app.core.errors import MismatchedPlantDelay, NegativeDelay
from backend.app.models.schemas import DelaySection, NormKind
from backend.app.services.coprime import platoon_dcf
from backend.app.services.delay import (
    DelayConfig,
    compensated_controller,
    compensation_residual,
    delayed_controller_tfm,
    membership_in_S,
    physical_config,
    platoon_controller_tfm,
    unabsorbed_broadcast_delay,
)
from backend.app.services.model_matching import QBasis, design_platoon
from backend.app.services.platoon_model import reference_config
from backend.app.services.synthesis import (
    build_controller,
    direct_closed_loop,
    recursion_tfm,
)
from backend.app.services.tf_core import RationalFn, check_grid

THETA, PHI = 0.03, 0.1


def designed(delay_s: float, n: int = 3):
    cfg = reference_config(h=0.5, n=n, delay_s=delay_s)
    dcf = platoon_dcf(cfg)
    design = design_platoon(cfg, dcf, NormKind.HINF, QBasis(degree=4, pole_s=0.2))
    return cfg, build_controller(dcf, design.q)


def zw0_offdiag(cfg, kv, w) -> float:
    direct = direct_closed_loop(cfg, kv, w)
    return float(np.max(np.abs(direct.t_zw0[:, 1:, :])))


def zw0_relative(cfg, kv, w) -> float:
    direct = direct_closed_loop(cfg, kv, w)
    return zw0_offdiag(cfg, kv, w) / max(1.0, float(np.max(np.abs(direct.t_zw0))))


class TestDelayConfig:
    """Tests for DelayConfig."""

    def test_measurement_delay_defaults_to_theta(self):
        d = DelayConfig(theta_s=THETA, phi_s=PHI)
        assert d.measurement_delay_s == THETA
        assert d.plant_delay_s == pytest.approx(PHI + THETA)

    def test_uncompensated_plant_delay(self):
        d = DelayConfig(theta_s=THETA, phi_s=PHI, compensated=False)
        assert d.plant_delay_s == PHI

    def test_independent_measurement_delay(self):
        d = DelayConfig(theta_s=THETA, phi_s=PHI, compensation_delay_s=0.05)
        assert d.plant_delay_s == pytest.approx(0.15)

    def test_negative_rejected(self):
        with pytest.raises(NegativeDelay):
            DelayConfig(theta_s=-0.01)

    def test_from_section(self):
        d = DelayConfig.from_section(DelaySection(theta_s=THETA, phi_s=PHI, compensated=False), 4)
        assert d.pade_order == 4 and not d.compensated


class TestDelayedController:
    """Broadcast delay breaks the leader-information structure."""

    def test_zero_delay_is_recursion(self):
        _, c = designed(0.0)
        w = check_grid()
        d = DelayConfig()
        assert np.allclose(delayed_controller_tfm(c, d).evaluate(w), recursion_tfm(c).evaluate(w))

    def test_delay_pattern(self):
        """Entry (i, j) carries pade((i − j)·θ)"""
        _, c = designed(0.0)
        d = DelayConfig(theta_s=THETA)
        w = check_grid()
        delayed = delayed_controller_tfm(c, d).evaluate(w)
        plain = recursion_tfm(c).evaluate(w)
        assert np.allclose(delayed[:, 2, 0], plain[:, 2, 0] * d.pade(2 * THETA).freq(w))
        assert np.allclose(delayed[:, 1, 1], plain[:, 1, 1])

    def test_uncompensated_loses_structure(self):
        """θ > 0 without compensation: outside S and T_zw0 not diagonal"""
        cfg, c = designed(PHI)
        d = DelayConfig(theta_s=THETA, phi_s=PHI, compensated=False)
        k = delayed_controller_tfm(c, d)
        w = check_grid()
        assert not membership_in_S(k, cfg)
        assert zw0_offdiag(cfg, k.evaluate(w), w) > 1e-6

    def test_series_filter_does_not_help(self):
        """A stable filter on the local controllers does not restore the structure"""
        cfg, c = designed(PHI)
        d = DelayConfig(theta_s=THETA, phi_s=PHI, compensated=False)
        k = delayed_controller_tfm(c, d, series_filter=RationalFn(1.0, [-5.0], [-4.0]))
        assert not membership_in_S(k, cfg)


class TestCompensation:
    """Measurement-delay compensation restores the structure."""

    def test_compensated_restores_structure(self):
        """Designed on pade(φ + θ), run on a plant delayed by φ only: T_zw0 lives in row 1"""
        _, c = designed(PHI + THETA)
        d = DelayConfig(theta_s=THETA, phi_s=PHI)
        comp = compensated_controller(c, d)
        assert comp.measurement_delay_s == THETA
        assert comp.feedforward_delay_s == THETA

        w = check_grid()
        placed = recursion_tfm(comp).evaluate(w) * d.pade(THETA).freq(w)[:, None, None]
        assert np.allclose(platoon_controller_tfm(comp, d).evaluate(w), placed)

        physical = reference_config(h=0.5, n=3, delay_s=PHI)
        assert zw0_relative(physical, placed, w) < 1e-6
        assert membership_in_S(platoon_controller_tfm(comp, d), physical)

    def test_per_hop_placement_leaks(self):
        """Delayed broadcast with delayed measurement and immediate actuation is outside S"""
        _, c = designed(PHI + THETA)
        d = DelayConfig(theta_s=THETA, phi_s=PHI)
        w = check_grid()
        per_hop = delayed_controller_tfm(c, d) * d.pade(THETA)
        physical = reference_config(h=0.5, n=3, delay_s=PHI)
        assert not membership_in_S(per_hop, physical)
        assert zw0_relative(physical, per_hop.evaluate(w), w) > 1e-6

    def test_uncompensated_sees_broadcast_delay(self):
        """No measurement delay: the platoon sees the per-hop delayed controller"""
        _, c = designed(PHI)
        d = DelayConfig(theta_s=THETA, phi_s=PHI, compensated=False)
        w = check_grid()
        assert np.allclose(platoon_controller_tfm(c, d).evaluate(w), delayed_controller_tfm(c, d).evaluate(w))

    def test_partial_compensation_leaks(self):
        """A measurement delay shorter than the broadcast latency leaves a per-hop delay"""
        d = DelayConfig(theta_s=THETA, phi_s=PHI, compensation_delay_s=0.01)
        cfg, c = designed(d.plant_delay_s)
        comp = compensated_controller(c, d)
        assert unabsorbed_broadcast_delay(comp, d) == pytest.approx(THETA - 0.01)
        assert compensation_residual(comp, d, cfg) > 1e-6

    def test_compensation_residual(self):
        d = DelayConfig(theta_s=THETA, phi_s=PHI)
        cfg, c = designed(d.plant_delay_s)
        assert compensation_residual(compensated_controller(c, d), d, cfg) < 1e-6

    def test_physical_config_drops_measurement_delay(self):
        d = DelayConfig(theta_s=THETA, phi_s=PHI)
        cfg, c = designed(d.plant_delay_s)
        physical = physical_config(cfg, compensated_controller(c, d))
        assert physical.absorbed_delay_s == pytest.approx(PHI)
        w = check_grid()
        assert np.allclose(physical.base_plant_g_wp.freq(w), reference_config(delay_s=PHI).base_plant_g_wp.freq(w))
        assert physical_config(cfg, c) is cfg

    def test_mismatched_design_delay(self):
        _, c = designed(PHI)
        with pytest.raises(MismatchedPlantDelay):
            compensated_controller(c, DelayConfig(theta_s=THETA, phi_s=PHI))

    def test_no_delay_unchanged(self):
        _, c = designed(0.0)
        assert compensated_controller(c, DelayConfig()) is c
