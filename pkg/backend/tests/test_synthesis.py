"""
Unit tests for the leader-information controller parameterization.
Controller assembly, closed-loop structure, subspace membership and
string-stability bounds.
"""
from dataclasses import replace

import numpy as np
import pytest

from backend.app.core.errors import StructureViolation, UnstableParameter
from backend.app.services.coprime import platoon_dcf
from backend.app.services.platoon_model import homogeneous_config, reference_config
from backend.app.services.synthesis import (
    DiagonalYoula,
    build_controller,
    closed_loop,
    controller_tfm,
    direct_closed_loop,
    is_leader_information,
    kgk_in_subspace,
    lemma_maps,
    predecessor_follower_tfm,
    qi_subspace_check,
    recursion_tfm,
    string_stability_bounds,
    subspace_member,
)
from backend.app.services.tf_core import RationalFn, StructureTag, TfMatrix, check_grid, grid_residual


def random_q(rng: np.random.Generator, n: int) -> DiagonalYoula:
    """Stable, proper first-order entries with random gain, pole and feedthrough."""
    return DiagonalYoula(tuple(
        RationalFn(rng.uniform(-2.0, 2.0), [], [-rng.uniform(0.2, 5.0)]) + rng.uniform(-0.5, 0.5)
        for _ in range(n)
    ))


class TestDiagonalYoula:
    """Tests for the diagonal Youla parameter."""

    def test_unstable_rejected(self):
        with pytest.raises(UnstableParameter):
            DiagonalYoula((RationalFn(1.0, [], [0.5]),))

    def test_improper_rejected(self):
        with pytest.raises(UnstableParameter):
            DiagonalYoula((RationalFn.s(),))

    def test_size_mismatch(self):
        dcf = platoon_dcf(reference_config(n=3))
        with pytest.raises(UnstableParameter):
            build_controller(dcf, DiagonalYoula.zeros(2))


class TestControllerRealizations:
    """Y_Q⁻¹X_Q and the distributed recursion are the same controller."""

    @pytest.mark.parametrize("h", [0.0, 0.5])
    def test_factorized_equals_recursion(self, h):
        cfg = reference_config(h=h, n=4)
        c = build_controller(platoon_dcf(cfg), random_q(np.random.default_rng(1), 4))
        w = check_grid()
        assert grid_residual(controller_tfm(c).evaluate(w), recursion_tfm(c).evaluate(w)) < 1e-8

    def test_controller_lower_triangular(self):
        cfg = reference_config(h=0.5, n=3)
        k = controller_tfm(build_controller(platoon_dcf(cfg), DiagonalYoula.zeros(3)))
        assert k.structure_tag in (StructureTag.LOWER_TRIANGULAR, StructureTag.LOWER_BIDIAGONAL)

    def test_feedforward_gains(self):
        """Feedforward k is Φ_k⁻¹Φ_{k−1}"""
        cfg = reference_config(n=3)
        c = build_controller(platoon_dcf(cfg), DiagonalYoula.zeros(3))
        w = check_grid()
        assert np.allclose(c.feedforward[0].freq(w), cfg.phi(1).freq(w) / cfg.phi(2).freq(w))


class TestLeaderInformation:
    """Closed-loop structure of the leader-information controller."""

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_random_q_diagonal(self, n):
        """Twenty random diagonal Q: T_zw0 nonzero only in the first row"""
        rng = np.random.default_rng(100 + n)
        cfg = reference_config(h=0.5, n=n)
        dcf = platoon_dcf(cfg)
        w = check_grid()
        for _ in range(20):
            c = build_controller(dcf, random_q(rng, n))
            direct = direct_closed_loop(cfg, controller_tfm(c).evaluate(w), w)
            assert is_leader_information(direct, tol=1e-7)

    def test_predecessor_follower_not_leader_information(self):
        cfg = reference_config(h=0.5, n=3)
        c = build_controller(platoon_dcf(cfg), DiagonalYoula.zeros(3))
        w = check_grid()
        direct = direct_closed_loop(cfg, predecessor_follower_tfm(c).evaluate(w), w)
        assert not is_leader_information(direct)

    def test_closed_forms_match_direct(self):
        """Entrywise closed forms equal (I + GK)⁻¹ products, n=4, h=0.5"""
        cfg = reference_config(h=0.5, n=4)
        dcf = platoon_dcf(cfg)
        q = random_q(np.random.default_rng(5), 4)
        c = build_controller(dcf, q)
        w = check_grid()
        direct = direct_closed_loop(cfg, controller_tfm(c).evaluate(w), w)
        maps = lemma_maps(cfg, dcf, q)
        for name in ("t_zw0", "t_uw0", "t_zw", "t_uw"):
            assert grid_residual(getattr(maps, name).evaluate(w), getattr(direct, name)) < 1e-8, name

    def test_closed_loop_residual(self):
        cfg = reference_config(h=0.5, n=3)
        dcf = platoon_dcf(cfg)
        maps = closed_loop(cfg, dcf, random_q(np.random.default_rng(9), 3))
        assert maps.lemma_residual < 1e-8
        assert maps.t_zw.structure_tag in (StructureTag.LOWER_BIDIAGONAL, StructureTag.DIAGONAL)

    def test_closed_loop_mismatch_raises(self):
        """Block factors that no longer match the scalar factors are rejected"""
        cfg = reference_config(h=0.5, n=3)
        dcf = platoon_dcf(cfg)
        broken = replace(dcf, Yt=dcf.Yt * RationalFn.const(1.01))
        with pytest.raises(StructureViolation):
            closed_loop(cfg, broken, random_q(np.random.default_rng(9), 3))

    def test_closed_loop_with_absorbed_delay(self):
        """Closed forms agree with the block products when the plant carries pade(0.13)"""
        cfg = reference_config(h=0.5, n=3, delay_s=0.13)
        maps = closed_loop(cfg, platoon_dcf(cfg), random_q(np.random.default_rng(3), 3))
        assert maps.lemma_residual < 1e-8

    def test_full_q_closed_loop(self):
        """A full Q still gives a stabilizing loop (block forms only)"""
        cfg = reference_config(n=2)
        dcf = platoon_dcf(cfg)
        f = RationalFn(0.2, [], [-1.5])
        maps = closed_loop(cfg, dcf, TfMatrix([[f, f], [f, f]]))
        assert maps.lemma_residual is None
        assert maps.t_zw.is_stable()


class TestSubspace:
    """Membership in S = Φ⁻¹T⁻¹·{diagonal}."""

    def test_designed_controller_in_s(self):
        cfg = reference_config(h=0.5, n=3)
        c = build_controller(platoon_dcf(cfg), random_q(np.random.default_rng(3), 3))
        assert qi_subspace_check(cfg, controller_tfm(c))

    def test_predecessor_follower_not_in_s(self):
        cfg = reference_config(h=0.5, n=3)
        c = build_controller(platoon_dcf(cfg), DiagonalYoula.zeros(3))
        assert not qi_subspace_check(cfg, predecessor_follower_tfm(c))

    def test_quadratic_invariance(self):
        """K·G·K ∈ S for a generic member of S"""
        cfg = reference_config(h=0.5, n=3)
        elems = [RationalFn(1.0, [-2.0], [-1.0]), RationalFn.const(0.5), RationalFn(2.0, [], [-3.0])]
        k = subspace_member(cfg, elems)
        assert qi_subspace_check(cfg, k)
        assert kgk_in_subspace(cfg, k)


class TestStringStabilityBounds:
    """Disturbance propagation bounds."""

    def test_bounds_hold(self):
        cfg = reference_config(h=0.5, n=3)
        dcf = platoon_dcf(cfg)
        report = string_stability_bounds(cfg, lemma_maps(cfg, dcf, random_q(np.random.default_rng(11), 3)))
        assert report.all_satisfied
        assert all(e.slack >= -1e-6 for e in report.entries)
        assert report.k_independent is None
        assert len(report.entries) == 3 + 3

    def test_homogeneous_k_independent(self):
        """Homogeneous h=0: the bound does not depend on how far downstream k is"""
        cfg = homogeneous_config(6)
        dcf = platoon_dcf(cfg)
        q = DiagonalYoula.uniform(RationalFn(0.5, [], [-2.0]), 6)
        report = string_stability_bounds(cfg, lemma_maps(cfg, dcf, q))
        assert report.k_independent is True
        assert report.all_satisfied
