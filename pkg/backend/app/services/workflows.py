"""
Workflows - 流程编排
Scenario → design → verify → simulate pipelines shared by the CLI and the
HTTP API.
"""
import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from backend.app.core.config import settings
from backend.app.core.errors import MismatchedPlantDelay
from backend.app.models.schemas import (
    BasisMeta,
    CheckResult,
    ControllerDocument,
    ControllerVehicle,
    DesignReport,
    Headway,
    NormKind,
    SineGainResult,
    RationalCoeffs,
    ScenarioFile,
    SignalKind,
    SimulationSummary,
    VerifyReport,
)
from backend.app.services.coprime import PlatoonDcf, platoon_dcf
from backend.app.services.delay import (
    DelayConfig,
    compensated_controller,
    physical_config,
    platoon_controller_tfm,
)
from backend.app.services.model_matching import PlatoonDesign, QBasis, design_platoon, homogeneous_h2_optimal
from backend.app.services.platoon_model import PlatoonConfig, build_T, config_from_scenario, diag_phi
from backend.app.services.simulator import (
    SimResult,
    SimScenario,
    metrics,
    simulate,
    sinusoid_amplitude,
)
from backend.app.services.synthesis import (
    DiagonalYoula,
    LeaderInfoController,
    build_controller,
    direct_closed_loop,
    lemma_maps,
    string_stability_bounds,
)
from backend.app.services.tf_core import RationalFn, check_grid, freq_grid

logger = logging.getLogger(__name__)

# relative tolerance of the structural-zero checks
STRUCTURE_TOL = 1e-6
# seconds; stored design delay against the scenario's absorbed delay
DELAY_MATCH_TOL = 1e-9


class SynthOutcome(NamedTuple):
    cfg: PlatoonConfig
    dcf: PlatoonDcf
    design: PlatoonDesign
    controller: LeaderInfoController
    document: ControllerDocument
    report: DesignReport


# ============================================================================
# Loading
# ============================================================================

def load_scenario(path: Path) -> ScenarioFile:
    """Read and validate a scenario file (pydantic ValidationError on bad input)."""
    return ScenarioFile.model_validate_json(Path(path).read_text(encoding="utf-8"))


def load_controller(path: Path) -> ControllerDocument:
    return ControllerDocument.model_validate_json(Path(path).read_text(encoding="utf-8"))


def apply_overrides(scenario: ScenarioFile, norm: Optional[NormKind] = None,
                    basis_degree: Optional[int] = None, grid_points: Optional[int] = None,
                    dt_s: Optional[float] = None) -> ScenarioFile:
    """Command-line values take precedence over the scenario file."""
    design = scenario.design.model_dump()
    sim = scenario.simulation.model_dump()
    if norm is not None:
        design["norm"] = NormKind(norm)
    if basis_degree is not None:
        design["basis_degree"] = basis_degree
    if grid_points is not None:
        design["grid_points"] = grid_points
    if dt_s is not None:
        sim["dt_s"] = dt_s
    data = scenario.model_dump()
    data.update(design=design, simulation=sim)
    return ScenarioFile.model_validate(data)


def basis_of(scenario: ScenarioFile) -> QBasis:
    return QBasis(degree=scenario.design.basis_degree, pole_s=scenario.design.basis_pole_s)


def delays_of(scenario: ScenarioFile) -> DelayConfig:
    return DelayConfig.from_section(scenario.delays, scenario.platoon.pade_order)


# ============================================================================
# Controller document
# ============================================================================

def _coeffs(f: RationalFn) -> RationalCoeffs:
    return RationalCoeffs(num=[float(c) for c in f.num.coeffs], den=[float(c) for c in f.den.coeffs])


def _rational(c: RationalCoeffs) -> RationalFn:
    return RationalFn.from_coeffs(c.num, c.den)


def controller_document(scenario: ScenarioFile, c: LeaderInfoController,
                        design: PlatoonDesign) -> ControllerDocument:
    vehicles = []
    for k in range(1, c.n + 1):
        local = design.local[k - 1]
        vehicles.append(ControllerVehicle(
            index=k,
            q_coefficients=[float(x) for x in local.coefficients],
            local=_coeffs(c.local_k[k - 1]),
            feedforward=_coeffs(c.feedforward[k - 2]) if k >= 2 else None,
            local_norm=local.cost,
        ))
    return ControllerDocument(
        scenario=scenario.name,
        n=c.n,
        h_s=c.headway.h_seconds,
        norm=design.norm,
        design_delay_s=c.design_delay_s,
        measurement_delay_s=c.measurement_delay_s,
        feedforward_delay_s=c.feedforward_delay_s,
        basis=BasisMeta(degree=design.basis.degree, pole_s=design.basis.pole_s,
                        headway_extended=design.basis.extended),
        vehicles=vehicles,
    )


def controller_from_document(doc: ControllerDocument, cfg: PlatoonConfig) -> LeaderInfoController:
    """
    Rebuild the distributed realization from a document.

    The factors Y_Q, X_Q are not stored; the Youla parameter is rebuilt
    when every vehicle carries its basis coefficients.

    Raises:
        ValueError: document and scenario describe different platoons
        MismatchedPlantDelay: the controller was designed for another plant delay
    """
    if doc.n != cfg.n or abs(doc.h_s - cfg.h) > 1e-12:
        raise ValueError(f"controller is for n={doc.n}, h={doc.h_s}; scenario has n={cfg.n}, h={cfg.h}")
    if abs(doc.design_delay_s - cfg.absorbed_delay_s) > DELAY_MATCH_TOL:
        raise MismatchedPlantDelay(f"controller designed for a {doc.design_delay_s}s plant delay; "
                                   f"scenario absorbs {cfg.absorbed_delay_s}s")
    basis = QBasis(doc.basis.degree, doc.basis.pole_s, cfg.h if doc.basis.headway_extended else 0.0)
    q = None
    if all(len(v.q_coefficients) == basis.size for v in doc.vehicles):
        q = DiagonalYoula(tuple(basis.combine(v.q_coefficients) for v in doc.vehicles))
    return LeaderInfoController(
        yq=None,
        xq=None,
        local_k=tuple(_rational(v.local) for v in doc.vehicles),
        feedforward=tuple(_rational(v.feedforward) for v in doc.vehicles[1:]),
        headway=Headway(h_seconds=doc.h_s),
        q=q,
        design_delay_s=doc.design_delay_s,
        measurement_delay_s=doc.measurement_delay_s,
        feedforward_delay_s=doc.feedforward_delay_s,
    )


# ============================================================================
# synth
# ============================================================================

def synth(scenario: ScenarioFile) -> SynthOutcome:
    """
    Factorize, run the n local designs, build and (if requested) compensate
    the controller.

    Raises:
        DesignError: any factorization or design failure
    """
    cfg = config_from_scenario(scenario)
    ds = scenario.design
    dcf = platoon_dcf(cfg, ds.factor_pole_rad_s)
    basis = basis_of(scenario)
    w = freq_grid(ds.grid_points, ds.grid_w_min_rad_s, ds.grid_w_max_rad_s)
    design = design_platoon(cfg, dcf, ds.norm, basis, w=w)
    c = build_controller(dcf, design.q)

    delays = delays_of(scenario)
    if delays.compensated:
        c = compensated_controller(c, delays)

    bound = None
    if design.norm == NormKind.H2 and cfg.is_homogeneous() and cfg.h == 0.0:
        _, bound = homogeneous_h2_optimal(dcf, basis)

    report = DesignReport(
        scenario=scenario.name,
        norm=design.norm,
        local_norms=design.costs,
        grid_norms=[d.grid_cost for d in design.local],
        saturated=[d.saturated for d in design.local],
        certified=[d.certified for d in design.local],
        total_cost=design.total_cost,
        homogeneous_bound=bound,
        bezout_residual=dcf.bezout_residual,
    )
    doc = controller_document(scenario, c, design)
    logger.info(f"synth '{scenario.name}': local norms {[round(x, 6) for x in design.costs]}")
    return SynthOutcome(cfg, dcf, design, c, doc, report)


# ============================================================================
# verify
# ============================================================================

def controller_values(c: LeaderInfoController, delays: DelayConfig, w: np.ndarray) -> np.ndarray:
    """K(jω) from z to the applied inputs, with the delays the controller itself places."""
    return platoon_controller_tfm(c, delays).evaluate(w)


def _relative(values: np.ndarray, mask: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(values))))
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(values[:, mask]))) / scale


def _structure_checks(cfg: PlatoonConfig, kv: np.ndarray, w: np.ndarray) -> List[CheckResult]:
    n = cfg.n
    direct = direct_closed_loop(cfg, kv, w)
    rows = np.arange(n)[:, None]
    cols = np.arange(n)[None, :]

    zw0 = _relative(direct.t_zw0, np.arange(n)[:, None] >= 1)
    band = _relative(direct.t_zw, (rows - cols >= 2) | (cols > rows))
    tphik = (build_T(n, cfg.headway) @ diag_phi(cfg)).evaluate(w) @ kv
    member = _relative(tphik, rows != cols)
    return [
        CheckResult(name="leader_information", passed=zw0 < STRUCTURE_TOL, residual=zw0,
                    detail="T_zw0 nonzero only in row 1"),
        CheckResult(name="t_zw_bidiagonal", passed=band < STRUCTURE_TOL, residual=band,
                    detail="T_zw lower bidiagonal"),
        CheckResult(name="s_membership", passed=member < STRUCTURE_TOL, residual=member,
                    detail="T·Φ·K diagonal"),
    ]


def verify(scenario: ScenarioFile, doc: ControllerDocument) -> VerifyReport:
    """Bézout identity, structural zeros, S-membership and string-stability bounds."""
    cfg = config_from_scenario(scenario)
    dcf = platoon_dcf(cfg, scenario.design.factor_pole_rad_s)
    c = controller_from_document(doc, cfg)
    delays = delays_of(scenario)
    w = check_grid()

    checks = [CheckResult(name="bezout", passed=dcf.bezout_residual < settings.BEZOUT_TOL,
                          residual=dcf.bezout_residual, detail="[Ỹ X̃; −Ñ M̃][M −X; N Y] = I")]
    checks += _structure_checks(physical_config(cfg, c), controller_values(c, delays, w), w)

    if c.q is None:
        checks.append(CheckResult(name="string_stability", passed=True, detail="skipped: no Youla coefficients"))
    else:
        bounds = string_stability_bounds(cfg, lemma_maps(cfg, dcf, c.q))
        worst = min((e.slack for e in bounds.entries), default=0.0)
        detail = f"{len(bounds.entries)} propagation bounds"
        if bounds.k_independent is not None:
            detail += f", k-independent: {bounds.k_independent}"
        checks.append(CheckResult(name="string_stability", passed=bounds.all_satisfied,
                                  residual=worst, detail=detail))
    report = VerifyReport(scenario=scenario.name, checks=checks)
    logger.info(f"verify '{scenario.name}': {'pass' if report.passed else 'FAIL'}")
    return report


# ============================================================================
# simulate
# ============================================================================

def sim_scenario(scenario: ScenarioFile, cfg: PlatoonConfig, c: LeaderInfoController) -> SimScenario:
    s = scenario.simulation
    return SimScenario.from_specs(cfg, c, delays_of(scenario), s.dt_s, s.duration_s,
                                  s.leader_control, s.disturbances, delay_model=s.delay_model)


def sine_gains(scenario: ScenarioFile, cfg: PlatoonConfig, c: LeaderInfoController,
                r: SimResult) -> List[SineGainResult]:
    """
    Steady-state z_k amplitude per unit input for every sinusoidal source,
    next to |T_zkwj(jω)| of the rational closed loop.
    """
    s = scenario.simulation
    sources = {0: s.leader_control}
    sources.update(s.disturbances)
    delays = delays_of(scenario)
    gains = []
    for j, specs in sorted(sources.items()):
        sines = [x for x in specs if x.kind == SignalKind.SINE]
        if len(sines) != 1 or len(specs) != 1:
            continue
        sine = sines[0]
        w = np.array([sine.freq_rad_s])
        direct = direct_closed_loop(physical_config(cfg, c), controller_values(c, delays, w), w)
        col = direct.t_zw0[0, :, 0] if j == 0 else direct.t_zw[0, :, j - 1]
        t_from = max(sine.start_s, 0.5 * s.duration_s)
        for k in range(1, cfg.n + 1):
            predicted = float(abs(col[k - 1]))
            if predicted < 1e-6:
                continue
            simulated = sinusoid_amplitude(r.z[k - 1], r.t, sine.freq_rad_s, t_from) / abs(sine.amplitude)
            gains.append(SineGainResult(vehicle=k, source=j, freq_rad_s=sine.freq_rad_s,
                                      simulated_gain=simulated, predicted_gain=predicted))
    return gains


def simulate_workflow(scenario: ScenarioFile, doc: ControllerDocument) -> Tuple[SimResult, SimulationSummary]:
    """
    Raises:
        NonIntegerDelay, Divergence
    """
    cfg = config_from_scenario(scenario)
    c = controller_from_document(doc, cfg)
    r = simulate(sim_scenario(scenario, cfg, c))
    summary = SimulationSummary(scenario=scenario.name, samples=r.t.size, metrics=metrics(r),
                                sine_gains=sine_gains(scenario, cfg, c, r))
    return r, summary
