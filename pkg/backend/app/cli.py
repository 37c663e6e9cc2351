"""
Command-line front end.

    python -m backend.app.cli synth scenarios/reference.json --out controller.json
    python -m backend.app.cli verify controller.json scenarios/reference.json
    python -m backend.app.cli simulate controller.json scenarios/reference.json --out run/
    python -m backend.app.cli example --out run/

Exit codes: 0 ok, 1 verify failed, 2 invalid input, 3 design failure,
4 simulation diverged.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from backend.app.core.config import settings
from backend.app.core.errors import DesignError, Divergence, NonIntegerDelay, TransferFunctionError
from backend.app.models.schemas import NormKind, SimulationSummary
from backend.app.services import reporting, workflows
from backend.app.services.simulator import metrics, run_reference_example

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INVALID_INPUT = 2
EXIT_DESIGN_FAILURE = 3
EXIT_DIVERGENCE = 4


def _overrides(args) -> dict:
    return dict(norm=getattr(args, "norm", None), basis_degree=getattr(args, "basis_degree", None),
                grid_points=getattr(args, "grid_points", None), dt_s=getattr(args, "dt", None))


def cmd_synth(args) -> int:
    scenario = workflows.apply_overrides(workflows.load_scenario(args.scenario), **_overrides(args))
    outcome = workflows.synth(scenario)
    out = Path(args.out or f"{scenario.name}.controller.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(outcome.document.model_dump_json(indent=2) + "\n", encoding="utf-8")
    r = outcome.report
    for k, (norm, sat, cert) in enumerate(zip(r.local_norms, r.saturated, r.certified), start=1):
        flags = ("  (basis saturated)" if sat else "") + ("" if cert else "  (grid misses the H∞ peak)")
        print(f"vehicle {k}: {r.norm.value} norm {norm:.6g}{flags}")
    if r.total_cost is not None:
        print(f"total H2 cost: {r.total_cost:.6g}")
    if r.homogeneous_bound is not None:
        print(f"homogeneous H2 bound: {r.homogeneous_bound:.6g}")
    print(f"bezout residual: {r.bezout_residual:.3g}")
    print(f"controller written to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    scenario = workflows.load_scenario(args.scenario)
    report = workflows.verify(scenario, workflows.load_controller(args.controller))
    for c in report.checks:
        residual = "" if c.residual is None else f"  residual {c.residual:.3g}"
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}{residual}  {c.detail}")
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def _write_outputs(result, summary: SimulationSummary, out: Path):
    reporting.write_csv(result, out)
    reporting.write_svg_panels(result, out)
    (out / "metrics.json").write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _print_summary(summary: SimulationSummary):
    m = summary.metrics
    for k, (peak, ts) in enumerate(zip(m.peaks, m.settling_times_s), start=1):
        print(f"z{k}: peak {peak:.6g} m, settles at {ts:.3f} s")
    for k, a in enumerate(m.amplification, start=1):
        print(f"amplification z{k + 1}/z{k}: {a:.3g}")
    print(f"nonzero channels: {m.nonzero_channels}")
    for p in summary.sine_gains:
        print(f"sine w{p.source}→z{p.vehicle} at {p.freq_rad_s:g} rad/s: simulated {p.simulated_gain:.6g}, "
              f"predicted {p.predicted_gain:.6g} ({100 * p.relative_error:.2f}%)")


def cmd_simulate(args) -> int:
    scenario = workflows.apply_overrides(workflows.load_scenario(args.scenario), dt_s=args.dt)
    result, summary = workflows.simulate_workflow(scenario, workflows.load_controller(args.controller))
    out = Path(args.out or f"{scenario.name}-run")
    _write_outputs(result, summary, out)
    _print_summary(summary)
    print(f"outputs written to {out}")
    return EXIT_OK


def cmd_example(args) -> int:
    result = run_reference_example(h=args.h, dt_s=args.dt, duration_s=args.duration)
    summary = SimulationSummary(scenario="reference", samples=result.t.size, metrics=metrics(result))
    out = Path(args.out or "reference-run")
    _write_outputs(result, summary, out)
    _print_summary(summary)
    print(f"outputs written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="platoon", description="Leader-information platoon controller design.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Design the controller for a scenario.")
    p.add_argument("scenario", type=Path)
    p.add_argument("--norm", choices=[k.value for k in NormKind], default=None)
    p.add_argument("--basis-degree", type=int, default=None)
    p.add_argument("--grid-points", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="Controller JSON path.")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="Run the structure and bound checks.")
    p.add_argument("controller", type=Path)
    p.add_argument("scenario", type=Path)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="Simulate a scenario, write CSV and SVG panels.")
    p.add_argument("controller", type=Path)
    p.add_argument("scenario", type=Path)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--out", type=Path, default=None, help="Output directory.")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("example", help="Six-vehicle reference run end to end.")
    p.add_argument("--h", type=float, default=0.5, help="Time headway (s).")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--out", type=Path, default=None, help="Output directory.")
    p.set_defaults(func=cmd_example)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, json.JSONDecodeError, ValueError, FileNotFoundError, NonIntegerDelay) as e:
        logger.error(f"invalid input: {e}")
        return EXIT_INVALID_INPUT
    except (DesignError, TransferFunctionError) as e:
        logger.error(f"design failed: {e}")
        return EXIT_DESIGN_FAILURE
    except Divergence as e:
        logger.error(f"simulation diverged: {e}")
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
