"""Command-line front end: ``mlk <command> scenario.toml [flags]``.

Exit codes: 0 on success, 2 when a verdict or expectation fails (reports are
still written), 1 on any input or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import pandas as pd
import sympy as sp

from . import __version__
from .catalog import list_catalog
from .data import save_family
from .errors import ScenarioError
from .fio import egorov_correction_m0, egorov_residual, egorov_transport, order_test
from .hgrid import HFamily, SweepSpec, decay_fit
from .operators import kernel_norm_ratio, op_apply_family
from .oscint import (
    find_critical_points,
    lambda_phi,
    oscint_eval,
    oscint_sample,
    stationary_phase,
    validate_phase,
)
from .properties import run_suite
from .report import RunReport, write_csv
from .scenario import COMMANDS, Scenario, load_scenario
from .symcalc import H, HSymbol, OperatorSpec, SymbolExpr, parse_expr, phase_space_vars
from .wavefront import Verdict, disjoint_pairing_test, op_wavefront, wf_scan

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERDICT = 2

# Probe coordinates closer than this are the same point.
_POINT_TOL = 1e-9


def _boundary_note(report: RunReport, family: HFamily, what: str) -> None:
    flagged = [m.h for m in family if m.boundary_warning]
    if flagged:
        logger.warning("%s carries mass near the grid boundary at h=%s", what, flagged)
    report.summary[f"{what}_boundary_warning"] = flagged


def _matches(point, expected) -> bool:
    x, xi = expected
    return np.allclose(point.x, np.atleast_1d(x), atol=_POINT_TOL) and np.allclose(
        point.xi, np.atleast_1d(xi), atol=_POINT_TOL
    )


def _cell(values: np.ndarray, fallback: float) -> float:
    unique = np.unique(np.round(values, 12))
    return float(np.min(np.diff(unique))) if len(unique) > 1 else fallback


# -- runners -----------------------------------------------------------------


def run_wf_scan(sc: Scenario) -> RunReport:
    report = RunReport("wf-scan", header=sc.header())
    u = sc.state("state")
    _boundary_note(report, u, "state")
    points, method = sc.probes()
    params = sc.wavefront_params()
    methods = ["fourier", "psdo"] if method == "both" else [method]
    scans = {m: wf_scan(u, points, params, m) for m in methods}
    for m, scan in scans.items():
        report.tables[f"scan_{m}"] = scan.to_frame()
        report.summary[f"inside_{m}"] = [[p.x, p.xi] for p in scan.inside_points()]
        report.summary[f"window_{m}"] = scan.window

    expect = sc.expectations
    if "inside" in expect:
        for m, scan in scans.items():
            inside = scan.inside_points()
            exact = len(inside) == len(expect["inside"]) and all(
                any(_matches(p, e) for p in inside) for e in expect["inside"]
            )
            report.expect(exact, f"{m}: inside set {report.summary[f'inside_{m}']} != {expect['inside']}")
    if expect.get("consistent_methods") and len(scans) == 2:
        fourier, psdo = scans["fourier"].results, scans["psdo"].results
        clashes = [
            a.point
            for a, b in zip(fourier, psdo)
            if {a.verdict, b.verdict} == {Verdict.INSIDE, Verdict.OUTSIDE}
        ]
        report.summary["contradictions"] = len(clashes)
        report.expect(not clashes, f"fourier and psdo verdicts contradict at {clashes}")
    if expect.get("near_lagrangian"):
        cloud = lambda_phi(sc.phase())
        xs = np.array([p.x[0] for p in points])
        xis = np.array([p.xi[0] for p in points])
        cell_x, cell_xi = _cell(xs, params.delta), _cell(xis, params.xi_radius)
        for m, scan in scans.items():
            inside = scan.inside_points()
            report.expect(bool(inside), f"{m}: no inside points for a Lagrangian state")
            for p in inside:
                near = np.any(
                    (np.abs(cloud.x[:, 0] - p.x[0]) <= cell_x + _POINT_TOL)
                    & (np.abs(cloud.xi[:, 0] - p.xi[0]) <= cell_xi + _POINT_TOL)
                )
                report.expect(bool(near), f"{m}: inside point {p} is more than one cell from Lambda_phi")
    return report


def run_op_apply(sc: Scenario) -> RunReport:
    report = RunReport("op-apply", header=sc.header())
    u = sc.state("state")
    A = sc.operator()
    out = op_apply_family(A, u)
    _boundary_note(report, out, "output")
    report.tables["norms"] = pd.DataFrame(
        {
            "h": u.h_values,
            "input_l2": [m.l2_norm() for m in u],
            "output_l2": [m.l2_norm() for m in out],
        }
    )
    if sc.section("output").get("family"):
        path = save_family(out, sc.output_dir / f"{sc.prefix}_output.mlk")
        report.summary["family"] = str(path)

    expect = sc.expectations
    if "kernel_norm_rtol" in expect:
        rtol = float(expect["kernel_norm_rtol"])
        ratios = [kernel_norm_ratio(A, u.grid, h) for h in u.h_values]
        report.tables["kernel_norm"] = pd.DataFrame({"h": u.h_values, "ratio": ratios})
        worst = max(abs(r - 1.0) for r in ratios)
        report.summary["kernel_norm_max_deviation"] = worst
        report.expect(worst <= rtol, f"kernel norm ratio deviates from 1 by {worst:.3g} > {rtol:g}")
    if sc.has("probes"):
        points, _ = sc.probes()
        scan = op_wavefront(A, points, u.h_values, u.grid, sc.wavefront_params())
        report.tables["op_wavefront"] = scan.to_frame()
        report.summary["op_wavefront_inside"] = [[p.x, p.xi] for p in scan.inside_points()]
    return report


def run_oscint(sc: Scenario) -> RunReport:
    report = RunReport("oscint", header=sc.header())
    pp = sc.phase()
    a = sc.amplitude(pp)
    h_values = sc.sweep().h_values
    if pp.n == 0:
        values = [oscint_eval(a, pp, (), h) for h in h_values]
        frame = pd.DataFrame({"h": h_values, "re": [v.real for v in values], "im": [v.imag for v in values]})
        expect = sc.expectations
        if "value" in expect:
            exact_expr = parse_expr(expect["value"], ())
            exact = [complex(exact_expr.subs(H, h).evalf()) for h in h_values]
            errors = [abs(v - e) / abs(e) for v, e in zip(values, exact)]
            frame["rel_error"] = errors
            rtol = float(expect.get("rtol", 1e-8))
            report.summary["max_rel_error"] = max(errors)
            report.expect(max(errors) <= rtol, f"quadrature differs from the exact value by {max(errors):.3g}")
        report.tables["values"] = frame
        return report

    grid = sc.grid()
    family = HFamily(grid, h_values, tuple(oscint_sample(a, pp, grid, h) for h in h_values))
    _boundary_note(report, family, "state")
    report.tables["norms"] = pd.DataFrame({"h": h_values, "l2": [m.l2_norm() for m in family]})
    if sc.section("output").get("family"):
        report.summary["family"] = str(save_family(family, sc.output_dir / f"{sc.prefix}_state.mlk"))
    if pp.m > 0:
        validation = validate_phase(pp)
        report.tables["validation"] = validation.to_frame()
        report.expect(validation.all_passed, f"phase is degenerate at {validation.failures.tolist()}")
    if not pp.z_vars:
        cloud = lambda_phi(pp)
        report.tables["lagrangian"] = cloud.to_frame()
        report.summary["injective"] = cloud.injective
    return report


def run_stat_phase(sc: Scenario) -> RunReport:
    report = RunReport("stat-phase", header=sc.header())
    pp = sc.phase()
    if pp.n != 0:
        raise ScenarioError("stat-phase needs a phase without base variables (variables: x 0 theta m)")
    a = sc.amplitude(pp)
    Phi = pp.as_symbol()
    table = sc.section("stationary")
    orders = [int(k) for k in table.get("orders", [0, 1, 2])]
    seeds = table.get("seeds")
    records = [c for c in find_critical_points(Phi, pp.box, seeds) if c.accepted]
    report.summary["critical_points"] = [c.location for c in records]
    if not records:
        report.fail("no non-degenerate critical point inside the box")
        return report

    h_values = sc.sweep().h_values
    K_max = max(orders)
    rows = []
    for h in h_values:
        exact = oscint_eval(a, pp, (), h)
        cumulative = np.zeros(K_max + 1, dtype=complex)
        for cp in records:
            cumulative += np.array(stationary_phase(a, Phi, cp, h, K_max).cumulative)
        rows.append({"h": h, "exact_re": exact.real, "exact_im": exact.imag})
        for K in orders:
            rows[-1][f"remainder_K{K}"] = abs(exact - cumulative[K])
    frame = pd.DataFrame(rows)
    report.tables["remainders"] = frame

    params = sc.wavefront_params()
    tolerance = sc.threshold("slope_tolerance", 0.2)
    slopes = []
    for K in orders:
        regression = decay_fit(h_values, frame[f"remainder_K{K}"].tolist(), floor=params.floor, strict=False)
        slopes.append({"K": K, "slope": regression.slope, "r2": regression.r_squared, "floor_hit": regression.floor_hit})
        ok = math.isnan(regression.slope) or regression.slope >= K + 1 - tolerance
        report.expect(ok, f"K={K}: remainder slope {regression.slope:.3f} < {K + 1 - tolerance:g}")
    report.tables["slopes"] = pd.DataFrame(slopes)
    return report


def run_order_test(sc: Scenario) -> RunReport:
    report = RunReport("order-test", header=sc.header())
    u = sc.state("state")
    chart = sc.chart()
    settings = sc.chart_settings()
    result = order_test(u, chart, floor=sc.wavefront_params().floor, **settings)
    report.tables["order"] = result.to_frame()
    report.tables["trailing"] = pd.DataFrame(
        {"variant": range(len(result.plan.trailing_boxes)), "box": [str(b) for b in result.plan.trailing_boxes]}
    )
    report.summary["vanishing_symbols"] = [str(s) for s in result.plan.symbols]
    report.summary["slopes"] = result.slopes
    for N, ok in enumerate(result.passed):
        report.expect(ok, f"N={N}: slope {result.slopes[N]:.3f} below target {result.plan.target(N):.3f}")
    return report


def _transport(name: str, b0: SymbolExpr, sc: Scenario, A: OperatorSpec, F, rel) -> OperatorSpec:
    _, xi = phase_space_vars(1)
    if name == "b0":
        return OperatorSpec(HSymbol.of(b0), 1, label="b0")
    if name == "b1":
        table = sc.section("egorov")
        box = table.get("correction_box")
        b1 = egorov_correction_m0(A, F, rel, box and [tuple(b) for b in box], int(table.get("resolution", 48)))
        return OperatorSpec(HSymbol(((0, b0), (1, b1))), 1, label="b0+h*b1")
    if name == "negative":
        return OperatorSpec(HSymbol.of(b0.subs({xi: -xi})), 1, label="negative")
    if name == "zero":
        return OperatorSpec.from_expr(sp.S.Zero, 1, label="zero")
    raise ScenarioError(f"Unknown transport {name!r}; expected b0, b1, negative or zero")


def run_egorov(sc: Scenario) -> RunReport:
    report = RunReport("egorov", header=sc.header())
    A = sc.operator()
    F = sc.fio()
    rel = sc.relation()
    grid = sc.grid()
    states = sc.egorov_states(grid)
    table = sc.section("egorov")
    transports = table.get("transports", ["b0", "b1"] if F.m == 0 else ["b0"])
    b0 = egorov_transport(A.symbol.principal, rel)

    residuals = pd.DataFrame({"h": states[0].h_values})
    slopes = []
    expect = sc.expectations
    for name in transports:
        B = _transport(name, b0, sc, A, F, rel)
        result = egorov_residual(A, F, B, states, floor=sc.wavefront_params().floor)
        if "baseline" not in residuals:
            residuals["baseline"] = result.baseline.magnitudes
        residuals[f"residual_{name}"] = result.regression.magnitudes
        slopes.append(
            {
                "transport": name,
                "slope": result.regression.slope,
                "baseline_slope": result.baseline.slope,
                "gain": result.gain,
                "r2": result.regression.r_squared,
            }
        )
        key = "min_gain_b1" if name == "b1" else "min_gain"
        if key in expect:
            report.expect(result.gain >= float(expect[key]), f"{name}: gain {result.gain:.3f} < {expect[key]}")
        if "max_gain" in expect:
            report.expect(result.gain <= float(expect["max_gain"]), f"{name}: gain {result.gain:.3f} > {expect['max_gain']}")
        if name == "b0" and "max_gain_b0" in expect:
            bound = float(expect["max_gain_b0"])
            report.expect(result.gain <= bound, f"b0: gain {result.gain:.3f} > {bound}")
    report.tables["residuals"] = residuals
    report.tables["slopes"] = pd.DataFrame(slopes)
    report.summary["gains"] = {row["transport"]: row["gain"] for row in slopes}

    per_axis = int(table.get("sample", 33))
    z_axis = np.linspace(*rel.box[0], per_axis)
    eta_axis = np.linspace(*rel.box[1], per_axis)
    Z, E = np.meshgrid(z_axis, eta_axis, indexing="ij")
    values = b0.evaluate(Z.ravel(), E.ravel())
    report.tables["transported"] = pd.DataFrame(
        {"z": Z.ravel(), "eta": E.ravel(), "b0_re": values.real, "b0_im": values.imag}
    )
    return report


def run_pairing(sc: Scenario) -> RunReport:
    report = RunReport("pairing", header=sc.header())
    u1, u2 = sc.state("state"), sc.state("state2")
    regression = disjoint_pairing_test(u1, u2, floor=sc.wavefront_params().floor)
    report.tables["pairing"] = regression.to_frame()
    report.summary.update(slope=regression.slope, r2=regression.r_squared, floor_hit=regression.floor_hit)
    expect = sc.expectations
    # nan slope: every pairing sits at the floor, i.e. faster than any power
    slope = math.inf if math.isnan(regression.slope) else regression.slope
    if "min_slope" in expect:
        report.expect(slope >= float(expect["min_slope"]), f"pairing slope {slope:.3f} < {expect['min_slope']}")
    if "max_slope" in expect:
        report.expect(slope <= float(expect["max_slope"]), f"pairing slope {slope:.3f} > {expect['max_slope']}")
    return report


def run_props(sc: Scenario) -> RunReport:
    report = RunReport("props", header={"command": "props", "scenario": sc.name})
    table = sc.section("props")
    suite = run_suite(table.get("checks"), int(table.get("seed", 0)))
    report.tables["properties"] = suite.to_frame()
    for name in suite.failures:
        report.fail(f"property check {name} failed")
    return report


RUNNERS: dict[str, Callable[[Scenario], RunReport]] = {
    "wf-scan": run_wf_scan,
    "op-apply": run_op_apply,
    "oscint": run_oscint,
    "stat-phase": run_stat_phase,
    "order-test": run_order_test,
    "egorov": run_egorov,
    "pairing": run_pairing,
    "props": run_props,
}


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--sweep", help="h sweep as k_min:k_max (h = 2^-k)")
    common.add_argument("--grid", type=int, metavar="N", help="grid points per axis")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threshold", type=float, metavar="T", help="outside slope threshold")
    common.add_argument("--delta", type=float, metavar="D", help="cutoff radius")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="mlk", description="Numerical microlocal analysis on h-families.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, parents=[common], help=f"run a {command} scenario")
        p.add_argument("scenario", help="scenario TOML file")
    sub.add_parser("catalog", parents=[common], help="list built-in states, symbols, phases and relations")
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.command == "catalog":
        frame = list_catalog()
        print(frame.to_string(index=False))
        if args.out:
            write_csv(frame, Path(args.out) / "catalog.csv", {"command": "catalog"})
        return EXIT_OK

    scenario = load_scenario(args.scenario, args.command).with_overrides(
        sweep=SweepSpec.parse(args.sweep) if args.sweep else None,
        n_points=args.grid,
        out=args.out,
        threshold=args.threshold,
        delta=args.delta,
    )
    report = RUNNERS[args.command](scenario)
    paths = report.write(scenario.output_dir, scenario.prefix)
    for path in paths:
        logger.info("wrote %s", path)
    if not report.passed:
        for reason in report.failures:
            print(f"FAIL: {reason}", file=sys.stderr)
        return EXIT_VERDICT
    print(f"{args.command} {scenario.name}: ok")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        format="[%(module)-12s] %(message)s", level=logging.DEBUG if args.verbose else logging.INFO
    )
    try:
        return _run(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
