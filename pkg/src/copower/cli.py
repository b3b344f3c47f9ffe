"""Command-line interface.

Subcommands: power, samplesize, simulate, fit, contour.  Scenario-driven
commands read a JSON scenario file; fit reads a trial CSV.  A human summary
goes to standard output; machine-readable output goes to --out.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import (
    AccuracyNotReached,
    CopowerError,
    NonConvergence,
    Unattainable,
    ValidationError,
)
from .power import (
    grid_to_csv,
    power_for_test,
    power_grid,
    solve_cluster_size,
    solve_clusters,
)
from .scenario import Scenario, load_scenario
from .simulate import TrialDataset, empirical_power, type_i_error
from .em import cluster_stats, em_fit
from .types import TestKind, TestSpec

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _write_output(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w") as handle:
            handle.write(text)
    else:
        print(text)


def _override_test(scenario: Scenario, name: str | None) -> TestSpec:
    if name is None:
        return scenario.test
    kind = TestKind(name)
    return TestSpec(
        kind=kind,
        contrast=scenario.test.contrast if kind is TestKind.CUSTOM_GLH else None,
        beta=scenario.effect.beta,
    )


def _payload(scenario: Scenario, body: dict) -> str:
    body["scenario"] = scenario.raw
    return json.dumps(body, indent=2)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_power(args) -> int:
    scenario = load_scenario(args.scenario)
    test = _override_test(scenario, args.test)
    design = scenario.design
    if design.n is None:
        raise ValidationError("power needs design.n (use samplesize to solve for it)")
    result = power_for_test(
        scenario.vc, test, design.n, design.m_bar, design.cv,
        design.sigma_z2, design.alpha,
    )
    print(
        f"test={test.kind.value}  n={design.n}  m_bar={design.m_bar:g}  "
        f"cv={design.cv:g}  power={result.power:.4f}"
    )
    _write_output(_payload(scenario, {"command": "power", **result.to_dict()}), args.out)
    return EXIT_OK


def cmd_samplesize(args) -> int:
    scenario = load_scenario(args.scenario)
    test = _override_test(scenario, args.test)
    design = scenario.design
    solve_for = args.solve or scenario.solve_for or "n"
    target = scenario.target_power
    if target is None:
        raise ValidationError("samplesize needs solver.target_power in the scenario")
    if solve_for == "n":
        n, result = solve_clusters(
            scenario.vc, test, target, design.m_bar, design.cv,
            design.sigma_z2, design.alpha,
        )
        print(
            f"test={test.kind.value}  target={target:g}  ->  n={n}  "
            f"(achieved power {result.power:.4f})"
        )
        body = {"command": "samplesize", "solve_for": "n", "n": n, **result.to_dict()}
    else:
        if design.n is None:
            raise ValidationError("solving for m requires design.n")
        m, result = solve_cluster_size(
            scenario.vc, test, target, design.n, design.cv,
            design.sigma_z2, design.alpha,
        )
        print(
            f"test={test.kind.value}  target={target:g}  ->  m_bar={m}  "
            f"(achieved power {result.power:.4f})"
        )
        body = {"command": "samplesize", "solve_for": "m", "m_bar": m, **result.to_dict()}
    _write_output(_payload(scenario, body), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    test = _override_test(scenario, args.test)
    design = scenario.design
    if design.n is None:
        raise ValidationError("simulate needs design.n")
    reps = args.reps if args.reps is not None else scenario.reps
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    seed = args.seed if args.seed is not None else scenario.seed
    runner = type_i_error if args.null else empirical_power
    report = runner(
        scenario.effect, scenario.vc, test, design.n, design.m_bar, design.cv,
        reps, seed, z_bar=design.z_bar, alpha=design.alpha,
    )
    label = "type I error" if args.null else "empirical power"
    print(
        f"test={test.kind.value}  reps={reps}  seed={seed}  "
        f"{label}={report.empirical_power:.4f}  (mc se {report.mc_se:.4f}, "
        f"{report.non_converged} non-converged)"
    )
    _write_output(_payload(scenario, {"command": "simulate", **report.to_dict()}), args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    data = TrialDataset.from_csv(args.data)
    stats = cluster_stats(data.sizes, data.arms, data.y, data.cluster_of_subject)
    fit = em_fit(stats, tol=args.tol, max_iter=args.max_iter)
    status = "converged" if fit.converged else "NOT converged"
    print(
        f"n={fit.n_clusters} clusters, K={fit.k}: {status} after "
        f"{fit.iterations} iterations, loglik {fit.loglik:.4f}"
    )
    print("beta_hat:", np.array2string(fit.beta_hat, precision=4))
    if fit.se_beta is not None:
        print("se_beta: ", np.array2string(fit.se_beta, precision=4))
    _write_output(fit.to_json(), args.out)
    return EXIT_OK if fit.converged else EXIT_NUMERICAL


def _axis(raw: str) -> list[float]:
    """Parse an axis flag: comma-separated values or start:stop:count."""
    if ":" in raw:
        parts = raw.split(":")
        if len(parts) != 3:
            raise ValidationError(f"axis '{raw}' must be start:stop:count")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        return np.linspace(start, stop, count).tolist()
    return [float(v) for v in raw.split(",")]


def cmd_contour(args) -> int:
    scenario = load_scenario(args.scenario)
    test = _override_test(scenario, args.test)
    design = scenario.design
    if design.n is None:
        raise ValidationError("contour needs design.n")
    icc = scenario.icc
    if args.rho0_scale:
        rho0_scale = np.asarray(_axis(args.rho0_scale), dtype=float)
    else:
        rho0_scale = icc.rho0 / icc.rho0[0]
    cells = power_grid(
        rho0_first_values=_axis(args.rho0_first),
        rho1_ratio_values=_axis(args.rho1_ratio),
        rho2_values=_axis(args.rho2),
        rho0_scale=rho0_scale,
        sigma_y2=icc.sigma_y2,
        beta=scenario.effect.beta,
        test=test,
        n=design.n,
        m_bar=design.m_bar,
        cv=design.cv,
        sigma_z2=design.sigma_z2,
        alpha=design.alpha,
    )
    feasible = [c.power for c in cells if c.feasible]
    if feasible:
        print(
            f"test={test.kind.value}  {len(cells)} cells "
            f"({len(cells) - len(feasible)} infeasible)  "
            f"power range [{min(feasible):.4f}, {max(feasible):.4f}]"
        )
    else:
        print(f"test={test.kind.value}  {len(cells)} cells, all infeasible")
    _write_output(grid_to_csv(cells), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copower",
        description="Power and sample size for cluster randomized trials "
        "with continuous co-primary endpoints.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    test_choices = [k.value for k in TestKind]

    def scenario_common(p):
        p.add_argument("--scenario", required=True, help="scenario JSON path")
        p.add_argument("--test", choices=test_choices, help="override the scenario's test")
        p.add_argument("--out", help="write machine-readable output to this path")

    p = sub.add_parser("power", help="analytic power for a complete design")
    scenario_common(p)
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("samplesize", help="solve for clusters or cluster size")
    scenario_common(p)
    p.add_argument("--solve", choices=["n", "m"], help="what to solve for")
    p.set_defaults(func=cmd_samplesize)

    p = sub.add_parser("simulate", help="empirical power by simulation + fitting")
    scenario_common(p)
    p.add_argument("--reps", type=int, help="number of replicates")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument(
        "--null", action="store_true",
        help="zero the first effect to estimate the type I error",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the mixed model to a trial CSV")
    p.add_argument("--data", required=True, help="trial CSV path")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--out", help="write the fit JSON to this path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("contour", help="power over an ICC grid, as CSV")
    scenario_common(p)
    p.add_argument("--rho0-first", required=True, help="axis: a,b,c or start:stop:count")
    p.add_argument("--rho1-ratio", required=True, help="axis for rho1 / rho0[0]")
    p.add_argument("--rho2", required=True, help="axis for the intra-subject ICC")
    p.add_argument("--rho0-scale", help="per-endpoint multipliers of rho0[0]")
    p.set_defaults(func=cmd_contour)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NonConvergence, Unattainable, AccuracyNotReached) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, CopowerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
