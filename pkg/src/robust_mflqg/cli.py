"""Command-line driver: ``robust-mflqg {check,synthesize,simulate,sweep,verify-paper-example}``.

Exit codes: 0 success, 1 failed assumption or run error, 2 usage or
input error. Every output directory receives one ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .consistency import detect_Z_blowup, solve_consistency
from .control import (
    SimConfig,
    build_decentralized_law,
    build_worstcase_law,
    evaluate_social_cost,
    meanfield_error_sweep,
    simulate,
)
from .convexity import check_all
from .errors import MFLQGError, ParseError, SchemaViolation, ValidationError
from .model import Horizon, load_scenario, shipped_scenario, validate_params
from .numerics import DEFAULT_STEPS, MatrixPath, TimeGrid
from .oracle import optimality_gap_sweep
from .riccati import solve_bundle

log = logging.getLogger("robust_mflqg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def resolve_scenario(name: str) -> Path:
    """A file path, or the name of a bundled scenario."""
    p = Path(name)
    if p.exists():
        return p
    q = shipped_scenario(p.stem if p.suffix == ".json" else name)
    if q.exists():
        return q
    raise ParseError(f"scenario not found: {name}")


def parse_horizon(text: str) -> Horizon:
    """``finite:T`` or ``infinite:rho``."""
    kind, _, value = text.partition(":")
    try:
        if kind == "finite":
            return Horizon.finite_horizon(float(value))
        if kind == "infinite":
            return Horizon.infinite_horizon(float(value or 0.0))
    except ValueError:
        pass
    raise UsageError(f"bad --horizon-override {text!r}; expected finite:T or infinite:rho")


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("MFG_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MFG_SEED must be an integer, got {env!r}") from None


def load_model(args):
    path = resolve_scenario(args.scenario)
    raw = load_scenario(path)
    if getattr(args, "horizon_override", None):
        h = parse_horizon(args.horizon_override)
        H = raw.H if h.finite else np.zeros_like(raw.H)
        raw = raw.replace(horizon=h, H=H)
    return validate_params(raw), path


def write_manifest(out: Path, args, path: Path, seed: int | None) -> None:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    manifest = {
        "scenario": str(path),
        "scenario_sha256": digest,
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items())
                      if k not in ("func", "command", "out", "verbose")},
        "seed": seed,
        "steps": getattr(args, "steps", None),
        "output_dir": str(out),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_path_csv(path: Path, name: str, X, grid: TimeGrid | None) -> None:
    if isinstance(X, MatrixPath):
        times, vals = X.times, X.values
    else:
        times, vals = np.array([0.0]), np.asarray(X)[None]
    n1, n2 = vals.shape[1:]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"{name}_{i}{j}" for i in range(n1) for j in range(n2)])
        for t, v in zip(times, vals):
            wr.writerow([_fmt(t)] + [_fmt(x) for x in v.ravel()])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grid(m, args):
    return TimeGrid(0.0, m.T, args.steps) if m.horizon.finite else None


# -- commands -------------------------------------------------------------------------


def cmd_check(args) -> int:
    m, path = load_model(args)
    reports = check_all(m, _grid(m, args), samples=args.samples)
    out = _out_dir(args)
    (out / "convexity.json").write_text(
        json.dumps([r.to_json() for r in reports], indent=2) + "\n")
    write_manifest(out, args, path, None)
    for r in reports:
        print(f"{r.condition.value} ({r.method}): {'holds' if r.holds else 'fails'}"
              + ("" if r.holds else f", witness {r.witness}"))
    return EXIT_OK if all(r.holds for r in reports) else EXIT_FAIL


def _certified(m, args) -> bool:
    reports = check_all(m, _grid(m, args))
    bad = [r for r in reports if not r.holds]
    for r in bad:
        msg = f"assumption {r.condition.value} ({r.method}) fails"
        if args.force:
            log.warning("%s; continuing because of --force", msg)
        else:
            print(msg + "; rerun with --force to proceed", file=sys.stderr)
    return not bad or args.force


def _synthesize(m, args):
    bundle = solve_bundle(m, _grid(m, args))
    profile, _ = solve_consistency(m, bundle)
    return bundle, profile


def cmd_synthesize(args) -> int:
    m, path = load_model(args)
    out = _out_dir(args)
    if not _certified(m, args):
        return EXIT_FAIL
    bundle = solve_bundle(m, _grid(m, args), require_ptilde=False)
    write_path_csv(out / "riccati_P.csv", "P", bundle.P, bundle.grid)
    write_path_csv(out / "riccati_K.csv", "K", bundle.K, bundle.grid)
    if bundle.Ptilde is not None:
        write_path_csv(out / "riccati_Ptilde.csv", "Ptilde", bundle.Ptilde, bundle.grid)
    if args.detect_z_blowup:
        z = detect_Z_blowup(m, bundle)
        (out / "z_blowup.json").write_text(json.dumps(z.to_json(), indent=2) + "\n")
        print(f"Z blow-up: {z.time}")
    write_manifest(out, args, path, None)
    if bundle.Ptilde is None:
        print("Ptilde does not exist; no law synthesized", file=sys.stderr)
        return EXIT_FAIL
    profile, _ = solve_consistency(m, bundle)
    profile.to_csv(out / "consistency.csv")
    law = build_decentralized_law(m, bundle, profile)
    drift = build_worstcase_law(m, bundle, profile)
    (out / "law.json").write_text(json.dumps({
        "times": [float(t) for t in profile.times],
        "control_gain": law.gain.tolist(), "control_offset": law.offset.tolist(),
        "drift_gain": drift.gain.tolist(), "drift_offset": drift.offset.tolist(),
    }) + "\n")
    print(f"wrote synthesis to {out}")
    return EXIT_OK


def _laws(m, args):
    bundle, profile = _synthesize(m, args)
    return build_decentralized_law(m, bundle, profile), build_worstcase_law(m, bundle, profile), bundle, profile


def cmd_simulate(args) -> int:
    m, path = load_model(args)
    seed = resolve_seed(args.seed)
    out = _out_dir(args)
    if not _certified(m, args):
        return EXIT_FAIL
    law, drift, _, _ = _laws(m, args)
    res = simulate(m, law, drift, SimConfig(args.N, args.replications, seed=seed))
    with open(out / "costs.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["replication", "agent", "cost"])
        for r in range(res.replications):
            for a in range(res.N):
                wr.writerow([r, a, _fmt(res.costs[r, a])])
    est, se = res.meanfield_sup()
    with open(out / "meanfield_error.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["N", "estimate", "stderr"])
        wr.writerow([res.N, _fmt(est), _fmt(se)])
    stats = evaluate_social_cost(res)
    (out / "cost_stats.json").write_text(json.dumps(stats.to_json(), indent=2) + "\n")
    write_manifest(out, args, path, seed)
    print(f"per-agent cost {stats.per_agent_mean:.6g} +- {stats.per_agent_se:.2g}; "
          f"sup mean-field error {est:.6g} +- {se:.2g}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    Ns = _int_list(args.Ns)
    gap_Ns = _int_list(args.gap_Ns)
    if len(Ns) < 3 or min(Ns) < 8:
        raise UsageError("the sweep needs at least 3 agent counts, each >= 8")
    if len(gap_Ns) < 2:
        raise UsageError("the gap sweep needs at least 2 agent counts")
    m, path = load_model(args)
    seed = resolve_seed(args.seed)
    out = _out_dir(args)
    if not _certified(m, args):
        return EXIT_FAIL
    law, drift, bundle, profile = _laws(m, args)
    rep = meanfield_error_sweep(m, law, drift, Ns, args.replications, seed)
    (out / "sweep_report.json").write_text(json.dumps(rep.to_json(), indent=2) + "\n")
    with open(out / "meanfield_error.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["N", "estimate", "stderr"])
        for N, e, s in zip(rep.Ns, rep.estimates, rep.stderrs):
            wr.writerow([N, _fmt(e), _fmt(s)])
    ok = rep.slope_in()
    print(f"mean-field slope {rep.slope}")
    if m.horizon.finite:
        tab = optimality_gap_sweep(m, bundle, profile, gap_Ns)
        tab.to_csv(out / "gap_table.csv")
        ok = ok and tab.nonnegative and tab.sqrtN_ratio <= 3.0
        print(f"gap * sqrt(N) max/min ratio {tab.sqrtN_ratio:.4g}")
    write_manifest(out, args, path, seed)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(args) -> int:
    from .verify import run_all

    out = _out_dir(args)
    results = run_all(include_rate=not args.skip_rate, seed=resolve_seed(args.seed))
    for r in results:
        print(r.line())
    (out / "verification.json").write_text(json.dumps(
        [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results],
        indent=2, default=float) + "\n")
    path = shipped_scenario("paper_example")
    write_manifest(out, args, path, resolve_seed(args.seed))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-mflqg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("scenario", help="scenario JSON path or bundled scenario name")
        sp.add_argument("--steps", type=int, default=DEFAULT_STEPS)
        sp.add_argument("--out", default=".")
        sp.add_argument("--horizon-override", default=None, metavar="finite:T|infinite:rho")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("check", help="convexity certificates")
    common(sp)
    sp.add_argument("--samples", type=int, default=1000)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("synthesize", help="Riccati solutions, consistency profile and laws")
    common(sp)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--detect-z-blowup", action="store_true")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("simulate", help="Monte Carlo closed loop")
    common(sp, seed=True)
    sp.add_argument("--N", type=int, default=64)
    sp.add_argument("--replications", type=int, default=256)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="mean-field error and optimality gap rates")
    common(sp, seed=True)
    sp.add_argument("--Ns", default="8,16,32,64,128")
    sp.add_argument("--gap-Ns", default="2,4,8")
    sp.add_argument("--replications", type=int, default=512)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify-paper-example", help="run every check on the worked example")
    sp.add_argument("--out", default=".")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--skip-rate", action="store_true", help="skip the Monte Carlo rate check")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParseError, SchemaViolation, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MFLQGError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
