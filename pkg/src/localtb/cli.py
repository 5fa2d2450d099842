"""Command line entry point: ``localtb {gen,validate,run,sweep,check-kernel}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

from .harness import (KINDS, CRITERIA, PipelineError, Scenario, generate_scenario, restrict_scenario, run_pipeline,
                      subcube_family, validate_hypotheses)
from .kernel import Family, KernelSpec, KernelTable, default_sample_plan, verify_kernel_conditions

THREADS_ENV = "LOCALTB_THREADS"


def _number(text: str):
    """Parse ``1/64``, ``0.25``, ``3``, ``none`` or ``true``/``false``."""
    low = text.strip().lower()
    if low in ("none", "null"):
        return None
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(low)
    except ValueError:
        pass
    try:
        return float(Fraction(low))
    except (ValueError, ZeroDivisionError):
        return text


def _params(args) -> dict:
    out = {}
    for item in args.param or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"--param expects key=value, got {item!r}")
        out[key.strip()] = _number(val)
    if getattr(args, "h", None) is not None:
        out["h"] = float(Fraction(args.h))
    if getattr(args, "grids", None) is not None:
        out["n_grids"] = args.grids
    if getattr(args, "depth", None) is not None:
        out["depth"] = args.depth
    return out


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def _scenario(args) -> Scenario:
    if args.scenario:
        sc = Scenario.from_json(Path(args.scenario).read_text())
        extra = _params(args)
        if extra or args.seed is not None:
            p = {**sc.params, **extra}
            sc = generate_scenario(sc.kind, p, sc.seed if args.seed is None else args.seed)
        return sc
    if not args.kind:
        raise SystemExit("either --scenario or --kind is required")
    return generate_scenario(args.kind, _params(args), 0 if args.seed is None else args.seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_rows(rows, stream=None) -> None:
    stream = sys.stdout if stream is None else stream
    for key, ok, label in rows:
        stream.write(f"{'PASS' if ok else 'FAIL'}  {key:<24} {label}\n")


def cmd_gen(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    (out / "scenario.json").write_text(sc.to_json() + "\n")
    sc.mu.save(out / "mu.csv")
    sc.nu.save(out / "nu.csv")
    print(f"{sc.scenario_id}: {len(sc.mu)} cells written to {out}")
    return 0


def cmd_validate(args) -> int:
    sc = _scenario(args)
    if args.subcube_level:
        return _validate_family(sc, args.subcube_level)
    rows = validate_hypotheses(sc)
    _print_rows([(r.key, r.ok, "") for r in rows])
    if args.out:
        out = _out_dir(args)
        text = json.dumps({"scenario": sc.scenario_id, "hypotheses": [r.as_dict() for r in rows]},
                          sort_keys=True, indent=1)
        (out / "hypotheses.json").write_text(text + "\n")
    return 0 if all(r.ok for r in rows) else 1


def _validate_family(sc: Scenario, level: int) -> int:
    """Validate every admissible dyadic subcube at ``level``; inadmissible cubes are listed and skipped."""
    all_ok = True
    for Q, admissible in subcube_family(sc, level):
        label = f"lo={tuple(round(v, 6) for v in Q.corner)} side={Q.side}"
        if not admissible:
            print(f"SKIP  {'not doubling/small-boundary':<24} {label}")
            continue
        rows = validate_hypotheses(restrict_scenario(sc, Q), Q)
        ok = all(r.ok for r in rows)
        all_ok &= ok
        bad = ",".join(r.key for r in rows if not r.ok)
        _print_rows([("subcube", ok, label + (f" failing: {bad}" if bad else ""))])
    return 0 if all_ok else 1


def _run_one(spec: tuple) -> tuple[str, str, str, bool]:
    text, refine, determinism, override, r = spec
    sc = Scenario.from_json(text)
    rep = run_pipeline(sc, refine=refine, check_determinism=determinism, override=override, r_battery=r)
    return sc.scenario_id, rep.to_json(), rep.estimates_csv(), rep.ok


def cmd_run(args) -> int:
    if args.all_kinds:
        scs = [generate_scenario(k, {"n_grids": args.grids} if args.grids else None,
                                 0 if args.seed is None else args.seed) for k in KINDS]
    else:
        scs = [_scenario(args)]
    specs = [(sc.to_json(), not args.no_refine, not args.no_determinism, args.override, args.r) for sc in scs]
    try:
        if _threads(args) > 1 and len(specs) > 1:
            with ProcessPoolExecutor(max_workers=_threads(args)) as ex:
                results = list(ex.map(_run_one, specs))
        else:
            results = [_run_one(s) for s in specs]
    except PipelineError as e:
        print(f"pipeline failed in stage {e.stage}: {e.cause}", file=sys.stderr)
        return 2
    out = _out_dir(args) if args.out else None
    all_ok = True
    for sid, report, table, ok in results:
        all_ok &= ok
        ledger = json.loads(report)["ledger"]
        print(f"== {sid}")
        _print_rows([(f"{k}. {v['key']}", v["pass"], "") for k, v in sorted(ledger.items(), key=lambda kv: int(kv[0]))])
        if out is not None:
            (out / f"{sid}.report.json").write_text(report + "\n")
            (out / f"{sid}.estimates.csv").write_text(table)
    return 0 if all_ok else 1


SWEEP_COLUMNS = ["scenario", "h", "r", "n_grids", "mu_G_ratio", "G_mu_norm", "quasi_orthogonality",
                 "assembly_constant", "bad_estimate", "ledger_ok"]


def _sweep_one(spec: tuple) -> dict:
    kind, params, seed, r = spec
    sc = generate_scenario(kind, params, seed)
    rep = run_pipeline(sc, refine=False, check_determinism=False, override=True, r_battery=r)
    s = rep.stopping.measures
    return {"scenario": sc.scenario_id, "h": sc.pitch, "r": rep.extras["battery"]["r_battery"],
            "n_grids": sc.params["n_grids"], "mu_G_ratio": s["mu_G"] / s["mu_Q"],
            "G_mu_norm": rep.restricted_norm["G_mu"], "quasi_orthogonality": rep.martingale["quasi_orthogonality"],
            "assembly_constant": rep.extras["battery"]["assembly_constant"],
            "bad_estimate": rep.ledger[8].detail["estimate"], "ledger_ok": rep.ok}


def cmd_sweep(args) -> int:
    base = _scenario(args)
    hs = [float(Fraction(h)) for h in args.h_values.split(",")] if args.h_values else [base.pitch]
    rs = [int(r) for r in args.r_values.split(",")] if args.r_values else [None]
    gs = [int(g) for g in args.grid_values.split(",")] if args.grid_values else [base.params["n_grids"]]
    specs = []
    for h in hs:
        for g in gs:
            for r in rs:
                p = {**base.params, "h": h, "n_grids": g}
                # hold the time quadrature fixed across the pitch sweep
                p["t_min"] = 4 * max(hs)
                specs.append((base.kind, p, base.seed, r))
    if _threads(args) > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=_threads(args)) as ex:
            rows = list(ex.map(_sweep_one, specs))
    else:
        rows = [_sweep_one(s) for s in specs]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    sys.stdout.write(buf.getvalue())
    if args.out:
        (_out_dir(args) / f"sweep-{base.kind}.csv").write_text(buf.getvalue())
    return 0 if all(r["ledger_ok"] for r in rows) else 1


def cmd_check_kernel(args) -> int:
    table = KernelTable.load(args.table) if args.table else None
    family = Family.CUSTOM_TABLE if table is not None else Family(args.family)
    spec = KernelSpec(args.m, args.alpha, family, table=table)
    rep = verify_kernel_conditions(spec, default_sample_plan(args.n, seed=0 if args.seed is None else args.seed))
    text = json.dumps({"kernel": spec.describe(), **rep.as_dict()}, sort_keys=True, indent=1)
    print(text)
    if args.out:
        (_out_dir(args) / "kernel.json").write_text(text + "\n")
    return 0 if rep.ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="localtb", description="Local Tb pipeline on discretized measures.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--scenario", help="scenario.json written by gen")
        p.add_argument("--kind", choices=KINDS)
        p.add_argument("--h", help="lattice pitch, e.g. 1/256")
        p.add_argument("--grids", type=int, help="number of Monte Carlo random grids")
        p.add_argument("--depth", type=int, help="Cantor construction depth (cantor-1d)")
        p.add_argument("--param", action="append", help="extra scenario parameter key=value")
        p.add_argument("--out", default=out_default)
        p.add_argument("--threads", type=int, default=None, help=f"worker processes (env {THREADS_ENV})")

    p = sub.add_parser("gen", help="emit scenario.json and the mu/nu cell tables")
    common(p, out_default=".")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", help="hypothesis ledger")
    common(p)
    p.add_argument("--subcube-level", type=int, default=0,
                   help="validate the dyadic subcubes of this level that are doubling with small boundary")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="full pipeline with the acceptance ledger")
    common(p)
    p.add_argument("--all-kinds", action="store_true", help="run every scenario kind with its defaults")
    p.add_argument("--r", type=int, default=None, help="goodness parameter r for the estimate battery")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--no-determinism", action="store_true")
    p.add_argument("--override", action="store_true", help="run even if the hypotheses fail")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="convergence table over h, r and n_grids")
    common(p)
    p.add_argument("--h-values", help="comma separated pitches, e.g. 1/64,1/128")
    p.add_argument("--r-values", help="comma separated r values")
    p.add_argument("--grid-values", help="comma separated grid counts")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-kernel", help="empirical kernel size and Hoelder constants")
    p.add_argument("--family", default="standard", choices=[f.value for f in Family if f is not Family.CUSTOM_TABLE])
    p.add_argument("--table", help="CSV kernel table (t, d, re, im)")
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_check_kernel)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, PipelineError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


__all__ = ["main", "build_parser", "CRITERIA"]
