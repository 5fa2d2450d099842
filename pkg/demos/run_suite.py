"""Run the full pipeline on every default scenario and print the acceptance ledger."""
import time

from localtb.harness import CRITERIA, KINDS, generate_scenario, run_pipeline


def main() -> None:
    reports = {}
    for kind in KINDS:
        t = time.perf_counter()
        reports[kind] = run_pipeline(generate_scenario(kind))
        bat = reports[kind].extras["battery"]
        print(f"{kind:<14} {time.perf_counter() - t:5.1f}s  r={bat['r_battery']}  chains={bat['chains']}  "
              f"assembly={bat['assembly_constant']:.4g}")
    print()
    print(f"{'criterion':<22}" + "".join(f"{k:>15}" for k in KINDS))
    for k, name in CRITERIA.items():
        cells = "".join(f"{'pass' if reports[kind].ledger[k].ok else 'FAIL':>15}" for kind in KINDS)
        print(f"{k:>2} {name:<19}" + cells)


if __name__ == "__main__":
    main()
