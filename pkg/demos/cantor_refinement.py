"""Growth constant, big-piece fraction and restricted norm of the Cantor scenario as the pitch halves.

Every run keeps the time quadrature of the coarsest run, so the operator is
fixed and only the spatial discretization changes.
"""
from localtb.harness import generate_scenario, run_pipeline
from localtb.measure import growth_order_constant, radius_ladder


def main() -> None:
    base = generate_scenario("cantor-1d", {"h": 1 / 128})
    t_min = base.quad.t_min
    print(f"{'h':>8} {'cells':>6} {'growth':>8} {'mu(G)/mu(Q)':>12} {'|V|_G(mu)':>10} {'assembly':>9} {'r':>3}")
    for k in range(4):
        h = 1 / (128 * 2 ** k)
        sc = generate_scenario("cantor-1d", {"h": h, "t_min": t_min})
        growth = growth_order_constant(sc.mu, sc.m, radius_ladder(h, 1.0)).constant
        rep = run_pipeline(sc, refine=False, check_determinism=False)
        s = rep.stopping.measures
        print(f"1/{round(1 / h):<6} {len(sc.mu):>6} {growth:8.3f} {s['mu_G'] / s['mu_Q']:12.4f} "
              f"{rep.restricted_norm['G_mu']:10.4f} {rep.extras['battery']['assembly_constant']:9.4f} {rep.extras['battery']['r_battery']:>3}")


if __name__ == "__main__":
    main()
