"""A heavy cell in mu lands in the high-density set; a heavy cell in nu breaks the absolute-continuity hypothesis."""
import numpy as np

from localtb.harness import generate_scenario, run_pipeline, validate_hypotheses


def main() -> None:
    sc = generate_scenario("spike-mix")
    rep = run_pipeline(sc, refine=False, check_determinism=False)
    j = int(np.argmax(sc.mu.weights.real))
    spike = sc.mu.coords[j:j + 1]
    masks = rep.stopping.masks
    print(f"spike cell {spike[0].tolist()} carries mu mass {sc.mu.weights.real[j]:.5f}")
    print(f"  in H2: {bool(masks['H2'].contains_cells(spike)[0])}   in G: {bool(masks['G'].contains_cells(spike)[0])}")
    s = rep.stopping.measures
    print(f"  mu(G)/mu(Q) = {s['mu_G'] / s['mu_Q']:.4f}")
    for share in (0.0, 0.02, 0.5):
        rows = validate_hypotheses(generate_scenario("spike-mix", {"nu_spike": share}))
        ac = next(r for r in rows if r.key == "absolute_continuity")
        print(f"nu_spike={share:<5} absolute continuity {'pass' if ac.ok else 'FAIL'}  "
              f"greedy |nu|(A)={ac.detail['greedy_bound']:.5f}  limit={ac.detail['limit']:.5f}")


if __name__ == "__main__":
    main()
