"""Check every loss term's analytic gradient against finite differences.

The whole training stack runs on a small reverse-mode autodiff engine, so
the one thing worth distrusting is the gradients. This script perturbs
each parameter entry by ±1e-5, forms the central difference, and compares
it to the backpropagated value for every loss term (in 64-bit precision).
Takes about two minutes on one CPU core.
"""

import time

from nvd import gradcheck


def main():
    start = time.perf_counter()
    worst = 0.0
    for term in gradcheck.LOSS_TERMS:
        err = gradcheck.check_loss_term(term)
        worst = max(worst, err)
        print(f"{term:>10}: max relative error {err:.3e}")
    status = "OK" if worst < 1e-4 else "MISMATCH"
    print(f"\n{status}: worst {worst:.3e} (tolerance 1e-4), "
          f"{time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
