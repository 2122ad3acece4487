"""Finite-horizon bias of discrete-QR exponents on linear maps.

For a constant map A the QR exponents converge to log|eig(A)| only at rate
1/N: the error times the number of steps settles to a constant set by the
conditioning of the eigenvectors (and, for complex pairs, by the rotation).
A transient cut removes the bias for maps with a real, separated spectrum.
"""
import argparse

import numpy as np

from lyapgrid.lyapunov import qr_accumulate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--systems", type=int, default=8)
    ap.add_argument("--seed", type=int, default=2)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    horizons = (2000, 20000, 200000)

    print(f"{'n':>2} {'spectrum':>8} {'cond(V)':>8} " + " ".join(f"{'err*(N-1) N=' + str(N):>18}"
                                                             for N in horizons))
    for _ in range(args.systems):
        n = int(rng.integers(2, 9))
        A = rng.standard_normal((n, n))
        A *= rng.uniform(0.3, 0.95) / np.max(np.abs(np.linalg.eigvals(A)))
        w, V = np.linalg.eig(A)
        ref = np.sort(np.log(np.abs(w)))[::-1]
        row = []
        for N in horizons:
            got = qr_accumulate(np.broadcast_to(A, (N - 1, n, n))).exponents
            row.append(np.max(np.abs(got - ref)) * (N - 1))
        kind = "complex" if np.any(np.abs(w.imag) > 0) else "real"
        print(f"{n:>2} {kind:>8} {np.linalg.cond(V):>8.1f} " + " ".join(f"{r:>18.3f}" for r in row))

    # real, separated spectrum: a transient cut removes the bias
    n = 6
    eig = np.array([0.9, -0.7, 0.5, 0.3, -0.2, 0.1])
    V = rng.standard_normal((n, n)) + 2 * np.eye(n)
    A = V @ np.diag(eig) @ np.linalg.inv(V)
    maps = np.broadcast_to(A, (1999, n, n))
    ref = np.log(np.abs(eig))
    for cut in (0, 300):
        err = np.max(np.abs(qr_accumulate(maps, transient=cut).exponents - ref))
        print(f"real spectrum, N=2000, transient {cut:>3}: max error {err:.2e}")


if __name__ == "__main__":
    main()
