"""Tabulate the null distribution of the supLM statistic.

The normalized Brownian bridge ``B(t) / sqrt(t (1 - t))`` is, after the time
change ``u = log(t / (1 - t))``, a stationary Ornstein-Uhlenbeck process with
covariance ``exp(-|du| / 2)``.  The supremum of its squared norm over a
symmetric trimming window ``[pi, 1 - pi]`` therefore only depends on the
dimension ``k`` and the window length ``L = 2 log((1 - pi) / pi)``.

One long path per replication gives the running maximum over every window
length at once.  The discrete-grid supremum is lifted to the continuous one
with Siegmund's 0.5826 * sqrt(step) boundary correction, and the far tail is
replaced by the Bessel-process asymptotic tail.

Run from the repository root::

    python tools/make_suplm_table.py --reps 500000
"""

import argparse
import time

import numpy as np
from scipy import stats

from metamob.fluctest import bessel_sup_tail

KMAX = 21
STEP = 0.002
L_GRID = np.round(np.arange(0.0, 9.3 + 1e-9, 0.1), 10)
X_GRID = np.round(np.arange(0.0, 80.0 + 1e-9, 0.1), 10)
SIEGMUND = 0.5826


def simulate_exceedances(reps, rng, chunk=2000):
    """Count, per (k, L, x), the paths whose continuous-corrected sup exceeds x."""
    n_steps = int(round(L_GRID[-1] / STEP))
    grid_steps = np.round(L_GRID / STEP).astype(int)
    rho = np.exp(-STEP / 2.0)
    innov = np.sqrt(1.0 - rho * rho)
    shift = SIEGMUND * np.sqrt(STEP)
    counts = np.zeros((KMAX, len(L_GRID), len(X_GRID)))
    done = 0
    while done < reps:
        m = min(chunk, reps - done)
        u = rng.standard_normal((KMAX, m))
        running = np.cumsum(u * u, axis=0)
        gi = 0
        for step in range(n_steps + 1):
            if step > 0:
                u = rho * u + innov * rng.standard_normal((KMAX, m))
                np.maximum(running, np.cumsum(u * u, axis=0), out=running)
            while gi < len(grid_steps) and grid_steps[gi] == step:
                sup = np.sort((np.sqrt(running) + shift) ** 2, axis=1)
                for k in range(KMAX):
                    counts[k, gi] += m - np.searchsorted(sup[k], X_GRID, side="right")
                gi += 1
        done += m
    return counts


def build_table(reps, seed):
    rng = np.random.default_rng(seed)
    t0 = time.time()
    counts = simulate_exceedances(reps, rng)
    print(f"simulated {reps} paths in {time.time() - t0:.1f}s")
    log_sf = np.empty((KMAX, len(L_GRID), len(X_GRID)))
    floor = 20.0 / reps
    for k in range(1, KMAX + 1):
        for j, L in enumerate(L_GRID):
            if L == 0.0:
                log_sf[k - 1, j] = stats.chi2.logsf(X_GRID, k)
                continue
            sf = counts[k - 1, j] / reps
            # splice in the asymptotic tail where the sample gets thin
            tail = bessel_sup_tail(X_GRID, k, L)
            thin = np.nonzero(sf < floor)[0]
            if len(thin):
                j0 = thin[0]
                scale = sf[j0 - 1] / tail[j0 - 1] if j0 > 0 else 1.0
                sf[j0:] = scale * tail[j0:]
            sf = np.minimum(np.minimum.accumulate(sf), 1.0)
            log_sf[k - 1, j] = np.log(np.maximum(sf, 1e-300))
    return log_sf


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=500_000)
    parser.add_argument("--seed", type=int, default=20200604)
    parser.add_argument("--out", default="src/metamob/data/suplm_table.npz")
    args = parser.parse_args()
    log_sf = build_table(args.reps, args.seed)
    np.savez_compressed(args.out, log_sf=log_sf.astype(np.float32), L=L_GRID, x=X_GRID,
                        reps=args.reps, step=STEP)
    print("wrote", args.out)


if __name__ == "__main__":
    main()
