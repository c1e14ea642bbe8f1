"""How the supLM p-values behave under the null.

Simulate cumulative score processes of a stable model and look at the
distribution of the p-values, with and without the finite-grid correction.

    python3 demos/03_supLM_null.py
"""

import numpy as np
from scipy import stats

from metamob.fluctest import simulate_suplm_null, suplm_pvalue

k, trim = 2, 0.1
for n in (50, 200, 1000):
    sims = simulate_suplm_null(k, trim, n_grid=n, reps=4000, rng=1)
    p_corr = np.array([suplm_pvalue(s, k, trim, n) for s in sims])
    p_asym = np.array([suplm_pvalue(s, k, trim) for s in sims])
    print(f"n={n:5d}  rejection at 5%: corrected {np.mean(p_corr < 0.05):.3f}, "
          f"asymptotic {np.mean(p_asym < 0.05):.3f}; "
          f"KS corrected {stats.kstest(p_corr, 'uniform').statistic:.3f}")

# Critical values of the limiting law for a few trimming choices
for trim in (0.05, 0.1, 0.15, 0.25):
    xs = np.linspace(1, 40, 4000)
    crit = xs[np.argmax([suplm_pvalue(x, 1, trim) <= 0.05 for x in xs])]
    print(f"k=1 trim={trim:.2f}: 5% critical value {crit:.2f}")
