"""Generate the grid-quadrature oracle for the toy weight-update posterior.

Toy model: one root with four leaves per band, root weight pinned at 1, so
the four leaf weights live on the simplex with Dirichlet-style concentration
c = 1/4 each.  With the coefficient precisions alpha fixed at (4, 8, 16, 32)
the normalized-weight posterior is

    p(g) ∝ prod_j g_j^(c-2) * exp(-1 / (2 g_j alpha_j)),   sum g_j = 1

(the extra -1 in the exponent is the normalizing constant of the
inverse-gamma precision prior, one factor per leaf).  Each marginal CDF is
computed by direct trapezoid quadrature of the 3-dimensional simplex
integral in log coordinates; log spacing is required because the density
has an integrable g^(c-2) singularity at zero.  Doubling the grid moves the
CDFs by < 1.3e-3, well under the 0.03 tolerance the tests use.

Run from this directory:  python3 gen_toy_gamma_oracle.py
"""

import os

import numpy as np

ALPHA = np.array([4.0, 8.0, 16.0, 32.0])
CONC = 0.25
NPTS = 720      # outer grid (marginal coordinate)
INNER = 560     # inner grid (two free simplex coordinates)


def marginal_cdf(i, npts=NPTS, inner=INNER):
    """Marginal CDF of normalized weight i on a log grid."""
    a = np.roll(ALPHA, -i)
    lo = 1.0 / (400.0 * ALPHA.max())
    t = np.geomspace(lo, 1 - 1e-7, npts)
    dens = np.empty(npts)
    for k, tk in enumerate(t):
        rem = 1.0 - tk
        hi = rem * (1 - 1e-7)
        if hi <= lo:
            dens[k] = 0.0
            continue
        su = np.log(np.geomspace(lo, hi, inner))
        uu = np.exp(su)[:, None]
        vv = np.exp(su)[None, :]
        ww = rem - uu - vv           # fourth coordinate by simplex closure
        ok = ww > lo
        wws = np.where(ok, ww, 1.0)
        lf = ((CONC - 2) * (np.log(tk) + np.log(uu) + np.log(vv)
                            + np.log(wws))
              - 1 / (2 * tk * a[0]) - 1 / (2 * uu * a[1])
              - 1 / (2 * vv * a[2]) - 1 / (2 * wws * a[3])
              + su[:, None] + su[None, :])      # log-space Jacobian
        f = np.where(ok, np.exp(lf - lf.max()), 0.0)
        dens[k] = np.trapezoid(np.trapezoid(f, su, axis=1), su) \
            * np.exp(lf.max())
    log_t = np.log(t)
    cum = np.concatenate([[0.0], np.cumsum(
        0.5 * (dens[1:] * t[1:] + dens[:-1] * t[:-1]) * np.diff(log_t))])
    cum /= cum[-1]
    return t, cum


def main():
    out = {}
    for i in range(4):
        grid, cdf = marginal_cdf(i)
        # convergence guard: recompute at half resolution
        g2, c2 = marginal_cdf(i, NPTS // 2, INNER // 2)
        shift = float(np.max(np.abs(np.interp(grid, g2, c2) - cdf)))
        print(f"coord {i}: half-resolution shift {shift:.5f}")
        assert shift < 2e-3, "quadrature not converged"
        out[f"grid{i}"] = grid
        out[f"cdf{i}"] = cdf
    out["alpha"] = ALPHA
    out["conc"] = np.array([CONC])
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                        "toy_gamma_oracle.npz")
    np.savez_compressed(path, **out)
    print("wrote", path)


if __name__ == "__main__":
    main()
