"""Seedable samplers and special-function helpers for the shrinkage model.

The generalized-inverse-Gaussian (GIG) density used throughout follows the
convention

    p(x) propto x**(p - 1) * exp(-(a*x + b/x) / 2),   x > 0, a > 0, b > 0.

Gamma distributions are parameterized by (shape, rate), inverse gammas by
(shape, scale) so that 1/X ~ Gamma(shape, rate=scale).
"""

import math

import numpy as np
from scipy import special

#: Smallest value returned by the positive samplers; draws whose true value
#: underflows double precision are clamped here so results stay positive.
TINY = 1e-300


class RngHandle:
    """Reproducible random source.

    Identical (seed, stream) pairs reproduce identical draw sequences;
    distinct stream ids give statistically independent streams.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, self.stream))))

    def spawn(self, stream):
        return RngHandle(self.seed, stream)

    def __repr__(self):
        return f"RngHandle(seed={self.seed}, stream={self.stream})"


def _gen(rng):
    if isinstance(rng, RngHandle):
        return rng.gen
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngHandle or numpy Generator")


def _check_positive(name, value):
    arr = np.asarray(value, dtype=float)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError(f"{name} must be positive and finite")
    return arr


# ---------------------------------------------------------------------------
# Gamma / inverse gamma / Dirichlet

def sample_gamma(shape, rate, rng, size=None):
    """Draw from Gamma(shape, rate); exact for arbitrarily small shapes.

    Shapes below one use the boosting identity X = G(shape + 1) * U**(1/shape)
    evaluated in log space, which stays correct where naive samplers
    degenerate (shapes as small as 1e-4 appear in the root-level priors).
    """
    gen = _gen(rng)
    shape_a = _check_positive("shape", shape)
    rate_a = _check_positive("rate", rate)
    scalar = size is None and shape_a.ndim == 0 and rate_a.ndim == 0
    if size is None:
        size = np.broadcast(shape_a, rate_a).shape
    k = np.broadcast_to(shape_a, size)
    out = np.empty(size, dtype=float)
    small = k < 1.0
    if np.any(~small):
        out[~small] = gen.gamma(k[~small], 1.0)
    if np.any(small):
        ks = k[small]
        boost = gen.gamma(ks + 1.0, 1.0)
        logu = np.log(gen.random(ks.shape)) / ks
        out[small] = np.exp(np.log(boost) + logu)
    out /= np.broadcast_to(rate_a, size)
    out = np.maximum(out, TINY)
    return float(out[()]) if scalar else out


def sample_inverse_gamma(shape, scale, rng, size=None):
    """Draw X with 1/X ~ Gamma(shape, rate=scale)."""
    draws = sample_gamma(shape, scale, rng, size=size)
    return 1.0 / draws


def sample_dirichlet(concentrations, rng):
    """Dirichlet draw via normalized gammas; safe for tiny concentrations."""
    conc = _check_positive("concentrations", concentrations)
    if conc.ndim != 1:
        raise ValueError("concentrations must be a 1D array")
    g = sample_gamma(conc, 1.0, rng)
    return g / g.sum()


# ---------------------------------------------------------------------------
# Modified Bessel function of the second kind

def bessel_k(p, x):
    """K_p(x) for x > 0 (symmetric in the sign of p)."""
    x_a = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x_a)) or np.any(x_a <= 0.0):
        raise ValueError("x must be positive and finite")
    return special.kv(p, x)


def log_bessel_k(p, x):
    """log K_p(x), stable for large x where K_p underflows."""
    x_a = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x_a)) or np.any(x_a <= 0.0):
        raise ValueError("x must be positive and finite")
    return np.log(special.kve(p, x_a)) - x_a


def bessel_k_ratio(p, x):
    """K_{p+1}(x) / K_p(x) computed from scaled Bessel functions."""
    x_a = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x_a)) or np.any(x_a <= 0.0):
        raise ValueError("x must be positive and finite")
    return special.kve(p + 1.0, x_a) / special.kve(p, x_a)


# ---------------------------------------------------------------------------
# Generalized inverse Gaussian

def gig_mean(a, b, p):
    """E[X] for GIG(a, b, p): sqrt(b/a) K_{p+1}(sqrt(ab)) / K_p(sqrt(ab))."""
    a_a = _check_positive("a", a)
    b_a = _check_positive("b", b)
    omega = np.sqrt(a_a * b_a)
    return np.sqrt(b_a / a_a) * bessel_k_ratio(p, omega)


def gig_mode(a, b, p):
    """Mode of GIG(a, b, p): ((p-1) + sqrt((p-1)^2 + ab)) / a."""
    a_a = _check_positive("a", a)
    b_a = _check_positive("b", b)
    pm1 = np.asarray(p, dtype=float) - 1.0
    return (pm1 + np.sqrt(pm1 * pm1 + a_a * b_a)) / a_a


def _gig_scalar(a, b, p, gen):
    """One GIG(a, b, p) draw via Devroye's log-concave rejection method."""
    lam = p
    omega = math.sqrt(a * b)
    swap = lam < 0.0
    if swap:
        lam = -lam
    # alpha = sqrt(omega^2 + lam^2) - lam, written to avoid cancellation
    hyp = math.hypot(omega, lam)
    alpha = omega * omega / (hyp + lam)

    def psi(x):
        return -alpha * (math.cosh(x) - 1.0) - lam * (math.exp(x) - x - 1.0)

    def dpsi(x):
        return -alpha * math.sinh(x) - lam * (math.exp(x) - 1.0)

    v = -psi(1.0)
    if 0.5 <= v <= 2.0:
        t = 1.0
    elif v > 2.0:
        t = math.sqrt(2.0 / (alpha + lam))
    else:
        t = math.log(4.0 / (alpha + 2.0 * lam))
    u = -psi(-1.0)
    if 0.5 <= u <= 2.0:
        s = 1.0
    elif u > 2.0:
        s = math.sqrt(4.0 / (alpha * math.cosh(1.0) + lam))
    else:
        cand = math.log(1.0 + 1.0 / alpha + math.sqrt(1.0 / (alpha * alpha) + 2.0 / alpha))
        s = cand if lam == 0.0 else min(1.0 / lam, cand)

    eta = -psi(t)
    zeta = -dpsi(t)
    theta = -psi(-s)
    xi = dpsi(-s)
    pc = 1.0 / xi
    rc = 1.0 / zeta
    td = t - rc * eta
    sd = s - pc * theta
    q = td + sd

    for _ in range(1000):
        u1 = gen.random()
        v1 = gen.random()
        w1 = gen.random()
        if u1 < q / (pc + q + rc):
            x = -sd + q * v1
        elif u1 < (q + rc) / (pc + q + rc):
            x = td - rc * math.log(v1)
        else:
            x = -sd + pc * math.log(v1)
        if -sd <= x <= td:
            env = 1.0
        elif x > td:
            env = math.exp(-eta - zeta * (x - t))
        else:
            env = math.exp(-theta + xi * (x + s))
        if w1 * env <= math.exp(psi(x)):
            break
    else:  # pragma: no cover - envelope acceptance is bounded below
        raise RuntimeError("GIG sampler failed to accept")

    out = math.exp(x) * (lam + math.hypot(lam, omega)) / omega
    if swap:
        out = 1.0 / out
    return out * math.sqrt(b / a)


def sample_gig(a, b, p, rng, size=None):
    """Draw from GIG(a, b, p).

    ``p = -1/2`` is routed through the inverse-Gaussian identity
    GIG(a, b, -1/2) = IG(mean=sqrt(b/a), shape=b), which vectorizes; other
    orders use a scalar rejection sampler.
    """
    gen = _gen(rng)
    a_a = _check_positive("a", a)
    b_a = _check_positive("b", b)
    p_a = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p_a)):
        raise ValueError("p must be finite")
    if np.any(a_a * b_a < TINY):
        raise ValueError("a*b underflows double precision")
    scalar = (size is None and a_a.ndim == 0 and b_a.ndim == 0
              and p_a.ndim == 0)
    if size is None:
        size = np.broadcast(a_a, b_a, p_a).shape
    aa = np.broadcast_to(a_a, size)
    bb = np.broadcast_to(b_a, size)
    pp = np.broadcast_to(p_a, size)
    if pp.size and np.all(pp == -0.5):
        mean = np.sqrt(bb / aa)
        # numpy's wald computes 4*mean*scale internally and returns junk
        # once that overflows; in that regime the distribution has
        # collapsed onto its mean anyway (relative spread sqrt(mean/b)).
        with np.errstate(over="ignore"):
            safe = 4.0 * mean * bb < 1e300
        if np.all(safe):
            out = gen.wald(mean, bb)
        else:
            draws = gen.wald(np.where(safe, mean, 1.0),
                             np.where(safe, bb, 1.0))
            out = np.where(safe, draws, np.minimum(mean, 1e300))
    else:
        out = np.empty(size, dtype=float)
        flat = out.reshape(-1)
        af, bf, pf = aa.reshape(-1), bb.reshape(-1), pp.reshape(-1)
        for i in range(flat.size):
            flat[i] = _gig_scalar(af[i], bf[i], pf[i], gen)
    out = np.maximum(out, TINY)
    return float(out[()]) if scalar else out
