"""Gibbs-Metropolis sampler for the gamma-tree shrinkage model.

Sweep order: coefficients x -> precisions alpha -> tree weights gamma
(root to leaf) -> scales tau / noise precision alpha0 -> spiky-noise
block (when enabled).

The gamma update at a node proposes from the generalized-inverse-Gaussian
factor of its conditional,

    GIG(a=2, b=sum_{j!=i} gamma_j / alpha_i, p=concentration_i - 1),

and accepts with the ratio of the remaining factors.  Because every
normalized weight in the level shares the sum S = sum_j gamma_j, moving
gamma_i perturbs the whole level's likelihood: the leftover terms are
S^K (K nodes per level, one power from each node's weight prior scale),
exp(-gamma_i * sum_{j!=i} 1/(2 gamma_j alpha_j)) from the other nodes'
precision likelihoods, and the Dirichlet density of the children level
(tree structure only, absent at leaves).  Normalized weights are
refreshed after every level sweep.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from . import model as md
from . import transform
from .randmath import RngHandle, _gen, _gig_scalar, sample_gamma, sample_gig

#: Floor applied to GIG ``a`` parameters built from squared coefficients.
PREC_FLOOR = 1e-12
#: Floor applied to normalized weights when inverted into GIG ``b`` terms.
WEIGHT_FLOOR = 1e-250
#: Cap on GIG ``b`` parameters so downstream arithmetic stays finite.
B_CAP = 1e280


def _safe_ratio(num, den):
    """num / den clipped into [WEIGHT_FLOOR, B_CAP] without overflowing."""
    den = max(den, num / B_CAP)
    if den <= 0.0:
        return WEIGHT_FLOOR
    return max(num / den, WEIGHT_FLOOR)


@dataclass
class ChainConfig:
    """MCMC run settings."""

    total_samples: int = 5000
    burn_in: int = 1000
    seed: int = 0
    spiky: bool = False
    structure: str = "tree"          # "tree" or "flat"
    accept_window: int = 100         # sweeps per acceptance-rate trace point
    track_indices: tuple = ()        # coefficient indices to keep samples for
    residual_refresh: int = 100      # exact residual recomputation period
    warm_sweeps: int = 50            # sweeps with the noise precision held


@dataclass
class PosteriorSummary:
    """Posterior estimates shared by the sampler and the solvers."""

    x_mean: np.ndarray
    x_var: np.ndarray
    alpha0_mean: float
    noise_std: float                 # posterior mean of alpha0**(-1/2)
    n_retained: int
    method: str = "mcmc"
    w_mean: np.ndarray | None = None
    accept_rate: float | None = None
    log_joint_trace: np.ndarray | None = None
    residual_trace: np.ndarray | None = None
    histograms: dict = field(default_factory=dict)


def _prior_precision(state):
    """Per-coefficient prior precision divided by alpha0 (flat vector)."""
    layout = state.layout
    shr = state.shrinkage
    out = np.empty(layout.n)
    out[layout.scaling_slice] = shr.tau0
    for band in layout.bands:
        for level in range(1, layout.levels + 1):
            alpha = shr.alpha[band][level - 1].ravel()
            out[layout.slice(band, level)] = shr.tau[level - 1] * alpha
    return out


def _flat_x(state):
    return transform.flatten(state.pyramid)


def _set_flat_x(state, x):
    state.pyramid = transform.unflatten(x, state.layout)


def _full_residual(state, y, operator):
    r = np.asarray(y, dtype=float).ravel() - operator.apply_psi(_flat_x(state))
    if state.noise.spiky:
        r = r - state.noise.w
    return r


def update_x(state, y, operator, rng, residual=None, draw_noise=True):
    """Resample every coefficient from its Gaussian full conditional.

    Returns the updated full residual ``y - Psi x - w``.  With identity
    measurements the columns of Psi are orthonormal, the conditionals
    decouple, and the whole vector is drawn in one vectorized step;
    otherwise a sequential sweep updates a maintained residual.
    ``draw_noise=False`` moves each coefficient to its conditional mean
    instead of sampling (used by warm-up sweeps; consumes no randomness).
    """
    gen = _gen(rng)
    a0 = state.noise.alpha0
    prior = _prior_precision(state)
    x = _flat_x(state)
    w = state.noise.w if state.noise.spiky else None
    y = np.asarray(y, dtype=float).ravel()
    target = y if w is None else y - w
    if operator.kind == "identity":
        h, wd = state.layout.height, state.layout.width
        z = operator.analyze(target.reshape(h, wd))
        q = a0 * (prior + 1.0)
        x = a0 * z / q
        if draw_noise:
            x += gen.standard_normal(x.size) / np.sqrt(q)
        _set_flat_x(state, x)
        return target - operator.apply_psi(x)

    psi = operator.psi_matrix()
    cn = operator.column_norms_sq()
    if residual is None:
        residual = target - psi @ x
    r = np.asarray(residual, dtype=float).copy()
    noise = gen.standard_normal(x.size) if draw_noise else np.zeros(x.size)
    for k in range(x.size):
        col = psi[:, k]
        c = col @ r + cn[k] * x[k]
        q = a0 * (prior[k] + cn[k])
        xn = a0 * c / q + noise[k] / math.sqrt(q)
        dx = xn - x[k]
        if dx != 0.0:
            r -= dx * col
        x[k] = xn
    _set_flat_x(state, x)
    return r


def update_alpha(state, rng):
    """Resample coefficient precisions from their GIG conditionals."""
    shr = state.shrinkage
    a0 = state.noise.alpha0
    for band in state.layout.bands:
        for level in range(1, state.layout.levels + 1):
            xs = state.pyramid.detail[band][level - 1]
            gt = shr.gamma_tilde[band][level - 1]
            a = np.maximum(shr.tau[level - 1] * a0 * xs * xs, PREC_FLOOR)
            b = 1.0 / np.maximum(gt, WEIGHT_FLOOR)
            shr.alpha[band][level - 1] = sample_gig(a, b, -0.5, rng)


def update_gamma_metropolis(state, rng):
    """Metropolis-within-Gibbs sweep over the raw tree weights.

    Returns ``(accepted, proposed)`` counts.  Single-node levels are left
    untouched (their normalized weight is identically one).
    """
    gen = _gen(rng)
    layout = state.layout
    shr = state.shrinkage
    accepted = 0
    proposed = 0
    for level in range(1, layout.levels + 1):
        has_children = (shr.structure == "tree") and level < layout.levels
        for band in layout.bands:
            g2d = shr.gamma[band][level - 1]
            if g2d.size == 1:
                shr.gamma_tilde[band][level - 1] = np.ones_like(g2d)
                continue
            g = g2d.ravel().copy()
            alpha = shr.alpha[band][level - 1].ravel()
            conc = md.level_concentrations(
                layout, shr, band, level, state.hyper).ravel()
            s_cur = float(g.sum())
            inv_ga = 1.0 / (2.0 * g * alpha)
            d_tot = float(inv_ga.sum())
            if has_children:
                child_log = np.log(np.maximum(
                    shr.gamma_tilde[band][level], md.GAMMA_FLOOR))
                csum = layout.children_sum(child_log).ravel()
                a_cur = float(g @ csum)
                lg_cur = 4.0 * float(gammaln(g / (4.0 * s_cur)).sum())
            for i in range(g.size):
                s_minus = s_cur - g[i]
                b = _safe_ratio(s_minus, alpha[i])
                prop = max(_gig_scalar(2.0, b, conc[i] - 1.0, gen),
                           md.GAMMA_FLOOR)
                s_new = s_minus + prop
                d_minus = d_tot - inv_ga[i]
                logr = (g.size * (math.log(s_new) - math.log(s_cur))
                        - (prop - g[i]) * d_minus)
                if has_children:
                    a_new = a_cur + (prop - g[i]) * csum[i]
                    gnew = g / (4.0 * s_new)
                    gnew[i] = prop / (4.0 * s_new)
                    lg_new = 4.0 * float(gammaln(gnew).sum())
                    logr += (a_new / (4.0 * s_new) - a_cur / (4.0 * s_cur)
                             - (lg_new - lg_cur))
                proposed += 1
                if math.log(gen.random()) < logr:
                    accepted += 1
                    g[i] = prop
                    s_cur = s_new
                    inv_ga[i] = 1.0 / (2.0 * prop * alpha[i])
                    d_tot = d_minus + inv_ga[i]
                    if has_children:
                        a_cur = a_new
                        lg_cur = lg_new
            g2d[...] = g.reshape(g2d.shape)
            shr.gamma_tilde[band][level - 1] = md.normalize_gamma(g2d)
    return accepted, proposed


def update_tau_and_alpha0(state, y, operator, rng, residual=None,
                          update_noise=True):
    """Resample the level scales and the noise precision (conjugate gammas).

    With ``update_noise=False`` only the level scales move; warm-up sweeps
    hold the noise precision at its initial estimate while the support
    variables equilibrate (see ``run_chain``).
    """
    layout = state.layout
    shr = state.shrinkage
    hyper = state.hyper
    noise = state.noise
    a0 = noise.alpha0
    x0 = state.pyramid.scaling
    sq0 = float((x0 * x0).sum())
    shr.tau0 = sample_gamma(hyper.a0 + 0.5 * x0.size,
                            hyper.b0 + 0.5 * a0 * sq0, rng)
    level_sq = np.empty(layout.levels)
    for level in range(1, layout.levels + 1):
        sq = 0.0
        cnt = 0
        for band in layout.bands:
            xs = state.pyramid.detail[band][level - 1]
            alpha = shr.alpha[band][level - 1]
            sq += float((alpha * xs * xs).sum())
            cnt += xs.size
        level_sq[level - 1] = sq
        shr.tau[level - 1] = sample_gamma(hyper.a0 + 0.5 * cnt,
                                          hyper.b0 + 0.5 * a0 * sq, rng)
    if residual is None:
        residual = _full_residual(state, y, operator)
    m = np.asarray(y).size
    n = layout.n
    quad = float(residual @ residual) + shr.tau0 * sq0 + float(shr.tau @ level_sq)
    shape = hyper.a0 + 0.5 * (m + n)
    if noise.spiky:
        quad += noise.nu * float((noise.zeta * noise.w * noise.w).sum())
        shape += 0.5 * m
    if update_noise:
        noise.alpha0 = sample_gamma(shape, hyper.b0 + 0.5 * quad, rng)


def update_spiky(state, y, operator, rng, residual=None):
    """Resample the spiky-noise block (w, zeta, outlier weights, nu).

    ``residual`` is the full residual including the current w; the updated
    full residual is returned.
    """
    noise = state.noise
    if not noise.spiky:
        raise RuntimeError("spiky-noise updates require spiky=True")
    gen = _gen(rng)
    hyper = state.hyper
    a0 = noise.alpha0
    if residual is None:
        residual = _full_residual(state, y, operator)
    r_now = residual + noise.w  # y - Psi x
    m = r_now.size

    denom = 1.0 + noise.nu * noise.zeta
    prec = a0 * denom
    noise.w = r_now / denom + gen.standard_normal(m) / np.sqrt(prec)

    a_z = np.maximum(noise.nu * a0 * noise.w * noise.w, PREC_FLOOR)
    b_z = 1.0 / np.maximum(noise.p, WEIGHT_FLOOR)
    noise.zeta = sample_gig(a_z, b_z, -0.5, rng)

    praw = noise.p_raw
    conc = 1.0 / m
    s_cur = float(praw.sum())
    for i in range(m):
        s_minus = s_cur - praw[i]
        b = _safe_ratio(s_minus, noise.zeta[i])
        prop = max(_gig_scalar(2.0, b, conc - 1.0, gen), md.GAMMA_FLOOR)
        s_new = s_minus + prop
        if math.log(gen.random()) < math.log(s_new) - math.log(s_cur):
            praw[i] = prop
            s_cur = s_new
    noise.p = md.normalize_gamma(praw)

    noise.nu = sample_gamma(
        hyper.e0 + 0.5 * m,
        hyper.f0 + 0.5 * a0 * float((noise.zeta * noise.w * noise.w).sum()),
        rng)
    return r_now - noise.w


def _cgls_seed(y, operator, iters=25):
    """Least-squares fit of y = Psi x via a few CGLS iterations.

    Each iteration costs two matvecs; for orthonormal Psi the first
    iteration is already exact.  For m < n the iteration heads toward an
    exact fit, which is fine for a seed: a Gibbs pass regenerates x at
    whatever precision the chain holds.
    """
    x = np.zeros(operator.n)
    r = y.copy()
    s = operator.apply_psi_adjoint(r)
    p = s.copy()
    gamma = float(s @ s)
    for _ in range(iters):
        if gamma <= 0.0:
            break
        q = operator.apply_psi(p)
        delta = float(q @ q)
        if delta <= 0.0:
            break
        step = gamma / delta
        x += step * p
        r -= step * q
        s = operator.apply_psi_adjoint(r)
        gamma_new = float(s @ s)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, r


def _mad_noise_floor(y, operator):
    """Noise variance of a direct observation from its finest detail bands.

    With an orthonormal analysis of the observed image, the finest-scale
    coefficients are almost entirely noise, so the median absolute value
    divided by the standard normal quartile is a robust read of sigma.
    The median also shrugs off a few percent of outlier pixels, which is
    exactly the contamination the spiky noise model targets.
    """
    h, w = operator.layout.height, operator.layout.width
    c = operator.analyze(np.asarray(y, dtype=float).reshape(h, w))
    layout = operator.layout
    finest = np.concatenate(
        [c[layout.slice(band, layout.levels)] for band in layout.bands])
    mad = float(np.median(np.abs(finest))) / 0.6745
    return mad * mad


def _pursuit_seed(y, operator, patience=50):
    """Sparse seed and noise floor for an indirect observation.

    Split greedy pursuit: the measurement rows are halved, atoms of Psi are
    selected greedily on the training half (the scaling block, dense by
    design, is fitted up front) and the fit is scored on the held-out half.
    Training rss keeps dropping as the pursuit starts chasing noise, but
    the held-out residual cannot be reduced by atoms fitted to training
    noise, so it bottoms out once the true support is captured.  There

        E[rss_val] = m_val * sigma^2 * (1 + k / (m_train - k - 1)),

    the inflation being the generalization error of the k fitted
    coefficients (Gaussian rows), so dividing by the bracket gives an
    unbiased floor with no tuned constants.  For signals that are only
    approximately sparse the unfittable tail lands in the floor as well,
    which is the right notion of noise for initializing a shrinkage chain.

    Returns ``(x_seed, sigma2)`` where ``x_seed`` is the all-row
    least-squares fit restricted to the selected support at the held-out
    minimum, or ``(None, None)`` when there are too few measurements to
    split.  Seeding the chain sparse matters as much as the floor itself:
    a dense least-squares seed is a self-consistent fixed point in which
    every coefficient sits half-shrunk and the level scales never grow,
    whereas from a sparse seed the precision updates immediately lock the
    off-support coefficients and keep the selected ones free.
    """
    y = np.asarray(y, dtype=float).ravel()
    psi = operator.psi_matrix()
    m, n = psi.shape
    n_scal = operator.layout.n_scaling
    train = np.arange(m) % 2 == 0
    a_tr, a_va = psi[train], psi[~train]
    y_tr, y_va = y[train], y[~train]
    m_tr, m_va = y_tr.size, y_va.size
    if m_tr - n_scal < 16:
        return None, None
    k_max = min(m_tr // 2, n)
    cns = np.einsum("ij,ij->j", a_tr, a_tr)
    used = np.zeros(n, dtype=bool)
    used[:n_scal] = True
    sel = list(range(n_scal))
    q, r_mat = np.linalg.qr(a_tr[:, :n_scal])
    full_r = np.zeros((k_max, k_max))
    full_r[:n_scal, :n_scal] = r_mat
    q = np.concatenate([q, np.zeros((m_tr, k_max - n_scal))], axis=1)
    qty = q[:, :n_scal].T @ y_tr
    resid_tr = y_tr - q[:, :n_scal] @ qty
    best = np.inf
    best_k = len(sel)
    stall = 0
    for k in range(n_scal, k_max):
        coef = solve_triangular(full_r[:k, :k], qty)
        if not np.all(np.isfinite(coef)):
            break
        val_res = y_va - a_va[:, sel] @ coef
        inflate = 1.0 + k / max(m_tr - k - 1.0, 1.0)
        s2 = float(val_res @ val_res) / (m_va * inflate)
        if s2 < best * (1.0 - 1e-3):
            best = s2
            best_k = k
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
        scores = np.abs(a_tr.T @ resid_tr) / np.sqrt(np.maximum(cns, 1e-30))
        scores[used] = -1.0
        j = int(np.argmax(scores))
        proj = q[:, :k].T @ a_tr[:, j]
        ortho = a_tr[:, j] - q[:, :k] @ proj
        nz = float(np.linalg.norm(ortho))
        if nz < 1e-10 * np.sqrt(max(cns[j], 1e-30)):
            used[j] = True
            continue
        used[j] = True
        sel.append(j)
        q[:, k] = ortho / nz
        full_r[:k, k] = proj
        full_r[k, k] = nz
        qy = float(q[:, k] @ y_tr)
        qty = np.append(qty, qy)
        resid_tr = resid_tr - qy * q[:, k]
    if not np.isfinite(best):
        return None, None
    support = sel[:best_k]
    coef, *_ = np.linalg.lstsq(psi[:, support], y, rcond=None)
    x = np.zeros(n)
    x[support] = coef
    return x, best


def init_state(y, operator, config, rng):
    """Build a starting ModelState: neutral tree, CGLS-seeded x.

    The noise precision is seeded from a data-driven noise-floor estimate
    (finest-band median for direct observations, split greedy pursuit for
    compressive ones) rather than started at 1.  It has to begin near the
    data's precision scale: the noise precision multiplies every prior in
    the model, so the conjugate updates are nearly scale-invariant and a
    chain seeded far below the true precision idles on a self-consistent
    diffuse manifold, while one seeded far above locks into interpolation
    before the shrinkage variables can prune.  ``run_chain`` additionally
    holds the value fixed for a few warm-up sweeps so the support
    equilibrates at that scale before the noise precision starts moving.
    """
    layout = operator.layout
    hyper = md.Hyperparameters()
    shr = md.prior_draw_tree(layout, hyper, rng, structure=config.structure)
    # Neutral starting point instead of a prior draw.  The vague hyperprior
    # puts tau anywhere over hundreds of decades, and a random gamma-tree
    # draw starves most of the true support (gamma_tilde ~ 0 pins x at 0,
    # which in turn keeps proposing prior-scale gamma): the chain can take
    # thousands of sweeps to dig itself out.  Uniform weights and unit
    # scales let every coefficient stay responsive to the data.
    shr.tau0 = 1.0
    shr.tau = np.ones_like(shr.tau)
    for band in layout.bands:
        for lvl, g in enumerate(shr.gamma[band]):
            g[...] = 1.0 / g.size
            shr.gamma_tilde[band][lvl][...] = 1.0 / g.size
            shr.alpha[band][lvl][...] = 1.0
    y = np.asarray(y, dtype=float).ravel()
    if operator.kind == "identity":
        x, _ = _cgls_seed(y, operator)
        sig2 = _mad_noise_floor(y, operator)
    else:
        x, sig2 = _pursuit_seed(y, operator)
        if x is None:
            x, _ = _cgls_seed(y, operator)
    pyramid = transform.unflatten(x, layout)
    alpha0 = 1.0 if sig2 is None else 1.0 / max(sig2, 1e-16)
    noise = md.NoiseState(alpha0=float(np.clip(alpha0, 1e-2, 1e8)),
                          spiky=config.spiky)
    if config.spiky:
        m = y.size
        noise.w = np.zeros(m)
        noise.zeta = np.ones(m)
        noise.p_raw = np.full(m, 1.0 / m)
        noise.p = md.normalize_gamma(noise.p_raw)
        noise.nu = 1.0
    return md.ModelState(layout, pyramid, shr, noise, hyper)


def run_chain(y, operator, config, trace_path=None, checkpoint_path=None,
              initial_state=None, rng=None):
    """Run one MCMC chain and summarize the retained draws."""
    if config.burn_in >= config.total_samples:
        raise ValueError("burn_in must be smaller than total_samples")
    if config.total_samples <= 0:
        raise ValueError("total_samples must be positive")
    y = np.asarray(y, dtype=float).ravel()
    if y.size != operator.m:
        raise ValueError("measurement length does not match operator")
    if rng is None:
        rng = RngHandle(config.seed)
    state = initial_state if initial_state is not None else \
        init_state(y, operator, config, rng)

    n = state.layout.n
    retained = 0
    x_sum = np.zeros(n)
    x_sq = np.zeros(n)
    a0_sum = 0.0
    std_sum = 0.0
    w_sum = np.zeros(operator.m) if config.spiky else None
    acc_sum = 0
    prop_sum = 0
    lj_trace = np.empty(config.total_samples)
    tracked = {int(i): [] for i in config.track_indices}

    writer = None
    fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "log_joint", "alpha0", "accept_rate"])

    resid = _full_residual(state, y, operator)
    win_acc = 0
    win_prop = 0
    try:
        for t in range(config.total_samples):
            resid = update_x(state, y, operator, rng, residual=resid)
            update_alpha(state, rng)
            acc, prop = update_gamma_metropolis(state, rng)
            update_tau_and_alpha0(state, y, operator, rng, residual=resid,
                                  update_noise=t >= config.warm_sweeps)
            if config.spiky:
                resid = update_spiky(state, y, operator, rng, residual=resid)
            if config.residual_refresh and (t + 1) % config.residual_refresh == 0:
                resid = _full_residual(state, y, operator)

            lj_trace[t] = md.log_joint(state, y, operator)
            win_acc += acc
            win_prop += prop
            if writer is not None:
                rate = win_acc / win_prop if win_prop else float("nan")
                writer.writerow([t, f"{lj_trace[t]:.6f}",
                                 f"{state.noise.alpha0:.8e}", f"{rate:.4f}"])
                if (t + 1) % config.accept_window == 0:
                    win_acc = win_prop = 0
            if t >= config.burn_in:
                retained += 1
                x = _flat_x(state)
                x_sum += x
                x_sq += x * x
                a0_sum += state.noise.alpha0
                std_sum += 1.0 / math.sqrt(state.noise.alpha0)
                acc_sum += acc
                prop_sum += prop
                if config.spiky:
                    w_sum += state.noise.w
                for i in tracked:
                    tracked[i].append(x[i])
    finally:
        if fh is not None:
            fh.close()

    if checkpoint_path is not None:
        md.save_state(state, checkpoint_path)

    x_mean = x_sum / retained
    x_var = np.maximum(x_sq / retained - x_mean * x_mean, 0.0)
    return PosteriorSummary(
        x_mean=x_mean,
        x_var=x_var,
        alpha0_mean=a0_sum / retained,
        noise_std=std_sum / retained,
        n_retained=retained,
        method="mcmc",
        w_mean=None if w_sum is None else w_sum / retained,
        accept_rate=acc_sum / prop_sum if prop_sum else None,
        log_joint_trace=lj_trace,
        histograms={i: np.asarray(v) for i, v in tracked.items()},
    )


def merge_summaries(summaries):
    """Average the summaries of independent chains."""
    if not summaries:
        raise ValueError("no summaries to merge")
    first = summaries[0]
    merged = PosteriorSummary(
        x_mean=np.mean([s.x_mean for s in summaries], axis=0),
        x_var=np.mean([s.x_var for s in summaries], axis=0),
        alpha0_mean=float(np.mean([s.alpha0_mean for s in summaries])),
        noise_std=float(np.mean([s.noise_std for s in summaries])),
        n_retained=int(sum(s.n_retained for s in summaries)),
        method=first.method,
    )
    if all(s.w_mean is not None for s in summaries):
        merged.w_mean = np.mean([s.w_mean for s in summaries], axis=0)
    rates = [s.accept_rate for s in summaries if s.accept_rate is not None]
    if rates:
        merged.accept_rate = float(np.mean(rates))
    hist = {}
    for s in summaries:
        for i, v in s.histograms.items():
            hist.setdefault(i, []).append(v)
    merged.histograms = {i: np.concatenate(v) for i, v in hist.items()}
    return merged
