"""Deterministic solvers: mean-field updates, sampled weight update, EM.

All three share the Gaussian coefficient update and the closed-form
moment updates for the precisions and scales; they differ only in how
the tree weights are refreshed:

* ``avb`` replaces each raw weight by the mean of its GIG factor with the
  other weights clamped at their current normalized means.
* ``vbs`` draws ``vb_samples`` candidates from that same GIG factor and
  reweights them by the factors the plug-in rule ignores (the children
  Dirichlet term and the sum-of-weights factor), i.e. a per-node
  importance-sampling correction.
* ``em`` substitutes the mode of the weight conditional and renormalizes,
  which drops the posterior-spread correction entirely.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import model as md
from . import transform
from .randmath import RngHandle, _gen, gig_mean, gig_mode, sample_gig
from .sampler import PREC_FLOOR, WEIGHT_FLOOR, PosteriorSummary


@dataclass
class SolverConfig:
    """Settings for the deterministic solvers."""

    method: str = "avb"              # "avb", "vbs" or "em"
    max_iters: int = 100
    tol: float = 1e-6                # max |change in mu| convergence cut
    vb_samples: int = 100            # draws per node for method="vbs"
    seed: int = 0
    spiky: bool = False
    structure: str = "tree"


@dataclass
class VariationalState:
    """Factorized-posterior moments, mirroring the sampler's ModelState."""

    layout: transform.TreeLayout
    hyper: md.Hyperparameters
    structure: str
    mu: np.ndarray
    sigma2: np.ndarray
    alpha_mean: dict
    alpha_inv_mean: dict
    gamma_mean: dict
    gamma_tilde: dict
    tau: np.ndarray
    tau0: float
    alpha0: float
    spiky: bool = False
    w_mean: np.ndarray | None = None
    w_var: np.ndarray | None = None
    zeta_mean: np.ndarray | None = None
    zeta_inv_mean: np.ndarray | None = None
    p_raw: np.ndarray | None = None
    p_mean: np.ndarray | None = None
    nu: float = 1.0
    residual: np.ndarray | None = None   # y - Psi mu - w_mean, kept current

    def second_moment(self, band, level):
        layout = self.layout
        sl = layout.slice(band, level)
        shape = layout.level_shape(level)
        return (self.mu[sl] ** 2 + self.sigma2[sl]).reshape(shape)


def _gig_moments(a, b):
    """Mean of X and of 1/X under GIG(a, b, p=-1/2), elementwise."""
    ab = np.sqrt(a * b)
    mean = np.sqrt(b / a)
    inv_mean = np.sqrt(a / b) * (1.0 + 1.0 / ab)
    return mean, inv_mean


def init_variational(y, operator, config):
    """Neutral starting moments; the coefficient means seed from Psi^T y."""
    layout = operator.layout
    hyper = md.Hyperparameters()
    y = np.asarray(y, dtype=float).ravel()
    cn = operator.column_norms_sq()
    mu = operator.apply_psi_adjoint(y) / np.maximum(cn, 1e-12)
    sigma2 = 1.0 / (1.0 + np.maximum(cn, 1e-12))
    alpha_mean = {}
    alpha_inv = {}
    gamma_mean = {}
    gamma_tilde = {}
    for band in layout.bands:
        alpha_mean[band] = [np.ones(layout.level_shape(l))
                            for l in range(1, layout.levels + 1)]
        alpha_inv[band] = [np.ones(layout.level_shape(l))
                           for l in range(1, layout.levels + 1)]
        gamma_mean[band] = [np.full(layout.level_shape(l),
                                    1.0 / layout.level_size(l))
                            for l in range(1, layout.levels + 1)]
        gamma_tilde[band] = [md.normalize_gamma(g) for g in gamma_mean[band]]
    vs = VariationalState(
        layout=layout, hyper=hyper, structure=config.structure,
        mu=mu, sigma2=sigma2,
        alpha_mean=alpha_mean, alpha_inv_mean=alpha_inv,
        gamma_mean=gamma_mean, gamma_tilde=gamma_tilde,
        tau=np.ones(layout.levels), tau0=1.0, alpha0=1.0,
        spiky=config.spiky)
    if config.spiky:
        m = y.size
        vs.w_mean = np.zeros(m)
        vs.w_var = np.full(m, 0.5)
        vs.zeta_mean = np.ones(m)
        vs.zeta_inv_mean = np.ones(m)
        vs.p_raw = np.full(m, 1.0 / m)
        vs.p_mean = md.normalize_gamma(vs.p_raw)
        vs.nu = 1.0
    return vs


def _vb_prior_precision(vs):
    layout = vs.layout
    out = np.empty(layout.n)
    out[layout.scaling_slice] = vs.tau0
    for band in layout.bands:
        for level in range(1, layout.levels + 1):
            alpha = vs.alpha_mean[band][level - 1].ravel()
            out[layout.slice(band, level)] = vs.tau[level - 1] * alpha
    return out


def vb_update_x(vs, y, operator):
    """Coordinate update of the Gaussian coefficient factors.

    Returns the largest absolute change in any mean; also refreshes the
    cached residual.
    """
    y = np.asarray(y, dtype=float).ravel()
    prior = _vb_prior_precision(vs)
    target = y if vs.w_mean is None else y - vs.w_mean
    if operator.kind == "identity":
        h, w = vs.layout.height, vs.layout.width
        z = operator.analyze(target.reshape(h, w))
        mu_new = z / (prior + 1.0)
        vs.sigma2 = 1.0 / (vs.alpha0 * (prior + 1.0))
        delta = float(np.max(np.abs(mu_new - vs.mu))) if vs.mu.size else 0.0
        vs.mu = mu_new
        vs.residual = target - operator.apply_psi(mu_new)
        return delta

    psi = operator.psi_matrix()
    cn = operator.column_norms_sq()
    mu = vs.mu.copy()
    r = target - psi @ mu
    delta = 0.0
    for k in range(mu.size):
        col = psi[:, k]
        c = col @ r + cn[k] * mu[k]
        mu_new = c / (prior[k] + cn[k])
        vs.sigma2[k] = 1.0 / (vs.alpha0 * (prior[k] + cn[k]))
        dx = mu_new - mu[k]
        if dx != 0.0:
            r -= dx * col
            delta = max(delta, abs(dx))
        mu[k] = mu_new
    vs.mu = mu
    vs.residual = r
    return delta


def vb_update_alpha_tau(vs, y, operator):
    """Closed-form moment updates for alpha, tau and the noise precision."""
    layout = vs.layout
    hyper = vs.hyper
    level_sq = np.empty(layout.levels)
    for level in range(1, layout.levels + 1):
        sq = 0.0
        cnt = 0
        for band in layout.bands:
            x2 = vs.second_moment(band, level)
            gt = vs.gamma_tilde[band][level - 1]
            a = np.maximum(vs.tau[level - 1] * vs.alpha0 * x2, PREC_FLOOR)
            b = 1.0 / np.maximum(gt, WEIGHT_FLOOR)
            mean, inv_mean = _gig_moments(a, b)
            vs.alpha_mean[band][level - 1] = mean
            vs.alpha_inv_mean[band][level - 1] = inv_mean
            sq += float((mean * x2).sum())
            cnt += x2.size
        level_sq[level - 1] = sq
        vs.tau[level - 1] = (hyper.a0 + 0.5 * cnt) / (hyper.b0
                                                      + 0.5 * vs.alpha0 * sq)
    sl0 = layout.scaling_slice
    sq0 = float((vs.mu[sl0] ** 2 + vs.sigma2[sl0]).sum())
    vs.tau0 = (hyper.a0 + 0.5 * layout.n_scaling) / (hyper.b0
                                                     + 0.5 * vs.alpha0 * sq0)

    if vs.residual is None:
        target = np.asarray(y, dtype=float).ravel()
        if vs.w_mean is not None:
            target = target - vs.w_mean
        vs.residual = target - operator.apply_psi(vs.mu)
    cn = operator.column_norms_sq()
    m = operator.m
    quad = float(vs.residual @ vs.residual) + float(cn @ vs.sigma2)
    quad += vs.tau0 * sq0 + float(vs.tau @ level_sq)
    shape = hyper.a0 + 0.5 * (m + layout.n)
    if vs.spiky:
        w2 = vs.w_mean ** 2 + vs.w_var
        quad += float(vs.w_var.sum())  # spread of w inside the residual
        quad += vs.nu * float((vs.zeta_mean * w2).sum())
        shape += 0.5 * m
    vs.alpha0 = shape / (hyper.b0 + 0.5 * quad)


def _level_concentrations(vs, band, level):
    layout = vs.layout
    hyper = vs.hyper
    if vs.structure == "flat":
        n_l = layout.level_size(level)
        c = hyper.flat_shape if hyper.flat_shape is not None else 1.0 / n_l
        return np.full(layout.level_shape(level), c)
    if level == 1:
        return np.full(layout.level_shape(1), 1.0 / layout.level_size(1))
    parent = vs.gamma_tilde[band][level - 2]
    return layout.expand_to_children(parent) / hyper.n_c


def avb_update_gamma(vs):
    """Plug-in weight update: each node takes its GIG-factor mean."""
    layout = vs.layout
    for level in range(1, layout.levels + 1):
        for band in layout.bands:
            gt = vs.gamma_tilde[band][level - 1]
            if gt.size == 1:
                vs.gamma_mean[band][level - 1] = np.ones_like(gt)
                vs.gamma_tilde[band][level - 1] = np.ones_like(gt)
                continue
            conc = _level_concentrations(vs, band, level)
            ainv = vs.alpha_inv_mean[band][level - 1]
            b = np.maximum(ainv * (1.0 - gt), WEIGHT_FLOOR)
            mean = np.maximum(gig_mean(2.0, b, conc - 1.0), md.GAMMA_FLOOR)
            vs.gamma_mean[band][level - 1] = mean
            vs.gamma_tilde[band][level - 1] = md.normalize_gamma(mean)


def vbs_update_gamma(vs, rng, n_draws=100):
    """Sampled weight update: importance-correct the GIG proposal per node.

    Candidate draws for node i keep every other weight at its current
    value; weights are the factors missing from the proposal (children
    Dirichlet density when the node has children, and the sum factor).
    """
    gen = _gen(rng)
    layout = vs.layout
    s_draws = int(n_draws)
    for level in range(1, layout.levels + 1):
        has_children = (vs.structure == "tree") and level < layout.levels
        for band in layout.bands:
            gt = vs.gamma_tilde[band][level - 1]
            if gt.size == 1:
                vs.gamma_mean[band][level - 1] = np.ones_like(gt)
                vs.gamma_tilde[band][level - 1] = np.ones_like(gt)
                continue
            g = gt.ravel()
            s_tot = float(g.sum())
            conc = _level_concentrations(vs, band, level).ravel()
            ainv = vs.alpha_inv_mean[band][level - 1].ravel()
            if has_children:
                child_log = np.log(np.maximum(
                    vs.gamma_tilde[band][level], md.GAMMA_FLOOR))
                csum = layout.children_sum(child_log).ravel()
                a_base = float(g @ csum)
            est = np.empty_like(g)
            for i in range(g.size):
                s_minus = s_tot - g[i]
                b = max(ainv[i] * s_minus, WEIGHT_FLOOR)
                draws = sample_gig(2.0, b, conc[i] - 1.0, gen, size=s_draws)
                draws = np.maximum(draws, md.GAMMA_FLOOR)
                s_new = s_minus + draws
                logw = np.log(s_new)
                if has_children:
                    a_new = a_base + (draws - g[i]) * csum[i]
                    beta = g[None, :] / (4.0 * s_new[:, None])
                    beta[:, i] = draws / (4.0 * s_new)
                    logw = logw + a_new / (4.0 * s_new) \
                        - 4.0 * gammaln(beta).sum(axis=1)
                logw -= logw.max()
                wts = np.exp(logw)
                est[i] = float((wts * draws).sum() / wts.sum())
            est = np.maximum(est, md.GAMMA_FLOOR)
            vs.gamma_mean[band][level - 1] = est.reshape(gt.shape)
            vs.gamma_tilde[band][level - 1] = md.normalize_gamma(
                est.reshape(gt.shape))


def em_update_gamma(vs):
    """Mode-substitution weight update (the EM variant)."""
    layout = vs.layout
    for level in range(1, layout.levels + 1):
        for band in layout.bands:
            gt = vs.gamma_tilde[band][level - 1]
            if gt.size == 1:
                vs.gamma_mean[band][level - 1] = np.ones_like(gt)
                vs.gamma_tilde[band][level - 1] = np.ones_like(gt)
                continue
            conc = _level_concentrations(vs, band, level)
            ainv = vs.alpha_inv_mean[band][level - 1]
            b = np.maximum(ainv * (1.0 - gt), WEIGHT_FLOOR)
            mode = gig_mode(2.0, b, conc - 1.0)
            mode = np.maximum(mode, md.GAMMA_FLOOR)
            vs.gamma_mean[band][level - 1] = mode
            vs.gamma_tilde[band][level - 1] = md.normalize_gamma(mode)


def vb_update_spiky(vs, y, operator):
    """Closed-form spiky-noise moment updates (w, zeta, weights, nu)."""
    if not vs.spiky:
        raise RuntimeError("spiky updates require spiky=True")
    hyper = vs.hyper
    y = np.asarray(y, dtype=float).ravel()
    if vs.residual is None:
        vs.residual = y - vs.w_mean - operator.apply_psi(vs.mu)
    r_now = vs.residual + vs.w_mean  # y - Psi mu
    m = r_now.size
    denom = 1.0 + vs.nu * vs.zeta_mean
    vs.w_mean = r_now / denom
    vs.w_var = 1.0 / (vs.alpha0 * denom)
    w2 = vs.w_mean ** 2 + vs.w_var
    a_z = np.maximum(vs.nu * vs.alpha0 * w2, PREC_FLOOR)
    b_z = 1.0 / np.maximum(vs.p_mean, WEIGHT_FLOOR)
    vs.zeta_mean, vs.zeta_inv_mean = _gig_moments(a_z, b_z)
    b_p = np.maximum(vs.zeta_inv_mean * (1.0 - vs.p_mean), WEIGHT_FLOOR)
    praw = np.maximum(gig_mean(2.0, b_p, 1.0 / m - 1.0), md.GAMMA_FLOOR)
    vs.p_raw = praw
    vs.p_mean = md.normalize_gamma(praw)
    vs.nu = (hyper.e0 + 0.5 * m) / (hyper.f0
                                    + 0.5 * vs.alpha0
                                    * float((vs.zeta_mean * w2).sum()))
    vs.residual = r_now - vs.w_mean


def run_solver(y, operator, config, trace_path=None):
    """Iterate the chosen solver until the means settle or iters run out."""
    if config.method not in ("avb", "vbs", "em"):
        raise ValueError("method must be one of 'avb', 'vbs', 'em'")
    if config.max_iters <= 0:
        raise ValueError("max_iters must be positive")
    y = np.asarray(y, dtype=float).ravel()
    if y.size != operator.m:
        raise ValueError("measurement length does not match operator")
    if config.method == "vbs" and config.vb_samples <= 0:
        raise ValueError("vb_samples must be positive")
    vs = init_variational(y, operator, config)
    rng = RngHandle(config.seed)

    writer = None
    fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "residual_norm", "alpha0", "max_dx"])

    res_trace = []
    iters_run = 0
    try:
        for it in range(config.max_iters):
            delta = vb_update_x(vs, y, operator)
            vb_update_alpha_tau(vs, y, operator)
            if config.method == "avb":
                avb_update_gamma(vs)
            elif config.method == "vbs":
                vbs_update_gamma(vs, rng, config.vb_samples)
            else:
                em_update_gamma(vs)
            if config.spiky:
                vb_update_spiky(vs, y, operator)
            rnorm = float(np.linalg.norm(vs.residual))
            res_trace.append(rnorm)
            iters_run = it + 1
            if writer is not None:
                writer.writerow([it, f"{rnorm:.8e}",
                                 f"{vs.alpha0:.8e}", f"{delta:.3e}"])
            if delta < config.tol:
                break
    finally:
        if fh is not None:
            fh.close()

    return PosteriorSummary(
        x_mean=vs.mu.copy(),
        x_var=vs.sigma2.copy(),
        alpha0_mean=vs.alpha0,
        noise_std=1.0 / math.sqrt(vs.alpha0),
        n_retained=iters_run,
        method=config.method,
        w_mean=None if vs.w_mean is None else vs.w_mean.copy(),
        residual_trace=np.asarray(res_trace),
    )
