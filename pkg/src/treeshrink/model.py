"""State containers and densities for the gamma-tree shrinkage model.

Generative structure, per band-tree of the coefficient layout:

* normalized shrinkage weights ``gamma_tilde`` live on a simplex per
  (band, level); the root level draws raw gammas with shape ``1/n_1``,
  each deeper level with shape ``parent_weight / 4``, then normalizes;
* each coefficient precision ``alpha`` is inverse-gamma with unit shape
  and scale ``1 / (2 * gamma_tilde)``, which makes the coefficient
  marginal Laplacian;
* detail coefficients are zero-mean Gaussian with precision
  ``tau_level * alpha * alpha0``; scaling coefficients use ``tau0 * alpha0``;
* optional "spiky" measurement noise adds per-sample outliers ``w`` with
  their own inverse-gamma / simplex hierarchy and global strength ``nu``.

The "flat" ablation keeps everything except the parent-child coupling:
every level draws i.i.d. gammas with shape ``1/n_level``.
"""

import io
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import gammaln

from . import transform
from .randmath import TINY, sample_gamma, sample_inverse_gamma

#: Raw gamma-tree values are floored here after every draw/update so the
#: normalization and the inverse-gamma scales stay well defined.
GAMMA_FLOOR = 1e-300


@dataclass
class Hyperparameters:
    """Fixed hyperparameters; the defaults are deliberately vague."""

    a0: float = 1e-6          # gamma hyperprior shape for tau / alpha0
    b0: float = 1e-6          # gamma hyperprior rate for tau / alpha0
    root_rate: float = 1.0    # rate of the root-level gamma draws
    n_c: int = 4              # children per node (quadtree geometry)
    e0: float = 1e-6          # spiky-strength (nu) hyperprior shape
    f0: float = 1e-6          # spiky-strength (nu) hyperprior rate
    flat_shape: float | None = None  # flat-model gamma shape; 1/n_level if None


@dataclass
class ShrinkageState:
    """Per-(band, level) shrinkage variables plus the level scales."""

    structure: str                       # "tree" or "flat"
    gamma: dict                          # band -> [2D raw gamma per level]
    gamma_tilde: dict                    # band -> [2D normalized weights]
    alpha: dict                          # band -> [2D coefficient precisions]
    tau: np.ndarray                      # per-level scale, shared across bands
    tau0: float                          # scaling-block scale


@dataclass
class NoiseState:
    """Measurement-noise variables; the spiky fields are None when disabled."""

    alpha0: float = 1.0
    spiky: bool = False
    w: np.ndarray | None = None          # per-measurement outlier values
    zeta: np.ndarray | None = None       # per-measurement outlier precisions
    p_raw: np.ndarray | None = None      # raw gammas behind the outlier simplex
    p: np.ndarray | None = None          # normalized outlier weights
    nu: float = 1.0                      # global outlier strength


@dataclass
class ModelState:
    """Everything the samplers and solvers mutate."""

    layout: transform.TreeLayout
    pyramid: transform.TreePyramid
    shrinkage: ShrinkageState
    noise: NoiseState
    hyper: Hyperparameters


def normalize_gamma(values):
    """Normalize positive gamma draws onto the simplex."""
    v = np.asarray(values, dtype=float)
    if v.size == 0 or np.any(~np.isfinite(v)) or np.any(v <= 0.0):
        raise ValueError("gamma values must be positive and finite")
    return v / v.sum()


def level_concentrations(layout, shrinkage, band, level, hyper):
    """Dirichlet concentrations governing (band, level) raw gamma draws.

    Tree structure: the root level uses ``1/n_1``; deeper levels inherit a
    quarter of the parent's normalized weight.  Flat structure: ``1/n_level``
    (or ``hyper.flat_shape``) everywhere, with no parent coupling.
    """
    shape = layout.level_shape(level)
    if shrinkage.structure == "flat":
        c = hyper.flat_shape if hyper.flat_shape is not None else 1.0 / (shape[0] * shape[1])
        return np.full(shape, c)
    if level == 1:
        return np.full(shape, 1.0 / (shape[0] * shape[1]))
    parent = shrinkage.gamma_tilde[band][level - 2]
    return layout.expand_to_children(parent) / hyper.n_c


def prior_draw_tree(layout, hyper, rng, structure="tree"):
    """Draw the gamma tree (weights only) from its prior.

    Returns a ShrinkageState with unit ``alpha``, ``tau`` and ``tau0``;
    coefficient-level variables are drawn by ``prior_draw_coefficients``.
    """
    if structure not in ("tree", "flat"):
        raise ValueError("structure must be 'tree' or 'flat'")
    state = ShrinkageState(
        structure=structure,
        gamma={b: [] for b in layout.bands},
        gamma_tilde={b: [] for b in layout.bands},
        alpha={b: [np.ones(layout.level_shape(l)) for l in range(1, layout.levels + 1)]
               for b in layout.bands},
        tau=np.ones(layout.levels),
        tau0=1.0,
    )
    for band in layout.bands:
        for level in range(1, layout.levels + 1):
            conc = level_concentrations(layout, state, band, level, hyper)
            g = sample_gamma(conc, hyper.root_rate, rng)
            g = np.maximum(g, GAMMA_FLOOR)
            state.gamma[band].append(g)
            state.gamma_tilde[band].append(normalize_gamma(g))
    return state


def prior_draw_coefficients(shrinkage, layout, hyper, rng, alpha0=1.0):
    """Draw coefficient precisions and values given the gamma tree.

    Mutates ``shrinkage.alpha`` in place and returns the sampled pyramid.
    """
    gen = rng.gen if hasattr(rng, "gen") else rng
    scaling_std = 1.0 / np.sqrt(shrinkage.tau0 * alpha0)
    scaling = gen.normal(0.0, scaling_std, size=layout.scaling_shape)
    detail = {}
    for band in layout.bands:
        detail[band] = []
        for level in range(1, layout.levels + 1):
            gt = shrinkage.gamma_tilde[band][level - 1]
            alpha = sample_inverse_gamma(1.0, 1.0 / (2.0 * gt), rng)
            shrinkage.alpha[band][level - 1] = alpha
            std = 1.0 / np.sqrt(shrinkage.tau[level - 1] * alpha * alpha0)
            detail[band].append(gen.normal(0.0, 1.0, size=gt.shape) * std)
    return transform.TreePyramid(layout, scaling, detail)


# ---------------------------------------------------------------------------
# Log densities

def _gamma_logpdf(x, shape, rate):
    return (shape * np.log(rate) - gammaln(shape)
            + (shape - 1.0) * np.log(x) - rate * x)


def _invgamma1_logpdf(x, scale):
    # inverse gamma with unit shape
    return np.log(scale) - 2.0 * np.log(x) - scale / x


def _normal_logpdf(x, prec):
    return 0.5 * (np.log(prec) - np.log(2.0 * np.pi)) - 0.5 * prec * x * x


def log_joint_terms(state, y, operator):
    """Per-factor log densities of the joint model at the current state."""
    layout = state.layout
    hyper = state.hyper
    shr = state.shrinkage
    noise = state.noise
    y = np.asarray(y, dtype=float).ravel()
    x_flat = transform.flatten(state.pyramid)
    resid = y - operator.apply_psi(x_flat)
    if noise.spiky:
        resid = resid - noise.w
    a0 = noise.alpha0
    m = y.size

    terms = {}
    terms["likelihood"] = (0.5 * m * (np.log(a0) - np.log(2.0 * np.pi))
                           - 0.5 * a0 * float(resid @ resid))
    terms["x_scaling"] = float(
        _normal_logpdf(state.pyramid.scaling, shr.tau0 * a0).sum())
    xd = 0.0
    at = 0.0
    gt_ = 0.0
    for band in layout.bands:
        for level in range(1, layout.levels + 1):
            xs = state.pyramid.detail[band][level - 1]
            alpha = shr.alpha[band][level - 1]
            gtil = shr.gamma_tilde[band][level - 1]
            g = shr.gamma[band][level - 1]
            xd += float(_normal_logpdf(xs, shr.tau[level - 1] * alpha * a0).sum())
            at += float(_invgamma1_logpdf(alpha, 1.0 / (2.0 * gtil)).sum())
            conc = level_concentrations(layout, shr, band, level, hyper)
            gt_ += float(_gamma_logpdf(g, conc, hyper.root_rate).sum())
    terms["x_detail"] = xd
    terms["alpha"] = at
    terms["gamma"] = gt_
    terms["tau"] = float(_gamma_logpdf(shr.tau, hyper.a0, hyper.b0).sum()
                         + _gamma_logpdf(shr.tau0, hyper.a0, hyper.b0))
    terms["alpha0"] = float(_gamma_logpdf(a0, hyper.a0, hyper.b0))
    if noise.spiky:
        terms["w"] = float(
            _normal_logpdf(noise.w, noise.nu * noise.zeta * a0).sum())
        terms["zeta"] = float(
            _invgamma1_logpdf(noise.zeta, 1.0 / (2.0 * noise.p)).sum())
        terms["p"] = float(
            _gamma_logpdf(noise.p_raw, 1.0 / noise.p_raw.size, 1.0).sum())
        terms["nu"] = float(_gamma_logpdf(noise.nu, hyper.e0, hyper.f0))
    return terms


def log_joint(state, y, operator):
    """Sum of all factor log densities (float, finite for valid states)."""
    total = float(sum(log_joint_terms(state, y, operator).values()))
    if not np.isfinite(total):
        raise FloatingPointError("log joint is not finite")
    return total


# ---------------------------------------------------------------------------
# Checkpoint serialization (plain text, one key per line)

def _fmt(arr):
    return " ".join(repr(float(v)) for v in np.asarray(arr, dtype=float).ravel())


def save_state(state, path):
    """Write a ModelState to a text checkpoint (exact float roundtrip)."""
    layout = state.layout
    buf = io.StringIO()
    buf.write("treeshrink-state 1\n")
    buf.write(f"layout.kind = {layout.kind}\n")
    buf.write(f"layout.height = {layout.height}\n")
    buf.write(f"layout.width = {layout.width}\n")
    buf.write(f"layout.levels = {layout.levels}\n")
    for k, v in asdict(state.hyper).items():
        buf.write(f"hyper.{k} = {'' if v is None else repr(v)}\n")
    shr = state.shrinkage
    buf.write(f"shrinkage.structure = {shr.structure}\n")
    buf.write(f"shrinkage.tau0 = {repr(float(shr.tau0))}\n")
    buf.write(f"shrinkage.tau = {_fmt(shr.tau)}\n")
    buf.write(f"pyramid.scaling = {_fmt(state.pyramid.scaling)}\n")
    for band in layout.bands:
        for level in range(1, layout.levels + 1):
            buf.write(f"pyramid.detail.{band}.{level} = "
                      f"{_fmt(state.pyramid.detail[band][level - 1])}\n")
            buf.write(f"shrinkage.gamma.{band}.{level} = "
                      f"{_fmt(shr.gamma[band][level - 1])}\n")
            buf.write(f"shrinkage.alpha.{band}.{level} = "
                      f"{_fmt(shr.alpha[band][level - 1])}\n")
    noise = state.noise
    buf.write(f"noise.alpha0 = {repr(float(noise.alpha0))}\n")
    buf.write(f"noise.spiky = {int(noise.spiky)}\n")
    if noise.spiky:
        buf.write(f"noise.w = {_fmt(noise.w)}\n")
        buf.write(f"noise.zeta = {_fmt(noise.zeta)}\n")
        buf.write(f"noise.p_raw = {_fmt(noise.p_raw)}\n")
        buf.write(f"noise.nu = {repr(float(noise.nu))}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_state(path):
    """Read a checkpoint written by ``save_state``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("treeshrink-state"):
        raise ValueError("not a treeshrink checkpoint")
    kv = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, val = line.partition(" = ")
        kv[key.strip()] = val

    def farr(key, shape):
        return np.array([float(t) for t in kv[key].split()]).reshape(shape)

    kind = kv["layout.kind"]
    h, w = int(kv["layout.height"]), int(kv["layout.width"])
    levels = int(kv["layout.levels"])
    if kind == "daub4":
        layout = transform.build_wavelet_tree_layout(h, w, levels)
    elif kind == "bdct8":
        layout = transform.build_bdct_tree_layout(h, w)
    else:
        raise ValueError(f"unknown layout kind {kind!r}")

    hyper = Hyperparameters(
        a0=float(kv["hyper.a0"]), b0=float(kv["hyper.b0"]),
        root_rate=float(kv["hyper.root_rate"]), n_c=int(float(kv["hyper.n_c"])),
        e0=float(kv["hyper.e0"]), f0=float(kv["hyper.f0"]),
        flat_shape=None if kv["hyper.flat_shape"] == "" else float(kv["hyper.flat_shape"]),
    )
    gamma, gtil, alpha, detail = {}, {}, {}, {}
    for band in layout.bands:
        gamma[band], gtil[band], alpha[band], detail[band] = [], [], [], []
        for level in range(1, layout.levels + 1):
            shape = layout.level_shape(level)
            g = farr(f"shrinkage.gamma.{band}.{level}", shape)
            gamma[band].append(g)
            gtil[band].append(normalize_gamma(g))
            alpha[band].append(farr(f"shrinkage.alpha.{band}.{level}", shape))
            detail[band].append(farr(f"pyramid.detail.{band}.{level}", shape))
    shr = ShrinkageState(
        structure=kv["shrinkage.structure"],
        gamma=gamma, gamma_tilde=gtil, alpha=alpha,
        tau=farr("shrinkage.tau", (layout.levels,)),
        tau0=float(kv["shrinkage.tau0"]),
    )
    pyramid = transform.TreePyramid(
        layout, farr("pyramid.scaling", layout.scaling_shape), detail)
    spiky = bool(int(kv["noise.spiky"]))
    m = h * w
    noise = NoiseState(alpha0=float(kv["noise.alpha0"]), spiky=spiky)
    if spiky:
        noise.w = farr("noise.w", (-1,))
        noise.zeta = farr("noise.zeta", (-1,))
        noise.p_raw = farr("noise.p_raw", (-1,))
        noise.p = normalize_gamma(noise.p_raw)
        noise.nu = float(kv["noise.nu"])
    return ModelState(layout, pyramid, shr, noise, hyper)
