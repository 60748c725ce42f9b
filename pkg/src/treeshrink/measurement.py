"""Measurement operators, noise injection, image metrics and image I/O.

A sensing operator represents ``Psi = H @ T`` where ``T`` is the synthesis
matrix of an orthonormal transform (so ``analyze`` is its exact adjoint)
and ``H`` is one of: dense i.i.d. Gaussian (compressive sensing), identity
(denoising), or a row mask (inpainting / subsampling).
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import transform
from .randmath import _gen


@dataclass
class ExperimentSpec:
    """Resolved description of one experiment run (goes in the manifest)."""

    image: str = ""
    basis: str = "daub4"
    levels: int | None = None
    csr: float = 0.4
    noise_sigma: float = 0.0
    spike_rate: float = 0.0
    spike_range: tuple = (0.0, 1.0)
    seed: int = 0
    method: str = "mcmc"
    iters: int | None = None
    burnin: int | None = None
    model: str = "tree"
    chains: int = 1


def measurement_count(csr, n):
    """Number of measurements for a compressive-sensing ratio: floor(csr*n)."""
    csr = float(csr)
    if not 0.0 < csr <= 1.0:
        raise ValueError("csr must lie in (0, 1]")
    return int(np.floor(csr * n))


def _build_layout(shape, basis, levels=None):
    h, w = shape
    if basis == "daub4":
        if levels is None:
            levels = transform.default_levels(h, w)
        return transform.build_wavelet_tree_layout(h, w, levels)
    if basis == "bdct8":
        return transform.build_bdct_tree_layout(h, w)
    raise ValueError(f"unknown basis {basis!r}")


class SensingOperator:
    """``y = H @ vec(T x) + noise`` with cached dense column data."""

    def __init__(self, kind, layout, basis, H=None, mask=None):
        self.kind = kind
        self.layout = layout
        self.basis = basis
        self.n = layout.n
        if kind == "dense-gaussian":
            self.H = np.asarray(H, dtype=float)
            self.m = self.H.shape[0]
            if self.H.shape != (self.m, self.n):
                raise ValueError("H shape does not match layout")
        elif kind == "identity":
            self.H = None
            self.m = self.n
        elif kind == "row-mask":
            self.mask = np.asarray(mask, dtype=int)
            if self.mask.ndim != 1 or np.unique(self.mask).size != self.mask.size:
                raise ValueError("mask must be 1D with unique indices")
            if self.mask.min() < 0 or self.mask.max() >= self.n:
                raise ValueError("mask indices out of range")
            self.H = None
            self.m = self.mask.size
        else:
            raise ValueError(f"unknown operator kind {kind!r}")
        self._psi = None
        self._colnorms = None

    # -- transform halves ---------------------------------------------------

    def synthesize(self, x):
        """Coefficient vector -> image (the ``T`` half of Psi)."""
        pyr = transform.unflatten(x, self.layout)
        if self.basis == "daub4":
            return transform.dwt2_inverse(pyr)
        return transform.bdct_inverse(pyr)

    def analyze(self, image):
        """Image -> coefficient vector (adjoint of ``synthesize``)."""
        if self.basis == "daub4":
            pyr = transform.dwt2_forward(image, self.layout.levels)
        else:
            pyr = transform.bdct_forward(image)
        return transform.flatten(pyr)

    # -- measurement halves -------------------------------------------------

    def apply_h(self, v):
        v = np.asarray(v, dtype=float).ravel()
        if self.kind == "dense-gaussian":
            return self.H @ v
        if self.kind == "identity":
            return v.copy()
        return v[self.mask]

    def apply_h_adjoint(self, u):
        u = np.asarray(u, dtype=float).ravel()
        if self.kind == "dense-gaussian":
            return self.H.T @ u
        if self.kind == "identity":
            return u.copy()
        out = np.zeros(self.n)
        out[self.mask] = u
        return out

    # -- full operator ------------------------------------------------------

    def apply_psi(self, x):
        return self.apply_h(self.synthesize(x).ravel())

    def apply_psi_adjoint(self, r):
        h, w = self.layout.height, self.layout.width
        return self.analyze(self.apply_h_adjoint(r).reshape(h, w))

    def psi_matrix(self):
        """Dense (m, n) Psi in column-contiguous order; cached."""
        if self._psi is None:
            psi = np.empty((self.m, self.n))
            h, w = self.layout.height, self.layout.width
            for j in range(self.m):
                if self.kind == "dense-gaussian":
                    row = self.H[j]
                else:
                    row = np.zeros(self.n)
                    row[j if self.kind == "identity" else self.mask[j]] = 1.0
                psi[j] = self.analyze(row.reshape(h, w))
            self._psi = np.asfortranarray(psi)
        return self._psi

    def column_norms_sq(self):
        """Squared column norms of Psi (all ones for the identity kind)."""
        if self._colnorms is None:
            if self.kind == "identity":
                self._colnorms = np.ones(self.n)
            else:
                psi = self.psi_matrix()
                self._colnorms = np.einsum("ij,ij->j", psi, psi)
        return self._colnorms


def make_gaussian_operator(m, shape, basis="daub4", rng=None, levels=None):
    """Dense i.i.d. N(0,1) measurement matrix over the chosen basis.

    ``shape`` is the image shape (an int means a square image).
    """
    if np.isscalar(shape):
        shape = (int(shape), int(shape))
    layout = _build_layout(shape, basis, levels)
    m = int(m)
    if not 0 < m <= layout.n:
        raise ValueError("m must lie in 1..n")
    gen = _gen(rng)
    H = gen.normal(0.0, 1.0, size=(m, layout.n))
    return SensingOperator("dense-gaussian", layout, basis, H=H)


def make_identity_operator(shape, basis="daub4", levels=None):
    """Identity measurements (denoising); Psi has orthonormal columns."""
    if np.isscalar(shape):
        shape = (int(shape), int(shape))
    layout = _build_layout(shape, basis, levels)
    return SensingOperator("identity", layout, basis)


def make_row_mask_operator(mask, shape, basis="daub4", levels=None):
    """Keep only the listed pixel indices of the vectorized image."""
    if np.isscalar(shape):
        shape = (int(shape), int(shape))
    layout = _build_layout(shape, basis, levels)
    return SensingOperator("row-mask", layout, basis, mask=mask)


# ---------------------------------------------------------------------------
# Noise injection

def add_gaussian_noise(y, sigma, rng):
    """Add i.i.d. N(0, sigma^2) noise; sigma = 0 returns an exact copy."""
    y = np.asarray(y, dtype=float)
    sigma = float(sigma)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return y.copy()
    return y + sigma * _gen(rng).normal(0.0, 1.0, size=y.shape)


def add_spiky_noise(image, rate, amp_range, rng):
    """Corrupt a [0,1] image with additive uniform spikes.

    Each pixel is hit independently with probability ``rate``; hit pixels
    gain a U(amp_range) increment.  The result is a *measurement*, not an
    image, so it is deliberately not clipped back to [0,1] -- clipping
    would truncate the very outliers the sparse noise term is meant to
    model.  Returns (corrupted measurement, boolean spike mask).
    """
    img = np.asarray(image, dtype=float)
    rate = float(rate)
    lo, hi = float(amp_range[0]), float(amp_range[1])
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if hi < lo:
        raise ValueError("amplitude range is inverted")
    gen = _gen(rng)
    mask = gen.random(img.shape) < rate
    amps = gen.uniform(lo, hi, size=img.shape)
    return img + np.where(mask, amps, 0.0), mask


# ---------------------------------------------------------------------------
# Metrics and image I/O

def psnr(reference, estimate):
    """Peak signal-to-noise ratio in dB against a [0,1] reference image."""
    ref = np.asarray(reference, dtype=float)
    est = np.asarray(estimate, dtype=float)
    if ref.shape != est.shape:
        raise ValueError("shape mismatch")
    if ref.min() < -1e-9 or ref.max() > 1.0 + 1e-9:
        raise ValueError("reference must lie in [0, 1]")
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return np.inf
    return float(10.0 * np.log10(1.0 / mse))


def read_image(path):
    """Load an 8-bit grayscale PGM (P5) or PNG image, scaled to [0,1]."""
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        with open(path, "rb") as fh:
            data = fh.read()
        tokens = []
        i = 0
        while len(tokens) < 4:
            # header tokens with '#' comment support
            while i < len(data) and data[i:i + 1].isspace():
                i += 1
            if data[i:i + 1] == b"#":
                while i < len(data) and data[i] != 0x0A:
                    i += 1
                continue
            start = i
            while i < len(data) and not data[i:i + 1].isspace():
                i += 1
            tokens.append(data[start:i])
        i += 1  # single whitespace after maxval
        if tokens[0] != b"P5":
            raise ValueError("not a binary PGM (P5) file")
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        if maxval != 255:
            raise ValueError("only 8-bit PGM is supported")
        pix = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=i)
        return pix.reshape(h, w).astype(float) / 255.0
    from PIL import Image
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=float) / 255.0


def write_image(path, image):
    """Write a [0,1] image as 8-bit PGM (P5) or PNG, chosen by extension."""
    path = os.fspath(path)
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("image must be 2D")
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if path.lower().endswith(".pgm"):
        h, w = pix.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(pix.tobytes())
    else:
        from PIL import Image
        Image.fromarray(pix, mode="L").save(path)


def synthetic_sparse_image(shape, rng, basis="daub4", levels=None,
                           roots=3, persist=0.7, amp=1.0):
    """Image that is *exactly* sparse in the requested basis.

    Detail support grows down the quadtree: ``roots`` random root nodes
    per band, each child of an active node kept with probability
    ``persist``, amplitudes decaying by half per level.  Everything else
    is exactly zero, so reconstruction error floors at the noise level
    rather than at an approximation tail -- useful when the quantity under
    study is the noise estimate itself.  Returns the [0,1] image.
    """
    h, w = int(shape[0]), int(shape[1])
    if basis == "daub4":
        lv = transform.default_levels(h, w) if levels is None else int(levels)
        layout = transform.build_wavelet_tree_layout(h, w, lv)
    elif basis == "bdct8":
        layout = transform.build_bdct_tree_layout(h, w)
    else:
        raise ValueError(f"unknown basis: {basis!r}")
    gen = _gen(rng)
    pyramid = transform.unflatten(np.zeros(layout.n), layout)
    pyramid.scaling[...] = gen.normal(2.0, 0.5, layout.scaling_shape)
    for band in layout.bands:
        active = np.zeros(layout.level_shape(1), dtype=bool)
        flat = active.ravel()
        k = min(int(roots), flat.size)
        flat[gen.choice(flat.size, size=k, replace=False)] = True
        for level in range(1, layout.levels + 1):
            vals = gen.normal(0.0, 1.0, active.shape) * amp * \
                2.0 ** (-0.5 * (level - 1))
            pyramid.detail[band][level - 1][...] = np.where(active, vals, 0.0)
            if level < layout.levels:
                keep = gen.random(layout.level_shape(level + 1)) < persist
                active = layout.expand_to_children(active) & keep
    if basis == "daub4":
        img = transform.dwt2_inverse(pyramid)
    else:
        img = transform.bdct_inverse(pyramid)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.full((h, w), 0.5)
    # Affine rescaling touches only the scaling block, so exact detail
    # sparsity survives.
    return (img - lo) / (hi - lo)


def synthetic_phantom(size=128):
    """Deterministic piecewise-smooth test image with edges and texture.

    Mostly-smooth regions separated by boundaries plus a small oscillatory
    patch, finished with a sub-pixel blur so edge profiles match the
    optically band-limited edges of photographic images.  Compressible
    under both wavelet and block-DCT bases, with detail coefficients
    clustered along edges the way natural images cluster them.
    """
    size = int(size)
    if size < 16:
        raise ValueError("size must be >= 16")
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    img = 0.25 + 0.35 * xx + 0.2 * yy * yy
    # large disk
    img[(yy - 0.38) ** 2 + (xx - 0.34) ** 2 < 0.062] = 0.82
    # darker inner disk
    img[(yy - 0.40) ** 2 + (xx - 0.30) ** 2 < 0.011] = 0.18
    # tilted bright band
    band = np.abs(0.8 * yy + 0.6 * xx - 0.95) < 0.05
    img[band] = 0.92
    # rectangle
    rect = (yy > 0.66) & (yy < 0.87) & (xx > 0.12) & (xx < 0.45)
    img[rect] = 0.55
    # oscillatory texture patch (Barbara-like stripes)
    patch = (yy > 0.60) & (yy < 0.92) & (xx > 0.58) & (xx < 0.93)
    img[patch] = 0.5 + 0.22 * np.sin(2.0 * np.pi * (14.0 * xx + 6.0 * yy))[patch]
    img = np.clip(img, 0.02, 0.98)
    img = gaussian_filter(img, 0.7, mode="nearest")
    return np.clip(img, 0.0, 1.0)
