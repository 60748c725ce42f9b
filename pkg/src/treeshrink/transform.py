"""Orthonormal 2D transforms and the quadtree coefficient layout.

Two analysis/synthesis pairs are provided: a periodized Daubechies-4
wavelet transform and an 8x8 orthonormal block DCT.  Both produce a
``TreePyramid`` whose detail coefficients are organized into three
band-trees with a uniform quadtree geometry: the node at grid position
``(r, c)`` of level ``l`` has its parent at ``(r // 2, c // 2)`` of
level ``l - 1`` and its four children at ``(2r + dr, 2c + dc)`` of
level ``l + 1``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

#: Band-tree order used everywhere (also the flattening order).  For the
#: wavelet transform HH/HL/LH are the usual diagonal / vertical-detail /
#: horizontal-detail subbands; for the block DCT they are the subband
#: regroupings of the trees rooted at in-block frequencies (1,1), (1,0)
#: and (0,1) respectively.
BANDS = ("HH", "HL", "LH")

_SQRT3 = np.sqrt(3.0)

#: Orthonormal Daubechies-4 lowpass analysis filter.  The highpass filter
#: is derived from it at call time (see ``_filters``), so corrupting this
#: constant breaks orthonormality in a way the self-check command detects.
DAUB4_LO = np.array(
    [1.0 + _SQRT3, 3.0 + _SQRT3, 3.0 - _SQRT3, 1.0 - _SQRT3]
) / (4.0 * np.sqrt(2.0))

_BDCT_BLOCK = 8
_BDCT_LEVELS = 3
#: In-block root frequency of each block-DCT band tree.
_BDCT_ROOTS = {"HH": (1, 1), "HL": (1, 0), "LH": (0, 1)}


def _filters():
    lo = np.asarray(DAUB4_LO, dtype=float)
    hi = lo[::-1].copy()
    hi[1::2] *= -1.0  # g[k] = (-1)^k h[3-k]
    return lo, hi


class TreeLayout:
    """Index bookkeeping for a quadtree coefficient organization.

    The flattened coefficient vector is laid out as: scaling block
    (row-major), then for each band in ``BANDS`` order, levels 1..L,
    each level row-major.  Level 1 is the coarsest (root) level; node
    counts quadruple from one level to the next.
    """

    def __init__(self, kind, height, width, levels, scaling_shape, level_shapes):
        self.kind = str(kind)
        self.height = int(height)
        self.width = int(width)
        self.levels = int(levels)
        self.bands = BANDS
        self.scaling_shape = (int(scaling_shape[0]), int(scaling_shape[1]))
        self.level_shapes = tuple((int(h), int(w)) for h, w in level_shapes)
        if len(self.level_shapes) != self.levels:
            raise ValueError("level_shapes length must equal levels")
        for l in range(1, self.levels):
            ph, pw = self.level_shapes[l - 1]
            ch, cw = self.level_shapes[l]
            if (ch, cw) != (2 * ph, 2 * pw):
                raise ValueError("level shapes must quadruple node counts")
        self.n_scaling = self.scaling_shape[0] * self.scaling_shape[1]
        self._offsets = {}
        pos = self.n_scaling
        for band in self.bands:
            for l in range(1, self.levels + 1):
                self._offsets[(band, l)] = pos
                pos += self.level_size(l)
        self.n = pos
        if self.n != self.height * self.width:
            raise ValueError("layout does not cover the image exactly")

    def __repr__(self):
        return (f"TreeLayout({self.kind!r}, {self.height}x{self.width}, "
                f"levels={self.levels})")

    def __eq__(self, other):
        if not isinstance(other, TreeLayout):
            return NotImplemented
        return (self.kind, self.height, self.width, self.levels) == \
               (other.kind, other.height, other.width, other.levels)

    def level_shape(self, level):
        if not 1 <= level <= self.levels:
            raise ValueError(f"level {level} out of range 1..{self.levels}")
        return self.level_shapes[level - 1]

    def level_size(self, level):
        h, w = self.level_shape(level)
        return h * w

    @property
    def scaling_slice(self):
        return slice(0, self.n_scaling)

    def offset(self, band, level):
        try:
            return self._offsets[(band, level)]
        except KeyError:
            raise ValueError(f"no such band/level: {band!r}/{level}") from None

    def slice(self, band, level):
        off = self.offset(band, level)
        return slice(off, off + self.level_size(level))

    def parent_map(self, level):
        """Flat index into level ``level - 1`` of each node's parent."""
        if level < 2:
            raise ValueError("root level has no parents")
        h, w = self.level_shape(level)
        rows = np.arange(h)[:, None] // 2
        cols = np.arange(w)[None, :] // 2
        return (rows * (w // 2) + cols).ravel()

    def children_sum(self, values):
        """Sum the four children of each parent (2h x 2w -> h x w)."""
        v = np.asarray(values)
        h2, w2 = v.shape
        return v.reshape(h2 // 2, 2, w2 // 2, 2).sum(axis=(1, 3))

    def expand_to_children(self, values):
        """Repeat each parent value over its 2x2 block of children."""
        v = np.asarray(values)
        return np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)


@dataclass
class TreePyramid:
    """Transform coefficients: a scaling block plus per-band detail levels."""

    layout: TreeLayout
    scaling: np.ndarray
    detail: dict = field(default_factory=dict)  # band -> [level-1 2D, ..., level-L 2D]


def _check_image(image):
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("image must be a 2D array")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def build_wavelet_tree_layout(height, width, levels):
    """Layout for a ``levels``-deep Daubechies-4 quadtree on height x width."""
    height, width, levels = int(height), int(width), int(levels)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    div = 1 << levels
    if height % div or width % div:
        raise ValueError(f"dimensions must be divisible by 2^levels = {div}")
    if height // div < 2 or width // div < 2:
        raise ValueError("too many levels for this image size")
    shapes = [(height >> (levels - l + 1), width >> (levels - l + 1))
              for l in range(1, levels + 1)]
    return TreeLayout("daub4", height, width, levels,
                      (height >> levels, width >> levels), shapes)


def build_bdct_tree_layout(height, width):
    """Layout for the 8x8 block-DCT quadtree (always three levels)."""
    height, width = int(height), int(width)
    if height % _BDCT_BLOCK or width % _BDCT_BLOCK:
        raise ValueError("dimensions must be divisible by 8")
    by, bx = height // _BDCT_BLOCK, width // _BDCT_BLOCK
    shapes = [(by << (l - 1), bx << (l - 1)) for l in range(1, _BDCT_LEVELS + 1)]
    return TreeLayout("bdct8", height, width, _BDCT_LEVELS, (by, bx), shapes)


def default_levels(height, width):
    """Wavelet depth leaving an 8x8 scaling block (at least one level)."""
    side = min(int(height), int(width))
    return max(1, int(np.log2(side)) - 3)


# ---------------------------------------------------------------------------
# Daubechies-4 wavelet transform (periodic boundaries)

def _split_1d(a):
    """One analysis step along the last axis; returns (low, high)."""
    lo, hi = _filters()
    n = a.shape[-1]
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(lo.size)[None, :]) % n
    win = a[..., idx]
    return win @ lo, win @ hi


def _merge_1d(low, high):
    """Adjoint of ``_split_1d`` (exact inverse for orthonormal filters)."""
    lo, hi = _filters()
    low_r = np.roll(low, 1, axis=-1)
    high_r = np.roll(high, 1, axis=-1)
    even = lo[0] * low + lo[2] * low_r + hi[0] * high + hi[2] * high_r
    odd = lo[1] * low + lo[3] * low_r + hi[1] * high + hi[3] * high_r
    out = np.empty(low.shape[:-1] + (2 * low.shape[-1],), dtype=float)
    out[..., 0::2] = even
    out[..., 1::2] = odd
    return out


def _dwt2_once(a):
    lw, hw = _split_1d(a)  # horizontal pass
    ll, hl = (x.T for x in _split_1d(lw.T))  # vertical pass
    lh, hh = (x.T for x in _split_1d(hw.T))
    return ll, lh, hl, hh


def _idwt2_once(ll, lh, hl, hh):
    lw = _merge_1d(ll.T, hl.T).T
    hw = _merge_1d(lh.T, hh.T).T
    return _merge_1d(lw, hw)


def dwt2_forward(image, levels):
    """Multilevel periodized Daubechies-4 analysis of a 2D image."""
    img = _check_image(image)
    layout = build_wavelet_tree_layout(img.shape[0], img.shape[1], levels)
    detail = {b: [None] * layout.levels for b in BANDS}
    cur = img
    for lev in range(layout.levels, 0, -1):
        ll, lh, hl, hh = _dwt2_once(cur)
        detail["HH"][lev - 1] = hh
        detail["HL"][lev - 1] = hl
        detail["LH"][lev - 1] = lh
        cur = ll
    return TreePyramid(layout, cur, detail)


def dwt2_inverse(pyramid):
    """Synthesis inverse of ``dwt2_forward``."""
    layout = pyramid.layout
    if layout.kind != "daub4":
        raise ValueError("pyramid does not hold wavelet coefficients")
    _validate_pyramid(pyramid)
    cur = np.asarray(pyramid.scaling, dtype=float)
    for lev in range(1, layout.levels + 1):
        cur = _idwt2_once(cur,
                          pyramid.detail["LH"][lev - 1],
                          pyramid.detail["HL"][lev - 1],
                          pyramid.detail["HH"][lev - 1])
    return cur


# ---------------------------------------------------------------------------
# 8x8 block DCT (orthonormal DCT-II per block, subband regrouping)

def _blocks(a):
    h, w = a.shape
    b = _BDCT_BLOCK
    return a.reshape(h // b, b, w // b, b).transpose(0, 2, 1, 3)


def _unblocks(blk):
    by, bx, b, _ = blk.shape
    return blk.transpose(0, 2, 1, 3).reshape(by * b, bx * b)


def bdct_forward(image):
    """8x8 orthonormal block-DCT analysis, regrouped into subband trees."""
    img = _check_image(image)
    layout = build_bdct_tree_layout(img.shape[0], img.shape[1])
    coef = scipy.fft.dctn(_blocks(img), type=2, axes=(2, 3), norm="ortho")
    detail = {b: [] for b in BANDS}
    for band in BANDS:
        p, q = _BDCT_ROOTS[band]
        for l in range(1, layout.levels + 1):
            m = 1 << (l - 1)
            sub = coef[:, :, p * m:(p + 1) * m, q * m:(q + 1) * m]
            by, bx = sub.shape[:2]
            detail[band].append(sub.transpose(0, 2, 1, 3).reshape(by * m, bx * m))
    return TreePyramid(layout, coef[:, :, 0, 0].copy(), detail)


def bdct_inverse(pyramid):
    """Synthesis inverse of ``bdct_forward``."""
    layout = pyramid.layout
    if layout.kind != "bdct8":
        raise ValueError("pyramid does not hold block-DCT coefficients")
    _validate_pyramid(pyramid)
    by, bx = layout.scaling_shape
    coef = np.zeros((by, bx, _BDCT_BLOCK, _BDCT_BLOCK))
    coef[:, :, 0, 0] = pyramid.scaling
    for band in BANDS:
        p, q = _BDCT_ROOTS[band]
        for l in range(1, layout.levels + 1):
            m = 1 << (l - 1)
            grid = np.asarray(pyramid.detail[band][l - 1], dtype=float)
            sub = grid.reshape(by, m, bx, m).transpose(0, 2, 1, 3)
            coef[:, :, p * m:(p + 1) * m, q * m:(q + 1) * m] = sub
    return _unblocks(scipy.fft.idctn(coef, type=2, axes=(2, 3), norm="ortho"))


# ---------------------------------------------------------------------------
# Flattening

def _validate_pyramid(pyramid):
    layout = pyramid.layout
    if np.shape(pyramid.scaling) != layout.scaling_shape:
        raise ValueError("scaling block does not match layout")
    for band in BANDS:
        lvls = pyramid.detail.get(band)
        if lvls is None or len(lvls) != layout.levels:
            raise ValueError(f"band {band!r} does not match layout")
        for l in range(1, layout.levels + 1):
            if np.shape(lvls[l - 1]) != layout.level_shape(l):
                raise ValueError(f"band {band!r} level {l} shape mismatch")


def flatten(pyramid):
    """Pyramid -> 1D coefficient vector (scaling, then bands by level)."""
    _validate_pyramid(pyramid)
    layout = pyramid.layout
    parts = [np.asarray(pyramid.scaling, dtype=float).ravel()]
    for band in BANDS:
        for l in range(1, layout.levels + 1):
            parts.append(np.asarray(pyramid.detail[band][l - 1], dtype=float).ravel())
    return np.concatenate(parts)


def unflatten(vector, layout):
    """Inverse of ``flatten``; copies data out of the input vector."""
    vec = np.asarray(vector, dtype=float).ravel()
    if vec.size != layout.n:
        raise ValueError(f"vector length {vec.size} != layout size {layout.n}")
    scaling = vec[layout.scaling_slice].reshape(layout.scaling_shape).copy()
    detail = {}
    for band in BANDS:
        detail[band] = [vec[layout.slice(band, l)].reshape(layout.level_shape(l)).copy()
                        for l in range(1, layout.levels + 1)]
    return TreePyramid(layout, scaling, detail)
