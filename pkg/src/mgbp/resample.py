"""Downscale / upscale operators and their explicit sparse-matrix forms.

``downscale`` blurs with ``g`` and keeps every ``s``-th sample starting at
phase (0, 0); ``upscale`` inserts zeros and filters with ``p``.  The
explicit matrices built by :func:`operator_matrix` are assembled from scalar
index arithmetic (no tensor ops are called), which is what lets the tests
use them as an oracle for the tensor-domain code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .tensor import (
    BoundaryRule,
    Kernel,
    _atomic_write,
    _pair,
    as_tensor,
    map_index,
    map_indices,
    output_extent,
    strided_convolve,
    transposed_convolve,
)

DEFAULT_CAP = 2**24
# sigma = 0.5*s gives ||I - DU||_1 > 1 with bicubic p in 2D; 0.25*s stays below 0.6 for s <= 4
BLUR_SIGMA_PER_SCALE = 0.25

__all__ = [
    "ResampleSpec",
    "SparseOperator",
    "CapExceededError",
    "cubic",
    "bicubic_kernel",
    "bicubic_phase_taps",
    "gaussian_kernel",
    "box_kernel",
    "nearest_kernel",
    "identity_kernel",
    "downscale",
    "upscale",
    "multi_level_downscale",
    "operator_matrix",
    "convolution_matrix",
    "contraction_norm",
    "save_operator",
    "load_operator",
]


class CapExceededError(ValueError):
    pass


# ---------------------------------------------------------------------------
# kernels


def cubic(t: float, a: float = -0.5) -> float:
    """Keys cubic convolution function."""
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0
    if t < 2.0:
        return a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a
    return 0.0


def bicubic_phase_taps(s: int, a: float = -0.5) -> np.ndarray:
    """Four taps per output phase ``r/s``, weighting coarse samples at offsets -1, 0, 1, 2."""
    if s < 1:
        raise ValueError("scale must be >= 1")
    taps = np.array([[cubic(r / s - j, a) for j in (-1, 0, 1, 2)] for r in range(s)])
    return taps / taps.sum(axis=1, keepdims=True)


def _bicubic_1d(s: int, a: float) -> np.ndarray:
    n = np.arange(-(2 * s - 1), 2 * s)
    taps = np.array([cubic(k / s, a) for k in n])
    # polyphase normalisation: each residue class mod s sums to one
    for r in range(s):
        sel = (n % s) == r
        taps[sel] /= taps[sel].sum()
    return taps


def bicubic_kernel(s: int, a: float = -0.5, ndim: int = 2) -> Kernel:
    if s < 2:
        raise ValueError(f"bicubic kernel needs scale >= 2, got {s}")
    t = _bicubic_1d(s, a)
    taps = np.outer(t, t) if ndim == 2 else t[None, :]
    return Kernel(taps, normalized=True)


def gaussian_kernel(sigma: float, truncate: float = 4.0, ndim: int = 2) -> Kernel:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    radius = max(1, int(math.ceil(truncate * sigma)))
    x = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    taps = np.outer(g, g) if ndim == 2 else g[None, :]
    return Kernel(taps / taps.sum(), normalized=True)


def box_kernel(s: int, ndim: int = 2) -> Kernel:
    """Pair (block) averaging: with stride ``s`` each output averages one s x s block."""
    h = s if ndim == 2 else 1
    return Kernel(np.full((h, s), 1.0 / (h * s)), anchor=(h - 1, s - 1), normalized=True)


def nearest_kernel(s: int, ndim: int = 2) -> Kernel:
    """Sample duplication when used after zero insertion by ``s``."""
    h = s if ndim == 2 else 1
    return Kernel(np.ones((h, s)), anchor=(0, 0), normalized=True)


def identity_kernel() -> Kernel:
    return Kernel(np.ones((1, 1)), anchor=(0, 0), normalized=True)


# ---------------------------------------------------------------------------
# spec


@dataclass(frozen=True)
class ResampleSpec:
    """Scale factor, blur ``g``, interpolation filter ``p`` and boundary rule.

    ``ndim=1`` resamples the width axis only (a row-signal view used for 1D
    examples); height is left untouched.
    """

    scale: int
    blur: Kernel
    interp: Kernel
    boundary: BoundaryRule = BoundaryRule.REPLICATE
    ndim: int = 2

    def __post_init__(self):
        if int(self.scale) != self.scale or self.scale < 2:
            raise ValueError(f"scale must be an integer >= 2, got {self.scale}")
        if self.ndim not in (1, 2):
            raise ValueError("ndim must be 1 or 2")
        object.__setattr__(self, "boundary", BoundaryRule.parse(self.boundary))
        if self.interp.normalized:
            sums = self.interp.polyphase_sums(self.strides)
            if not np.allclose(sums, 1.0, rtol=0, atol=1e-12):
                raise ValueError(f"interp kernel flagged normalized but polyphase sums are {sums.ravel()}")

    @property
    def strides(self) -> tuple[int, int]:
        return (self.scale, self.scale) if self.ndim == 2 else (1, self.scale)

    @classmethod
    def default(cls, scale: int, boundary=BoundaryRule.REPLICATE, a: float = -0.5) -> "ResampleSpec":
        """Gaussian blur (sigma = 0.25*s) with bicubic interpolation."""
        return cls(scale, gaussian_kernel(BLUR_SIGMA_PER_SCALE * scale), bicubic_kernel(scale, a), boundary)

    @classmethod
    def averaging(cls, scale: int, ndim: int = 2, boundary=BoundaryRule.REPLICATE) -> "ResampleSpec":
        """Block average down / nearest duplication up: DU is exactly the identity."""
        return cls(scale, box_kernel(scale, ndim), nearest_kernel(scale, ndim), boundary, ndim)


# ---------------------------------------------------------------------------
# tensor-domain operators


def _check_divisible(shape, strides, levels=1):
    h, w = shape[:2]
    fy, fx = strides[0] ** levels, strides[1] ** levels
    if h % fy or w % fx:
        ph, pw = (-h) % fy, (-w) % fx
        raise ValueError(
            f"dims {h}x{w} not divisible by {fy}x{fx}; pad by {ph} rows and {pw} columns "
            f"(or pass pad=True)"
        )


def _pad_to_multiple(y, strides, rule):
    h, w = y.shape[:2]
    fy, fx = strides
    ri, rv = map_indices(np.arange(-(-h // fy) * fy), h, rule)
    ci, cv = map_indices(np.arange(-(-w // fx) * fx), w, rule)
    return np.where((rv[:, None] & cv[None, :])[:, :, None], y[ri][:, ci], 0.0)


def downscale(y, spec: ResampleSpec, pad: bool = False) -> np.ndarray:
    """``(y * g)`` sampled at stride ``s`` with phase (0, 0)."""
    y = as_tensor(y)
    if pad:
        y = _pad_to_multiple(y, spec.strides, spec.boundary)
    _check_divisible(y.shape, spec.strides)
    return strided_convolve(y, spec.blur, spec.strides, spec.boundary)


def upscale(x, spec: ResampleSpec) -> np.ndarray:
    """Zero insertion at stride ``s`` followed by filtering with ``p``."""
    return transposed_convolve(x, spec.interp, spec.strides, spec.boundary)


def multi_level_downscale(y, spec: ResampleSpec, levels: int) -> np.ndarray:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    y = as_tensor(y)
    _check_divisible(y.shape, spec.strides, levels)
    for _ in range(levels):
        y = downscale(y, spec)
    return y


# ---------------------------------------------------------------------------
# explicit matrices


@dataclass
class SparseOperator:
    """Explicit rectangular matrix acting on row-major vectorised tensors."""

    rows: int
    cols: int
    matrix: sp.csr_matrix = field(repr=False)

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        m.sum_duplicates()
        m.eliminate_zeros()
        if m.shape != (self.rows, self.cols):
            raise ValueError(f"matrix shape {m.shape} != ({self.rows}, {self.cols})")
        if not np.all(np.isfinite(m.data)):
            raise ValueError("operator entries must be finite")
        self.matrix = m

    @classmethod
    def from_entries(cls, rows: int, cols: int, entries) -> "SparseOperator":
        entries = list(entries)
        if entries:
            r, c, v = (np.asarray(z) for z in zip(*entries))
        else:
            r = c = np.zeros(0, dtype=np.int64)
            v = np.zeros(0)
        if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise ValueError("entry index out of range")
        return cls(rows, cols, sp.coo_matrix((v, (r, c)), shape=(rows, cols)).tocsr())

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[i]), int(coo.col[i]), float(coo.data[i])) for i in order]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=np.float64).reshape(-1)

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            if self.cols != other.rows:
                raise ValueError(f"shape mismatch {self.rows}x{self.cols} @ {other.rows}x{other.cols}")
            return SparseOperator(self.rows, other.cols, self.matrix @ other.matrix)
        return self.matrix @ other

    def transpose(self) -> "SparseOperator":
        return SparseOperator(self.cols, self.rows, self.matrix.T.tocsr())

    def todense(self) -> np.ndarray:
        return self.matrix.toarray()


def stencil_entries(in_hw, kernel_shape, anchor, strides, mode, rule):
    """Yield ``(out_pixel, in_pixel, a, b)`` for every tap contributing to every output pixel.

    Pixels are flat row-major spatial indices.  Scalar loops on purpose: this
    is the independent path against which the gather code is tested.
    """
    H, W = in_hw
    sy, sx = strides
    Ho, Wo = output_extent(H, sy, mode), output_extent(W, sx, mode)
    kh, kw = kernel_shape
    ar, ac = anchor

    def source(o, k, anc, s, n):
        if mode == "down":
            return map_index(o * s - k + anc, n, rule)
        t = o - k + anc
        if t % s:
            return None
        return map_index(t // s, n, rule)

    for io in range(Ho):
        for a in range(kh):
            sr = source(io, a, ar, sy, H)
            if sr is None:
                continue
            for jo in range(Wo):
                for b in range(kw):
                    sc = source(jo, b, ac, sx, W)
                    if sc is None:
                        continue
                    yield io * Wo + jo, sr * W + sc, a, b


def check_cap(rows: int, cols: int, cap: int) -> None:
    if rows * cols > cap:
        raise CapExceededError(
            f"operator {rows}x{cols} has {rows * cols} dense entries, exceeding cap {cap}; "
            f"required cap >= {rows * cols}"
        )


def convolution_matrix(kernel: Kernel, in_dims, strides=1, mode="down",
                       boundary=BoundaryRule.REPLICATE, cap: int = DEFAULT_CAP) -> SparseOperator:
    """Matrix of a per-channel (strided or transposed) convolution on ``in_dims = (H, W, C)``."""
    H, W, C = (int(d) for d in in_dims)
    sy, sx = _pair(strides)
    rule = BoundaryRule.parse(boundary)
    Ho, Wo = output_extent(H, sy, mode), output_extent(W, sx, mode)
    rows, cols = Ho * Wo * C, H * W * C
    check_cap(rows, cols, cap)
    if rule is BoundaryRule.REFLECT and (kernel.shape[0] > 2 * H or kernel.shape[1] > 2 * W):
        raise ValueError("kernel exceeds reflectable extent")
    r, c, v = [], [], []
    for po, pi, a, b in stencil_entries((H, W), kernel.shape, kernel.anchor, (sy, sx), mode, rule):
        tap = kernel.taps[a, b]
        if tap == 0.0:
            continue
        for ch in range(C):
            r.append(po * C + ch)
            c.append(pi * C + ch)
            v.append(tap)
    return SparseOperator(rows, cols, sp.coo_matrix((v, (r, c)), shape=(rows, cols)).tocsr())


def operator_matrix(spec: ResampleSpec, direction: str, in_dims, cap: int = DEFAULT_CAP) -> SparseOperator:
    """Explicit ``D`` (direction ``'down'``) or ``U`` (``'up'``) on tensors of ``in_dims``."""
    if direction == "down":
        _check_divisible(in_dims, spec.strides)
        return convolution_matrix(spec.blur, in_dims, spec.strides, "down", spec.boundary, cap)
    if direction == "up":
        return convolution_matrix(spec.interp, in_dims, spec.strides, "up", spec.boundary, cap)
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


def contraction_norm(D: SparseOperator, U: SparseOperator) -> float:
    """``||I - DU||_1``: maximum absolute column sum."""
    if D.rows != U.cols or D.cols != U.rows:
        raise ValueError(
            f"D is {D.rows}x{D.cols} and U is {U.rows}x{U.cols}; DU must be square on the coarse grid"
        )
    M = sp.identity(D.rows, format="csr") - D.matrix @ U.matrix
    return float(np.abs(M).sum(axis=0).max()) if D.rows else 0.0


# ---------------------------------------------------------------------------
# MGS1 text format


def save_operator(op: SparseOperator, path) -> None:
    lines = ["MGS1", f"{op.rows} {op.cols} {op.nnz}"]
    lines += [f"{r} {c} {v:.17g}" for r, c, v in op.entries]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def load_operator(path) -> SparseOperator:
    lines = Path(path).read_text().split("\n")
    if not lines or lines[0].strip() != "MGS1":
        raise ValueError(f"{path}: missing MGS1 header")
    try:
        rows, cols, nnz = (int(t) for t in lines[1].split())
    except (IndexError, ValueError):
        raise ValueError(f"{path}: malformed 'rows cols nnz' line") from None
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != nnz:
        raise ValueError(f"{path}: expected {nnz} entries, found {len(body)}")
    entries = []
    for ln in body:
        r, c, v = ln.split()
        entries.append((int(r), int(c), float(v)))
    if len({(r, c) for r, c, _ in entries}) != nnz:
        raise ValueError(f"{path}: duplicate (row, col) entries")
    return SparseOperator.from_entries(rows, cols, entries)
