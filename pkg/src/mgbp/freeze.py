"""Activation freezing: a network becomes an exact affine map ``y = F x + R`` for one input.

Run the network on ``X``, record each activation's gain ``σ(z)/z``, then
replace every activation by multiplication with its recorded gain.  The
frozen system reproduces the network output on ``X`` and is affine in its
input, so its impulse responses (effective filters) and its response to a
zero input (effective residual) describe the network completely at ``X``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .convnet import Activation, Conv, ConvNet, forward, layer_matrix
from .resample import CapExceededError
from .tensor import _atomic_write, as_tensor, delta, devectorize, vectorize, write_image, write_raw

__all__ = [
    "FrozenSystem",
    "activation_gain",
    "freeze",
    "effective_residual",
    "effective_filter",
    "explicit_fr",
    "freeze_equivalence",
    "filter_spectrum",
    "filter_atlas",
    "normalize_for_display",
]

DENSE_CAP = 4096


def activation_gain(kind, z) -> np.ndarray:
    """Gain of an activation (an :class:`Activation` or its name) on pre-activations ``z``."""
    act = kind if isinstance(kind, Activation) else Activation(kind)
    return act.gain(np.asarray(z, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class FrozenSystem:
    net: ConvNet
    gains: dict
    in_dims: tuple[int, int, int]
    residual: np.ndarray

    def __call__(self, u) -> np.ndarray:
        u = as_tensor(u)
        if u.shape != self.in_dims:
            raise ValueError(f"frozen system built for dims {self.in_dims}, got {u.shape}")
        return forward(self.net, u, gains=self.gains)

    @property
    def out_dims(self) -> tuple[int, int, int]:
        return self.residual.shape

    def matrices(self, cap: int = DENSE_CAP):
        return _frozen_matrices(self.net, self.gains, self.in_dims, cap)


def freeze(net: ConvNet, X) -> FrozenSystem:
    X = as_tensor(X)
    _, rec = forward(net, X, record=True)
    gains = {i: layer.gain(rec.inputs[i]) for i, layer in enumerate(net.layers) if isinstance(layer, Activation)}
    residual = forward(net, np.zeros_like(X), gains=gains)
    residual.setflags(write=False)
    return FrozenSystem(net, gains, X.shape, residual)


def effective_residual(system: FrozenSystem) -> np.ndarray:
    return system.residual.copy()


def effective_filter(system: FrozenSystem, pixel, view: str = "column") -> np.ndarray:
    """Effective filter for ``pixel = (row, col, ch)``.

    ``view='column'``: impulse response, i.e. the output map produced by a
    unit impulse at input ``pixel`` (minus the residual).  ``view='row'``:
    the weights every input pixel contributes to output ``pixel``, shaped
    like the input (needs the dense matrix, so it is size-capped).
    """
    if view == "column":
        h, w, c = system.in_dims
        return system(delta(h, w, c, tuple(pixel))) - system.residual
    if view == "row":
        h, w, c = system.out_dims
        r, col, ch = pixel
        if not (0 <= r < h and 0 <= col < w and 0 <= ch < c):
            raise ValueError(f"output pixel {tuple(pixel)} out of bounds for dims {h}x{w}x{c}")
        F, _ = system.matrices()
        return devectorize(F[(r * w + col) * c + ch], system.in_dims)
    raise ValueError(f"view must be 'column' or 'row', got {view!r}")


def _affine_stages(net: ConvNet, gains, in_dims, cap):
    """``[(Ŵ_n, b̂_n)]`` with each activation's gain folded into the preceding linear layer."""
    stages = []
    dims = tuple(in_dims)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv):
            W, b = layer_matrix(layer, dims, cap=None)
            stages.append([W.matrix, b])
            dims = layer.output_dims(dims)
        else:
            g = gains[i].reshape(-1)
            G = sp.diags(g)
            if stages:
                stages[-1][0] = (G @ stages[-1][0]).tocsr()
                stages[-1][1] = g * stages[-1][1]
            else:
                stages.append([G.tocsr(), np.zeros(g.size)])
    return stages, dims


def _frozen_matrices(net, gains, in_dims, cap):
    n_in = int(np.prod(in_dims))
    out_dims = net.dims_trace(in_dims)[-1]
    n_out = int(np.prod(out_dims))
    if n_in > cap or n_out > cap:
        raise CapExceededError(f"dense F would be {n_out}x{n_in}; input/output vectors must be <= {cap} entries")
    stages, _ = _affine_stages(net, gains, in_dims, cap)
    n = len(stages)
    if n == 0:
        return np.eye(n_in), np.zeros(n_in)
    W = [None] + [s[0] for s in stages]  # 1-based: W[k] is Ŵ_k
    b = [None] + [s[1] for s in stages]
    # Q_0 = I, Q_i = Ŵ_n Ŵ_{n-1} ... Ŵ_{n-i+1};  R = sum_{k=0}^{n-1} Q_k b̂_{n-k}
    R = b[n].copy()
    for k in range(1, n):
        v = b[n - k]
        for j in range(n - k + 1, n + 1):
            v = W[j] @ v
        R = R + v
    Q = W[n]
    for j in range(n - 1, 0, -1):
        Q = Q @ W[j]
    F = Q.toarray() if sp.issparse(Q) else np.asarray(Q)
    return F, R


def explicit_fr(net: ConvNet, X, cap: int = DENSE_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Dense effective filter ``F`` and residual vector ``R`` from the closed-form products."""
    system = freeze(net, X)
    return _frozen_matrices(net, system.gains, system.in_dims, cap)


def freeze_equivalence(net: ConvNet, X) -> float:
    """``max |forward(X) - frozen(X)|``."""
    X = as_tensor(X)
    system = freeze(net, X)
    return float(np.max(np.abs(forward(net, X) - system(X))))


def filter_spectrum(filt) -> np.ndarray:
    """Centred 2D DFT magnitude of a single-channel filter map (DC at ``(H//2, W//2)``)."""
    f = np.asarray(filt, dtype=np.float64)
    if f.ndim == 3:
        if f.shape[2] != 1:
            raise ValueError(f"filter has {f.shape[2]} channels; select one channel first")
        f = f[:, :, 0]
    if f.ndim != 2:
        raise ValueError(f"expected a 2D filter map, got shape {f.shape}")
    return np.abs(np.fft.fftshift(np.fft.fft2(f)))[:, :, None]


# ---------------------------------------------------------------------------
# atlas rendering


def normalize_for_display(t: np.ndarray, mode: str = "minmax") -> tuple[np.ndarray, float, float]:
    """Affine map to [0, 1]; returns ``(image, lo, hi)`` with ``t = lo + image * (hi - lo)``."""
    if mode == "minmax":
        lo, hi = float(t.min()), float(t.max())
    elif mode == "symmetric":
        m = float(np.abs(t).max())
        lo, hi = -m, m
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    if hi == lo:
        return np.zeros_like(t), lo, hi
    return (t - lo) / (hi - lo), lo, hi


def _displayable(t: np.ndarray) -> np.ndarray:
    if t.shape[2] in (1, 3):
        return t
    # side-by-side channel tiles
    return np.concatenate([t[:, :, c : c + 1] for c in range(t.shape[2])], axis=1)


def filter_atlas(system: FrozenSystem, pixels, out_dir, normalization: str = "minmax",
                 spectrum: bool = False, view: str = "column", raw: bool = False) -> list[dict]:
    """Write one image per queried pixel plus ``residual.png`` and an ``atlas.txt`` sidecar.

    Sidecar lines are ``row col ch min max`` per filter and ``residual min
    max`` for the residual; each image maps ``[min, max]`` affinely to
    ``[0, 1]``.  With ``spectrum=True`` every filter also gets a
    ``spectrum_*.png`` (channel 0) with ranges in ``spectrum.txt``.
    Returns one dict per written image.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, lines, spec_lines = [], [], []
    for pixel in pixels:
        r, c, ch = (int(v) for v in pixel)
        filt = effective_filter(system, (r, c, ch), view=view)
        img, lo, hi = normalize_for_display(filt, normalization)
        name = f"filter_r{r}_c{c}_ch{ch}"
        write_image(_displayable(img), out / f"{name}.png")
        if raw:
            write_raw(filt, out / f"{name}.mgt")
        lines.append(f"{r} {c} {ch} {lo:.17g} {hi:.17g}")
        entries.append({"pixel": (r, c, ch), "path": out / f"{name}.png", "min": lo, "max": hi, "image": img})
        if spectrum:
            mag = filter_spectrum(filt[:, :, :1])
            simg, slo, shi = normalize_for_display(mag, "minmax")
            write_image(simg, out / f"spectrum_r{r}_c{c}_ch{ch}.png")
            spec_lines.append(f"{r} {c} {ch} {slo:.17g} {shi:.17g}")
    res = system.residual
    img, lo, hi = normalize_for_display(res, normalization)
    write_image(_displayable(img), out / "residual.png")
    if raw:
        write_raw(res, out / "residual.mgt")
    lines.append(f"residual {lo:.17g} {hi:.17g}")
    entries.append({"pixel": None, "path": out / "residual.png", "min": lo, "max": hi, "image": img})
    _atomic_write(out / "atlas.txt", ("\n".join(lines) + "\n").encode())
    if spectrum:
        _atomic_write(out / "spectrum.txt", ("\n".join(spec_lines) + ("\n" if spec_lines else "")).encode())
    return entries
