"""Iterative back-projection and its multigrid recursion.

Level indices are 1-based as in the algorithm: ``Y_1`` is the input, level
``k`` has ``s**(k-1)`` times its resolution.  Python lists holding levels are
0-based, so ``ys[k - 1]`` is ``Y_k``.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .resample import (
    ResampleSpec,
    contraction_norm,
    downscale,
    multi_level_downscale,
    operator_matrix,
    upscale,
)
from .tensor import _atomic_write, as_tensor

__all__ = [
    "ConvergenceTrace",
    "TraceRecord",
    "LevelStack",
    "OperatorPair",
    "classic_operators",
    "network_operators",
    "ibp",
    "mgbp",
    "bp_step",
    "mgbp_generic",
    "mismatch_error",
    "unfold_schedule",
    "invocation_counts",
    "format_schedule",
    "certify",
]

RATIO_FLOOR = 1e-300


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    level: int
    error_l1: float
    ratio: float | None


@dataclass
class ConvergenceTrace:
    records: list[TraceRecord] = field(default_factory=list)
    contraction_norm: float | None = None

    def add(self, iteration: int, level: int, error_l1: float) -> None:
        if not (np.isfinite(error_l1) and error_l1 >= 0):
            raise ValueError(f"mismatch norm must be finite and non-negative, got {error_l1}")
        prev = next((r for r in reversed(self.records) if r.level == level), None)
        ratio = None
        if prev is not None and prev.error_l1 > RATIO_FLOOR:
            ratio = error_l1 / prev.error_l1
        self.records.append(TraceRecord(iteration, level, float(error_l1), ratio))

    def errors(self, level: int | None = None) -> list[float]:
        return [r.error_l1 for r in self.records if level is None or r.level == level]

    def ratios(self, level: int | None = None) -> list[float]:
        return [r.ratio for r in self.records if r.ratio is not None and (level is None or r.level == level)]

    def level_errors(self) -> dict[int, float]:
        """Last recorded error per level (the outer-level mismatch sequence for MGBP)."""
        out = {}
        for r in self.records:
            out[r.level] = r.error_l1
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "level", "error_l1", "ratio"])
        for r in self.records:
            w.writerow([r.iteration, r.level, f"{r.error_l1:.17g}", "" if r.ratio is None else f"{r.ratio:.17g}"])
        text = buf.getvalue()
        if path is not None:
            _atomic_write(Path(path), text.encode())
        return text


@dataclass
class LevelStack:
    """``Y_1 ... Y_L``; ``images[k - 1]`` is level ``k``."""

    images: list[np.ndarray]
    strides: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.images:
            raise ValueError("a level stack needs at least one image")
        h, w, c = self.images[0].shape
        strides = self.strides
        if strides is None and len(self.images) > 1:
            h2, w2 = self.images[1].shape[:2]
            strides = (h2 // h, w2 // w)
        if strides is not None:
            sy, sx = strides
            for k, y in enumerate(self.images, start=1):
                want = (h * sy ** (k - 1), w * sx ** (k - 1), c)
                if y.shape != want:
                    raise ValueError(f"level {k} has dims {y.shape}, expected {want}")

    def level(self, k: int) -> np.ndarray:
        if not 1 <= k <= len(self.images):
            raise IndexError(f"level {k} outside 1..{len(self.images)}")
        return self.images[k - 1]

    @property
    def top(self) -> np.ndarray:
        return self.images[-1]

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class OperatorPair:
    """Down operator ``u -> (u*g)↓s`` and correction ``(Y, d) -> (Y - d)↑s*p`` or a network stand-in."""

    down: Callable[[np.ndarray], np.ndarray]
    up: Callable[[np.ndarray, np.ndarray], np.ndarray]
    tag: str = "classic-subtract"


def classic_operators(spec: ResampleSpec) -> OperatorPair:
    return OperatorPair(
        down=lambda u: downscale(u, spec),
        up=lambda y, d: upscale(y - d, spec),
        tag="classic-subtract",
    )


def network_operators(down_net, up_net, level: int | None = None) -> OperatorPair:
    """Downscale/Upscale modules; the up module consumes the concatenation ``[Y, d]``."""
    from .convnet import forward

    where = "" if level is None else f" at level {level}"

    def up(y, d):
        if y.shape != d.shape:
            raise ValueError(f"cannot concatenate Y {y.shape} with d {d.shape}{where}")
        if up_net.in_channels != y.shape[2] + d.shape[2]:
            raise ValueError(
                f"up-module layer 0{where} expects {up_net.in_channels} input features, "
                f"concatenation gives {y.shape[2]}+{d.shape[2]}"
            )
        return forward(up_net, np.concatenate([y, d], axis=2))

    return OperatorPair(down=lambda u: forward(down_net, u), up=up, tag="network-concat")


def _pair_for(ops, k: int) -> OperatorPair:
    if isinstance(ops, OperatorPair):
        return ops
    try:
        return ops[k]
    except (KeyError, IndexError):
        raise ValueError(f"no operator pair supplied for level {k}") from None


# ---------------------------------------------------------------------------


def mismatch_error(x, y, spec: ResampleSpec, levels: int) -> float:
    """``||x - D^L y||_1``."""
    x = as_tensor(x)
    dy = multi_level_downscale(y, spec, levels)
    if dy.shape != x.shape:
        raise ValueError(f"D^{levels} y has dims {dy.shape} but x has {x.shape}")
    return float(np.abs(x - dy).sum())


def certify(spec: ResampleSpec, coarse_dims) -> float:
    """``||I - DU||_1`` for operators on the given coarse grid."""
    h, w, c = coarse_dims
    sy, sx = spec.strides
    D = operator_matrix(spec, "down", (h * sy, w * sx, c))
    U = operator_matrix(spec, "up", (h, w, c))
    return contraction_norm(D, U)


def ibp(x, spec: ResampleSpec, iters: int, y0=None, certified: bool = False):
    """Classic back-projection ``y <- y + U(x - D y)``.

    Returns ``(y, trace)``; the trace holds ``||x - D y_t||_1`` for
    ``t = 0..iters`` at level 2.  ``certified=True`` also stores
    ``||I - DU||_1`` for the operators on ``x``'s grid.
    """
    x = as_tensor(x)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    y = upscale(x, spec) if y0 is None else as_tensor(y0)
    sy, sx = spec.strides
    want = (x.shape[0] * sy, x.shape[1] * sx, x.shape[2])
    if y.shape != want:
        raise ValueError(f"y0 has dims {y.shape}, expected {want} for x {x.shape} at scale {spec.scale}")
    trace = ConvergenceTrace(contraction_norm=certify(spec, x.shape) if certified else None)
    e = x - downscale(y, spec)
    trace.add(0, 2, np.abs(e).sum())
    for t in range(1, iters + 1):
        y = y + upscale(e, spec)
        e = x - downscale(y, spec)
        trace.add(t, 2, np.abs(e).sum())
    return y, trace


def bp_step(u, k: int, mu: int, ys: Sequence[np.ndarray], ops, log: list | None = None,
            on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Recursive back-projection ``BP^mu_k(u, Y_1..Y_{k-1})``.

    ``ops`` is one :class:`OperatorPair` for every level or a mapping from
    level ``k`` to the pair used at that level.  ``log`` (if given) receives
    ``(level, action)`` tuples: ``'bp'`` on entry, then ``'downscale'`` /
    ``'correct'`` around each recursive step.
    """
    if k < 1:
        raise ValueError("level index k must be >= 1")
    if log is not None:
        log.append((k, "bp"))
    if k == 1:
        return u
    if len(ys) < k - 1:
        raise ValueError(f"level {k} needs Y_1..Y_{k - 1} but the stack has depth {len(ys)}")
    pair = _pair_for(ops, k)
    for step in range(1, mu + 1):
        if log is not None:
            log.append((k - 1, "downscale"))
        d = bp_step(pair.down(u), k - 1, mu, ys, ops, log)
        if log is not None:
            log.append((k, "correct"))
        u = u + pair.up(ys[k - 2], d)
        if on_step is not None:
            on_step(step, u)
    return u


def mgbp(x, spec: ResampleSpec, mu: int, levels: int, log: list | None = None):
    """Multi-grid back-projection; returns ``(LevelStack, ConvergenceTrace)``.

    The trace records, for each outer level ``k``, the full mismatch
    ``||x - D^(k-1) u||_1`` after the classic upscale (iteration 0) and after
    every top-level correction step.
    """
    if mu < 0 or levels < 1:
        raise ValueError("need mu >= 0 and L >= 1")
    x = as_tensor(x)
    ops = classic_operators(spec)
    trace = ConvergenceTrace()
    ys = [x]
    for k in range(2, levels + 1):
        if log is not None:
            log.append((k, "upscale"))
        u = upscale(ys[-1], spec)
        trace.add(0, k, mismatch_error(x, u, spec, k - 1))
        u = bp_step(u, k, mu, ys, ops, log,
                    on_step=lambda t, v, k=k: trace.add(t, k, mismatch_error(x, v, spec, k - 1)))
        ys.append(u)
    return LevelStack(ys, spec.strides), trace


def _as_module(m):
    if m is None:
        return lambda t: t
    if callable(m):
        return m
    from .convnet import ConvNet, forward

    if isinstance(m, ConvNet):
        return lambda t: forward(m, t)
    raise TypeError(f"expected a ConvNet, callable or None, got {type(m).__name__}")


def mgbp_generic(x, ops, analysis=None, synthesis=None, mu: int = 2, levels: int = 2,
                 image_spec: ResampleSpec | None = None, log: list | None = None) -> LevelStack:
    """The recursion with pluggable operators, run in a latent space.

    ``analysis``/``synthesis`` map images to features and back (``None`` is
    the identity).  The outer upscale of level ``k`` is ``up(Y_{k-1}, 0)``,
    which for classic operators is exactly ``(Y_{k-1}↑s)*p``.  Without
    ``image_spec`` the returned levels are ``synthesis(Y_k)``.  With it, the
    output is residual: ``I_1 = x`` and
    ``I_k = upscale(I_{k-1}, image_spec) + synthesis(Y_k)``.
    """
    if mu < 0 or levels < 1:
        raise ValueError("need mu >= 0 and L >= 1")
    x = as_tensor(x)
    enc, dec = _as_module(analysis), _as_module(synthesis)
    ys = [as_tensor(enc(x))]
    for k in range(2, levels + 1):
        if log is not None:
            log.append((k, "upscale"))
        prev = ys[-1]
        u = _pair_for(ops, k).up(prev, np.zeros_like(prev))
        ys.append(bp_step(u, k, mu, ys, ops, log))
    if image_spec is None:
        return LevelStack([as_tensor(dec(y)) for y in ys])
    images = [x]
    for y in ys[1:]:
        images.append(upscale(images[-1], image_spec) + as_tensor(dec(y)))
    return LevelStack(images)


# ---------------------------------------------------------------------------
# schedule


def unfold_schedule(mu: int, levels: int) -> list[tuple[int, str]]:
    """Traversal of levels produced by the recursion (V-cycle for mu=1, W-cycle for mu=2)."""
    if mu < 0 or levels < 1:
        raise ValueError("need mu >= 0 and L >= 1")
    out: list[tuple[int, str]] = []

    def visit(k):
        if k <= 1:
            return
        for _ in range(mu):
            out.append((k - 1, "downscale"))
            visit(k - 1)
            out.append((k, "correct"))

    for k in range(2, levels + 1):
        out.append((k, "upscale"))
        visit(k)
    return out


def invocation_counts(log: Sequence[tuple[int, str]]) -> dict[int, dict[int, int]]:
    """``{k: {j: number of BP calls at level j while computing Y_k}}`` from an instrumented log."""
    counts: dict[int, Counter] = {}
    current = None
    for level, action in log:
        if action == "upscale":
            current = counts.setdefault(level, Counter())
        elif action == "bp" and current is not None:
            current[level] += 1
    return {k: dict(c) for k, c in counts.items()}


def format_schedule(schedule: Sequence[tuple[int, str]]) -> str:
    return "".join(f"{level} {action}\n" for level, action in schedule)
