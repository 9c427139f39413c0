"""Sequential convolutional network evaluator ``z_n = W_n x_{n-1} + b_n``, ``x_n = σ(z_n)``.

Linear layers are plain, strided or transposed convolutions sharing the
index conventions of :mod:`mgbp.tensor`; activations are restricted to
functions with ``σ(0) = 0`` so that the activation gain is always defined.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .resample import DEFAULT_CAP, SparseOperator, check_cap, stencil_entries
from .tensor import BoundaryRule, Kernel, _atomic_write, _tap_sources, as_tensor, output_extent

__all__ = [
    "Conv",
    "Activation",
    "ConvNet",
    "ForwardRecord",
    "forward",
    "layer_matrix",
    "load_network",
    "save_network",
    "toy_network",
    "identity_network",
    "ACTIVATIONS",
]

LINEAR_KINDS = ("conv", "strided-conv", "transposed-conv")
ACTIVATIONS = ("relu", "leaky-relu", "prelu", "identity")
MANIFEST_FORMAT = "mgbp-net/1"


@dataclass(frozen=True, eq=False)
class Conv:
    """Linear layer. ``weight`` has shape (out, in, kh, kw)."""

    weight: np.ndarray
    bias: np.ndarray
    kind: str = "conv"
    stride: int = 1
    anchor: tuple[int, int] | None = None
    boundary: BoundaryRule = BoundaryRule.ZERO

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 4 or w.size == 0:
            raise ValueError(f"conv weight must be (out, in, kh, kw), got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias has {b.size} entries for {w.shape[0]} output channels")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("conv parameters must be finite")
        if self.kind not in LINEAR_KINDS:
            raise ValueError(f"unknown linear layer kind {self.kind!r}")
        stride = int(self.stride)
        if stride < 1 or (self.kind == "conv" and stride != 1):
            raise ValueError(f"invalid stride {self.stride} for {self.kind}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "boundary", BoundaryRule.parse(self.boundary))
        kh, kw = w.shape[2:]
        anchor = self.anchor if self.anchor is not None else (kh // 2, kw // 2)
        object.__setattr__(self, "anchor", (int(anchor[0]), int(anchor[1])))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def mode(self) -> str:
        return "up" if self.kind == "transposed-conv" else "down"

    @property
    def footprint(self) -> Kernel:
        return Kernel(np.ones(self.weight.shape[2:]), anchor=self.anchor)

    def output_dims(self, in_dims) -> tuple[int, int, int]:
        h, w, c = in_dims
        if c != self.in_channels:
            raise ValueError(f"expects {self.in_channels} channels, got {c}")
        return output_extent(h, self.stride, self.mode), output_extent(w, self.stride, self.mode), self.out_channels

    def __eq__(self, other):
        if not isinstance(other, Conv):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.stride == other.stride
            and self.anchor == other.anchor
            and self.boundary == other.boundary
            and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass(frozen=True, eq=False)
class Activation:
    kind: str = "relu"
    alpha: float | tuple[float, ...] = 0.0

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r} (admitted: {', '.join(ACTIVATIONS)})")
        if self.kind == "prelu":
            object.__setattr__(self, "alpha", tuple(float(a) for a in np.atleast_1d(self.alpha)))
        else:
            object.__setattr__(self, "alpha", float(self.alpha))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return z.copy()
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        return np.where(z < 0, self._slope(z) * z, z)

    def gain(self, z: np.ndarray) -> np.ndarray:
        """``σ(z)/z`` elementwise, 1 where ``z == 0``."""
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "relu":
            return np.where(z < 0, 0.0, 1.0)
        return np.where(z < 0, self._slope(z), 1.0)

    def _slope(self, z):
        if self.kind == "prelu":
            a = np.asarray(self.alpha)
            if a.size not in (1, z.shape[2]):
                raise ValueError(f"prelu has {a.size} slopes for {z.shape[2]} channels")
            return a if a.size > 1 else a[0]
        return self.alpha

    def __eq__(self, other):
        if not isinstance(other, Activation):
            return NotImplemented
        return self.kind == other.kind and self.alpha == other.alpha


@dataclass(frozen=True)
class ConvNet:
    layers: tuple
    in_channels: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        c = self.in_channels
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if layer.in_channels != c:
                    raise ValueError(f"layer {i}: expects {layer.in_channels} input channels, previous gives {c}")
                c = layer.out_channels
            elif isinstance(layer, Activation):
                if layer.kind == "prelu" and len(layer.alpha) not in (1, c):
                    raise ValueError(f"layer {i}: prelu has {len(layer.alpha)} slopes for {c} channels")
            else:
                raise TypeError(f"layer {i}: unsupported layer type {type(layer).__name__}")

    @property
    def out_channels(self) -> int:
        c = self.in_channels
        for layer in self.layers:
            if isinstance(layer, Conv):
                c = layer.out_channels
        return c

    def dims_trace(self, in_dims) -> list[tuple[int, int, int]]:
        """Tensor dims entering each layer, plus the output dims as the last element."""
        dims = [tuple(in_dims)]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                try:
                    dims.append(layer.output_dims(dims[-1]))
                except ValueError as exc:
                    raise ValueError(f"layer {i}: {exc}") from None
            else:
                dims.append(dims[-1])
        return dims


@dataclass
class ForwardRecord:
    """Input (``z`` for activations) and output of every layer."""

    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    def pre_activations(self, net: ConvNet) -> dict[int, np.ndarray]:
        return {i: self.inputs[i] for i, layer in enumerate(net.layers) if isinstance(layer, Activation)}


def _conv_forward(layer: Conv, x: np.ndarray) -> np.ndarray:
    ho, wo, co = layer.output_dims(x.shape)
    out = np.zeros((ho, wo, co))
    wt = layer.weight
    # fixed tap order: identical summation order on every call
    for (a, b), patch in _tap_sources(x, layer.footprint, layer.stride, layer.mode, layer.boundary):
        out += patch @ wt[:, :, a, b].T
    return out + layer.bias


def forward(net: ConvNet, x, record: bool = False, gains: dict[int, np.ndarray] | None = None):
    """Evaluate ``net`` on ``x``.

    With ``gains`` (layer index -> gain tensor), activation layers are
    replaced by elementwise multiplication with the given gains: the
    activation-frozen network.  ``record=True`` returns ``(y, ForwardRecord)``.
    """
    x = as_tensor(x)
    if x.shape[2] != net.in_channels:
        raise ValueError(f"layer 0: input has {x.shape[2]} channels, network expects {net.in_channels}")
    rec = ForwardRecord() if record else None
    for i, layer in enumerate(net.layers):
        if rec is not None:
            rec.inputs.append(x)
        if isinstance(layer, Conv):
            if x.shape[2] != layer.in_channels:
                raise ValueError(f"layer {i}: expects {layer.in_channels} channels, got {x.shape[2]}")
            x = _conv_forward(layer, x)
        elif gains is not None:
            g = gains[i]
            if g.shape != x.shape:
                raise ValueError(f"layer {i}: gain dims {g.shape} do not match features {x.shape}")
            x = g * x
        else:
            x = layer(x)
        if rec is not None:
            rec.outputs.append(x)
    return (x, rec) if record else x


def layer_matrix(layer, in_dims, cap: int | None = DEFAULT_CAP) -> tuple[SparseOperator, np.ndarray]:
    """Explicit ``(W_n, b_n)`` of a linear layer acting on row-major vectorised inputs.

    ``cap`` bounds rows*cols; ``None`` disables the check.
    """
    if not isinstance(layer, Conv):
        raise ValueError("no matrix for nonlinear layer")
    h, w, cin = (int(d) for d in in_dims)
    ho, wo, cout = layer.output_dims((h, w, cin))
    rows, cols = ho * wo * cout, h * w * cin
    if cap is not None:
        check_cap(rows, cols, cap)
    st = np.array(
        list(stencil_entries((h, w), layer.weight.shape[2:], layer.anchor,
                             (layer.stride, layer.stride), layer.mode, layer.boundary)),
        dtype=np.int64,
    ).reshape(-1, 4)
    po, pi, a, b = st.T
    o = np.arange(cout)
    i = np.arange(cin)
    r = po[:, None, None] * cout + o[None, :, None]
    c = pi[:, None, None] * cin + i[None, None, :]
    v = layer.weight[:, :, a, b].transpose(2, 0, 1)
    r, c = np.broadcast_arrays(r, c)
    mat = sp.coo_matrix((v.ravel(), (r.ravel(), c.ravel())), shape=(rows, cols)).tocsr()
    return SparseOperator(rows, cols, mat), np.tile(layer.bias, ho * wo)


# ---------------------------------------------------------------------------
# manifest I/O


def save_network(net: ConvNet, path) -> None:
    """Write ``path`` (JSON manifest) and a companion ``.bin`` little-endian float64 blob."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    chunks, layers, offset = [], [], 0
    for layer in net.layers:
        if isinstance(layer, Conv):
            wbytes = layer.weight.astype("<f8").tobytes()
            bbytes = layer.bias.astype("<f8").tobytes()
            layers.append({
                "kind": layer.kind,
                "in_channels": layer.in_channels,
                "out_channels": layer.out_channels,
                "kernel_h": layer.weight.shape[2],
                "kernel_w": layer.weight.shape[3],
                "stride": layer.stride,
                "anchor": list(layer.anchor),
                "boundary": layer.boundary.value,
                "weight_offset": offset,
                "bias_offset": offset + len(wbytes),
            })
            chunks += [wbytes, bbytes]
            offset += len(wbytes) + len(bbytes)
        else:
            alpha = list(layer.alpha) if layer.kind == "prelu" else layer.alpha
            layers.append({"kind": "activation", "activation": layer.kind, "alpha": alpha})
    manifest = {
        "format": MANIFEST_FORMAT,
        "in_channels": net.in_channels,
        "weights": blob_path.name,
        "weights_bytes": offset,
        "layers": layers,
    }
    _atomic_write(blob_path, b"".join(chunks))
    _atomic_write(path, (json.dumps(manifest, indent=2) + "\n").encode())


def load_network(path) -> ConvNet:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unsupported manifest format {manifest.get('format')!r}")
    blob = (path.parent / manifest["weights"]).read_bytes()
    expected = 0
    for entry in manifest["layers"]:
        if entry["kind"] != "activation":
            n = entry["out_channels"] * entry["in_channels"] * entry["kernel_h"] * entry["kernel_w"]
            expected = max(expected, entry["bias_offset"] + 8 * entry["out_channels"], entry["weight_offset"] + 8 * n)
    if len(blob) != expected:
        raise ValueError(f"weights blob {manifest['weights']}: expected {expected} bytes, found {len(blob)}")
    layers = []
    for i, entry in enumerate(manifest["layers"]):
        kind = entry["kind"]
        if kind == "activation":
            name = entry.get("activation")
            if name not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {name!r}")
            layers.append(Activation(name, entry.get("alpha", 0.0)))
            continue
        if kind not in LINEAR_KINDS:
            raise ValueError(f"layer {i}: unknown layer kind {kind!r}")
        shape = (entry["out_channels"], entry["in_channels"], entry["kernel_h"], entry["kernel_w"])
        n = int(np.prod(shape))
        w = np.frombuffer(blob, dtype="<f8", count=n, offset=entry["weight_offset"]).reshape(shape)
        b = np.frombuffer(blob, dtype="<f8", count=shape[0], offset=entry["bias_offset"])
        layers.append(Conv(
            w.astype(np.float64), b.astype(np.float64), kind, entry.get("stride", 1),
            tuple(entry["anchor"]) if "anchor" in entry else None,
            entry.get("boundary", BoundaryRule.ZERO.value),
        ))
    return ConvNet(tuple(layers), manifest["in_channels"])


# ---------------------------------------------------------------------------
# toy networks


def identity_network(channels: int = 1) -> ConvNet:
    w = np.zeros((channels, channels, 1, 1))
    w[np.arange(channels), np.arange(channels)] = 1.0
    return ConvNet((Conv(w, np.zeros(channels)),), channels)


def toy_network(rng: np.random.Generator | int = 0, n_linear: int = 3, in_channels: int = 1,
                out_channels: int = 1, hidden: int = 4, kinds=None, activation: str = "relu",
                alpha: float = 0.1, bias: bool = True, scale: int = 2) -> ConvNet:
    """Random small network; ``kinds`` lists the linear layer kinds (random mix when None)."""
    rng = np.random.default_rng(rng)
    if kinds is None:
        # keep the overall resolution change within one factor of `scale`
        kinds, level = [], 0
        for _ in range(n_linear):
            allowed = [k for k, dl in zip(LINEAR_KINDS, (0, -1, 1)) if abs(level + dl) <= 1]
            kind = str(rng.choice(allowed))
            level += {"conv": 0, "strided-conv": -1, "transposed-conv": 1}[kind]
            kinds.append(kind)
    layers = []
    c = in_channels
    for n, kind in enumerate(kinds):
        co = out_channels if n == len(kinds) - 1 else hidden
        k = 3 if kind != "transposed-conv" else 2 * scale - 1
        stride = 1 if kind == "conv" else scale
        w = rng.normal(0.0, 1.0 / np.sqrt(c * k * k), size=(co, c, k, k))
        b = rng.normal(0.0, 0.1, size=co) if bias else np.zeros(co)
        layers.append(Conv(w, b, kind, stride))
        if n < len(kinds) - 1:
            act_alpha = tuple(rng.uniform(0.05, 0.3, size=co)) if activation == "prelu" else alpha
            layers.append(Activation(activation, act_alpha))
        c = co
    return ConvNet(tuple(layers), in_channels)
