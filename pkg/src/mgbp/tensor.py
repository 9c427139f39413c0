"""Image/feature containers, boundary-aware convolution and file I/O.

Tensors are plain ``float64`` numpy arrays of shape ``(height, width,
channels)``.  Every spatial operator in the package (blur, decimation,
zero-insertion upsampling, network convolutions) is built on the gather
primitive :func:`_tap_sources`, so the tensor-domain operations and the
explicit matrices in :mod:`mgbp.resample` agree on index conventions.

Convolution convention: for a kernel with taps ``k`` and anchor ``(ar, ac)``::

    out[i, j] = sum_{a, b} k[a, b] * x[i - a + ar, j - b + ac]

i.e. a true convolution in which the anchor tap multiplies the co-located
input sample.
"""

from __future__ import annotations

import enum
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "BoundaryRule",
    "Kernel",
    "as_tensor",
    "convolve",
    "strided_convolve",
    "transposed_convolve",
    "vectorize",
    "devectorize",
    "delta",
    "read_image",
    "write_image",
    "read_raw",
    "write_raw",
    "load_tensor",
    "save_tensor",
    "ImageFormatError",
]


class ImageFormatError(ValueError):
    """Malformed or unsupported image / raw tensor file."""


class BoundaryRule(str, enum.Enum):
    REPLICATE = "replicate-edge"
    REFLECT = "reflect"
    ZERO = "zero-pad"

    @classmethod
    def parse(cls, value: "BoundaryRule | str") -> "BoundaryRule":
        if isinstance(value, cls):
            return value
        aliases = {"replicate": cls.REPLICATE, "zero": cls.ZERO, "edge": cls.REPLICATE}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            names = ", ".join(r.value for r in cls)
            raise ValueError(f"unknown boundary rule {value!r} (expected one of: {names})") from None


@dataclass(frozen=True)
class Kernel:
    """2D filter taps plus the anchor tap aligned with the output pixel.

    ``anchor`` defaults to the centre tap.  ``normalized`` is a declaration
    checked by the consumer: blur kernels should sum to 1, interpolation
    kernels should have unit polyphase sums (see :meth:`polyphase_sums`).
    """

    taps: np.ndarray
    anchor: tuple[int, int] | None = None
    normalized: bool = False

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim == 1:
            taps = taps[None, :]
        if taps.ndim != 2 or taps.size == 0:
            raise ValueError("kernel taps must be a non-empty 2D array")
        if not np.all(np.isfinite(taps)):
            raise ValueError("kernel taps must be finite")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)
        anchor = self.anchor
        if anchor is None:
            anchor = (taps.shape[0] // 2, taps.shape[1] // 2)
        anchor = (int(anchor[0]), int(anchor[1]))
        object.__setattr__(self, "anchor", anchor)

    @property
    def shape(self) -> tuple[int, int]:
        return self.taps.shape

    def polyphase_sums(self, scale: int | tuple[int, int]) -> np.ndarray:
        """Sum of taps in each residue class of (tap - anchor) mod scale."""
        sy, sx = _pair(scale)
        sums = np.zeros((sy, sx))
        kh, kw = self.taps.shape
        for a in range(kh):
            for b in range(kw):
                sums[(a - self.anchor[0]) % sy, (b - self.anchor[1]) % sx] += self.taps[a, b]
        return sums

    def __eq__(self, other):
        if not isinstance(other, Kernel):
            return NotImplemented
        return (
            self.anchor == other.anchor
            and self.normalized == other.normalized
            and np.array_equal(self.taps, other.taps)
        )

    def __hash__(self):
        return hash((self.taps.tobytes(), self.taps.shape, self.anchor, self.normalized))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a finite float64 ``(H, W, C)`` array (2D input gains C=1)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected an (H, W, C) tensor with positive dims, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite samples")
    return arr


# ---------------------------------------------------------------------------
# boundary handling


def map_index(i: int, n: int, rule: BoundaryRule) -> int | None:
    """Scalar boundary map; ``None`` means the sample is an implicit zero."""
    if 0 <= i < n:
        return i
    if rule is BoundaryRule.ZERO:
        return None
    if rule is BoundaryRule.REPLICATE:
        return 0 if i < 0 else n - 1
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return i if i < n else period - i


def map_indices(idx: np.ndarray, n: int, rule: BoundaryRule) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`map_index`: returns (source index, valid mask)."""
    idx = np.asarray(idx, dtype=np.int64)
    inside = (idx >= 0) & (idx < n)
    if rule is BoundaryRule.ZERO:
        return np.where(inside, idx, 0), inside
    if rule is BoundaryRule.REPLICATE:
        return np.clip(idx, 0, n - 1), np.ones_like(inside)
    if n == 1:
        return np.zeros_like(idx), np.ones_like(inside)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m), np.ones_like(inside)


def _check_reflect(kernel: Kernel, in_hw: tuple[int, int], rule: BoundaryRule) -> None:
    if rule is BoundaryRule.REFLECT:
        kh, kw = kernel.shape
        if kh > 2 * in_hw[0] or kw > 2 * in_hw[1]:
            raise ValueError(
                f"kernel exceeds reflectable extent: kernel {kh}x{kw} vs image {in_hw[0]}x{in_hw[1]}"
            )


def output_extent(n_in: int, stride: int, mode: str) -> int:
    if mode == "down":
        return -(-n_in // stride)
    return n_in * stride


def _axis_sources(n_in, k, anchor, stride, mode, rule):
    """Per-tap (source index, valid) along one axis.

    ``mode='down'``: convolution sampled at output positions ``stride * i``.
    ``mode='up'``: zero insertion by ``stride`` then convolution; the
    boundary rule extends the coarse signal before zeros are inserted.
    """
    n_out = output_extent(n_in, stride, mode)
    pos = np.arange(n_out)
    out = []
    for a in range(k):
        if mode == "down":
            idx, valid = map_indices(pos * stride - a + anchor, n_in, rule)
        else:
            t = pos - a + anchor
            idx, valid = map_indices(t // stride, n_in, rule)
            valid = valid & (t % stride == 0)
        out.append((idx, valid))
    return out


def _tap_sources(x, kernel, stride, mode, rule):
    """Yield ``((a, b), gathered)`` with ``gathered`` the masked source samples for tap (a, b)."""
    sy, sx = _pair(stride)
    H, W = x.shape[:2]
    _check_reflect(kernel, (H, W), rule)
    kh, kw = kernel.shape
    rows = _axis_sources(H, kh, kernel.anchor[0], sy, mode, rule)
    cols = _axis_sources(W, kw, kernel.anchor[1], sx, mode, rule)
    for a, (ri, rv) in enumerate(rows):
        if not rv.any():
            continue
        xr = x[ri]
        for b, (ci, cv) in enumerate(cols):
            if not cv.any():
                continue
            patch = xr[:, ci]
            mask = rv[:, None] & cv[None, :]
            if not mask.all():
                patch = np.where(mask[:, :, None], patch, 0.0)
            yield (a, b), patch


def _apply(x, kernel, stride, mode, rule):
    x = as_tensor(x)
    rule = BoundaryRule.parse(rule)
    sy, sx = _pair(stride)
    out = np.zeros(
        (output_extent(x.shape[0], sy, mode), output_extent(x.shape[1], sx, mode), x.shape[2])
    )
    for (a, b), patch in _tap_sources(x, kernel, stride, mode, rule):
        tap = kernel.taps[a, b]
        if tap != 0.0:
            out += tap * patch
    return out


def convolve(x, kernel: Kernel, boundary: BoundaryRule | str = BoundaryRule.REPLICATE) -> np.ndarray:
    """Per-channel 2D convolution; output has the same dims as ``x``."""
    return _apply(x, kernel, 1, "down", boundary)


def strided_convolve(x, kernel: Kernel, stride, boundary=BoundaryRule.REPLICATE) -> np.ndarray:
    """Convolution evaluated only at sampling phase (0, 0) of a ``stride`` grid."""
    return _apply(x, kernel, stride, "down", boundary)


def transposed_convolve(x, kernel: Kernel, stride, boundary=BoundaryRule.REPLICATE) -> np.ndarray:
    """Zero insertion by ``stride`` followed by convolution (output dims ``H*s, W*s``)."""
    return _apply(x, kernel, stride, "up", boundary)


# ---------------------------------------------------------------------------
# vectorisation


def vectorize(x) -> np.ndarray:
    """Row-major (row, column, channel) flattening."""
    return as_tensor(x).reshape(-1).copy()


def devectorize(v, dims) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    h, w, c = (int(d) for d in dims)
    if v.size != h * w * c:
        raise ValueError(f"vector length {v.size} does not match dims {h}x{w}x{c} = {h * w * c}")
    return v.reshape(h, w, c).copy()


def delta(height: int, width: int, channels: int, at: tuple[int, int, int]) -> np.ndarray:
    r, c, ch = at
    if not (0 <= r < height and 0 <= c < width and 0 <= ch < channels):
        raise ValueError(f"delta position {tuple(at)} out of bounds for dims {height}x{width}x{channels}")
    t = np.zeros((height, width, channels))
    t[r, c, ch] = 1.0
    return t


# ---------------------------------------------------------------------------
# file I/O

_RAW_MAGIC = b"MGT1"


def _quantize(t: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"magic: unsupported PNM type {magic!r} (expected P5 or P6)")
    fields = []
    pos = 2
    names = ("width", "height", "maxval")
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{names[len(fields)]}: missing or malformed header field")
        fields.append(int(data[start:pos]))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"width/height: non-positive image size {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"maxval: unsupported bit depth (maxval {maxval}, expected 255)")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    pixels = data[pos : pos + need]
    if len(pixels) != need:
        raise ImageFormatError(f"pixel data: expected {need} bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, channels)


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PGM/PPM into a [0, 1] tensor."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6", b"P2", b"P3"):
        arr = _read_pnm(data)
    else:
        from PIL import Image, UnidentifiedImageError

        try:
            img = Image.open(path)
            img.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
        if img.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
            raise ImageFormatError(f"bit depth: unsupported mode {img.mode!r} (8-bit only)")
        if img.mode not in ("L", "RGB"):
            raise ImageFormatError(f"mode: unsupported {img.mode!r} (expected 8-bit L or RGB)")
        arr = np.asarray(img, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def write_image(t, path) -> None:
    """Write a 1- or 3-channel tensor as 8-bit PNG / PGM / PPM (by extension)."""
    t = as_tensor(t)
    path = Path(path)
    if t.shape[2] not in (1, 3):
        raise ValueError(f"cannot write {t.shape[2]}-channel tensor as an image (1 or 3 required)")
    q = _quantize(t)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        magic = b"P5" if q.shape[2] == 1 else b"P6"
        header = b"%s\n%d %d\n255\n" % (magic, q.shape[1], q.shape[0])
        _atomic_write(path, header + q.tobytes())
        return
    import io

    from PIL import Image

    img = Image.fromarray(q[:, :, 0] if q.shape[2] == 1 else q, mode="L" if q.shape[2] == 1 else "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def write_raw(t, path) -> None:
    t = as_tensor(t)
    h, w, c = t.shape
    payload = _RAW_MAGIC + struct.pack("<3I", h, w, c) + t.astype("<f8").tobytes()
    _atomic_write(Path(path), payload)


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _RAW_MAGIC:
        raise ImageFormatError(f"header: expected {_RAW_MAGIC!r}, found {data[:4]!r}")
    if len(data) < 16:
        raise ImageFormatError("dims: truncated header")
    h, w, c = struct.unpack("<3I", data[4:16])
    need = 8 * h * w * c
    if len(data) - 16 != need:
        raise ImageFormatError(f"samples: expected {need} bytes, found {len(data) - 16}")
    return np.frombuffer(data[16:], dtype="<f8").astype(np.float64).reshape(h, w, c)


def load_tensor(path) -> np.ndarray:
    """Read by extension: ``.mgt`` raw tensors, anything else as an image."""
    if Path(path).suffix.lower() == ".mgt":
        return read_raw(path)
    return read_image(path)


def save_tensor(t, path) -> None:
    if Path(path).suffix.lower() == ".mgt":
        write_raw(t, path)
    else:
        write_image(t, path)
