"""Dense feature maps, reference 2-D convolution, and sparse block convolution.

A feature map is a plain ``(channels, height, width)`` float32 ndarray.
Convolution uses zero padding, odd square kernels, and charges
``2 k^2 C_in C_out H_out W_out`` FLOPs (one multiply plus one add per
kernel element) to the caller's ledger.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .ledger import FlopsLedger

FeatureMap = np.ndarray  # (C, H, W) float32


def ensure_feature_map(x, channels: int | None = None, name: str = "input") -> np.ndarray:
    """Validate and return ``x`` as a finite (C, H, W) float32 array."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3-D (channels, height, width), got shape {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ValueError(f"{name} has {arr.shape[0]} channels, expected {channels}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    """Convolution layer definition: weights (C_out, C_in, k, k), optional
    per-output-channel bias, stride, and zero padding."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"weights must be (C_out, C_in, k, k), got shape {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        if not np.isfinite(w).all():
            raise ValueError("weights contain non-finite values")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float32)
            if b.shape != (w.shape[0],):
                raise ValueError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
            if not np.isfinite(b).all():
                raise ValueError("bias contains non-finite values")
            b = b.copy()
            b.flags.writeable = False
            object.__setattr__(self, "bias", b)
        if int(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if int(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "padding", int(self.padding))

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def block_size(self) -> int:
        """Elements in one receptive field: k^2 * C_in."""
        return self.kernel_size * self.kernel_size * self.in_channels

    def out_shape(self, height: int, width: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        out_h = (height + 2 * p - k) // s + 1
        out_w = (width + 2 * p - k) // s + 1
        if out_h < 1 or out_w < 1:
            raise ValueError(
                f"convolution output would be {out_h}x{out_w} for input "
                f"{height}x{width} (k={k}, s={s}, p={p})"
            )
        return out_h, out_w

    def conv_flops(self, height: int, width: int) -> int:
        """Dense cost for one frame: 2 k^2 C_in C_out H_out W_out."""
        out_h, out_w = self.out_shape(height, width)
        return 2 * self.block_size * self.out_channels * out_h * out_w


@dataclass
class SparseBlock:
    """Thresholded residual for one receptive field.

    Entries are parallel arrays of (channel, dy, dx, value) with every
    stored value nonzero; ``anchor`` is the output position the block
    compensates.
    """

    anchor: tuple[int, int]
    channels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    dys: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    dxs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.int32)
        self.dys = np.asarray(self.dys, dtype=np.int32)
        self.dxs = np.asarray(self.dxs, dtype=np.int32)
        self.values = np.asarray(self.values, dtype=np.float32)
        n = self.channels.shape[0]
        if not (self.dys.shape == self.dxs.shape == self.values.shape == (n,)):
            raise ValueError("entry arrays must have identical length")
        if n and (not np.isfinite(self.values).all() or (self.values == 0.0).any()):
            raise ValueError("entry values must be finite and nonzero")

    @classmethod
    def empty(cls, anchor: tuple[int, int] = (0, 0)) -> "SparseBlock":
        return cls(anchor=anchor)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def entries(self) -> Iterator[tuple[int, int, int, float]]:
        for c, dy, dx, v in zip(self.channels, self.dys, self.dxs, self.values):
            yield int(c), int(dy), int(dx), float(v)

    def densify(self, in_channels: int, kernel_size: int) -> np.ndarray:
        """Expand to a dense (C_in, k, k) block of the entry values."""
        dense = np.zeros((in_channels, kernel_size, kernel_size), dtype=np.float32)
        dense[self.channels, self.dys, self.dxs] = self.values
        return dense


def unfold_blocks(
    x: np.ndarray, kernel_size: int, stride: int, padding: int, extra_steps: int = 0
) -> np.ndarray:
    """Gather every receptive field on the output grid into one array.

    Returns ``(grid_h, grid_w, C*k*k)`` float32 where the grid equals the
    convolution output dims plus ``extra_steps`` whole grid steps on every
    side; positions reaching past the frame read zeros. Flat block layout
    is (channel, dy, dx), matching ``weights.reshape(C_out, -1)``.
    """
    c, h, w = x.shape
    k, s, e = kernel_size, stride, extra_steps
    pad = padding + e * s
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    padded[:, pad : pad + h, pad : pad + w] = x
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    win = win[:, ::s, ::s]  # (C, grid_h, grid_w, k, k)
    grid_h, grid_w = win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(grid_h, grid_w, c * k * k)


def conv2d(
    x: FeatureMap, spec: ConvSpec, ledger: FlopsLedger | None, category: str = "key"
) -> FeatureMap:
    """Dense 2-D convolution with zero padding and optional bias.

    output(o, i, j) = bias[o] + sum_{c,dy,dx} weights[o,c,dy,dx] *
    padded_input(c, i*s + dy - p, j*s + dx - p). Charges the full dense
    cost to ``ledger`` under ``category`` (key frames by default; pass
    "unmatched" for fallback work). ``ledger=None`` skips accounting.
    """
    x = ensure_feature_map(x, channels=spec.in_channels)
    h, w = x.shape[1], x.shape[2]
    out_h, out_w = spec.out_shape(h, w)
    blocks = unfold_blocks(x, spec.kernel_size, spec.stride, spec.padding)
    flat = blocks.reshape(out_h * out_w, -1)
    out = flat @ spec.weights.reshape(spec.out_channels, -1).T
    if spec.bias is not None:
        out = out + spec.bias
    if ledger is not None:
        ledger.charge(category, spec.conv_flops(h, w))
    result = np.ascontiguousarray(out.reshape(out_h, out_w, -1).transpose(2, 0, 1))
    if not np.isfinite(result).all():
        raise ValueError("convolution produced non-finite values")
    return result


def extract_block(x: FeatureMap, spec: ConvSpec, i: int, j: int) -> np.ndarray:
    """Dense (C_in, k, k) receptive field of output position (i, j),
    zero-filled where the field extends past the frame."""
    x = ensure_feature_map(x, channels=spec.in_channels)
    h, w = x.shape[1], x.shape[2]
    out_h, out_w = spec.out_shape(h, w)
    if not (0 <= i < out_h and 0 <= j < out_w):
        raise ValueError(f"position ({i}, {j}) outside output grid {out_h}x{out_w}")
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    return read_block_at(x, i * s - p, j * s - p, k)


def read_block_at(x: np.ndarray, y0: int, x0: int, k: int) -> np.ndarray:
    """Read a (C, k, k) window anchored at input pixel (y0, x0), zero-padded."""
    c, h, w = x.shape
    block = np.zeros((c, k, k), dtype=np.float32)
    y_lo, y_hi = max(0, y0), min(h, y0 + k)
    x_lo, x_hi = max(0, x0), min(w, x0 + k)
    if y_lo < y_hi and x_lo < x_hi:
        block[:, y_lo - y0 : y_hi - y0, x_lo - x0 : x_hi - x0] = x[:, y_lo:y_hi, x_lo:x_hi]
    return block


def conv_sparse_block(
    block: SparseBlock, spec: ConvSpec, ledger: FlopsLedger | None
) -> np.ndarray:
    """Convolve one sparse residual block: out[o] = sum over entries of
    weights[o, c, dy, dx] * value. No bias (the predicted output already
    carries it). Charges 2 * nnz * C_out; an empty block charges nothing.
    """
    k = spec.kernel_size
    if block.nnz == 0:
        return np.zeros(spec.out_channels, dtype=np.float32)
    if (
        (block.channels < 0).any()
        or (block.channels >= spec.in_channels).any()
        or (block.dys < 0).any()
        or (block.dys >= k).any()
        or (block.dxs < 0).any()
        or (block.dxs >= k).any()
    ):
        raise ValueError(
            f"sparse block at position {block.anchor} has entries outside "
            f"kernel bounds (k={k}, C_in={spec.in_channels})"
        )
    gathered = spec.weights[:, block.channels, block.dys, block.dxs]  # (C_out, nnz)
    out = gathered @ block.values
    if ledger is not None:
        ledger.charge("res", 2 * block.nnz * spec.out_channels)
    return out.astype(np.float32, copy=False)


def save_weights(spec: ConvSpec, path) -> Path:
    """Write weights as flat little-endian float32 in (C_out, C_in, k, k)
    order, bias (when present) appended, plus a JSON sidecar at
    ``<path>.json`` describing the layer geometry."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(spec.weights.astype("<f4").tobytes())
        if spec.bias is not None:
            fh.write(spec.bias.astype("<f4").tobytes())
    sidecar = {
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "kernel_size": spec.kernel_size,
        "stride": spec.stride,
        "padding": spec.padding,
        "has_bias": spec.bias is not None,
    }
    sidecar_path = Path(str(path) + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    return sidecar_path


def load_weights(path, sidecar=None) -> ConvSpec:
    """Load a ConvSpec written by ``save_weights``."""
    path = Path(path)
    sidecar_path = Path(sidecar) if sidecar is not None else Path(str(path) + ".json")
    meta = json.loads(sidecar_path.read_text())
    c_out, c_in, k = meta["out_channels"], meta["in_channels"], meta["kernel_size"]
    n_weights = c_out * c_in * k * k
    raw = np.fromfile(path, dtype="<f4")
    expected = n_weights + (c_out if meta["has_bias"] else 0)
    if raw.size != expected:
        raise ValueError(
            f"weights file {path} holds {raw.size} floats, expected {expected}"
        )
    weights = raw[:n_weights].reshape(c_out, c_in, k, k)
    bias = raw[n_weights:] if meta["has_bias"] else None
    return ConvSpec(weights=weights, bias=bias, stride=meta["stride"], padding=meta["padding"])
